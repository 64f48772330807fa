//! Discrete-time survival: bucket quantisation, the censored negative
//! log-likelihood, a scalar risk score and Harrell's concordance index.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PathsError, Result};
use crate::nn::sigmoid;

/// Probabilities are clamped to `[EPS, 1 − EPS]` before taking logs.
pub const EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub slide_id: String,
    /// Days; strictly positive.
    pub time: f64,
    /// `true` when the event was not observed.
    pub censored: bool,
    pub bucket: usize,
}

impl SurvivalRecord {
    pub fn new(slide_id: impl Into<String>, time: f64, censored: bool) -> Self {
        SurvivalRecord {
            slide_id: slide_id.into(),
            time,
            censored,
            bucket: 0,
        }
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Index of the bucket holding `time`: the number of edges strictly below
/// it, so a time equal to an edge lands in the lower bucket.
pub fn bucket_of(edges: &[f64], time: f64) -> usize {
    edges.partition_point(|&e| e < time)
}

/// Splits time at the `j/b` quantiles of the uncensored times and assigns
/// every record its bucket. Returns the `b − 1` inner edges.
pub fn quantise_survival(records: &[SurvivalRecord], b: usize) -> Result<(Vec<f64>, Vec<SurvivalRecord>)> {
    if b == 0 {
        return Err(PathsError::InvalidConfig("b must be positive".into()));
    }
    if let Some(r) = records.iter().find(|r| !(r.time > 0.0) || !r.time.is_finite()) {
        return Err(PathsError::Quantisation(format!(
            "record {} has non-positive time {}",
            r.slide_id, r.time
        )));
    }
    let mut events: Vec<f64> = records.iter().filter(|r| !r.censored).map(|r| r.time).collect();
    if events.len() < b {
        return Err(PathsError::Quantisation(format!(
            "{} uncensored records cannot fill {b} buckets",
            events.len()
        )));
    }
    events.sort_by(f64::total_cmp);
    let edges: Vec<f64> = (1..b).map(|j| quantile_sorted(&events, j as f64 / b as f64)).collect();
    let assigned = records
        .iter()
        .map(|r| SurvivalRecord {
            bucket: bucket_of(&edges, r.time),
            ..r.clone()
        })
        .collect();
    Ok((edges, assigned))
}

fn clamp_p(p: f64) -> (f64, bool) {
    if p < EPS {
        (EPS, true)
    } else if p > 1.0 - EPS {
        (1.0 - EPS, true)
    } else {
        (p, false)
    }
}

/// Loss value and gradient w.r.t. the logits.
///
/// With hazards `h = σ(logits)`, survival `S_k = Π_{j≤k}(1 − h_j)` and
/// `c = 1` for censored records:
/// `U = −(1−c)[log S_{y−1} + log h_y]`, `C = −c log S_y`,
/// `loss = (1 − α)(U + C) + α U`.
pub fn nll_surv_loss_with_grad(logits: &[f64], bucket: usize, censored: bool, loss_alpha: f64) -> Result<(f64, Vec<f64>)> {
    let b = logits.len();
    if bucket >= b {
        return Err(PathsError::Index(format!("bucket {bucket} out of range for {b} logits")));
    }
    if let Some(i) = logits.iter().position(|l| !l.is_finite()) {
        return Err(PathsError::Numeric(format!("logit {i} is not finite")));
    }
    let hazards: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
    let mut grad = vec![0.0; b];
    // −log S_k has derivative h_j with respect to logit j ≤ k
    let neg_log_survival = |k: Option<usize>, weight: f64, grad: &mut [f64]| -> f64 {
        let Some(k) = k else { return 0.0 };
        let s: f64 = hazards[..=k].iter().map(|h| 1.0 - h).product();
        let (p, clamped) = clamp_p(s);
        if !clamped {
            for j in 0..=k {
                grad[j] += weight * hazards[j];
            }
        }
        -p.ln()
    };
    let alpha = loss_alpha;
    let loss = if censored {
        let w = 1.0 - alpha;
        w * neg_log_survival(Some(bucket), w, &mut grad)
    } else {
        // (1 − α)·U + α·U = U
        let prior = neg_log_survival(bucket.checked_sub(1), 1.0, &mut grad);
        let (h, clamped) = clamp_p(hazards[bucket]);
        if !clamped {
            grad[bucket] -= 1.0 - hazards[bucket];
        }
        prior - h.ln()
    };
    Ok((loss, grad))
}

pub fn nll_surv_loss(logits: &[f64], bucket: usize, censored: bool, loss_alpha: f64) -> Result<f64> {
    nll_surv_loss_with_grad(logits, bucket, censored, loss_alpha).map(|(l, _)| l)
}

/// Negative expected discrete survival, `−Σ_k S_k`.
pub fn risk_from_logits(logits: &[f64]) -> f64 {
    let mut s = 1.0;
    let mut total = 0.0;
    for &l in logits {
        s *= 1.0 - sigmoid(l);
        total += s;
    }
    -total
}

/// Fenwick tree over risk ranks.
struct Fenwick(Vec<u64>);

impl Fenwick {
    fn add(&mut self, mut i: usize) {
        i += 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted ranks `< i`.
    fn prefix(&self, mut i: usize) -> u64 {
        let mut s = 0;
        while i > 0 {
            s += self.0[i];
            i &= i - 1;
        }
        s
    }
}

/// Harrell's c-index. A pair with `time_i < time_j` is comparable when `i`
/// is uncensored, concordant when `risk_i > risk_j`; risk ties score 0.5.
/// Runs in `O(n log n)`.
pub fn concordance_index(risks: &[f64], records: &[SurvivalRecord]) -> Result<f64> {
    if risks.len() != records.len() {
        return Err(PathsError::Shape(format!(
            "{} risks for {} records",
            risks.len(),
            records.len()
        )));
    }
    if risks.iter().any(|r| r.is_nan()) {
        return Err(PathsError::Numeric("NaN risk".into()));
    }
    let mut ranks_sorted: Vec<f64> = risks.to_vec();
    ranks_sorted.sort_by(f64::total_cmp);
    ranks_sorted.dedup();
    let rank = |r: f64| ranks_sorted.partition_point(|&x| x < r);

    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[b].time.total_cmp(&records[a].time));
    let mut tree = Fenwick(vec![0; ranks_sorted.len() + 1]);
    let mut inserted = 0u64;
    let (mut concordant, mut tied, mut comparable) = (0u64, 0u64, 0u64);
    let mut start = 0;
    while start < order.len() {
        let t = records[order[start]].time;
        let mut end = start;
        while end < order.len() && records[order[end]].time == t {
            end += 1;
        }
        // everything inserted so far has a strictly later time
        for &i in &order[start..end] {
            if records[i].censored {
                continue;
            }
            let r = rank(risks[i]);
            let below = tree.prefix(r);
            let at_or_below = tree.prefix(r + 1);
            concordant += below;
            tied += at_or_below - below;
            comparable += inserted;
        }
        for &i in &order[start..end] {
            tree.add(rank(risks[i]));
            inserted += 1;
        }
        start = end;
    }
    if comparable == 0 {
        return Err(PathsError::UndefinedMetric("no comparable pairs".into()));
    }
    Ok((concordant as f64 + 0.5 * tied as f64) / comparable as f64)
}

#[derive(Debug, Deserialize, Serialize)]
struct LabelRow {
    slide_id: String,
    time_days: f64,
    censored: u8,
}

pub fn read_labels(path: &Path) -> Result<Vec<SurvivalRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["slide_id", "time_days", "censored"] {
        return Err(PathsError::format(0, "labels header must be `slide_id,time_days,censored`"));
    }
    let mut out = Vec::new();
    for row in reader.deserialize::<LabelRow>() {
        let row = row.map_err(|e| csv_err(path, e))?;
        if row.censored > 1 {
            return Err(PathsError::format(0, format!("censored flag {} is not 0/1", row.censored)));
        }
        out.push(SurvivalRecord::new(row.slide_id, row.time_days, row.censored == 1));
    }
    Ok(out)
}

pub fn write_labels(path: &Path, records: &[SurvivalRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in records {
        w.serialize(LabelRow {
            slide_id: r.slide_id.clone(),
            time_days: r.time,
            censored: u8::from(r.censored),
        })
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| PathsError::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> PathsError {
    let offset = e.position().map(|p| p.byte()).unwrap_or(0);
    PathsError::format(offset, format!("{}: {e}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn rec(time: f64, censored: bool) -> SurvivalRecord {
        SurvivalRecord::new("s", time, censored)
    }

    /// O(n²) enumeration of every ordered pair.
    fn brute_cindex(risks: &[f64], recs: &[SurvivalRecord]) -> Option<f64> {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..recs.len() {
            for j in 0..recs.len() {
                if recs[i].time < recs[j].time && !recs[i].censored {
                    den += 1.0;
                    if risks[i] > risks[j] {
                        num += 1.0;
                    } else if risks[i] == risks[j] {
                        num += 0.5;
                    }
                }
            }
        }
        (den > 0.0).then(|| num / den)
    }

    #[test]
    fn equal_split_of_eight() {
        let recs: Vec<_> = (1..=8).map(|t| rec(t as f64, false)).collect();
        let (edges, out) = quantise_survival(&recs, 4).unwrap();
        assert_eq!(edges.len(), 3);
        let buckets: Vec<_> = out.iter().map(|r| r.bucket).collect();
        assert_eq!(buckets, vec![0, 0, 1, 1, 2, 2, 3, 3]);
    }

    #[test]
    fn one_bucket() {
        let recs = vec![rec(3.0, false), rec(1.0, true), rec(9.0, true)];
        let (edges, out) = quantise_survival(&recs, 1).unwrap();
        assert!(edges.is_empty());
        assert!(out.iter().all(|r| r.bucket == 0));
    }

    #[test]
    fn too_few_events() {
        let recs = vec![rec(3.0, false), rec(1.0, true), rec(9.0, true)];
        assert!(matches!(quantise_survival(&recs, 2), Err(PathsError::Quantisation(_))));
    }

    #[test]
    fn edge_time_goes_to_lower_bucket() {
        assert_eq!(bucket_of(&[2.0, 5.0], 2.0), 0);
        assert_eq!(bucket_of(&[2.0, 5.0], 2.0001), 1);
        assert_eq!(bucket_of(&[2.0, 5.0], 99.0), 2);
    }

    #[test]
    fn forty_record_fixture_matches_sort_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(40);
        let recs: Vec<_> = (0..40)
            .map(|_| rec(rng.random_range(1.0..2000.0f64).round(), rng.random_bool(0.35)))
            .collect();
        let (_, out) = quantise_survival(&recs, 4).unwrap();
        // oracle: rank events, edge j sits between sorted positions
        let mut ev: Vec<f64> = recs.iter().filter(|r| !r.censored).map(|r| r.time).collect();
        ev.sort_by(f64::total_cmp);
        let m = ev.len() as f64;
        for r in &out {
            let mut want = 0;
            for j in 1..4 {
                let pos = j as f64 / 4.0 * (m - 1.0);
                let (lo, frac) = (pos.floor() as usize, pos.fract());
                let edge = if frac == 0.0 { ev[lo] } else { ev[lo] * (1.0 - frac) + ev[lo + 1] * frac };
                if r.time > edge {
                    want += 1;
                }
            }
            assert_eq!(r.bucket, want, "time {}", r.time);
        }
    }

    #[test]
    fn perfect_prediction_loss_vanishes() {
        let logits = [-40.0, -40.0, 40.0, 40.0];
        let l = nll_surv_loss(&logits, 2, false, 0.6).unwrap();
        assert!(l < 3e-7, "{l}");
        let l = nll_surv_loss(&[-40.0; 4], 3, true, 0.6).unwrap();
        assert!(l < 1e-6, "{l}");
    }

    #[test]
    fn neutral_logits_value() {
        // h = 1/2, S_1 = 1/4: −log(1/4) − log(1/2) = log 8
        let l = nll_surv_loss(&[0.0; 4], 2, false, 0.6).unwrap();
        assert!((l - 8f64.ln()).abs() < 1e-15);
        // censored: (1 − α)(−log S_2) = 0.4 · log 8
        let l = nll_surv_loss(&[0.0; 4], 2, true, 0.6).unwrap();
        assert!((l - 0.4 * 8f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn bucket_out_of_range() {
        assert!(matches!(nll_surv_loss(&[0.0; 4], 4, false, 0.6), Err(PathsError::Index(_))));
    }

    #[test]
    fn risk_limits() {
        assert!(risk_from_logits(&[50.0; 4]).abs() < 1e-12);
        assert!((risk_from_logits(&[-50.0; 4]) + 4.0).abs() < 1e-12);
    }

    #[test]
    fn cindex_extremes() {
        let recs: Vec<_> = (1..=10).map(|t| rec(t as f64, false)).collect();
        let risks: Vec<f64> = (1..=10).map(|t| -(t as f64)).collect();
        assert_eq!(concordance_index(&risks, &recs).unwrap(), 1.0);
        let flipped: Vec<f64> = risks.iter().map(|r| -r).collect();
        assert_eq!(concordance_index(&flipped, &recs).unwrap(), 0.0);
        assert_eq!(concordance_index(&[1.0; 10], &recs).unwrap(), 0.5);
    }

    #[test]
    fn cindex_six_records_two_censored() {
        let recs = vec![
            rec(5.0, false),
            rec(8.0, true),
            rec(3.0, false),
            rec(12.0, false),
            rec(2.0, true),
            rec(8.0, false),
        ];
        let risks = [0.2, 0.2, 0.15, 0.1, 0.4, 0.1];
        let want = brute_cindex(&risks, &recs).unwrap();
        let got = concordance_index(&risks, &recs).unwrap();
        assert_eq!(got, want);
        // t=5: 0.5 + 1 + 1 over 3 pairs; t=3: 0 + 0 + 1 + 1 over 4; t=8: one tie
        assert_eq!(want, 5.0 / 8.0);
    }

    #[test]
    fn cindex_undefined_without_pairs() {
        let recs = vec![rec(1.0, true), rec(2.0, true)];
        assert!(matches!(
            concordance_index(&[0.0, 1.0], &recs),
            Err(PathsError::UndefinedMetric(_))
        ));
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.csv");
        let recs = vec![SurvivalRecord::new("a", 12.5, true), SurvivalRecord::new("b", 300.0, false)];
        write_labels(&p, &recs).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("slide_id,time_days,censored\n"));
        assert_eq!(read_labels(&p).unwrap(), recs);
    }

    proptest! {
        #[test]
        fn fast_cindex_equals_brute(seed in any::<u64>(), n in 2usize..60, cens in 0.0f64..0.9) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let recs: Vec<_> = (0..n).map(|_| rec(rng.random_range(1..30) as f64, rng.random_bool(cens))).collect();
            let risks: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64 * 0.5).collect();
            match brute_cindex(&risks, &recs) {
                Some(want) => prop_assert_eq!(concordance_index(&risks, &recs).unwrap(), want),
                None => prop_assert!(concordance_index(&risks, &recs).is_err()),
            }
        }

        #[test]
        fn cindex_symmetries(seed in any::<u64>(), n in 3usize..40) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let recs: Vec<_> = (0..n).map(|_| rec(rng.random_range(1.0..100.0), rng.random_bool(0.3))).collect();
            let risks: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            if let Ok(c) = concordance_index(&risks, &recs) {
                let neg: Vec<f64> = risks.iter().map(|r| -r).collect();
                prop_assert!((concordance_index(&neg, &recs).unwrap() - (1.0 - c)).abs() < 1e-12);
                let mono: Vec<f64> = risks.iter().map(|r| r.exp() * 3.0 + 1.0).collect();
                prop_assert_eq!(concordance_index(&mono, &recs).unwrap(), c);
            }
        }

        #[test]
        fn loss_is_non_negative(logits in proptest::collection::vec(-30.0f64..30.0, 1..6), y in 0usize..6, c in any::<bool>(), a in 0.0f64..1.0) {
            let y = y % logits.len();
            prop_assert!(nll_surv_loss(&logits, y, c, a).unwrap() >= 0.0);
        }

        #[test]
        fn loss_gradient_matches_differences(logits in proptest::collection::vec(-4.0f64..4.0, 1..6), y in 0usize..6, c in any::<bool>()) {
            let y = y % logits.len();
            let (_, g) = nll_surv_loss_with_grad(&logits, y, c, 0.6).unwrap();
            let eps = 1e-6;
            for j in 0..logits.len() {
                let mut p = logits.clone();
                let mut m = logits.clone();
                p[j] += eps;
                m[j] -= eps;
                let fd = (nll_surv_loss(&p, y, c, 0.6).unwrap() - nll_surv_loss(&m, y, c, 0.6).unwrap()) / (2.0 * eps);
                let rel = (fd - g[j]).abs() / g[j].abs().max(fd.abs()).max(1e-6);
                prop_assert!(rel < 1e-6, "j={} fd={} an={}", j, fd, g[j]);
            }
        }

        #[test]
        fn risk_increases_with_each_logit(logits in proptest::collection::vec(-5.0f64..5.0, 1..6), j in 0usize..6, bump in 0.01f64..2.0) {
            let j = j % logits.len();
            let mut up = logits.clone();
            up[j] += bump;
            prop_assert!(risk_from_logits(&up) > risk_from_logits(&logits));
        }

        #[test]
        fn uncensored_bucket_counts_balanced(n in 4usize..80, b in 1usize..6, seed in any::<u64>()) {
            prop_assume!(n >= b);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut times: Vec<f64> = (0..n).map(|i| i as f64 + 1.0).collect();
            for i in (1..n).rev() { times.swap(i, rng.random_range(0..=i)); }
            let recs: Vec<_> = times.iter().map(|&t| rec(t, false)).collect();
            let (_, out) = quantise_survival(&recs, b).unwrap();
            let mut counts = vec![0usize; b];
            for r in &out { counts[r.bucket] += 1; }
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            prop_assert!(hi - lo <= 1, "{:?}", counts);
        }
    }
}
