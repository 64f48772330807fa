use paths::analysis::{latency_benchmark, BenchMode};
use paths::dataset::synthetic_slide;
use paths::model::{paths_forward, random_importance_seed, ForwardOptions, ProcessorParams};
use paths::pyramid::{generate_synthetic_slide, save_slide, SyntheticSpec};
use paths::train::inference_options;
use paths::{AblationMode, ContextMode, FeatureGrid, PathsConfig, SelectionMode};

fn full_grids(cfg: &PathsConfig, side0: usize) -> Vec<FeatureGrid> {
    (0..cfg.n)
        .map(|l| {
            let side = side0 * cfg.m.pow(l as u32);
            let mut g = FeatureGrid::zeros(l, 1.0, side, side, cfg.d);
            for (i, x) in g.data.iter_mut().enumerate() {
                *x = ((i * 37 % 101) as f32 - 50.0) / 50.0;
            }
            g.foreground.iter_mut().for_each(|f| *f = true);
            g
        })
        .collect()
}

/// Under random selection every coarse patch is kept with probability K/N.
#[test]
fn random_selection_is_uniform() {
    let cfg = PathsConfig {
        n: 2,
        k: 4,
        ..PathsConfig::desk()
    };
    let grids = full_grids(&cfg, 4);
    let params = ProcessorParams::new(&cfg, 1);
    let trials = 4000;
    let mut kept = [0u32; 16];
    for t in 0..trials {
        let opts = ForwardOptions {
            random_importance: Some(t),
            ..ForwardOptions::default()
        };
        let out = paths_forward(&grids, &params, &cfg, &opts).unwrap();
        let mut parents: Vec<(usize, usize)> = out.levels[1]
            .state
            .selected
            .iter()
            .map(|r| (r.u / 2, r.v / 2))
            .collect();
        parents.dedup();
        assert_eq!(parents.len(), cfg.k);
        for (u, v) in parents {
            kept[v * 4 + u] += 1;
        }
    }
    let expected = f64::from(trials as u32) * cfg.k as f64 / 16.0;
    let chi2: f64 = kept.iter().map(|&o| (f64::from(o) - expected).powi(2) / expected).sum();
    // 15 degrees of freedom, p = 0.001
    assert!(chi2 < 37.70, "chi² = {chi2:.2}, counts {kept:?}");
}

#[test]
fn random_selection_is_seeded_per_slide() {
    let cfg = PathsConfig::desk();
    let random = AblationMode::new(ContextMode::Both, SelectionMode::Random);
    let a = inference_options(&cfg, random, "slide_0001");
    let b = inference_options(&cfg, random, "slide_0002");
    assert_eq!(a.random_importance, Some(random_importance_seed(cfg.seed, "slide_0001")));
    assert_ne!(a.random_importance, b.random_importance);
    assert_eq!(inference_options(&cfg, AblationMode::default(), "slide_0001"), ForwardOptions::default());
}

#[test]
fn latency_benchmark_counts_and_scaling() {
    let cfg = PathsConfig::desk();
    let params = ProcessorParams::new(&cfg, 3);
    let t = tempfile::tempdir().unwrap();
    let mut full_ms = Vec::new();
    for finest in [16usize, 32, 64] {
        let (pyramid, _) = generate_synthetic_slide(&SyntheticSpec::full_tissue(1, (finest, finest)), &cfg).unwrap();
        let dir = t.path().join(format!("g{finest}"));
        save_slide(&dir, &pyramid, None).unwrap();
        let dirs = vec![dir];

        let p = latency_benchmark(&dirs, &params, &cfg, BenchMode::Paths).unwrap();
        let stages = p.stages.as_ref().unwrap();
        assert_eq!(stages.embedded[0], p.slides[0].paths_total);

        let f = latency_benchmark(&dirs, &params, &cfg, BenchMode::Full).unwrap();
        let stages = f.stages.as_ref().unwrap();
        assert_eq!(stages.embedded[0], finest * finest);
        assert_eq!(f.slides[0].full_total, finest * finest);
        full_ms.push(stages.embed.mean_ms + stages.forward.mean_ms);
    }
    assert!(full_ms.windows(2).all(|w| w[0] < w[1]), "{full_ms:?}");
}

#[test]
fn latency_benchmark_needs_slides() {
    let cfg = PathsConfig::desk();
    let params = ProcessorParams::new(&cfg, 3);
    assert!(latency_benchmark(&[], &params, &cfg, BenchMode::Paths).is_err());
}

#[test]
fn cohort_mixes_lesion_and_clean_slides() {
    let cfg = PathsConfig::desk();
    let slides: Vec<_> = (0..40).map(|i| synthetic_slide(i, 16, &cfg, 11).unwrap()).collect();
    for s in &slides {
        let grades: f64 = s.truth.lesion_grades.iter().sum();
        assert_eq!(s.truth.risk, grades);
    }
    assert!(slides.iter().any(|s| s.truth.lesion_grades.is_empty()));
    assert!(slides.iter().any(|s| s.truth.risk > 0.0));
}
