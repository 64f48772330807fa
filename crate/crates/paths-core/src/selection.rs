//! Top-down selection: keep the `K` most important patches of a level and
//! zoom into their tissue-bearing children at the next level.

use std::collections::BTreeMap;

use crate::error::{PathsError, Result};
use crate::features::{FeatureGrid, PatchRef};
use crate::pyramid::TissueMask;

/// `(⌊u/M⌋, ⌊v/M⌋)`: the patch one level up that covers `(u, v)`.
#[inline]
pub fn parent_coords(u: usize, v: usize, m: usize) -> (usize, usize) {
    (u / m, v / m)
}

/// Hidden and cell vectors of the shared recurrent unit.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

/// Importance per selected patch of one level.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceMap {
    pub level_index: usize,
    pub entries: BTreeMap<(usize, usize), f64>,
}

impl ImportanceMap {
    pub fn new(level_index: usize) -> Self {
        ImportanceMap {
            level_index,
            entries: BTreeMap::new(),
        }
    }

    /// Builds a map from values aligned with `state.selected`.
    pub fn from_aligned(state: &SelectionState, alpha: &[f64]) -> Self {
        ImportanceMap {
            level_index: state.level_index,
            entries: state
                .selected
                .iter()
                .zip(alpha)
                .map(|(r, &a)| ((r.u, r.v), a))
                .collect(),
        }
    }

    pub fn get(&self, u: usize, v: usize) -> Option<f64> {
        self.entries.get(&(u, v)).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// The patches selected at one level, with what each inherits from its
/// ancestors.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionState {
    pub level_index: usize,
    pub selected: Vec<PatchRef>,
    /// Recurrent state handed down from the parent; `None` at level 0.
    pub context_states: Vec<Option<RecurrentState>>,
    /// Raw ancestor embeddings, coarsest first.
    pub context_embeddings: Vec<Vec<Vec<f32>>>,
    /// Position of each patch's parent in the previous level's selection.
    pub parents: Vec<Option<usize>>,
    /// Position of each entry in the selection it was filtered from.
    pub source: Vec<usize>,
}

impl SelectionState {
    pub fn empty(level_index: usize) -> Self {
        SelectionState {
            level_index,
            selected: Vec::new(),
            context_states: Vec::new(),
            context_embeddings: Vec::new(),
            parents: Vec::new(),
            source: Vec::new(),
        }
    }

    /// Every foreground patch of the coarsest level, row-major.
    pub fn initial(mask: &TissueMask) -> Self {
        let selected: Vec<PatchRef> = mask
            .foreground()
            .into_iter()
            .map(|(u, v)| PatchRef::new(mask.level_index, u, v))
            .collect();
        let n = selected.len();
        SelectionState {
            level_index: mask.level_index,
            selected,
            context_states: vec![None; n],
            context_embeddings: vec![Vec::new(); n],
            parents: vec![None; n],
            source: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn coords(&self) -> Vec<(usize, usize)> {
        self.selected.iter().map(|r| (r.u, r.v)).collect()
    }

    /// Replaces inherited state with the post-step state of each patch and
    /// appends each patch's own embedding to its context, ready to hand
    /// down to children.
    pub fn advance(&self, new_states: Vec<Option<RecurrentState>>, own: Vec<Vec<f32>>) -> SelectionState {
        let context_embeddings = self
            .context_embeddings
            .iter()
            .zip(own)
            .map(|(ctx, e)| {
                let mut next = ctx.clone();
                next.push(e);
                next
            })
            .collect();
        SelectionState {
            context_states: new_states,
            context_embeddings,
            ..self.clone()
        }
    }
}

/// Keeps the `K` patches of highest importance; ties go to the smaller
/// `(u, v)`. Retained entries keep their relative order.
pub fn filter_top_k(state: &SelectionState, alpha: &ImportanceMap, k: usize) -> Result<SelectionState> {
    if k == 0 {
        return Err(PathsError::InvalidConfig("K must be positive".into()));
    }
    if alpha.len() != state.len() {
        return Err(PathsError::Coverage(format!(
            "{} importances for {} selected patches",
            alpha.len(),
            state.len()
        )));
    }
    let mut scored = Vec::with_capacity(state.len());
    for (i, r) in state.selected.iter().enumerate() {
        let a = alpha.get(r.u, r.v).ok_or_else(|| {
            PathsError::Coverage(format!("no importance for patch ({}, {})", r.u, r.v))
        })?;
        scored.push((a, r.u, r.v, i));
    }
    scored.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut keep: Vec<usize> = scored.iter().take(k).map(|t| t.3).collect();
    keep.sort_unstable();
    Ok(SelectionState {
        level_index: state.level_index,
        selected: keep.iter().map(|&i| state.selected[i]).collect(),
        context_states: keep.iter().map(|&i| state.context_states[i].clone()).collect(),
        context_embeddings: keep.iter().map(|&i| state.context_embeddings[i].clone()).collect(),
        parents: keep.iter().map(|&i| state.parents[i]).collect(),
        source: keep.iter().map(|&i| state.source[i]).collect(),
    })
}

/// Expands each retained patch into its `M²` children one level down,
/// dropping children without tissue. Children inherit the parent's state
/// and context.
pub fn magnify(state: &SelectionState, masks: &[TissueMask], m: usize) -> Result<SelectionState> {
    let next = state.level_index + 1;
    let mask = masks.get(next).ok_or(PathsError::HierarchyExhausted {
        level: state.level_index,
        levels: masks.len(),
    })?;
    let mut out = SelectionState::empty(next);
    for (j, r) in state.selected.iter().enumerate() {
        for b in 0..m {
            for a in 0..m {
                let (u, v) = (m * r.u + a, m * r.v + b);
                if !mask.has_tissue(u, v) {
                    continue;
                }
                out.selected.push(PatchRef::new(next, u, v));
                out.context_states.push(state.context_states[j].clone());
                out.context_embeddings.push(state.context_embeddings[j].clone());
                out.parents.push(Some(state.source[j]));
            }
        }
    }
    out.source = (0..out.selected.len()).collect();
    Ok(out)
}

/// Ancestor embeddings of `r`, coarsest first; empty at level 0.
pub fn hierarchical_context(r: PatchRef, grids: &[FeatureGrid], m: usize) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(r.level);
    let (mut u, mut v) = (r.u, r.v);
    for level in (0..r.level).rev() {
        (u, v) = parent_coords(u, v, m);
        let grid = grids
            .get(level)
            .ok_or_else(|| PathsError::Dependency(format!("feature grid for level {level} missing")))?;
        if u >= grid.grid_w || v >= grid.grid_h {
            return Err(PathsError::Bounds(format!(
                "ancestor ({u}, {v}) outside level {level} grid"
            )));
        }
        out.push(grid.embedding(u, v).to_vec());
    }
    out.reverse();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn state_of(level: usize, coords: &[(usize, usize)]) -> SelectionState {
        let n = coords.len();
        SelectionState {
            level_index: level,
            selected: coords.iter().map(|&(u, v)| PatchRef::new(level, u, v)).collect(),
            context_states: vec![None; n],
            context_embeddings: vec![Vec::new(); n],
            parents: vec![None; n],
            source: (0..n).collect(),
        }
    }

    fn alpha_of(level: usize, pairs: &[((usize, usize), f64)]) -> ImportanceMap {
        ImportanceMap {
            level_index: level,
            entries: pairs.iter().copied().collect(),
        }
    }

    #[test]
    fn parent_arithmetic() {
        assert_eq!(parent_coords(5, 3, 2), (2, 1));
        assert_eq!(parent_coords(0, 0, 2), (0, 0));
        assert_eq!(parent_coords(7, 7, 4), (1, 1));
    }

    #[test]
    fn top_k_orders_by_importance() {
        let s = state_of(0, &[(0, 0), (0, 1), (1, 0)]);
        let a = alpha_of(0, &[((0, 0), 0.9), ((0, 1), 0.5), ((1, 0), 0.7)]);
        let f = filter_top_k(&s, &a, 2).unwrap();
        assert_eq!(f.coords(), vec![(0, 0), (1, 0)]);
        assert_eq!(f.source, vec![0, 2]);
    }

    #[test]
    fn top_k_identity_when_k_large() {
        let s = state_of(0, &[(0, 0), (0, 1), (1, 0)]);
        let a = alpha_of(0, &[((0, 0), 0.1), ((0, 1), 0.5), ((1, 0), 0.7)]);
        assert_eq!(filter_top_k(&s, &a, 3).unwrap(), s);
        assert_eq!(filter_top_k(&s, &a, 10).unwrap(), s);
    }

    #[test]
    fn top_k_ties_are_lexicographic() {
        let s = state_of(0, &[(1, 0), (0, 1), (0, 0)]);
        let a = alpha_of(0, &[((0, 0), 0.5), ((0, 1), 0.5), ((1, 0), 0.5)]);
        let mut kept = filter_top_k(&s, &a, 2).unwrap().coords();
        kept.sort();
        assert_eq!(kept, vec![(0, 0), (0, 1)]);
    }

    #[test]
    fn top_k_errors() {
        let s = state_of(0, &[(0, 0)]);
        let a = alpha_of(0, &[((0, 0), 0.5)]);
        assert!(matches!(filter_top_k(&s, &a, 0), Err(PathsError::InvalidConfig(_))));
        let wrong = alpha_of(0, &[((1, 1), 0.5)]);
        assert!(matches!(filter_top_k(&s, &wrong, 1), Err(PathsError::Coverage(_))));
    }

    #[test]
    fn magnify_single_parent() {
        let s = state_of(0, &[(3, 1)]);
        let masks = vec![TissueMask::full(0, 4, 4, true), TissueMask::full(1, 8, 8, true)];
        let out = magnify(&s, &masks, 2).unwrap();
        let mut c = out.coords();
        c.sort();
        assert_eq!(c, vec![(6, 2), (6, 3), (7, 2), (7, 3)]);
        assert!(out.parents.iter().all(|p| *p == Some(0)));
        assert_eq!(out.level_index, 1);
    }

    #[test]
    fn magnify_drops_background() {
        let s = state_of(0, &[(0, 0)]);
        let masks = vec![TissueMask::full(0, 2, 2, true), TissueMask::full(1, 4, 4, false)];
        assert!(magnify(&s, &masks, 2).unwrap().is_empty());
        assert!(matches!(
            magnify(&state_of(1, &[(0, 0)]), &masks, 2),
            Err(PathsError::HierarchyExhausted { level: 1, levels: 2 })
        ));
    }

    #[test]
    fn twenty_parents_make_eighty_children() {
        let coords: Vec<_> = (0..20).map(|i| (i % 5, i / 5)).collect();
        let masks = vec![TissueMask::full(0, 5, 4, true), TissueMask::full(1, 10, 8, true)];
        assert_eq!(magnify(&state_of(0, &coords), &masks, 2).unwrap().len(), 80);
    }

    fn grids_for(sizes: &[usize], d: usize) -> Vec<FeatureGrid> {
        sizes
            .iter()
            .enumerate()
            .map(|(l, &n)| {
                let mut g = FeatureGrid::zeros(l, 1.0, n, n, d);
                for (i, x) in g.data.iter_mut().enumerate() {
                    *x = (l * 10_000 + i) as f32;
                }
                g
            })
            .collect()
    }

    #[test]
    fn context_at_level_two() {
        let grids = grids_for(&[4, 8, 16], 1);
        assert!(hierarchical_context(PatchRef::new(0, 1, 1), &grids, 2).unwrap().is_empty());
        let ctx = hierarchical_context(PatchRef::new(2, 5, 3), &grids, 2).unwrap();
        assert_eq!(ctx, vec![grids[0].embedding(1, 0).to_vec(), grids[1].embedding(2, 1).to_vec()]);
        assert!(matches!(
            hierarchical_context(PatchRef::new(2, 5, 3), &grids[..1], 2),
            Err(PathsError::Dependency(_))
        ));
    }

    proptest! {
        #[test]
        fn context_extends_parent_context(u in 0usize..32, v in 0usize..32, level in 1usize..4) {
            let grids = grids_for(&[4, 8, 16, 32], 2);
            let scale = 1usize << (3 - level);
            let (u, v) = (u / scale, v / scale);
            let child = PatchRef::new(level, u, v);
            let (pu, pv) = parent_coords(u, v, 2);
            let parent = PatchRef::new(level - 1, pu, pv);
            let mut via_parent = hierarchical_context(parent, &grids, 2).unwrap();
            via_parent.push(grids[level - 1].embedding(pu, pv).to_vec());
            let direct = hierarchical_context(child, &grids, 2).unwrap();
            prop_assert_eq!(direct.len(), level);
            prop_assert_eq!(via_parent, direct);
        }

        #[test]
        fn filter_then_magnify_bound(
            alphas in proptest::collection::vec(0.0f64..1.0, 64),
            mask_bits in proptest::collection::vec(any::<bool>(), 256),
            k in 1usize..30,
        ) {
            let coords: Vec<_> = (0..64).map(|i| (i % 8, i / 8)).collect();
            let s = state_of(0, &coords);
            let a = ImportanceMap::from_aligned(&s, &alphas);
            let f = filter_top_k(&s, &a, k).unwrap();
            prop_assert_eq!(f.len(), k.min(64));
            prop_assert!(f.selected.iter().all(|r| s.selected.contains(r)));
            let masks = vec![
                TissueMask::full(0, 8, 8, true),
                TissueMask::new(1, 16, 16, mask_bits).unwrap(),
            ];
            let out = magnify(&f, &masks, 2).unwrap();
            prop_assert!(out.len() <= 4 * k);
            for r in &out.selected {
                prop_assert!(f.coords().contains(&parent_coords(r.u, r.v, 2)));
                prop_assert!(masks[1].has_tissue(r.u, r.v));
            }
        }
    }
}
