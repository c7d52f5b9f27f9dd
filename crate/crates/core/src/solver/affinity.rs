use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingSet;
use crate::error::{Result, StataError};

/// How the sample-to-sample affinity graph is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "k")]
pub enum AffinityMode {
    /// Every ordered pair `i != j`.
    Full,
    /// The `k` most similar other samples of each row. `Knn(0)` disables
    /// the Laplacian term.
    Knn(usize),
}

impl Default for AffinityMode {
    fn default() -> Self {
        AffinityMode::Knn(3)
    }
}

/// Sparse row-wise graph with weights `w_ij = f_iᵀ f_j`, stored as CSR.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityGraph {
    mode: AffinityMode,
    offsets: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
}

impl AffinityGraph {
    pub fn empty(n: usize) -> Self {
        Self { mode: AffinityMode::Knn(0), offsets: vec![0; n + 1], cols: Vec::new(), weights: Vec::new() }
    }

    pub fn mode(&self) -> AffinityMode {
        self.mode
    }

    pub fn n(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_edges(&self) -> usize {
        self.cols.len()
    }

    /// `(column, weight)` pairs of row `i`.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.offsets[i]..self.offsets[i + 1];
        self.cols[range.clone()].iter().copied().zip(self.weights[range].iter().copied())
    }

    /// Row `i` of `W z`, accumulated into `out`.
    pub(crate) fn propagate_row(&self, i: usize, z: ArrayView2<'_, f64>, out: &mut [f64]) {
        for (j, w) in self.neighbors(i) {
            let row = z.row(j);
            match row.as_slice() {
                Some(r) => out.iter_mut().zip(r).for_each(|(o, &v)| *o += w * v),
                None => out.iter_mut().zip(row).for_each(|(o, &v)| *o += w * v),
            }
        }
    }

    /// `W z` for an N×K matrix `z`.
    pub fn propagate(&self, z: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = Array2::zeros(z.dim());
        for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            self.propagate_row(i, z, row.as_slice_mut().expect("fresh array"));
        }
        out
    }
}

pub fn build_affinity(features: &EmbeddingSet, mode: AffinityMode) -> Result<AffinityGraph> {
    let n = features.n();
    let f = features.view();
    match mode {
        AffinityMode::Full => {
            let gram = crate::linalg::matmul(f, f.t());
            let mut offsets = Vec::with_capacity(n + 1);
            let mut cols = Vec::with_capacity(n * n.saturating_sub(1));
            let mut weights = Vec::with_capacity(n * n.saturating_sub(1));
            offsets.push(0);
            for i in 0..n {
                for j in (0..n).filter(|&j| j != i) {
                    cols.push(j);
                    weights.push(gram[[i, j]]);
                }
                offsets.push(cols.len());
            }
            Ok(AffinityGraph { mode, offsets, cols, weights })
        }
        AffinityMode::Knn(k) => {
            if k >= n && k > 0 {
                return Err(StataError::config(format!("knn k={k} must be smaller than the sample count {n}")));
            }
            if k == 0 {
                return Ok(AffinityGraph::empty(n));
            }
            let candidates = screen_candidates(f, k);
            let mut offsets = Vec::with_capacity(n + 1);
            let mut cols = Vec::with_capacity(n * k);
            let mut weights = Vec::with_capacity(n * k);
            offsets.push(0);
            let mut scored: Vec<(f64, usize)> = Vec::new();
            for (i, cand) in candidates.into_iter().enumerate() {
                let fi = f.row(i);
                scored.clear();
                scored.extend(cand.entries.iter().map(|&(_, j)| (fi.dot(&f.row(j as usize)), j as usize)));
                // Exact order: larger similarity first, lower index on ties.
                scored.sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                for &(w, j) in &scored[..k] {
                    cols.push(j);
                    weights.push(w);
                }
                offsets.push(cols.len());
            }
            Ok(AffinityGraph { mode: AffinityMode::Knn(k), offsets, cols, weights })
        }
    }
}

/// Rows (and columns) per similarity block in kNN screening.
const KNN_BLOCK: usize = 1024;

/// Per-row candidate list of the single-precision screen. Everything whose
/// screened similarity is within `2ε` of the row's k-th best survives, where
/// `ε` bounds the single-precision error, so the exact top k is a subset.
struct Candidates {
    entries: Vec<(f32, u32)>,
    threshold: f32,
    cap: usize,
}

impl Candidates {
    #[inline(always)]
    fn offer(&mut self, s: f32, j: u32, k: usize, margin: f32) {
        if s >= self.threshold {
            self.entries.push((s, j));
            if self.entries.len() > self.cap {
                self.prune(k, margin);
            }
        }
    }

    fn prune(&mut self, k: usize, margin: f32) {
        if self.entries.len() < k {
            return;
        }
        let mut vals: Vec<f32> = self.entries.iter().map(|e| e.0).collect();
        let (_, kth, _) = vals.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
        self.threshold = self.threshold.max(*kth - margin);
        let t = self.threshold;
        self.entries.retain(|e| e.0 >= t);
        // Many near-ties: grow instead of pruning on every insertion.
        self.cap = self.cap.max(2 * self.entries.len());
    }
}

/// Candidate neighbors of every row, via single-precision similarity blocks.
/// Only blocks on or above the diagonal are formed; each one feeds both its
/// rows and its columns.
fn screen_candidates(f: ArrayView2<'_, f64>, k: usize) -> Vec<Candidates> {
    let (n, d) = f.dim();
    let f32s: Array2<f32> = f.mapv(|x| x as f32);
    // Rounding the inputs costs 2u and a length-d f32 dot product at most
    // d·u (unit vectors, u = 2⁻²⁴); 10% slack covers the higher-order terms
    // and the rounding of the threshold subtraction itself.
    let eps = 1.1 * (d as f64 + 2.0) * (f32::EPSILON as f64 / 2.0);
    let margin = (2.0 * eps * 1.05) as f32;
    let mut cands: Vec<Candidates> = (0..n)
        .map(|_| Candidates { entries: Vec::with_capacity(2 * k + 8), threshold: f32::NEG_INFINITY, cap: 4 * k + 64 })
        .collect();
    let mut col_thresholds = vec![0.0f32; KNN_BLOCK];

    for r0 in (0..n).step_by(KNN_BLOCK) {
        let r1 = (r0 + KNN_BLOCK).min(n);
        let rows = f32s.slice(s![r0..r1, ..]);
        for c0 in (r0..n).step_by(KNN_BLOCK) {
            let c1 = (c0 + KNN_BLOCK).min(n);
            let sims = crate::linalg::matmul(rows, f32s.slice(s![c0..c1, ..]).t());
            let diagonal = c0 == r0;
            for (ci, t) in col_thresholds[..c1 - c0].iter_mut().enumerate() {
                *t = cands[c0 + ci].threshold;
            }
            for (ri, row) in sims.axis_iter(Axis(0)).enumerate() {
                let i = r0 + ri;
                let row = row.as_slice().expect("fresh array");
                for (ci, &s) in row.iter().enumerate() {
                    let j = c0 + ci;
                    if diagonal {
                        if j > i {
                            cands[i].offer(s, j as u32, k, margin);
                            cands[j].offer(s, i as u32, k, margin);
                        }
                        continue;
                    }
                    cands[i].offer(s, j as u32, k, margin);
                    if s >= col_thresholds[ci] {
                        cands[j].offer(s, i as u32, k, margin);
                        col_thresholds[ci] = cands[j].threshold;
                    }
                }
            }
        }
    }
    for c in &mut cands {
        c.prune(k, margin);
    }
    cands
}

/// Clamps a kNN request to what `n` samples can support.
pub(crate) fn effective_mode(mode: AffinityMode, n: usize) -> AffinityMode {
    match mode {
        AffinityMode::Knn(k) => AffinityMode::Knn(k.min(n.saturating_sub(1))),
        AffinityMode::Full => AffinityMode::Full,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identical_and_orthogonal_rows() {
        let f = EmbeddingSet::new(array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let g = build_affinity(&f, AffinityMode::Full).unwrap();
        assert_eq!(g.neighbors(0).collect::<Vec<_>>(), vec![(1, 1.0), (2, 0.0)]);
        assert_eq!(g.neighbors(1).collect::<Vec<_>>(), vec![(0, 1.0), (2, 0.0)]);
        assert_eq!(g.n_edges(), 6);
    }

    #[test]
    fn knn_ties_prefer_lower_index_and_exclude_self() {
        let f = EmbeddingSet::new(array![[1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [0.0, 1.0]]).unwrap();
        let g = build_affinity(&f, AffinityMode::Knn(2)).unwrap();
        assert_eq!(g.neighbors(0).map(|(j, _)| j).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(g.neighbors(3).map(|(j, _)| j).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(g.neighbors(1).map(|(j, _)| j).collect::<Vec<_>>(), vec![2, 3]);
    }

    fn brute_force(f: &EmbeddingSet, k: usize) -> Vec<Vec<usize>> {
        let g = f.view().dot(&f.view().t());
        (0..f.n())
            .map(|i| {
                let mut js: Vec<usize> = (0..f.n()).filter(|&j| j != i).collect();
                js.sort_by(|&a, &b| g[[i, b]].total_cmp(&g[[i, a]]).then(a.cmp(&b)));
                js.truncate(k);
                js
            })
            .collect()
    }

    #[test]
    fn knn_matches_brute_force_across_blocks() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 2 * KNN_BLOCK + 37;
        // Clustered data with exact duplicates to exercise near-ties.
        let mut raw = Array2::from_shape_fn((n, 16), |_| rng.random_range(-1.0..1.0));
        for i in (0..n).step_by(5) {
            let src = raw.row((i * 7) % n).to_owned();
            raw.row_mut(i).assign(&src);
        }
        let f = EmbeddingSet::new(raw).unwrap();
        for k in [1, 3, 8] {
            let g = build_affinity(&f, AffinityMode::Knn(k)).unwrap();
            let want = brute_force(&f, k);
            for i in 0..n {
                assert_eq!(g.neighbors(i).map(|(j, _)| j).collect::<Vec<_>>(), want[i], "row {i} k {k}");
            }
        }
    }

    #[test]
    fn knn_too_large_is_an_error() {
        let f = EmbeddingSet::new(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!(build_affinity(&f, AffinityMode::Knn(2)).is_err());
        assert_eq!(build_affinity(&f, AffinityMode::Knn(0)).unwrap().n_edges(), 0);
        assert_eq!(effective_mode(AffinityMode::Knn(3), 2), AffinityMode::Knn(1));
    }
}
