//! Top-k cosine affinity graph over text and image nodes, and its symmetric
//! degree normalization.

use std::io::{self, Write};

use rayon::prelude::*;

use crate::embedstore::{dot, EmbeddingSet};
use crate::error::{Error, Result};

/// Degree used for nodes without any edge weight.
pub const DEGREE_FLOOR: f64 = 1e-12;

/// Square sparse matrix in compressed-row form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    size: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
    symmetric: bool,
}

impl SparseMatrix {
    /// Builds a matrix from `(row, col, value)` entries; duplicates are summed.
    pub fn from_triplets(size: usize, mut triplets: Vec<(usize, usize, f64)>) -> Result<Self> {
        for &(i, j, v) in &triplets {
            if i >= size || j >= size {
                return Err(Error::validation(format!("entry ({i}, {j}) outside a {size}x{size} matrix")));
            }
            if i == j {
                return Err(Error::validation(format!("self-loop at node {i}")));
            }
            if !v.is_finite() || v < 0.0 {
                return Err(Error::validation(format!("entry ({i}, {j}) has invalid weight {v}")));
            }
        }
        triplets.sort_by_key(|t| (t.0, t.1));
        let mut row_offsets = vec![0usize; size + 1];
        let mut col_indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in triplets {
            if last == Some((i, j)) {
                *values.last_mut().expect("duplicate follows an entry") += v;
                continue;
            }
            last = Some((i, j));
            row_offsets[i + 1] += 1;
            col_indices.push(j);
            values.push(v);
        }
        for i in 0..size {
            row_offsets[i + 1] += row_offsets[i];
        }
        Ok(Self { size, row_offsets, col_indices, values, symmetric: false })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    /// Column indices and values of row `i`, columns ascending.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let span = self.row_offsets[i]..self.row_offsets[i + 1];
        (&self.col_indices[span.clone()], &self.values[span])
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).ok().map(|p| vals[p])
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.size).flat_map(move |i| {
            let (cols, vals) = self.row(i);
            cols.iter().zip(vals).map(move |(&j, &v)| (i, j, v))
        })
    }

    /// `out = self * x`.
    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let (cols, vals) = self.row(i);
            *o = cols.iter().zip(vals).map(|(&j, &v)| v * x[j]).sum();
        }
    }

    /// Row-major dense copy.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut dense = vec![vec![0.0; self.size]; self.size];
        for (i, j, v) in self.triplets() {
            dense[i][j] = v;
        }
        dense
    }

    /// Checks the symmetric-flag invariant against the stored entries.
    pub fn check_symmetry(&self, tol: f64) -> bool {
        self.triplets().all(|(i, j, v)| self.get(j, i).is_some_and(|w| (v - w).abs() <= tol))
    }

    /// Writes one `row col value` line per stored entry.
    pub fn write_edge_list<W: Write>(&self, mut w: W) -> io::Result<()> {
        for (i, j, v) in self.triplets() {
            writeln!(w, "{i} {j} {v:e}")?;
        }
        Ok(())
    }
}

/// Keeps, for every row of `l`, its `k` largest cosine similarities to the
/// other rows. Negative kept similarities are clamped to zero.
pub fn build_topk_affinity(l: &EmbeddingSet, k: usize) -> Result<SparseMatrix> {
    build_topk_affinity_pow(l, k, 1.0)
}

/// As [`build_topk_affinity`], raising every kept similarity to `gamma`.
pub fn build_topk_affinity_pow(l: &EmbeddingSet, k: usize, gamma: f64) -> Result<SparseMatrix> {
    let n = l.rows();
    if !l.is_unit_norm() {
        return Err(Error::validation("affinity rows must be unit-normalized"));
    }
    if k == 0 || k >= n {
        return Err(Error::validation(format!("k must be in [1, {}), got {k}", n)));
    }
    if !gamma.is_finite() || gamma <= 0.0 {
        return Err(Error::validation(format!("gamma must be positive, got {gamma}")));
    }

    let rows: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = l.row(i);
            let mut sims: Vec<(usize, f64)> = (0..n).filter(|&j| j != i).map(|j| (j, dot(xi, l.row(j)))).collect();
            // Descending similarity, ties to the lower column index.
            let order = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
            if k < sims.len() {
                sims.select_nth_unstable_by(k - 1, order);
                sims.truncate(k);
            }
            sims.sort_unstable_by_key(|&(j, _)| j);
            for (_, v) in &mut sims {
                *v = v.max(0.0);
                if gamma != 1.0 {
                    *v = v.powf(gamma);
                }
            }
            sims
        })
        .collect();

    let mut row_offsets = Vec::with_capacity(n + 1);
    row_offsets.push(0);
    let mut col_indices = Vec::with_capacity(n * k);
    let mut values = Vec::with_capacity(n * k);
    for row in rows {
        for (j, v) in row {
            col_indices.push(j);
            values.push(v);
        }
        row_offsets.push(col_indices.len());
    }
    Ok(SparseMatrix { size: n, row_offsets, col_indices, values, symmetric: false })
}

/// `D^{-1/2} (A + A^T) D^{-1/2}` with `D = diag((A + A^T) 1)`.
pub fn normalize_symmetric(a: &SparseMatrix) -> SparseMatrix {
    let n = a.size;
    let mut triplets: Vec<(usize, usize, f64)> = Vec::with_capacity(2 * a.nnz());
    for (i, j, v) in a.triplets() {
        triplets.push((i, j, v));
        triplets.push((j, i, v));
    }
    // Entries of `a` already satisfy the from_triplets preconditions.
    let mut sym = SparseMatrix::from_triplets(n, triplets).expect("input entries are valid");

    let degree: Vec<f64> = (0..n).map(|i| sym.row(i).1.iter().sum::<f64>()).map(|d: f64| d.max(DEGREE_FLOOR)).collect();
    let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    for i in 0..n {
        let span = sym.row_offsets[i]..sym.row_offsets[i + 1];
        for p in span {
            let j = sym.col_indices[p];
            sym.values[p] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    sym.symmetric = true;
    sym
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(rows: &[Vec<f64>]) -> EmbeddingSet {
        EmbeddingSet::from_rows(rows, "n", false).unwrap().l2_normalize().unwrap()
    }

    #[test]
    fn orthogonal_rows_keep_zero_weights() {
        let l = unit(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let a = build_topk_affinity(&l, 2).unwrap();
        assert_eq!(a.nnz(), 6);
        assert!(a.triplets().all(|(_, _, v)| v == 0.0));
    }

    #[test]
    fn hand_computed_top1() {
        let l = unit(&[vec![1.0, 0.0], vec![0.8, 0.6], vec![0.0, 1.0]]);
        let a = build_topk_affinity(&l, 1).unwrap();
        assert_eq!(a.nnz(), 3);
        assert!((a.get(0, 1).unwrap() - 0.8).abs() < 1e-12);
        assert!((a.get(1, 0).unwrap() - 0.8).abs() < 1e-12);
        assert!((a.get(2, 1).unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn full_selection_keeps_every_pair_and_clamps_negatives() {
        let l = unit(&[vec![1.0, 0.0], vec![-1.0, 0.1], vec![0.3, 1.0]]);
        let a = build_topk_affinity(&l, 2).unwrap();
        assert_eq!(a.nnz(), 6);
        assert_eq!(a.get(0, 1), Some(0.0));
        assert!(a.get(0, 2).unwrap() > 0.0);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let l = unit(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0], vec![0.0, -1.0]]);
        let a = build_topk_affinity(&l, 1).unwrap();
        // rows 1,2,3 are all orthogonal or opposite to row 0; tie at 0 goes to column 1.
        assert_eq!(a.row(0).0, &[1]);
        let (cols, _) = a.row(3);
        assert_eq!(cols, &[0]);
    }

    #[test]
    fn k_out_of_range() {
        let l = unit(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(build_topk_affinity(&l, 0).is_err());
        assert!(build_topk_affinity(&l, 2).is_err());
        assert!(build_topk_affinity(&l, 1).is_ok());
    }

    #[test]
    fn single_edge_normalizes_to_one() {
        let a = SparseMatrix::from_triplets(2, vec![(0, 1, 5.0)]).unwrap();
        let w = normalize_symmetric(&a);
        let dense = w.to_dense();
        assert!((dense[0][1] - 1.0).abs() < 1e-15 && (dense[1][0] - 1.0).abs() < 1e-15);
        assert_eq!((dense[0][0], dense[1][1]), (0.0, 0.0));
        assert!(w.is_symmetric());
    }

    #[test]
    fn path_graph_weights() {
        let a = SparseMatrix::from_triplets(3, vec![(0, 1, 0.5), (1, 2, 0.5), (1, 0, 0.5), (2, 1, 0.5)]).unwrap();
        let w = normalize_symmetric(&a);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((w.get(0, 1).unwrap() - s).abs() < 1e-12);
        assert!((w.get(1, 2).unwrap() - s).abs() < 1e-12);
        assert!(w.check_symmetry(0.0));
    }

    #[test]
    fn isolated_node_has_zero_row() {
        let a = SparseMatrix::from_triplets(3, vec![(0, 1, 1.0), (2, 0, 0.0)]).unwrap();
        let w = normalize_symmetric(&a);
        let (_, vals) = w.row(2);
        assert!(vals.iter().all(|&v| v == 0.0));
        assert!(w.triplets().all(|(_, _, v)| v.is_finite()));
    }

    #[test]
    fn triplets_reject_self_loops_and_negatives() {
        assert!(SparseMatrix::from_triplets(2, vec![(0, 0, 1.0)]).is_err());
        assert!(SparseMatrix::from_triplets(2, vec![(0, 1, -1.0)]).is_err());
        assert!(SparseMatrix::from_triplets(2, vec![(0, 2, 1.0)]).is_err());
    }

    #[test]
    fn edge_list_dump() {
        let a = SparseMatrix::from_triplets(2, vec![(0, 1, 2.0)]).unwrap();
        let mut buf = Vec::new();
        a.write_edge_list(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "0 1 2e0\n");
    }
}
