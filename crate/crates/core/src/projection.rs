//! Projection onto the span of the class text embeddings.
//!
//! The basis is the set of left singular vectors of the `d x m` matrix whose
//! columns are the text embeddings, ordered by descending singular value.
//! `P1` keeps the full numerical span; `P2` additionally drops the principal
//! direction, which is the component shared by all class names.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::embedstore::{dot, norm, EmbeddingSet, LabelVector};
use crate::error::{Error, Result};

/// Singular values below `RANK_EPSILON * sigma_max` are treated as zero.
pub const RANK_EPSILON: f64 = 1e-7;

/// Projected rows with a norm at or below this cannot be renormalized.
pub const PROJECTED_NORM_FLOOR: f64 = 1e-10;

const ORTHONORMAL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Identity: rows are only renormalized.
    P0,
    /// Full text span.
    P1,
    /// Text span without its principal direction.
    P2,
}

impl Variant {
    pub fn code(self) -> u8 {
        match self {
            Variant::P0 => 0,
            Variant::P1 => 1,
            Variant::P2 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Variant::P0),
            1 => Ok(Variant::P1),
            2 => Ok(Variant::P2),
            other => Err(Error::Format(format!("unknown projection variant {other}"))),
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "p0" => Ok(Variant::P0),
            "p1" => Ok(Variant::P1),
            "p2" => Ok(Variant::P2),
            other => Err(Error::validation(format!("unknown projection variant `{other}`"))),
        }
    }
}

/// Orthonormal basis (`d x r`, column-major) of a text-embedding subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionBasis {
    matrix: DMatrix<f64>,
    variant: Variant,
    /// Number of text rows the basis was computed from. Not persisted.
    source_classes: Option<usize>,
}

impl ProjectionBasis {
    pub fn identity(dims: usize) -> Self {
        Self { matrix: DMatrix::zeros(dims, 0), variant: Variant::P0, source_classes: None }
    }

    /// Rebuilds a basis from stored parts, checking orthonormality.
    pub fn from_parts(dims: usize, rank: usize, variant: Variant, column_major: Vec<f64>) -> Result<Self> {
        if column_major.len() != dims * rank {
            return Err(Error::validation(format!(
                "basis data has {} values for a {dims}x{rank} matrix",
                column_major.len()
            )));
        }
        if variant == Variant::P0 && rank != 0 {
            return Err(Error::validation("identity projection must store an empty basis"));
        }
        if variant != Variant::P0 && rank == 0 {
            return Err(Error::validation("non-identity projection needs at least one basis column"));
        }
        if column_major.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("non-finite value in basis"));
        }
        let basis = Self { matrix: DMatrix::from_vec(dims, rank, column_major), variant, source_classes: None };
        let err = basis.orthonormality_error();
        if err > ORTHONORMAL_TOLERANCE {
            return Err(Error::validation(format!("basis columns are not orthonormal (max error {err:e})")));
        }
        Ok(basis)
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn source_dims(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn source_classes(&self) -> Option<usize> {
        self.source_classes
    }

    pub fn rank(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn column(&self, k: usize) -> &[f64] {
        let d = self.source_dims();
        &self.matrix.as_slice()[k * d..(k + 1) * d]
    }

    /// Largest deviation of `basis^T basis` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.matrix.transpose() * &self.matrix;
        let r = self.rank();
        let mut worst = 0.0f64;
        for i in 0..r {
            for j in 0..r {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((gram[(i, j)] - target).abs());
            }
        }
        worst
    }

    /// Coordinates of `row` in the basis, `basis^T row`.
    pub fn coordinates_of(&self, row: &[f64]) -> Vec<f64> {
        (0..self.rank()).map(|k| dot(self.column(k), row)).collect()
    }

    /// `basis basis^T row`, without renormalization. Identity for `P0`.
    pub fn project_row(&self, row: &[f64]) -> Vec<f64> {
        if self.variant == Variant::P0 {
            return row.to_vec();
        }
        let coords = self.coordinates_of(row);
        let mut out = vec![0.0; row.len()];
        for (k, c) in coords.iter().enumerate() {
            for (o, e) in out.iter_mut().zip(self.column(k)) {
                *o += c * e;
            }
        }
        out
    }

    /// Projects every row onto the basis span and renormalizes.
    pub fn project(&self, x: &EmbeddingSet) -> Result<EmbeddingSet> {
        self.check_dims(x)?;
        if self.variant == Variant::P0 {
            return x.l2_normalize();
        }
        let mut data = Vec::with_capacity(x.data().len());
        for (i, row) in x.iter_rows().enumerate() {
            let mut p = self.project_row(row);
            let n = norm(&p);
            if n <= PROJECTED_NORM_FLOOR {
                return Err(Error::DegenerateProjection { id: x.id(i).to_string(), norm: n });
            }
            p.iter_mut().for_each(|v| *v /= n);
            data.extend_from_slice(&p);
        }
        x.with_data(data, x.dims(), true)
    }

    /// Unit-norm rows expressed in basis coordinates.
    ///
    /// Cosine similarities between these rows equal those between the
    /// corresponding outputs of [`project`](Self::project), at `r` instead of
    /// `d` dimensions. Falls back to the projected rows when `r < 2` or for
    /// the identity projection.
    pub fn graph_features(&self, x: &EmbeddingSet) -> Result<EmbeddingSet> {
        self.check_dims(x)?;
        if self.variant == Variant::P0 || self.rank() < 2 {
            return self.project(x);
        }
        let r = self.rank();
        let mut data = Vec::with_capacity(x.rows() * r);
        for (i, row) in x.iter_rows().enumerate() {
            let mut c = self.coordinates_of(row);
            let n = norm(&c);
            if n <= PROJECTED_NORM_FLOOR {
                return Err(Error::DegenerateProjection { id: x.id(i).to_string(), norm: n });
            }
            c.iter_mut().for_each(|v| *v /= n);
            data.extend_from_slice(&c);
        }
        x.with_data(data, r, true)
    }

    fn check_dims(&self, x: &EmbeddingSet) -> Result<()> {
        if x.dims() != self.source_dims() {
            return Err(Error::DimensionMismatch { expected: self.source_dims(), actual: x.dims() });
        }
        Ok(())
    }
}

/// Computes the projection basis of the text rows `t` (`m x d`, unit-norm).
pub fn compute_text_basis(t: &EmbeddingSet, variant: Variant) -> Result<ProjectionBasis> {
    let m = t.rows();
    let d = t.dims();
    if m < 2 {
        return Err(Error::validation(format!("need at least 2 text embeddings, got {m}")));
    }
    if !t.is_unit_norm() {
        return Err(Error::validation("text embeddings must be unit-normalized"));
    }
    if variant == Variant::P0 {
        let mut basis = ProjectionBasis::identity(d);
        basis.source_classes = Some(m);
        return Ok(basis);
    }

    // Columns are text embeddings; the left singular vectors live in R^d.
    let columns = DMatrix::from_column_slice(d, m, t.data());
    let svd = columns.svd(true, false);
    let u = svd.u.expect("left singular vectors were requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let sigma_max = svd.singular_values[order[0]];
    let rank = order.iter().take_while(|&&k| svd.singular_values[k] > RANK_EPSILON * sigma_max).count();

    let skip = match variant {
        Variant::P2 => {
            if rank < 2 {
                return Err(Error::DegenerateSpan { rank, required: 2 });
            }
            1
        }
        _ => 0,
    };
    let kept = &order[skip..rank];
    let mut data = Vec::with_capacity(d * kept.len());
    for &k in kept {
        data.extend(u.column(k).iter().copied());
    }
    Ok(ProjectionBasis { matrix: DMatrix::from_vec(d, kept.len(), data), variant, source_classes: Some(m) })
}

/// Mean cosine similarities between and within the two modalities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentStats {
    pub mean_text_text_cos: f64,
    pub mean_intra_class_visual_text_cos: f64,
    pub mean_inter_class_visual_text_cos: f64,
}

pub fn alignment_stats(v: &EmbeddingSet, t: &EmbeddingSet, labels: &LabelVector) -> Result<AlignmentStats> {
    if !v.is_unit_norm() || !t.is_unit_norm() {
        return Err(Error::validation("alignment statistics need unit-normalized embeddings"));
    }
    if v.dims() != t.dims() {
        return Err(Error::DimensionMismatch { expected: t.dims(), actual: v.dims() });
    }
    if labels.len() != v.rows() {
        return Err(Error::validation(format!("{} labels for {} images", labels.len(), v.rows())));
    }
    let m = t.rows();
    labels.check_classes(m)?;

    let mut tt = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                tt += dot(t.row(i), t.row(j));
            }
        }
    }
    let tt = if m > 1 { tt / (m * (m - 1)) as f64 } else { 0.0 };

    let (mut intra, mut inter, mut labeled) = (0.0, 0.0, 0usize);
    for (j, label) in labels.values().iter().enumerate() {
        let Some(c) = *label else { continue };
        labeled += 1;
        for i in 0..m {
            let s = dot(v.row(j), t.row(i));
            if i == c {
                intra += s;
            } else {
                inter += s;
            }
        }
    }
    if labeled == 0 {
        return Err(Error::validation("every label is UNLABELED"));
    }
    Ok(AlignmentStats {
        mean_text_text_cos: tt,
        mean_intra_class_visual_text_cos: intra / labeled as f64,
        mean_inter_class_visual_text_cos: if m > 1 { inter / (labeled * (m - 1)) as f64 } else { 0.0 },
    })
}
