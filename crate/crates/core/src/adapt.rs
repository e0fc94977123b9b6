//! Trainable per-dimension affine adapters over embeddings, cosine logits,
//! cross-entropy with exact gradients, class centers and SGD with momentum.
//!
//! An adapter maps a row `x` to `normalize(x * gain + bias)`; it plays the
//! role of the scale/shift parameters of a normalization layer, relocated to
//! the embedding the encoder emits. Gradients are written out by hand for
//! exactly this graph:
//!
//! ```text
//! x -> y = x*g + b -> y/|y| -> z = P (y/|y|) -> z/|z| -> scale * <., partner>
//! ```
//!
//! where `P` is an optional fixed projection.

use nalgebra::DMatrix;

use crate::embedstore::{dot, norm, EmbeddingSet, ZERO_ROW_THRESHOLD};
use crate::error::{Error, Result};
use crate::labelprop::PseudoLabelSet;
use crate::projection::{ProjectionBasis, Variant, PROJECTED_NORM_FLOOR};

/// Gains are kept at least this far from zero.
pub const GAIN_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct AffineAdapter {
    gain: Vec<f64>,
    bias: Vec<f64>,
}

impl AffineAdapter {
    /// Unit gain, zero bias.
    pub fn identity(dims: usize) -> Self {
        Self { gain: vec![1.0; dims], bias: vec![0.0; dims] }
    }

    pub fn from_parts(gain: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if gain.len() != bias.len() {
            return Err(Error::DimensionMismatch { expected: gain.len(), actual: bias.len() });
        }
        if gain.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::validation("non-finite adapter parameter"));
        }
        if gain.iter().any(|g| g.abs() < GAIN_FLOOR) {
            return Err(Error::validation(format!("adapter gain within {GAIN_FLOOR:e} of zero")));
        }
        Ok(Self { gain, bias })
    }

    pub fn dims(&self) -> usize {
        self.gain.len()
    }

    pub fn gain(&self) -> &[f64] {
        &self.gain
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    /// Applies one optimizer step, then pushes gains away from zero.
    pub fn apply_step(&mut self, grads: &AdapterGrads, state: &mut OptimizerState) -> Result<()> {
        sgd_step(&mut [&mut self.gain, &mut self.bias], &[&grads.gain, &grads.bias], state)?;
        for g in &mut self.gain {
            if g.abs() < GAIN_FLOOR {
                *g = if *g < 0.0 { -GAIN_FLOOR } else { GAIN_FLOOR };
            }
        }
        if self.gain.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::validation("adapter update produced a non-finite parameter"));
        }
        Ok(())
    }
}

fn affine_row(a: &AffineAdapter, row: &[f64]) -> Vec<f64> {
    row.iter().zip(&a.gain).zip(&a.bias).map(|((x, g), b)| x * g + b).collect()
}

/// `normalize(x * gain + bias)` for every row.
pub fn adapter_forward(a: &AffineAdapter, x: &EmbeddingSet) -> Result<EmbeddingSet> {
    if x.dims() != a.dims() {
        return Err(Error::DimensionMismatch { expected: a.dims(), actual: x.dims() });
    }
    let mut data = Vec::with_capacity(x.data().len());
    for (i, row) in x.iter_rows().enumerate() {
        let mut y = affine_row(a, row);
        let n = norm(&y);
        if n <= ZERO_ROW_THRESHOLD {
            return Err(Error::DegenerateInput { id: x.id(i).to_string(), norm: n });
        }
        y.iter_mut().for_each(|v| *v /= n);
        data.extend_from_slice(&y);
    }
    x.with_data(data, x.dims(), true)
}

/// Adapter followed by projection (renormalized).
pub fn adapted_projection(a: &AffineAdapter, x: &EmbeddingSet, basis: &ProjectionBasis) -> Result<EmbeddingSet> {
    basis.project(&adapter_forward(a, x)?)
}

/// `logits[j][i] = scale * <v_j, c_i>`.
pub fn cosine_logits(v: &EmbeddingSet, c: &EmbeddingSet, scale: f64) -> Result<DMatrix<f64>> {
    if v.dims() != c.dims() {
        return Err(Error::DimensionMismatch { expected: c.dims(), actual: v.dims() });
    }
    Ok(DMatrix::from_fn(v.rows(), c.rows(), |j, i| scale * dot(v.row(j), c.row(i))))
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = logits.clone();
    for j in 0..out.nrows() {
        let mut row = out.row_mut(j);
        let max = row.max();
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let total = row.sum();
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

/// Mean cross-entropy over masked rows and its gradient w.r.t. the logits.
pub fn ce_loss_and_grads(logits: &DMatrix<f64>, labels: &[usize], mask: &[bool]) -> Result<(f64, DMatrix<f64>)> {
    let (n, m) = logits.shape();
    if labels.len() != n || mask.len() != n {
        return Err(Error::validation(format!(
            "{n} logit rows with {} labels and {} mask entries",
            labels.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&b| b).count();
    if count == 0 {
        return Err(Error::validation("cross-entropy mask selects no samples"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
        return Err(Error::validation(format!("label {bad} out of range for {m} classes")));
    }
    let probs = softmax_rows(logits);
    let mut grads = DMatrix::zeros(n, m);
    let mut loss = 0.0;
    let scale = 1.0 / count as f64;
    for j in (0..n).filter(|&j| mask[j]) {
        let row = logits.row(j);
        let max = row.max();
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - logits[(j, labels[j])];
        for i in 0..m {
            let target = if i == labels[j] { 1.0 } else { 0.0 };
            grads[(j, i)] = (probs[(j, i)] - target) * scale;
        }
    }
    Ok((loss * scale, grads))
}

/// Which operand of the logit product the adapter feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptedSide {
    /// Adapted rows index logit rows (images against fixed class vectors).
    Rows,
    /// Adapted rows index logit columns (class texts against fixed images).
    Columns,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Exact gradient of the loss with respect to the adapter parameters.
///
/// `x` holds the raw (pre-adapter) rows, `dlogits` the loss gradient with
/// respect to the logits, `partner` the fixed side of the logit product and
/// `projection` an optional constant projection between adapter and logits.
pub fn backprop_to_adapter(
    a: &AffineAdapter,
    x: &EmbeddingSet,
    dlogits: &DMatrix<f64>,
    partner: &EmbeddingSet,
    side: AdaptedSide,
    projection: Option<&ProjectionBasis>,
    scale: f64,
) -> Result<AdapterGrads> {
    let d = a.dims();
    if x.dims() != d || partner.dims() != d {
        return Err(Error::DimensionMismatch { expected: d, actual: x.dims().max(partner.dims()) });
    }
    let expected_shape = match side {
        AdaptedSide::Rows => (x.rows(), partner.rows()),
        AdaptedSide::Columns => (partner.rows(), x.rows()),
    };
    if dlogits.shape() != expected_shape {
        return Err(Error::validation(format!(
            "dlogits shape {:?} does not match {:?}",
            dlogits.shape(),
            expected_shape
        )));
    }
    let projection = projection.filter(|p| p.variant() != Variant::P0);

    let mut grads = AdapterGrads { gain: vec![0.0; d], bias: vec![0.0; d] };
    for (r, row) in x.iter_rows().enumerate() {
        // Upstream gradient w.r.t. the final unit vector of this row.
        let mut upstream = vec![0.0; d];
        match side {
            AdaptedSide::Rows => {
                for (i, p) in partner.iter_rows().enumerate() {
                    let w = scale * dlogits[(r, i)];
                    if w != 0.0 {
                        upstream.iter_mut().zip(p).for_each(|(u, pv)| *u += w * pv);
                    }
                }
            }
            AdaptedSide::Columns => {
                for (j, p) in partner.iter_rows().enumerate() {
                    let w = scale * dlogits[(j, r)];
                    if w != 0.0 {
                        upstream.iter_mut().zip(p).for_each(|(u, pv)| *u += w * pv);
                    }
                }
            }
        }
        if upstream.iter().all(|&u| u == 0.0) {
            continue;
        }

        let y = affine_row(a, row);
        let y_norm = norm(&y);
        if y_norm <= ZERO_ROW_THRESHOLD {
            return Err(Error::DegenerateInput { id: x.id(r).to_string(), norm: y_norm });
        }
        let y_hat: Vec<f64> = y.iter().map(|v| v / y_norm).collect();

        let grad_y_hat = match projection {
            Some(basis) => {
                let z = basis.project_row(&y_hat);
                let z_norm = norm(&z);
                if z_norm <= PROJECTED_NORM_FLOOR {
                    return Err(Error::DegenerateProjection { id: x.id(r).to_string(), norm: z_norm });
                }
                let z_hat: Vec<f64> = z.iter().map(|v| v / z_norm).collect();
                let grad_z = normalization_pullback(&z_hat, z_norm, &upstream);
                basis.project_row(&grad_z)
            }
            None => upstream,
        };
        let grad_y = normalization_pullback(&y_hat, y_norm, &grad_y_hat);
        for k in 0..d {
            grads.gain[k] += grad_y[k] * row[k];
            grads.bias[k] += grad_y[k];
        }
    }
    Ok(grads)
}

/// Pulls `upstream` back through `u -> u/|u|`: `(I - u_hat u_hat^T) upstream / |u|`.
fn normalization_pullback(u_hat: &[f64], u_norm: f64, upstream: &[f64]) -> Vec<f64> {
    let along = dot(u_hat, upstream);
    u_hat.iter().zip(upstream).map(|(h, g)| (g - h * along) / u_norm).collect()
}

/// Unit-norm class centers.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCenters {
    pub centers: EmbeddingSet,
    pub counts: Vec<usize>,
}

/// Renormalized mean of the rows assigned to each class.
///
/// Only rows selected by the label set's agreement mask count. A class with
/// no rows (or a vanishing mean) takes its row of `fallback`, normally the
/// class's projected text embedding.
pub fn class_centers(
    v_hat: &EmbeddingSet,
    labels: &PseudoLabelSet,
    m: usize,
    fallback: &EmbeddingSet,
) -> Result<ClassCenters> {
    let d = v_hat.dims();
    if labels.len() != v_hat.rows() {
        return Err(Error::validation(format!("{} labels for {} rows", labels.len(), v_hat.rows())));
    }
    if fallback.rows() != m || fallback.dims() != d {
        return Err(Error::validation("fallback centers do not match class count and dims"));
    }
    let mask = labels.mask();
    let mut sums = vec![0.0; m * d];
    let mut counts = vec![0usize; m];
    for (j, row) in v_hat.iter_rows().enumerate() {
        if !mask[j] {
            continue;
        }
        let c = labels.labels[j];
        if c >= m {
            return Err(Error::validation(format!("label {c} out of range for {m} classes")));
        }
        counts[c] += 1;
        sums[c * d..(c + 1) * d].iter_mut().zip(row).for_each(|(s, v)| *s += v);
    }
    let mut data = Vec::with_capacity(m * d);
    for c in 0..m {
        let s = &sums[c * d..(c + 1) * d];
        let n = norm(s);
        if counts[c] == 0 || n <= ZERO_ROW_THRESHOLD {
            let f = fallback.row(c);
            let fnorm = norm(f);
            data.extend(f.iter().map(|v| v / fnorm));
        } else {
            data.extend(s.iter().map(|v| v / n));
        }
    }
    let ids = (0..m).map(|c| format!("center-{c}")).collect();
    Ok(ClassCenters { centers: EmbeddingSet::new(data, d, ids, true)?, counts })
}

/// SGD with momentum and weight decay, one buffer per parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub momentum_buffers: Vec<Vec<f64>>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub step_count: usize,
}

impl OptimizerState {
    pub fn new(shapes: &[usize], lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum_buffers: shapes.iter().map(|&len| vec![0.0; len]).collect(),
            lr,
            momentum,
            weight_decay,
            step_count: 0,
        }
    }

    pub fn for_adapter(a: &AffineAdapter, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self::new(&[a.dims(), a.dims()], lr, momentum, weight_decay)
    }
}

/// `buf <- momentum * buf + grad + weight_decay * param; param <- param - lr * buf`.
pub fn sgd_step(params: &mut [&mut Vec<f64>], grads: &[&Vec<f64>], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.momentum_buffers.len() {
        return Err(Error::validation("parameter, gradient and buffer counts differ"));
    }
    for ((p, g), buf) in params.iter().zip(grads).zip(&state.momentum_buffers) {
        if p.len() != g.len() || p.len() != buf.len() {
            return Err(Error::DimensionMismatch { expected: p.len(), actual: g.len().max(buf.len()) });
        }
    }
    for ((p, g), buf) in params.iter_mut().zip(grads).zip(state.momentum_buffers.iter_mut()) {
        for ((pk, gk), bk) in p.iter_mut().zip(g.iter()).zip(buf.iter_mut()) {
            *bk = state.momentum * *bk + gk + state.weight_decay * *pk;
            *pk -= state.lr * *bk;
        }
    }
    state.step_count += 1;
    Ok(())
}
