//! Independent numeric oracles shared by the property tests and the
//! acceptance suite. Each check builds one seeded random instance and returns
//! a description of the first violated condition.

#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use realign_core::adapt::{
    adapted_projection, backprop_to_adapter, ce_loss_and_grads, cosine_logits, AdaptedSide, AffineAdapter,
};
use realign_core::affinity::{build_topk_affinity, normalize_symmetric, SparseMatrix};
use realign_core::embedstore::EmbeddingSet;
use realign_core::labelprop::{extract_pseudo_labels, propagate, PropagationConfig};
use realign_core::projection::{compute_text_basis, ProjectionBasis, Variant};

pub type Check = Result<(), String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_rows(rng: &mut ChaCha8Rng, rows: usize, dims: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..dims).map(|_| rng.sample(StandardNormal)).collect()).collect()
}

pub fn unit_set(rng: &mut ChaCha8Rng, rows: usize, dims: usize, prefix: &str) -> EmbeddingSet {
    EmbeddingSet::from_rows(&gaussian_rows(rng, rows, dims), prefix, false).unwrap().l2_normalize().unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Leading left singular vector of the `d x m` matrix whose columns are the
/// rows of `t`, by power iteration on `T T^T` (independent of the SVD path).
pub fn principal_direction(t: &EmbeddingSet) -> Vec<f64> {
    let d = t.dims();
    let mut u: Vec<f64> = (0..d).map(|k| 1.0 + k as f64 * 1e-3).collect();
    for _ in 0..5000 {
        let mut next = vec![0.0; d];
        for row in t.iter_rows() {
            let c = dot(row, &u);
            next.iter_mut().zip(row).for_each(|(n, r)| *n += c * r);
        }
        let n = dot(&next, &next).sqrt();
        next.iter_mut().for_each(|v| *v /= n);
        let change: f64 = next.iter().zip(&u).map(|(a, b)| (a - b).abs()).sum();
        u = next;
        if change < 1e-15 {
            break;
        }
    }
    u
}

/// Idempotence, residual orthogonality, orthonormality and removal of the
/// principal text direction on one random `(m, d)` configuration.
pub fn projection_invariants(seed: u64) -> Check {
    let mut rng = rng(seed);
    let m = rng.random_range(3..=16);
    let d = rng.random_range(m + 1..=48);
    let texts = unit_set(&mut rng, m, d, "t");
    let images = unit_set(&mut rng, 12, d, "v");

    for variant in [Variant::P1, Variant::P2] {
        let basis = compute_text_basis(&texts, variant).map_err(|e| format!("m={m} d={d} {variant:?}: {e}"))?;
        let expected_rank = if variant == Variant::P2 { m - 1 } else { m };
        if basis.rank() != expected_rank {
            return Err(format!("m={m} d={d} {variant:?}: rank {} != {expected_rank}", basis.rank()));
        }
        let ortho = basis.orthonormality_error();
        if ortho > 1e-9 {
            return Err(format!("m={m} d={d} {variant:?}: orthonormality error {ortho:e}"));
        }
        for f in images.iter_rows().chain(texts.iter_rows()) {
            let p = basis.project_row(f);
            let pp = basis.project_row(&p);
            let drift = p.iter().zip(&pp).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if drift > 1e-12 {
                return Err(format!("m={m} d={d} {variant:?}: projection not idempotent ({drift:e})"));
            }
            let residual: Vec<f64> = f.iter().zip(&p).map(|(a, b)| a - b).collect();
            for k in 0..basis.rank() {
                let leak = dot(basis.column(k), &residual).abs();
                if leak >= 1e-6 {
                    return Err(format!("m={m} d={d} {variant:?}: residual not orthogonal to column {k} ({leak:e})"));
                }
            }
        }
        let once = basis.project(&images).map_err(|e| e.to_string())?;
        let twice = basis.project(&once).map_err(|e| e.to_string())?;
        let drift = once.data().iter().zip(twice.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if drift > 1e-12 {
            return Err(format!("m={m} d={d} {variant:?}: renormalized projection not idempotent ({drift:e})"));
        }
    }

    let e1 = principal_direction(&texts);
    let p2 = compute_text_basis(&texts, Variant::P2).map_err(|e| e.to_string())?;
    let projected = p2.project(&texts).map_err(|e| e.to_string())?;
    for (i, t) in projected.iter_rows().enumerate() {
        let along = dot(&e1, t).abs();
        if along >= 1e-6 {
            return Err(format!("m={m} d={d}: projected text {i} keeps {along:e} of the principal direction"));
        }
    }
    Ok(())
}

/// Random symmetric-normalized top-k graph over at most 50 nodes.
pub fn random_graph(rng: &mut ChaCha8Rng) -> (SparseMatrix, usize) {
    let n = rng.random_range(6..=50);
    let m = rng.random_range(2..=5.min(n - 2));
    let dims = rng.random_range(2..=8);
    let k = rng.random_range(1..=10.min(n - 1));
    let nodes = unit_set(rng, n, dims, "n");
    (normalize_symmetric(&build_topk_affinity(&nodes, k).unwrap()), m)
}

/// Dense `(I - alpha W)^{-1} Y` by LU, `Y` one-hot on the first `m` nodes.
pub fn dense_diffusion(w: &SparseMatrix, m: usize, alpha: f64) -> DMatrix<f64> {
    let n = w.size();
    let dense = w.to_dense();
    let system = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 } - alpha * dense[i][j]);
    let seeds = DMatrix::from_fn(n, m, |i, c| if i == c { 1.0 } else { 0.0 });
    system.lu().solve(&seeds).expect("I - alpha W is nonsingular for alpha < 1")
}

/// Per-entry agreement required between CG and dense scores.
pub const Z_TOLERANCE: f64 = 1e-5;

fn dense_label(exact: &DMatrix<f64>, row: usize, m: usize) -> (usize, f64) {
    let mut best = 0;
    for c in 1..m {
        if exact[(row, c)] > exact[(row, best)] {
            best = c;
        }
    }
    let runner_up = (0..m).filter(|&c| c != best).map(|c| exact[(row, c)]).fold(f64::NEG_INFINITY, f64::max);
    (best, exact[(row, best)] - runner_up)
}

/// Compares CG and dense diffusion at one `alpha`. Labels must match
/// exactly when `exact_labels` is set, otherwise wherever the dense margin
/// exceeds twice the score tolerance (where agreement is implied by it).
fn compare_diffusion(seed: u64, w: &SparseMatrix, m: usize, alpha: f64, exact_labels: bool) -> Check {
    let cfg = PropagationConfig { alpha, ..PropagationConfig::default() };
    let z = propagate(w, m, &cfg).map_err(|e| format!("seed {seed}: {e}"))?;
    let exact = dense_diffusion(w, m, alpha);
    let n = w.size();
    for i in 0..n {
        for c in 0..m {
            let gap = (z.score(i, c) - exact[(i, c)]).abs();
            if gap > Z_TOLERANCE {
                return Err(format!("seed {seed}: n={n} m={m} alpha={alpha:.3}: Z[{i}][{c}] off by {gap:e}"));
            }
        }
    }
    let labels = extract_pseudo_labels(&z, m).map_err(|e| e.to_string())?;
    for (j, &label) in labels.labels.iter().enumerate() {
        let (best, margin) = dense_label(&exact, m + j, m);
        if label != best && (exact_labels || margin > 2.0 * Z_TOLERANCE) {
            return Err(format!(
                "seed {seed}: alpha={alpha:.3}: image {j} labelled {label}, dense inverse says {best} (margin {margin:e})"
            ));
        }
    }
    Ok(())
}

/// CG diffusion and labels agree with the dense-inverse pipeline: exactly at
/// the default propagation strength, and within the score tolerance at a
/// random one.
pub fn labelprop_oracle(seed: u64) -> Check {
    let mut rng = rng(seed);
    let (w, m) = random_graph(&mut rng);
    compare_diffusion(seed, &w, m, PropagationConfig::default().alpha, true)?;
    compare_diffusion(seed, &w, m, rng.random_range(0.05..0.99), false)
}

/// One small instance of the full adapter pipeline.
pub struct GradientCase {
    pub adapter: AffineAdapter,
    pub x: EmbeddingSet,
    pub partner: EmbeddingSet,
    pub side: AdaptedSide,
    pub basis: ProjectionBasis,
    pub labels: Vec<usize>,
    pub mask: Vec<bool>,
    pub scale: f64,
}

impl GradientCase {
    pub fn random(seed: u64) -> Self {
        let mut rng = rng(seed);
        let n = rng.random_range(2..=8);
        let m = rng.random_range(2..=4);
        let d = rng.random_range(m + 2..=6.max(m + 2));
        let side = if rng.random_bool(0.5) { AdaptedSide::Rows } else { AdaptedSide::Columns };
        let gain: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..1.5)).collect();
        let bias: Vec<f64> = (0..d).map(|_| rng.random_range(-0.3..0.3)).collect();
        let adapter = AffineAdapter::from_parts(gain, bias).unwrap();
        let texts = unit_set(&mut rng, m + 1, d, "t");
        let basis = match rng.random_range(0..3) {
            0 => ProjectionBasis::identity(d),
            1 => compute_text_basis(&texts, Variant::P1).unwrap(),
            _ => compute_text_basis(&texts, Variant::P2).unwrap(),
        };
        let (x_rows, partner_rows) = match side {
            AdaptedSide::Rows => (n, m),
            AdaptedSide::Columns => (m, n),
        };
        let x = unit_set(&mut rng, x_rows, d, "x");
        let partner = basis.project(&unit_set(&mut rng, partner_rows, d, "p")).unwrap();
        let labels = (0..n).map(|_| rng.random_range(0..m)).collect();
        let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
        mask[rng.random_range(0..n)] = true;
        let scale = [1.0, 10.0, 100.0][rng.random_range(0..3)];
        Self { adapter, x, partner, side, basis, labels, mask, scale }
    }

    pub fn loss(&self, adapter: &AffineAdapter) -> f64 {
        let adapted = adapted_projection(adapter, &self.x, &self.basis).unwrap();
        let logits = match self.side {
            AdaptedSide::Rows => cosine_logits(&adapted, &self.partner, self.scale).unwrap(),
            AdaptedSide::Columns => cosine_logits(&self.partner, &adapted, self.scale).unwrap(),
        };
        ce_loss_and_grads(&logits, &self.labels, &self.mask).unwrap().0
    }

    pub fn analytic(&self) -> (Vec<f64>, Vec<f64>) {
        let adapted = adapted_projection(&self.adapter, &self.x, &self.basis).unwrap();
        let logits = match self.side {
            AdaptedSide::Rows => cosine_logits(&adapted, &self.partner, self.scale).unwrap(),
            AdaptedSide::Columns => cosine_logits(&self.partner, &adapted, self.scale).unwrap(),
        };
        let (_, dlogits) = ce_loss_and_grads(&logits, &self.labels, &self.mask).unwrap();
        let g = backprop_to_adapter(
            &self.adapter,
            &self.x,
            &dlogits,
            &self.partner,
            self.side,
            Some(&self.basis),
            self.scale,
        )
        .unwrap();
        (g.gain, g.bias)
    }

    /// Central differences with step `h` for every gain and bias entry.
    pub fn numeric(&self, h: f64) -> (Vec<f64>, Vec<f64>) {
        let d = self.adapter.dims();
        let probe = |which: usize, k: usize, delta: f64| {
            let mut gain = self.adapter.gain().to_vec();
            let mut bias = self.adapter.bias().to_vec();
            if which == 0 {
                gain[k] += delta;
            } else {
                bias[k] += delta;
            }
            self.loss(&AffineAdapter::from_parts(gain, bias).unwrap())
        };
        let fd = |which| (0..d).map(|k| (probe(which, k, h) - probe(which, k, -h)) / (2.0 * h)).collect();
        (fd(0), fd(1))
    }
}

/// Relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Denominator floor for gradient comparisons. Central differences at
/// `h = 1e-5` carry rounding noise near `eps * |logit| / h`, about 1e-9 at
/// scale 100, so partials smaller than this are compared at 1e-9 absolute.
pub const GRADIENT_FLOOR: f64 = 1e-5;

/// Analytic adapter gradients match central finite differences.
pub fn gradient_check(seed: u64) -> Check {
    let case = GradientCase::random(seed);
    let (gain, bias) = case.analytic();
    let (fd_gain, fd_bias) = case.numeric(1e-5);
    for (name, a, f) in [("gain", &gain, &fd_gain), ("bias", &bias, &fd_bias)] {
        for k in 0..a.len() {
            let err = relative_error(a[k], f[k], GRADIENT_FLOOR);
            if err >= 1e-4 {
                return Err(format!(
                    "seed {seed}: {name}[{k}] analytic {:e} vs numeric {:e} (relative error {err:e}, scale {})",
                    a[k], f[k], case.scale
                ));
            }
        }
    }
    Ok(())
}
