//! Label diffusion over the text/image affinity graph.
//!
//! Text nodes are the labeled seeds (node `i < m` carries class `i`); image
//! nodes follow. Scores solve `(I - alpha W) Z = Y` column by column with
//! conjugate gradient, and each image takes the class of its largest score.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::affinity::{build_topk_affinity_pow, normalize_symmetric, SparseMatrix};
use crate::cg::conjugate_gradient;
use crate::embedstore::{dot, EmbeddingSet};
use crate::error::{Error, Result};
use crate::projection::ProjectionBasis;

/// Above this many classes propagation is skipped in favor of model predictions.
pub const DEFAULT_CLASS_LIMIT: usize = 500;

const CONFIDENCE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LabelSource {
    TextBranch,
    VisualBranch,
    Agreed,
    ModelPrediction,
}

/// Per-image pseudo labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub labels: Vec<usize>,
    pub confidence: Vec<f64>,
    pub source: LabelSource,
    pub agreement_mask: Option<Vec<bool>>,
}

impl PseudoLabelSet {
    pub fn new(labels: Vec<usize>, confidence: Vec<f64>, source: LabelSource) -> Result<Self> {
        if labels.len() != confidence.len() {
            return Err(Error::validation(format!("{} labels with {} confidences", labels.len(), confidence.len())));
        }
        Ok(Self { labels, confidence, source, agreement_mask: None })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Agreement mask, or all-true when none is attached.
    pub fn mask(&self) -> Vec<bool> {
        self.agreement_mask.clone().unwrap_or_else(|| vec![true; self.len()])
    }

    pub fn masked_count(&self) -> usize {
        self.agreement_mask.as_ref().map_or(self.len(), |m| m.iter().filter(|&&b| b).count())
    }

    pub fn with_source(mut self, source: LabelSource) -> Self {
        self.source = source;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagationConfig {
    pub alpha: f64,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    /// Log the score rows of the first ten images at debug level.
    pub dump_rows: bool,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self { alpha: 0.99, cg_tol: 1e-6, cg_max_iter: 200, dump_rows: false }
    }
}

/// Diffusion scores `Z`, one row per graph node and one column per class.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionResult {
    scores: Vec<f64>,
    nodes: usize,
    classes: usize,
    pub cg_iterations: Vec<usize>,
    pub residuals: Vec<f64>,
}

impl DiffusionResult {
    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, node: usize) -> &[f64] {
        &self.scores[node * self.classes..(node + 1) * self.classes]
    }

    pub fn score(&self, node: usize, class: usize) -> f64 {
        self.scores[node * self.classes + class]
    }

    /// Text dump of the score rows of the first `count` image nodes.
    pub fn format_image_rows(&self, count: usize) -> String {
        let mut out = String::new();
        for j in 0..count.min(self.nodes - self.classes) {
            let row = self.row(self.classes + j);
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.9e}")).collect();
            let _ = writeln!(out, "{j} {}", cells.join(" "));
        }
        out
    }
}

/// Solves `(I - alpha W) z_i = y_i` for the `m` seed columns `y_i = e_i`.
pub fn propagate(w: &SparseMatrix, m: usize, cfg: &PropagationConfig) -> Result<DiffusionResult> {
    let nodes = w.size();
    if m == 0 || m > nodes {
        return Err(Error::validation(format!("{m} labeled nodes in a graph of {nodes}")));
    }
    let seeds = (0..m)
        .map(|class| {
            let mut y = vec![0.0; nodes];
            y[class] = 1.0;
            y
        })
        .collect::<Vec<_>>();
    propagate_evidence(w, &seeds, cfg)
}

/// Solves `(I - alpha W) z_i = y_i` for arbitrary evidence columns `y_i`.
pub fn propagate_evidence(w: &SparseMatrix, evidence: &[Vec<f64>], cfg: &PropagationConfig) -> Result<DiffusionResult> {
    let nodes = w.size();
    let m = evidence.len();
    if !(0.0..1.0).contains(&cfg.alpha) {
        return Err(Error::validation(format!("alpha must be in [0, 1), got {}", cfg.alpha)));
    }
    if m == 0 {
        return Err(Error::validation("no evidence columns"));
    }
    if let Some(bad) = evidence.iter().find(|y| y.len() != nodes) {
        return Err(Error::DimensionMismatch { expected: nodes, actual: bad.len() });
    }
    if evidence.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::validation("non-finite evidence"));
    }
    if !w.is_symmetric() {
        return Err(Error::validation("propagation needs a symmetric normalized adjacency"));
    }

    let alpha = cfg.alpha;
    let apply = |x: &[f64], out: &mut [f64]| {
        w.mul_vec(x, out);
        for (o, xi) in out.iter_mut().zip(x) {
            *o = xi - alpha * *o;
        }
    };
    let solves: Vec<_> =
        evidence.par_iter().map(|y| conjugate_gradient(apply, y, cfg.cg_tol, cfg.cg_max_iter)).collect();

    if let Some(worst) = solves.iter().filter(|s| !s.converged).map(|s| s.relative_residual).reduce(f64::max) {
        return Err(Error::Solver { iterations: cfg.cg_max_iter, worst_residual: worst });
    }

    let mut scores = vec![0.0; nodes * m];
    for (class, s) in solves.iter().enumerate() {
        for (node, v) in s.solution.iter().enumerate() {
            scores[node * m + class] = *v;
        }
    }
    let result = DiffusionResult {
        scores,
        nodes,
        classes: m,
        cg_iterations: solves.iter().map(|s| s.iterations).collect(),
        residuals: solves.iter().map(|s| s.relative_residual).collect(),
    };
    if cfg.dump_rows {
        log::debug!("diffusion scores of the first images:\n{}", result.format_image_rows(10));
    }
    Ok(result)
}

/// Image `j` gets `argmax_i Z[m + j][i]`; ties go to the lowest class.
pub fn extract_pseudo_labels(z: &DiffusionResult, m: usize) -> Result<PseudoLabelSet> {
    if m != z.classes() {
        return Err(Error::validation(format!("scores have {} classes, expected {m}", z.classes())));
    }
    if z.nodes() <= m {
        return Err(Error::validation("diffusion result has no image rows"));
    }
    let (labels, confidence) = (m..z.nodes())
        .map(|node| {
            let row = z.row(node);
            let (best, top) = argmax(row);
            let total: f64 = row.iter().sum();
            (best, (top / (total + CONFIDENCE_EPS)).clamp(0.0, 1.0))
        })
        .unzip();
    PseudoLabelSet::new(labels, confidence, LabelSource::TextBranch)
}

/// Index and value of the largest entry, first index on ties.
pub(crate) fn argmax(row: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    (best, row[best])
}

/// Zero-shot assignment: each image takes its most similar text row.
///
/// Confidence is the winning cosine similarity clipped to `[0, 1]`.
pub fn nearest_text_labels(v: &EmbeddingSet, t: &EmbeddingSet) -> Result<PseudoLabelSet> {
    if v.dims() != t.dims() {
        return Err(Error::DimensionMismatch { expected: t.dims(), actual: v.dims() });
    }
    let (labels, confidence) = v
        .iter_rows()
        .map(|row| {
            let sims: Vec<f64> = t.iter_rows().map(|c| dot(row, c)).collect();
            let (best, top) = argmax(&sims);
            (best, top.clamp(0.0, 1.0))
        })
        .unzip();
    PseudoLabelSet::new(labels, confidence, LabelSource::ModelPrediction)
}

/// Default neighborhood for the k-NN vote: the average class size.
pub fn default_knn_k(n: usize, m: usize) -> usize {
    (n / m.max(1)).max(1)
}

/// Majority vote of the nearest-text labels among each image's `k` nearest
/// other images. Ties go to the lowest class index.
pub fn knn_pseudo_labels(v: &EmbeddingSet, t: &EmbeddingSet, k: usize) -> Result<PseudoLabelSet> {
    let n = v.rows();
    let m = t.rows();
    if k == 0 || k >= n {
        return Err(Error::validation(format!("k must be in [1, {n}), got {k}")));
    }
    let votes = nearest_text_labels(v, t)?.labels;
    let (labels, confidence) = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut sims: Vec<(usize, f64)> =
                (0..n).filter(|&i| i != j).map(|i| (i, dot(v.row(j), v.row(i)))).collect();
            let order = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
            if k < sims.len() {
                sims.select_nth_unstable_by(k - 1, order);
                sims.truncate(k);
            }
            let mut counts = vec![0usize; m];
            for (i, _) in &sims {
                counts[votes[*i]] += 1;
            }
            let mut best = 0;
            for c in 1..m {
                if counts[c] > counts[best] {
                    best = c;
                }
            }
            (best, counts[best] as f64 / k as f64)
        })
        .unzip();
    PseudoLabelSet::new(labels, confidence, LabelSource::ModelPrediction)
}

/// Settings for the projection-space pseudo-labeling pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelPropConfig {
    pub k: usize,
    /// Exponent applied to kept affinities; 1 leaves them unchanged.
    pub gamma: f64,
    pub propagation: PropagationConfig,
    /// Class count above which propagation is replaced by model predictions.
    pub class_limit: usize,
}

impl Default for LabelPropConfig {
    fn default() -> Self {
        Self { k: 20, gamma: 1.0, propagation: PropagationConfig::default(), class_limit: DEFAULT_CLASS_LIMIT }
    }
}

/// Pseudo labels plus the intermediate graph and scores, when computed.
#[derive(Debug, Clone)]
pub struct PseudoLabelOutput {
    pub labels: PseudoLabelSet,
    pub graph: Option<SparseMatrix>,
    pub diffusion: Option<DiffusionResult>,
}

/// Builds the graph over `texts` followed by `images` in the span of
/// `basis`, diffuses the text seeds and extracts image labels.
///
/// With more than `class_limit` classes, or `alpha == 0` (no diffusion),
/// images instead take their nearest projected text.
pub fn pseudo_labels_in_basis(
    basis: &ProjectionBasis,
    texts: &EmbeddingSet,
    images: &EmbeddingSet,
    cfg: &LabelPropConfig,
) -> Result<PseudoLabelOutput> {
    let m = texts.rows();
    let text_features = basis.graph_features(texts)?;
    let image_features = basis.graph_features(images)?;
    if m > cfg.class_limit || cfg.propagation.alpha == 0.0 {
        let labels = nearest_text_labels(&image_features, &text_features)?;
        return Ok(PseudoLabelOutput { labels, graph: None, diffusion: None });
    }
    let union = text_features.concat(&image_features)?;
    let affinity = build_topk_affinity_pow(&union, cfg.k, cfg.gamma)?;
    let w = normalize_symmetric(&affinity);
    let diffusion = propagate(&w, m, &cfg.propagation)?;
    let labels = extract_pseudo_labels(&diffusion, m)?;
    Ok(PseudoLabelOutput { labels, graph: Some(w), diffusion: Some(diffusion) })
}
