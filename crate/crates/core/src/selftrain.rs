//! Two-branch cross-modality self-training.
//!
//! The text branch adapts class text embeddings against fixed image
//! embeddings; the visual branch adapts image embeddings against class
//! centers. Each epoch both branches recompute their projection basis and
//! propagated pseudo labels, train on the labels both branches agreed on in
//! the previous epoch, and hand their fresh labels to the next agreement.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{
    adapted_projection, adapter_forward, backprop_to_adapter, ce_loss_and_grads, class_centers, cosine_logits,
    softmax_rows, AdaptedSide, AffineAdapter, ClassCenters, OptimizerState,
};
use crate::embedstore::{ClassCatalog, EmbeddingSet, LabelVector, Template};
use crate::error::{Error, Result};
use crate::harness::{top1_accuracy, EpochRecord, EvalReport};
use crate::labelprop::{
    argmax, nearest_text_labels, pseudo_labels_in_basis, LabelPropConfig, LabelSource, PropagationConfig,
    PseudoLabelSet, DEFAULT_CLASS_LIMIT,
};
use crate::projection::{compute_text_basis, ProjectionBasis, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Branch {
    Text,
    Visual,
}

impl Branch {
    /// Text set each branch builds its basis and classifier from.
    pub fn template(self) -> Template {
        match self {
            Branch::Text => Template::Single,
            Branch::Visual => Template::Multi,
        }
    }

    fn source(self) -> LabelSource {
        match self {
            Branch::Text => LabelSource::TextBranch,
            Branch::Visual => LabelSource::VisualBranch,
        }
    }

    fn tag(self) -> u64 {
        match self {
            Branch::Text => 1,
            Branch::Visual => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    Transductive,
    Inductive,
}

/// All knobs of a self-training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Optimizer steps per branch before training stops.
    pub max_iterations: usize,
    pub max_epochs: usize,
    pub alpha: f64,
    pub k: usize,
    pub gamma: f64,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    pub class_limit: usize,
    pub logit_scale: f64,
    pub seed: u64,
    pub mode: Mode,
    /// Also update the adapter bias. Off by default: the branch losses are
    /// nearly flat along a shared shift of all rows while propagation is
    /// not, so the bias random-walks under SGD noise until the propagated
    /// labels collapse onto one class.
    pub train_bias: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 64,
            max_iterations: 5000,
            max_epochs: 50,
            alpha: 0.99,
            k: 20,
            gamma: 1.0,
            cg_tol: 1e-6,
            cg_max_iter: 200,
            class_limit: DEFAULT_CLASS_LIMIT,
            logit_scale: 100.0,
            seed: 0,
            mode: Mode::Transductive,
            train_bias: false,
        }
    }
}

impl RunConfig {
    /// Defaults with the smaller batch used for catalogs of more than 200 classes.
    pub fn for_classes(m: usize) -> Self {
        let mut cfg = Self::default();
        if m > 200 {
            cfg.batch_size = 32;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::validation(format!("alpha must be in [0, 1), got {}", self.alpha)));
        }
        if self.k == 0 {
            return Err(Error::validation("k must be at least 1"));
        }
        for (name, v) in
            [("lr", self.lr), ("momentum", self.momentum), ("weight_decay", self.weight_decay), ("cg_tol", self.cg_tol)]
        {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::validation(format!("{name} must be finite and non-negative")));
            }
        }
        if !self.logit_scale.is_finite() || self.logit_scale <= 0.0 || !self.gamma.is_finite() || self.gamma <= 0.0 {
            return Err(Error::validation("logit_scale and gamma must be positive"));
        }
        Ok(())
    }

    pub fn labelprop(&self) -> LabelPropConfig {
        LabelPropConfig {
            k: self.k,
            gamma: self.gamma,
            propagation: PropagationConfig {
                alpha: self.alpha,
                cg_tol: self.cg_tol,
                cg_max_iter: self.cg_max_iter,
                dump_rows: false,
            },
            class_limit: self.class_limit,
        }
    }
}

/// Everything one branch carries from epoch to epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchState {
    pub branch: Branch,
    pub adapter: AffineAdapter,
    pub optimizer: OptimizerState,
    /// Basis of the most recent epoch; frozen for inference.
    pub basis: ProjectionBasis,
    /// Class centers of the most recent epoch (visual branch only).
    pub centers: Option<ClassCenters>,
    pub last_labels: Option<PseudoLabelSet>,
}

impl BranchState {
    pub fn new(branch: Branch, dims: usize, cfg: &RunConfig) -> Self {
        let adapter = AffineAdapter::identity(dims);
        let optimizer = OptimizerState::for_adapter(&adapter, cfg.lr, cfg.momentum, cfg.weight_decay);
        Self { branch, adapter, optimizer, basis: ProjectionBasis::identity(dims), centers: None, last_labels: None }
    }

    /// Projected text and image rows under the current adapter and `basis`.
    fn embed(
        &self,
        v: &EmbeddingSet,
        catalog: &ClassCatalog,
        basis: &ProjectionBasis,
    ) -> Result<(EmbeddingSet, EmbeddingSet)> {
        let texts = catalog.text(self.branch.template());
        match self.branch {
            Branch::Text => Ok((adapted_projection(&self.adapter, texts, basis)?, basis.project(v)?)),
            Branch::Visual => Ok((basis.project(texts)?, adapted_projection(&self.adapter, v, basis)?)),
        }
    }

    /// Text rows (after the adapter for the text branch) that define the basis.
    fn basis_texts(&self, catalog: &ClassCatalog) -> Result<EmbeddingSet> {
        let texts = catalog.text(self.branch.template());
        match self.branch {
            Branch::Text => adapter_forward(&self.adapter, texts),
            Branch::Visual => texts.l2_normalize(),
        }
    }

    /// Logits of every image under the stored basis (and centers).
    pub fn logits(&self, v: &EmbeddingSet, catalog: &ClassCatalog, scale: f64) -> Result<DMatrix<f64>> {
        let (texts, images) = self.embed(v, catalog, &self.basis)?;
        match self.branch {
            Branch::Text => cosine_logits(&images, &texts, scale),
            Branch::Visual => {
                let centers =
                    self.centers.as_ref().ok_or_else(|| Error::validation("visual branch has no class centers yet"))?;
                cosine_logits(&images, &centers.centers, scale)
            }
        }
    }

    /// Mean cross-entropy of this branch on the masked entries of `labels`,
    /// using the stored basis and centers.
    pub fn loss_on(
        &self,
        v: &EmbeddingSet,
        catalog: &ClassCatalog,
        labels: &PseudoLabelSet,
        scale: f64,
    ) -> Result<f64> {
        let logits = self.logits(v, catalog, scale)?;
        Ok(ce_loss_and_grads(&logits, &labels.labels, &labels.mask())?.0)
    }
}

/// What one epoch of one branch produced.
#[derive(Debug, Clone)]
pub struct EpochOutcome {
    /// Freshly propagated labels for the next agreement.
    pub labels: PseudoLabelSet,
    /// Logits of every image after this epoch's updates.
    pub logits: DMatrix<f64>,
    pub mean_loss: Option<f64>,
    pub steps: usize,
    pub warning: Option<String>,
}

/// Pseudo labels of one branch under its current adapter, plus the basis used.
fn branch_pseudo_labels(
    state: &BranchState,
    v: &EmbeddingSet,
    catalog: &ClassCatalog,
    cfg: &RunConfig,
) -> Result<(ProjectionBasis, PseudoLabelSet)> {
    let basis = compute_text_basis(&state.basis_texts(catalog)?, Variant::P2)?;
    let (texts, images) = match state.branch {
        Branch::Text => (state.basis_texts(catalog)?, v.clone()),
        Branch::Visual => (catalog.text(Branch::Visual.template()).clone(), adapter_forward(&state.adapter, v)?),
    };
    let out = pseudo_labels_in_basis(&basis, &texts, &images, &cfg.labelprop())?;
    let source = if out.labels.source == LabelSource::ModelPrediction {
        LabelSource::ModelPrediction
    } else {
        state.branch.source()
    };
    Ok((basis, out.labels.with_source(source)))
}

fn epoch_rng(cfg: &RunConfig, branch: Branch, epoch: usize) -> ChaCha8Rng {
    let mix = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add((epoch as u64) << 2).wrapping_add(branch.tag());
    ChaCha8Rng::seed_from_u64(mix)
}

/// Runs one epoch of `state`'s branch, training on the masked entries of `shared`.
pub fn run_epoch(
    state: &mut BranchState,
    v: &EmbeddingSet,
    catalog: &ClassCatalog,
    shared: &PseudoLabelSet,
    cfg: &RunConfig,
    epoch: usize,
) -> Result<EpochOutcome> {
    let n = v.rows();
    if shared.len() != n {
        return Err(Error::validation(format!("{} shared labels for {n} images", shared.len())));
    }
    let scale = cfg.logit_scale;

    // (1)-(3): adapted embeddings, basis, fresh labels.
    let (basis, fresh) = branch_pseudo_labels(state, v, catalog, cfg)?;
    let (texts_hat, images_hat) = state.embed(v, catalog, &basis)?;

    let centers = match state.branch {
        Branch::Visual => Some(class_centers(&images_hat, shared, catalog.classes(), &texts_hat)?),
        Branch::Text => None,
    };

    // (4): mini-batches over the agreed samples.
    let mask = shared.mask();
    let mut masked: Vec<usize> = (0..n).filter(|&j| mask[j]).collect();
    let minimum = ((0.01 * n as f64).ceil() as usize).max(cfg.batch_size);
    let mut losses = Vec::new();
    let mut warning = None;
    if masked.len() < minimum {
        let msg = format!(
            "epoch {epoch} {:?} branch: {} agreed samples below minimum {minimum}, skipping updates",
            state.branch,
            masked.len()
        );
        log::warn!("{msg}");
        warning = Some(msg);
    } else {
        masked.shuffle(&mut epoch_rng(cfg, state.branch, epoch));
        let texts_raw = catalog.text(state.branch.template());
        for batch in masked.chunks(cfg.batch_size) {
            if state.optimizer.step_count >= cfg.max_iterations {
                break;
            }
            let batch_labels: Vec<usize> = batch.iter().map(|&j| shared.labels[j]).collect();
            let all = vec![true; batch.len()];
            let grads = match state.branch {
                Branch::Text => {
                    let t_hat = adapted_projection(&state.adapter, texts_raw, &basis)?;
                    let v_batch = images_hat.select(batch)?;
                    let logits = cosine_logits(&v_batch, &t_hat, scale)?;
                    let (loss, dlogits) = ce_loss_and_grads(&logits, &batch_labels, &all)?;
                    losses.push(loss);
                    backprop_to_adapter(
                        &state.adapter,
                        texts_raw,
                        &dlogits,
                        &v_batch,
                        AdaptedSide::Columns,
                        Some(&basis),
                        scale,
                    )?
                }
                Branch::Visual => {
                    let w_hat = &centers.as_ref().expect("visual branch has centers").centers;
                    let v_raw = v.select(batch)?;
                    let v_batch = adapted_projection(&state.adapter, &v_raw, &basis)?;
                    let logits = cosine_logits(&v_batch, w_hat, scale)?;
                    let (loss, dlogits) = ce_loss_and_grads(&logits, &batch_labels, &all)?;
                    losses.push(loss);
                    backprop_to_adapter(
                        &state.adapter,
                        &v_raw,
                        &dlogits,
                        w_hat,
                        AdaptedSide::Rows,
                        Some(&basis),
                        scale,
                    )?
                }
            };
            let mut grads = grads;
            if !cfg.train_bias {
                grads.bias.iter_mut().for_each(|b| *b = 0.0);
            }
            state.adapter.apply_step(&grads, &mut state.optimizer)?;
        }
    }

    // (5): store the epoch's basis and centers and report full-set logits.
    state.basis = basis;
    state.centers = centers;
    state.last_labels = Some(fresh.clone());
    let logits = state.logits(v, catalog, scale)?;
    let mean_loss = if losses.is_empty() { None } else { Some(losses.iter().sum::<f64>() / losses.len() as f64) };
    Ok(EpochOutcome { labels: fresh, logits, mean_loss, steps: losses.len(), warning })
}

/// Marks where two label sets agree; agreed entries carry the common label.
pub fn share_labels(labels_t: &PseudoLabelSet, labels_v: &PseudoLabelSet) -> Result<PseudoLabelSet> {
    if labels_t.len() != labels_v.len() {
        return Err(Error::validation(format!("cannot share {} and {} labels", labels_t.len(), labels_v.len())));
    }
    let mask: Vec<bool> = labels_t.labels.iter().zip(&labels_v.labels).map(|(a, b)| a == b).collect();
    let confidence = labels_t.confidence.iter().zip(&labels_v.confidence).map(|(a, b)| a.min(*b)).collect();
    let mut shared = PseudoLabelSet::new(labels_t.labels.clone(), confidence, LabelSource::Agreed)?;
    shared.agreement_mask = Some(mask);
    Ok(shared)
}

/// Ensemble predictions and averaged class probabilities.
#[derive(Debug, Clone)]
pub struct Inference {
    pub predictions: Vec<usize>,
    pub probabilities: DMatrix<f64>,
}

/// Averages the two branches' softmax probabilities under their frozen
/// adapters, bases and centers. No pseudo labels are generated.
pub fn infer(
    text: &BranchState,
    visual: &BranchState,
    x: &EmbeddingSet,
    catalog: &ClassCatalog,
    scale: f64,
) -> Result<Inference> {
    if x.dims() != text.adapter.dims() {
        return Err(Error::DimensionMismatch { expected: text.adapter.dims(), actual: x.dims() });
    }
    let p_text = softmax_rows(&text.logits(x, catalog, scale)?);
    let p_visual = softmax_rows(&visual.logits(x, catalog, scale)?);
    let probabilities = (p_text + p_visual) * 0.5;
    let predictions = (0..probabilities.nrows())
        .map(|j| argmax(&probabilities.row(j).iter().copied().collect::<Vec<_>>()).0)
        .collect();
    Ok(Inference { predictions, probabilities })
}

/// Final branch states and the evaluation report.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub text: BranchState,
    pub visual: BranchState,
    pub report: EvalReport,
    /// Agreed labels after the last completed epoch.
    pub shared: PseudoLabelSet,
}

/// A failed run with the report up to the failing epoch.
#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub partial: Box<EvalReport>,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} epochs)", self.error, self.partial.per_epoch.len())
    }
}

impl std::error::Error for RunFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

fn accuracy_of(labels: &[usize], gt: Option<&LabelVector>) -> Result<Option<f64>> {
    gt.map(|gt| top1_accuracy(labels, gt)).transpose()
}

fn masked_accuracy(shared: &PseudoLabelSet, gt: Option<&LabelVector>) -> Option<f64> {
    let gt = gt?;
    let mask = shared.mask();
    let (mut hits, mut total) = (0usize, 0usize);
    for (j, &keep) in mask.iter().enumerate() {
        if keep {
            total += 1;
            hits += usize::from(gt.get(j) == Some(shared.labels[j]));
        }
    }
    (total > 0).then(|| hits as f64 / total as f64)
}

/// Bootstraps both branches and alternates epochs with label sharing until
/// `max_epochs` or `max_iterations` steps per branch.
pub fn run_self_training(
    v: &EmbeddingSet,
    catalog: &ClassCatalog,
    cfg: &RunConfig,
    eval_labels: Option<&LabelVector>,
) -> std::result::Result<RunOutput, RunFailure> {
    let mut report = EvalReport::default();
    match train(v, catalog, cfg, eval_labels, &mut report) {
        Ok((text, visual, shared)) => Ok(RunOutput { text, visual, report, shared }),
        Err(error) => {
            report.summarize();
            Err(RunFailure { error, partial: Box::new(report) })
        }
    }
}

/// Trains on `train`, then scores `heldout` with the frozen branches.
///
/// No pseudo labels are generated for the held-out rows; the report gains
/// `heldout_accuracy` when `heldout_labels` is given.
pub fn run_inductive(
    train: &EmbeddingSet,
    train_labels: Option<&LabelVector>,
    heldout: &EmbeddingSet,
    heldout_labels: Option<&LabelVector>,
    catalog: &ClassCatalog,
    cfg: &RunConfig,
) -> std::result::Result<(RunOutput, Inference), RunFailure> {
    let mut output = run_self_training(train, catalog, cfg, train_labels)?;
    let scored = (|| {
        if let Some(gt) = heldout_labels {
            if gt.len() != heldout.rows() {
                return Err(Error::validation(format!("{} held-out labels for {} images", gt.len(), heldout.rows())));
            }
        }
        let x = if heldout.is_unit_norm() { heldout.clone() } else { heldout.l2_normalize()? };
        let inference = infer(&output.text, &output.visual, &x, catalog, cfg.logit_scale)?;
        let accuracy = accuracy_of(&inference.predictions, heldout_labels)?;
        Ok((inference, accuracy))
    })();
    match scored {
        Ok((inference, accuracy)) => {
            output.report.heldout_accuracy = accuracy;
            Ok((output, inference))
        }
        Err(error) => Err(RunFailure { error, partial: Box::new(output.report) }),
    }
}

fn train(
    v: &EmbeddingSet,
    catalog: &ClassCatalog,
    cfg: &RunConfig,
    eval_labels: Option<&LabelVector>,
    report: &mut EvalReport,
) -> Result<(BranchState, BranchState, PseudoLabelSet)> {
    cfg.validate()?;
    if v.dims() != catalog.dims() {
        return Err(Error::DimensionMismatch { expected: catalog.dims(), actual: v.dims() });
    }
    if let Some(gt) = eval_labels {
        if gt.len() != v.rows() {
            return Err(Error::validation(format!("{} evaluation labels for {} images", gt.len(), v.rows())));
        }
        gt.check_classes(catalog.classes())?;
    }
    let v = if v.is_unit_norm() { v.clone() } else { v.l2_normalize()? };
    let v = &v;
    let scale = cfg.logit_scale;

    report.zero_shot_single_accuracy =
        accuracy_of(&nearest_text_labels(v, &catalog.single().l2_normalize()?)?.labels, eval_labels)?;
    report.zero_shot_multi_accuracy = match catalog.multi() {
        Some(multi) => accuracy_of(&nearest_text_labels(v, &multi.l2_normalize()?)?.labels, eval_labels)?,
        None => report.zero_shot_single_accuracy,
    };

    // Epoch 0: independent propagation in both branches, then agreement.
    let mut text = BranchState::new(Branch::Text, v.dims(), cfg);
    let mut visual = BranchState::new(Branch::Visual, v.dims(), cfg);
    let (text_basis, text_labels) = branch_pseudo_labels(&text, v, catalog, cfg)?;
    let (visual_basis, visual_labels) = branch_pseudo_labels(&visual, v, catalog, cfg)?;
    let mut shared = share_labels(&text_labels, &visual_labels)?;
    report.bootstrap_accuracy = accuracy_of(&text_labels.labels, eval_labels)?;
    report.bootstrap_visual_accuracy = accuracy_of(&visual_labels.labels, eval_labels)?;
    report.bootstrap_agreement_fraction = shared.masked_count() as f64 / v.rows() as f64;
    text.basis = text_basis;
    text.last_labels = Some(text_labels);
    let (visual_texts, visual_images) = visual.embed(v, catalog, &visual_basis)?;
    visual.centers = Some(class_centers(&visual_images, &shared, catalog.classes(), &visual_texts)?);
    visual.basis = visual_basis;
    visual.last_labels = Some(visual_labels);

    for epoch in 1..=cfg.max_epochs {
        if text.optimizer.step_count >= cfg.max_iterations && visual.optimizer.step_count >= cfg.max_iterations {
            break;
        }
        let (text_out, visual_out) = rayon::join(
            || run_epoch(&mut text, v, catalog, &shared, cfg, epoch),
            || run_epoch(&mut visual, v, catalog, &shared, cfg, epoch),
        );
        let (text_out, visual_out) = (text_out?, visual_out?);
        report.warnings.extend(text_out.warning.iter().chain(&visual_out.warning).cloned());

        shared = share_labels(&text_out.labels, &visual_out.labels)?;
        let agreement_fraction = shared.masked_count() as f64 / v.rows() as f64;
        let ensemble_accuracy = match eval_labels {
            Some(gt) => Some(top1_accuracy(&infer(&text, &visual, v, catalog, scale)?.predictions, gt)?),
            None => None,
        };
        let record = EpochRecord {
            epoch,
            text_loss: text_out.mean_loss,
            visual_loss: visual_out.mean_loss,
            text_steps: text_out.steps,
            visual_steps: visual_out.steps,
            agreement_fraction,
            text_pseudo_accuracy: accuracy_of(&text_out.labels.labels, eval_labels)?,
            visual_pseudo_accuracy: accuracy_of(&visual_out.labels.labels, eval_labels)?,
            agreed_pseudo_accuracy: masked_accuracy(&shared, eval_labels),
            ensemble_accuracy,
        };
        log::info!(
            "epoch {epoch}: agreement {:.4}, losses {:?}/{:?}, ensemble accuracy {:?}",
            record.agreement_fraction,
            record.text_loss,
            record.visual_loss,
            record.ensemble_accuracy
        );
        report.per_epoch.push(record);
    }
    report.summarize();
    Ok((text, visual, shared))
}
