//! Evaluation metrics, the seeded synthetic benchmark and report emission.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedstore::{norm, ClassCatalog, EmbeddingSet, LabelVector};
use crate::error::{Error, Result};

/// Fraction of predictions equal to the ground truth.
pub fn top1_accuracy(preds: &[usize], gt: &LabelVector) -> Result<f64> {
    if preds.len() != gt.len() {
        return Err(Error::validation(format!("{} predictions for {} labels", preds.len(), gt.len())));
    }
    if preds.is_empty() {
        return Err(Error::validation("accuracy of an empty prediction set"));
    }
    let gt = gt.dense()?;
    let hits = preds.iter().zip(&gt).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Parameters of the synthetic misaligned-modality benchmark.
///
/// Each class has a random unit direction. Images scatter around it with
/// per-coordinate standard deviation `sigma_visual`; every text embedding is
/// the class direction plus `offset` times one shared direction (the modality
/// gap) plus noise of per-coordinate deviation `sigma_text`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dims: usize,
    pub sigma_visual: f64,
    pub sigma_text: f64,
    pub offset: f64,
    /// Prompt templates drawn per class; the first is the single-template
    /// embedding and the renormalized mean of all of them the multi-template one.
    pub templates: usize,
    pub seed: u64,
}

impl SynthSpec {
    /// Reference configuration used by the end-to-end checks.
    pub fn reference(seed: u64) -> Self {
        Self {
            classes: 10,
            per_class: 200,
            dims: 64,
            sigma_visual: 0.35,
            sigma_text: 0.05,
            offset: 1.5,
            templates: 8,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::validation("synthetic benchmark needs at least 2 classes"));
        }
        if self.dims < self.classes + 1 {
            return Err(Error::validation("synthetic benchmark needs dims >= classes + 1"));
        }
        if self.per_class == 0 || self.templates == 0 {
            return Err(Error::validation("per_class and templates must be positive"));
        }
        for (name, v) in [("sigma_visual", self.sigma_visual), ("sigma_text", self.sigma_text), ("offset", self.offset)]
        {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::validation(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub images: EmbeddingSet,
    pub catalog: ClassCatalog,
    pub labels: LabelVector,
}

fn gaussian(rng: &mut ChaCha8Rng, dims: usize) -> Vec<f64> {
    (0..dims).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit_vector(rng: &mut ChaCha8Rng, dims: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, dims);
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn normalized(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let n = norm(&v);
    if n <= 1e-12 {
        return Err(Error::validation("synthetic sample collapsed to zero"));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

pub fn generate_synth(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let (m, d) = (spec.classes, spec.dims);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let directions: Vec<Vec<f64>> = (0..m).map(|_| unit_vector(&mut rng, d)).collect();
    let shared = unit_vector(&mut rng, d);

    let mut single = Vec::with_capacity(m * d);
    let mut multi = Vec::with_capacity(m * d);
    for dir in &directions {
        let mut sum = vec![0.0; d];
        for t in 0..spec.templates {
            let noise = gaussian(&mut rng, d);
            let text: Vec<f64> =
                (0..d).map(|k| dir[k] + spec.offset * shared[k] + spec.sigma_text * noise[k]).collect();
            let text = normalized(text)?;
            if t == 0 {
                single.extend_from_slice(&text);
            }
            sum.iter_mut().zip(&text).for_each(|(s, v)| *s += v);
        }
        multi.extend(normalized(sum)?);
    }

    let mut order: Vec<usize> = (0..m * spec.per_class).map(|i| i / spec.per_class).collect();
    order.shuffle(&mut rng);
    let mut images = Vec::with_capacity(order.len() * d);
    for &class in &order {
        let noise = gaussian(&mut rng, d);
        let img: Vec<f64> = (0..d).map(|k| directions[class][k] + spec.sigma_visual * noise[k]).collect();
        images.extend(normalized(img)?);
    }

    let names: Vec<String> = (0..m).map(|c| format!("class_{c:03}")).collect();
    let single = EmbeddingSet::new(single, d, names.clone(), true)?;
    let multi = if spec.templates > 1 { Some(EmbeddingSet::new(multi, d, names.clone(), true)?) } else { None };
    Ok(SynthData {
        images: EmbeddingSet::with_generated_ids(images, d, "img-", true)?,
        catalog: ClassCatalog::new(names, single, multi)?,
        labels: LabelVector::from_labels(&order),
    })
}

/// One side of a stratified split.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub images: EmbeddingSet,
    pub labels: LabelVector,
    /// Row indices into the original set, ascending.
    pub indices: Vec<usize>,
}

/// Seeded stratified split; `fraction` of every class goes to the first partition.
pub fn split_transductive_inductive(
    v: &EmbeddingSet,
    gt: &LabelVector,
    fraction: f64,
    seed: u64,
) -> Result<(Partition, Partition)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::validation(format!("split fraction must be in (0, 1), got {fraction}")));
    }
    if gt.len() != v.rows() {
        return Err(Error::validation(format!("{} labels for {} rows", gt.len(), v.rows())));
    }
    let labels = gt.dense()?;
    let m = labels.iter().max().map_or(0, |&c| c + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (i, &c) in labels.iter().enumerate() {
        by_class[c].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut first = Vec::new();
    let mut second = Vec::new();
    for (c, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(Error::validation(format!("class {c} has fewer than 2 samples")));
        }
        members.shuffle(&mut rng);
        let take = ((members.len() as f64 * fraction).round() as usize).clamp(1, members.len() - 1);
        first.extend_from_slice(&members[..take]);
        second.extend_from_slice(&members[take..]);
    }
    first.sort_unstable();
    second.sort_unstable();
    let part = |indices: Vec<usize>| -> Result<Partition> {
        Ok(Partition { images: v.select(&indices)?, labels: gt.select(&indices), indices })
    };
    Ok((part(first)?, part(second)?))
}

/// One row of the per-epoch report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub text_loss: Option<f64>,
    pub visual_loss: Option<f64>,
    pub text_steps: usize,
    pub visual_steps: usize,
    /// Fraction of images on which the two branches' pseudo labels agree.
    pub agreement_fraction: f64,
    pub text_pseudo_accuracy: Option<f64>,
    pub visual_pseudo_accuracy: Option<f64>,
    /// Accuracy of the agreed labels, over agreed images only.
    pub agreed_pseudo_accuracy: Option<f64>,
    pub ensemble_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub zero_shot_single_accuracy: Option<f64>,
    pub zero_shot_multi_accuracy: Option<f64>,
    /// Accuracy of the text branch's initial propagated labels.
    pub bootstrap_accuracy: Option<f64>,
    pub bootstrap_visual_accuracy: Option<f64>,
    pub bootstrap_agreement_fraction: f64,
    pub per_epoch: Vec<EpochRecord>,
    pub final_accuracy: Option<f64>,
    pub peak_accuracy: Option<f64>,
    pub peak_epoch: Option<usize>,
    /// Ensemble accuracy on held-out images (inductive runs only).
    pub heldout_accuracy: Option<f64>,
    pub warnings: Vec<String>,
}

impl EvalReport {
    /// Recomputes final and peak entries from `per_epoch`.
    pub fn summarize(&mut self) {
        self.final_accuracy = self.per_epoch.last().and_then(|r| r.ensemble_accuracy);
        let mut peak: Option<(usize, f64)> = None;
        for r in &self.per_epoch {
            if let Some(acc) = r.ensemble_accuracy {
                if peak.is_none_or(|(_, best)| acc > best) {
                    peak = Some((r.epoch, acc));
                }
            }
        }
        self.peak_epoch = peak.map(|(e, _)| e);
        self.peak_accuracy = peak.map(|(_, a)| a);
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(w);
        for r in &self.per_epoch {
            writer.serialize(r).map_err(csv_error)?;
        }
        if self.per_epoch.is_empty() {
            writer
                .write_record([
                    "epoch",
                    "text_loss",
                    "visual_loss",
                    "text_steps",
                    "visual_steps",
                    "agreement_fraction",
                    "text_pseudo_accuracy",
                    "visual_pseudo_accuracy",
                    "agreed_pseudo_accuracy",
                    "ensemble_accuracy",
                ])
                .map_err(csv_error)?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `report.csv` and `report.json` into `dir`.
    pub fn write_files(&self, dir: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(dir.join("report.csv"))?)?;
        std::fs::write(dir.join("report.json"), self.to_json() + "\n")?;
        Ok(())
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedstore::dot;
    use crate::labelprop::nearest_text_labels;

    #[test]
    fn accuracy_cases() {
        let gt = LabelVector::from_labels(&[0, 1, 2, 1]);
        assert_eq!(top1_accuracy(&[0, 1, 2, 1], &gt).unwrap(), 1.0);
        assert_eq!(top1_accuracy(&[1, 2, 0, 0], &gt).unwrap(), 0.0);
        assert_eq!(top1_accuracy(&[0, 1, 2, 0], &gt).unwrap(), 0.75);
        assert!(top1_accuracy(&[0, 1], &gt).is_err());
        assert!(top1_accuracy(&[0], &LabelVector::new(vec![None])).is_err());
    }

    #[test]
    fn perfect_geometry_is_perfectly_classified() {
        let spec =
            SynthSpec { sigma_visual: 0.0, sigma_text: 0.0, offset: 0.0, per_class: 5, ..SynthSpec::reference(3) };
        let data = generate_synth(&spec).unwrap();
        let preds = nearest_text_labels(&data.images, data.catalog.single()).unwrap().labels;
        assert_eq!(top1_accuracy(&preds, &data.labels).unwrap(), 1.0);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthSpec { per_class: 20, ..SynthSpec::reference(11) };
        assert_eq!(generate_synth(&spec).unwrap(), generate_synth(&spec).unwrap());
        let other = SynthSpec { seed: 12, ..spec.clone() };
        assert_ne!(generate_synth(&spec).unwrap().images, generate_synth(&other).unwrap().images);
    }

    #[test]
    fn synthetic_gap_is_visible() {
        let data = generate_synth(&SynthSpec { per_class: 20, ..SynthSpec::reference(1) }).unwrap();
        let t = data.catalog.single();
        let tt = dot(t.row(0), t.row(1));
        assert!(tt > 0.5, "text rows should share the offset direction, cos = {tt}");
    }

    #[test]
    fn invalid_spec_rejected() {
        assert!(generate_synth(&SynthSpec { dims: 10, ..SynthSpec::reference(0) }).is_err());
        assert!(generate_synth(&SynthSpec { classes: 1, ..SynthSpec::reference(0) }).is_err());
    }

    #[test]
    fn stratified_half_split() {
        let data = generate_synth(&SynthSpec { per_class: 10, ..SynthSpec::reference(5) }).unwrap();
        let (a, b) = split_transductive_inductive(&data.images, &data.labels, 0.5, 9).unwrap();
        for part in [&a, &b] {
            let mut counts = [0usize; 10];
            for l in part.labels.values() {
                counts[l.unwrap()] += 1;
            }
            assert_eq!(counts, [5; 10]);
        }
        let mut all: Vec<usize> = a.indices.iter().chain(&b.indices).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        let (a2, _) = split_transductive_inductive(&data.images, &data.labels, 0.5, 9).unwrap();
        assert_eq!(a.indices, a2.indices);
    }

    #[test]
    fn split_rejects_singleton_class_and_bad_fraction() {
        let v = EmbeddingSet::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]], "v", true).unwrap();
        let gt = LabelVector::from_labels(&[0, 0, 1]);
        assert!(split_transductive_inductive(&v, &gt, 0.5, 0).is_err());
        let gt = LabelVector::from_labels(&[0, 0, 0]);
        assert!(split_transductive_inductive(&v, &gt, 0.0, 0).is_err());
        assert!(split_transductive_inductive(&v, &gt, 1.0, 0).is_err());
    }

    #[test]
    fn summary_tracks_peak_and_final() {
        let row = |epoch, acc| EpochRecord {
            epoch,
            text_loss: None,
            visual_loss: None,
            text_steps: 0,
            visual_steps: 0,
            agreement_fraction: 1.0,
            text_pseudo_accuracy: None,
            visual_pseudo_accuracy: None,
            agreed_pseudo_accuracy: None,
            ensemble_accuracy: Some(acc),
        };
        let mut report = EvalReport { per_epoch: vec![row(1, 0.5), row(2, 0.9), row(3, 0.8)], ..Default::default() };
        report.summarize();
        assert_eq!(report.final_accuracy, Some(0.8));
        assert_eq!(report.peak_accuracy, Some(0.9));
        assert_eq!(report.peak_epoch, Some(2));
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("epoch,text_loss,visual_loss"));
        assert_eq!(text.lines().count(), 4);
    }
}
