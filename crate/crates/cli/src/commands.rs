use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use realign_core::container::{load_catalog, load_embeddings, load_labels, save_container, Container};
use realign_core::embedstore::{ClassCatalog, EmbeddingSet, LabelVector, Template};
use realign_core::harness::{generate_synth, top1_accuracy, EvalReport, SynthSpec};
use realign_core::labelprop::pseudo_labels_in_basis;
use realign_core::projection::{alignment_stats, compute_text_basis, ProjectionBasis, Variant};
use realign_core::selftrain::{infer, run_inductive, run_self_training, Mode, RunFailure};
use realign_core::Error;
use serde_json::{json, Value};

use crate::args::{AdaptArgs, BenchSynthArgs, EvaluateArgs, ProjectArgs, PropagateArgs, SynthArgs};
use crate::bundle;
use crate::config::resolve;
use crate::error::{CliError, CliResult};

fn print(summary: Value) {
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
}

fn unit(v: EmbeddingSet) -> CliResult<EmbeddingSet> {
    Ok(if v.is_unit_norm() { v } else { v.l2_normalize()? })
}

fn load_inputs(embeddings: &Path, catalog: &Path) -> CliResult<(EmbeddingSet, ClassCatalog)> {
    let v = unit(load_embeddings(embeddings)?)?;
    let catalog = load_catalog(catalog)?;
    if v.dims() != catalog.dims() {
        return Err(Error::DimensionMismatch { expected: catalog.dims(), actual: v.dims() }.into());
    }
    Ok((v, catalog))
}

fn load_gt(path: Option<&Path>, rows: usize) -> CliResult<Option<LabelVector>> {
    let Some(path) = path else { return Ok(None) };
    let gt = load_labels(path)?;
    if gt.len() != rows {
        return Err(Error::Validation(format!("{} labels for {rows} images", gt.len())).into());
    }
    Ok(Some(gt))
}

fn text_basis(texts: &EmbeddingSet, variant: Variant) -> CliResult<ProjectionBasis> {
    Ok(match variant {
        Variant::P0 => ProjectionBasis::identity(texts.dims()),
        v => compute_text_basis(texts, v)?,
    })
}

pub fn project(args: &ProjectArgs) -> CliResult<()> {
    let (v, catalog) = load_inputs(&args.input.embeddings, &args.input.catalog)?;
    let gt = load_gt(args.labels.as_deref(), v.rows())?;
    let texts = unit(catalog.text(Template::from(args.template)).clone())?;
    let variant = Variant::from(args.variant);
    let basis = text_basis(&texts, variant)?;
    let projected = basis.project(&v)?;
    save_container(&Container::Embeddings(projected.clone()), &args.out)?;
    if let Some(path) = &args.basis_out {
        save_container(&Container::Basis(basis.clone()), path)?;
    }

    let mut summary = json!({ "variant": variant, "rank": basis.rank(), "rows": projected.rows() });
    if let Some(gt) = gt {
        summary["before"] = json!(alignment_stats(&v, &texts, &gt)?);
        summary["after"] = json!(alignment_stats(&projected, &basis.project(&texts)?, &gt)?);
    }
    print(summary);
    Ok(())
}

pub fn propagate(args: &PropagateArgs) -> CliResult<()> {
    let (v, catalog) = load_inputs(&args.input.embeddings, &args.input.catalog)?;
    let gt = load_gt(args.labels.as_deref(), v.rows())?;
    let cfg = resolve(&args.run, catalog.classes())?;
    let texts = unit(catalog.text(Template::from(args.template)).clone())?;
    let basis = text_basis(&texts, Variant::from(args.variant))?;
    let out = pseudo_labels_in_basis(&basis, &texts, &v, &cfg.labelprop())?;

    let labels = &out.labels;
    save_container(&Container::Labels(LabelVector::from_labels(&labels.labels)), &args.out)?;
    if let Some(path) = &args.edge_list {
        match &out.graph {
            Some(w) => {
                w.write_edge_list(BufWriter::new(File::create(path).map_err(Error::from)?)).map_err(Error::from)?
            }
            None => log::warn!("no graph was built (nearest-text fallback); {} not written", path.display()),
        }
    }
    let mean_confidence = labels.confidence.iter().sum::<f64>() / labels.len() as f64;
    let accuracy = gt.map(|gt| top1_accuracy(&labels.labels, &gt)).transpose()?;
    print(json!({
        "images": labels.len(),
        "classes": catalog.classes(),
        "source": labels.source,
        "mean_confidence": mean_confidence,
        "accuracy": accuracy,
        "cg_iterations": out.diffusion.as_ref().map(|z| z.cg_iterations.iter().copied().max()),
    }));
    Ok(())
}

/// Writes the report next to the bundle, partial reports included.
fn write_report(dir: &Path, report: &EvalReport) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(Error::from)?;
    report.write_files(dir)?;
    Ok(())
}

fn keep_partial<T>(dir: &Path, result: Result<T, RunFailure>) -> CliResult<T> {
    result.or_else(|failure| {
        write_report(dir, &failure.partial)?;
        Err(failure.into())
    })
}

fn report_summary(report: &EvalReport) -> Value {
    json!({
        "epochs": report.per_epoch.len(),
        "zero_shot_accuracy": report.zero_shot_single_accuracy,
        "bootstrap_accuracy": report.bootstrap_accuracy,
        "final_accuracy": report.final_accuracy,
        "peak_accuracy": report.peak_accuracy,
        "peak_epoch": report.peak_epoch,
        "heldout_accuracy": report.heldout_accuracy,
        "final_agreement": report.per_epoch.last().map(|r| r.agreement_fraction),
        "warnings": report.warnings.len(),
    })
}

pub fn adapt(args: &AdaptArgs) -> CliResult<()> {
    let (v, catalog) = load_inputs(&args.input.embeddings, &args.input.catalog)?;
    let gt = load_gt(args.labels.as_deref(), v.rows())?;
    let cfg = resolve(&args.run, catalog.classes())?;
    let heldout = match (&cfg.mode, &args.heldout) {
        (Mode::Inductive, Some(path)) => Some(unit(load_embeddings(path)?)?),
        (Mode::Inductive, None) => return Err(CliError::Usage("inductive mode needs --heldout".into())),
        (Mode::Transductive, Some(_)) => return Err(CliError::Usage("--heldout needs --mode inductive".into())),
        (Mode::Transductive, None) => None,
    };

    let (output, heldout_predictions) = match &heldout {
        Some(x) => {
            let heldout_gt = load_gt(args.heldout_labels.as_deref(), x.rows())?;
            let (output, inference) =
                keep_partial(&args.out, run_inductive(&v, gt.as_ref(), x, heldout_gt.as_ref(), &catalog, &cfg))?;
            (output, Some(inference.predictions))
        }
        None => (keep_partial(&args.out, run_self_training(&v, &catalog, &cfg, gt.as_ref()))?, None),
    };

    bundle::save(&args.out, &cfg, &output.text, &output.visual)?;
    write_report(&args.out, &output.report)?;
    let predictions = infer(&output.text, &output.visual, &v, &catalog, cfg.logit_scale)?.predictions;
    save_container(&Container::Labels(LabelVector::from_labels(&predictions)), args.out.join("predictions.rclp"))?;
    if let Some(p) = heldout_predictions {
        save_container(&Container::Labels(LabelVector::from_labels(&p)), args.out.join("heldout_predictions.rclp"))?;
    }
    print(report_summary(&output.report));
    Ok(())
}

pub fn evaluate(args: &EvaluateArgs) -> CliResult<()> {
    let gt = load_labels(&args.labels)?;
    let predictions = match (&args.predictions, &args.checkpoint) {
        (Some(path), _) => load_labels(path)?.dense()?,
        (None, Some(dir)) => {
            let (embeddings, catalog) = match (&args.embeddings, &args.catalog) {
                (Some(e), Some(c)) => (e, c),
                _ => return Err(CliError::Usage("--checkpoint needs --embeddings and --catalog".into())),
            };
            let (x, catalog) = load_inputs(embeddings, catalog)?;
            let (cfg, text, visual) = bundle::load(dir)?;
            let predictions = infer(&text, &visual, &x, &catalog, cfg.logit_scale)?.predictions;
            if let Some(out) = &args.out {
                save_container(&Container::Labels(LabelVector::from_labels(&predictions)), out)?;
            }
            predictions
        }
        (None, None) => return Err(CliError::Usage("give --predictions or --checkpoint".into())),
    };
    if predictions.len() != gt.len() {
        return Err(Error::Validation(format!("{} predictions for {} labels", predictions.len(), gt.len())).into());
    }
    print(json!({ "count": predictions.len(), "accuracy": top1_accuracy(&predictions, &gt)? }));
    Ok(())
}

fn synth_spec(args: &SynthArgs, run_seed: u64) -> SynthSpec {
    let base = SynthSpec::reference(args.data_seed.unwrap_or(run_seed));
    SynthSpec {
        classes: args.classes.unwrap_or(base.classes),
        per_class: args.per_class.unwrap_or(base.per_class),
        dims: args.dims.unwrap_or(base.dims),
        sigma_visual: args.sigma_visual.unwrap_or(base.sigma_visual),
        sigma_text: args.sigma_text.unwrap_or(base.sigma_text),
        offset: args.offset.unwrap_or(base.offset),
        templates: args.templates.unwrap_or(base.templates),
        ..base
    }
}

pub fn bench_synth(args: &BenchSynthArgs) -> CliResult<()> {
    let classes = args.synth.classes.unwrap_or(SynthSpec::reference(0).classes);
    let cfg = resolve(&args.run, classes)?;
    if cfg.mode == Mode::Inductive {
        return Err(CliError::Usage("bench-synth runs transductively; use adapt for inductive runs".into()));
    }
    let spec = synth_spec(&args.synth, cfg.seed);
    let data = generate_synth(&spec)?;

    let dir = &args.out;
    fs::create_dir_all(dir).map_err(Error::from)?;
    save_container(&Container::Embeddings(data.images.clone()), dir.join("images.rclp"))?;
    save_container(&Container::Catalog(data.catalog.clone()), dir.join("catalog.rclp"))?;
    save_container(&Container::Labels(data.labels.clone()), dir.join("labels.rclp"))?;
    let meta = json!({ "spec": spec, "config": cfg });
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(&meta).expect("metadata serializes") + "\n")
        .map_err(Error::from)?;

    let output = keep_partial(dir, run_self_training(&data.images, &data.catalog, &cfg, Some(&data.labels)))?;
    write_report(dir, &output.report)?;
    print(report_summary(&output.report));
    Ok(())
}
