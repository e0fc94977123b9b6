use realign_core::embedstore::{EmbeddingSet, Template};
use realign_core::harness::{generate_synth, split_transductive_inductive, SynthData, SynthSpec};
use realign_core::labelprop::{pseudo_labels_in_basis, LabelSource};
use realign_core::projection::{compute_text_basis, Variant};
use realign_core::selftrain::{run_epoch, run_inductive, run_self_training, Branch, RunConfig, RunOutput};

fn reference(seed: u64) -> SynthData {
    generate_synth(&SynthSpec::reference(seed)).unwrap()
}

fn small(seed: u64) -> SynthData {
    generate_synth(&SynthSpec { per_class: 40, ..SynthSpec::reference(seed) }).unwrap()
}

/// Both branches after the label bootstrap, before any update.
fn bootstrap(data: &SynthData, cfg: &RunConfig) -> RunOutput {
    let cfg = RunConfig { max_epochs: 0, ..cfg.clone() };
    run_self_training(&data.images, &data.catalog, &cfg, Some(&data.labels)).unwrap()
}

fn assert_close(a: &[f64], b: &[f64]) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() < 1e-12, "{x} vs {y}");
    }
}

#[test]
fn one_epoch_lowers_each_branch_loss_on_the_agreed_set() {
    let data = reference(7);
    let cfg = RunConfig::for_classes(data.catalog.classes());
    let boot = bootstrap(&data, &cfg);
    let scale = cfg.logit_scale;
    for mut state in [boot.text.clone(), boot.visual.clone()] {
        let before = state.loss_on(&data.images, &data.catalog, &boot.shared, scale).unwrap();
        let out = run_epoch(&mut state, &data.images, &data.catalog, &boot.shared, &cfg, 1).unwrap();
        assert!(out.steps > 0);
        let after = state.loss_on(&data.images, &data.catalog, &boot.shared, scale).unwrap();
        assert!(after < before, "{:?} branch: loss {before} -> {after}", state.branch);
    }
}

#[test]
fn frozen_text_branch_reproduces_the_standalone_pipeline() {
    let data = small(3);
    let cfg = RunConfig { max_iterations: 0, ..RunConfig::for_classes(data.catalog.classes()) };

    let texts = data.catalog.text(Template::Single);
    let basis = compute_text_basis(texts, Variant::P2).unwrap();
    let standalone = pseudo_labels_in_basis(&basis, texts, &data.images, &cfg.labelprop()).unwrap().labels;

    let boot = bootstrap(&data, &cfg);
    let boot_labels = boot.text.last_labels.clone().unwrap();
    // The identity adapter renormalizes the texts once more, so scores agree
    // to rounding while the labels must match exactly.
    assert_eq!(boot_labels.labels, standalone.labels);
    assert_close(&boot_labels.confidence, &standalone.confidence);
    assert_close(boot.text.basis.matrix().as_slice(), basis.matrix().as_slice());

    let mut state = boot.text.clone();
    let out = run_epoch(&mut state, &data.images, &data.catalog, &boot.shared, &cfg, 1).unwrap();
    assert_eq!(out.steps, 0);
    assert_eq!(state.adapter, boot.text.adapter);
    assert_eq!(out.labels.labels, standalone.labels);
    assert_close(&out.labels.confidence, &standalone.confidence);
    assert_eq!(out.labels.source, LabelSource::TextBranch);
}

#[test]
fn updates_ignore_samples_outside_the_agreement_mask() {
    let data = small(5);
    let cfg = RunConfig::for_classes(data.catalog.classes());
    let boot = bootstrap(&data, &cfg);
    let mask = boot.shared.mask();
    let outside = mask.iter().position(|&m| !m).expect("some images disagree at bootstrap");

    let d = data.images.dims();
    let mut moved = data.images.data().to_vec();
    for k in 0..d {
        moved[outside * d + k] = if k == outside % d { 1.0 } else { 0.0 };
    }
    let perturbed = EmbeddingSet::new(moved, d, data.images.ids().to_vec(), true).unwrap();

    for branch in [Branch::Text, Branch::Visual] {
        let start = if branch == Branch::Text { &boot.text } else { &boot.visual };
        let mut a = start.clone();
        let mut b = start.clone();
        let out_a = run_epoch(&mut a, &data.images, &data.catalog, &boot.shared, &cfg, 1).unwrap();
        run_epoch(&mut b, &perturbed, &data.catalog, &boot.shared, &cfg, 1).unwrap();
        assert!(out_a.steps > 0);
        assert_eq!(a.adapter, b.adapter, "{branch:?} adapter depends on an unagreed sample");
        assert_eq!(a.optimizer, b.optimizer);
    }
}

#[test]
fn identical_configs_give_identical_runs() {
    let data = small(11);
    let cfg = RunConfig { max_epochs: 3, seed: 42, ..RunConfig::for_classes(data.catalog.classes()) };
    let first = run_self_training(&data.images, &data.catalog, &cfg, Some(&data.labels)).unwrap();
    let second = run_self_training(&data.images, &data.catalog, &cfg, Some(&data.labels)).unwrap();
    assert_eq!(first.report, second.report);
    assert_eq!(first.report.to_json(), second.report.to_json());
    assert_eq!(first.text.adapter, second.text.adapter);
    assert_eq!(first.visual.adapter, second.visual.adapter);
    assert_eq!(first.report.per_epoch.len(), 3);
}

#[test]
fn zero_epochs_report_only_the_starting_point() {
    let data = small(2);
    let boot = bootstrap(&data, &RunConfig::default());
    let r = &boot.report;
    assert!(r.zero_shot_single_accuracy.is_some());
    assert!(r.bootstrap_accuracy.is_some());
    assert!(r.per_epoch.is_empty());
    assert_eq!(r.final_accuracy, None);
    assert_eq!(r.heldout_accuracy, None);
}

/// Training on one half and scoring the other stays close to adapting on
/// that other half directly.
#[test]
fn inductive_accuracy_tracks_transductive() {
    let data = reference(7);
    let (train, test) = split_transductive_inductive(&data.images, &data.labels, 0.5, 7).unwrap();
    let cfg = RunConfig::for_classes(data.catalog.classes());

    let transductive = run_self_training(&test.images, &data.catalog, &cfg, Some(&test.labels)).unwrap();
    let (inductive, inference) =
        run_inductive(&train.images, Some(&train.labels), &test.images, Some(&test.labels), &data.catalog, &cfg)
            .unwrap();
    assert_eq!(inference.predictions.len(), test.images.rows());

    let held_out = inductive.report.heldout_accuracy.unwrap();
    let adapted = transductive.report.final_accuracy.unwrap();
    eprintln!("held-out {held_out:.4}, transductive {adapted:.4}");
    assert!((held_out - adapted).abs() <= 0.03, "held-out {held_out} vs transductive {adapted}");
}

/// When image clusters are tighter than the text prototypes are accurate,
/// propagation over the image graph corrects zero-shot mistakes.
#[test]
fn propagation_beats_zero_shot_when_clusters_are_informative() {
    let mut wins = 0;
    for seed in 0..10 {
        let spec = SynthSpec { sigma_visual: 0.2, sigma_text: 0.15, ..SynthSpec::reference(seed) };
        let data = generate_synth(&spec).unwrap();
        let cfg = RunConfig { seed, ..RunConfig::for_classes(data.catalog.classes()) };
        let report = bootstrap(&data, &cfg).report;
        let (zero_shot, propagated) = (report.zero_shot_single_accuracy.unwrap(), report.bootstrap_accuracy.unwrap());
        eprintln!("seed {seed}: zero-shot {zero_shot:.4} propagated {propagated:.4}");
        wins += usize::from(propagated > zero_shot);
    }
    assert!(wins >= 9, "propagation won {wins}/10 seeds");
}
