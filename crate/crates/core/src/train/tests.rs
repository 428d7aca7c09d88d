use super::*;
use crate::data::{synth_stack, SplitStrategy, SynthConfig};
use crate::model::{Architecture, ModelConfig};

fn stack(slices: usize, seed: u64) -> PreparedStack {
    let cfg = SynthConfig { slices, classes: 3, height: 16, width: 16, seed, noise: 20.0 };
    let (img, lab) = synth_stack(&cfg).unwrap();
    PreparedStack::prepare(&img, &lab, 16, 16).unwrap()
}

fn model(arch: Architecture, ds: bool) -> ModelGraph<f32> {
    let mut cfg = ModelConfig::new(arch, 3).with_widths([2, 2, 2, 2, 2]);
    cfg.deep_supervision = ds;
    ModelGraph::build(cfg, &RngStream::new(3)).unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, augment: None, ..TrainConfig::default() }
}

#[derive(Default)]
struct Log {
    resets: Vec<(String, ResetReason)>,
    steps: Vec<Vec<usize>>,
}

impl TrainObserver for Log {
    fn on_reset(&mut self, stack_id: &str, reason: ResetReason) {
        self.resets.push((stack_id.to_string(), reason));
    }
    fn on_step(&mut self, _: &str, batch: &[usize], _: f64) {
        self.steps.push(batch.to_vec());
    }
}

#[test]
fn eighty_two_slices_take_seventeen_steps() {
    let s = stack(82, 1);
    let idx: Vec<usize> = (0..82).collect();
    let mut m = model(Architecture::Numsnet, false);
    let mut log = Log::default();
    let out = train(&mut m, &[TrainStack { stack: &s, train: &idx }], &quick(1), &mut log).unwrap();
    assert_eq!(out.epochs[0].steps, 17);
    assert_eq!(log.steps.len(), 17);
    assert_eq!(log.steps.last().unwrap(), &vec![80, 81]);
    assert!(out.epochs[0].loss.is_finite());
}

#[test]
fn one_boundary_reset_between_two_stacks() {
    let (a, b) = (stack(12, 1), stack(12, 2));
    let idx: Vec<usize> = (0..12).collect();
    let mut m = model(Architecture::Numsnet, false);
    let mut log = Log::default();
    let data = [TrainStack { stack: &a, train: &idx }, TrainStack { stack: &b, train: &idx }];
    train(&mut m, &data, &quick(1), &mut log).unwrap();
    let boundaries = log.resets.iter().filter(|(_, r)| *r == ResetReason::StackBoundary).count();
    assert_eq!(boundaries, 1);
    assert_eq!(log.resets[0].1, ResetReason::EpochStart);
}

#[test]
fn oracle_scores_perfectly() {
    let s = stack(20, 4);
    let m = model(Architecture::Numsnet, false);
    let idx: Vec<usize> = (0..20).collect();
    let opts = EvalOptions { oracle: true, ..EvalOptions::ordered("oracle") };
    let r = evaluate(&m, &s, &idx, &opts).unwrap().report;
    assert!(r.slices > 0);
    for v in [r.mean_iou(), r.mean_dice(), r.mean_precision(), r.mean_recall()] {
        assert!((v.unwrap() - 100.0).abs() < 1e-9, "{v:?}");
    }
}

#[test]
fn evaluation_is_deterministic() {
    let s = stack(10, 5);
    let m = model(Architecture::Numsnet, false);
    let idx: Vec<usize> = (0..10).collect();
    let a = evaluate(&m, &s, &idx, &EvalOptions::ordered("m")).unwrap();
    let b = evaluate(&m, &s, &idx, &EvalOptions::ordered("m")).unwrap();
    assert_eq!(a, b);
}

fn probs_by_index(e: &Evaluation<f32>) -> BTreeMap<usize, Tensor<f32>> {
    e.predictions.iter().map(|p| (p.index, p.prob.clone())).collect()
}

#[test]
fn shuffled_order_changes_only_propagating_models() {
    let s = stack(10, 6);
    let idx: Vec<usize> = (0..10).collect();
    let shuffled = EvalOptions { order: TestOrder::Shuffled { seed: 9 }, ..EvalOptions::ordered("m") };
    assert_ne!(TestOrder::Shuffled { seed: 9 }.apply(&idx), idx);
    for arch in [Architecture::Unet, Architecture::Unetpp] {
        let m = model(arch, false);
        let a = evaluate(&m, &s, &idx, &EvalOptions::ordered("m")).unwrap();
        let b = evaluate(&m, &s, &idx, &shuffled).unwrap();
        assert_eq!(probs_by_index(&a), probs_by_index(&b), "{arch}");
    }
    let m = model(Architecture::Numsnet, false);
    let a = evaluate(&m, &s, &idx, &EvalOptions::ordered("m")).unwrap();
    let b = evaluate(&m, &s, &idx, &shuffled).unwrap();
    assert_ne!(probs_by_index(&a), probs_by_index(&b));
}

#[test]
fn continued_state_differs_from_fresh() {
    let s = stack(10, 6);
    let m = model(Architecture::Numsnet, false);
    let first = evaluate(&m, &s, &[0, 1, 2], &EvalOptions::ordered("m")).unwrap();
    let cont = EvalOptions { state: TestState::Continue(first.final_state.clone()), ..EvalOptions::ordered("m") };
    let a = evaluate(&m, &s, &[5], &EvalOptions::ordered("m")).unwrap();
    let b = evaluate(&m, &s, &[5], &cont).unwrap();
    assert_ne!(a.predictions[0].prob, b.predictions[0].prob);
}

#[test]
fn batch_permutation_is_irrelevant_without_propagation() {
    let s = stack(10, 7);
    let fwd: Vec<usize> = (0..10).collect();
    let rev: Vec<usize> = vec![4, 3, 2, 1, 0, 9, 8, 7, 6, 5];
    let mut a = model(Architecture::Unet, false);
    let mut b = a.clone();
    train(&mut a, &[TrainStack { stack: &s, train: &fwd }], &quick(1), &mut ()).unwrap();
    train(&mut b, &[TrainStack { stack: &s, train: &rev }], &quick(1), &mut ()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn propagating_models_reject_descending_slices() {
    let s = stack(10, 7);
    let rev: Vec<usize> = (0..10).rev().collect();
    let mut m = model(Architecture::Numsnet, false);
    let err = train(&mut m, &[TrainStack { stack: &s, train: &rev }], &quick(1), &mut ()).unwrap_err();
    assert!(matches!(err, Error::State(_)));
}

#[test]
fn attached_state_trains_and_differs_from_detached() {
    let s = stack(10, 8);
    let idx: Vec<usize> = (0..10).collect();
    let mut a = model(Architecture::Numsnet, false);
    let mut b = a.clone();
    let detached = train(&mut a, &[TrainStack { stack: &s, train: &idx }], &quick(1), &mut ()).unwrap();
    let cfg = TrainConfig { detach_state: false, ..quick(1) };
    let attached = train(&mut b, &[TrainStack { stack: &s, train: &idx }], &cfg, &mut ()).unwrap();
    assert!(attached.epochs[0].loss.is_finite());
    // The first batch sees identical parameters, so losses agree before any update diverges.
    assert!((attached.epochs[0].loss - detached.epochs[0].loss).abs() < 0.5);
    assert_ne!(a, b);
}

#[test]
fn unannotated_batches_take_no_step() {
    let mut s = stack(10, 9);
    let empty: Vec<usize> = (2..7).collect();
    for &i in &empty {
        s.labels[i] = None;
    }
    let mut m = model(Architecture::Unet, false);
    let before: Vec<_> = m.params().iter().filter(|p| p.trainable).map(|p| p.value.clone()).collect();
    let out = train(&mut m, &[TrainStack { stack: &s, train: &empty }], &quick(1), &mut ()).unwrap();
    let after: Vec<_> = m.params().iter().filter(|p| p.trainable).map(|p| p.value.clone()).collect();
    assert_eq!(before, after);
    assert_eq!(out.epochs[0].annotated_slices, 0);
}

#[test]
fn deep_supervision_trace_has_four_series() {
    let s = stack(10, 10);
    let idx: Vec<usize> = (0..10).collect();
    let data = [TrainStack { stack: &s, train: &idx }];
    let mut plain = model(Architecture::Numsnet, false);
    assert!(deep_supervision_trace(&mut plain, &data, &quick(2)).is_err());
    let mut m = model(Architecture::Numsnet, true);
    let cfg = TrainConfig { deep_supervision: true, ..quick(2) };
    let trace = deep_supervision_trace(&mut m, &data, &cfg).unwrap();
    assert_eq!(trace.len(), 4);
    assert!(trace.iter().all(|s| s.len() == 2 && s.iter().all(|v| v.is_finite())));
}

#[test]
fn deep_supervision_flag_must_match_model() {
    let s = stack(10, 10);
    let idx: Vec<usize> = (0..10).collect();
    let mut m = model(Architecture::Unetpp, false);
    let cfg = TrainConfig { deep_supervision: true, ..quick(1) };
    assert!(train(&mut m, &[TrainStack { stack: &s, train: &idx }], &cfg, &mut ()).is_err());
}

#[test]
fn training_is_reproducible_with_augmentation() {
    let s = stack(10, 11);
    let idx: Vec<usize> = (0..10).collect();
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
    let mut a = model(Architecture::Numsnet, false);
    let mut b = a.clone();
    let ra = train(&mut a, &[TrainStack { stack: &s, train: &idx }], &cfg, &mut ()).unwrap();
    let rb = train(&mut b, &[TrainStack { stack: &s, train: &idx }], &cfg, &mut ()).unwrap();
    assert_eq!(ra.epochs, rb.epochs);
    assert_eq!(a, b);
}

#[test]
fn scaled_widths_round_and_floor_at_one() {
    assert_eq!(scaled_widths([35, 70, 140, 280, 560], 0.25), [9, 18, 35, 70, 140]);
    assert_eq!(scaled_widths([32, 64, 128, 256, 512], 0.25), [8, 16, 32, 64, 128]);
    assert_eq!(scaled_widths([1, 2, 3, 4, 5], 0.01), [1, 1, 1, 1, 1]);
}

#[test]
fn presets_parse_and_keys_override() {
    let spec = ExperimentSpec::from_toml("preset = \"exp-A\"\nseeds = [1, 2]\n[train]\nepochs = 3\n").unwrap();
    assert_eq!(spec.architectures.len(), 4);
    assert_eq!(spec.seeds, vec![1, 2]);
    assert_eq!(spec.train.epochs, 3);
    assert_eq!(spec.train.batch_size, 5);
    let d = ExperimentSpec::from_toml("preset = \"exp-D\"").unwrap();
    assert!(d.transfer.is_some());
    assert!(ExperimentSpec::from_toml("preset = \"exp-Z\"").is_err());
    assert!(ExperimentSpec::from_toml("seeds = []").is_err());
    let round = ExperimentSpec::from_toml(&spec.to_toml().unwrap()).unwrap();
    assert_eq!(round, spec);
}

#[test]
fn tiny_experiment_writes_both_csvs() {
    let spec = ExperimentSpec {
        name: "tiny".into(),
        architectures: vec![Architecture::Unet, Architecture::Numsnet],
        widths: Some([2, 2, 2, 2, 2]),
        data: DataSpec::Synth(SynthConfig { slices: 20, height: 16, width: 16, ..SynthConfig::default() }),
        strategies: vec![SplitStrategy::MidSeq],
        seeds: vec![0, 1],
        train: quick(1),
        split: crate::data::SplitConfig { train_frac: 0.3, ..Default::default() },
        shuffled_test: true,
        ..ExperimentSpec::default()
    };
    let mut seen = 0;
    let out = run_experiment(&spec, &mut |_| seen += 1).unwrap();
    assert_eq!(seen, 4);
    assert_eq!(out.averaged.len(), 4);
    let mut buf = Vec::new();
    write_results_csv(&out, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("schema,experiment,model,strategy,seed,test_order,class,Pr,Re,IoU,Dice,dice_smoothed,dice_raw,slices\n"));
    // (4 runs × 2 orders + 4 means) × (3 classes + mean row)
    assert_eq!(text.lines().count(), 1 + 12 * 4);
    let mut buf = Vec::new();
    write_loss_csv(&out, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 1 + 4);
    assert!(text.starts_with("schema,experiment,model,strategy,seed,epoch,loss,"));
}

#[test]
fn transfer_experiment_reports_new_classes() {
    let tiny = SynthConfig { slices: 20, height: 16, width: 16, ..SynthConfig::default() };
    let spec = ExperimentSpec {
        widths: Some([2, 2, 2, 2, 2]),
        data: DataSpec::Synth(SynthConfig { classes: 5, ..tiny }),
        train: quick(1),
        split: crate::data::SplitConfig { train_frac: 0.3, ..Default::default() },
        transfer: Some(TransferSpec { source: DataSpec::Synth(tiny), source_epochs: 1, ..TransferSpec::default() }),
        ..ExperimentSpec::default()
    };
    let out = run_experiment(&spec, &mut |_| {}).unwrap();
    let labels: Vec<&str> = out.runs.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["numsnet+transfer", "numsnet+cold"]);
    assert!(out.runs.iter().all(|r| r.reports[0].classes.len() == 5));
}

#[test]
fn averaging_takes_class_means() {
    let mk = |v: f64| EvalReport {
        model: "m".into(),
        test_order: "ordered".into(),
        slices: 2,
        classes: vec![crate::metrics::ClassReport {
            name: "a".into(),
            precision: Some(v),
            recall: None,
            iou: Some(v),
            dice: Some(v),
            dice_raw: Some(v),
            counts: Default::default(),
        }],
    };
    let avg = average_reports(&[mk(10.0), mk(30.0)]).unwrap();
    assert_eq!(avg.classes[0].iou, Some(20.0));
    assert_eq!(avg.classes[0].recall, None);
    assert_eq!(avg.slices, 4);
    assert!(average_reports(&[]).is_err());
}
