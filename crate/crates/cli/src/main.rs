//! `numsnet`: parameter audit, gradient checks, split planning, training,
//! evaluation and mask export for the slice-propagating segmentation models.

mod overlay;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use numsnet::checks::{run_checks, CHECKS, TOLERANCE};
use numsnet::data::{
    load_stack, sample_split, save_stack, synth_stack, write_gray8, write_rgb8, PreparedStack, SplitConfig, SplitPlan,
    SplitStrategy, SplitUniverse, SynthConfig,
};
use numsnet::losses::LossKind;
use numsnet::metrics::write_reports_csv;
use numsnet::model::{
    load_checkpoint, reference_count, save_checkpoint, Architecture, Checkpoint, ModelConfig, ModelGraph,
    REFERENCE_CLASSES,
};
use numsnet::optim::AdamState;
use numsnet::rng::RngStream;
use numsnet::train::{
    average_reports, evaluate, scaled_widths, train_with, write_loss_csv, write_results_csv, EvalOptions,
    ExperimentOutput, ExperimentSpec, Preset, RunRecord, TestOrder, TestState, TrainConfig, TrainStack,
};

#[derive(Parser)]
#[command(name = "numsnet", version, about = "Slice-propagating Unet variants for CT stack segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Count parameters of an architecture.
    Params(ParamsArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic stack to disk.
    Synth(SynthArgs),
    /// Plan a train/validation/test split.
    Split(SplitArgs),
    /// Train a model and write checkpoints, loss and result tables.
    Train(TrainArgs),
    /// Score a checkpoint on a stack.
    Eval(EvalArgs),
    /// Write overlay and raw mask PNGs for every slice.
    Segment(SegmentArgs),
    /// Run a preset or TOML-described experiment.
    Experiment(ExperimentArgs),
}

/// Failed checks exit with 1; errors with 2.
enum Outcome {
    Pass,
    CheckFailed,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Stack directory holding `images/`, `masks/` and `manifest`.
    #[arg(long, conflicts_with = "synth")]
    data: Option<PathBuf>,
    /// Base for relative `--data` paths that do not exist as given.
    #[arg(long, env = "NUMSNET_DATA_ROOT")]
    data_root: Option<PathBuf>,
    /// Generate a synthetic stack with this many slices instead.
    #[arg(long)]
    synth: Option<usize>,
    #[arg(long, default_value_t = 3)]
    synth_classes: usize,
    #[arg(long, default_value_t = 0)]
    synth_seed: u64,
    /// Square working extent; defaults to 256 for stacks and 64 for synthetic data.
    #[arg(long)]
    size: Option<usize>,
}

impl DataArgs {
    fn resolve(&self) -> Option<PathBuf> {
        let dir = self.data.as_ref()?;
        match &self.data_root {
            Some(root) if dir.is_relative() && !dir.exists() => Some(root.join(dir)),
            _ => Some(dir.clone()),
        }
    }

    fn load(&self) -> Result<PreparedStack> {
        if let Some(n) = self.synth {
            let size = self.size.unwrap_or(64);
            let cfg = SynthConfig {
                slices: n,
                classes: self.synth_classes,
                height: size,
                width: size,
                seed: self.synth_seed,
                ..SynthConfig::default()
            };
            let (img, lab) = synth_stack(&cfg)?;
            return Ok(PreparedStack::prepare(&img, &lab, size, size)?);
        }
        let Some(dir) = self.resolve() else { bail!("give a stack with --data DIR or --synth N") };
        let (img, lab) = load_stack(&dir).with_context(|| format!("loading stack {}", dir.display()))?;
        let size = self.size.unwrap_or(256);
        Ok(PreparedStack::prepare(&img, &lab, size, size)?)
    }
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long)]
    model: Architecture,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Five comma-separated depth widths.
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[arg(long)]
    no_bn: bool,
    #[arg(long)]
    deep_supervision: bool,
    /// Compare against the published counts; exit 1 on mismatch.
    #[arg(long)]
    check_table1: bool,
}

fn widths_arg(w: &Option<Vec<usize>>) -> Result<Option<[usize; 5]>> {
    w.as_ref()
        .map(|v| v.as_slice().try_into().map_err(|_| anyhow::anyhow!("--widths needs five values, got {}", v.len())))
        .transpose()
}

fn group(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn cmd_params(a: ParamsArgs) -> Result<Outcome> {
    let mut cfg = ModelConfig::new(a.model, a.classes);
    if let Some(w) = widths_arg(&a.widths)? {
        cfg = cfg.with_widths(w);
    }
    cfg.batch_norm = !a.no_bn;
    cfg.deep_supervision = a.deep_supervision;
    if a.check_table1 {
        ensure!(
            a.classes == REFERENCE_CLASSES && a.widths.is_none() && !a.no_bn && !a.deep_supervision,
            "--check-table1 applies to the default configuration at {REFERENCE_CLASSES} classes"
        );
    }
    let m = ModelGraph::<f32>::build(cfg.clone(), &RngStream::new(0))?;
    let c = m.count_params();
    let widths = cfg.widths.map(|w| w.to_string()).join(",");
    println!("model          {}", a.model);
    println!("classes        {}", a.classes);
    println!("widths         {widths}");
    println!("total          {}", group(c.total));
    println!("trainable      {}", group(c.trainable));
    println!("non-trainable  {}", group(c.non_trainable));
    if a.check_table1 {
        let want = reference_count(a.model);
        if want == c {
            println!("reference      ok");
        } else {
            println!(
                "reference      MISMATCH (expected {} / {} / {})",
                group(want.total),
                group(want.trainable),
                group(want.non_trainable)
            );
            return Ok(Outcome::CheckFailed);
        }
    }
    Ok(Outcome::Pass)
}

#[derive(Args)]
struct GradcheckArgs {
    /// Comma-separated subset of checks; all by default.
    #[arg(long, value_delimiter = ',')]
    ops: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<Outcome> {
    let results = run_checks(&a.ops, a.seed).with_context(|| format!("known checks: {}", CHECKS.join(", ")))?;
    let mut ok = true;
    for r in &results {
        ok &= r.passed();
        println!(
            "{:<18} max_rel_err {:.3e}  checked {:>5}  {}",
            r.name,
            r.report.max_relative_error,
            r.report.checked,
            if r.passed() { "PASS" } else { "FAIL" }
        );
    }
    println!("tolerance {TOLERANCE:e}: {}", if ok { "all passed" } else { "FAILED" });
    Ok(if ok { Outcome::Pass } else { Outcome::CheckFailed })
}

#[derive(Args)]
struct SynthArgs {
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long, default_value_t = 60)]
    slices: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn cmd_synth(a: SynthArgs) -> Result<Outcome> {
    let cfg = SynthConfig { slices: a.slices, classes: a.classes, height: a.size, width: a.size, seed: a.seed, ..Default::default() };
    let (img, lab) = synth_stack(&cfg)?;
    save_stack(&a.out, &img, &lab)?;
    println!("wrote {} slices to {}", img.len(), a.out.display());
    Ok(Outcome::Pass)
}

#[derive(Args)]
struct SplitOpts {
    #[arg(long, default_value = "MidSeq")]
    strategy: SplitStrategy,
    #[arg(long, default_value_t = 0.1)]
    train_frac: f64,
    #[arg(long, default_value_t = 0.01)]
    val_frac: f64,
    /// Minimum annotated share of the training slices.
    #[arg(long, default_value_t = 0.5)]
    min_annotated: f64,
    /// Place the strategy over annotated slices only.
    #[arg(long)]
    annotated_only: bool,
}

impl SplitOpts {
    fn config(&self) -> SplitConfig {
        SplitConfig {
            train_frac: self.train_frac,
            val_frac: self.val_frac,
            min_annotated_frac: self.min_annotated,
            universe: if self.annotated_only { SplitUniverse::AnnotatedOnly } else { SplitUniverse::All },
        }
    }
}

#[derive(Args)]
struct SplitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    split: SplitOpts,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Plan file; printed to stdout when omitted.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

fn cmd_split(a: SplitArgs) -> Result<Outcome> {
    let annotated = match a.data.synth {
        // Synthetic slices are all annotated; no need to render them.
        Some(n) => vec![true; n],
        None => a.data.load()?.annotated(),
    };
    let plan = sample_split(&annotated, a.split.strategy, &a.split.config(), a.seed)?;
    match &a.out {
        Some(path) => {
            fs::write(path, plan.to_text()).with_context(|| format!("writing {}", path.display()))?;
            println!(
                "{}: train {} / validation {} / test {} of {} slices",
                plan.strategy,
                plan.train.len(),
                plan.validation.len(),
                plan.test.len(),
                plan.n
            );
        }
        None => print!("{}", plan.to_text()),
    }
    Ok(Outcome::Pass)
}

fn read_plan(path: &Path, stack: &PreparedStack) -> Result<SplitPlan> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let plan = SplitPlan::from_text(&text)?;
    ensure!(plan.n == stack.len(), "plan covers {} slices, stack has {}", plan.n, stack.len());
    Ok(plan)
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    model: Architecture,
    #[command(flatten)]
    data: DataArgs,
    /// Split plan file; otherwise one split is sampled per repetition.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[command(flatten)]
    split: SplitOpts,
    /// Training configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    loss: Option<LossKind>,
    #[arg(long)]
    deep_supervision: bool,
    #[arg(long)]
    no_augment: bool,
    /// Let gradients flow one slice back through the carried maps.
    #[arg(long)]
    attach_state: bool,
    /// Multiplier on the default widths.
    #[arg(long, default_value_t = 1.0)]
    width_scale: f64,
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    /// Repetitions with seeds `seed, seed + 1, ...`.
    #[arg(long, default_value_t = 1)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Continue from a checkpoint up to the configured epoch count.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Output directory.
    #[arg(short, long)]
    out: PathBuf,
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::from_toml(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(l) = a.loss {
        cfg.loss = l;
    }
    cfg.deep_supervision |= a.deep_supervision;
    cfg.detach_state &= !a.attach_state;
    if a.no_augment {
        cfg.augment = None;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> Result<Outcome> {
    ensure!(a.reps >= 1, "--reps must be at least 1");
    ensure!(a.resume.is_none() || a.reps == 1, "--resume continues a single run");
    let stack = a.data.load()?;
    let base = train_config(&a)?;
    let fixed_plan = a.plan.as_ref().map(|p| read_plan(p, &stack)).transpose()?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let widths = widths_arg(&a.widths)?.unwrap_or_else(|| scaled_widths(a.model.default_widths(), a.width_scale));

    let mut runs = Vec::new();
    for rep in 0..a.reps {
        let seed = a.seed + rep as u64;
        let config = TrainConfig { seed, ..base.clone() };
        let plan = match &fixed_plan {
            Some(p) => p.clone(),
            None => {
                let p = sample_split(&stack.annotated(), a.split.strategy, &a.split.config(), seed)?;
                fs::write(a.out.join(format!("plan-seed{seed}.txt")), p.to_text())?;
                p
            }
        };
        let (mut model, mut opt, first_epoch) = match &a.resume {
            Some(path) => {
                let ckpt = load_checkpoint::<f32>(path)?;
                ensure!(ckpt.model.arch() == a.model, "checkpoint holds {}, not {}", ckpt.model.arch(), a.model);
                let opt = ckpt.optimizer.unwrap_or_else(|| AdamState::new(config.adam));
                (ckpt.model, opt, ckpt.epoch as usize)
            }
            None => {
                let mut cfg = ModelConfig::new(a.model, stack.num_classes()).with_widths(widths);
                cfg.deep_supervision = config.deep_supervision;
                let m = ModelGraph::build(cfg, &RngStream::new(seed).split("init"))?;
                (m, AdamState::new(config.adam), 0)
            }
        };
        let data = [TrainStack { stack: &stack, train: &plan.train }];
        let outcome = train_with(&mut model, &mut opt, &data, &config, first_epoch, &mut ())?;
        let ckpt_path = a.out.join(format!("{}-seed{seed}.ckpt", a.model));
        let epoch = first_epoch.max(config.epochs) as u64;
        let ckpt = Checkpoint { model, optimizer: Some(opt), epoch };
        save_checkpoint(&ckpt_path, &ckpt)?;
        let report = evaluate(&ckpt.model, &stack, &plan.test, &EvalOptions::ordered(a.model.tag()))?.report;
        eprintln!(
            "seed {seed}: {} epochs in {:.1}s, final loss {:.4}, test Dice {:.2} -> {}",
            outcome.epochs.len(),
            outcome.wall_time_s,
            outcome.epochs.last().map_or(f64::NAN, |e| e.loss),
            report.mean_dice().unwrap_or(f64::NAN),
            ckpt_path.display()
        );
        runs.push(RunRecord {
            label: a.model.tag().to_string(),
            arch: a.model,
            strategy: plan.strategy,
            seed,
            config,
            plan,
            epochs: outcome.epochs,
            reports: vec![report],
            wall_time_s: outcome.wall_time_s,
            model: ckpt.model,
        });
    }
    let reports: Vec<_> = runs.iter().map(|r| r.reports[0].clone()).collect();
    let averaged = vec![(a.model.tag().to_string(), runs[0].strategy, average_reports(&reports)?)];
    let output = ExperimentOutput { name: "train".into(), runs, averaged };
    write_results_csv(&output, fs::File::create(a.out.join("results.csv"))?)?;
    write_loss_csv(&output, fs::File::create(a.out.join("loss.csv"))?)?;
    Ok(Outcome::Pass)
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderArg {
    Ordered,
    Shuffled,
    Both,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Score the plan's test slices; all slices otherwise.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "ordered")]
    test_order: OrderArg,
    #[arg(long, default_value_t = 0)]
    shuffle_seed: u64,
    /// Score the ground truth in place of predictions (harness check).
    #[arg(long)]
    oracle: bool,
    /// CSV destination; stdout when omitted.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

fn eval_indices(plan: &Option<PathBuf>, stack: &PreparedStack) -> Result<Vec<usize>> {
    Ok(match plan {
        Some(p) => read_plan(p, stack)?.test,
        None => (0..stack.len()).collect(),
    })
}

fn cmd_eval(a: EvalArgs) -> Result<Outcome> {
    let ckpt = load_checkpoint::<f32>(&a.ckpt)?;
    let stack = a.data.load()?;
    let indices = eval_indices(&a.plan, &stack)?;
    let orders = match a.test_order {
        OrderArg::Ordered => vec![TestOrder::Ordered],
        OrderArg::Shuffled => vec![TestOrder::Shuffled { seed: a.shuffle_seed }],
        OrderArg::Both => vec![TestOrder::Ordered, TestOrder::Shuffled { seed: a.shuffle_seed }],
    };
    let label = if a.oracle { "oracle".to_string() } else { ckpt.model.arch().tag().to_string() };
    let mut reports = Vec::new();
    for order in orders {
        let opts = EvalOptions { order, state: TestState::Fresh, oracle: a.oracle, model_label: label.clone() };
        reports.push(evaluate(&ckpt.model, &stack, &indices, &opts)?.report);
    }
    match &a.out {
        Some(p) => write_reports_csv(&reports, fs::File::create(p).with_context(|| format!("creating {}", p.display()))?)?,
        None => write_reports_csv(&reports, std::io::stdout().lock())?,
    }
    Ok(Outcome::Pass)
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Segment the plan's test slices; all slices otherwise.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Group seven classes into three display colors.
    #[arg(long)]
    grouped_colors: bool,
    #[arg(short, long)]
    out: PathBuf,
}

fn cmd_segment(a: SegmentArgs) -> Result<Outcome> {
    let ckpt = load_checkpoint::<f32>(&a.ckpt)?;
    let stack = a.data.load()?;
    let indices = eval_indices(&a.plan, &stack)?;
    let label = ckpt.model.arch().tag().to_string();
    let eval = evaluate(&ckpt.model, &stack, &indices, &EvalOptions::ordered(label))?;
    let (overlay_dir, planes_dir) = (a.out.join("overlay"), a.out.join("planes"));
    fs::create_dir_all(&overlay_dir)?;
    fs::create_dir_all(&planes_dir)?;
    let colors = overlay::color_map(stack.num_classes(), a.grouped_colors);
    let (h, w) = (stack.height, stack.width);
    for p in &eval.predictions {
        let rgb = overlay::overlay(stack.images[p.index].data(), &p.planes, &colors);
        write_rgb8(&overlay_dir.join(format!("{:04}.png", p.index)), w, h, &rgb)?;
        for (k, plane) in p.planes.chunks(h * w).enumerate() {
            let bytes: Vec<u8> = plane.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
            write_gray8(&planes_dir.join(format!("{:04}-c{}.png", p.index, k + 1)), w, h, &bytes)?;
        }
    }
    let mut legend = fs::File::create(a.out.join("legend.txt"))?;
    for (name, c) in stack.class_names.iter().zip(&colors) {
        writeln!(legend, "{name} #{:02x}{:02x}{:02x}", c[0], c[1], c[2])?;
    }
    println!("wrote {} slices to {}", eval.predictions.len(), a.out.display());
    Ok(Outcome::Pass)
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment description (TOML).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    spec: Option<PathBuf>,
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Save a checkpoint per run.
    #[arg(long)]
    save_checkpoints: bool,
    #[arg(short, long)]
    out: PathBuf,
}

fn cmd_experiment(a: ExperimentArgs) -> Result<Outcome> {
    let mut spec = match (&a.spec, a.preset) {
        (Some(p), _) => ExperimentSpec::from_toml(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        (None, Some(preset)) => ExperimentSpec::from_preset(preset),
        (None, None) => unreachable!("clap requires one of --spec and --preset"),
    };
    if let Some(e) = a.epochs {
        spec.train.epochs = e;
    }
    if let Some(s) = &a.seeds {
        spec.seeds = s.clone();
    }
    spec.validate()?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("spec.toml"), spec.to_toml()?)?;
    let out_dir = a.out.clone();
    let mut saved: Result<()> = Ok(());
    let output = numsnet::train::run_experiment(&spec, &mut |r: &RunRecord| {
        eprintln!(
            "{} {} seed {}: {:.1}s, test Dice {:.2}",
            r.label,
            r.strategy,
            r.seed,
            r.wall_time_s,
            r.reports[0].mean_dice().unwrap_or(f64::NAN)
        );
        if a.save_checkpoints && saved.is_ok() {
            let path = out_dir.join(format!("{}-{}-seed{}.ckpt", r.label.replace('+', "-"), r.strategy, r.seed));
            let ckpt = Checkpoint { model: r.model.clone(), optimizer: None, epoch: r.epochs.len() as u64 };
            saved = save_checkpoint(&path, &ckpt).map_err(Into::into);
        }
    })?;
    saved?;
    write_results_csv(&output, fs::File::create(a.out.join("results.csv"))?)?;
    write_loss_csv(&output, fs::File::create(a.out.join("loss.csv"))?)?;
    for (label, strategy, r) in &output.averaged {
        println!("{label:<18} {strategy:<14} {:<9} Dice {:.2}", r.test_order, r.mean_dice().unwrap_or(f64::NAN));
    }
    Ok(Outcome::Pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Params(a) => cmd_params(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Split(a) => cmd_split(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Segment(a) => cmd_segment(a),
        Command::Experiment(a) => cmd_experiment(a),
    };
    match result {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
