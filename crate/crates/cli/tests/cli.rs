use std::path::Path;
use std::process::{Command, Output};

use numsnet::data::{read_gray, synth_stack, PreparedStack, SynthConfig};
use numsnet::model::load_checkpoint;
use numsnet::train::{evaluate, EvalOptions};

fn numsnet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_numsnet")).args(args).current_dir(cwd).env_remove("NUMSNET_DATA_ROOT").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "status {:?}\nstdout:\n{}\nstderr:\n{}", o.status, stdout(&o), String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

const TINY: [&str; 4] = ["--synth", "20", "--size", "32"];

fn tiny(extra: &[&str]) -> Vec<String> {
    TINY.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn run_strings(args: Vec<String>, cwd: &Path) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    numsnet(&refs, cwd)
}

fn train_tiny(dir: &Path, out: &str, extra: &[&str]) {
    let mut args = vec!["train".to_string(), "--model".into(), "numsnet".into()];
    args.extend(tiny(&["--widths", "2,2,2,2,2", "--train-frac", "0.3", "-o", out]));
    args.extend(extra.iter().map(|s| s.to_string()));
    ok(run_strings(args, dir));
}

#[test]
fn params_check_passes_for_every_architecture() {
    let dir = tempfile::tempdir().unwrap();
    for m in ["unet", "wunet", "unetpp", "numsnet", "numsall"] {
        let out = ok(numsnet(&["params", "--model", m, "--classes", "3", "--check-table1"], dir.path()));
        assert!(out.contains("reference      ok"), "{out}");
    }
    let out = ok(numsnet(&["params", "--model", "numsnet", "--check-table1"], dir.path()));
    assert!(out.contains("11,713,943") && out.contains("11,711,843") && out.contains("2,100"), "{out}");
}

#[test]
fn toy_count_matches_hand_enumeration() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(numsnet(&["params", "--model", "unet", "--widths", "1,1,1,1,1", "--no-bn"], dir.path()));
    // Encoder 5 × 2 × (9 + 1), decoder 4 × (5 + 19 + 10), head 3 × (1 + 1).
    let expect = 5 * 2 * 10 + 4 * (5 + 19 + 10) + 3 * 2;
    assert!(out.contains(&format!("total          {expect}\n")), "{out}");
    let out = ok(numsnet(&["params", "--model", "unet", "--widths", "1,1,1,1,1", "--no-bn", "--classes", "1"], dir.path()));
    assert!(out.contains(&format!("total          {}\n", expect - 2 * 2)), "{out}");
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(numsnet(&["params", "--model", "bogus"], dir.path()).status.code(), Some(2));
    assert_eq!(numsnet(&["params", "--model", "unet", "--check-table1", "--classes", "4"], dir.path()).status.code(), Some(2));
    assert_eq!(numsnet(&["split", "--data", "missing-stack"], dir.path()).status.code(), Some(2));
    assert_eq!(numsnet(&["gradcheck", "--ops", "softmax"], dir.path()).status.code(), Some(2));
}

#[test]
fn gradcheck_can_be_restricted() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(numsnet(&["gradcheck", "--ops", "conv2d"], dir.path()));
    assert_eq!(out.lines().filter(|l| l.contains("PASS")).count(), 1);
    assert!(out.starts_with("conv2d"));
}

#[test]
fn split_examples() {
    let dir = tempfile::tempdir().unwrap();
    let plan = ok(numsnet(&["split", "--synth", "829", "--strategy", "RandomOrdered", "--seed", "3"], dir.path()));
    let train = plan.lines().find(|l| l.starts_with("train ")).unwrap();
    assert_eq!(train.split_whitespace().count() - 1, 82);
    let plan = ok(numsnet(&["split", "--synth", "10", "--strategy", "MidSeq"], dir.path()));
    assert!(plan.lines().any(|l| l == "train 5"), "{plan}");
    ok(numsnet(&["split", "--synth", "10", "--strategy", "MidSeq", "-o", "p.txt"], dir.path()));
    assert_eq!(std::fs::read_to_string(dir.path().join("p.txt")).unwrap(), plan);
}

#[test]
fn data_root_resolves_relative_stacks() {
    let dir = tempfile::tempdir().unwrap();
    ok(numsnet(&["synth", "-o", "stacks/a", "--slices", "12", "--size", "16"], dir.path()));
    let direct = ok(numsnet(&["split", "--data", "stacks/a", "--size", "16"], dir.path()));
    let out = Command::new(env!("CARGO_BIN_EXE_numsnet"))
        .args(["split", "--data", "a", "--size", "16"])
        .current_dir(dir.path())
        .env("NUMSNET_DATA_ROOT", dir.path().join("stacks"))
        .output()
        .unwrap();
    assert_eq!(ok(out), direct);
}

#[test]
fn repetitions_write_records_and_tables() {
    let dir = tempfile::tempdir().unwrap();
    train_tiny(dir.path(), "run", &["--epochs", "2", "--reps", "2", "--seed", "7"]);
    let run = dir.path().join("run");
    assert!(run.join("numsnet-seed7.ckpt").exists() && run.join("numsnet-seed8.ckpt").exists());
    let loss = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().next().unwrap(), "schema,experiment,model,strategy,seed,epoch,loss,depth1,depth2,depth3,depth4,steps,max_grad_norm");
    assert_eq!(loss.lines().count(), 1 + 2 * 2);
    let results = std::fs::read_to_string(run.join("results.csv")).unwrap();
    assert_eq!(results.lines().next().unwrap(), "schema,experiment,model,strategy,seed,test_order,class,Pr,Re,IoU,Dice,dice_smoothed,dice_raw,slices");
    let seeds: Vec<&str> = results
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect::<Vec<_>>())
        .filter(|f| f[6] == "mean")
        .map(|f| f[4])
        .collect();
    assert_eq!(seeds, ["7", "8", "mean"]);
}

#[test]
fn training_is_deterministic_and_resume_matches_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    train_tiny(dir.path(), "a", &["--epochs", "2"]);
    train_tiny(dir.path(), "b", &["--epochs", "2"]);
    train_tiny(dir.path(), "c", &["--epochs", "1"]);
    train_tiny(dir.path(), "d", &["--epochs", "2", "--resume", "c/numsnet-seed0.ckpt"]);
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("a/numsnet-seed0.ckpt"), read("b/numsnet-seed0.ckpt"));
    assert_eq!(read("a/numsnet-seed0.ckpt"), read("d/numsnet-seed0.ckpt"));
    let eval = |ckpt: &str| ok(run_strings([vec!["eval".into(), "--ckpt".into(), ckpt.into()], tiny(&[])].concat(), dir.path()));
    assert_eq!(eval("a/numsnet-seed0.ckpt"), eval("d/numsnet-seed0.ckpt"));
}

#[test]
fn eval_labels_orders_and_oracle_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    train_tiny(dir.path(), "run", &["--epochs", "1"]);
    let both = ok(run_strings(
        [vec!["eval".into(), "--ckpt".into(), "run/numsnet-seed0.ckpt".into()], tiny(&["--plan", "run/plan-seed0.txt", "--test-order", "both"])].concat(),
        dir.path(),
    ));
    let header = "schema,model,test_order,class,Pr,Re,IoU,Dice,dice_smoothed,dice_raw,tp,fp,fn,slices,aggregation";
    assert_eq!(both.lines().next().unwrap(), header);
    assert_eq!(both.lines().filter(|l| l.contains(",ordered,")).count(), 4);
    assert_eq!(both.lines().filter(|l| l.contains(",shuffled,")).count(), 4);
    let oracle = ok(run_strings(
        [vec!["eval".into(), "--ckpt".into(), "run/numsnet-seed0.ckpt".into(), "--oracle".into()], tiny(&[])].concat(),
        dir.path(),
    ));
    for line in oracle.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        for v in &f[4..10] {
            assert_eq!(*v, "100.0000", "{line}");
        }
    }
}

#[test]
fn segment_writes_overlays_and_exact_planes() {
    let dir = tempfile::tempdir().unwrap();
    train_tiny(dir.path(), "run", &["--epochs", "1"]);
    ok(run_strings([vec!["segment".into(), "--ckpt".into(), "run/numsnet-seed0.ckpt".into(), "-o".into(), "seg".into()], tiny(&[])].concat(), dir.path()));

    let (img, lab) = synth_stack(&SynthConfig { slices: 20, height: 32, width: 32, ..SynthConfig::default() }).unwrap();
    let stack = PreparedStack::prepare(&img, &lab, 32, 32).unwrap();
    let ckpt = load_checkpoint::<f32>(dir.path().join("run/numsnet-seed0.ckpt")).unwrap();
    let idx: Vec<usize> = (0..20).collect();
    let eval = evaluate(&ckpt.model, &stack, &idx, &EvalOptions::ordered("m")).unwrap();
    for p in &eval.predictions {
        let overlay = read_gray(&dir.path().join(format!("seg/overlay/{:04}.png", p.index)));
        assert!(overlay.is_err(), "overlays are RGB");
        for k in 0..3 {
            let plane = read_gray(&dir.path().join(format!("seg/planes/{:04}-c{}.png", p.index, k + 1))).unwrap();
            let back: Vec<u8> = plane.pixels.iter().map(|&v| (v / 255) as u8).collect();
            assert_eq!(back, p.planes[k * 1024..(k + 1) * 1024]);
        }
    }
    let legend = std::fs::read_to_string(dir.path().join("seg/legend.txt")).unwrap();
    assert_eq!(legend, "organ #0000ff\nlesion-1 #ff0000\nlesion-2 #00ff00\n");
}

#[test]
fn experiment_spec_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("exp.toml"),
        "name = \"tiny\"\narchitectures = [\"unet\", \"numsnet\"]\nwidths = [2, 2, 2, 2, 2]\nseeds = [0]\n\
         [data.synth]\nslices = 20\nheight = 16\nwidth = 16\n[split]\ntrain_frac = 0.3\n[train]\nepochs = 1\n",
    )
    .unwrap();
    let out = ok(numsnet(&["experiment", "--spec", "exp.toml", "-o", "out"], dir.path()));
    assert_eq!(out.lines().count(), 2, "{out}");
    let results = std::fs::read_to_string(dir.path().join("out/results.csv")).unwrap();
    assert!(results.lines().skip(1).all(|l| l.starts_with("results.v1,tiny,")));
    assert!(dir.path().join("out/spec.toml").exists());
}
