//! Acceptance criteria 1 to 8. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use cellseg::checkpoint::Checkpoint;
use cellseg::data::{gen_synthetic, Dataset, SyntheticConfig};
use cellseg::encoders::PromptSet;
use cellseg::selfcheck::{self, CheckOutcome, Suite, GRAD_TOLERANCE, ORACLE_TOLERANCE};
use cellseg::train::{dataset_loss, train};
use cellseg::{MetricsReport, Model, TrainConfig};

const BIN: &str = env!("CARGO_BIN_EXE_cellseg");

const GRAD_SEEDS: usize = 20;
const GRAD_BUDGET: Duration = Duration::from_secs(5 * 60);
const ORACLE_INSTANCES: usize = 100;
const OVERFIT_STEPS: usize = 200;
const OVERFIT_LOSS_RATIO: f64 = 0.10;
const OVERFIT_FG_MIOU: f64 = 0.8;
const OVERFIT_BUDGET: Duration = Duration::from_secs(10 * 60);
const ABLATION_SEEDS: u64 = 10;
const ABLATION_WINS: usize = 7;
const EXIT_FORMAT: i32 = 2;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn summarize(outcomes: &[&CheckOutcome]) -> Verdict {
    let failed: Vec<String> = outcomes.iter().filter(|o| !o.passed()).map(|o| o.to_string()).collect();
    let worst = outcomes.iter().map(|o| o.worst).fold(0.0, f64::max);
    if failed.is_empty() {
        Verdict::new(true, format!("{} checks, worst error {worst:.2e}", outcomes.len()))
    } else {
        Verdict::new(false, failed.join("; "))
    }
}

fn criterion_gradients() -> Verdict {
    let start = Instant::now();
    let outcomes = selfcheck::run(Suite::Grads, GRAD_SEEDS, 0, &mut |_| {});
    let elapsed = start.elapsed();
    let refs: Vec<&CheckOutcome> = outcomes.iter().collect();
    let mut v = summarize(&refs);
    let covered = outcomes.iter().all(|o| o.instances >= GRAD_SEEDS && o.tolerance == GRAD_TOLERANCE);
    v.pass &= covered && elapsed < GRAD_BUDGET;
    v.detail = format!("{}, {:.1}s (budget {}s), {GRAD_SEEDS} seeds each", v.detail, elapsed.as_secs_f64(), GRAD_BUDGET.as_secs());
    v
}

fn oracle_outcomes() -> Vec<CheckOutcome> {
    selfcheck::run(Suite::Oracles, 0, ORACLE_INSTANCES, &mut |_| {})
}

fn pick<'a>(all: &'a [CheckOutcome], names: &[&str]) -> Vec<&'a CheckOutcome> {
    all.iter().filter(|o| names.contains(&o.name)).collect()
}

fn criterion_oracles(all: &[CheckOutcome]) -> Verdict {
    let names = ["pairwise_sq_dist", "knn_select", "dft_idft", "attention", "bce", "metrics"];
    let picked = pick(all, &names);
    let mut v = summarize(&picked);
    v.pass &= picked.len() == names.len()
        && picked.iter().all(|o| o.instances >= ORACLE_INSTANCES && o.tolerance <= ORACLE_TOLERANCE);
    v
}

fn criterion_named(all: &[CheckOutcome], name: &str) -> Verdict {
    let picked = pick(all, &[name]);
    let mut v = summarize(&picked);
    v.pass &= picked.len() == 1;
    v
}

fn cli(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(BIN).args(args).output().expect("run cellseg binary");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn criterion_overfit(dir: &Path) -> Verdict {
    let data = dir.join("data");
    let data_s = data.to_str().unwrap();
    let (code, _, err) = cli(&["gen-synthetic", "--out", data_s, "--patches", "32", "--size", "32", "--classes", "3"]);
    if code != 0 {
        return Verdict::new(false, format!("gen-synthetic exited {code}: {err}"));
    }
    let steps = OVERFIT_STEPS.to_string();
    let mut logs = Vec::new();
    let mut elapsed = Vec::new();
    for run in 0..2 {
        let ckpt = dir.join(format!("overfit{run}.ckpt"));
        let log = dir.join(format!("overfit{run}.tsv"));
        let start = Instant::now();
        let (code, _, err) = cli(&[
            "train",
            "--data",
            data_s,
            "--out",
            ckpt.to_str().unwrap(),
            "--steps",
            &steps,
            "--log",
            log.to_str().unwrap(),
        ]);
        elapsed.push(start.elapsed());
        if code != 0 {
            return Verdict::new(false, format!("train exited {code}: {err}"));
        }
        logs.push(std::fs::read_to_string(&log).expect("loss log"));
    }
    let report_path = dir.join("overfit.json");
    let (code, _, err) = cli(&[
        "eval",
        "--ckpt",
        dir.join("overfit0.ckpt").to_str().unwrap(),
        "--data",
        data_s,
        "--report",
        report_path.to_str().unwrap(),
    ]);
    if code != 0 {
        return Verdict::new(false, format!("eval exited {code}: {err}"));
    }
    let report = MetricsReport::from_json(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    let losses: Vec<f64> = logs[0]
        .lines()
        .map(|l| l.split('\t').nth(2).unwrap().parse().unwrap())
        .collect();
    let (initial, last) = (losses[0], *losses.last().unwrap());
    let ratio = last / initial;
    let identical = logs[0] == logs[1];
    let slowest = elapsed.iter().max().unwrap();
    let checks = [
        (losses.len() == OVERFIT_STEPS, format!("{} steps logged", losses.len())),
        (
            ratio <= OVERFIT_LOSS_RATIO,
            format!("loss {initial:.4} -> {last:.4} ({:.1}% of initial, need <= {:.0}%)", ratio * 100.0, OVERFIT_LOSS_RATIO * 100.0),
        ),
        (
            report.mean_foreground_iou >= OVERFIT_FG_MIOU,
            format!("fg mIoU {:.4} (need >= {OVERFIT_FG_MIOU})", report.mean_foreground_iou),
        ),
        (*slowest < OVERFIT_BUDGET, format!("{:.1}s per run", slowest.as_secs_f64())),
        (identical, format!("repeat run {}", if identical { "identical" } else { "differs" })),
    ];
    let pass = checks.iter().all(|c| c.0);
    let detail = checks
        .iter()
        .map(|(ok, msg)| if *ok { msg.clone() } else { format!("[x] {msg}") })
        .collect::<Vec<_>>()
        .join(", ");
    Verdict::new(pass, detail)
}

fn criterion_ablation(dir: &Path) -> Verdict {
    let data_dir = dir.join("ablation");
    gen_synthetic(&data_dir, &SyntheticConfig::new(32, 32, 3, 0)).expect("synthetic data");
    let data = Dataset::load(&data_dir).expect("load synthetic data");
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..ABLATION_SEEDS {
        let mut cfg = TrainConfig {
            seed,
            max_steps: Some(OVERFIT_STEPS),
            ..TrainConfig::default()
        };
        let full = train(&cfg, &data, &mut |_| {}).expect("train full model");
        cfg.ablation.disable_ppd = true;
        let ablated = train(&cfg, &data, &mut |_| {}).expect("train without decoder");
        let lf = dataset_loss(&full.model, &data, cfg.batch_size).unwrap();
        let la = dataset_loss(&ablated.model, &data, cfg.batch_size).unwrap();
        if lf <= la {
            wins += 1;
        }
        pairs.push(format!("{lf:.4}/{la:.4}"));
    }
    Verdict::new(
        wins >= ABLATION_WINS,
        format!(
            "full <= no-ppd in {wins}/{ABLATION_SEEDS} seeds (need {ABLATION_WINS}); train-set loss full/no-ppd: {}",
            pairs.join(" ")
        ),
    )
}

fn criterion_defaults() -> Verdict {
    let c = TrainConfig::default();
    let parsed = TrainConfig::parse("").map(|p| p == c).unwrap_or(false);
    let checks = [
        (c.topo.k == 9, format!("k={}", c.topo.k)),
        (c.text.max_tokens == 77, format!("max_tokens={}", c.text.max_tokens)),
        (c.learn_rate == 5e-5, format!("lr={:e}", c.learn_rate)),
        (c.decay_factor == 0.1, format!("decay={}", c.decay_factor)),
        (c.epochs == 40, format!("epochs={}", c.epochs)),
        (parsed, "empty config file gives the defaults".to_string()),
    ];
    Verdict::new(
        checks.iter().all(|c| c.0),
        checks.iter().map(|c| c.1.clone()).collect::<Vec<_>>().join(", "),
    )
}

fn criterion_persistence(dir: &Path) -> Verdict {
    let data_dir = dir.join("persist");
    gen_synthetic(&data_dir, &SyntheticConfig::new(2, 32, 2, 3)).expect("synthetic data");
    let data = Dataset::load(&data_dir).unwrap();
    let cfg = TrainConfig::default().model_config(data.class_names().to_vec());
    let model = Model::<f32>::new(cfg, &PromptSet::builtin(), 11).unwrap();
    let first = dir.join("a.ckpt");
    let second = dir.join("b.ckpt");
    Checkpoint::from_model(&model).save(&first).unwrap();
    Checkpoint::load(&first).unwrap().to_model().unwrap();
    Checkpoint::load(&first).unwrap().save(&second).unwrap();
    let bytes = std::fs::read(&first).unwrap();
    let bitwise = bytes == std::fs::read(&second).unwrap();

    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    let mut bad_version = bytes.clone();
    bad_version[4] = 99;
    let mut trailing = bytes.clone();
    trailing.extend_from_slice(&[0, 1, 2]);
    let corruptions: [(&str, Vec<u8>); 5] = [
        ("magic", bad_magic),
        ("version", bad_version),
        ("truncated", bytes[..bytes.len() / 2].to_vec()),
        ("header-only", bytes[..10].to_vec()),
        ("trailing", trailing),
    ];
    let image = data_dir.join("images/0000.png");
    let mut wrong = Vec::new();
    for (name, body) in &corruptions {
        let path = dir.join(format!("bad-{name}.ckpt"));
        std::fs::write(&path, body).unwrap();
        let p = path.to_str().unwrap();
        let out = dir.join("bad.png");
        for args in [
            vec!["eval", "--ckpt", p, "--data", data_dir.to_str().unwrap(), "--report", dir.join("r.txt").to_str().unwrap()],
            vec!["infer", "--ckpt", p, "--image", image.to_str().unwrap(), "--out", out.to_str().unwrap()],
        ] {
            let (code, _, err) = cli(&args);
            if code != EXIT_FORMAT || err.trim().lines().count() != 1 {
                wrong.push(format!("{} on {name}: exit {code}", args[0]));
            }
        }
    }
    let pass = bitwise && wrong.is_empty();
    let detail = format!(
        "save-load-save {} ({} bytes); {} corrupted files rejected with exit {EXIT_FORMAT}{}",
        if bitwise { "bitwise identical" } else { "DIFFERS" },
        bytes.len(),
        corruptions.len(),
        if wrong.is_empty() { String::new() } else { format!("; wrong: {}", wrong.join(", ")) }
    );
    Verdict::new(pass, detail)
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temp dir");
    let dir = tmp.path();
    let report = |id: u32, title: &str, v: Verdict| {
        println!("criterion {id} {} {title}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        v.pass
    };
    let mut results = Vec::new();
    results.push(report(1, "gradient suite", criterion_gradients()));
    let oracles = oracle_outcomes();
    results.push(report(2, "oracle suite", criterion_oracles(&oracles)));
    results.push(report(3, "frequency invariants", criterion_named(&oracles, "frequency_invariants")));
    results.push(report(4, "residual contracts", criterion_named(&oracles, "residual_contracts")));
    results.push(report(5, "end-to-end overfit", criterion_overfit(dir)));
    results.push(report(6, "decoder ablation", criterion_ablation(dir)));
    results.push(report(7, "default constants", criterion_defaults()));
    results.push(report(8, "persistence", criterion_persistence(dir)));
    let failed = results.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
