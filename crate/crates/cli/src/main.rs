use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cellseg::checkpoint::Checkpoint;
use cellseg::data::{self, Dataset, SyntheticConfig};
use cellseg::head::predict;
use cellseg::model::FeatureStage;
use cellseg::ppd::DecoderSwitches;
use cellseg::selfcheck::{self, Suite};
use cellseg::train::{self, TrainConfig};
use cellseg::{Error, Result};
use clap::{Parser, Subcommand};

/// Exit code when any self-check fails.
const EXIT_CHECK_FAILED: u8 = 4;
const EXIT_USAGE: u8 = 1;

/// Overlay colours: background, then classes 1 to 5.
const PALETTE: [[u8; 3]; 6] = [
    [0, 0, 0],
    [255, 0, 0],
    [0, 255, 255],
    [0, 255, 0],
    [0, 0, 255],
    [255, 255, 0],
];

#[derive(Parser, Debug)]
#[command(name = "cellseg", version, about = "Text-prompted nucleus segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic ellipse dataset with a manifest.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        patches: usize,
        #[arg(long)]
        size: usize,
        /// Number of foreground classes (1 to 5).
        #[arg(long)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Pixel-share ratio between consecutive foreground classes.
        #[arg(long, default_value_t = 0.7)]
        decay: f64,
    },
    /// Train a model and write a checkpoint plus a loss log.
    Train {
        /// TOML training config; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        disable_mgfe: bool,
        #[arg(long)]
        disable_ppd: bool,
        /// Decoder stage to drop: qh, qv, qt, qT, or blend for the final merge.
        #[arg(long = "disable-stage")]
        disable_stage: Vec<String>,
        #[arg(long)]
        disable_hf: bool,
        #[arg(long)]
        disable_topo: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Stop after this many optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Loss log path; defaults to the checkpoint path with `.loss.tsv` appended.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Predict a label map for one image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Grayscale PNG whose pixel values are class indices.
        #[arg(long)]
        out: PathBuf,
        /// Optional colour rendering of the prediction.
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report path: JSON when it ends in `.json`, text table otherwise.
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 4)]
        batch: usize,
    },
    /// Run the finite-difference and brute-force oracle suites.
    Check {
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = selfcheck::DEFAULT_GRAD_SEEDS)]
        seeds: usize,
        #[arg(long, default_value_t = selfcheck::DEFAULT_ORACLE_INSTANCES)]
        instances: usize,
    },
    /// Write one intermediate feature map as JSON.
    DumpFeatures {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// hf, conv, topo, blend, a1, a2, a3 or a4.
        #[arg(long)]
        stage: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::GenSynthetic {
            out,
            patches,
            size,
            classes,
            seed,
            decay,
        } => {
            let cfg = SyntheticConfig {
                decay,
                ..SyntheticConfig::new(patches, size, classes, seed)
            };
            let m = data::gen_synthetic(&out, &cfg)?;
            println!("wrote {} patches of {size}x{size} to {}", m.samples.len(), out.display());
        }
        Command::Train {
            config,
            data,
            out,
            disable_mgfe,
            disable_ppd,
            disable_stage,
            disable_hf,
            disable_topo,
            seed,
            steps,
            log,
        } => {
            let mut cfg = match &config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if steps.is_some() {
                cfg.max_steps = steps;
            }
            let a = &mut cfg.ablation;
            a.disable_mgfe |= disable_mgfe;
            a.disable_ppd |= disable_ppd;
            a.disable_hf |= disable_hf;
            a.disable_topo |= disable_topo;
            if a.disable_ppd && !disable_stage.is_empty() {
                return Err(Error::Config(
                    "--disable-stage has no effect together with --disable-ppd".into(),
                ));
            }
            let extra = DecoderSwitches::parse(&disable_stage).map_err(|e| Error::Config(e.to_string()))?;
            for st in extra.disabled_stages {
                if !a.decoder.disabled_stages.contains(&st) {
                    a.decoder.disabled_stages.push(st);
                }
            }
            a.decoder.disabled_stages.sort();
            a.decoder.skip_blend_merge |= extra.skip_blend_merge;
            cfg.validate()?;
            let dataset = Dataset::load(&data)?;
            let outcome = train::train(&cfg, &dataset, &mut |r| println!("{r}"))?;
            Checkpoint::from_model(&outcome.model).save(&out)?;
            let log_path = log.unwrap_or_else(|| with_suffix(&out, ".loss.tsv"));
            fs::write(&log_path, outcome.log_text()).map_err(|e| Error::Io {
                path: log_path.clone(),
                source: e,
            })?;
            let (first, last) = (outcome.log.first().unwrap(), outcome.log.last().unwrap());
            eprintln!(
                "trained {} steps, loss {} -> {}, {} parameters; checkpoint {}",
                outcome.log.len(),
                first.loss,
                last.loss,
                outcome.model.parameter_count(),
                out.display()
            );
        }
        Command::Infer {
            ckpt,
            image,
            out,
            overlay,
        } => {
            let model = Checkpoint::load(&ckpt)?.to_model()?;
            let img = data::load_image::<f32>(&image)?;
            let labels = predict(&model.predict_probabilities(&img)?)?;
            let (h, w) = labels.extents();
            data::save_label_png(&out, labels.labels(), h, w)?;
            if let Some(path) = overlay {
                let rgb: Vec<u8> = labels
                    .labels()
                    .iter()
                    .flat_map(|&l| PALETTE[(l as usize).min(PALETTE.len() - 1)])
                    .collect();
                data::save_rgb_png(&path, &rgb, h, w)?;
            }
        }
        Command::Eval {
            ckpt,
            data,
            report,
            batch,
        } => {
            let model = Checkpoint::load(&ckpt)?.to_model()?;
            let dataset = Dataset::load(&data)?;
            let rep = train::evaluate(&model, &dataset, batch)?;
            let table = rep.render();
            print!("{table}");
            let body = if report.extension().is_some_and(|e| e == "json") {
                rep.to_json()
            } else {
                table
            };
            fs::write(&report, body).map_err(|e| Error::Io {
                path: report.clone(),
                source: e,
            })?;
        }
        Command::Check {
            suite,
            seeds,
            instances,
        } => {
            let suite: Suite = suite.parse()?;
            let results = selfcheck::run(suite, seeds, instances, &mut |o| println!("{o}"));
            let failed = results.iter().filter(|o| !o.passed()).count();
            println!("{} checks, {failed} failed", results.len());
            if failed > 0 {
                return Ok(ExitCode::from(EXIT_CHECK_FAILED));
            }
        }
        Command::DumpFeatures {
            ckpt,
            image,
            stage,
            out,
        } => {
            let stage: FeatureStage = stage.parse()?;
            let model = Checkpoint::load(&ckpt)?.to_model()?;
            let img = data::load_image::<f32>(&image)?;
            let t = model.feature_map(&img, stage)?;
            let body = format!(
                "{{\"shape\":{:?},\"data\":[{}]}}\n",
                t.shape(),
                t.data().iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
            );
            fs::write(&out, body).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}
