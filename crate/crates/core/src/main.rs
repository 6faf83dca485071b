use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use rimae::ablation::{ablation_csv, run_ablation, AblationOptions};
use rimae::checkpoint::Checkpoint;
use rimae::config::{Config, RotationKind, Scenario};
use rimae::data::{generate_dataset, load_dataset, write_dataset, Family, GenDataOptions};
use rimae::invariance::eval_invariance;
use rimae::io::{read_cloud, write_cloud};
use rimae::rotation::{Mat3, RotationMatrix};
use rimae::seed::derive_rng;
use rimae::train::{evaluate_scenario, few_shot_eval, finetune, loss_csv, pretrain, run_scenario, ProbeConfig};

#[derive(Parser)]
#[command(name = "rimae", version, about = "Rotation-invariant masked point modeling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// zz, zso3 or so3so3; overrides the config scenario.
    #[arg(long)]
    scenario: Option<Scenario>,
}

impl Common {
    fn resolve(&self, base: Option<Config>) -> anyhow::Result<Config> {
        let mut cfg = match (&self.config, base) {
            (Some(p), _) => Config::load(p)?,
            (None, Some(c)) => c,
            (None, None) => Config::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = self.scenario {
            cfg.scenario = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset with labels.csv and manifest.json.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        /// Comma-separated families.
        #[arg(long, default_value = "helix,asymmetric-l,skewed-ellipsoid,lattice-cube")]
        families: String,
        #[arg(long, default_value_t = 384)]
        points: usize,
        #[arg(long, default_value_t = 0.005)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "ripc")]
        format: String,
    },
    /// Pretrain and write checkpoint.rimc, loss.csv and summary.json.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Step budget; defaults to epochs × batches per epoch.
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a checkpoint written with the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Linear probe on the frozen encoder, scored under each scenario.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run few-shot episodes instead: ways,shots (e.g. 3,10).
        #[arg(long)]
        few_shot: Option<String>,
        #[arg(long, default_value_t = 10)]
        runs: usize,
        /// Train the head only on clouds without degenerate patch frames.
        #[arg(long)]
        exclude_degenerate: bool,
    },
    /// Train encoder and head end to end, then score the held-out split.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 100)]
        steps: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-stage rotation residuals; exits 1 when any stage fails.
    EvalInvariance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Five-row ablation grid, written as ablation.csv.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Rotate cloud files by a given matrix or a random rotation.
    Rotate {
        /// Input files (.ripc or .xyz).
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Nine comma-separated entries, row-major; random when omitted.
        #[arg(long)]
        matrix: Option<String>,
        /// Random rotation kind: z or so3.
        #[arg(long, default_value = "so3")]
        kind: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes")
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::GenData { out, count, families, points, noise, seed, format } => {
            let families = families
                .split(',')
                .map(str::parse)
                .collect::<Result<Vec<Family>, _>>()?;
            if format != "ripc" && format != "xyz" {
                bail!("--format must be ripc or xyz");
            }
            let opts = GenDataOptions { families, count, points, noise, seed, format };
            let data = generate_dataset(&opts)?;
            write_dataset(&out, &data, &opts)?;
            println!("wrote {} clouds to {}", data.len(), out.display());
        }
        Command::Pretrain { common, data, out, steps, resume } => {
            let resume = resume.map(|p| Checkpoint::load(&p)).transpose()?;
            let cfg = common.resolve(resume.as_ref().map(|c| c.manifest.config.clone()))?;
            let dataset = load_dataset(&data)?;
            let outcome = pretrain(&dataset, &cfg, steps, resume.as_ref())?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            outcome.checkpoint.save(&out.join("checkpoint.rimc"))?;
            write(&out.join("loss.csv"), &loss_csv(&outcome.history))?;
            let (first, last) = (outcome.history.first(), outcome.history.last());
            let summary = serde_json::json!({
                "steps": outcome.checkpoint.manifest.step,
                "first_loss": first.map(|r| r.loss),
                "final_loss": last.map(|r| r.loss),
                "final_teacher_variance": last.map(|r| r.teacher_variance),
                "config": cfg,
            });
            write(&out.join("summary.json"), &json(&summary))?;
            println!("final loss {:?} after {} steps", last.map(|r| r.loss), outcome.checkpoint.manifest.step);
        }
        Command::Probe { common, checkpoint, data, out, few_shot, runs, exclude_degenerate } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = common.resolve(Some(ck.manifest.config.clone()))?;
            let arch = ck.manifest.config.architecture();
            let dataset = load_dataset(&data)?;
            let encoder = ck.encoder();
            let probe = ProbeConfig { exclude_degenerate, ..Default::default() };
            let report = if let Some(spec) = few_shot {
                let (k, n) = spec
                    .split_once(',')
                    .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)))
                    .context("--few-shot expects ways,shots")?;
                let r = few_shot_eval(&encoder, &dataset, &arch, cfg.scenario, k, n, runs, &probe, cfg.seed)?;
                println!("{k}-way {n}-shot: {:.2} ± {:.2} %", 100.0 * r.mean, 100.0 * r.std);
                json(&r)
            } else {
                let (train, test) = dataset.split(5);
                let mut reports = Vec::new();
                for sc in Scenario::all() {
                    let r = run_scenario(&encoder, &train, &test, &arch, sc, &probe, cfg.seed)?;
                    println!(
                        "{:<8} accuracy {:.4}  regular {:.4}  argmax agreement {:.4}  degenerate {}",
                        r.scenario, r.accuracy, r.regular_accuracy, r.argmax_agreement, r.degenerate_samples
                    );
                    reports.push(r);
                }
                json(&reports)
            };
            if let Some(out) = out {
                write(&out.join("probe.json"), &report)?;
            }
        }
        Command::Finetune { common, checkpoint, data, steps, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = common.resolve(Some(ck.manifest.config.clone()))?;
            let (train, test) = load_dataset(&data)?.split(5);
            let clf = finetune(&ck.encoder(), &train, &cfg, steps)?;
            let r = evaluate_scenario(&clf, &test, cfg.scenario, cfg.seed)?;
            println!("{} accuracy {:.4}", r.scenario, r.accuracy);
            if let Some(out) = out {
                write(&out.join("finetune.json"), &json(&r))?;
            }
        }
        Command::EvalInvariance { checkpoint, data, trials, seed, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let dataset = load_dataset(&data)?;
            let report = eval_invariance(&ck, &dataset, trials, seed)?;
            print!("{}", report.to_text());
            if let Some(out) = out {
                write(&out.join("invariance.json"), &json(&report))?;
            }
            if !report.passed {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Ablate { common, data, out, steps } => {
            let cfg = common.resolve(None)?;
            let dataset = load_dataset(&data)?;
            let rows = run_ablation(&cfg, &dataset, &AblationOptions { steps, ..Default::default() })?;
            let csv = ablation_csv(&rows);
            write(&out.join("ablation.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Rotate { inputs, out, matrix, kind, seed } => {
            let kind = match kind.as_str() {
                "z" => RotationKind::Z,
                "so3" => RotationKind::So3,
                other => bail!("--kind must be z or so3, got {other}"),
            };
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for (i, input) in inputs.iter().enumerate() {
                let r = match &matrix {
                    Some(text) => parse_matrix(text)?,
                    None => kind.sample(&mut derive_rng(seed, &[i as u64])),
                };
                let cloud = read_cloud(input)?.rotated(&r);
                let name = input.file_name().context("input has no file name")?;
                write_cloud(&out.join(name), &cloud)?;
            }
            println!("rotated {} files into {}", inputs.len(), out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_matrix(text: &str) -> anyhow::Result<RotationMatrix> {
    let v: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .context("--matrix expects nine numbers")?;
    if v.len() != 9 {
        bail!("--matrix expects nine numbers, got {}", v.len());
    }
    let m: Mat3 = [[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]];
    Ok(RotationMatrix::new(m)?)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = std::env::var("RIMAE_THREADS").ok().and_then(|s| s.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("RIMAE_THREADS ignored: {e}");
        }
    }
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
