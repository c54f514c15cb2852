use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use lanpose_cli::ablation::ablate;
use lanpose_cli::{evaluate, load_config, records, CliError};
use lanpose_core::geomfeat::{dump_maps, NoiseConfig};
use lanpose_core::instruction::{ground, Command, Grammar};
use lanpose_core::metrics::{write_predictions, MetricsReport};
use lanpose_core::scene::{assembly_pose, generate_dataset, GenConfig};
use lanpose_core::geometry::block_catalog;
use lanpose_net::checkpoint::load_checkpoint;
use lanpose_net::data::{eval_noise_seed, object_sample, Role};
use lanpose_net::predict::predict;
use lanpose_net::train::{train_resume, TrainConfig};

#[derive(Parser)]
#[command(name = "lanpose", version, about = "Language-conditioned assembly pose estimation on synthetic block scenes")]
struct Cli {
    /// Seed for generation and training; overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a dataset of scenes, instructions and ground-truth poses as JSON lines.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train both branches (stage 1 then stage 2).
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run with the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predict object and assembly poses for every record.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training config whose map-noise settings are used.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the noisy input maps of every record into this directory.
        #[arg(long)]
        dump_maps: Option<PathBuf>,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        /// Directory for report.txt and report.csv; the text table is always printed.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the fusion variants over several seeds and compare them.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Parse an instruction into a command.
    Parse {
        text: String,
        #[arg(long)]
        grammar: Option<PathBuf>,
    },
    /// Ground a command in a record's scene and compute the assembly pose.
    Oracle {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        id: u64,
        /// Instruction text; defaults to the record's own instruction.
        #[arg(long, conflicts_with = "command")]
        text: Option<String>,
        /// Command JSON as printed by `parse`.
        #[arg(long)]
        command: Option<String>,
        #[arg(long)]
        grammar: Option<PathBuf>,
    },
    /// Format a metrics CSV as a text table.
    Report {
        #[arg(long)]
        csv: PathBuf,
    },
}

fn grammar(path: Option<&Path>) -> Result<Grammar, CliError> {
    match path {
        None => Ok(Grammar::builtin().clone()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Grammar::from_json(&text).map_err(|e| CliError::Usage(format!("grammar {}: {e}", p.display())))
        }
    }
}

fn train_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig, CliError> {
    let mut cfg: TrainConfig = load_config(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<(), CliError> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::GenData { config, n, out } => {
            let cfg: GenConfig = load_config(config.as_deref())?;
            cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            let m = generate_dataset(&cfg, n, cli.seed.unwrap_or(0), &out)?;
            println!("wrote {} records to {} (sha256 {})", m.n_records, out.display(), m.content_hash);
        }
        Cmd::Train { config, train, val, out, resume } => {
            let cfg = train_config(config.as_deref(), cli.seed)?;
            let (tr, va) = (records(&train)?, records(&val)?);
            let resume = resume.map(|p| load_checkpoint(&p)).transpose()?;
            let outcome = train_resume(&tr, &va, &cfg, &out, resume)?;
            println!("checkpoint {}", outcome.checkpoint.display());
            println!("metrics {}", outcome.metrics_csv.display());
        }
        Cmd::Predict { checkpoint, records: rpath, out, config, dump_maps: dump } => {
            let noise = match config {
                Some(p) => train_config(Some(&p), cli.seed)?.noise,
                None => NoiseConfig::default(),
            };
            let net = load_checkpoint(&checkpoint)?.network;
            let recs = records(&rpath)?;
            let preds = predict(&net, &recs, &noise)?;
            write_predictions(fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?, &preds)?;
            if let Some(dir) = dump {
                fs::create_dir_all(&dir)?;
                for r in &recs {
                    for (role, tag) in [(Role::Base, "base"), (Role::Target, "target")] {
                        let s = object_sample(r, role, net.cfg.map_size, &noise, eval_noise_seed(r, role))?;
                        dump_maps(&dir.join(format!("{:06}_{tag}.f32", r.id)), &s.noisy, r.id)?;
                    }
                }
            }
            println!("wrote {} predictions to {}", preds.len(), out.display());
        }
        Cmd::Eval { records: rpath, predictions, out } => {
            let report = evaluate(&rpath, &predictions)?;
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("report.txt"), report.to_text())?;
                fs::write(dir.join("report.csv"), report.to_csv())?;
            }
            print!("{}", report.to_text());
        }
        Cmd::Ablate { config, train, val, out, seeds } => {
            let cfg = train_config(config.as_deref(), None)?;
            let base = cli.seed.unwrap_or(cfg.seed);
            let seeds: Vec<u64> = (base..base + seeds).collect();
            let (tr, va) = (records(&train)?, records(&val)?);
            let report = ablate(&tr, &va, &cfg, &seeds, &out)?;
            fs::write(out.join("ablation.csv"), report.to_csv())?;
            fs::write(out.join("ablation.txt"), report.to_text())?;
            print!("{}", report.to_text());
        }
        Cmd::Parse { text, grammar: g } => {
            let cmd = grammar(g.as_deref())?.parse(&text)?;
            print_json(&cmd)?;
        }
        Cmd::Oracle { records: rpath, id, text, command, grammar: g } => {
            let recs = records(&rpath)?;
            let rec = recs.iter().find(|r| r.id == id).with_context(|| format!("no record with id {id}"))?;
            let cmd: Command = match command {
                Some(json) => serde_json::from_str(&json).map_err(|e| CliError::Usage(format!("command JSON: {e}")))?,
                None => grammar(g.as_deref())?.parse(text.as_deref().unwrap_or(&rec.instruction))?,
            };
            let (base_id, target_id) = ground(&cmd, &rec.scene)?;
            let base = rec.scene.object(base_id).context("grounded base object")?;
            let target = rec.scene.object(target_id).context("grounded target object")?;
            let cat = block_catalog();
            let bm = cat.get(base.block_id).context("base block")?;
            let tm = cat.get(target.block_id).context("target block")?;
            let pose = assembly_pose(&base.pose, cmd.action, bm, tm)?;
            print_json(&serde_json::json!({
                "record_id": rec.id,
                "command": cmd,
                "base_id": base_id,
                "target_id": target_id,
                "P_assembly": pose,
            }))?;
        }
        Cmd::Report { csv } => {
            let text = fs::read_to_string(&csv).with_context(|| format!("reading {}", csv.display()))?;
            print!("{}", MetricsReport::from_csv(&text)?.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
