use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde_json::json;

use patchmoe::affinity::{self, collapse_metrics, AffinityMatrix, EmbeddingDump, ExportFormat};
use patchmoe::checkpoint::{Checkpoint, RouterKind};
use patchmoe::config::RunConfig;
use patchmoe::dataset::{self, Dataset, SynthSpec};
use patchmoe::pipeline;
use patchmoe::train::MetricsLog;
use patchmoe::Error;

type Ck = Checkpoint<f32>;

/// Patch-level mixture-of-experts pipeline for small vision transformers.
#[derive(Parser)]
#[command(name = "patchmoe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Run configuration (TOML). Later stages default to the config stored
    /// in the input checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override one config value, e.g. `--set optim.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AffinityModeArg {
    Pre,
    Post,
    FigureD,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset described by a spec file.
    GenData {
        /// Dataset spec (TOML).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a dense model from scratch.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Initialize routers and experts and convert a dense checkpoint.
    Moefy {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Router initialization.
        #[arg(long, value_enum)]
        router: Option<RouterKind>,
        /// Literal expert width instead of the reduction factor.
        #[arg(long)]
        de_literal: Option<usize>,
    },
    /// Finetune a converted checkpoint.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on both splits.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Class-expert affinity matrices and collapse metrics.
    Affinity {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        mode: AffinityModeArg,
        /// Converted checkpoint; pre and figure-d read the embedding dumps
        /// saved next to it unless `--dump` is given.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset, required for `post`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Embedding dump sidecar (pre and figure-d).
        #[arg(long)]
        dump: Option<PathBuf>,
        /// Only this MoE layer.
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "csv,json,svg")]
        format: Vec<ExportFormat>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print parameter counts, expert configuration and router provenance.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

fn resolve(args: &ConfigArgs, base: Option<&RunConfig>) -> patchmoe::Result<RunConfig> {
    let mut cfg = RunConfig::resolve(base, args.config.as_deref(), &args.sets)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn write_run(out: &Path, command: &str, cfg: Option<&RunConfig>, inputs: serde_json::Value) -> patchmoe::Result<()> {
    fs::create_dir_all(out)?;
    let argv: Vec<String> = std::env::args().collect();
    let run = json!({
        "command": command,
        "argv": argv,
        "version": env!("CARGO_PKG_VERSION"),
        "inputs": inputs,
        "config": cfg,
    });
    fs::write(out.join("run.json"), serde_json::to_string_pretty(&run)?)?;
    if let Some(cfg) = cfg {
        fs::write(out.join("config.toml"), cfg.to_toml())?;
    }
    Ok(())
}

fn write_metrics(out: &Path, log: &MetricsLog) -> patchmoe::Result<()> {
    fs::write(out.join("metrics.csv"), log.to_csv())?;
    Ok(())
}

fn dump_path(dir: &Path, layer: usize) -> PathBuf {
    dir.join(format!("embeddings_layer{layer}.json"))
}

fn checkpoint_dir(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.to_path_buf()
    } else {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    }
}

fn run(cli: Cli) -> patchmoe::Result<()> {
    match cli.command {
        Command::GenData { spec, out } => {
            let text = fs::read_to_string(&spec).map_err(|e| Error::Config(format!("{}: {e}", spec.display())))?;
            let spec_cfg: SynthSpec =
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", spec.display())))?;
            let ds = dataset::generate(&spec_cfg)?;
            ds.save_dir(&out)?;
            println!("wrote {} images in {} classes to {}", ds.items.len(), ds.num_classes(), out.display());
        }
        Command::Pretrain { cfg, data, out } => {
            let cfg = resolve(&cfg, None)?;
            let ds = Dataset::load_dir(&data)?;
            let (ck, log) = pipeline::pretrain::<f32>(&cfg, &ds)?;
            ck.save(&out)?;
            write_metrics(&out, &log)?;
            write_run(&out, "pretrain", Some(&cfg), json!({ "data": data }))?;
            report_last(&log);
        }
        Command::Moefy {
            cfg,
            data,
            checkpoint,
            out,
            router,
            de_literal,
        } => {
            let ck = Ck::load(&checkpoint)?;
            let mut cfg = resolve(&cfg, ck.run_config.as_ref())?;
            if let Some(kind) = router {
                cfg.moe.router = kind;
            }
            if let Some(de) = de_literal {
                cfg.moe.expert_hidden = Some(de);
            }
            cfg.validate()?;
            let ds = Dataset::load_dir(&data)?;
            let (ck, inits) = pipeline::moefy(ck, &ds, &cfg, cfg.moe.router, &cfg.moe.expert_init())?;
            ck.save(&out)?;
            for init in &inits {
                EmbeddingDump::from(init).save(&dump_path(&out, init.layer))?;
            }
            write_run(&out, "moefy", Some(&cfg), json!({ "data": data, "checkpoint": checkpoint }))?;
            print!("{}", pipeline::inspect(&ck));
        }
        Command::Finetune {
            cfg,
            data,
            checkpoint,
            out,
        } => {
            let ck = Ck::load(&checkpoint)?;
            let cfg = resolve(&cfg, ck.run_config.as_ref())?;
            let ds = Dataset::load_dir(&data)?;
            let (ck, log) = pipeline::finetune(ck, &ds, &cfg)?;
            ck.save(&out)?;
            let src = checkpoint_dir(&checkpoint);
            for &l in &ck.model.config.moe_layers {
                let from = dump_path(&src, l);
                if from.exists() && src != out {
                    fs::copy(&from, dump_path(&out, l))?;
                    fs::copy(from.with_extension("bin"), dump_path(&out, l).with_extension("bin"))?;
                }
            }
            write_metrics(&out, &log)?;
            write_run(&out, "finetune", Some(&cfg), json!({ "data": data, "checkpoint": checkpoint }))?;
            report_last(&log);
        }
        Command::Eval {
            cfg,
            data,
            checkpoint,
            out,
        } => {
            let ck = Ck::load(&checkpoint)?;
            let cfg = resolve(&cfg, ck.run_config.as_ref())?;
            let ds = Dataset::load_dir(&data)?;
            let reports = pipeline::eval(&ck, &ds, cfg.data.eval_batch_size)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("metrics.csv"), pipeline::eval_csv(&reports))?;
            for &l in &ck.model.config.moe_layers {
                if ck.model.moe_block(l).is_some() {
                    fs::write(out.join(format!("routing_layer{l}.csv")), pipeline::routing_csv(&reports, l))?;
                }
            }
            fs::write(out.join("eval.json"), serde_json::to_string_pretty(&reports)?)?;
            write_run(&out, "eval", Some(&cfg), json!({ "data": data, "checkpoint": checkpoint }))?;
            print!("{}", pipeline::eval_csv(&reports));
        }
        Command::Affinity {
            cfg,
            mode,
            checkpoint,
            data,
            dump,
            layer,
            format,
            out,
        } => {
            let ck = Ck::load(&checkpoint)?;
            ck.require_stage(patchmoe::backbone::Stage::Moe)?;
            let cfg = resolve(&cfg, ck.run_config.as_ref())?;
            let layers: Vec<usize> = match layer {
                Some(l) if ck.model.moe_block(l).is_some() => vec![l],
                Some(l) => return Err(Error::InvalidArgument(format!("layer {l} is not an MoE layer"))),
                None => ck.model.config.moe_layers.clone(),
            };
            let ds = match (&data, mode) {
                (Some(d), _) => Some(Dataset::load_dir(d)?),
                (None, AffinityModeArg::Post) => {
                    return Err(Error::InvalidArgument("--data is required for post mode".into()))
                }
                (None, _) => None,
            };
            let class_names = ds.as_ref().map(|d| d.class_names.clone());
            let (stem, temperature, threshold) = match mode {
                AffinityModeArg::Pre => ("pre", 1.0, 0.0),
                AffinityModeArg::Post => ("post", 0.0, 0.0),
                AffinityModeArg::FigureD => {
                    ("figure_d", affinity::FIGURE_D_TEMPERATURE, affinity::FIGURE_D_THRESHOLD)
                }
            };
            let mut summary = Vec::new();
            for &l in &layers {
                let m: AffinityMatrix = match mode {
                    AffinityModeArg::Post => affinity::affinity_post(
                        &ck.model,
                        ds.as_ref().expect("checked above"),
                        l,
                        cfg.data.affinity_batches,
                        cfg.data.affinity_batch_size,
                        cfg.seed,
                    )?,
                    _ => {
                        let path = match (&dump, layers.len()) {
                            (Some(p), 1) => p.clone(),
                            (Some(_), _) => {
                                return Err(Error::InvalidArgument("--dump needs --layer when several layers are MoE".into()))
                            }
                            (None, _) => dump_path(&checkpoint_dir(&checkpoint), l),
                        };
                        let d = EmbeddingDump::load(&path)?;
                        affinity::affinity_pre(&d.centroids, &d.class_patches, temperature, threshold, l)?
                    }
                };
                let name = format!("affinity_{stem}_layer{l}");
                m.export(&out, &name, &format, class_names.as_deref())?;
                let collapse = collapse_metrics(&m, None);
                fs::write(
                    out.join(format!("collapse_{stem}_layer{l}.json")),
                    serde_json::to_string_pretty(&collapse)?,
                )?;
                println!(
                    "layer {l}: starved experts {:?}, column-mass entropy {:.4}, gini {:.4}",
                    collapse.starved, collapse.entropy, collapse.gini
                );
                summary.push(json!({ "layer": l, "collapse": collapse }));
            }
            write_run(
                &out,
                "affinity",
                Some(&cfg),
                json!({ "checkpoint": checkpoint, "data": data, "dump": dump, "mode": stem, "layers": summary }),
            )?;
        }
        Command::Inspect { checkpoint, json } => {
            let ck = Ck::load(&checkpoint)?;
            let report = pipeline::inspect(&ck);
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{report}");
            }
        }
    }
    Ok(())
}

fn report_last(log: &MetricsLog) {
    if let Some(v) = log.last(dataset::Split::Val) {
        println!("epoch {}: val loss {:.4}, top1 {:.4}", v.epoch, v.loss, v.top1);
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = match &cli.command {
        Command::GenData { .. } => "gen-data",
        Command::Pretrain { .. } => "pretrain",
        Command::Moefy { .. } => "moefy",
        Command::Finetune { .. } => "finetune",
        Command::Eval { .. } => "eval",
        Command::Affinity { .. } => "affinity",
        Command::Inspect { .. } => "inspect",
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = e.exit_code();
            if code == 2 {
                let mut cmd = Cli::command();
                if let Some(sub) = cmd.find_subcommand_mut(name) {
                    let mut sub = sub.clone().bin_name(format!("patchmoe {name}"));
                    eprintln!("{}", sub.render_usage());
                }
            }
            ExitCode::from(code as u8)
        }
    }
}
