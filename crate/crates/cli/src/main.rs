//! Stage-by-stage driver for factuality preference-tuning experiments.
//!
//! Every stage reads its inputs from, and writes its outputs to, the run
//! directory given by `--out`. Exit codes: 0 success, 1 stage failure,
//! 2 configuration error.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use faktlab::harness::{
    self, load_manifest, render_table, replay, run_experiment, sweep_quality, sweep_quantity, write_sweep_csvs, Arm,
    ExperimentConfig, HarnessError, RunDir,
};
use faktlab::preflosses::LossKind;

#[derive(Parser)]
#[command(name = "faktlab", version, about = "Factuality preference-tuning laboratory")]
struct Cli {
    /// Experiment config (TOML). Defaults to <out>/config.toml when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Knowledge base, pretraining corpus, entity split and query sets.
    WorldGen,
    /// Pretrain the base model on the corpus.
    Pretrain,
    /// Sample responses and build general preferences.
    PrefsBuild,
    /// Tune one arm with one loss.
    Tune {
        #[arg(long, default_value = "dpo")]
        loss: LossKind,
        #[arg(long, value_enum, default_value = "general")]
        arm: ArmArg,
    },
    /// Probe facts from the preference responses and build atomic preferences.
    ApeftBuild,
    /// Build random single-fact preferences for the w/rand ablation.
    RandqaBuild {
        /// Pairs to build; defaults to the atomic preference count.
        #[arg(long)]
        target: Option<usize>,
    },
    /// Evaluate stored models (all when none is named).
    Eval {
        #[arg(long)]
        model: Vec<String>,
    },
    /// Token-shift analysis of a tuned model against the base.
    TokenShift {
        #[arg(long, default_value = "general_dpo")]
        model: String,
    },
    /// Tune on nested subsets of the general preferences.
    SweepQuantity,
    /// Tune on equal-size quality levels.
    SweepQuality,
    /// Assemble the result table from stored evaluations.
    Report,
    /// Re-run a manifest and compare every artifact digest.
    Replay {
        /// Manifest to replay; defaults to <out>/manifest.json.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Directory of the re-run; defaults to <out>/replay.
        #[arg(long)]
        into: Option<PathBuf>,
    },
    /// Every stage end to end, then the manifest.
    Run,
    /// Print the resolved configuration.
    ShowConfig,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ArmArg {
    General,
    Atom,
    Rand,
}

impl From<ArmArg> for Arm {
    fn from(a: ArmArg) -> Self {
        match a {
            ArmArg::General => Arm::General,
            ArmArg::Atom => Arm::Atom,
            ArmArg::Rand => Arm::Rand,
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig, HarnessError> {
    let stored = cli.out.join("config.toml");
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None if stored.exists() => ExperimentConfig::load(&stored)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn model_names(dir: &RunDir) -> Result<Vec<String>> {
    let mut names: Vec<String> = std::fs::read_dir(dir.path("models"))
        .context("no models directory; run pretrain first")?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str()?.strip_suffix(".ckpt").map(String::from))
        .collect();
    names.sort();
    Ok(names)
}

fn run(cli: &Cli, cfg: &ExperimentConfig) -> Result<()> {
    let dir = RunDir::create(&cli.out)?;
    match &cli.cmd {
        Cmd::ShowConfig => print!("{}", cfg.to_toml()),
        Cmd::WorldGen => {
            let w = dir.world_gen(cfg)?;
            println!(
                "world: {} entities, {} triples, {} corpus records, {} preference / {} held-out entities",
                w.kb.len(),
                w.kb.num_triples(),
                w.corpus.len(),
                w.preference_entities.len(),
                w.held_out_entities().len()
            );
        }
        Cmd::Pretrain => {
            dir.save_config(cfg)?;
            let w = dir.load_world()?;
            let m = dir.pretrain(cfg, &w)?;
            println!("base model {} parameters, digest {}", m.params().len(), m.params_digest());
        }
        Cmd::PrefsBuild => {
            let w = dir.load_world()?;
            let ds = dir.prefs_build(cfg, &w, &dir.load_base()?)?;
            println!(
                "{} general preferences from {} prompts (mean response FS {:.3})",
                ds.pairs.len(),
                ds.manifest.num_prompts,
                ds.manifest.mean_response_fs
            );
        }
        Cmd::Tune { loss, arm } => {
            let w = dir.load_world()?;
            let prefs = dir.load_prefs()?;
            let arm = Arm::from(*arm);
            let records = dir.arm_records(cfg, arm, &prefs)?;
            let m = dir.tune(cfg, &w, &dir.load_base()?, &records, arm, *loss)?;
            println!(
                "tuned {} on {} pairs, digest {}",
                RunDir::arm_model_name(arm, *loss),
                records.len(),
                m.params_digest()
            );
        }
        Cmd::ApeftBuild => {
            let w = dir.load_world()?;
            let b = dir.apeft_build(cfg, &w, &dir.load_base()?, &dir.load_prefs()?)?;
            println!("{} facts probed, {} atomic preferences", b.audit.len(), b.prefs.len());
        }
        Cmd::RandqaBuild { target } => {
            let w = dir.load_world()?;
            let b = dir.randqa_build(cfg, &w, &dir.load_base()?, &dir.load_prefs()?, *target)?;
            println!(
                "{} random single-fact preferences{}",
                b.prefs.len(),
                if b.shortfall { " (short of target)" } else { "" }
            );
        }
        Cmd::Eval { model } => {
            let w = dir.load_world()?;
            let names = if model.is_empty() { model_names(&dir)? } else { model.clone() };
            for name in names {
                let r = dir.eval(cfg, &w, &dir.load_model(&name)?, &name)?;
                println!(
                    "{name}: bio {:.4} open {:.4} fp {:.4} qa {:.4} avg {:.4}",
                    r.bio.fs, r.fava_like.fs, r.fp_acc, r.kqa_acc, r.avg
                );
            }
        }
        Cmd::TokenShift { model } => {
            let w = dir.load_world()?;
            let a = dir.token_shift(cfg, &w, &dir.load_base()?, &dir.load_model(model)?)?;
            match a.diagnosis {
                Some(d) => println!("{d}"),
                None => println!("no in-domain token shifted"),
            }
        }
        Cmd::SweepQuantity | Cmd::SweepQuality => {
            let w = dir.load_world()?;
            let base = dir.load_base()?;
            let general = harness::general_records(&dir.load_prefs()?);
            let (name, rows) = match cli.cmd {
                Cmd::SweepQuantity => ("sweep_quantity", sweep_quantity(cfg, &w, &base, &general)?),
                _ => ("sweep_quality", sweep_quality(cfg, &w, &base, &general)?),
            };
            write_sweep_csvs(&rows, dir.root(), name)?;
            println!("{} rows written to {}", rows.len(), dir.path(&format!("{name}.csv")).display());
        }
        Cmd::Report => print!("{}", render_table(&dir.report(cfg)?)),
        Cmd::Run => {
            let out = run_experiment(cfg, dir.root())?;
            print!("{}", render_table(&out.rows));
            if let Some(d) = out.shift.diagnosis {
                println!("{d}");
            }
        }
        Cmd::Replay { manifest, into } => {
            let m = match manifest {
                Some(p) => harness::RunManifest::load(p)?,
                None => load_manifest(dir.root())?,
            };
            let target = into.clone().unwrap_or_else(|| dir.path("replay"));
            let check = replay(&m, &target)?;
            if !check.identical() {
                bail!("replay differs in {} artifacts: {:?}", check.mismatched.len(), check.mismatched);
            }
            println!("replay identical: {} artifacts", check.compared);
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<HarnessError>() {
        Some(e) if e.is_config() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match resolve_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(&cli, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
