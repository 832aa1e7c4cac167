use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mosaic_kd::harness::{self, ExperimentConfig, HarnessError, Result};

#[derive(Parser)]
#[command(name = "mosaic-kd", version, about = "Out-of-domain knowledge distillation with patch-level mosaic synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; defaults apply to every key it omits.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (overrides `seed` in the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory. Defaults to $MKD_RUN_ROOT/<command>-seed<seed>, or ./runs/...
    #[arg(long)]
    out: Option<PathBuf>,
    /// Compute device. Only `cpu` is available.
    #[arg(long, default_value = "cpu")]
    device: String,
    /// Dotted-key override, e.g. `--set loss.lambda_reg=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Teacher checkpoint (shorthand for `--set teacher.checkpoint=...`).
    #[arg(long)]
    teacher: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher on the target training split.
    TrainTeacher(Common),
    /// Distill a student with the generator/discriminator/teacher/student game.
    DistillMosaic(Common),
    /// Distill a student by plain KD on a fixed transfer set.
    DistillKd(Common),
    /// Keep the k OOD images the teacher is least certain about.
    SelectOodSubset {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        k: usize,
    },
    /// Write the synthetic target/OOD dataset pair as dataset directories.
    MakeSyntheticPair(Common),
    /// Target-test accuracy of a classifier checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// FID between two datasets (default: target-test vs OOD).
    Fid {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        a: Option<PathBuf>,
        #[arg(long)]
        b: Option<PathBuf>,
        #[arg(long, value_enum)]
        extractor: Option<Extractor>,
    },
    /// Patch FID between target-test and OOD for each configured patch size.
    PatchFid {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        extractor: Option<Extractor>,
    },
    /// Summarize a run directory into report/.
    Report { run_dir: PathBuf },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Extractor {
    Teacher,
    Raw,
}

fn resolve(common: &Common, extra: &[String]) -> Result<ExperimentConfig> {
    if common.device != "cpu" {
        return Err(HarnessError::Config {
            key: "--device".into(),
            reason: format!("unsupported device `{}` (only `cpu`)", common.device),
        });
    }
    let mut sets = common.set.clone();
    if let Some(s) = common.seed {
        sets.push(format!("seed={s}"));
    }
    if let Some(t) = &common.teacher {
        sets.push(format!("teacher.checkpoint={:?}", t.display().to_string()));
    }
    sets.extend_from_slice(extra);
    ExperimentConfig::load(common.config.as_deref(), &sets)
}

fn out_dir(common: &Common, command: &str, cfg: &ExperimentConfig) -> PathBuf {
    common.out.clone().unwrap_or_else(|| {
        let root = std::env::var_os("MKD_RUN_ROOT").map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(format!("{command}-seed{}", cfg.seed))
    })
}

fn extractor_set(e: Option<Extractor>) -> Vec<String> {
    match e {
        Some(Extractor::Teacher) => vec!["eval.extractor=\"teacher\"".into()],
        Some(Extractor::Raw) => vec!["eval.extractor=\"raw\"".into()],
        None => Vec::new(),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainTeacher(c) => {
            let cfg = resolve(&c, &[])?;
            let out = out_dir(&c, "train-teacher", &cfg);
            let path = harness::cmd_train_teacher(&cfg, &out)?;
            println!("teacher checkpoint: {}", path.display());
            report_if_possible(&out)
        }
        Command::DistillMosaic(c) => {
            let cfg = resolve(&c, &[])?;
            let out = out_dir(&c, "distill-mosaic", &cfg);
            let o = harness::cmd_distill_mosaic(&cfg, &out)?;
            println!("final accuracy {:.4}, best {:?}", o.final_accuracy, o.best);
            report_if_possible(&out)
        }
        Command::DistillKd(c) => {
            let cfg = resolve(&c, &[])?;
            let out = out_dir(&c, "distill-kd", &cfg);
            let o = harness::cmd_distill_kd(&cfg, &out)?;
            println!("final accuracy {:.4}, best {:?}", o.final_accuracy, o.best);
            report_if_possible(&out)
        }
        Command::SelectOodSubset { common, k } => {
            let cfg = resolve(&common, &[])?;
            let out = out_dir(&common, "select-ood-subset", &cfg);
            let idx = harness::cmd_select_ood_subset(&cfg, &out, k)?;
            println!("kept {} images, written to {}", idx.len(), out.join("ood-subset").display());
            Ok(())
        }
        Command::MakeSyntheticPair(c) => {
            let cfg = resolve(&c, &[])?;
            let out = out_dir(&c, "synthetic-pair", &cfg);
            harness::cmd_make_synthetic_pair(&cfg, &out)?;
            println!("datasets written to {}", out.display());
            Ok(())
        }
        Command::Eval { common, checkpoint } => {
            let cfg = resolve(&common, &[])?;
            println!("accuracy {:.4}", harness::cmd_eval(&cfg, &checkpoint)?);
            Ok(())
        }
        Command::Fid { common, a, b, extractor } => {
            let cfg = resolve(&common, &extractor_set(extractor))?;
            let (v, id) = harness::cmd_fid(&cfg, a.as_deref(), b.as_deref())?;
            println!("fid {v:.6} (extractor {id})");
            Ok(())
        }
        Command::PatchFid { common, extractor } => {
            let cfg = resolve(&common, &extractor_set(extractor))?;
            let (rows, id) = harness::cmd_patch_fid(&cfg)?;
            println!("patch_size,fid,extractor");
            for (l, v) in rows {
                println!("{l},{v:.6},{id}");
            }
            Ok(())
        }
        Command::Report { run_dir } => {
            let r = harness::emit_report(&run_dir)?;
            print!("{}", harness::summary_table(&r));
            Ok(())
        }
    }
}

fn report_if_possible(out: &Path) -> Result<()> {
    let r = harness::emit_report(out)?;
    if let Some(rec) = &r.final_record {
        println!("{}", serde_json::to_string(rec).expect("record serializes"));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

