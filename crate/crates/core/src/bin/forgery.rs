use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use forgery_knowledge::config::TrainConfig;
use forgery_knowledge::synth::{build_dataset, encode_pgm, load_split, DatasetCounts, DomainStyle};
use forgery_knowledge::train::{ablate, cross_domain, evaluate, load_checkpoint, train, Evaluation};
use forgery_knowledge::vocab::Vocab;
use forgery_knowledge::{Error, Result};

#[derive(Parser)]
#[command(name = "forgery", version, about = "Forgery-knowledge detector for synthetic image-text news")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic dataset with train/ and test/ splits.
    Generate {
        #[arg(long)]
        style: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 500)]
        test: usize,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
    /// Trains from a TOML config and writes the checkpoint and its sidecars.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluates a checkpoint on the test split of a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Writes per-sample unnatural-probability maps as PGM files.
        #[arg(long)]
        dump_maps: Option<PathBuf>,
    },
    /// Evaluates one checkpoint on several datasets.
    CrossDomain {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Trains and evaluates the module and prompt-strategy ablation grids.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn dump_maps(ckpt: &Path, data: &Path, eval: &Evaluation, dir: &Path) -> Result<usize> {
    let (_, model, _) = load_checkpoint(ckpt)?;
    if !model.toggles.artifact {
        return Err(Error::Usage("--dump-maps needs a checkpoint with the artifact module".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let samples = load_split(data.join("test"))?;
    let mut written = 0;
    for (s, o) in samples.iter().zip(&eval.outputs) {
        let Some(seg) = &o.seg else { continue };
        let n = seg.shape()[0];
        let side = (n as f64).sqrt().round() as usize;
        let pixels: Vec<u8> = (0..n).map(|r| (seg.row(r)[1].exp() * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        let path = dir.join(format!("{}.pgm", s.id));
        std::fs::write(&path, encode_pgm(&pixels, side, side)).map_err(|e| Error::io(&path, e))?;
        written += 1;
    }
    Ok(written)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { style, out, train, test, seed } => {
            let style = DomainStyle::builtin(&style)?;
            build_dataset(&out, &style, DatasetCounts::balanced(train, test), seed, &Vocab::new())?;
            println!("wrote {} ({train} train, {test} test)", out.display());
        }
        Command::Train { config, out } => {
            let cfg = TrainConfig::load(&config)?;
            let trained = train(&cfg, &out)?;
            if let Some(w) = &trained.warm_start {
                println!(
                    "warm start: image {:.4} text {:.4} lm {:.4}",
                    w.image_loss, w.text_loss, w.lm_loss
                );
            }
            for (epoch, loss) in trained.epoch_losses.iter().enumerate() {
                println!("epoch {epoch:>3} mean loss {loss:.4}");
            }
            println!("checkpoint {}", out.display());
            for data in &cfg.data.test {
                let r = evaluate(&out, data)?.report;
                println!("{:<8} auc {:.4} eer {:.4} acc {:.4} n {}", r.domain, r.auc, r.eer, r.acc, r.n);
            }
        }
        Command::Eval { ckpt, data, report, dump_maps: maps } => {
            let eval = evaluate(&ckpt, &data)?;
            let r = &eval.report;
            println!("{} auc {:.4} eer {:.4} acc {:.4} n {}", r.domain, r.auc, r.eer, r.acc, r.n);
            if let Some(l) = eval.localization {
                println!(
                    "localization: pixel accuracy {:.4} mean IoU {:.4} over {} edited images",
                    l.pixel_accuracy, l.mean_iou, l.n
                );
            }
            if let Some(path) = report {
                write_json(&path, r)?;
            }
            if let Some(dir) = maps {
                let n = dump_maps(&ckpt, &data, &eval, &dir)?;
                println!("wrote {n} maps to {}", dir.display());
            }
        }
        Command::CrossDomain { ckpt, data, report } => {
            let reports = cross_domain(&ckpt, &data)?;
            for r in &reports {
                println!("{:<8} auc {:.4} eer {:.4} acc {:.4} n {}", r.domain, r.auc, r.eer, r.acc, r.n);
            }
            if let Some(path) = report {
                write_json(&path, &reports)?;
            }
        }
        Command::Ablate { config, out } => {
            let cfg = TrainConfig::load(&config)?;
            let report = ablate(&cfg, &out)?;
            print!("{}", report.table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
