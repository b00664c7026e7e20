//! Writes four synthetic datasets, trains on one, and evaluates the
//! checkpoint on all of them through the on-disk workflow.
//!
//! `cargo run --release --example cross_domain -- [WORK_DIR] [TRAIN] [TEST] [EPOCHS]`

use std::path::PathBuf;

use forgery_knowledge::config::TrainConfig;
use forgery_knowledge::synth::{build_dataset, DatasetCounts, DomainStyle};
use forgery_knowledge::train::{cross_domain, train};
use forgery_knowledge::vocab::Vocab;

fn arg(i: usize, default: usize) -> usize {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> forgery_knowledge::Result<()> {
    let work = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "cross_domain_run".into()));
    let mut cfg = TrainConfig::default();
    cfg.epochs = arg(4, cfg.epochs);
    let counts = DatasetCounts::balanced(arg(2, 2000), arg(3, 500));
    let vocab = Vocab::new();
    let mut dirs = Vec::new();
    for name in DomainStyle::BUILTIN {
        let dir = work.join(name);
        build_dataset(&dir, &DomainStyle::builtin(name)?, counts, cfg.seed, &vocab)?;
        dirs.push(dir);
    }
    cfg.data.train = dirs[0].clone();
    let ckpt = work.join("alpha.fkao");
    train(&cfg, &ckpt)?;
    println!("trained on alpha -> {}", ckpt.display());
    for r in cross_domain(&ckpt, &dirs)? {
        println!("  {:<6} auc {:.4} eer {:.4} acc {:.4}", r.domain, r.auc, r.eer, r.acc);
    }
    Ok(())
}
