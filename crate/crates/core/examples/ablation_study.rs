//! Trains the module and prompt-strategy ablation grids on "alpha" and
//! evaluates each variant on the other built-in domains.
//!
//! `cargo run --release --example ablation_study -- [TRAIN] [TEST] [EPOCHS] [modules|prompts|all] [SEED]`

use std::time::Instant;

use forgery_knowledge::config::TrainConfig;
use forgery_knowledge::synth::{generate_split, DomainStyle};
use forgery_knowledge::train::{ablate_samples, Variant};
use forgery_knowledge::vocab::Vocab;

fn arg(i: usize, default: usize) -> usize {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> forgery_knowledge::Result<()> {
    let (n_train, n_test) = (arg(1, 2000), arg(2, 500));
    let grid = std::env::args().nth(4).unwrap_or_else(|| "all".into());
    let mut cfg = TrainConfig::default();
    cfg.epochs = arg(3, cfg.epochs);
    cfg.seed = arg(5, cfg.seed as usize) as u64;
    let vocab = Vocab::new();
    let split = |name: &str, split: &str, n: usize| {
        let style = DomainStyle::builtin(name)?;
        generate_split(&style, split, n / 2, n - n / 2, cfg.seed, &vocab)
    };
    let train = split("alpha", "train", n_train)?;
    let tests = ["beta", "gamma", "delta"]
        .iter()
        .map(|d| Ok((d.to_string(), split(d, "test", n_test)?)))
        .collect::<forgery_knowledge::Result<Vec<_>>>()?;
    let modules = if grid == "prompts" { vec![] } else { Variant::module_grid() };
    let prompts = if grid == "modules" { vec![] } else { Variant::prompt_grid() };
    let start = Instant::now();
    let report = ablate_samples(&cfg, &train, &tests, &modules, &prompts, |row| {
        println!(
            "{:<14} avg auc {:.4} avg acc {:.4}  ({:.0}s)",
            row.variant,
            row.average_auc,
            row.average_acc,
            start.elapsed().as_secs_f64()
        );
    })?;
    print!("{}", report.table());
    Ok(())
}
