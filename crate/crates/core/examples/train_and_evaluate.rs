//! Trains the full model on one domain, then reports detection per
//! manipulation kind and localization on that domain's test split.
//!
//! `cargo run --release --example train_and_evaluate -- [TRAIN] [TEST] [EPOCHS] [DOMAIN]`

use forgery_knowledge::config::TrainConfig;
use forgery_knowledge::metrics::auc;
use forgery_knowledge::synth::{generate_split, DomainStyle, ManipulationKind};
use forgery_knowledge::train::{evaluate_samples, train_samples, SEG_FACTOR};
use forgery_knowledge::vocab::Vocab;

fn arg(i: usize, default: usize) -> usize {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> forgery_knowledge::Result<()> {
    let (n_train, n_test) = (arg(1, 2000), arg(2, 500));
    let domain = std::env::args().nth(4).unwrap_or_else(|| "alpha".into());
    let mut cfg = TrainConfig::default();
    cfg.epochs = arg(3, cfg.epochs);
    let vocab = Vocab::new();
    let style = DomainStyle::builtin(&domain)?;
    let train = generate_split(&style, "train", n_train / 2, n_train - n_train / 2, cfg.seed, &vocab)?;
    let test = generate_split(&style, "test", n_test / 2, n_test - n_test / 2, cfg.seed, &vocab)?;

    let trained = train_samples(&cfg, &train, None, |log| {
        if log.step % 50 == 0 {
            println!("step {:>5} lr {:.2e} loss {:.4}", log.step, log.lr, log.loss.total);
        }
        Ok(())
    })?;
    println!("epoch losses {:?}", trained.epoch_losses);
    let eval = evaluate_samples(&trained.model, &trained.store, &test, &domain, "test")?;
    let r = &eval.report;
    println!("{domain} test: auc {:.4} eer {:.4} acc {:.4} n {}", r.auc, r.eer, r.acc, r.n);
    for kind in ManipulationKind::FAKE {
        let (scores, labels): (Vec<f64>, Vec<u8>) = test
            .iter()
            .zip(&eval.outputs)
            .filter(|(s, _)| s.pair.kind == kind || s.pair.kind == ManipulationKind::None)
            .map(|(s, o)| (o.prediction.score, s.pair.label))
            .unzip();
        println!("  real vs {kind:?}: auc {:.4}", auc(&scores, &labels)?);
    }
    let edited: Vec<_> = test.iter().filter(|s| s.pair.kind.touches_image()).collect();
    let background: f64 = edited
        .iter()
        .map(|s| s.seg_mask(SEG_FACTOR).iter().filter(|&&m| m < 0.5).count() as f64)
        .sum::<f64>()
        / edited.iter().map(|s| s.seg_mask(SEG_FACTOR).len() as f64).sum::<f64>();
    println!("all-background pixel accuracy {background:.4}");
    let seen = evaluate_samples(&trained.model, &trained.store, &train, &domain, "train")?;
    println!("{domain} train: auc {:.4} acc {:.4}", seen.report.auc, seen.report.acc);
    for (split, e) in [("test", &eval), ("train", &seen)] {
        if let Some(loc) = e.localization {
            println!(
                "{split} localization: pixel accuracy {:.4} mean IoU {:.4} over {} edited images",
                loc.pixel_accuracy, loc.mean_iou, loc.n
            );
        }
    }
    Ok(())
}
