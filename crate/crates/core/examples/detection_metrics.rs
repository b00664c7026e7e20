//! AUC, EER and accuracy for a small scored sample, plus its ROC points.
//!
//! `cargo run --example detection_metrics`

use forgery_knowledge::metrics::MetricsReport;

fn main() -> forgery_knowledge::Result<()> {
    let scores = [0.95, 0.80, 0.75, 0.62, 0.55, 0.40, 0.30, 0.10];
    let labels = [1, 1, 0, 1, 0, 1, 0, 0];
    let predicted: Vec<u8> = scores.iter().map(|&s| u8::from(s > 0.5)).collect();
    let report = MetricsReport::compute(&scores, &labels, &predicted, "demo", "test")?;
    println!("auc {:.4} eer {:.4} acc {:.4} n {}", report.auc, report.eer, report.acc, report.n);
    for [fpr, tpr] in &report.roc {
        println!("  fpr {fpr:.3} tpr {tpr:.3}");
    }
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}
