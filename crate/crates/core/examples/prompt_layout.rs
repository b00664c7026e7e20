//! Prints the language-model prompt for each module and prompt-strategy setting.
//!
//! `cargo run --example prompt_layout`

use forgery_knowledge::model::{ForgeryModel, ModelConfig};
use forgery_knowledge::train::Variant;

fn main() -> forgery_knowledge::Result<()> {
    let mut seen = Vec::new();
    for v in Variant::module_grid().into_iter().chain(Variant::prompt_grid()) {
        if seen.contains(&v.toggles) {
            continue;
        }
        seen.push(v.toggles);
        let (model, store) = ForgeryModel::new(ModelConfig::default(), v.toggles, 0)?;
        let trainable = model.trainable_parameters(&store).len();
        println!("{} ({} positions, {trainable} trainable tensors)", v.name, model.layout.len());
        println!("  {}", model.layout.describe(&model.vocab));
    }
    Ok(())
}
