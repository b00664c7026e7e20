//! Writes a small dataset for each built-in style.
//!
//! `cargo run --example generate_dataset -- OUT_DIR`

use forgery_knowledge::synth::{build_dataset, DatasetCounts, DomainStyle};
use forgery_knowledge::vocab::Vocab;

fn main() -> forgery_knowledge::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "synthetic".into());
    let vocab = Vocab::new();
    for name in DomainStyle::BUILTIN {
        let style = DomainStyle::builtin(name)?;
        let dir = std::path::Path::new(&out).join(name);
        build_dataset(&dir, &style, DatasetCounts::balanced(40, 20), 2024, &vocab)?;
        println!("{name}: {}", dir.display());
    }
    Ok(())
}
