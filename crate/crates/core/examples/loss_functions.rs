//! Evaluates each training loss on small hand-made inputs.
//!
//! `cargo run --example loss_functions`

use forgery_knowledge::losses::{cross_entropy, dice_loss, focal_loss, giou_loss, l1_box, FOCAL_GAMMA};
use forgery_knowledge::tensor::{Tape, Tensor};
use forgery_knowledge::BBox;

fn main() -> forgery_knowledge::Result<()> {
    let mut tape = Tape::<f64>::new();
    let logits = tape.constant(Tensor::new([2, 3], vec![2.0, 0.5, -1.0, 0.1, 0.2, 0.3])?);
    let ce = cross_entropy(&mut tape, logits, &[0, 2])?;
    println!("cross entropy      {:.4}", tape.scalar_value(ce));

    // Four pixels, two natural and two unnatural, scored by log-probabilities.
    let probs: [f64; 4] = [0.9, 0.7, 0.2, 0.4];
    let rows: Vec<f64> = probs.iter().flat_map(|p| [(1.0 - p).ln(), p.ln()]).collect();
    let m_s = tape.constant(Tensor::new([4, 2], rows)?);
    let mask = [1.0, 1.0, 0.0, 0.0];
    let focal = focal_loss(&mut tape, m_s, &mask, FOCAL_GAMMA)?;
    let dice = dice_loss(&mut tape, m_s, &mask)?;
    println!("focal (gamma 2)    {:.4}", tape.scalar_value(focal));
    println!("dice               {:.4}", tape.scalar_value(dice));

    let target = BBox::new(0.0, 0.0, 0.5, 0.5);
    for pred in [[0.0, 0.0, 0.5, 0.5], [0.25, 0.0, 0.75, 0.5], [0.5, 0.5, 1.0, 1.0]] {
        let p = tape.constant(Tensor::new([1, 4], pred.to_vec())?);
        let g = giou_loss(&mut tape, p, target)?;
        let l = l1_box(&mut tape, p, target)?;
        println!("box {pred:?}  giou loss {:.4}  l1 {:.4}", tape.scalar_value(g), tape.scalar_value(l));
    }
    Ok(())
}
