//! Training objectives: answer cross-entropy, pixel focal + dice, box L1 + GIoU.

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tape, Tensor, Var};

pub const FOCAL_GAMMA: f64 = 2.0;
pub const DICE_EPS: f64 = 1.0;

/// Scalar loss values for one sample or one batch. Pixel and patch terms are
/// `None` when the artifact module is disabled (or, for patch terms, when no
/// sample in scope has an edited image).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ce: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_focal: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_dice: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_l1: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_giou: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_pixel: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_patch: Option<f32>,
    pub total: f32,
}

impl LossBreakdown {
    /// Component-wise mean of several breakdowns; an optional term is averaged
    /// over the entries that have it.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let avg = |f: &dyn Fn(&LossBreakdown) -> Option<f32>| {
            let vals: Vec<f32> = items.iter().filter_map(f).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f32>() / vals.len() as f32)
        };
        LossBreakdown {
            l_ce: avg(&|b| Some(b.l_ce)).unwrap_or(0.0),
            l_focal: avg(&|b| b.l_focal),
            l_dice: avg(&|b| b.l_dice),
            l_l1: avg(&|b| b.l_l1),
            l_giou: avg(&|b| b.l_giou),
            l_pixel: avg(&|b| b.l_pixel),
            l_patch: avg(&|b| b.l_patch),
            total: avg(&|b| Some(b.total)).unwrap_or(0.0),
        }
    }

    /// First non-finite component, if any.
    pub fn non_finite(&self) -> Option<(&'static str, f32)> {
        [
            ("l_ce", Some(self.l_ce)),
            ("l_focal", self.l_focal),
            ("l_dice", self.l_dice),
            ("l_l1", self.l_l1),
            ("l_giou", self.l_giou),
            ("total", Some(self.total)),
        ]
        .into_iter()
        .find_map(|(n, v)| v.filter(|x| !x.is_finite()).map(|x| (n, x)))
    }
}

/// Mean `-log softmax(logits)[target]` over rows; `logits` is `n × V`.
pub fn cross_entropy<T: Float>(tape: &mut Tape<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::Usage("cross-entropy needs at least one target".into()));
    }
    let (n, v) = (tape.shape(logits)[0], *tape.shape(logits).last().unwrap());
    if n != targets.len() {
        return Err(Error::dim(
            "cross_entropy",
            format!("{n} logit rows for {} targets", targets.len()),
        ));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= v) {
        return Err(Error::Input(format!("target {t} outside vocabulary of {v}")));
    }
    let lp = tape.log_softmax(logits, 1)?;
    let picked = tape.pick(lp, targets)?;
    let m = tape.mean(picked);
    Ok(tape.scale(m, -1.0))
}

fn mask_column<T: Float>(tape: &mut Tape<T>, m_s: Var, mask: &[f32], op: &'static str) -> Result<Var> {
    let n = tape.shape(m_s)[0];
    if tape.shape(m_s).len() != 2 || tape.shape(m_s)[1] != 2 || mask.len() != n {
        return Err(Error::dim(
            op,
            format!("map {:?} vs mask of {} pixels", tape.shape(m_s), mask.len()),
        ));
    }
    Ok(tape.constant(Tensor::new([n, 1], mask.iter().map(|&m| T::of(m as f64)).collect())?))
}

/// Log-probability of the true class at every pixel (`n × 1`).
fn true_class_log_prob<T: Float>(tape: &mut Tape<T>, m_s: Var, mask: &[f32]) -> Result<Var> {
    let y = mask_column(tape, m_s, mask, "focal_loss")?;
    let natural = tape.slice_cols(m_s, 0, 1)?;
    let unnatural = tape.slice_cols(m_s, 1, 1)?;
    let not_y = tape.rsub_scalar(1.0, y);
    let a = tape.mul(y, unnatural)?;
    let b = tape.mul(not_y, natural)?;
    tape.add(a, b)
}

/// `-(1/n) Σ (1 - p_i)^γ log p_i` with `p_i` the true-class probability.
pub fn focal_loss<T: Float>(tape: &mut Tape<T>, m_s: Var, mask: &[f32], gamma: f64) -> Result<Var> {
    let logp = true_class_log_prob(tape, m_s, mask)?;
    let term = if gamma == 0.0 {
        logp
    } else {
        let p = tape.exp(logp);
        let q = tape.rsub_scalar(1.0, p);
        let w = tape.powf(q, gamma);
        tape.mul(w, logp)?
    };
    let m = tape.mean(term);
    Ok(tape.scale(m, -1.0))
}

/// `1 - (2 Σ y ŷ + ε) / (Σ y² + Σ ŷ² + ε)` for predictions `ŷ` given as an `n × 1` column.
pub fn dice_from_probs<T: Float>(tape: &mut Tape<T>, y_hat: Var, mask: &[f32], eps: f64) -> Result<Var> {
    let n = tape.shape(y_hat)[0];
    if mask.len() != n {
        return Err(Error::dim("dice_loss", format!("{n} predictions vs {} mask pixels", mask.len())));
    }
    let y = tape.constant(Tensor::new([n, 1], mask.iter().map(|&m| T::of(m as f64)).collect())?);
    let yy = tape.mul(y, y_hat)?;
    let inter = tape.sum(yy);
    let num = tape.scale(inter, 2.0);
    let num = tape.add_scalar(num, eps);
    let y_sq: f64 = mask.iter().map(|&m| (m as f64) * (m as f64)).sum();
    let p_sq = tape.mul(y_hat, y_hat)?;
    let p_sq = tape.sum(p_sq);
    let den = tape.add_scalar(p_sq, y_sq + eps);
    let ratio = tape.div(num, den)?;
    Ok(tape.rsub_scalar(1.0, ratio))
}

/// Dice loss on the unnatural-channel probability `exp(M_s[:, 1])`.
pub fn dice_loss<T: Float>(tape: &mut Tape<T>, m_s: Var, mask: &[f32]) -> Result<Var> {
    mask_column(tape, m_s, mask, "dice_loss")?;
    let lp = tape.slice_cols(m_s, 1, 1)?;
    let p = tape.exp(lp);
    dice_from_probs(tape, p, mask, DICE_EPS)
}

fn check_pred_box<T: Float>(tape: &Tape<T>, pred: Var) -> Result<()> {
    if tape.value(pred).numel() != 4 {
        return Err(Error::dim("box", format!("expected 4 coordinates, got {:?}", tape.shape(pred))));
    }
    let v: Vec<f32> = tape.value(pred).data().iter().map(|x| x.f64() as f32).collect();
    BBox::new(v[0], v[1], v[2], v[3]).validate().map(|_| ())
}

/// Mean absolute coordinate difference.
pub fn l1_box<T: Float>(tape: &mut Tape<T>, pred: Var, target: BBox) -> Result<Var> {
    check_pred_box(tape, pred)?;
    target.validate()?;
    let t = tape.constant(Tensor::new([1, 4], target.to_array().map(|x| T::of(x as f64)).to_vec())?);
    let p = tape.reshape(pred, [1, 4])?;
    let d = tape.sub(p, t)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// `1 - GIoU`, in `[0, 2]`.
pub fn giou_loss<T: Float>(tape: &mut Tape<T>, pred: Var, target: BBox) -> Result<Var> {
    check_pred_box(tape, pred)?;
    target.validate()?;
    let p = tape.reshape(pred, [1, 4])?;
    let col = |tape: &mut Tape<T>, i| tape.slice_cols(p, i, 1);
    let (x1, y1, x2, y2) = (col(tape, 0)?, col(tape, 1)?, col(tape, 2)?, col(tape, 3)?);
    let tv = target.to_array();
    let mut c = |v: f32| tape.constant(Tensor::new([1, 1], vec![T::of(v as f64)]).unwrap());
    let (tx1, ty1, tx2, ty2) = (c(tv[0]), c(tv[1]), c(tv[2]), c(tv[3]));

    let span = |tape: &mut Tape<T>, lo: Var, hi: Var| tape.sub(hi, lo);
    let wa = span(tape, x1, x2)?;
    let ha = span(tape, y1, y2)?;
    let area_a = tape.mul(wa, ha)?;
    let wb = span(tape, tx1, tx2)?;
    let hb = span(tape, ty1, ty2)?;
    let area_b = tape.mul(wb, hb)?;

    let ix1 = tape.maximum(x1, tx1)?;
    let iy1 = tape.maximum(y1, ty1)?;
    let ix2 = tape.minimum(x2, tx2)?;
    let iy2 = tape.minimum(y2, ty2)?;
    let iw = span(tape, ix1, ix2)?;
    let iw = tape.relu(iw);
    let ih = span(tape, iy1, iy2)?;
    let ih = tape.relu(ih);
    let inter = tape.mul(iw, ih)?;
    let sum = tape.add(area_a, area_b)?;
    let union = tape.sub(sum, inter)?;

    let cx1 = tape.minimum(x1, tx1)?;
    let cy1 = tape.minimum(y1, ty1)?;
    let cx2 = tape.maximum(x2, tx2)?;
    let cy2 = tape.maximum(y2, ty2)?;
    let cw = span(tape, cx1, cx2)?;
    let ch = span(tape, cy1, cy2)?;
    let enclosing = tape.mul(cw, ch)?;

    let (u, e) = (tape.value(union).data()[0].f64(), tape.value(enclosing).data()[0].f64());
    if u <= 0.0 || e <= 0.0 {
        return Err(Error::Numeric {
            op: "giou_loss",
            detail: format!("degenerate boxes: union {u}, enclosing {e}"),
        });
    }
    let iou = tape.div(inter, union)?;
    let gap = tape.sub(enclosing, union)?;
    let penalty = tape.div(gap, enclosing)?;
    let giou = tape.sub(iou, penalty)?;
    let loss = tape.rsub_scalar(1.0, giou);
    tape.reshape(loss, [1])
}

/// Per-sample supervision for the artifact branch.
#[derive(Clone, Debug)]
pub struct PixelTarget<'a> {
    /// Mask at segmentation resolution, row-major; `None` skips the pixel terms.
    pub mask: Option<&'a [f32]>,
    /// Present only for edited images.
    pub bbox: Option<BBox>,
}

/// Sum of all active terms with unit weights. Returns the differentiable
/// total and the breakdown read back from the tape.
pub fn total_loss<T: Float>(
    tape: &mut Tape<T>,
    answer_logits: Var,
    answer: usize,
    artifact: Option<(Var, Var, PixelTarget<'_>)>,
) -> Result<(Var, LossBreakdown)> {
    let ce = cross_entropy(tape, answer_logits, &[answer])?;
    let read = |tape: &Tape<T>, v: Var| tape.value(v).data()[0].f64() as f32;
    let mut bd = LossBreakdown {
        l_ce: read(tape, ce),
        ..Default::default()
    };
    let mut total = ce;
    if let Some((m_s, bbox, target)) = artifact {
        if let Some(mask) = target.mask {
            let focal = focal_loss(tape, m_s, mask, FOCAL_GAMMA)?;
            let dice = dice_loss(tape, m_s, mask)?;
            let pixel = tape.add(focal, dice)?;
            bd.l_focal = Some(read(tape, focal));
            bd.l_dice = Some(read(tape, dice));
            bd.l_pixel = Some(read(tape, pixel));
            total = tape.add(total, pixel)?;
        }
        if let Some(b) = target.bbox {
            let l1 = l1_box(tape, bbox, b)?;
            let giou = giou_loss(tape, bbox, b)?;
            let patch = tape.add(l1, giou)?;
            bd.l_l1 = Some(read(tape, l1));
            bd.l_giou = Some(read(tape, giou));
            bd.l_patch = Some(read(tape, patch));
            total = tape.add(total, patch)?;
        }
    }
    bd.total = read(tape, total);
    Ok((total, bd))
}
