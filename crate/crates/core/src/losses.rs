//! Loss terms and their composition.
//!
//! Stop-gradient placement:
//! - the unsupervised dice term compares guided maps against a detached copy
//!   of the backbone's unlabeled prediction;
//! - the consistency term compares guided maps against detached SSPA maps of
//!   the unlabeled stream.

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, IclError, Result};
use crate::tensor::LabelMap;

/// Weights of the unsupervised terms: `α` for the guided-dice term, `β` for
/// consistency.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha >= 0.0 && beta >= 0.0) {
            return Err(IclError::Config(format!(
                "loss weights must be non-negative, got α={alpha} β={beta}"
            )));
        }
        Ok(Self { alpha, beta })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 50.0,
        }
    }
}

/// Scalar values of one step's loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub seg: f64,
    pub spa: f64,
    pub usc: f64,
    pub con: f64,
    pub total: f64,
}

impl LossReport {
    /// First non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<(&'static str, f64)> {
        [
            ("L_seg", self.seg),
            ("L_spa", self.spa),
            ("L_usc", self.usc),
            ("L_con", self.con),
            ("L_total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
    }
}

/// Class-mean soft Dice loss on `[Z×h×w]` probability maps.
pub fn soft_dice(tape: &mut Tape, probs: Var, target: Var) -> Result<Var> {
    tape.soft_dice(probs, target)
}

/// Pixel-mean cross-entropy of `[Z×h×w]` logits against labels.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &LabelMap) -> Result<Var> {
    let s = tape.shape(logits);
    if s.len() != 3 || s[1] != labels.h || s[2] != labels.w {
        return Err(dim_err(
            "cross_entropy",
            format!("logits {s:?} against a {}×{} label map", labels.h, labels.w),
        ));
    }
    tape.cross_entropy(logits, &labels.data)
}

/// `dice(softmax(logits), onehot(labels)) + ce(logits, labels)` at the
/// labels' resolution; `logits` must already match it.
fn dice_plus_ce(tape: &mut Tape, logits: Var, labels: &LabelMap) -> Result<Var> {
    let classes = tape.shape(logits)[0];
    let probs = tape.softmax(logits, 0)?;
    let target = tape.constant(labels.one_hot(classes)?);
    let dice = soft_dice(tape, probs, target)?;
    let ce = cross_entropy(tape, logits, labels)?;
    tape.add(dice, ce)
}

fn upsample_to(tape: &mut Tape, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = tape.shape(x);
    if s[1] == h && s[2] == w {
        return Ok(x);
    }
    tape.bilinear_upsample(x, h, w)
}

/// Supervised segmentation loss on the backbone's labeled prediction.
pub fn loss_seg(tape: &mut Tape, logits: Var, labels: &LabelMap) -> Result<Var> {
    dice_plus_ce(tape, logits, labels)
}

/// Mean over scales of dice + cross-entropy of the upsampled SSPA maps.
pub fn loss_spa(tape: &mut Tape, seg_maps: &[Var], labels: &LabelMap) -> Result<Var> {
    let terms = seg_maps
        .iter()
        .map(|&m| {
            let up = upsample_to(tape, m, labels.h, labels.w)?;
            dice_plus_ce(tape, up, labels)
        })
        .collect::<Result<Vec<_>>>()?;
    tape.average(&terms)
}

/// Mean over scales of `dice(softmax(up(G_λ)), softmax(p^u))` with `p^u`
/// detached.
pub fn loss_usc(tape: &mut Tape, guided: &[Var], prediction: Var) -> Result<Var> {
    let p = tape.detach(prediction);
    let target = tape.softmax(p, 0)?;
    let (h, w) = (tape.shape(p)[1], tape.shape(p)[2]);
    let terms = guided
        .iter()
        .map(|&g| {
            let up = upsample_to(tape, g, h, w)?;
            let probs = tape.softmax(up, 0)?;
            soft_dice(tape, probs, target)
        })
        .collect::<Result<Vec<_>>>()?;
    tape.average(&terms)
}

/// Mean over scales of `mean((softmax(G_λ) − softmax(M_λ))²)` at native
/// resolution with `M_λ` detached.
pub fn loss_con(tape: &mut Tape, guided: &[Var], sspa_maps: &[Var]) -> Result<Var> {
    if guided.len() != sspa_maps.len() {
        return Err(dim_err(
            "loss_con",
            format!(
                "{} guided maps against {} SSPA maps",
                guided.len(),
                sspa_maps.len()
            ),
        ));
    }
    let terms = guided
        .iter()
        .zip(sspa_maps)
        .map(|(&g, &m)| {
            let m = tape.detach(m);
            let pg = tape.softmax(g, 0)?;
            let pm = tape.softmax(m, 0)?;
            let diff = tape.sub(pg, pm)?;
            let sq = tape.mul(diff, diff)?;
            Ok(tape.mean(sq))
        })
        .collect::<Result<Vec<_>>>()?;
    tape.average(&terms)
}

/// Scalar loss handles of one step. Absent terms count as zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub seg: Option<Var>,
    pub spa: Option<Var>,
    pub usc: Option<Var>,
    pub con: Option<Var>,
}

/// `L_total = L_seg + L_spa + α·L_usc + β·L_con`.
pub fn loss_total(
    tape: &mut Tape,
    terms: &LossTerms,
    weights: LossWeights,
) -> Result<(Var, LossReport)> {
    let weighted = [
        (terms.seg, 1.0),
        (terms.spa, 1.0),
        (terms.usc, weights.alpha),
        (terms.con, weights.beta),
    ];
    let mut total: Option<Var> = None;
    for (term, w) in weighted {
        let Some(v) = term else { continue };
        let scaled = if w == 1.0 { v } else { tape.scale(v, w) };
        total = Some(match total {
            Some(acc) => tape.add(acc, scaled)?,
            None => scaled,
        });
    }
    let total =
        total.ok_or_else(|| IclError::Argument("loss_total needs at least one term".into()))?;
    let value = |t: &Tape, v: Option<Var>| v.map_or(0.0, |v| t.value(v).item());
    let report = LossReport {
        seg: value(tape, terms.seg),
        spa: value(tape, terms.spa),
        usc: value(tape, terms.usc),
        con: value(tape, terms.con),
        total: tape.value(total).item(),
    };
    Ok((total, report))
}
