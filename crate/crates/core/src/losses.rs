//! Segmentation objectives: soft Dice, cross-entropy, the supervised loss on
//! fused labels and the mask-gated unsupervised loss.
//!
//! Gating is a subset reduction: a gated loss equals the same loss computed
//! on the voxels where the mask is true, never a multiply-by-zero average
//! over the whole grid.

use crate::autodiff::{CustomOp, Tape, Tensor, Var};
use crate::error::{ensure_arg, Result};
use crate::grid::{ensure_same_dims, BoolMask, LabelMap, ProbMap, Volume};
use crate::uncertainty::Branch;

/// Smoothing term added to both numerator and denominator of soft Dice.
pub const DICE_EPS: f64 = 1e-5;
/// Probabilities are clamped to at least this before the logarithm.
pub const CE_CLAMP: f64 = 1e-7;

/// `1 − (2·Σ p·g + ε)/(Σ p + Σ g + ε)` for one channel.
pub fn soft_dice(pred: &[f64], target: &[f64]) -> Result<f64> {
    ensure_arg!(
        pred.len() == target.len(),
        "dice: {} predictions vs {} targets",
        pred.len(),
        target.len()
    );
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (p, g) in pred.iter().zip(target) {
        inter += p * g;
        sp += p;
        sg += g;
    }
    Ok(1.0 - (2.0 * inter + DICE_EPS) / (sp + sg + DICE_EPS))
}

/// Soft Dice of one probability channel against a binary target volume.
pub fn dice_loss(pred: &ProbMap, class: usize, target: &Volume) -> Result<f64> {
    ensure_same_dims(pred.dims(), target.dims(), "dice_loss")?;
    ensure_arg!(class < pred.classes(), "class {class} out of range");
    soft_dice(pred.channel(class), target.values())
}

fn gated_indices(n: usize, gate: Option<&[bool]>) -> Vec<usize> {
    match gate {
        Some(bits) => (0..n).filter(|&i| bits[i]).collect(),
        None => (0..n).collect(),
    }
}

/// Per-foreground-class sums (intersection, Σp, Σg) over the gated voxels.
fn dice_sums(
    probs: &[f64],
    n: usize,
    classes: usize,
    labels: &[u8],
    voxels: &[usize],
) -> Vec<(f64, f64, f64)> {
    (1..classes)
        .map(|c| {
            let ch = &probs[c * n..(c + 1) * n];
            let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
            for &i in voxels {
                let g = (labels[i] as usize == c) as u8 as f64;
                inter += ch[i] * g;
                sp += ch[i];
                sg += g;
            }
            (inter, sp, sg)
        })
        .collect()
}

fn multiclass_dice_raw(
    probs: &[f64],
    n: usize,
    classes: usize,
    labels: &[u8],
    gate: Option<&[bool]>,
) -> f64 {
    let voxels = gated_indices(n, gate);
    let sums = dice_sums(probs, n, classes, labels, &voxels);
    sums.iter()
        .map(|&(i, p, g)| 1.0 - (2.0 * i + DICE_EPS) / (p + g + DICE_EPS))
        .sum::<f64>()
        / (classes - 1) as f64
}

fn cross_entropy_raw(probs: &[f64], n: usize, labels: &[u8], gate: Option<&[bool]>) -> f64 {
    let voxels = gated_indices(n, gate);
    if voxels.is_empty() {
        return 0.0;
    }
    let total: f64 = voxels
        .iter()
        .map(|&i| -probs[labels[i] as usize * n + i].max(CE_CLAMP).ln())
        .sum();
    total / voxels.len() as f64
}

fn check_pair(probs: &ProbMap, target: &LabelMap, gate: Option<&BoolMask>) -> Result<()> {
    ensure_same_dims(probs.dims(), target.dims(), "loss target")?;
    ensure_arg!(
        probs.classes() == target.classes(),
        "prediction has {} classes, target {}",
        probs.classes(),
        target.classes()
    );
    if let Some(g) = gate {
        ensure_same_dims(probs.dims(), g.dims(), "loss gate")?;
    }
    Ok(())
}

/// Soft Dice averaged over foreground classes, restricted to `gate`.
pub fn multiclass_dice(probs: &ProbMap, target: &LabelMap, gate: Option<&BoolMask>) -> Result<f64> {
    check_pair(probs, target, gate)?;
    Ok(multiclass_dice_raw(
        probs.probs(),
        probs.dims().len(),
        probs.classes(),
        target.labels(),
        gate.map(BoolMask::bits),
    ))
}

/// Mean `−log p[target]` over gated voxels; an empty gate gives 0.
pub fn ce_loss(probs: &ProbMap, target: &LabelMap, gate: Option<&BoolMask>) -> Result<f64> {
    check_pair(probs, target, gate)?;
    Ok(cross_entropy_raw(
        probs.probs(),
        probs.dims().len(),
        target.labels(),
        gate.map(BoolMask::bits),
    ))
}

/// `L_Dice(Ŷ, Yᵗ) + L_CE(Ŷ, Yᵗ)`, ungated.
pub fn supervised_loss(student: &ProbMap, fused: &LabelMap) -> Result<f64> {
    Ok(multiclass_dice(student, fused, None)? + ce_loss(student, fused, None)?)
}

/// Dice + CE restricted to the self-paced mask; an empty mask gives 0.
pub fn unsupervised_loss(student: &ProbMap, pseudo: &LabelMap, mask: &BoolMask) -> Result<f64> {
    if mask.count() == 0 {
        check_pair(student, pseudo, Some(mask))?;
        return Ok(0.0);
    }
    Ok(multiclass_dice(student, pseudo, Some(mask))? + ce_loss(student, pseudo, Some(mask))?)
}

struct DiceOp {
    labels: Vec<u8>,
    gate: Option<Vec<bool>>,
    classes: usize,
}

impl CustomOp for DiceOp {
    fn name(&self) -> &'static str {
        "dice"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, upstream: &[f64]) -> Vec<Vec<f64>> {
        let probs = inputs[0].data();
        let n = probs.len() / self.classes;
        let voxels = gated_indices(n, self.gate.as_deref());
        let sums = dice_sums(probs, n, self.classes, &self.labels, &voxels);
        let scale = upstream[0] / (self.classes - 1) as f64;
        let mut g = vec![0.0; probs.len()];
        for (k, &(inter, sp, sg)) in sums.iter().enumerate() {
            let c = k + 1;
            let s = sp + sg + DICE_EPS;
            let num = 2.0 * inter + DICE_EPS;
            for &i in &voxels {
                let gi = (self.labels[i] as usize == c) as u8 as f64;
                g[c * n + i] = -scale * (2.0 * gi * s - num) / (s * s);
            }
        }
        vec![g]
    }
}

struct CrossEntropyOp {
    labels: Vec<u8>,
    gate: Option<Vec<bool>>,
    classes: usize,
}

impl CustomOp for CrossEntropyOp {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, upstream: &[f64]) -> Vec<Vec<f64>> {
        let probs = inputs[0].data();
        let n = probs.len() / self.classes;
        let voxels = gated_indices(n, self.gate.as_deref());
        let mut g = vec![0.0; probs.len()];
        if voxels.is_empty() {
            return vec![g];
        }
        let scale = upstream[0] / voxels.len() as f64;
        for &i in &voxels {
            let idx = self.labels[i] as usize * n + i;
            if probs[idx] > CE_CLAMP {
                g[idx] = -scale / probs[idx];
            }
        }
        vec![g]
    }
}

fn check_tape_pair(
    tape: &Tape,
    probs: Var,
    target: &LabelMap,
    gate: Option<&BoolMask>,
) -> Result<()> {
    let shape = tape.value(probs).shape();
    let d = target.dims();
    ensure_arg!(
        shape == [target.classes(), d.h, d.w, d.d],
        "probability node {shape:?} does not match target {d} with {} classes",
        target.classes()
    );
    if let Some(g) = gate {
        ensure_same_dims(d, g.dims(), "loss gate")?;
    }
    Ok(())
}

/// Records the gated multi-class soft Dice of a `[C, H, W, D]` probability node.
pub fn dice_on_tape(
    tape: &mut Tape,
    probs: Var,
    target: &LabelMap,
    gate: Option<&BoolMask>,
) -> Result<Var> {
    check_tape_pair(tape, probs, target, gate)?;
    let classes = target.classes();
    let value = multiclass_dice_raw(
        tape.value(probs).data(),
        target.dims().len(),
        classes,
        target.labels(),
        gate.map(BoolMask::bits),
    );
    let op = DiceOp {
        labels: target.labels().to_vec(),
        gate: gate.map(|g| g.bits().to_vec()),
        classes,
    };
    Ok(tape.custom(&[probs], Box::new(op), Tensor::scalar(value)))
}

/// Records the gated cross-entropy of a `[C, H, W, D]` probability node.
pub fn ce_on_tape(
    tape: &mut Tape,
    probs: Var,
    target: &LabelMap,
    gate: Option<&BoolMask>,
) -> Result<Var> {
    check_tape_pair(tape, probs, target, gate)?;
    let value = cross_entropy_raw(
        tape.value(probs).data(),
        target.dims().len(),
        target.labels(),
        gate.map(BoolMask::bits),
    );
    let op = CrossEntropyOp {
        labels: target.labels().to_vec(),
        gate: gate.map(|g| g.bits().to_vec()),
        classes: target.classes(),
    };
    Ok(tape.custom(&[probs], Box::new(op), Tensor::scalar(value)))
}

/// Dice + CE on the tape, optionally gated.
pub fn segmentation_loss_on_tape(
    tape: &mut Tape,
    probs: Var,
    target: &LabelMap,
    gate: Option<&BoolMask>,
) -> Result<Var> {
    let dice = dice_on_tape(tape, probs, target, gate)?;
    let ce = ce_on_tape(tape, probs, target, gate)?;
    tape.add(dice, ce)
}

/// Loss components and selection statistics of one training iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub t: usize,
    pub l_s: f64,
    pub l_u: f64,
    pub l_bf: f64,
    /// Weighted objective; equals `L_s + L_u + L_bf` at unit weights.
    pub l_total: f64,
    /// Number of voxels admitted by the self-paced mask.
    pub mask_count: usize,
    pub r_conf: f64,
    pub v: Option<f64>,
    pub lambda: f64,
    pub branch: Branch,
    pub lr: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "t,L_s,L_u,L_bf,L_total,R_conf,K,lambda,v,branch,lr";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.t,
            self.l_s,
            self.l_u,
            self.l_bf,
            self.l_total,
            self.r_conf,
            self.mask_count,
            self.lambda,
            self.v.map(|v| v.to_string()).unwrap_or_default(),
            self.branch,
            self.lr
        )
    }

    /// `L_s + L_u + L_bf` in that order.
    pub fn total_of(l_s: f64, l_u: f64, l_bf: f64) -> f64 {
        l_s + l_u + l_bf
    }
}
