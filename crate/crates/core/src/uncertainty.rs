//! Monte-Carlo-dropout uncertainty and self-paced voxel selection.
//!
//! The teacher runs `T` dropout-perturbed passes; the voxelwise mean
//! probability `U′` gives a predictive entropy `U = −Σ_c U′ ln U′`. A
//! schedule combining a warm-up ramp `ξ(t)`, a geometrically growing age
//! `λ = α·δᵗ` and the last unsupervised loss decides the confident ratio
//! `R_conf`, and the `⌊R_conf·H·W·D⌋` least uncertain voxels form the mask.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{ensure_arg, Error, Result};
use crate::grid::{BoolMask, Dims, ProbMap, Volume};
use crate::net::{decoder_activations, seg_head, ModelParams};
use crate::rng::derive_seed;

/// Predictive entropy per voxel, in nats.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMap {
    dims: Dims,
    classes: usize,
    values: Vec<f64>,
}

impl UncertaintyMap {
    pub fn new(dims: Dims, classes: usize, values: Vec<f64>) -> Result<Self> {
        ensure_arg!(values.len() == dims.len(), "uncertainty map length mismatch");
        let max = (classes as f64).ln();
        ensure_arg!(
            values.iter().all(|&v| (0.0..=max).contains(&v)),
            "entropy values must lie in [0, ln {classes}]"
        );
        Ok(Self {
            dims,
            classes,
            values,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_volume(&self) -> Volume {
        Volume::new(self.dims, self.values.clone()).expect("entropy is finite")
    }
}

/// `−Σ_c p ln p` per voxel with `0·ln 0 = 0`, clamped into `[0, ln C]`.
pub fn entropy_map(mean: &ProbMap) -> UncertaintyMap {
    let n = mean.dims().len();
    let c = mean.classes();
    let max = (c as f64).ln();
    let values = (0..n)
        .map(|i| {
            let h: f64 = (0..c)
                .map(|k| {
                    let p = mean.prob(i, k);
                    if p > 0.0 {
                        -p * p.ln()
                    } else {
                        0.0
                    }
                })
                .sum();
            h.clamp(0.0, max)
        })
        .collect();
    UncertaintyMap {
        dims: mean.dims(),
        classes: c,
        values,
    }
}

/// Mean of several probability maps over the same grid.
pub fn mean_probs(maps: &[ProbMap]) -> Result<ProbMap> {
    ensure_arg!(!maps.is_empty(), "need at least one probability map");
    let first = &maps[0];
    let mut acc = vec![0.0; first.probs().len()];
    for m in maps {
        ensure_arg!(
            m.dims() == first.dims() && m.classes() == first.classes(),
            "probability maps differ in shape"
        );
        acc.iter_mut().zip(m.probs()).for_each(|(a, p)| *a += p);
    }
    let inv = 1.0 / maps.len() as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    ProbMap::new(first.dims(), first.classes(), acc)
}

/// Seed of the `pass`-th dropout pass for a base seed.
pub fn mc_pass_seed(seed: u64, pass: usize) -> u64 {
    derive_seed(seed, &[0x6d63, pass as u64])
}

/// `T` dropout-on passes of `params` on `image`; returns the mean
/// probability map and its entropy. Passes share one trunk evaluation since
/// dropout only sits ahead of the segmentation head.
pub fn mc_uncertainty(
    params: &ModelParams,
    image: &Volume,
    passes: usize,
    seed: u64,
) -> Result<(ProbMap, UncertaintyMap)> {
    ensure_arg!(passes >= 1, "MC dropout needs at least one pass");
    let decoder = decoder_activations(params, image)?;
    mc_uncertainty_from_decoder(params, &decoder, passes, seed)
}

/// [`mc_uncertainty`] on precomputed decoder activations.
pub fn mc_uncertainty_from_decoder(
    params: &ModelParams,
    decoder: &Tensor,
    passes: usize,
    seed: u64,
) -> Result<(ProbMap, UncertaintyMap)> {
    ensure_arg!(passes >= 1, "MC dropout needs at least one pass");
    let maps = (0..passes)
        .map(|t| seg_head(params, decoder, Some(mc_pass_seed(seed, t))))
        .collect::<Result<Vec<_>>>()?;
    let mean = mean_probs(&maps)?;
    let u = entropy_map(&mean);
    Ok((mean, u))
}

/// Warm-up ramp `ξ(t) = min(0.1·exp(−5(1 − t/t_max)²), 1)`.
pub fn warmup_xi(t: usize, t_max: usize) -> Result<f64> {
    ensure_arg!(t_max > 0, "t_max must be positive");
    ensure_arg!(t <= t_max, "t = {t} beyond t_max = {t_max}");
    let r = 1.0 - t as f64 / t_max as f64;
    Ok((0.1 * (-5.0 * r * r).exp()).min(1.0))
}

/// Which side of the confident-ratio rule produced the mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    /// `L_u ≥ λ`: the ratio is capped by the warm factor.
    Warm,
    /// `L_u < λ`: the ratio is scaled by the self-paced weight `v`.
    Confident,
    /// Selection disabled; every voxel is admitted.
    Off,
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::Warm => "warm",
            Branch::Confident => "confident",
            Branch::Off => "off",
        })
    }
}

/// Scalar state of the self-paced schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleState {
    pub t: usize,
    pub t_max: usize,
    pub alpha: f64,
    pub delta: f64,
    pub lambda: f64,
    pub tau_sched: f64,
    /// Unsupervised loss of the previous iteration; `None` before the first.
    pub last_lu: Option<f64>,
    pub v: Option<f64>,
    /// Factor applied on the warm branch.
    pub warm_cap: f64,
}

impl ScheduleState {
    pub fn new(t_max: usize, alpha: f64, delta: f64, tau_sched: f64) -> Result<Self> {
        ensure_arg!(t_max > 0, "t_max must be positive");
        ensure_arg!(alpha > 0.0 && alpha.is_finite(), "alpha must be positive");
        ensure_arg!(delta > 0.0 && delta.is_finite(), "delta must be positive");
        ensure_arg!(tau_sched > 0.0 && tau_sched.is_finite(), "tau_sched must be positive");
        Ok(Self {
            t: 0,
            t_max,
            alpha,
            delta,
            lambda: alpha,
            tau_sched,
            last_lu: None,
            v: None,
            warm_cap: 0.1,
        })
    }

    /// `α·δᵗ`.
    pub fn lambda_at(&self, t: usize) -> f64 {
        self.alpha * self.delta.powf(t as f64)
    }

    /// `ξ(t)` with `t` clamped to `t_max`.
    pub fn xi(&self) -> f64 {
        warmup_xi(self.t.min(self.t_max), self.t_max).expect("t_max validated")
    }
}

/// One iteration older: `t ← t + 1`, `λ ← λ·δ`. λ is recomputed from the
/// closed form so long runs carry no accumulated rounding.
pub fn advance_age(state: &ScheduleState) -> ScheduleState {
    let mut next = state.clone();
    next.t += 1;
    next.lambda = next.lambda_at(next.t);
    next
}

/// Outcome of the confident-ratio rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConfidentRatio {
    pub r_conf: f64,
    /// Self-paced weight, only on the confident branch.
    pub v: Option<f64>,
    pub branch: Branch,
}

/// `R_conf = warm_cap·min(ξτ, 1)` when `L_u ≥ λ`, else `v·min(ξτ, 1)` with
/// `v = 1 − L_u/λ`.
pub fn confident_ratio(state: &ScheduleState, lu: f64) -> Result<ConfidentRatio> {
    if !(state.lambda > 0.0) || !state.lambda.is_finite() {
        return Err(Error::State(format!(
            "age parameter must be positive and finite, got {}",
            state.lambda
        )));
    }
    ensure_arg!(lu >= 0.0, "unsupervised loss must be non-negative, got {lu}");
    let ramp = (state.xi() * state.tau_sched).min(1.0);
    if lu >= state.lambda {
        Ok(ConfidentRatio {
            r_conf: state.warm_cap * ramp,
            v: None,
            branch: Branch::Warm,
        })
    } else {
        let v = 1.0 - lu / state.lambda;
        Ok(ConfidentRatio {
            r_conf: v * ramp,
            v: Some(v),
            branch: Branch::Confident,
        })
    }
}

/// `K = ⌊R_conf·N⌋`.
pub fn selection_count(r_conf: f64, voxels: usize) -> usize {
    ((r_conf * voxels as f64).floor() as usize).min(voxels)
}

/// Marks the `⌊R_conf·H·W·D⌋` voxels that come first in ascending
/// (entropy, linear index) order.
pub fn select_mask(u: &UncertaintyMap, r_conf: f64) -> Result<BoolMask> {
    ensure_arg!(
        (0.0..=1.0).contains(&r_conf),
        "confident ratio must lie in [0, 1], got {r_conf}"
    );
    let n = u.dims.len();
    let k = selection_count(r_conf, n);
    let mut bits = vec![false; n];
    if k == n {
        bits.fill(true);
    } else if k > 0 {
        let key = |a: &usize, b: &usize| -> Ordering {
            u.values[*a].total_cmp(&u.values[*b]).then(a.cmp(b))
        };
        let mut order: Vec<usize> = (0..n).collect();
        order.select_nth_unstable_by(k - 1, key);
        for &i in &order[..k] {
            bits[i] = true;
        }
    }
    Ok(BoolMask::from_bits(u.dims, bits))
}

pub const SCHEDULE_CSV_HEADER: &str = "t,xi,lambda,R_conf,v,K,branch";

/// Replays the schedule for `steps` iterations from `start` and renders one
/// CSV row per iteration. `lu(t)` is the unsupervised loss fed into step `t`
/// (the previous step's value); `None` keeps that step on the warm branch.
pub fn schedule_dump(
    start: &ScheduleState,
    steps: usize,
    voxels: usize,
    mut lu: impl FnMut(usize) -> Option<f64>,
) -> Result<String> {
    let mut state = start.clone();
    let mut out = format!("{SCHEDULE_CSV_HEADER}\n");
    for _ in 0..steps {
        let fed = lu(state.t);
        let ratio = confident_ratio(&state, fed.unwrap_or(f64::INFINITY))?;
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            state.t,
            state.xi(),
            state.lambda,
            ratio.r_conf,
            ratio.v.map(|v| v.to_string()).unwrap_or_default(),
            selection_count(ratio.r_conf, voxels),
            ratio.branch
        ));
        state.last_lu = fed;
        state.v = ratio.v;
        state = advance_age(&state);
    }
    Ok(out)
}
