//! Self-paced bidirectional feature contrast.
//!
//! Positives are mask-selected locations where the two weak views agree on
//! the predicted class; the aligned embeddings `z¹`, `z²` form the pair.
//! Negatives for a class-`c` anchor are the most confident mask-selected
//! strong-view locations predicted as some other class. The loss is the
//! InfoNCE-style
//!
//! ```text
//! L_f(a, p, N) = −log( e^{cos(a,p)/τ} / (e^{cos(a,p)/τ} + Σ_{n∈N} e^{cos(a,n)/τ}) )
//! ```
//!
//! evaluated in both anchor directions and averaged over positives.

use std::cmp::Ordering;

use crate::autodiff::{CustomOp, Tape, Tensor, Var, COSINE_EPS};
use crate::error::{ensure_arg, Error, Result};
use crate::grid::{BoolMask, Dims, LabelMap, Volume};
use crate::net::FeatureMap;

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure_arg!(a.len() == b.len(), "cosine of vectors with different lengths");
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::Argument("cosine similarity of a zero vector".into()));
    }
    Ok(ab / (aa.sqrt() * bb.sqrt()))
}

/// `−l₀ + log Σ_j e^{l_j}` over logits `[l₀, l₁, …]`, shifted by the max.
fn nce_from_logits(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln() + m;
    lse - logits[0]
}

/// Feature contrast loss of one anchor, its positive and a negative set.
pub fn feature_contrast_loss(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[&[f64]],
    tau: f64,
) -> Result<f64> {
    ensure_arg!(tau > 0.0 && tau.is_finite(), "temperature must be positive, got {tau}");
    if negatives.is_empty() {
        // numerator equals denominator
        cosine(anchor, positive)?;
        return Ok(0.0);
    }
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    logits.push(cosine(anchor, positive)? / tau);
    for n in negatives {
        logits.push(cosine(anchor, n)? / tau);
    }
    Ok(nce_from_logits(&logits).max(0.0))
}

/// One positive pair and the negatives assigned to it.
#[derive(Clone, Debug, PartialEq)]
pub struct PositivePair {
    /// Linear index on the down-sampled grid.
    pub location: usize,
    pub class: u8,
    pub z_w1: Vec<f64>,
    pub z_w2: Vec<f64>,
    /// Indices into [`ContrastBatch::negatives`].
    pub negatives: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NegativeSample {
    pub location: usize,
    pub class: u8,
    pub confidence: f64,
    pub z: Vec<f64>,
}

/// Mined contrastive samples with their temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastBatch {
    pub positives: Vec<PositivePair>,
    pub negatives: Vec<NegativeSample>,
    pub tau: f64,
}

/// Mining result as grid indices only.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MinedPairs {
    /// `(location, class)` of each positive.
    pub positives: Vec<(usize, u8)>,
    /// Negative locations per class, most confident first.
    pub negatives_by_class: Vec<Vec<usize>>,
}

impl MinedPairs {
    pub fn negatives_for(&self, class: u8) -> &[usize] {
        &self.negatives_by_class[class as usize]
    }
}

/// Inputs of positive/negative mining, all on the down-sampled grid.
pub struct MiningInputs<'a> {
    pub preds_w1: &'a LabelMap,
    pub preds_w2: &'a LabelMap,
    pub preds_sn: &'a LabelMap,
    pub mask: &'a BoolMask,
    pub conf_sn: &'a Volume,
    pub k_neg: usize,
}

pub fn mine_indices(inp: &MiningInputs<'_>) -> Result<MinedPairs> {
    let dims: Dims = inp.mask.dims();
    for (name, d) in [
        ("preds_w1", inp.preds_w1.dims()),
        ("preds_w2", inp.preds_w2.dims()),
        ("preds_sn", inp.preds_sn.dims()),
        ("conf_sn", inp.conf_sn.dims()),
    ] {
        ensure_arg!(d == dims, "{name} grid {d} does not match mask grid {dims}");
    }
    let classes = inp.preds_w1.classes();
    ensure_arg!(
        inp.preds_w2.classes() == classes && inp.preds_sn.classes() == classes,
        "prediction maps disagree on class count"
    );
    let (w1, w2, sn) = (inp.preds_w1.labels(), inp.preds_w2.labels(), inp.preds_sn.labels());
    let conf = inp.conf_sn.values();

    let positives: Vec<(usize, u8)> = (0..dims.len())
        .filter(|&i| inp.mask.get(i) && w1[i] == w2[i])
        .map(|i| (i, w1[i]))
        .collect();

    let mut present = vec![false; classes];
    for &(_, c) in &positives {
        present[c as usize] = true;
    }
    let negatives_by_class = (0..classes)
        .map(|c| {
            if !present[c] || inp.k_neg == 0 {
                return Vec::new();
            }
            let mut cands: Vec<usize> = (0..dims.len())
                .filter(|&i| inp.mask.get(i) && sn[i] as usize != c)
                .collect();
            let by_conf = |a: &usize, b: &usize| -> Ordering {
                conf[*b].total_cmp(&conf[*a]).then(a.cmp(b))
            };
            if cands.len() > inp.k_neg {
                cands.select_nth_unstable_by(inp.k_neg - 1, by_conf);
                cands.truncate(inp.k_neg);
            }
            cands.sort_by(by_conf);
            cands
        })
        .collect();

    Ok(MinedPairs {
        positives,
        negatives_by_class,
    })
}

/// Mines positives and negatives and gathers their embeddings.
pub fn mine_pairs(
    z_w1: &FeatureMap,
    z_w2: &FeatureMap,
    z_sn: &FeatureMap,
    inputs: &MiningInputs<'_>,
    tau: f64,
) -> Result<ContrastBatch> {
    let dims = inputs.mask.dims();
    for z in [z_w1, z_w2, z_sn] {
        ensure_arg!(z.dims() == dims, "feature grid {} does not match mask grid {dims}", z.dims());
    }
    ensure_arg!(
        z_w1.embed_dim() == z_w2.embed_dim() && z_w1.embed_dim() == z_sn.embed_dim(),
        "feature maps differ in embedding width"
    );
    let mined = mine_indices(inputs)?;
    let mut negatives = Vec::new();
    let mut slot_of = std::collections::HashMap::new();
    let mut positives = Vec::with_capacity(mined.positives.len());
    for &(loc, class) in &mined.positives {
        let negs = mined
            .negatives_for(class)
            .iter()
            .map(|&nl| {
                *slot_of.entry(nl).or_insert_with(|| {
                    negatives.push(NegativeSample {
                        location: nl,
                        class: inputs.preds_sn.labels()[nl],
                        confidence: inputs.conf_sn.values()[nl],
                        z: z_sn.vector(nl),
                    });
                    negatives.len() - 1
                })
            })
            .collect();
        positives.push(PositivePair {
            location: loc,
            class,
            z_w1: z_w1.vector(loc),
            z_w2: z_w2.vector(loc),
            negatives: negs,
        });
    }
    Ok(ContrastBatch {
        positives,
        negatives,
        tau,
    })
}

/// Mean over positives of `L_f(z¹, z², N) + L_f(z², z¹, N)`; 0 without positives.
pub fn bidirectional_loss(batch: &ContrastBatch) -> Result<f64> {
    if batch.positives.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for p in &batch.positives {
        let negs: Vec<&[f64]> = p.negatives.iter().map(|&j| batch.negatives[j].z.as_slice()).collect();
        // summed per pair so swapping the views cannot change the rounding
        let forward = feature_contrast_loss(&p.z_w1, &p.z_w2, &negs, batch.tau)?;
        let backward = feature_contrast_loss(&p.z_w2, &p.z_w1, &negs, batch.tau)?;
        total += forward + backward;
    }
    Ok(total / batch.positives.len() as f64)
}

/// Point-major copy of a `[F, n]` feature buffer with every vector divided by
/// `max(|v|, COSINE_EPS)`, plus those clamped norms.
struct Units {
    f: usize,
    unit: Vec<f64>,
    norm: Vec<f64>,
}

impl Units {
    fn new(data: &[f64], f: usize) -> Units {
        let n = data.len() / f;
        let mut unit = vec![0.0; data.len()];
        for c in 0..f {
            for (i, &v) in data[c * n..(c + 1) * n].iter().enumerate() {
                unit[i * f + c] = v;
            }
        }
        let norm: Vec<f64> = unit
            .chunks_exact(f)
            .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        for (v, &nv) in unit.chunks_exact_mut(f).zip(&norm) {
            let inv = 1.0 / nv.max(COSINE_EPS);
            v.iter_mut().for_each(|x| *x *= inv);
        }
        Units { f, unit, norm }
    }

    fn at(&self, i: usize) -> &[f64] {
        &self.unit[i * self.f..(i + 1) * self.f]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Point-major gradient back to the channel-major `[F, n]` layout.
fn to_channel_major(g: &[f64], f: usize) -> Vec<f64> {
    let n = g.len() / f;
    let mut out = vec![0.0; g.len()];
    for (i, v) in g.chunks_exact(f).enumerate() {
        for (c, &x) in v.iter().enumerate() {
            out[c * n + i] = x;
        }
    }
    out
}

struct ContrastOp {
    mined: MinedPairs,
    tau: f64,
}

impl ContrastOp {
    /// Value and, optionally, gradients w.r.t. (w1, w2, sn).
    fn evaluate(&self, w1: &[f64], w2: &[f64], sn: &[f64], f: usize, want_grad: bool) -> (f64, [Vec<f64>; 3]) {
        let count = self.mined.positives.len();
        if count == 0 {
            let empty = if want_grad {
                [vec![0.0; w1.len()], vec![0.0; w2.len()], vec![0.0; sn.len()]]
            } else {
                [Vec::new(), Vec::new(), Vec::new()]
            };
            return (0.0, empty);
        }
        let maps = [Units::new(w1, f), Units::new(w2, f), Units::new(sn, f)];
        let mut grads: [Vec<f64>; 3] = if want_grad {
            [vec![0.0; w1.len()], vec![0.0; w2.len()], vec![0.0; sn.len()]]
        } else {
            [Vec::new(), Vec::new(), Vec::new()]
        };
        let inv = 1.0 / count as f64;
        let mut total = 0.0;
        let mut cosines = Vec::new();
        let mut weights = Vec::new();
        // ∂cos(x, y)/∂x = (ŷ − cos·x̂) / |x|. Strong-view gradients are
        // gathered as Σ d·x̂ and Σ d·cos per location and resolved at the end.
        let n_sn = sn.len() / f;
        let mut sn_acc = if want_grad { vec![0.0; sn.len()] } else { Vec::new() };
        let mut sn_cos = if want_grad { vec![0.0; n_sn] } else { Vec::new() };
        let mut mix = vec![0.0; f];
        for &(loc, class) in &self.mined.positives {
            let negs = self.mined.negatives_for(class);
            if negs.is_empty() {
                continue;
            }
            let pos_cos = dot(maps[0].at(loc), maps[1].at(loc));
            let mut pair = 0.0;
            // direction 0: anchor w1, positive w2; direction 1: swapped.
            for (a, p) in [(0usize, 1usize), (1, 0)] {
                cosines.clear();
                cosines.push(pos_cos);
                let anchor = maps[a].at(loc);
                cosines.extend(negs.iter().map(|&j| dot(anchor, maps[2].at(j))));
                let m = cosines.iter().copied().fold(f64::NEG_INFINITY, f64::max) / self.tau;
                weights.clear();
                weights.extend(cosines.iter().map(|c| (c / self.tau - m).exp()));
                let z: f64 = weights.iter().sum();
                pair += z.ln() + m - pos_cos / self.tau;
                if !want_grad {
                    continue;
                }
                let scale = inv / self.tau;
                let d0 = (weights[0] / z - 1.0) * scale;
                let positive = maps[p].at(loc);
                let mut dcos = d0 * pos_cos;
                mix.iter_mut().zip(positive).for_each(|(m, &v)| *m = d0 * v);
                for ((&j, &cos), &e) in negs.iter().zip(&cosines[1..]).zip(&weights[1..]) {
                    let d = e / z * scale;
                    dcos += d * cos;
                    mix.iter_mut().zip(maps[2].at(j)).for_each(|(m, &v)| *m += d * v);
                    sn_cos[j] += d * cos;
                    sn_acc[j * f..(j + 1) * f]
                        .iter_mut()
                        .zip(anchor)
                        .for_each(|(g, &v)| *g += d * v);
                }
                let na = maps[a].norm[loc];
                if na > COSINE_EPS {
                    let ga = &mut grads[a][loc * f..(loc + 1) * f];
                    for ((g, &mv), &av) in ga.iter_mut().zip(&mix).zip(anchor) {
                        *g += (mv - dcos * av) / na;
                    }
                }
                let np = maps[p].norm[loc];
                if np > COSINE_EPS {
                    let gp = &mut grads[p][loc * f..(loc + 1) * f];
                    for ((g, &av), &pv) in gp.iter_mut().zip(anchor).zip(positive) {
                        *g += d0 * (av - pos_cos * pv) / np;
                    }
                }
            }
            total += pair;
        }
        if want_grad {
            for j in 0..n_sn {
                let nj = maps[2].norm[j];
                if nj <= COSINE_EPS {
                    continue;
                }
                let g = &mut grads[2][j * f..(j + 1) * f];
                for ((g, &acc), &u) in g.iter_mut().zip(&sn_acc[j * f..(j + 1) * f]).zip(maps[2].at(j)) {
                    *g = (acc - sn_cos[j] * u) / nj;
                }
            }
            grads = grads.map(|g| to_channel_major(&g, f));
        }
        (total * inv, grads)
    }
}

impl CustomOp for ContrastOp {
    fn name(&self) -> &'static str {
        "bidirectional_contrast"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, upstream: &[f64]) -> Vec<Vec<f64>> {
        let f = inputs[0].shape()[0];
        let (_, grads) = self.evaluate(inputs[0].data(), inputs[1].data(), inputs[2].data(), f, true);
        grads
            .into_iter()
            .map(|g| g.into_iter().map(|v| v * upstream[0]).collect())
            .collect()
    }
}

/// Records the bidirectional loss over `[F, h, w, d]` feature nodes.
pub fn bidirectional_loss_on_tape(
    tape: &mut Tape,
    z_w1: Var,
    z_w2: Var,
    z_sn: Var,
    mined: MinedPairs,
    tau: f64,
) -> Result<Var> {
    ensure_arg!(tau > 0.0 && tau.is_finite(), "temperature must be positive, got {tau}");
    let shape = tape.value(z_w1).shape().to_vec();
    ensure_arg!(
        tape.value(z_w2).shape() == shape.as_slice() && tape.value(z_sn).shape() == shape.as_slice(),
        "feature nodes differ in shape"
    );
    let f = shape[0];
    let op = ContrastOp { mined, tau };
    let (value, _) = op.evaluate(
        tape.value(z_w1).data(),
        tape.value(z_w2).data(),
        tape.value(z_sn).data(),
        f,
        false,
    );
    Ok(tape.custom(&[z_w1, z_w2, z_sn], Box::new(op), Tensor::scalar(value)))
}
