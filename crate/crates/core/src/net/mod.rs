//! The segmentation network: a two-level encoder–decoder with one dropout
//! site in front of the segmentation head and a projection head on the
//! half-resolution bottleneck.
//!
//! ```text
//! image ─ conv3³ ─ relu ─┬─ conv2³/2 ─ relu ─ conv3³ ─ relu ─┬─ proj 1³ ──> features (H/2)
//!                        │                                   │
//!                        └──────────── + <─ relu ─ conv1³ ─ up×2
//!                                      │
//!                                   dropout ─ seg 1³ ─ softmax ──> probabilities (H)
//! ```

mod checkpoint;
mod optim;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{ema_update, Sgd};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, Tape, Tensor, Var};
use crate::error::{ensure_arg, Result};
use crate::grid::{Dims, ProbMap, Volume};
use crate::rng::rng_from;

/// Layer widths and the dropout rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub in_channels: usize,
    /// Width of the full-resolution layers.
    pub base_channels: usize,
    /// Width of the half-resolution layers.
    pub deep_channels: usize,
    pub classes: usize,
    /// Projection-head output width.
    pub embed_dim: usize,
    pub dropout: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_channels: 4,
            deep_channels: 8,
            classes: 2,
            embed_dim: 16,
            dropout: 0.2,
        }
    }
}

/// Index of each parameter tensor inside [`ModelParams`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(usize)]
pub enum Layer {
    Enc1W = 0,
    Enc1B,
    DownW,
    DownB,
    Enc2W,
    Enc2B,
    UpW,
    UpB,
    SegW,
    SegB,
    ProjW,
    ProjB,
}

pub const PARAM_COUNT: usize = 12;

/// Initial foreground probability encoded in the segmentation-head bias.
pub const FOREGROUND_PRIOR: f64 = 0.1;

const ENC: ConvGeom = ConvGeom::new(3, 1, 1);
const DOWN: ConvGeom = ConvGeom::new(2, 2, 0);
const POINT: ConvGeom = ConvGeom::new(1, 1, 0);

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        ensure_arg!(self.in_channels >= 1, "need at least one input channel");
        ensure_arg!(
            self.base_channels >= 1 && self.deep_channels >= 1,
            "layer widths must be positive"
        );
        ensure_arg!(self.classes >= 2, "need at least two classes");
        ensure_arg!(self.embed_dim >= 1, "embedding width must be positive");
        ensure_arg!(
            (0.0..1.0).contains(&self.dropout),
            "dropout rate must lie in [0, 1), got {}",
            self.dropout
        );
        Ok(())
    }

    /// Shapes of all parameter tensors in [`Layer`] order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let (ci, c1, c2) = (self.in_channels, self.base_channels, self.deep_channels);
        vec![
            vec![c1, ci, 3, 3, 3],
            vec![c1],
            vec![c2, c1, 2, 2, 2],
            vec![c2],
            vec![c2, c2, 3, 3, 3],
            vec![c2],
            vec![c1, c2, 1, 1, 1],
            vec![c1],
            vec![self.classes, c1, 1, 1, 1],
            vec![self.classes],
            vec![self.embed_dim, c2, 1, 1, 1],
            vec![self.embed_dim],
        ]
    }
}

/// All trainable tensors of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn zeros(arch: Architecture) -> Self {
        Self {
            arch,
            tensors: arch.param_shapes().into_iter().map(Tensor::zeros).collect(),
        }
    }

    /// Uniform initialization in `±1/sqrt(fan_in)` for weights and biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng_from(seed);
        let shapes = arch.param_shapes();
        let mut tensors = Vec::with_capacity(shapes.len());
        for pair in shapes.chunks(2) {
            let wshape = &pair[0];
            let fan_in: usize = wshape[1..].iter().product();
            let bound = 1.0 / (fan_in as f64).sqrt();
            for shape in pair {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                tensors.push(Tensor::new(shape.clone(), data)?);
            }
        }
        // start the segmentation head at a background-heavy prior
        let prior = FOREGROUND_PRIOR;
        let seg_b = &mut tensors[Layer::SegB as usize];
        let mut b = vec![(prior / (arch.classes - 1) as f64).ln(); arch.classes];
        b[0] = (1.0 - prior).ln();
        *seg_b = Tensor::new(vec![arch.classes], b)?;
        Ok(Self { arch, tensors })
    }

    pub fn from_tensors(arch: Architecture, tensors: Vec<Tensor>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.param_shapes();
        ensure_arg!(
            tensors.len() == shapes.len(),
            "expected {} parameter tensors, got {}",
            shapes.len(),
            tensors.len()
        );
        for (t, s) in tensors.iter().zip(&shapes) {
            ensure_arg!(t.shape() == s.as_slice(), "tensor shape {:?} != {s:?}", t.shape());
            ensure_arg!(t.data().iter().all(|v| v.is_finite()), "non-finite parameter");
        }
        Ok(Self { arch, tensors })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensor(&self, layer: Layer) -> &Tensor {
        &self.tensors[layer as usize]
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.arch == other.arch
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data().iter().all(|v| v.is_finite()))
    }

    /// Adds every parameter to `tape` as a leaf.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        ParamVars(self.tensors.iter().map(|t| tape.leaf(t.clone())).collect())
    }

    /// Flat view of all scalars in [`Layer`] order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Copy with all scalars replaced from a flat buffer.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        ensure_arg!(flat.len() == self.num_scalars(), "flat buffer length mismatch");
        let mut out = self.clone();
        let mut off = 0;
        for t in out.tensors.iter_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(out)
    }
}

/// Tape handles for a registered [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn get(&self, layer: Layer) -> Var {
        self.0[layer as usize]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Per-location embeddings from the projection head, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    dims: Dims,
    embed_dim: usize,
    vectors: Vec<f64>,
}

impl FeatureMap {
    pub fn new(dims: Dims, embed_dim: usize, vectors: Vec<f64>) -> Result<Self> {
        ensure_arg!(embed_dim >= 1, "embedding width must be positive");
        ensure_arg!(
            vectors.len() == dims.len() * embed_dim,
            "feature map {dims}x{embed_dim} needs {} values",
            dims.len() * embed_dim
        );
        ensure_arg!(vectors.iter().all(|v| v.is_finite()), "non-finite feature");
        Ok(Self {
            dims,
            embed_dim,
            vectors,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn raw(&self) -> &[f64] {
        &self.vectors
    }

    /// Embedding at one location.
    pub fn vector(&self, location: usize) -> Vec<f64> {
        let n = self.dims.len();
        (0..self.embed_dim).map(|c| self.vectors[c * n + location]).collect()
    }
}

/// Which heads a forward pass evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Heads {
    Both,
    Segmentation,
    /// Encoder and projection head only; skips the decoder.
    Features,
}

/// Tape handles produced by [`forward_on_tape`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub probs: Option<Var>,
    pub features: Option<Var>,
    /// Decoder output ahead of the dropout site.
    pub decoder: Option<Var>,
}

/// Inverted-dropout pattern: each entry is 0 with probability `rate`,
/// otherwise `1/(1-rate)`.
pub fn dropout_pattern(len: usize, rate: f64, seed: u64) -> Vec<f64> {
    if rate == 0.0 {
        return vec![1.0; len];
    }
    let keep = 1.0 / (1.0 - rate);
    let mut rng = rng_from(seed);
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

pub fn image_tensor(image: &Volume) -> Tensor {
    let d = image.dims();
    Tensor::new(vec![1, d.h, d.w, d.d], image.values().to_vec()).expect("image shape")
}

/// Records one forward pass. `dropout_seed = None` disables dropout.
pub fn forward_on_tape(
    tape: &mut Tape,
    arch: &Architecture,
    params: &ParamVars,
    image: &Volume,
    dropout_seed: Option<u64>,
    heads: Heads,
) -> Result<ForwardVars> {
    let dims = image.dims();
    ensure_arg!(
        dims.h.is_multiple_of(2) && dims.w.is_multiple_of(2) && dims.d.is_multiple_of(2) && !dims.is_empty(),
        "image dims {dims} must be even and nonzero"
    );
    ensure_arg!(arch.in_channels == 1, "images carry a single channel");
    let x = tape.constant(image_tensor(image));
    let e1 = tape.conv3d(x, params.get(Layer::Enc1W), params.get(Layer::Enc1B), ENC)?;
    let e1 = tape.relu(e1);
    let dn = tape.conv3d(e1, params.get(Layer::DownW), params.get(Layer::DownB), DOWN)?;
    let dn = tape.relu(dn);
    let e2 = tape.conv3d(dn, params.get(Layer::Enc2W), params.get(Layer::Enc2B), ENC)?;
    let e2 = tape.relu(e2);

    let features = match heads {
        Heads::Both | Heads::Features => Some(tape.conv3d(
            e2,
            params.get(Layer::ProjW),
            params.get(Layer::ProjB),
            POINT,
        )?),
        Heads::Segmentation => None,
    };
    if heads == Heads::Features {
        return Ok(ForwardVars {
            probs: None,
            features,
            decoder: None,
        });
    }

    let up = tape.upsample2(e2)?;
    let up = tape.conv3d(up, params.get(Layer::UpW), params.get(Layer::UpB), POINT)?;
    let up = tape.relu(up);
    let decoder = tape.add(up, e1)?;
    let probs = seg_head_on_tape(tape, arch, params, decoder, dropout_seed)?;
    Ok(ForwardVars {
        probs: Some(probs),
        features,
        decoder: Some(decoder),
    })
}

fn seg_head_on_tape(
    tape: &mut Tape,
    arch: &Architecture,
    params: &ParamVars,
    decoder: Var,
    dropout_seed: Option<u64>,
) -> Result<Var> {
    let x = match dropout_seed {
        Some(seed) if arch.dropout > 0.0 => {
            let pattern = dropout_pattern(tape.value(decoder).len(), arch.dropout, seed);
            tape.dropout(decoder, pattern)?
        }
        _ => decoder,
    };
    let logits = tape.conv3d(x, params.get(Layer::SegW), params.get(Layer::SegB), POINT)?;
    tape.softmax(logits)
}

pub(crate) fn probs_from_tensor(t: &Tensor, dims: Dims, classes: usize) -> Result<ProbMap> {
    ProbMap::new(dims, classes, t.data().to_vec())
}

pub(crate) fn features_from_tensor(t: &Tensor) -> Result<FeatureMap> {
    let s = t.shape();
    FeatureMap::new(Dims::new(s[1], s[2], s[3]), s[0], t.data().to_vec())
}

/// One forward pass outside of training. Identical inputs give identical
/// outputs; with `dropout_on = false` the seed is ignored.
pub fn forward(
    params: &ModelParams,
    image: &Volume,
    dropout_on: bool,
    seed: u64,
) -> Result<(ProbMap, FeatureMap)> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let out = forward_on_tape(
        &mut tape,
        &params.arch,
        &vars,
        image,
        dropout_on.then_some(seed),
        Heads::Both,
    )?;
    let probs = probs_from_tensor(
        tape.value(out.probs.expect("segmentation head")),
        image.dims(),
        params.arch.classes,
    )?;
    let feats = features_from_tensor(tape.value(out.features.expect("projection head")))?;
    Ok((probs, feats))
}

/// Deterministic prediction (dropout off).
pub fn predict(params: &ModelParams, image: &Volume) -> Result<ProbMap> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let out = forward_on_tape(&mut tape, &params.arch, &vars, image, None, Heads::Segmentation)?;
    probs_from_tensor(
        tape.value(out.probs.expect("segmentation head")),
        image.dims(),
        params.arch.classes,
    )
}

/// Decoder activations ahead of the dropout site, for repeated stochastic
/// head evaluations.
pub fn decoder_activations(params: &ModelParams, image: &Volume) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let out = forward_on_tape(&mut tape, &params.arch, &vars, image, None, Heads::Segmentation)?;
    Ok(tape.value(out.decoder.expect("decoder")).clone())
}

/// Dropout plus segmentation head on precomputed decoder activations. With
/// the same seed this reproduces [`forward`] exactly.
pub fn seg_head(params: &ModelParams, decoder: &Tensor, dropout_seed: Option<u64>) -> Result<ProbMap> {
    let s = decoder.shape();
    ensure_arg!(
        s.len() == 4 && s[0] == params.arch.base_channels,
        "decoder activations have shape {s:?}"
    );
    let mut tape = Tape::new();
    let x = tape.constant(decoder.clone());
    let sw = tape.leaf(params.tensor(Layer::SegW).clone());
    let sb = tape.leaf(params.tensor(Layer::SegB).clone());
    let x = match dropout_seed {
        Some(seed) if params.arch.dropout > 0.0 => {
            let pattern = dropout_pattern(decoder.len(), params.arch.dropout, seed);
            tape.dropout(x, pattern)?
        }
        _ => x,
    };
    let logits = tape.conv3d(x, sw, sb, POINT)?;
    let probs = tape.softmax(logits)?;
    probs_from_tensor(tape.value(probs), Dims::new(s[1], s[2], s[3]), params.arch.classes)
}
