//! Dense 3D grids: scalar volumes, class-probability maps, label maps and
//! boolean masks. All grids share the row-major linearization
//! `(h * W + w) * D + d`; multi-channel grids store one such plane per
//! channel, channel-major.

mod io;

pub use io::{read_grid, write_grid, GridFile, GRID_MAGIC};

use crate::error::{ensure_arg, Error, Result};

/// Extent of a grid along (height, width, depth).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub h: usize,
    pub w: usize,
    pub d: usize,
}

impl Dims {
    pub const fn new(h: usize, w: usize, d: usize) -> Self {
        Self { h, w, d }
    }

    pub const fn len(&self) -> usize {
        self.h * self.w * self.d
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub const fn index(&self, h: usize, w: usize, d: usize) -> usize {
        (h * self.w + w) * self.d + d
    }

    #[inline]
    pub const fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let d = idx % self.d;
        let hw = idx / self.d;
        (hw / self.w, hw % self.w, d)
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.h, self.w, self.d]
    }

    /// Dims after dividing each axis by the matching factor; errors unless
    /// every axis divides evenly.
    pub fn div(&self, factor: (usize, usize, usize)) -> Result<Dims> {
        let (fh, fw, fd) = factor;
        ensure_arg!(
            fh > 0 && fw > 0 && fd > 0,
            "down-sampling factors must be positive, got {factor:?}"
        );
        ensure_arg!(
            self.h.is_multiple_of(fh) && self.w.is_multiple_of(fw) && self.d.is_multiple_of(fd),
            "dims {}x{}x{} not divisible by {fh}x{fw}x{fd}",
            self.h,
            self.w,
            self.d
        );
        Ok(Dims::new(self.h / fh, self.w / fw, self.d / fd))
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.h, self.w, self.d)
    }
}

pub(crate) fn ensure_same_dims(a: Dims, b: Dims, what: &str) -> Result<()> {
    ensure_arg!(a == b, "{what}: dims {a} and {b} differ");
    Ok(())
}


/// Dense scalar grid. Images, uncertainty maps and weight maps all live here.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims,
    values: Vec<f64>,
}

impl Volume {
    pub fn new(dims: Dims, values: Vec<f64>) -> Result<Self> {
        ensure_arg!(
            values.len() == dims.len(),
            "volume {dims} needs {} values, got {}",
            dims.len(),
            values.len()
        );
        ensure_arg!(
            values.iter().all(|v| v.is_finite()),
            "volume values must be finite"
        );
        Ok(Self { dims, values })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            values: vec![0.0; dims.len()],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(dims.len());
        for h in 0..dims.h {
            for w in 0..dims.w {
                for d in 0..dims.d {
                    values.push(f(h, w, d));
                }
            }
        }
        Self::new(dims, values)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, h: usize, w: usize, d: usize) -> f64 {
        self.values[self.dims.index(h, w, d)]
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// (min, max) over all voxels.
    pub fn range(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// Per-voxel class probabilities, stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    dims: Dims,
    classes: usize,
    probs: Vec<f64>,
}

/// Tolerance on the per-voxel probability sum.
pub const PROB_SUM_TOL: f64 = 1e-5;

impl ProbMap {
    pub fn new(dims: Dims, classes: usize, probs: Vec<f64>) -> Result<Self> {
        ensure_arg!(classes >= 2, "a probability map needs at least 2 classes");
        ensure_arg!(
            probs.len() == dims.len() * classes,
            "prob map {dims}x{classes} needs {} values, got {}",
            dims.len() * classes,
            probs.len()
        );
        let n = dims.len();
        for i in 0..n {
            let mut sum = 0.0;
            for c in 0..classes {
                let p = probs[c * n + i];
                ensure_arg!(
                    p.is_finite() && (0.0..=1.0).contains(&p),
                    "probability {p} at voxel {i} class {c} outside [0, 1]"
                );
                sum += p;
            }
            ensure_arg!(
                (sum - 1.0).abs() <= PROB_SUM_TOL,
                "probabilities at voxel {i} sum to {sum}"
            );
        }
        Ok(Self {
            dims,
            classes,
            probs,
        })
    }

    pub fn uniform(dims: Dims, classes: usize) -> Self {
        Self {
            dims,
            classes,
            probs: vec![1.0 / classes as f64; dims.len() * classes],
        }
    }

    /// Builds a map from unnormalized per-voxel scores by dividing each
    /// voxel by its total.
    pub fn from_scores(dims: Dims, classes: usize, mut scores: Vec<f64>) -> Result<Self> {
        ensure_arg!(
            scores.len() == dims.len() * classes,
            "score map has wrong length"
        );
        let n = dims.len();
        for i in 0..n {
            let total: f64 = (0..classes).map(|c| scores[c * n + i]).sum();
            ensure_arg!(
                total > 0.0 && total.is_finite(),
                "scores at voxel {i} must have a positive finite sum"
            );
            for c in 0..classes {
                scores[c * n + i] /= total;
            }
        }
        Self::new(dims, classes, scores)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn channel(&self, class: usize) -> &[f64] {
        let n = self.dims.len();
        &self.probs[class * n..(class + 1) * n]
    }

    #[inline]
    pub fn prob(&self, voxel: usize, class: usize) -> f64 {
        self.probs[class * self.dims.len() + voxel]
    }

    /// Largest class probability at each voxel.
    pub fn max_prob(&self) -> Volume {
        let n = self.dims.len();
        let values = (0..n)
            .map(|i| {
                (0..self.classes)
                    .map(|c| self.probs[c * n + i])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        Volume {
            dims: self.dims,
            values,
        }
    }
}

/// Integer class id per voxel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    dims: Dims,
    classes: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(dims: Dims, classes: usize, labels: Vec<u8>) -> Result<Self> {
        ensure_arg!(
            (1..=256).contains(&classes),
            "label maps support 1..=256 classes, got {classes}"
        );
        ensure_arg!(
            labels.len() == dims.len(),
            "label map {dims} needs {} labels, got {}",
            dims.len(),
            labels.len()
        );
        ensure_arg!(
            labels.iter().all(|&l| (l as usize) < classes),
            "label outside [0, {classes})"
        );
        Ok(Self {
            dims,
            classes,
            labels,
        })
    }

    pub fn filled(dims: Dims, classes: usize, label: u8) -> Self {
        assert!((label as usize) < classes);
        Self {
            dims,
            classes,
            labels: vec![label; dims.len()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, h: usize, w: usize, d: usize) -> u8 {
        self.labels[self.dims.index(h, w, d)]
    }

    /// Voxels with a nonzero label.
    pub fn foreground(&self) -> BoolMask {
        BoolMask::from_bits(self.dims, self.labels.iter().map(|&l| l != 0).collect())
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            dims: self.dims,
            values: self.labels.iter().map(|&l| l as f64).collect(),
        }
    }

    /// Inverse of [`LabelMap::to_volume`]; values must be integral class ids.
    pub fn from_volume(volume: &Volume, classes: usize) -> Result<Self> {
        let labels = volume
            .values()
            .iter()
            .map(|&v| {
                if v.fract() == 0.0 && v >= 0.0 && (v as usize) < classes {
                    Ok(v as u8)
                } else {
                    Err(Error::Argument(format!("{v} is not a class id below {classes}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(volume.dims(), classes, labels)
    }
}

/// One boolean per voxel, with a cached population count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoolMask {
    dims: Dims,
    bits: Vec<bool>,
    count: usize,
}

impl BoolMask {
    pub fn from_bits(dims: Dims, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), dims.len(), "mask length must match dims");
        let count = bits.iter().filter(|&&b| b).count();
        Self { dims, bits, count }
    }

    pub fn filled(dims: Dims, value: bool) -> Self {
        Self {
            dims,
            bits: vec![value; dims.len()],
            count: if value { dims.len() } else { 0 },
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.count
    }

    #[inline]
    pub fn get(&self, idx: usize) -> bool {
        self.bits[idx]
    }

    pub fn is_subset_of(&self, other: &BoolMask) -> bool {
        self.dims == other.dims && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

/// Block-majority down-sampling. An output voxel is true when at least half
/// of its source block is true (exact ties resolve to true).
pub fn downsample_mask(mask: &BoolMask, factor: (usize, usize, usize)) -> Result<BoolMask> {
    let src = mask.dims();
    let out = src.div(factor)?;
    let (fh, fw, fd) = factor;
    let block = fh * fw * fd;
    let mut bits = Vec::with_capacity(out.len());
    for oh in 0..out.h {
        for ow in 0..out.w {
            for od in 0..out.d {
                let mut trues = 0;
                for h in oh * fh..(oh + 1) * fh {
                    for w in ow * fw..(ow + 1) * fw {
                        for d in od * fd..(od + 1) * fd {
                            trues += mask.bits[src.index(h, w, d)] as usize;
                        }
                    }
                }
                bits.push(2 * trues >= block);
            }
        }
    }
    Ok(BoolMask::from_bits(out, bits))
}

/// Hard labels from probabilities; ties go to the smallest class index.
pub fn argmax_labels(probs: &ProbMap) -> LabelMap {
    let n = probs.dims.len();
    let labels = (0..n)
        .map(|i| {
            let mut best = 0;
            let mut best_p = probs.probs[i];
            for c in 1..probs.classes {
                let p = probs.probs[c * n + i];
                if p > best_p {
                    best = c;
                    best_p = p;
                }
            }
            best as u8
        })
        .collect();
    LabelMap {
        dims: probs.dims,
        classes: probs.classes,
        labels,
    }
}

/// Block-majority down-sampling of a label map; ties go to the smallest
/// class index.
pub fn downsample_labels(labels: &LabelMap, factor: (usize, usize, usize)) -> Result<LabelMap> {
    let src = labels.dims();
    let out = src.div(factor)?;
    let (fh, fw, fd) = factor;
    let mut counts = vec![0usize; labels.classes];
    let mut result = Vec::with_capacity(out.len());
    for oh in 0..out.h {
        for ow in 0..out.w {
            for od in 0..out.d {
                counts.iter_mut().for_each(|c| *c = 0);
                for h in oh * fh..(oh + 1) * fh {
                    for w in ow * fw..(ow + 1) * fw {
                        for d in od * fd..(od + 1) * fd {
                            counts[labels.labels[src.index(h, w, d)] as usize] += 1;
                        }
                    }
                }
                let mut best = 0;
                for c in 1..counts.len() {
                    if counts[c] > counts[best] {
                        best = c;
                    }
                }
                result.push(best as u8);
            }
        }
    }
    Ok(LabelMap {
        dims: out,
        classes: labels.classes,
        labels: result,
    })
}

/// Block-mean down-sampling of a scalar volume.
pub fn downsample_mean(volume: &Volume, factor: (usize, usize, usize)) -> Result<Volume> {
    let src = volume.dims();
    let out = src.div(factor)?;
    let (fh, fw, fd) = factor;
    let scale = 1.0 / (fh * fw * fd) as f64;
    let mut values = Vec::with_capacity(out.len());
    for oh in 0..out.h {
        for ow in 0..out.w {
            for od in 0..out.d {
                let mut acc = 0.0;
                for h in oh * fh..(oh + 1) * fh {
                    for w in ow * fw..(ow + 1) * fw {
                        for d in od * fd..(od + 1) * fd {
                            acc += volume.values[src.index(h, w, d)];
                        }
                    }
                }
                values.push(acc * scale);
            }
        }
    }
    Ok(Volume { dims: out, values })
}
