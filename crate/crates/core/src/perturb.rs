//! Weak (flip + intensity noise) and strong (CutMix) perturbations.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{ensure_arg, Result};
use crate::grid::{ensure_same_dims, Dims, LabelMap, Volume};
use crate::rng::{derive_seed, rng_from};

/// Intensity noise standard deviation as a fraction of the image range.
pub const WEAK_NOISE_FRACTION: f64 = 0.05;

/// Which axes to mirror.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Flips {
    pub h: bool,
    pub w: bool,
    pub d: bool,
}

impl Flips {
    pub const NONE: Flips = Flips {
        h: false,
        w: false,
        d: false,
    };

    /// Each axis flips independently with probability ½.
    pub fn sample(seed: u64) -> Flips {
        let mut rng = rng_from(seed);
        Flips {
            h: rng.random_bool(0.5),
            w: rng.random_bool(0.5),
            d: rng.random_bool(0.5),
        }
    }

    /// Source index of the voxel that lands at `idx` after flipping. Flips
    /// are involutions, so this is also the destination of `idx`.
    #[inline]
    pub fn map_index(&self, dims: Dims, idx: usize) -> usize {
        let (h, w, d) = dims.coords(idx);
        let h = if self.h { dims.h - 1 - h } else { h };
        let w = if self.w { dims.w - 1 - w } else { w };
        let d = if self.d { dims.d - 1 - d } else { d };
        dims.index(h, w, d)
    }

    fn permute<T: Copy>(&self, dims: Dims, src: &[T]) -> Vec<T> {
        if *self == Flips::NONE {
            return src.to_vec();
        }
        (0..dims.len()).map(|i| src[self.map_index(dims, i)]).collect()
    }

    pub fn apply_volume(&self, v: &Volume) -> Volume {
        Volume::new(v.dims(), self.permute(v.dims(), v.values())).expect("permutation keeps values finite")
    }

    pub fn apply_labels(&self, l: &LabelMap) -> LabelMap {
        LabelMap::new(l.dims(), l.classes(), self.permute(l.dims(), l.labels())).expect("permutation keeps labels valid")
    }
}

/// Adds `N(0, σ²)` noise with `σ = fraction · (max − min)` of the input.
pub fn add_intensity_noise(image: &Volume, fraction: f64, seed: u64) -> Result<Volume> {
    ensure_arg!(fraction >= 0.0 && fraction.is_finite(), "noise fraction must be non-negative");
    let (lo, hi) = image.range();
    let sigma = fraction * (hi - lo);
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let mut rng = rng_from(seed);
    let values = image
        .values()
        .iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            v + sigma * z
        })
        .collect();
    Volume::new(image.dims(), values)
}

/// A weakly perturbed view and the flips that produced it.
#[derive(Clone, Debug)]
pub struct WeakView {
    pub image: Volume,
    pub flips: Flips,
}

pub fn weak_perturb_with(image: &Volume, flips: Flips, noise_fraction: f64, noise_seed: u64) -> Result<WeakView> {
    let flipped = flips.apply_volume(image);
    Ok(WeakView {
        image: add_intensity_noise(&flipped, noise_fraction, noise_seed)?,
        flips,
    })
}

/// Random flips and 5 % intensity noise, both drawn from `seed`.
pub fn weak_perturb(image: &Volume, seed: u64) -> Result<WeakView> {
    weak_perturb_with(
        image,
        Flips::sample(derive_seed(seed, &[0])),
        WEAK_NOISE_FRACTION,
        derive_seed(seed, &[1]),
    )
}

/// Axis-aligned CutMix region: `corner[a] .. corner[a] + size[a]` per axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CutBox {
    pub corner: [usize; 3],
    pub size: [usize; 3],
}

impl CutBox {
    pub fn full(dims: Dims) -> CutBox {
        CutBox {
            corner: [0; 3],
            size: dims.as_array(),
        }
    }

    pub fn empty() -> CutBox {
        CutBox {
            corner: [0; 3],
            size: [0; 3],
        }
    }

    /// Side lengths uniform in `[⌈n/4⌉, ⌊n/2⌋]` (at least 1), position uniform.
    pub fn sample(dims: Dims, seed: u64) -> CutBox {
        let mut rng = rng_from(seed);
        let mut corner = [0; 3];
        let mut size = [0; 3];
        for (a, &n) in dims.as_array().iter().enumerate() {
            let lo = n.div_ceil(4).max(1);
            let hi = (n / 2).max(lo);
            size[a] = rng.random_range(lo..=hi);
            corner[a] = rng.random_range(0..=n - size[a]);
        }
        CutBox { corner, size }
    }

    pub fn volume(&self) -> usize {
        self.size.iter().product()
    }

    #[inline]
    pub fn contains(&self, h: usize, w: usize, d: usize) -> bool {
        [h, w, d]
            .iter()
            .zip(self.corner.iter().zip(&self.size))
            .all(|(&x, (&c, &s))| x >= c && x < c + s)
    }

    fn validate(&self, dims: Dims) -> Result<()> {
        for (a, &n) in dims.as_array().iter().enumerate() {
            ensure_arg!(
                self.corner[a] + self.size[a] <= n,
                "cut box {:?}+{:?} exceeds grid {dims}",
                self.corner,
                self.size
            );
        }
        Ok(())
    }

    fn select<T: Copy>(&self, dims: Dims, recipient: &[T], donor: &[T]) -> Vec<T> {
        let mut out = recipient.to_vec();
        for h in self.corner[0]..self.corner[0] + self.size[0] {
            for w in self.corner[1]..self.corner[1] + self.size[1] {
                let start = dims.index(h, w, self.corner[2]);
                let end = start + self.size[2];
                out[start..end].copy_from_slice(&donor[start..end]);
            }
        }
        out
    }

    /// Pastes `donor` into `recipient` inside the box.
    pub fn paste_volume(&self, recipient: &Volume, donor: &Volume) -> Result<Volume> {
        ensure_same_dims(recipient.dims(), donor.dims(), "cutmix")?;
        self.validate(recipient.dims())?;
        Volume::new(recipient.dims(), self.select(recipient.dims(), recipient.values(), donor.values()))
    }

    pub fn paste_labels(&self, recipient: &LabelMap, donor: &LabelMap) -> Result<LabelMap> {
        ensure_same_dims(recipient.dims(), donor.dims(), "cutmix")?;
        ensure_arg!(recipient.classes() == donor.classes(), "cutmix label maps differ in class count");
        self.validate(recipient.dims())?;
        LabelMap::new(
            recipient.dims(),
            recipient.classes(),
            self.select(recipient.dims(), recipient.labels(), donor.labels()),
        )
    }
}

/// CutMix output: mixed image, mixed label and the box used for both.
#[derive(Clone, Debug)]
pub struct Mixed {
    pub image: Volume,
    pub labels: LabelMap,
    pub cut: CutBox,
}

pub fn cutmix_with_box(
    recipient: (&Volume, &LabelMap),
    donor: (&Volume, &LabelMap),
    cut: CutBox,
) -> Result<Mixed> {
    ensure_same_dims(recipient.0.dims(), recipient.1.dims(), "cutmix recipient")?;
    Ok(Mixed {
        image: cut.paste_volume(recipient.0, donor.0)?,
        labels: cut.paste_labels(recipient.1, donor.1)?,
        cut,
    })
}

pub fn cutmix(recipient: (&Volume, &LabelMap), donor: (&Volume, &LabelMap), seed: u64) -> Result<Mixed> {
    cutmix_with_box(recipient, donor, CutBox::sample(recipient.0.dims(), seed))
}
