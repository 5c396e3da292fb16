//! Synthetic barely-supervised data: soft ellipsoids on a noisy background,
//! one annotated slice per labeled case, a registration surrogate that
//! extrudes that slice into a noisy volume label, and the distance-weighted
//! fusion of registration and segmentation pseudo labels.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Error, Result};
use crate::grid::{ensure_same_dims, Dims, LabelMap, Volume};
use crate::metrics::dsc_jaccard;
use crate::rng::{derive_seed, rng_from};

pub const CLASSES: usize = 2;

/// Jitter parameters of the registration surrogate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationNoise {
    /// Radial boundary jitter scale, in voxels.
    pub sigma: f64,
    /// Relative growth of the jitter per slice of distance from the annotation.
    pub beta: f64,
    /// Correlation of the jitter shape between neighbouring slices.
    pub rho: f64,
}

impl RegistrationNoise {
    pub const EXACT: RegistrationNoise = RegistrationNoise {
        sigma: 0.0,
        beta: 0.0,
        rho: 0.7,
    };
}

/// Output of `calibrate_sigma` on the default generator (seed 0, 20 cases).
pub const DEFAULT_REG_SIGMA: f64 = 3.75;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    /// Held-out cases used only for evaluation.
    pub n_eval: usize,
    /// Standard deviation of the additive background noise.
    pub noise_amplitude: f64,
    /// Logistic edge width of the ellipsoid field, in normalized radius units.
    pub edge_softness: f64,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Registration surrogate jitter scale, in voxels.
    pub reg_sigma: f64,
    /// Relative jitter growth per slice of distance from the annotation.
    pub reg_beta: f64,
    /// Slice-to-slice correlation of the jitter shape.
    pub reg_rho: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            height: 32,
            width: 32,
            depth: 16,
            n_labeled: 16,
            n_unlabeled: 64,
            n_eval: 8,
            noise_amplitude: 0.25,
            edge_softness: 0.08,
            radius_min: 0.25,
            radius_max: 0.4,
            reg_sigma: DEFAULT_REG_SIGMA,
            reg_beta: 0.15,
            reg_rho: 0.7,
        }
    }
}

impl GeneratorConfig {
    pub fn dims(&self) -> Dims {
        Dims::new(self.height, self.width, self.depth)
    }

    pub fn registration(&self) -> RegistrationNoise {
        RegistrationNoise {
            sigma: self.reg_sigma,
            beta: self.reg_beta,
            rho: self.reg_rho,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.dims();
        ensure_arg!(
            dims.h >= 2 && dims.w >= 2 && dims.d >= 2,
            "generator dims {dims} are degenerate"
        );
        ensure_arg!(
            dims.h.is_multiple_of(2) && dims.w.is_multiple_of(2) && dims.d.is_multiple_of(2),
            "generator dims {dims} must be divisible by 2"
        );
        ensure_arg!(
            self.n_labeled >= 1 && self.n_unlabeled >= 1,
            "need at least one labeled and one unlabeled case"
        );
        ensure_arg!(
            self.noise_amplitude >= 0.0 && self.edge_softness > 0.0,
            "noise amplitude must be non-negative and edge softness positive"
        );
        ensure_arg!(
            0.0 < self.radius_min && self.radius_min <= self.radius_max && self.radius_max < 0.5,
            "radius fractions must satisfy 0 < min <= max < 0.5"
        );
        let r = self.registration();
        ensure_arg!(
            r.sigma >= 0.0 && r.beta >= 0.0 && (0.0..1.0).contains(&r.rho),
            "registration noise needs sigma >= 0, beta >= 0, 0 <= rho < 1"
        );
        Ok(())
    }
}

/// Geometry of one synthetic object.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    fn sample(dims: Dims, cfg: &GeneratorConfig, rng: &mut impl Rng) -> Ellipsoid {
        let mut center = [0.0; 3];
        let mut radii = [0.0; 3];
        for (a, &n) in dims.as_array().iter().enumerate() {
            let n = n as f64;
            radii[a] = n * rng.random_range(cfg.radius_min..=cfg.radius_max);
            let lo = radii[a].min(n / 2.0);
            let hi = (n - radii[a]).max(lo);
            center[a] = rng.random_range(lo..=hi);
        }
        Ellipsoid { center, radii }
    }

    /// Normalized radius `q`; the surface is `q = 1`.
    fn q(&self, h: usize, w: usize, d: usize) -> f64 {
        [h, w, d]
            .iter()
            .zip(self.center.iter().zip(&self.radii))
            .map(|(&x, (&c, &r))| ((x as f64 - c) / r).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// A clean field, its noisy image and the thresholded truth.
pub struct SyntheticCase {
    pub image: Volume,
    pub truth: LabelMap,
    pub shape: Ellipsoid,
}

pub fn synthesize_case(cfg: &GeneratorConfig, seed: u64) -> Result<SyntheticCase> {
    cfg.validate()?;
    let dims = cfg.dims();
    let mut rng = rng_from(seed);
    let shape = Ellipsoid::sample(dims, cfg, &mut rng);
    let mut values = Vec::with_capacity(dims.len());
    let mut labels = Vec::with_capacity(dims.len());
    for i in 0..dims.len() {
        let (h, w, d) = dims.coords(i);
        let q = shape.q(h, w, d);
        let phi = 1.0 / (1.0 + ((q - 1.0) / cfg.edge_softness).exp());
        let z: f64 = StandardNormal.sample(&mut rng);
        values.push(phi + cfg.noise_amplitude * z);
        labels.push((phi >= 0.5) as u8);
    }
    Ok(SyntheticCase {
        image: Volume::new(dims, values)?,
        truth: LabelMap::new(dims, CLASSES, labels)?,
        shape,
    })
}

/// The slice `k` of a label map as an `H×W×1` map.
pub fn extract_slice(labels: &LabelMap, k: usize) -> Result<LabelMap> {
    let dims = labels.dims();
    ensure_arg!(k < dims.d, "slice {k} outside depth {}", dims.d);
    let mut out = Vec::with_capacity(dims.h * dims.w);
    for h in 0..dims.h {
        for w in 0..dims.w {
            out.push(labels.get(h, w, k));
        }
    }
    LabelMap::new(Dims::new(dims.h, dims.w, 1), labels.classes(), out)
}

const HARMONICS: usize = 3;
const COEFFS: usize = 1 + 2 * HARMONICS;

fn jitter_at(coeffs: &[f64; COEFFS], theta: f64, amplitude: f64) -> f64 {
    let mut s = coeffs[0];
    for m in 1..=HARMONICS {
        let mt = m as f64 * theta;
        s += coeffs[2 * m - 1] * mt.cos() + coeffs[2 * m] * mt.sin();
    }
    amplitude * s / 2.0
}

/// Simulated registration output for one labeled case.
///
/// Slice `k` is copied verbatim. Every other slice `z` at distance
/// `s = |z − k|` resamples the true slice contour along rays from its
/// centroid: a pixel at `p` takes the truth label at
/// `c + (p − c)·R̄/(R̄ + j(θ))`, where `R̄` is the slice's equivalent radius
/// and `j(θ)` a smooth radial jitter of scale `σ(1 + βs)` whose Fourier
/// coefficients follow an AR(1) chain outward from `k`.
pub fn register_surrogate(truth: &LabelMap, k: usize, noise: RegistrationNoise, seed: u64) -> Result<LabelMap> {
    let dims = truth.dims();
    ensure_arg!(k < dims.d, "annotated slice {k} outside depth {}", dims.d);
    let mut out = vec![0u8; dims.len()];
    for h in 0..dims.h {
        for w in 0..dims.w {
            let i = dims.index(h, w, k);
            out[i] = truth.labels()[i];
        }
    }
    let innovation = (1.0 - noise.rho * noise.rho).sqrt();
    for (dir, slices) in [
        (0u64, (k + 1..dims.d).collect::<Vec<_>>()),
        (1, (0..k).rev().collect()),
    ] {
        let mut rng = rng_from(derive_seed(seed, &[dir]));
        let mut coeffs = [0.0; COEFFS];
        for c in &mut coeffs {
            *c = StandardNormal.sample(&mut rng);
        }
        for z in slices {
            for c in &mut coeffs {
                let e: f64 = StandardNormal.sample(&mut rng);
                *c = noise.rho * *c + innovation * e;
            }
            let s = z.abs_diff(k) as f64;
            propagate_slice(truth, z, &coeffs, noise.sigma * (1.0 + noise.beta * s), &mut out);
        }
    }
    LabelMap::new(dims, truth.classes(), out)
}

fn propagate_slice(truth: &LabelMap, z: usize, coeffs: &[f64; COEFFS], amplitude: f64, out: &mut [u8]) {
    let dims = truth.dims();
    let (mut area, mut ch, mut cw) = (0usize, 0.0, 0.0);
    for h in 0..dims.h {
        for w in 0..dims.w {
            if truth.get(h, w, z) != 0 {
                area += 1;
                ch += h as f64;
                cw += w as f64;
            }
        }
    }
    if area == 0 {
        return;
    }
    let (ch, cw) = (ch / area as f64, cw / area as f64);
    let r_bar = (area as f64 / std::f64::consts::PI).sqrt();
    for h in 0..dims.h {
        for w in 0..dims.w {
            let (dh, dw) = (h as f64 - ch, w as f64 - cw);
            let j = jitter_at(coeffs, dw.atan2(dh), amplitude);
            if r_bar + j <= 0.0 {
                continue;
            }
            let scale = r_bar / (r_bar + j);
            let qh = (ch + dh * scale).round();
            let qw = (cw + dw * scale).round();
            if qh < 0.0 || qw < 0.0 || qh >= dims.h as f64 || qw >= dims.w as f64 {
                continue;
            }
            out[dims.index(h, w, z)] = truth.get(qh as usize, qw as usize, z);
        }
    }
}

/// Mean DSC of the surrogate against truth over `cases` generated cases.
pub fn mean_registration_dsc(cfg: &GeneratorConfig, noise: RegistrationNoise, cases: usize, seed: u64) -> Result<f64> {
    ensure_arg!(cases > 0, "need at least one case");
    let k = cfg.depth / 2;
    let mut total = 0.0;
    for c in 0..cases as u64 {
        let case = synthesize_case(cfg, derive_seed(seed, &[c, 0]))?;
        let reg = register_surrogate(&case.truth, k, noise, derive_seed(seed, &[c, 1]))?;
        total += dsc_jaccard(&reg, &case.truth)?.0;
    }
    Ok(total / cases as f64)
}

/// Bisects `σ` (β and ρ fixed) until the mean surrogate DSC over `cases`
/// falls in `[lo, hi]`.
pub fn calibrate_sigma(cfg: &GeneratorConfig, cases: usize, seed: u64, band: (f64, f64)) -> Result<f64> {
    let (lo, hi) = band;
    ensure_arg!(0.0 < lo && lo < hi && hi < 1.0, "calibration band must lie inside (0, 1)");
    let target = 0.5 * (lo + hi);
    let noise_at = |sigma| RegistrationNoise {
        sigma,
        ..cfg.registration()
    };
    let (mut a, mut b) = (0.0f64, 1.0f64);
    while mean_registration_dsc(cfg, noise_at(b), cases, seed)? > target {
        b *= 2.0;
        if b > 1e3 {
            return Err(Error::Argument("registration DSC never drops into the band".into()));
        }
    }
    for _ in 0..60 {
        let mid = 0.5 * (a + b);
        let dsc = mean_registration_dsc(cfg, noise_at(mid), cases, seed)?;
        if (lo..=hi).contains(&dsc) && (dsc - target).abs() < 0.01 {
            return Ok(mid);
        }
        if dsc > target {
            a = mid;
        } else {
            b = mid;
        }
    }
    let mid = 0.5 * (a + b);
    let dsc = mean_registration_dsc(cfg, noise_at(mid), cases, seed)?;
    if (lo..=hi).contains(&dsc) {
        Ok(mid)
    } else {
        Err(Error::Argument(format!("calibration ended at DSC {dsc:.4}, outside the band")))
    }
}

/// Registration, segmentation and fused pseudo labels of one case.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelSet {
    pub registration: LabelMap,
    pub segmentation: LabelMap,
    pub fused: LabelMap,
    /// Weight given to the registration label at each voxel.
    pub weight: Volume,
}

/// Fusion weight `w0 · 2^(−s / half_life)` at slice distance `s`.
pub fn fusion_weight(s: usize, w0: f64, half_life: f64) -> f64 {
    w0 * (-(s as f64) / half_life).exp2()
}

/// Per-voxel argmax of `w·onehot(reg) + (1−w)·onehot(seg)`, ties to the
/// smaller class.
pub fn fuse_labels(reg: &LabelMap, seg: &LabelMap, k: usize, w0: f64, half_life: f64) -> Result<PseudoLabelSet> {
    ensure_same_dims(reg.dims(), seg.dims(), "fuse_labels")?;
    ensure_arg!(reg.classes() == seg.classes(), "fused label maps differ in class count");
    ensure_arg!((0.0..=1.0).contains(&w0), "w0 must lie in [0, 1], got {w0}");
    ensure_arg!(half_life > 0.0, "half-life must be positive, got {half_life}");
    let dims = reg.dims();
    let weights: Vec<f64> = (0..dims.d).map(|z| fusion_weight(z.abs_diff(k), w0, half_life)).collect();
    let mut fused = Vec::with_capacity(dims.len());
    let mut wmap = Vec::with_capacity(dims.len());
    for (i, (&r, &s)) in reg.labels().iter().zip(seg.labels()).enumerate() {
        let w = weights[i % dims.d];
        wmap.push(w);
        fused.push(if r == s || w > 1.0 - w || (w == 1.0 - w && r < s) {
            r
        } else {
            s
        });
    }
    Ok(PseudoLabelSet {
        registration: reg.clone(),
        segmentation: seg.clone(),
        fused: LabelMap::new(dims, reg.classes(), fused)?,
        weight: Volume::new(dims, wmap)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledCase {
    pub id: String,
    pub image: Volume,
    /// Index of the annotated slice.
    pub k: usize,
    /// Annotation of slice `k`, an `H×W×1` map.
    pub slice_labels: LabelMap,
    /// Registration pseudo label `Y^r`.
    pub registration: LabelMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledCase {
    pub id: String,
    pub image: Volume,
}

/// Labeled, unlabeled and held-out cases. Ground truth sits in a separate
/// map that the trainer only consults for held-out evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dims: Dims,
    pub classes: usize,
    pub labeled: Vec<LabeledCase>,
    pub unlabeled: Vec<UnlabeledCase>,
    pub eval: Vec<UnlabeledCase>,
    truth: BTreeMap<String, LabelMap>,
}

impl Dataset {
    pub fn truth(&self, id: &str) -> Option<&LabelMap> {
        self.truth.get(id)
    }

    pub fn n_labeled(&self) -> usize {
        self.labeled.len()
    }

    pub fn n_unlabeled(&self) -> usize {
        self.unlabeled.len()
    }
}

pub fn generate_dataset(cfg: &GeneratorConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let dims = cfg.dims();
    let k = dims.d / 2;
    let mut truth = BTreeMap::new();
    let mut labeled = Vec::with_capacity(cfg.n_labeled);
    for i in 0..cfg.n_labeled {
        let id = format!("L{i:03}");
        let case = synthesize_case(cfg, derive_seed(seed, &[0, i as u64]))?;
        let registration = register_surrogate(&case.truth, k, cfg.registration(), derive_seed(seed, &[3, i as u64]))?;
        labeled.push(LabeledCase {
            id: id.clone(),
            image: case.image,
            k,
            slice_labels: extract_slice(&case.truth, k)?,
            registration,
        });
        truth.insert(id, case.truth);
    }
    let mut other = |role: u64, prefix: &str, n: usize| -> Result<Vec<UnlabeledCase>> {
        (0..n)
            .map(|i| {
                let id = format!("{prefix}{i:03}");
                let case = synthesize_case(cfg, derive_seed(seed, &[role, i as u64]))?;
                truth.insert(id.clone(), case.truth);
                Ok(UnlabeledCase { id, image: case.image })
            })
            .collect()
    };
    let unlabeled = other(1, "U", cfg.n_unlabeled)?;
    let eval = other(2, "E", cfg.n_eval)?;
    Ok(Dataset {
        dims,
        classes: CLASSES,
        labeled,
        unlabeled,
        eval,
        truth,
    })
}

const MANIFEST: &str = "manifest.txt";

fn grid_path(dir: &Path, sub: &str, id: &str) -> std::path::PathBuf {
    dir.join(sub).join(format!("{id}.grid"))
}

/// Writes `images/`, `annotations/`, `registration/`, `truth/` and a
/// manifest listing every case with its role and annotated slice.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    for sub in ["images", "annotations", "registration", "truth"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut manifest = String::new();
    let _ = writeln!(manifest, "# spss synthetic dataset");
    let _ = writeln!(manifest, "dims {}", ds.dims);
    let _ = writeln!(manifest, "classes {}", ds.classes);
    for c in &ds.labeled {
        c.image.write(&grid_path(dir, "images", &c.id))?;
        c.slice_labels.write(&grid_path(dir, "annotations", &c.id))?;
        c.registration.write(&grid_path(dir, "registration", &c.id))?;
        let _ = writeln!(manifest, "{} labeled {}", c.id, c.k);
    }
    for (role, cases) in [("unlabeled", &ds.unlabeled), ("eval", &ds.eval)] {
        for c in cases {
            c.image.write(&grid_path(dir, "images", &c.id))?;
            let _ = writeln!(manifest, "{} {role} -", c.id);
        }
    }
    for (id, t) in &ds.truth {
        t.write(&grid_path(dir, "truth", id))?;
    }
    let p = dir.join(MANIFEST);
    fs::write(&p, manifest).map_err(|e| Error::io(&p, e))
}

fn parse_dims(s: &str) -> Option<Dims> {
    let v: Vec<usize> = s.split('x').map(|p| p.parse().ok()).collect::<Option<_>>()?;
    (v.len() == 3).then(|| Dims::new(v[0], v[1], v[2]))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let bad = |line: usize, why: &str| Error::format(&mpath, format!("line {}: {why}", line + 1));
    let (mut dims, mut classes) = (None, None);
    let mut ds = Dataset {
        dims: Dims::new(0, 0, 0),
        classes: 0,
        labeled: vec![],
        unlabeled: vec![],
        eval: vec![],
        truth: BTreeMap::new(),
    };
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["dims", d] => dims = Some(parse_dims(d).ok_or_else(|| bad(n, "malformed dims"))?),
            ["classes", c] => classes = Some(c.parse::<usize>().map_err(|_| bad(n, "malformed class count"))?),
            [id, role, k] => {
                let (dims, classes) = match (dims, classes) {
                    (Some(d), Some(c)) => (d, c),
                    _ => return Err(bad(n, "case listed before dims/classes")),
                };
                let image = Volume::read(&grid_path(dir, "images", id))?;
                if image.dims() != dims {
                    return Err(bad(n, "image dims disagree with manifest"));
                }
                let tpath = grid_path(dir, "truth", id);
                if tpath.exists() {
                    ds.truth.insert(id.to_string(), LabelMap::read(&tpath, classes)?);
                }
                let id = id.to_string();
                match *role {
                    "labeled" => {
                        let k: usize = k.parse().map_err(|_| bad(n, "malformed slice index"))?;
                        if k >= dims.d {
                            return Err(bad(n, "annotated slice outside depth"));
                        }
                        ds.labeled.push(LabeledCase {
                            slice_labels: LabelMap::read(&grid_path(dir, "annotations", &id), classes)?,
                            registration: LabelMap::read(&grid_path(dir, "registration", &id), classes)?,
                            id,
                            image,
                            k,
                        })
                    }
                    "unlabeled" => ds.unlabeled.push(UnlabeledCase { id, image }),
                    "eval" => ds.eval.push(UnlabeledCase { id, image }),
                    _ => return Err(bad(n, "unknown role")),
                }
            }
            _ => return Err(bad(n, "unrecognized line")),
        }
    }
    ds.dims = dims.ok_or_else(|| Error::format(&mpath, "missing dims line"))?;
    ds.classes = classes.ok_or_else(|| Error::format(&mpath, "missing classes line"))?;
    Ok(ds)
}
