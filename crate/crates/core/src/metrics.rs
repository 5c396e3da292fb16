//! Overlap (DSC, Jaccard) and surface-distance (ASD, HD) metrics on the
//! foreground (`label != 0`) of two label maps. Distances are Euclidean in
//! voxel units with isotropic spacing.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{ensure_same_dims, BoolMask, Dims, LabelMap};

/// Returns `(DSC, Jaccard)`; both are 1 when both foregrounds are empty.
pub fn dsc_jaccard(pred: &LabelMap, truth: &LabelMap) -> Result<(f64, f64)> {
    ensure_same_dims(pred.dims(), truth.dims(), "dsc_jaccard")?;
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        let (p, t) = (p != 0, t != 0);
        a += p as usize;
        b += t as usize;
        both += (p && t) as usize;
    }
    if a + b == 0 {
        return Ok((1.0, 1.0));
    }
    let dsc = 2.0 * both as f64 / (a + b) as f64;
    let jac = both as f64 / (a + b - both) as f64;
    Ok((dsc, jac))
}

/// Foreground voxels with at least one 6-neighbour outside the foreground.
/// Voxels on the grid border count as touching background.
pub fn surface(mask: &BoolMask) -> BoolMask {
    let dims = mask.dims();
    let bits = mask.bits();
    let out = (0..dims.len())
        .map(|i| {
            if !bits[i] {
                return false;
            }
            let (h, w, d) = dims.coords(i);
            let on_border =
                h == 0 || w == 0 || d == 0 || h + 1 == dims.h || w + 1 == dims.w || d + 1 == dims.d;
            on_border
                || !bits[dims.index(h - 1, w, d)]
                || !bits[dims.index(h + 1, w, d)]
                || !bits[dims.index(h, w - 1, d)]
                || !bits[dims.index(h, w + 1, d)]
                || !bits[dims.index(h, w, d - 1)]
                || !bits[dims.index(h, w, d + 1)]
        })
        .collect();
    BoolMask::from_bits(dims, out)
}

/// 1D lower envelope of parabolas (Felzenszwalb & Huttenlocher), in place
/// on a strided line.
fn edt_line(f: &mut [f64], idx: impl Fn(usize) -> usize, n: usize, v: &mut [usize], z: &mut [f64], tmp: &mut [f64]) {
    for q in 0..n {
        tmp[q] = f[idx(q)];
    }
    let mut k = 0usize;
    let mut first = None;
    for q in 0..n {
        if tmp[q].is_finite() {
            first = Some(q);
            break;
        }
    }
    let Some(q0) = first else { return };
    v[0] = q0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in q0 + 1..n {
        if !tmp[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((tmp[q] + (q * q) as f64) - (tmp[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        f[idx(q)] = dq * dq + tmp[p];
    }
}

/// Exact squared Euclidean distance from every voxel to the nearest set
/// voxel of `sites`; infinite everywhere when `sites` is empty.
pub fn squared_distance_transform(sites: &BoolMask) -> Vec<f64> {
    let dims = sites.dims();
    let mut f: Vec<f64> = sites.bits().iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    if sites.count() == 0 {
        return f;
    }
    let n = dims.h.max(dims.w).max(dims.d);
    let (mut v, mut z, mut tmp) = (vec![0usize; n], vec![0.0; n + 1], vec![0.0; n]);
    let Dims { h: nh, w: nw, d: nd } = dims;
    for h in 0..nh {
        for w in 0..nw {
            edt_line(&mut f, |q| dims.index(h, w, q), nd, &mut v, &mut z, &mut tmp);
        }
    }
    for h in 0..nh {
        for d in 0..nd {
            edt_line(&mut f, |q| dims.index(h, q, d), nw, &mut v, &mut z, &mut tmp);
        }
    }
    for w in 0..nw {
        for d in 0..nd {
            edt_line(&mut f, |q| dims.index(q, w, d), nh, &mut v, &mut z, &mut tmp);
        }
    }
    f
}

fn directed<'a>(from: &'a BoolMask, to_sq: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
    from.bits()
        .iter()
        .zip(to_sq)
        .filter(|(&b, _)| b)
        .map(|(_, &d2)| d2.sqrt())
}

/// Returns `(ASD, HD)` between the foreground surfaces.
pub fn surface_distances(pred: &LabelMap, truth: &LabelMap) -> Result<(f64, f64)> {
    ensure_same_dims(pred.dims(), truth.dims(), "surface_distances")?;
    let (fa, fb) = (pred.foreground(), truth.foreground());
    if fa.count() == 0 || fb.count() == 0 {
        return Err(Error::UndefinedMetric(format!(
            "surface distance needs two nonempty foregrounds (pred {}, truth {} voxels)",
            fa.count(),
            fb.count()
        )));
    }
    let (sa, sb) = (surface(&fa), surface(&fb));
    let (da, db) = (squared_distance_transform(&sa), squared_distance_transform(&sb));
    let (mut sum, mut hd) = (0.0, 0.0f64);
    for d in directed(&sa, &db).chain(directed(&sb, &da)) {
        sum += d;
        hd = hd.max(d);
    }
    Ok((sum / (sa.count() + sb.count()) as f64, hd))
}

/// Metrics of one predicted case. Surface metrics are `None` when undefined.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub case: String,
    pub dsc: f64,
    pub jaccard: f64,
    pub asd: Option<f64>,
    pub hd: Option<f64>,
}

impl MetricsRecord {
    pub const CSV_HEADER: &'static str = "case,dsc,jaccard,asd,hd";

    pub fn evaluate(case: impl Into<String>, pred: &LabelMap, truth: &LabelMap) -> Result<Self> {
        let (dsc, jaccard) = dsc_jaccard(pred, truth)?;
        let (asd, hd) = match surface_distances(pred, truth) {
            Ok((a, h)) => (Some(a), Some(h)),
            Err(Error::UndefinedMetric(_)) => (None, None),
            Err(e) => return Err(e),
        };
        Ok(MetricsRecord {
            case: case.into(),
            dsc,
            jaccard,
            asd,
            hd,
        })
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
        format!(
            "{},{:.6},{:.6},{},{}",
            self.case,
            self.dsc,
            self.jaccard,
            opt(self.asd),
            opt(self.hd)
        )
    }
}

/// Averages over records; surface metrics skip undefined cases.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct MetricsSummary {
    pub dsc: f64,
    pub jaccard: f64,
    pub asd: Option<f64>,
    pub hd: Option<f64>,
    pub cases: usize,
}

pub fn summarize(records: &[MetricsRecord]) -> MetricsSummary {
    let n = records.len();
    if n == 0 {
        return MetricsSummary::default();
    }
    let mean_opt = |vals: Vec<f64>| {
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    MetricsSummary {
        dsc: records.iter().map(|r| r.dsc).sum::<f64>() / n as f64,
        jaccard: records.iter().map(|r| r.jaccard).sum::<f64>() / n as f64,
        asd: mean_opt(records.iter().filter_map(|r| r.asd).collect()),
        hd: mean_opt(records.iter().filter_map(|r| r.hd).collect()),
        cases: n,
    }
}

/// All-pairs surface distances; quadratic, used as a reference.
pub fn surface_distances_brute_force(pred: &LabelMap, truth: &LabelMap) -> Result<(f64, f64)> {
    ensure_same_dims(pred.dims(), truth.dims(), "surface_distances")?;
    let dims = pred.dims();
    let pts = |m: &BoolMask| -> Vec<[f64; 3]> {
        (0..dims.len())
            .filter(|&i| m.get(i))
            .map(|i| {
                let (h, w, d) = dims.coords(i);
                [h as f64, w as f64, d as f64]
            })
            .collect()
    };
    let (fa, fb) = (pred.foreground(), truth.foreground());
    if fa.count() == 0 || fb.count() == 0 {
        return Err(Error::UndefinedMetric("empty foreground".into()));
    }
    let (a, b) = (pts(&surface(&fa)), pts(&surface(&fb)));
    let nearest = |p: &[f64; 3], set: &[[f64; 3]]| {
        set.iter()
            .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    };
    let ds: Vec<f64> = a.iter().map(|p| nearest(p, &b)).chain(b.iter().map(|p| nearest(p, &a))).collect();
    let hd = ds.iter().copied().fold(0.0, f64::max);
    Ok((ds.iter().sum::<f64>() / ds.len() as f64, hd))
}
