//! Raw forward/backward kernels on channel-major `[C, H, W, D]` buffers.

/// Cubic convolution geometry: kernel edge, stride and zero padding, shared
/// by all three spatial axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub const fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_len(&self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.pad;
        if padded < self.kernel || self.stride == 0 {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// Output indices `o` for which `o * stride + k - pad` lands inside `[0, n)`.
    fn valid_range(&self, k: usize, n: usize, n_out: usize) -> std::ops::Range<usize> {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= n - 1
        let hi_num = n as isize - 1 - off;
        if hi_num < 0 {
            return 0..0;
        }
        let hi = (hi_num / s + 1).min(n_out as isize);
        if lo >= hi {
            0..0
        } else {
            lo as usize..hi as usize
        }
    }
}

struct ConvPlan {
    ranges: [Vec<std::ops::Range<usize>>; 3],
}

impl ConvPlan {
    fn new(geom: ConvGeom, inp: [usize; 3], out: [usize; 3]) -> Self {
        let axis = |a: usize| {
            (0..geom.kernel)
                .map(|k| geom.valid_range(k, inp[a], out[a]))
                .collect::<Vec<_>>()
        };
        Self {
            ranges: [axis(0), axis(1), axis(2)],
        }
    }
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// `out[j] += Σ_t w[t] · src[offs[t] + j]`, all taps in one pass over `out`.
#[inline]
fn multi_axpy<const T: usize>(w: &[f64; T], src: &[f64], offs: &[usize; T], out: &mut [f64]) {
    let n = out.len();
    let srcs: [&[f64]; T] = std::array::from_fn(|t| &src[offs[t]..offs[t] + n]);
    for (j, o) in out.iter_mut().enumerate() {
        let mut a = *o;
        for t in 0..T {
            a += w[t] * srcs[t][j];
        }
        *o = a;
    }
}

/// `Σ_j x[j] · src[offs[t] + j]` for every tap `t`.
#[inline]
fn multi_dot<const T: usize>(x: &[f64], src: &[f64], offs: &[usize; T]) -> [f64; T] {
    let n = x.len();
    let srcs: [&[f64]; T] = std::array::from_fn(|t| &src[offs[t]..offs[t] + n]);
    let mut acc = [0.0; T];
    for (j, &xv) in x.iter().enumerate() {
        for t in 0..T {
            acc[t] += xv * srcs[t][j];
        }
    }
    acc
}

/// Zero-padded copy of every channel plane, plus the padded grid dims.
fn pad_planes(x: &[f64], ch: usize, spatial: [usize; 3], p: usize) -> (Vec<f64>, [usize; 3]) {
    let [h, w, d] = spatial;
    let padded = [h + 2 * p, w + 2 * p, d + 2 * p];
    let [_, wp, dp] = padded;
    let n = h * w * d;
    let np: usize = padded.iter().product();
    let mut out = vec![0.0; ch * np];
    for c in 0..ch {
        for ih in 0..h {
            for iw in 0..w {
                let src = c * n + (ih * w + iw) * d;
                let dst = c * np + ((ih + p) * wp + iw + p) * dp + p;
                out[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    (out, padded)
}

/// Stride-1 convolutions run on the zero-padded input. Output voxel
/// `(oh, ow, od)` is stored at padded position `j = (oh·Wp + ow)·Dp + od`, so
/// every kernel tap becomes one long contiguous `axpy` at offset
/// `(kh·Wp + kw)·Dp + kd`. Positions with `ow ≥ Wo` or `od ≥ Do` are scratch.
struct PaddedGrid {
    padded: [usize; 3],
    out: [usize; 3],
    span: usize,
}

impl PaddedGrid {
    fn new(spatial: [usize; 3], geom: ConvGeom) -> Self {
        let padded = spatial.map(|n| n + 2 * geom.pad);
        let out = padded.map(|n| n + 1 - geom.kernel);
        let [_, wp, dp] = padded;
        let span = ((out[0] - 1) * wp + out[1] - 1) * dp + out[2];
        Self { padded, out, span }
    }

    fn tap_offset(&self, kh: usize, kw: usize, kd: usize) -> usize {
        (kh * self.padded[1] + kw) * self.padded[2] + kd
    }

    /// Calls `f(dense_index, padded_index)` for every valid output voxel.
    fn for_each_row(&self, mut f: impl FnMut(usize, usize)) {
        let [ho, wo, dout] = self.out;
        let [_, wp, dp] = self.padded;
        for oh in 0..ho {
            for ow in 0..wo {
                f((oh * wo + ow) * dout, (oh * wp + ow) * dp);
            }
        }
    }
}

/// `out[oc] = bias[oc] + Σ_ic weight[oc, ic] ⋆ input[ic]`.
///
/// `weight` is `[Co, Ci, k, k, k]`. Returns the output buffer and its spatial dims.
pub fn conv3d_forward(
    input: &[f64],
    in_ch: usize,
    spatial: [usize; 3],
    weight: &[f64],
    bias: &[f64],
    out_ch: usize,
    geom: ConvGeom,
) -> (Vec<f64>, [usize; 3]) {
    let [h, w, d] = spatial;
    let out = [
        geom.out_len(h).expect("conv output"),
        geom.out_len(w).expect("conv output"),
        geom.out_len(d).expect("conv output"),
    ];
    let [ho, wo, dout] = out;
    let k = geom.kernel;
    let s = geom.stride;
    let p = geom.pad;
    let n_in = h * w * d;
    let n_out = ho * wo * dout;
    let mut result = vec![0.0; out_ch * n_out];

    // 1x1x1 stride-1 convolutions are a plain channel mix over whole planes.
    if k == 1 && s == 1 && p == 0 {
        for oc in 0..out_ch {
            let plane = &mut result[oc * n_out..(oc + 1) * n_out];
            plane.fill(bias[oc]);
            for ic in 0..in_ch {
                let wv = weight[oc * in_ch + ic];
                axpy(wv, &input[ic * n_in..(ic + 1) * n_in], plane);
            }
        }
        return (result, out);
    }

    if s == 1 {
        let grid = PaddedGrid::new(spatial, geom);
        let (xp, padded) = pad_planes(input, in_ch, spatial, p);
        let np: usize = padded.iter().product();
        let mut acc = vec![0.0; grid.span];
        for oc in 0..out_ch {
            acc.fill(0.0);
            for ic in 0..in_ch {
                let src = &xp[ic * np..(ic + 1) * np];
                for kh in 0..k {
                    let wbase = ((oc * in_ch + ic) * k + kh) * k * k;
                    if k == 3 {
                        let w9: [f64; 9] = std::array::from_fn(|t| weight[wbase + t]);
                        let offs: [usize; 9] = std::array::from_fn(|t| grid.tap_offset(kh, t / 3, t % 3));
                        multi_axpy(&w9, src, &offs, &mut acc);
                        continue;
                    }
                    for kw in 0..k {
                        for kd in 0..k {
                            let off = grid.tap_offset(kh, kw, kd);
                            axpy(weight[wbase + kw * k + kd], &src[off..off + grid.span], &mut acc);
                        }
                    }
                }
            }
            let plane = &mut result[oc * n_out..(oc + 1) * n_out];
            grid.for_each_row(|dense, pad| {
                for (o, a) in plane[dense..dense + dout].iter_mut().zip(&acc[pad..pad + dout]) {
                    *o = bias[oc] + a;
                }
            });
        }
        return (result, out);
    }

    let plan = ConvPlan::new(geom, spatial, out);
    for oc in 0..out_ch {
        let plane = &mut result[oc * n_out..(oc + 1) * n_out];
        plane.fill(bias[oc]);
        for ic in 0..in_ch {
            let src = &input[ic * n_in..(ic + 1) * n_in];
            for kh in 0..k {
                for kw in 0..k {
                    for kd in 0..k {
                        let wv = weight[(((oc * in_ch + ic) * k + kh) * k + kw) * k + kd];
                        let rd = plan.ranges[2][kd].clone();
                        for oh in plan.ranges[0][kh].clone() {
                            let ih = oh * s + kh - p;
                            for ow in plan.ranges[1][kw].clone() {
                                let iw = ow * s + kw - p;
                                let ob = (oh * wo + ow) * dout;
                                let ib = (ih * w + iw) * d;
                                for od in rd.clone() {
                                    plane[ob + od] += wv * src[ib + od * s + kd - p];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (result, out)
}

/// Gradients of [`conv3d_forward`] with respect to input, weight and bias.
/// The input gradient is left empty when `need_input` is false.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward(
    input: &[f64],
    in_ch: usize,
    spatial: [usize; 3],
    weight: &[f64],
    out_ch: usize,
    geom: ConvGeom,
    out_spatial: [usize; 3],
    upstream: &[f64],
    need_input: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [h, w, d] = spatial;
    let [ho, wo, dout] = out_spatial;
    let k = geom.kernel;
    let s = geom.stride;
    let p = geom.pad;
    let n_in = h * w * d;
    let n_out = ho * wo * dout;
    let mut g_in = if need_input { vec![0.0; in_ch * n_in] } else { Vec::new() };
    let mut g_w = vec![0.0; weight.len()];
    let g_b: Vec<f64> = (0..out_ch)
        .map(|oc| upstream[oc * n_out..(oc + 1) * n_out].iter().sum())
        .collect();

    if k == 1 && s == 1 && p == 0 {
        for oc in 0..out_ch {
            let up = &upstream[oc * n_out..(oc + 1) * n_out];
            for ic in 0..in_ch {
                let src = &input[ic * n_in..(ic + 1) * n_in];
                g_w[oc * in_ch + ic] = dot(up, src);
                if need_input {
                    axpy(weight[oc * in_ch + ic], up, &mut g_in[ic * n_in..(ic + 1) * n_in]);
                }
            }
        }
        return (g_in, g_w, g_b);
    }

    if s == 1 {
        let grid = PaddedGrid::new(spatial, geom);
        let (xp, padded) = pad_planes(input, in_ch, spatial, p);
        let np: usize = padded.iter().product();
        let mut g_pad = if need_input { vec![0.0; in_ch * np] } else { Vec::new() };
        // Upstream scattered onto the padded output layout (zero on scratch
        // positions) behind `lead` zeros, so the input gradient is a
        // correlation with the flipped kernel: g[i] += Σ_t w_t · up[i − off_t].
        let lead = grid.tap_offset(k - 1, k - 1, k - 1);
        let mut up_pad = vec![0.0; lead + np];
        for oc in 0..out_ch {
            let up = &upstream[oc * n_out..(oc + 1) * n_out];
            grid.for_each_row(|dense, pad| {
                up_pad[lead + pad..lead + pad + dout].copy_from_slice(&up[dense..dense + dout]);
            });
            let up_span = &up_pad[lead..lead + grid.span];
            for ic in 0..in_ch {
                let src = &xp[ic * np..(ic + 1) * np];
                for kh in 0..k {
                    let wbase = ((oc * in_ch + ic) * k + kh) * k * k;
                    if k == 3 {
                        let offs: [usize; 9] = std::array::from_fn(|t| grid.tap_offset(kh, t / 3, t % 3));
                        g_w[wbase..wbase + 9].copy_from_slice(&multi_dot(up_span, src, &offs));
                        if need_input {
                            let w9: [f64; 9] = std::array::from_fn(|t| weight[wbase + t]);
                            let flipped = offs.map(|o| lead - o);
                            multi_axpy(&w9, &up_pad, &flipped, &mut g_pad[ic * np..(ic + 1) * np]);
                        }
                        continue;
                    }
                    for kw in 0..k {
                        for kd in 0..k {
                            let widx = wbase + kw * k + kd;
                            let off = grid.tap_offset(kh, kw, kd);
                            g_w[widx] = dot(up_span, &src[off..off + grid.span]);
                            if need_input {
                                let gsrc = &mut g_pad[ic * np..(ic + 1) * np];
                                axpy(weight[widx], &up_pad[lead - off..lead - off + np], gsrc);
                            }
                        }
                    }
                }
            }
        }
        if need_input {
            let [_, wp, dp] = padded;
            for ic in 0..in_ch {
                for ih in 0..h {
                    for iw in 0..w {
                        let dst = ic * n_in + (ih * w + iw) * d;
                        let src = ic * np + ((ih + p) * wp + iw + p) * dp + p;
                        g_in[dst..dst + d].copy_from_slice(&g_pad[src..src + d]);
                    }
                }
            }
        }
        return (g_in, g_w, g_b);
    }

    let plan = ConvPlan::new(geom, spatial, out_spatial);
    for oc in 0..out_ch {
        let up = &upstream[oc * n_out..(oc + 1) * n_out];
        for ic in 0..in_ch {
            let src = &input[ic * n_in..(ic + 1) * n_in];
            for kh in 0..k {
                for kw in 0..k {
                    for kd in 0..k {
                        let widx = (((oc * in_ch + ic) * k + kh) * k + kw) * k + kd;
                        let wv = weight[widx];
                        let rd = plan.ranges[2][kd].clone();
                        let mut acc = 0.0;
                        for oh in plan.ranges[0][kh].clone() {
                            let ih = oh * s + kh - p;
                            for ow in plan.ranges[1][kw].clone() {
                                let iw = ow * s + kw - p;
                                let ob = (oh * wo + ow) * dout;
                                let ib = (ih * w + iw) * d;
                                for od in rd.clone() {
                                    let ii = ib + od * s + kd - p;
                                    let g = up[ob + od];
                                    acc += g * src[ii];
                                    if need_input {
                                        g_in[ic * n_in + ii] += wv * g;
                                    }
                                }
                            }
                        }
                        g_w[widx] = acc;
                    }
                }
            }
        }
    }
    (g_in, g_w, g_b)
}

/// Softmax across channels at every voxel.
pub fn softmax_channels(x: &[f64], channels: usize) -> Vec<f64> {
    let n = x.len() / channels;
    let mut out = vec![0.0; x.len()];
    for i in 0..n {
        let mut m = f64::NEG_INFINITY;
        for c in 0..channels {
            m = m.max(x[c * n + i]);
        }
        let mut z = 0.0;
        for c in 0..channels {
            let e = (x[c * n + i] - m).exp();
            out[c * n + i] = e;
            z += e;
        }
        for c in 0..channels {
            out[c * n + i] /= z;
        }
    }
    out
}

pub fn softmax_channels_backward(y: &[f64], channels: usize, upstream: &[f64]) -> Vec<f64> {
    let n = y.len() / channels;
    let mut g = vec![0.0; y.len()];
    for i in 0..n {
        let mut inner = 0.0;
        for c in 0..channels {
            inner += upstream[c * n + i] * y[c * n + i];
        }
        for c in 0..channels {
            g[c * n + i] = y[c * n + i] * (upstream[c * n + i] - inner);
        }
    }
    g
}

/// Nearest-neighbour ×2 up-sampling on every spatial axis.
pub fn upsample2(x: &[f64], channels: usize, spatial: [usize; 3]) -> Vec<f64> {
    let [h, w, d] = spatial;
    let (h2, w2, d2) = (2 * h, 2 * w, 2 * d);
    let n = h * w * d;
    let n2 = h2 * w2 * d2;
    let mut out = vec![0.0; channels * n2];
    for c in 0..channels {
        for oh in 0..h2 {
            for ow in 0..w2 {
                for od in 0..d2 {
                    out[c * n2 + (oh * w2 + ow) * d2 + od] =
                        x[c * n + ((oh / 2) * w + ow / 2) * d + od / 2];
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]: sums each 2×2×2 block. `spatial` is the
/// low-resolution extent.
pub fn upsample2_backward(upstream: &[f64], channels: usize, spatial: [usize; 3]) -> Vec<f64> {
    let [h, w, d] = spatial;
    let (w2, d2) = (2 * w, 2 * d);
    let n = h * w * d;
    let n2 = 8 * n;
    let mut g = vec![0.0; channels * n];
    for c in 0..channels {
        for oh in 0..2 * h {
            for ow in 0..w2 {
                for od in 0..d2 {
                    g[c * n + ((oh / 2) * w + ow / 2) * d + od / 2] +=
                        upstream[c * n2 + (oh * w2 + ow) * d2 + od];
                }
            }
        }
    }
    g
}

/// 2×2×2 average pooling. `spatial` is the input extent (each axis even).
pub fn avg_pool2(x: &[f64], channels: usize, spatial: [usize; 3]) -> Vec<f64> {
    let [h, w, d] = spatial;
    let (ho, wo, dout) = (h / 2, w / 2, d / 2);
    let n = h * w * d;
    let no = ho * wo * dout;
    let mut out = vec![0.0; channels * no];
    for c in 0..channels {
        for ih in 0..h {
            for iw in 0..w {
                for id in 0..d {
                    out[c * no + ((ih / 2) * wo + iw / 2) * dout + id / 2] +=
                        0.125 * x[c * n + (ih * w + iw) * d + id];
                }
            }
        }
    }
    out
}

pub fn avg_pool2_backward(upstream: &[f64], channels: usize, spatial: [usize; 3]) -> Vec<f64> {
    let [h, w, d] = spatial;
    let (wo, dout) = (w / 2, d / 2);
    let n = h * w * d;
    let no = n / 8;
    let mut g = vec![0.0; channels * n];
    for c in 0..channels {
        for ih in 0..h {
            for iw in 0..w {
                for id in 0..d {
                    g[c * n + (ih * w + iw) * d + id] =
                        0.125 * upstream[c * no + ((ih / 2) * wo + iw / 2) * dout + id / 2];
                }
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct definition of a zero-padded strided convolution.
    fn naive_conv(
        input: &[f64],
        ci: usize,
        sp: [usize; 3],
        weight: &[f64],
        bias: &[f64],
        co: usize,
        g: ConvGeom,
    ) -> Vec<f64> {
        let out = [
            g.out_len(sp[0]).unwrap(),
            g.out_len(sp[1]).unwrap(),
            g.out_len(sp[2]).unwrap(),
        ];
        let k = g.kernel;
        let mut res = Vec::new();
        for oc in 0..co {
            for oh in 0..out[0] {
                for ow in 0..out[1] {
                    for od in 0..out[2] {
                        let mut acc = bias[oc];
                        for ic in 0..ci {
                            for kh in 0..k {
                                for kw in 0..k {
                                    for kd in 0..k {
                                        let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                                        let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                                        let id = (od * g.stride + kd) as isize - g.pad as isize;
                                        if ih < 0
                                            || iw < 0
                                            || id < 0
                                            || ih >= sp[0] as isize
                                            || iw >= sp[1] as isize
                                            || id >= sp[2] as isize
                                        {
                                            continue;
                                        }
                                        let ii = ((ic * sp[0] + ih as usize) * sp[1] + iw as usize)
                                            * sp[2]
                                            + id as usize;
                                        acc += weight[(((oc * ci + ic) * k + kh) * k + kw) * k + kd]
                                            * input[ii];
                                    }
                                }
                            }
                        }
                        res.push(acc);
                    }
                }
            }
        }
        res
    }

    fn pseudo(n: usize, salt: u64) -> Vec<f64> {
        (0..n)
            .map(|i| (((i as u64 * 2654435761 + salt * 97) % 1000) as f64 / 500.0) - 1.0)
            .collect()
    }

    #[test]
    fn conv_matches_naive_definition() {
        for geom in [
            ConvGeom::new(3, 1, 1),
            ConvGeom::new(2, 2, 0),
            ConvGeom::new(1, 1, 0),
            ConvGeom::new(3, 2, 1),
            ConvGeom::new(2, 1, 1),
            ConvGeom::new(3, 1, 0),
        ] {
            let sp = [4, 6, 3];
            let (ci, co) = (2, 3);
            let x = pseudo(ci * 72, 1);
            let wt = pseudo(co * ci * geom.kernel.pow(3), 2);
            let b = pseudo(co, 3);
            let (fast, _) = conv3d_forward(&x, ci, sp, &wt, &b, co, geom);
            let slow = naive_conv(&x, ci, sp, &wt, &b, co, geom);
            assert_eq!(fast.len(), slow.len());
            for (a, e) in fast.iter().zip(&slow) {
                assert!((a - e).abs() < 1e-12, "{geom:?}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), u> must equal <x, conv^T(u)> (bias zero) and <w, g_w>.
        for geom in [
            ConvGeom::new(3, 1, 1),
            ConvGeom::new(2, 1, 1),
            ConvGeom::new(2, 2, 0),
            ConvGeom::new(1, 1, 0),
        ] {
            let sp = [3, 4, 2];
            let (ci, co) = (2, 2);
            let x = pseudo(ci * 24, 4);
            let wt = pseudo(co * ci * geom.kernel.pow(3), 5);
            let zeros = vec![0.0; co];
            let (y, out) = conv3d_forward(&x, ci, sp, &wt, &zeros, co, geom);
            let u = pseudo(y.len(), 6);
            let (gx, gw, _) = conv3d_backward(&x, ci, sp, &wt, co, geom, out, &u, true);
            let lhs = dot(&y, &u);
            assert!((lhs - dot(&x, &gx)).abs() < 1e-10, "{geom:?}");
            assert!((lhs - dot(&wt, &gw)).abs() < 1e-10, "{geom:?}");
            let (skipped, gw2, _) = conv3d_backward(&x, ci, sp, &wt, co, geom, out, &u, false);
            assert!(skipped.is_empty());
            assert_eq!(gw, gw2);
        }
    }

    #[test]
    fn pooling_and_upsampling_are_adjoint_pairs() {
        let sp = [2, 2, 2];
        let x = pseudo(2 * 8, 7);
        let up = upsample2(&x, 2, sp);
        let u = pseudo(up.len(), 8);
        assert!((dot(&up, &u) - dot(&x, &upsample2_backward(&u, 2, sp))).abs() < 1e-12);
        let big = [4, 4, 2];
        let y = pseudo(32, 9);
        let pooled = avg_pool2(&y, 1, big);
        let v = pseudo(pooled.len(), 10);
        assert!((dot(&pooled, &v) - dot(&y, &avg_pool2_backward(&v, 1, big))).abs() < 1e-12);
    }
}
