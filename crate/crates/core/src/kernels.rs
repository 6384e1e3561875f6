//! Dense compute kernels behind the graph operations.
//!
//! Parallel work is split over independent output slices only; every output
//! element is reduced in a fixed sequential order, so results do not depend
//! on thread count.

use rayon::prelude::*;

use crate::scalar::Scalar;

#[inline]
pub fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// Dot product with fixed 8-lane unrolling. The lane layout keeps the
/// reduction order independent of the target's SIMD width.
#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::zero(); 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let off = i * 8;
        for lane in 0..8 {
            acc[lane] = acc[lane] + a[off + lane] * b[off + lane];
        }
    }
    let mut tail = S::zero();
    for i in chunks * 8..a.len() {
        tail = tail + a[i] * b[i];
    }
    let half = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    half + tail
}

/// Output spatial extent of a convolution along one axis.
#[inline]
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Below this many output pixels per plane, the transposed-patch path (long
/// contiguous runs over the patch dimension) beats the row-striped one.
const DIRECT_MIN_PIXELS: usize = 512;

/// Unfold one sample into a (OH*OW) x (C*K*K) patch matrix (patch-major).
fn im2col_t<S: Scalar>(x: &[S], g: &ConvGeometry, colt: &mut [S]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let (h, w) = (g.in_h, g.in_w);
    let (oh, ow) = (g.out_h, g.out_w);
    let rows = g.col_rows();
    debug_assert_eq!(colt.len(), rows * oh * ow);
    colt.iter_mut().for_each(|v| *v = S::zero());
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = &mut colt[(oy * ow + ox) * rows..(oy * ow + ox + 1) * rows];
            for c in 0..g.in_channels {
                let plane = &x[c * h * w..(c + 1) * h * w];
                for kh in 0..k {
                    let iy = (oy * s + kh) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let base = (c * k + kh) * k;
                    for kw in 0..k {
                        let ix = (ox * s + kw) as isize - p as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dst[base + kw] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Fold a patch-major gradient matrix back onto one sample's input gradient.
fn col2im_t_accumulate<S: Scalar>(colt: &[S], g: &ConvGeometry, dx: &mut [S]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let (h, w) = (g.in_h, g.in_w);
    let (oh, ow) = (g.out_h, g.out_w);
    let rows = g.col_rows();
    for oy in 0..oh {
        for ox in 0..ow {
            let src = &colt[(oy * ow + ox) * rows..(oy * ow + ox + 1) * rows];
            for c in 0..g.in_channels {
                let plane = &mut dx[c * h * w..(c + 1) * h * w];
                for kh in 0..k {
                    let iy = (oy * s + kh) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (c * k + kh) * k;
                    for kw in 0..k {
                        let ix = (ox * s + kw) as isize - p as isize;
                        if ix >= 0 && (ix as usize) < w {
                            plane[iy as usize * w + ix as usize] += src[base + kw];
                        }
                    }
                }
            }
        }
    }
}



/// Cross-correlation with bias. Large planes with kernel 3 / stride 1 take a
/// direct row-striped path; everything else unfolds each sample patch-major
/// and reduces along the long patch dimension.
pub fn conv2d_forward<S: Scalar>(x: &[S], w: &[S], b: &[S], g: &ConvGeometry) -> Vec<S> {
    let m = g.col_cols();
    if g.kernel == 3 && g.stride == 1 && g.padding == 1 && m >= DIRECT_MIN_PIXELS {
        return conv3x3_forward(x, w, b, g);
    }
    let rows = g.col_rows();
    let sample = g.in_channels * g.in_h * g.in_w;
    let out_sample = g.out_channels * m;
    let mut out = vec![S::zero(); g.batch * out_sample];
    out.par_chunks_mut(out_sample).enumerate().for_each(|(n, dst)| {
        let mut colt = vec![S::zero(); rows * m];
        im2col_t(&x[n * sample..(n + 1) * sample], g, &mut colt);
        for mi in 0..m {
            let patch = &colt[mi * rows..(mi + 1) * rows];
            for oc in 0..g.out_channels {
                dst[oc * m + mi] = b[oc] + dot(&w[oc * rows..(oc + 1) * rows], patch);
            }
        }
    });
    out
}

/// Valid output-column range of a 3x3/pad-1 tap with horizontal shift
/// `kw - 1`, and the matching input-column start.
#[inline]
fn shift_range(w: usize, kw: usize) -> (usize, usize, usize) {
    match kw {
        0 => (1, 0, w - 1),      // out[1..w] uses in[0..w-1]
        1 => (0, 0, w),          // aligned
        _ => (0, 1, w - 1),      // out[0..w-1] uses in[1..w]
    }
}

fn conv3x3_forward<S: Scalar>(x: &[S], w: &[S], b: &[S], g: &ConvGeometry) -> Vec<S> {
    let (h, wd) = (g.in_h, g.in_w);
    let plane = h * wd;
    let sample = g.in_channels * plane;
    let out_sample = g.out_channels * plane;
    let mut out = vec![S::zero(); g.batch * out_sample];
    out.par_chunks_mut(plane).enumerate().for_each(|(idx, dst)| {
        let n = idx / g.out_channels;
        let oc = idx % g.out_channels;
        dst.iter_mut().for_each(|v| *v = b[oc]);
        let x_n = &x[n * sample..(n + 1) * sample];
        for c in 0..g.in_channels {
            let x_plane = &x_n[c * plane..(c + 1) * plane];
            for kh in 0..3 {
                for kw in 0..3 {
                    let tap = w[((oc * g.in_channels + c) * 3 + kh) * 3 + kw];
                    let (out_start, in_start, len) = shift_range(wd, kw);
                    for oy in 0..h {
                        let iy = oy + kh;
                        if iy < 1 || iy > h {
                            continue;
                        }
                        let iy = iy - 1;
                        axpy(
                            tap,
                            &x_plane[iy * wd + in_start..iy * wd + in_start + len],
                            &mut dst[oy * wd + out_start..oy * wd + out_start + len],
                        );
                    }
                }
            }
        }
    });
    out
}

pub struct ConvGrads<S> {
    pub dx: Option<Vec<S>>,
    pub dw: Option<Vec<S>>,
    pub db: Option<Vec<S>>,
}

pub fn conv2d_backward<S: Scalar>(
    x: &[S],
    w: &[S],
    dy: &[S],
    g: &ConvGeometry,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<S> {
    let db = need_db.then(|| {
        let m = g.col_cols();
        let mut db = vec![S::zero(); g.out_channels];
        for n in 0..g.batch {
            for (oc, db_oc) in db.iter_mut().enumerate() {
                let row = &dy[(n * g.out_channels + oc) * m..(n * g.out_channels + oc + 1) * m];
                let mut acc = 0.0f64;
                for v in row {
                    acc += v.as_f64();
                }
                *db_oc += S::from_f64(acc);
            }
        }
        db
    });

    let direct = g.kernel == 3 && g.stride == 1 && g.padding == 1 && g.col_cols() >= DIRECT_MIN_PIXELS;

    // dW always reduces along the patch dimension: per output pixel, one
    // axpy of the whole patch row into the per-channel weight gradient.
    let dw = need_dw.then(|| {
        let rows = g.col_rows();
        let m = g.col_cols();
        let sample = g.in_channels * g.in_h * g.in_w;
        let mut dw = vec![S::zero(); g.out_channels * rows];
        let mut colt = vec![S::zero(); rows * m];
        for n in 0..g.batch {
            im2col_t(&x[n * sample..(n + 1) * sample], g, &mut colt);
            let dy_n = &dy[n * g.out_channels * m..(n + 1) * g.out_channels * m];
            let colt_ref = &colt;
            dw.par_chunks_mut(rows).enumerate().for_each(|(oc, dst)| {
                let dy_row = &dy_n[oc * m..(oc + 1) * m];
                for mi in 0..m {
                    axpy(dy_row[mi], &colt_ref[mi * rows..(mi + 1) * rows], dst);
                }
            });
        }
        dw
    });

    let dx = need_dx.then(|| {
        if direct {
            conv3x3_backward_input(w, dy, g)
        } else {
            let rows = g.col_rows();
            let m = g.col_cols();
            let sample = g.in_channels * g.in_h * g.in_w;
            let mut dx = vec![S::zero(); g.batch * sample];
            dx.par_chunks_mut(sample).enumerate().for_each(|(n, dst)| {
                let mut dcolt = vec![S::zero(); rows * m];
                let dy_n = &dy[n * g.out_channels * m..(n + 1) * g.out_channels * m];
                for mi in 0..m {
                    let patch = &mut dcolt[mi * rows..(mi + 1) * rows];
                    for oc in 0..g.out_channels {
                        axpy(dy_n[oc * m + mi], &w[oc * rows..(oc + 1) * rows], patch);
                    }
                }
                col2im_t_accumulate(&dcolt, g, dst);
            });
            dx
        }
    });

    ConvGrads { dx, dw, db }
}

fn conv3x3_backward_input<S: Scalar>(w: &[S], dy: &[S], g: &ConvGeometry) -> Vec<S> {
    let (h, wd) = (g.in_h, g.in_w);
    let plane = h * wd;
    let sample = g.in_channels * plane;
    let out_sample = g.out_channels * plane;
    let mut dx = vec![S::zero(); g.batch * sample];
    dx.par_chunks_mut(plane).enumerate().for_each(|(idx, dst)| {
        let n = idx / g.in_channels;
        let c = idx % g.in_channels;
        let dy_n = &dy[n * out_sample..(n + 1) * out_sample];
        for oc in 0..g.out_channels {
            let dy_plane = &dy_n[oc * plane..(oc + 1) * plane];
            for kh in 0..3 {
                for kw in 0..3 {
                    let tap = w[((oc * g.in_channels + c) * 3 + kh) * 3 + kw];
                    // Transpose of the forward tap: dx[iy][ix] += tap * dy[oy][ox]
                    // with iy = oy + kh - 1, ix = ox + kw - 1.
                    let (out_start, in_start, len) = shift_range(wd, kw);
                    for oy in 0..h {
                        let iy = oy + kh;
                        if iy < 1 || iy > h {
                            continue;
                        }
                        let iy = iy - 1;
                        axpy(
                            tap,
                            &dy_plane[oy * wd + out_start..oy * wd + out_start + len],
                            &mut dst[iy * wd + in_start..iy * wd + in_start + len],
                        );
                    }
                }
            }
        }
    });
    dx
}


/// Nearest-neighbor 2x upsampling: every pixel becomes a 2x2 block.
pub fn resize2x_forward<S: Scalar>(x: &[S], n: usize, c: usize, h: usize, w: usize) -> Vec<S> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![S::zero(); n * c * oh * ow];
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..h {
            for x_i in 0..w {
                let v = src[y * w + x_i];
                let base = 2 * y * ow + 2 * x_i;
                dst[base] = v;
                dst[base + 1] = v;
                dst[base + ow] = v;
                dst[base + ow + 1] = v;
            }
        }
    }
    out
}

/// Backward of nearest-neighbor 2x upsampling: sum each 2x2 block.
pub fn resize2x_backward<S: Scalar>(dy: &[S], n: usize, c: usize, h: usize, w: usize) -> Vec<S> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![S::zero(); n * c * h * w];
    for plane in 0..n * c {
        let src = &dy[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for x_i in 0..w {
                let base = 2 * y * ow + 2 * x_i;
                dst[y * w + x_i] = src[base] + src[base + 1] + src[base + ow] + src[base + ow + 1];
            }
        }
    }
    dx
}

/// Per-channel mean and biased variance over (batch, height, width).
pub fn channel_stats<S: Scalar>(x: &[S], n: usize, c: usize, hw: usize) -> (Vec<S>, Vec<S>) {
    let m = (n * hw) as f64;
    let mut means = Vec::with_capacity(c);
    let mut vars = Vec::with_capacity(c);
    for ch in 0..c {
        let mut sum = 0.0f64;
        for b in 0..n {
            let plane = &x[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            for v in plane {
                sum += v.as_f64();
            }
        }
        let mean = sum / m;
        let mut sq = 0.0f64;
        for b in 0..n {
            let plane = &x[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            for v in plane {
                let d = v.as_f64() - mean;
                sq += d * d;
            }
        }
        means.push(S::from_f64(mean));
        vars.push(S::from_f64(sq / m));
    }
    (means, vars)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(
        batch: usize,
        in_c: usize,
        h: usize,
        w: usize,
        out_c: usize,
        k: usize,
        s: usize,
        p: usize,
    ) -> ConvGeometry {
        ConvGeometry {
            batch,
            in_channels: in_c,
            in_h: h,
            in_w: w,
            out_channels: out_c,
            kernel: k,
            stride: s,
            padding: p,
            out_h: conv_out_dim(h, k, s, p),
            out_w: conv_out_dim(w, k, s, p),
        }
    }

    /// Direct quadruple-loop convolution, the oracle the im2col path is
    /// checked against.
    fn conv_reference(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeometry) -> Vec<f64> {
        let mut out = vec![0.0; g.batch * g.out_channels * g.out_h * g.out_w];
        for n in 0..g.batch {
            for oc in 0..g.out_channels {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let mut acc = b[oc];
                        for c in 0..g.in_channels {
                            for kh in 0..g.kernel {
                                for kw in 0..g.kernel {
                                    let iy = (oy * g.stride + kh) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kw) as isize - g.padding as isize;
                                    if iy < 0
                                        || ix < 0
                                        || iy >= g.in_h as isize
                                        || ix >= g.in_w as isize
                                    {
                                        continue;
                                    }
                                    let xi = ((n * g.in_channels + c) * g.in_h
                                        + iy as usize)
                                        * g.in_w
                                        + ix as usize;
                                    let wi = ((oc * g.in_channels + c) * g.kernel + kh)
                                        * g.kernel
                                        + kw;
                                    acc += x[xi] * w[wi];
                                }
                            }
                        }
                        out[((n * g.out_channels + oc) * g.out_h + oy) * g.out_w + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn all_ones_k4_s2_counts_valid_taps() {
        let g = geom(1, 1, 4, 4, 1, 4, 2, 1);
        let x = vec![1.0f64; 16];
        let w = vec![1.0f64; 16];
        let b = vec![0.0f64];
        let got = conv2d_forward(&x, &w, &b, &g);
        let expect = conv_reference(&x, &w, &b, &g);
        assert_eq!(got, expect);
        // Corner output windows cover a 3x3 valid region of the padded input.
        assert_eq!(got[0], 9.0);
    }

    #[test]
    fn im2col_matches_reference_on_random_input() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for &(k, s, p) in &[(3usize, 1usize, 1usize), (4, 2, 1)] {
            let g = geom(2, 3, 6, 6, 4, k, s, p);
            let x: Vec<f64> = (0..g.batch * g.in_channels * 36)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let w: Vec<f64> = (0..g.out_channels * g.col_rows())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let b: Vec<f64> = (0..g.out_channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let got = conv2d_forward(&x, &w, &b, &g);
            let expect = conv_reference(&x, &w, &b, &g);
            for (a, e) in got.iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn resize_roundtrip_gradient_counts() {
        let x = vec![1.0f32, 2.0, 3.0, 4.0];
        let y = resize2x_forward(&x, 1, 1, 2, 2);
        assert_eq!(
            y,
            vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        let dy = vec![1.0f32; 16];
        let dx = resize2x_backward(&dy, 1, 1, 2, 2);
        assert_eq!(dx, vec![4.0; 4]);
    }
}
