//! Convolution kernels over raw slices.
//!
//! Everything is expressed as a 2-d grouped convolution in NCHW layout; 1-d
//! convolutions use `in_h = 1`. Work is split into fixed-size chunks of output
//! (or input) positions. Chunk sizes depend only on the geometry, and partial
//! weight gradients are reduced in task order, so results are bit-identical
//! regardless of how many threads rayon runs.

use rayon::prelude::*;

use crate::TensorError;

/// Upper bound on the number of floats in one im2col buffer.
const COL_BUDGET: usize = 1 << 18;
/// Weight-gradient partials computed concurrently before being folded in order.
const REDUCE_WAVE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub dilation_h: usize,
    pub dilation_w: usize,
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Output length of a strided, dilated, zero-padded convolution along one axis.
pub fn conv_out_len(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = input + 2 * padding;
    (padded >= span && stride > 0).then(|| (padded - span) / stride + 1)
}

/// Axis parameters of a convolution: `(kernel, stride, padding, dilation)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AxisSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl AxisSpec {
    pub fn new(kernel: usize, stride: usize, padding: usize, dilation: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
            dilation,
        }
    }
}

impl ConvGeometry {
    pub fn new(
        batch: usize,
        (in_channels, out_channels, groups): (usize, usize, usize),
        (in_h, in_w): (usize, usize),
        h: AxisSpec,
        w: AxisSpec,
    ) -> Result<Self, TensorError> {
        if groups == 0 || in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(TensorError::Shape(format!(
                "channels {in_channels}->{out_channels} not divisible by groups {groups}"
            )));
        }
        if h.kernel == 0 || w.kernel == 0 || h.stride == 0 || w.stride == 0 {
            return Err(TensorError::Shape("kernel and stride must be positive".into()));
        }
        let out_h = conv_out_len(in_h, h.kernel, h.stride, h.padding, h.dilation);
        let out_w = conv_out_len(in_w, w.kernel, w.stride, w.padding, w.dilation);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(TensorError::Shape(format!(
                "input {in_h}x{in_w} shorter than kernel span {}x{}",
                h.dilation * (h.kernel - 1) + 1,
                w.dilation * (w.kernel - 1) + 1
            )));
        };
        Ok(Self {
            batch,
            in_channels,
            in_h,
            in_w,
            out_channels,
            kernel_h: h.kernel,
            kernel_w: w.kernel,
            stride_h: h.stride,
            stride_w: w.stride,
            pad_h: h.padding,
            pad_w: w.padding,
            dilation_h: h.dilation,
            dilation_w: w.dilation,
            groups,
            out_h,
            out_w,
        })
    }

    fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    fn kernel_area(&self) -> usize {
        self.kernel_h * self.kernel_w
    }

    /// Rows of the im2col matrix for one group.
    fn col_rows(&self) -> usize {
        self.in_per_group() * self.kernel_area()
    }

    pub fn in_positions(&self) -> usize {
        self.in_h * self.in_w
    }

    pub fn out_positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.col_rows()
    }

    pub fn input_len(&self) -> usize {
        self.batch * self.in_channels * self.in_positions()
    }

    pub fn output_len(&self) -> usize {
        self.batch * self.out_channels * self.out_positions()
    }

    pub fn macs(&self) -> usize {
        self.output_len() * self.col_rows()
    }
}

fn chunk_len(rows: usize, total: usize) -> usize {
    (COL_BUDGET / rows.max(1)).max(256).min(total).max(1)
}

fn chunks(total: usize, len: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..total.div_ceil(len)).map(move |i| (i * len, ((i + 1) * len).min(total)))
}

/// `c = a * b + beta * c` over strided row/column layouts.
#[allow(clippy::too_many_arguments)]
fn gemm(
    (m, k, n): (usize, usize, usize),
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * rsc + j * csc] *= beta;
            }
        }
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len());
    assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Output columns `[lo, hi)` whose tap `off + ow * stride` lands inside `[0, len)`.
#[inline]
fn valid_range(off: isize, stride: usize, len: usize) -> (usize, usize) {
    let lo = if off < 0 { (-off as usize).div_ceil(stride) } else { 0 };
    let room = len as isize - off;
    let hi = if room > 0 { (room as usize).div_ceil(stride) } else { 0 };
    (lo, hi.max(lo))
}

/// Visits each kernel row of the im2col matrix for output positions
/// `[p0, p1)` as runs along one output row: `f(row, seg_start, ow0, ow1,
/// line_offset)` where `line_offset` is the input offset of the tap's
/// input row, or `None` when that row lies in the padding.
fn for_each_run(g: &ConvGeometry, (p0, p1): (usize, usize), mut f: impl FnMut(usize, usize, usize, usize, Option<usize>)) {
    let ci_g = g.in_per_group();
    for ci in 0..ci_g {
        for kh in 0..g.kernel_h {
            let off_h = (kh * g.dilation_h) as isize - g.pad_h as isize;
            for kw in 0..g.kernel_w {
                let row = (ci * g.kernel_h + kh) * g.kernel_w + kw;
                let mut p = p0;
                while p < p1 {
                    let (oh, ow0) = (p / g.out_w, p % g.out_w);
                    let ow1 = g.out_w.min(ow0 + (p1 - p));
                    let ih = (oh * g.stride_h) as isize + off_h;
                    let line = (ih >= 0 && (ih as usize) < g.in_h)
                        .then(|| ci * g.in_positions() + ih as usize * g.in_w);
                    f(row, p - p0, ow0, ow1, line);
                    p += ow1 - ow0;
                }
            }
        }
    }
}

/// Fills `cols` (`col_rows x (p1 - p0)`) for output positions `[p0, p1)`.
fn im2col(g: &ConvGeometry, x_group: &[f32], (p0, p1): (usize, usize), cols: &mut [f32]) {
    let n = p1 - p0;
    let sw = g.stride_w;
    for_each_run(g, (p0, p1), |row, seg, ow0, ow1, line| {
        let kw = row % g.kernel_w;
        let dst = &mut cols[row * n + seg..row * n + seg + (ow1 - ow0)];
        let Some(line) = line else {
            dst.fill(0.0);
            return;
        };
        let off_w = (kw * g.dilation_w) as isize - g.pad_w as isize;
        let (lo, hi) = valid_range(off_w, sw, g.in_w);
        let (lo, hi) = (lo.clamp(ow0, ow1), hi.clamp(ow0, ow1));
        let (lo, hi) = (lo, hi.max(lo));
        dst[..lo - ow0].fill(0.0);
        dst[hi - ow0..].fill(0.0);
        if hi == lo {
            return;
        }
        let src = &x_group[line..line + g.in_w];
        let start = (lo * sw) as isize + off_w;
        if sw == 1 {
            dst[lo - ow0..hi - ow0].copy_from_slice(&src[start as usize..start as usize + (hi - lo)]);
        } else {
            for (j, d) in dst[lo - ow0..hi - ow0].iter_mut().enumerate() {
                *d = src[start as usize + j * sw];
            }
        }
    });
}

/// Adjoint of [`im2col`]: accumulates `cols` into `x_group`.
fn col2im(g: &ConvGeometry, x_group: &mut [f32], (p0, p1): (usize, usize), cols: &[f32]) {
    let n = p1 - p0;
    let sw = g.stride_w;
    for_each_run(g, (p0, p1), |row, seg, ow0, ow1, line| {
        let Some(line) = line else { return };
        let kw = row % g.kernel_w;
        let off_w = (kw * g.dilation_w) as isize - g.pad_w as isize;
        let (lo, hi) = valid_range(off_w, sw, g.in_w);
        let (lo, hi) = (lo.clamp(ow0, ow1), hi.clamp(ow0, ow1));
        if hi <= lo {
            return;
        }
        let src = &cols[row * n + seg + (lo - ow0)..row * n + seg + (hi - ow0)];
        let dst = &mut x_group[line..line + g.in_w];
        let start = ((lo * sw) as isize + off_w) as usize;
        if sw == 1 {
            for (d, s) in dst[start..start + (hi - lo)].iter_mut().zip(src) {
                *d += s;
            }
        } else {
            for (j, s) in src.iter().enumerate() {
                dst[start + j * sw] += s;
            }
        }
    });
}

/// Forward convolution. `w` is `(out, in / groups, kh, kw)`.
pub fn conv_forward(g: &ConvGeometry, x: &[f32], w: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    assert_eq!(x.len(), g.input_len());
    assert_eq!(w.len(), g.weight_len());
    let rows = g.col_rows();
    let (ci_g, co_g) = (g.in_per_group(), g.out_per_group());
    let positions = g.out_positions();
    let len = chunk_len(rows, positions);
    let tasks: Vec<(usize, usize, (usize, usize))> = (0..g.batch)
        .flat_map(|b| (0..g.groups).flat_map(move |grp| chunks(positions, len).map(move |c| (b, grp, c))))
        .collect();
    let parts: Vec<Vec<f32>> = tasks
        .par_iter()
        .map(|&(b, grp, (p0, p1))| {
            let n = p1 - p0;
            let x_off = (b * g.in_channels + grp * ci_g) * g.in_positions();
            let x_group = &x[x_off..x_off + ci_g * g.in_positions()];
            let mut cols = vec![0.0; rows * n];
            im2col(g, x_group, (p0, p1), &mut cols);
            let w_group = &w[grp * co_g * rows..(grp + 1) * co_g * rows];
            let mut out = vec![0.0; co_g * n];
            gemm((co_g, rows, n), w_group, (rows, 1), &cols, (n, 1), 0.0, &mut out, (n, 1));
            out
        })
        .collect();
    let mut y = vec![0.0; g.output_len()];
    for (&(b, grp, (p0, p1)), part) in tasks.iter().zip(&parts) {
        let n = p1 - p0;
        for co in 0..co_g {
            let ch = grp * co_g + co;
            let bias_v = bias.map_or(0.0, |bv| bv[ch]);
            let dst_off = (b * g.out_channels + ch) * positions + p0;
            for (d, s) in y[dst_off..dst_off + n].iter_mut().zip(&part[co * n..(co + 1) * n]) {
                *d = s + bias_v;
            }
        }
    }
    y
}

/// Gradient of the convolution with respect to its input: `W^T gout`
/// scattered back through [`col2im`]. Each `(batch, group)` task owns a
/// disjoint slice of the result and accumulates its chunks in order.
pub fn conv_backward_input(g: &ConvGeometry, gout: &[f32], w: &[f32]) -> Vec<f32> {
    assert_eq!(gout.len(), g.output_len());
    assert_eq!(w.len(), g.weight_len());
    let rows = g.col_rows();
    let (ci_g, co_g) = (g.in_per_group(), g.out_per_group());
    let positions = g.out_positions();
    let len = chunk_len(rows, positions);
    let tasks: Vec<(usize, usize)> = (0..g.batch).flat_map(|b| (0..g.groups).map(move |grp| (b, grp))).collect();
    let parts: Vec<Vec<f32>> = tasks
        .par_iter()
        .map(|&(b, grp)| {
            let mut local = vec![0.0; ci_g * g.in_positions()];
            let w_group = &w[grp * co_g * rows..(grp + 1) * co_g * rows];
            let go_off = (b * g.out_channels + grp * co_g) * positions;
            let mut cols = Vec::new();
            for (p0, p1) in chunks(positions, len) {
                let n = p1 - p0;
                cols.clear();
                cols.resize(rows * n, 0.0);
                // (rows x co_g) * (co_g x n): weights read transposed.
                gemm(
                    (rows, co_g, n),
                    w_group,
                    (1, rows),
                    &gout[go_off + p0..],
                    (positions, 1),
                    0.0,
                    &mut cols,
                    (n, 1),
                );
                col2im(g, &mut local, (p0, p1), &cols);
            }
            local
        })
        .collect();
    let mut gx = Vec::with_capacity(g.input_len());
    for part in parts {
        gx.extend_from_slice(&part);
    }
    gx
}

/// Gradient of the convolution with respect to its weight.
pub fn conv_backward_weight(g: &ConvGeometry, gout: &[f32], x: &[f32]) -> Vec<f32> {
    assert_eq!(gout.len(), g.output_len());
    assert_eq!(x.len(), g.input_len());
    let rows = g.col_rows();
    let (ci_g, co_g) = (g.in_per_group(), g.out_per_group());
    let positions = g.out_positions();
    let len = chunk_len(rows, positions);
    let mut gw = vec![0.0; g.weight_len()];
    for grp in 0..g.groups {
        let tasks: Vec<(usize, (usize, usize))> = (0..g.batch)
            .flat_map(|b| chunks(positions, len).map(move |c| (b, c)))
            .collect();
        let acc = &mut gw[grp * co_g * rows..(grp + 1) * co_g * rows];
        for wave in tasks.chunks(REDUCE_WAVE) {
            let partials: Vec<Vec<f32>> = wave
                .par_iter()
                .map(|&(b, (p0, p1))| {
                    let n = p1 - p0;
                    let x_off = (b * g.in_channels + grp * ci_g) * g.in_positions();
                    let x_group = &x[x_off..x_off + ci_g * g.in_positions()];
                    let mut cols = vec![0.0; rows * n];
                    im2col(g, x_group, (p0, p1), &mut cols);
                    let go_off = (b * g.out_channels + grp * co_g) * positions + p0;
                    let mut part = vec![0.0; co_g * rows];
                    // part^T = cols (rows x n) * gout^T (n x co_g).
                    gemm(
                        (rows, n, co_g),
                        &cols,
                        (n, 1),
                        &gout[go_off..],
                        (1, positions),
                        0.0,
                        &mut part,
                        (1, rows),
                    );
                    part
                })
                .collect();
            for part in &partials {
                for (a, p) in acc.iter_mut().zip(part) {
                    *a += p;
                }
            }
        }
    }
    gw
}

/// Gradient with respect to the bias: sum over batch and positions.
pub fn conv_backward_bias(g: &ConvGeometry, gout: &[f32]) -> Vec<f32> {
    let positions = g.out_positions();
    let mut gb = vec![0.0; g.out_channels];
    for b in 0..g.batch {
        for (ch, acc) in gb.iter_mut().enumerate() {
            let off = (b * g.out_channels + ch) * positions;
            *acc += gout[off..off + positions].iter().sum::<f32>();
        }
    }
    gb
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_forward(g: &ConvGeometry, x: &[f32], w: &[f32]) -> Vec<f64> {
        let (ci_g, co_g) = (g.in_per_group(), g.out_per_group());
        let mut y = vec![0.0f64; g.output_len()];
        for b in 0..g.batch {
            for co in 0..g.out_channels {
                let grp = co / co_g;
                for oh in 0..g.out_h {
                    for ow in 0..g.out_w {
                        let mut acc = 0.0f64;
                        for ci in 0..ci_g {
                            for kh in 0..g.kernel_h {
                                for kw in 0..g.kernel_w {
                                    let ih = (oh * g.stride_h + kh * g.dilation_h) as isize - g.pad_h as isize;
                                    let iw = (ow * g.stride_w + kw * g.dilation_w) as isize - g.pad_w as isize;
                                    if ih < 0 || iw < 0 || ih as usize >= g.in_h || iw as usize >= g.in_w {
                                        continue;
                                    }
                                    let xi = ((b * g.in_channels + grp * ci_g + ci) * g.in_h + ih as usize) * g.in_w
                                        + iw as usize;
                                    let wi = ((co * ci_g + ci) * g.kernel_h + kh) * g.kernel_w + kw;
                                    acc += x[xi] as f64 * w[wi] as f64;
                                }
                            }
                        }
                        y[((b * g.out_channels + co) * g.out_h + oh) * g.out_w + ow] = acc;
                    }
                }
            }
        }
        y
    }

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn geometries() -> Vec<ConvGeometry> {
        vec![
            ConvGeometry::new(2, (4, 6, 2), (1, 37), AxisSpec::new(1, 1, 0, 1), AxisSpec::new(5, 3, 2, 2)).unwrap(),
            ConvGeometry::new(1, (3, 2, 1), (9, 11), AxisSpec::new(3, 1, 1, 1), AxisSpec::new(3, 2, 1, 1)).unwrap(),
            ConvGeometry::new(1, (8, 8, 4), (1, 50), AxisSpec::new(1, 1, 0, 1), AxisSpec::new(9, 4, 4, 1)).unwrap(),
            ConvGeometry::new(2, (4, 4, 2), (7, 13), AxisSpec::new(3, 2, 2, 2), AxisSpec::new(4, 3, 1, 2)).unwrap(),
            // Chunks of 404 positions split 30-wide output rows.
            ConvGeometry::new(1, (64, 2, 1), (30, 30), AxisSpec::new(9, 1, 4, 1), AxisSpec::new(9, 1, 4, 1)).unwrap(),
        ]
    }

    #[test]
    fn forward_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for g in geometries() {
            let x = random(&mut rng, g.input_len());
            let w = random(&mut rng, g.weight_len());
            let want = naive_forward(&g, &x, &w);
            let y = conv_forward(&g, &x, &w, None);
            for (a, b) in y.iter().zip(&want) {
                assert!((*a as f64 - b).abs() < 1e-5 * b.abs().max(10.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn bias_is_added_per_output_channel() {
        let g = &geometries()[3];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, g.input_len());
        let w = random(&mut rng, g.weight_len());
        let bias = random(&mut rng, g.out_channels);
        let plain = conv_forward(g, &x, &w, None);
        let biased = conv_forward(g, &x, &w, Some(&bias));
        for (i, (a, b)) in plain.iter().zip(&biased).enumerate() {
            let ch = (i / g.out_positions()) % g.out_channels;
            assert!((a + bias[ch] - b).abs() < 1e-5);
        }
    }

    /// <gout, conv(x)> must equal <conv_backward_input(gout), x> and
    /// <conv_backward_weight(gout, x), w>.
    #[test]
    fn backward_kernels_are_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for g in geometries() {
            let x = random(&mut rng, g.input_len());
            let w = random(&mut rng, g.weight_len());
            let gout = random(&mut rng, g.output_len());
            let y = conv_forward(&g, &x, &w, None);
            let lhs: f64 = y.iter().zip(&gout).map(|(a, b)| *a as f64 * *b as f64).sum();
            let gx = conv_backward_input(&g, &gout, &w);
            let rhs_x: f64 = gx.iter().zip(&x).map(|(a, b)| *a as f64 * *b as f64).sum();
            let gw = conv_backward_weight(&g, &gout, &x);
            let rhs_w: f64 = gw.iter().zip(&w).map(|(a, b)| *a as f64 * *b as f64).sum();
            assert!((lhs - rhs_x).abs() < 1e-3 * lhs.abs().max(1.0), "{lhs} vs {rhs_x}");
            assert!((lhs - rhs_w).abs() < 1e-3 * lhs.abs().max(1.0), "{lhs} vs {rhs_w}");
        }
    }

    #[test]
    fn too_short_input_is_a_shape_error() {
        let err = ConvGeometry::new(1, (1, 1, 1), (1, 4), AxisSpec::new(1, 1, 0, 1), AxisSpec::new(9, 1, 0, 1));
        assert!(err.is_err());
    }
}
