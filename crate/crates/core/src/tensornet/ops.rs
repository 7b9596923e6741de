//! Layer kernels over raw slices.
//!
//! Each output element is a sequential sum in a fixed loop order. Backward
//! kernels accumulate into caller-provided gradient slices, which must be
//! zeroed by the caller.

/// `y[b, o] = sum_i w[o, i] * x[b, i] + bias[o]`.
pub fn dense_forward(x: &[f32], batch: usize, d_in: usize, w: &[f32], bias: &[f32], d_out: usize) -> Vec<f32> {
    debug_assert_eq!(x.len(), batch * d_in);
    debug_assert_eq!(w.len(), d_out * d_in);
    let mut y = vec![0.0f32; batch * d_out];
    for b in 0..batch {
        let xb = &x[b * d_in..(b + 1) * d_in];
        for o in 0..d_out {
            let wo = &w[o * d_in..(o + 1) * d_in];
            let mut acc = 0.0f32;
            for i in 0..d_in {
                acc += wo[i] * xb[i];
            }
            y[b * d_out + o] = acc + bias[o];
        }
    }
    y
}

/// Accumulates weight and bias gradients; returns the input gradient when asked.
#[allow(clippy::too_many_arguments)]
pub fn dense_backward(
    x: &[f32],
    dy: &[f32],
    batch: usize,
    d_in: usize,
    w: &[f32],
    d_out: usize,
    dw: &mut [f32],
    dbias: &mut [f32],
    want_dx: bool,
) -> Option<Vec<f32>> {
    for b in 0..batch {
        let xb = &x[b * d_in..(b + 1) * d_in];
        for o in 0..d_out {
            let g = dy[b * d_out + o];
            dbias[o] += g;
            let dwo = &mut dw[o * d_in..(o + 1) * d_in];
            for i in 0..d_in {
                dwo[i] += g * xb[i];
            }
        }
    }
    if !want_dx {
        return None;
    }
    let mut dx = vec![0.0f32; batch * d_in];
    for b in 0..batch {
        let dxb = &mut dx[b * d_in..(b + 1) * d_in];
        for o in 0..d_out {
            let g = dy[b * d_out + o];
            let wo = &w[o * d_in..(o + 1) * d_in];
            for i in 0..d_in {
                dxb[i] += wo[i] * g;
            }
        }
    }
    Some(dx)
}

/// Geometry of a stride-1 square-kernel convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl ConvShape {
    pub fn out_height(&self) -> usize {
        self.height + 2 * self.padding + 1 - self.kernel
    }

    pub fn out_width(&self) -> usize {
        self.width + 2 * self.padding + 1 - self.kernel
    }

    pub fn out_len(&self) -> usize {
        self.batch * self.out_channels * self.out_height() * self.out_width()
    }

    /// Input coordinate read by output `(oy, ox)` at kernel tap `(ky, kx)`,
    /// or `None` when it falls in the zero padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy + ky).checked_sub(self.padding)?;
        let ix = (ox + kx).checked_sub(self.padding)?;
        (iy < self.height && ix < self.width).then_some((iy, ix))
    }
}

/// Zero-padded cross-correlation; the sum over `(c, ky, kx)` runs in
/// ascending order before the bias is added.
pub fn conv2d_forward(x: &[f32], w: &[f32], bias: &[f32], s: ConvShape) -> Vec<f32> {
    let (oh, ow) = (s.out_height(), s.out_width());
    let k = s.kernel;
    let mut y = vec![0.0f32; s.out_len()];
    for b in 0..s.batch {
        for o in 0..s.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f32;
                    for c in 0..s.in_channels {
                        let xbase = (b * s.in_channels + c) * s.height * s.width;
                        let wbase = (o * s.in_channels + c) * k * k;
                        for ky in 0..k {
                            for kx in 0..k {
                                if let Some((iy, ix)) = s.source(oy, ox, ky, kx) {
                                    acc += w[wbase + ky * k + kx] * x[xbase + iy * s.width + ix];
                                }
                            }
                        }
                    }
                    y[((b * s.out_channels + o) * oh + oy) * ow + ox] = acc + bias[o];
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    s: ConvShape,
    dw: &mut [f32],
    dbias: &mut [f32],
    want_dx: bool,
) -> Option<Vec<f32>> {
    let (oh, ow) = (s.out_height(), s.out_width());
    let k = s.kernel;
    let mut dx = want_dx.then(|| vec![0.0f32; x.len()]);
    for b in 0..s.batch {
        for o in 0..s.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = dy[((b * s.out_channels + o) * oh + oy) * ow + ox];
                    dbias[o] += g;
                    for c in 0..s.in_channels {
                        let xbase = (b * s.in_channels + c) * s.height * s.width;
                        let wbase = (o * s.in_channels + c) * k * k;
                        for ky in 0..k {
                            for kx in 0..k {
                                if let Some((iy, ix)) = s.source(oy, ox, ky, kx) {
                                    dw[wbase + ky * k + kx] += g * x[xbase + iy * s.width + ix];
                                    if let Some(dx) = dx.as_mut() {
                                        dx[xbase + iy * s.width + ix] += g * w[wbase + ky * k + kx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// 2×2 stride-2 max pooling over `[planes, h, w]`. Returns the pooled values
/// and, per output, the flat input index that won. Ties keep the lowest index.
pub fn maxpool2_forward(x: &[f32], planes: usize, h: usize, w: usize) -> (Vec<f32>, Vec<usize>) {
    let (ph, pw) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ph * pw);
    let mut argmax = Vec::with_capacity(planes * ph * pw);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ph {
            for ox in 0..pw {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    (out, argmax)
}

pub fn maxpool2_backward(dy: &[f32], argmax: &[usize], input_len: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; input_len];
    for (g, &idx) in dy.iter().zip(argmax) {
        dx[idx] += g;
    }
    dx
}

/// NaN maps to zero.
pub fn relu_in_place(x: &mut [f32]) {
    for v in x {
        if v.is_nan() || *v <= 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes `grad` wherever the pre-activation was not positive.
pub fn relu_backward_in_place(grad: &mut [f32], pre: &[f32]) {
    for (g, &p) in grad.iter_mut().zip(pre) {
        if p.is_nan() || p <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Numerically shifted softmax of one row.
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut exps: Vec<f32> = logits.iter().map(|&z| (z - max).exp()).collect();
    let mut sum = 0.0f32;
    for &e in &exps {
        sum += e;
    }
    for e in &mut exps {
        *e /= sum;
    }
    exps
}

/// Mean cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &[f32], labels: &[usize], n_classes: usize) -> (f64, Vec<f32>) {
    let batch = labels.len();
    let inv_batch = 1.0 / batch as f32;
    let mut total = 0.0f64;
    let mut dlogits = vec![0.0f32; logits.len()];
    for (b, &label) in labels.iter().enumerate() {
        let row = &logits[b * n_classes..(b + 1) * n_classes];
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for &z in row {
            sum += (z - max).exp();
        }
        let log_sum = sum.ln();
        total += f64::from(-(row[label] - max - log_sum));
        let drow = &mut dlogits[b * n_classes..(b + 1) * n_classes];
        for (j, d) in drow.iter_mut().enumerate() {
            let p = ((row[j] - max).exp()) / sum;
            let target = if j == label { 1.0 } else { 0.0 };
            *d = (p - target) * inv_batch;
        }
    }
    (total / batch as f64, dlogits)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}
