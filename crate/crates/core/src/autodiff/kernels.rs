//! Raw numeric kernels over row-major slices. Shapes are validated by callers.

/// `out[m,n] += a[m,k] · b[k,n]`
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] += g[m,n] · b[k,n]ᵀ`
pub fn matmul_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            out[i * k + p] += g_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · g[m,n]`
pub fn matmul_at_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
}

pub fn conv1d_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub fn conv_transpose1d_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let full = (len - 1) * stride + kernel;
    if full <= 2 * padding || stride == 0 {
        return None;
    }
    Some(full - 2 * padding)
}

/// Geometry shared by `conv1d` and `conv_transpose1d`.
///
/// For the forward convolution, output position `t` and tap `k` read input
/// position `t * stride + k - padding`. The transposed convolution scatters
/// along the same index map in the opposite direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    #[inline]
    pub fn tap(&self, t: usize, k: usize) -> Option<usize> {
        (t * self.stride + k).checked_sub(self.padding)
    }
}

/// conv1d forward. `x: [len, c_in]`, `w: [c_out, c_in, kernel]`, `out: [out_len, c_out]`.
pub fn conv1d_forward(x: &[f64], w: &[f64], out: &mut [f64], len: usize, c_in: usize, c_out: usize, geom: ConvGeom) {
    let out_len = out.len() / c_out;
    let kernel = geom.kernel;
    // Re-layout weights as [kernel, c_in, c_out] so the inner loop is contiguous.
    let mut wk = vec![0.0; kernel * c_in * c_out];
    for o in 0..c_out {
        for c in 0..c_in {
            for k in 0..kernel {
                wk[(k * c_in + c) * c_out + o] = w[(o * c_in + c) * kernel + k];
            }
        }
    }
    for t in 0..out_len {
        let out_row = &mut out[t * c_out..(t + 1) * c_out];
        for k in 0..kernel {
            let Some(src) = geom.tap(t, k).filter(|&s| s < len) else {
                continue;
            };
            let x_row = &x[src * c_in..(src + 1) * c_in];
            for (c, &xv) in x_row.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let w_row = &wk[(k * c_in + c) * c_out..(k * c_in + c + 1) * c_out];
                for (o, &wv) in out_row.iter_mut().zip(w_row) {
                    *o += xv * wv;
                }
            }
        }
    }
}

/// Scatter kernel shared by conv1d's input gradient and conv_transpose1d's forward.
///
/// `g: [g_len, c_g]`, `w: [c_g, c_x, kernel]` (a conv1d weight mapping `c_x → c_g`),
/// accumulates into `out: [out_len, c_x]` along the conv index map.
pub fn conv_scatter(g: &[f64], w: &[f64], out: &mut [f64], g_len: usize, c_g: usize, c_x: usize, geom: ConvGeom) {
    let out_len = out.len() / c_x;
    let kernel = geom.kernel;
    for t in 0..g_len {
        let g_row = &g[t * c_g..(t + 1) * c_g];
        for k in 0..kernel {
            let Some(dst) = geom.tap(t, k).filter(|&d| d < out_len) else {
                continue;
            };
            let out_row = &mut out[dst * c_x..(dst + 1) * c_x];
            for (o, &gv) in g_row.iter().enumerate() {
                if gv == 0.0 {
                    continue;
                }
                let base = o * c_x * kernel;
                for (c, ov) in out_row.iter_mut().enumerate() {
                    *ov += gv * w[base + c * kernel + k];
                }
            }
        }
    }
}

/// Weight gradient of the conv index map: `dw[o, c, k] += Σ_t g[t, o] · x[tap(t,k), c]`.
///
/// `g: [g_len, c_g]`, `x: [x_len, c_x]`, `dw: [c_g, c_x, kernel]`.
#[allow(clippy::too_many_arguments)]
pub fn conv_weight_grad(
    g: &[f64],
    x: &[f64],
    dw: &mut [f64],
    g_len: usize,
    x_len: usize,
    c_g: usize,
    c_x: usize,
    geom: ConvGeom,
) {
    let kernel = geom.kernel;
    for t in 0..g_len {
        let g_row = &g[t * c_g..(t + 1) * c_g];
        for k in 0..kernel {
            let Some(src) = geom.tap(t, k).filter(|&s| s < x_len) else {
                continue;
            };
            let x_row = &x[src * c_x..(src + 1) * c_x];
            for (o, &gv) in g_row.iter().enumerate() {
                if gv == 0.0 {
                    continue;
                }
                let base = o * c_x * kernel;
                for (c, &xv) in x_row.iter().enumerate() {
                    dw[base + c * kernel + k] += gv * xv;
                }
            }
        }
    }
}

/// Stable in-place softmax of one lane. Masked entries (false) become 0.
/// Returns `false` when no entry is valid.
pub fn softmax_lane(values: &mut [f64], valid: impl Fn(usize) -> bool) -> bool {
    let max = values
        .iter()
        .enumerate()
        .filter(|(i, _)| valid(*i))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return false;
    }
    let mut total = 0.0;
    for (i, v) in values.iter_mut().enumerate() {
        if valid(i) {
            *v = (*v - max).exp();
            total += *v;
        } else {
            *v = 0.0;
        }
    }
    for v in values.iter_mut() {
        *v /= total;
    }
    true
}
