//! Minimal 3D network building blocks with hand-written backward passes.
//!
//! Activations are `Array5<f32>` in `(batch, channel, z, y, x)` standard
//! layout. Parameters live in a [`ParamStore`]; layers refer to them by id so
//! the forward pass can borrow the store immutably while gradients accumulate
//! into a separate [`Grads`] buffer.

use std::collections::HashMap;

use ndarray::{s, Array5, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub type ParamId = usize;

/// Leaky ReLU negative slope.
pub const LEAKY_SLOPE: f32 = 0.01;
const NORM_EPS: f64 = 1e-5;
/// Upper bound on im2col buffer size (floats) before chunking over z-planes.
const IM2COL_BUDGET: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> ParamId {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), data.len(), "param {name}");
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, shape, data });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub(crate) fn data(&self, id: ParamId) -> &[f32] {
        &self.params[id].data
    }
}

/// Gradient buffers parallel to a [`ParamStore`]; `None` marks parameters that
/// took no part in the backward pass.
#[derive(Debug, Clone, Default)]
pub struct Grads {
    pub slots: Vec<Option<Vec<f32>>>,
}

impl Grads {
    pub fn new(n: usize) -> Self {
        Grads { slots: vec![None; n] }
    }

    pub fn slot(&mut self, id: ParamId, len: usize) -> &mut [f32] {
        self.slots[id].get_or_insert_with(|| vec![0.0; len])
    }

    pub fn get(&self, id: ParamId) -> Option<&[f32]> {
        self.slots[id].as_deref()
    }

    pub fn norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }
}

/// `C = alpha * A·B + beta * C` on strided row/column views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
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
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(k == 0 || last(m, k, rsa, csa) < a.len());
    assert!(k == 0 || last(k, n, rsb, csb) < b.len());
    assert!(last(m, n, rsc, csc) < c.len());
    // SAFETY: the asserts above bound every strided access inside the slices.
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

fn dims5(a: &Array5<f32>) -> [usize; 5] {
    let d = a.dim();
    [d.0, d.1, d.2, d.3, d.4]
}

/// Blocked transpose of a row-major `rows × cols` matrix into `dst`.
fn transpose_into(src: &[f32], rows: usize, cols: usize, dst: &mut [f32]) {
    const BLOCK: usize = 32;
    for r0 in (0..rows).step_by(BLOCK) {
        for c0 in (0..cols).step_by(BLOCK) {
            for r in r0..(r0 + BLOCK).min(rows) {
                let row = &src[r * cols..(r + 1) * cols];
                for c in c0..(c0 + BLOCK).min(cols) {
                    dst[c * rows + r] = row[c];
                }
            }
        }
    }
}

/// Kaiming-normal initialisation for leaky-ReLU layers.
pub fn kaiming<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, len: usize) -> Vec<f32> {
    let gain = 2.0 / (1.0 + (LEAKY_SLOPE as f64).powi(2));
    let std = (gain / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..len).map(|_| normal.sample(rng) as f32).collect()
}

/// 3D convolution with cubic kernel, zero padding and isotropic stride.
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

struct ConvGeometry {
    cin: usize,
    k: usize,
    s: usize,
    p: usize,
    input: [usize; 3],
    output: [usize; 3],
}

impl ConvGeometry {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.output[1] * self.output[2]
    }

    fn planes_per_chunk(&self) -> usize {
        (IM2COL_BUDGET / (self.rows() * self.plane()).max(1)).clamp(1, self.output[0])
    }

    /// Lower / upper output index along one axis whose input tap lies inside.
    fn valid_range(&self, axis: usize, tap: usize) -> (usize, usize) {
        let (n_in, n_out) = (self.input[axis] as isize, self.output[axis] as isize);
        let (s, off) = (self.s as isize, tap as isize - self.p as isize);
        // o*s + off in [0, n_in)
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = ((n_in - 1 - off).div_euclid(s) + 1).clamp(0, n_out);
        (lo.min(n_out) as usize, hi.max(0) as usize)
    }

    /// Unfold output planes `[z0, z1)` of one sample into `cols` (rows × voxels).
    fn im2col(&self, x: &[f32], z0: usize, z1: usize, cols: &mut [f32]) {
        let [d, h, w] = self.input;
        let [_, ho, wo] = self.output;
        let ncols = (z1 - z0) * ho * wo;
        let k = self.k;
        cols[..self.rows() * ncols].fill(0.0);
        for ci in 0..self.cin {
            for kz in 0..k {
                let (zlo, zhi) = self.valid_range(0, kz);
                for ky in 0..k {
                    let (ylo, yhi) = self.valid_range(1, ky);
                    for kx in 0..k {
                        let (xlo, xhi) = self.valid_range(2, kx);
                        let row = ((ci * k + kz) * k + ky) * k + kx;
                        let dst = &mut cols[row * ncols..(row + 1) * ncols];
                        for oz in z0.max(zlo)..z1.min(zhi) {
                            let iz = oz * self.s + kz - self.p;
                            for oy in ylo..yhi {
                                let iy = oy * self.s + ky - self.p;
                                let src = &x[((ci * d + iz) * h + iy) * w..][..w];
                                let out = &mut dst[((oz - z0) * ho + oy) * wo..][..wo];
                                if self.s == 1 {
                                    let ix0 = xlo + kx - self.p;
                                    out[xlo..xhi].copy_from_slice(&src[ix0..ix0 + (xhi - xlo)]);
                                } else {
                                    for ox in xlo..xhi {
                                        out[ox] = src[ox * self.s + kx - self.p];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatter-add `cols` back into `dx`.
    fn col2im(&self, cols: &[f32], z0: usize, z1: usize, dx: &mut [f32]) {
        let [d, h, w] = self.input;
        let [_, ho, wo] = self.output;
        let ncols = (z1 - z0) * ho * wo;
        let k = self.k;
        for ci in 0..self.cin {
            for kz in 0..k {
                let (zlo, zhi) = self.valid_range(0, kz);
                for ky in 0..k {
                    let (ylo, yhi) = self.valid_range(1, ky);
                    for kx in 0..k {
                        let (xlo, xhi) = self.valid_range(2, kx);
                        let row = ((ci * k + kz) * k + ky) * k + kx;
                        let src = &cols[row * ncols..(row + 1) * ncols];
                        for oz in z0.max(zlo)..z1.min(zhi) {
                            let iz = oz * self.s + kz - self.p;
                            for oy in ylo..yhi {
                                let iy = oy * self.s + ky - self.p;
                                let dst = &mut dx[((ci * d + iz) * h + iy) * w..][..w];
                                let from = &src[((oz - z0) * ho + oy) * wo..][..wo];
                                if self.s == 1 {
                                    let ix0 = xlo + kx - self.p;
                                    for (d, f) in dst[ix0..ix0 + (xhi - xlo)].iter_mut().zip(&from[xlo..xhi]) {
                                        *d += f;
                                    }
                                } else {
                                    for ox in xlo..xhi {
                                        dst[ox * self.s + kx - self.p] += from[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let k3 = kernel * kernel * kernel;
        let len = out_channels * in_channels * k3;
        let weight = store.add(
            format!("{name}.weight"),
            vec![out_channels, in_channels, kernel, kernel, kernel],
            kaiming(rng, in_channels * k3, len),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), vec![out_channels], vec![0.0; out_channels]));
        Conv3d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
        }
    }

    fn geometry(&self, x: [usize; 5]) -> ConvGeometry {
        let input = [x[2], x[3], x[4]];
        let output = input.map(|n| (n + 2 * self.padding - self.kernel) / self.stride + 1);
        ConvGeometry {
            cin: self.in_channels,
            k: self.kernel,
            s: self.stride,
            p: self.padding,
            input,
            output,
        }
    }

    fn pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    pub fn forward(&self, store: &ParamStore, x: &Array5<f32>) -> Array5<f32> {
        let dims = dims5(x);
        assert_eq!(dims[1], self.in_channels, "conv input channels");
        let g = self.geometry(dims);
        let [od, oh, ow] = g.output;
        let n_out = od * oh * ow;
        let n_in: usize = g.input.iter().product();
        let rows = g.rows();
        let w = store.data(self.weight);
        let mut y = Array5::<f32>::zeros((dims[0], self.out_channels, od, oh, ow));
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let ys = y.as_slice_mut().expect("standard layout");
        let chunk = g.planes_per_chunk();
        let mut cols = if self.pointwise() { Vec::new() } else { vec![0.0; rows * chunk * g.plane()] };
        for b in 0..dims[0] {
            let xb = &xs[b * self.in_channels * n_in..(b + 1) * self.in_channels * n_in];
            let yb = &mut ys[b * self.out_channels * n_out..(b + 1) * self.out_channels * n_out];
            if self.pointwise() {
                gemm(self.out_channels, rows, n_out, w, (rows, 1), xb, (n_out, 1), 0.0, yb, (n_out, 1));
                continue;
            }
            let mut z0 = 0;
            while z0 < od {
                let z1 = (z0 + chunk).min(od);
                let nc = (z1 - z0) * g.plane();
                g.im2col(xb, z0, z1, &mut cols);
                gemm(
                    self.out_channels,
                    rows,
                    nc,
                    w,
                    (rows, 1),
                    &cols,
                    (nc, 1),
                    0.0,
                    &mut yb[z0 * g.plane()..],
                    (n_out, 1),
                );
                z0 = z1;
            }
        }
        if let Some(bias) = self.bias {
            let bv = store.data(bias);
            for mut sample in y.outer_iter_mut() {
                for (c, mut ch) in sample.outer_iter_mut().enumerate() {
                    ch.mapv_inplace(|v| v + bv[c]);
                }
            }
        }
        y
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut Grads,
        x: &Array5<f32>,
        dy: &Array5<f32>,
        need_dx: bool,
    ) -> Option<Array5<f32>> {
        let dims = dims5(x);
        let g = self.geometry(dims);
        let n_out: usize = g.output.iter().product();
        let n_in: usize = g.input.iter().product();
        let rows = g.rows();
        let cout = self.out_channels;
        let w = store.data(self.weight).to_vec();
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let dy = dy.as_standard_layout();
        let dys = dy.as_slice().expect("standard layout");
        let mut dx = need_dx.then(|| Array5::<f32>::zeros(x.raw_dim()));

        if let Some(bias) = self.bias {
            let db = grads.slot(bias, cout);
            for sample in dy.outer_iter() {
                for (c, ch) in sample.outer_iter().enumerate() {
                    db[c] += ch.sum();
                }
            }
        }

        let mut dw = grads.slot(self.weight, cout * rows).to_vec();
        let chunk = g.planes_per_chunk();
        let mut cols = if self.pointwise() { Vec::new() } else { vec![0.0; rows * chunk * g.plane()] };
        let mut cols_t = vec![0.0; cols.len()];
        let mut dcols = if self.pointwise() || !need_dx { Vec::new() } else { vec![0.0; rows * chunk * g.plane()] };
        for b in 0..dims[0] {
            let xb = &xs[b * self.in_channels * n_in..(b + 1) * self.in_channels * n_in];
            let dyb = &dys[b * cout * n_out..(b + 1) * cout * n_out];
            if self.pointwise() {
                // dW += dY · Xᵀ ; dX = Wᵀ · dY
                gemm(cout, n_out, rows, dyb, (n_out, 1), xb, (1, n_out), 1.0, &mut dw, (rows, 1));
                if let Some(dx) = dx.as_mut() {
                    let dxs = dx.as_slice_mut().expect("standard layout");
                    let dxb = &mut dxs[b * self.in_channels * n_in..(b + 1) * self.in_channels * n_in];
                    gemm(rows, cout, n_out, &w, (1, rows), dyb, (n_out, 1), 0.0, dxb, (n_out, 1));
                }
                continue;
            }
            let mut z0 = 0;
            while z0 < g.output[0] {
                let z1 = (z0 + chunk).min(g.output[0]);
                let nc = (z1 - z0) * g.plane();
                let dy_chunk = &dyb[z0 * g.plane()..];
                g.im2col(xb, z0, z1, &mut cols);
                transpose_into(&cols[..rows * nc], rows, nc, &mut cols_t);
                gemm(cout, nc, rows, dy_chunk, (n_out, 1), &cols_t, (rows, 1), 1.0, &mut dw, (rows, 1));
                if let Some(dx) = dx.as_mut() {
                    gemm(rows, cout, nc, &w, (1, rows), dy_chunk, (n_out, 1), 0.0, &mut dcols, (nc, 1));
                    let dxs = dx.as_slice_mut().expect("standard layout");
                    let dxb = &mut dxs[b * self.in_channels * n_in..(b + 1) * self.in_channels * n_in];
                    g.col2im(&dcols, z0, z1, dxb);
                }
                z0 = z1;
            }
        }
        grads.slot(self.weight, cout * rows).copy_from_slice(&dw);
        dx
    }
}

/// Transposed convolution with kernel 2 and stride 2 (exact 2× upsampling).
#[derive(Debug, Clone)]
pub struct ConvTranspose3d {
    /// Shape `(in, out, 2, 2, 2)`.
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvTranspose3d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            vec![in_channels, out_channels, 2, 2, 2],
            kaiming(rng, in_channels, in_channels * out_channels * 8),
        );
        let bias = store.add(format!("{name}.bias"), vec![out_channels], vec![0.0; out_channels]);
        ConvTranspose3d {
            weight,
            bias,
            in_channels,
            out_channels,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Array5<f32>) -> Array5<f32> {
        let [nb, cin, d, h, w] = dims5(x);
        assert_eq!(cin, self.in_channels, "transposed conv input channels");
        let n = d * h * w;
        let m = self.out_channels * 8;
        let wt = store.data(self.weight);
        let bias = store.data(self.bias);
        let mut y = Array5::<f32>::zeros((nb, self.out_channels, 2 * d, 2 * h, 2 * w));
        let mut t = vec![0.0f32; m * n];
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        for b in 0..nb {
            let xb = &xs[b * cin * n..(b + 1) * cin * n];
            gemm(m, cin, n, wt, (1, m), xb, (n, 1), 0.0, &mut t, (n, 1));
            let mut yb = y.index_axis_mut(Axis(0), b);
            for co in 0..self.out_channels {
                for off in 0..8 {
                    let (a, bb, c) = (off >> 2, (off >> 1) & 1, off & 1);
                    let row = &t[(co * 8 + off) * n..(co * 8 + off + 1) * n];
                    let mut dst = yb.slice_mut(s![co, a..;2, bb..;2, c..;2]);
                    for (i, v) in dst.iter_mut().enumerate() {
                        *v = row[i] + bias[co];
                    }
                }
            }
        }
        y
    }

    pub fn backward(&self, store: &ParamStore, grads: &mut Grads, x: &Array5<f32>, dy: &Array5<f32>) -> Array5<f32> {
        let [nb, cin, d, h, w] = dims5(x);
        let n = d * h * w;
        let m = self.out_channels * 8;
        let wt = store.data(self.weight);
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut dx = Array5::<f32>::zeros(x.raw_dim());
        let mut dt = vec![0.0f32; m * n];
        let mut dw = grads.slot(self.weight, cin * m).to_vec();
        {
            let db = grads.slot(self.bias, self.out_channels);
            for sample in dy.outer_iter() {
                for (c, ch) in sample.outer_iter().enumerate() {
                    db[c] += ch.sum();
                }
            }
        }
        for b in 0..nb {
            let dyb = dy.index_axis(Axis(0), b);
            for co in 0..self.out_channels {
                for off in 0..8 {
                    let (a, bb, c) = (off >> 2, (off >> 1) & 1, off & 1);
                    let row = &mut dt[(co * 8 + off) * n..(co * 8 + off + 1) * n];
                    for (dst, &v) in row.iter_mut().zip(dyb.slice(s![co, a..;2, bb..;2, c..;2]).iter()) {
                        *dst = v;
                    }
                }
            }
            let xb = &xs[b * cin * n..(b + 1) * cin * n];
            // dW += X · dTᵀ ; dX = W · dT
            gemm(cin, n, m, xb, (n, 1), &dt, (1, n), 1.0, &mut dw, (m, 1));
            let dxs = dx.as_slice_mut().expect("standard layout");
            gemm(cin, m, n, wt, (m, 1), &dt, (n, 1), 0.0, &mut dxs[b * cin * n..(b + 1) * cin * n], (n, 1));
        }
        grads.slot(self.weight, cin * m).copy_from_slice(&dw);
        dx
    }
}

/// Per-sample, per-channel normalisation with affine scale and shift.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

pub struct NormCache {
    xhat: Array5<f32>,
    inv_std: Vec<f64>,
}

impl InstanceNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        InstanceNorm {
            gamma: store.add(format!("{name}.gamma"), vec![channels], vec![1.0; channels]),
            beta: store.add(format!("{name}.beta"), vec![channels], vec![0.0; channels]),
            channels,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Array5<f32>) -> (Array5<f32>, NormCache) {
        let gamma = store.data(self.gamma);
        let beta = store.data(self.beta);
        let [nb, c, ..] = dims5(x);
        let mut xhat = x.clone();
        let mut y = x.clone();
        let mut inv_std = Vec::with_capacity(nb * c);
        for b in 0..nb {
            for ch in 0..c {
                let src = x.slice(s![b, ch, .., .., ..]);
                let n = src.len() as f64;
                let mean = src.iter().map(|&v| v as f64).sum::<f64>() / n;
                let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
                let istd = 1.0 / (var + NORM_EPS).sqrt();
                inv_std.push(istd);
                let (g, bt) = (gamma[ch], beta[ch]);
                let mut xh = xhat.slice_mut(s![b, ch, .., .., ..]);
                let mut yy = y.slice_mut(s![b, ch, .., .., ..]);
                ndarray::Zip::from(&mut xh).and(&mut yy).for_each(|xh, yy| {
                    let v = ((*xh as f64 - mean) * istd) as f32;
                    *xh = v;
                    *yy = g * v + bt;
                });
            }
        }
        (y, NormCache { xhat, inv_std })
    }

    pub fn backward(&self, store: &ParamStore, grads: &mut Grads, cache: &NormCache, dy: &Array5<f32>) -> Array5<f32> {
        let gamma = store.data(self.gamma).to_vec();
        let [nb, c, ..] = dims5(dy);
        let mut dgamma = vec![0.0f64; c];
        let mut dbeta = vec![0.0f64; c];
        let mut dx = Array5::<f32>::zeros(dy.raw_dim());
        for b in 0..nb {
            for ch in 0..c {
                let dyc = dy.slice(s![b, ch, .., .., ..]);
                let xh = cache.xhat.slice(s![b, ch, .., .., ..]);
                let n = dyc.len() as f64;
                let mut sum_dy = 0.0;
                let mut sum_dy_xh = 0.0;
                for (&g, &h) in dyc.iter().zip(xh.iter()) {
                    sum_dy += g as f64;
                    sum_dy_xh += g as f64 * h as f64;
                }
                dgamma[ch] += sum_dy_xh;
                dbeta[ch] += sum_dy;
                let scale = gamma[ch] as f64 * cache.inv_std[b * c + ch] / n;
                let mut out = dx.slice_mut(s![b, ch, .., .., ..]);
                ndarray::Zip::from(&mut out).and(&dyc).and(&xh).for_each(|o, &g, &h| {
                    *o = (scale * (n * g as f64 - sum_dy - h as f64 * sum_dy_xh)) as f32;
                });
            }
        }
        for (dst, v) in grads.slot(self.gamma, c).iter_mut().zip(&dgamma) {
            *dst += *v as f32;
        }
        for (dst, v) in grads.slot(self.beta, c).iter_mut().zip(&dbeta) {
            *dst += *v as f32;
        }
        dx
    }
}

pub fn leaky_relu(x: &Array5<f32>) -> Array5<f32> {
    x.mapv(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
}

/// Backward of [`leaky_relu`] given its output (sign is preserved).
pub fn leaky_relu_backward(y: &Array5<f32>, dy: &Array5<f32>) -> Array5<f32> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &v| {
        if v <= 0.0 {
            *d *= LEAKY_SLOPE;
        }
    });
    dx
}

/// Softmax over the channel axis.
pub fn softmax_channels(logits: &Array5<f32>) -> Array5<f32> {
    let mut out = logits.clone();
    let [nb, c, d, h, w] = dims5(logits);
    let spatial = d * h * w;
    let logits = logits.as_standard_layout();
    let src = logits.as_slice().expect("standard layout");
    let dst = out.as_slice_mut().expect("standard layout");
    for b in 0..nb {
        let base = b * c * spatial;
        for v in 0..spatial {
            let mut max = f32::NEG_INFINITY;
            for ch in 0..c {
                max = max.max(src[base + ch * spatial + v]);
            }
            let mut sum = 0.0f64;
            for ch in 0..c {
                let e = ((src[base + ch * spatial + v] - max) as f64).exp();
                dst[base + ch * spatial + v] = e as f32;
                sum += e;
            }
            for ch in 0..c {
                let i = base + ch * spatial + v;
                dst[i] = (dst[i] as f64 / sum) as f32;
            }
        }
    }
    out
}
