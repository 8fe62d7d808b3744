//! Trainable layers with hand-written backward passes.
//!
//! All computation is f64 and deterministic: parallel loops partition
//! *output* elements (rayon over whole channels), so every element is
//! accumulated in a fixed sequential order regardless of thread count.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::tensor::Tensor4;

/// 3D convolution with cubic kernel (size 1 or 3) and same-padding.
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub in_c: usize,
    pub out_c: usize,
    pub ksize: usize,
    pub weight: Vec<f64>, // [out_c][in_c][k][k][k]
    pub bias: Vec<f64>,   // [out_c]
    pub grad_weight: Vec<f64>,
    pub grad_bias: Vec<f64>,
}

impl Conv3d {
    /// Fan-in-scaled uniform initialization: U(-b, b) with b = sqrt(6 / fan_in).
    pub fn init(in_c: usize, out_c: usize, ksize: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(ksize == 1 || ksize == 3, "only 1x1x1 and 3x3x3 kernels");
        let k3 = ksize * ksize * ksize;
        let fan_in = in_c * k3;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = (0..out_c * in_c * k3)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Conv3d {
            in_c,
            out_c,
            ksize,
            weight,
            bias: vec![0.0; out_c],
            grad_weight: vec![0.0; out_c * in_c * k3],
            grad_bias: vec![0.0; out_c],
        }
    }

    pub fn zero_grads(&mut self) {
        self.grad_weight.fill(0.0);
        self.grad_bias.fill(0.0);
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &Tensor4) -> Tensor4 {
        debug_assert_eq!(x.channels, self.in_c);
        if self.ksize == 1 {
            return self.forward_1x1(x);
        }
        let [nx, ny, nz] = x.dims;
        let n = nx * ny * nz;
        let mut out = Tensor4::zeros(self.out_c, x.dims);
        let weight = &self.weight;
        let bias = &self.bias;
        let in_c = self.in_c;
        out.data
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(co, och)| {
                och.fill(bias[co]);
                for ci in 0..in_c {
                    let xch = &x.data[ci * n..(ci + 1) * n];
                    let wbase = (co * in_c + ci) * 27;
                    for (tap, &w) in weight[wbase..wbase + 27].iter().enumerate() {
                        let dz = (tap / 9) as i64 - 1;
                        let dy = ((tap / 3) % 3) as i64 - 1;
                        let dx = (tap % 3) as i64 - 1;
                        add_shifted(och, xch, w, [nx, ny, nz], [dx, dy, dz]);
                    }
                }
            });
        out
    }

    fn forward_1x1(&self, x: &Tensor4) -> Tensor4 {
        let n = x.spatial_len();
        let mut out = Tensor4::zeros(self.out_c, x.dims);
        let in_c = self.in_c;
        out.data
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(co, och)| {
                och.fill(self.bias[co]);
                for ci in 0..in_c {
                    let w = self.weight[co * in_c + ci];
                    let xch = &x.data[ci * n..(ci + 1) * n];
                    for (o, &v) in och.iter_mut().zip(xch) {
                        *o += w * v;
                    }
                }
            });
        out
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor4, gout: &Tensor4) -> Tensor4 {
        debug_assert_eq!(gout.channels, self.out_c);
        if self.ksize == 1 {
            return self.backward_1x1(x, gout);
        }
        let [nx, ny, nz] = x.dims;
        let n = nx * ny * nz;
        let in_c = self.in_c;
        let out_c = self.out_c;

        // Weight and bias gradients, partitioned by output channel.
        let gw_gb: Vec<(Vec<f64>, f64)> = (0..out_c)
            .into_par_iter()
            .map(|co| {
                let gch = &gout.data[co * n..(co + 1) * n];
                let gb: f64 = gch.iter().sum();
                let mut gw = vec![0.0; in_c * 27];
                for ci in 0..in_c {
                    let xch = &x.data[ci * n..(ci + 1) * n];
                    for tap in 0..27 {
                        let dz = (tap / 9) as i64 - 1;
                        let dy = ((tap / 3) % 3) as i64 - 1;
                        let dx = (tap % 3) as i64 - 1;
                        gw[ci * 27 + tap] =
                            dot_shifted(gch, xch, [nx, ny, nz], [dx, dy, dz]);
                    }
                }
                (gw, gb)
            })
            .collect();
        for (co, (gw, gb)) in gw_gb.into_iter().enumerate() {
            let base = co * in_c * 27;
            for (slot, g) in self.grad_weight[base..base + in_c * 27].iter_mut().zip(gw) {
                *slot += g;
            }
            self.grad_bias[co] += gb;
        }

        // Input gradient: gin[ci][q] += w[co][ci][d] * gout[co][q - d].
        let mut gin = Tensor4::zeros(in_c, x.dims);
        let weight = &self.weight;
        gin.data
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(ci, gich)| {
                for co in 0..out_c {
                    let gch = &gout.data[co * n..(co + 1) * n];
                    let wbase = (co * in_c + ci) * 27;
                    for (tap, &w) in weight[wbase..wbase + 27].iter().enumerate() {
                        let dz = (tap / 9) as i64 - 1;
                        let dy = ((tap / 3) % 3) as i64 - 1;
                        let dx = (tap % 3) as i64 - 1;
                        add_shifted(gich, gch, w, [nx, ny, nz], [-dx, -dy, -dz]);
                    }
                }
            });
        gin
    }

    fn backward_1x1(&mut self, x: &Tensor4, gout: &Tensor4) -> Tensor4 {
        let n = x.spatial_len();
        let in_c = self.in_c;
        for co in 0..self.out_c {
            let gch = &gout.data[co * n..(co + 1) * n];
            self.grad_bias[co] += gch.iter().sum::<f64>();
            for ci in 0..in_c {
                let xch = &x.data[ci * n..(ci + 1) * n];
                let mut acc = 0.0;
                for (g, v) in gch.iter().zip(xch) {
                    acc += g * v;
                }
                self.grad_weight[co * in_c + ci] += acc;
            }
        }
        let mut gin = Tensor4::zeros(in_c, x.dims);
        gin.data
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(ci, gich)| {
                for co in 0..self.out_c {
                    let w = self.weight[co * in_c + ci];
                    let gch = &gout.data[co * n..(co + 1) * n];
                    for (g, &v) in gich.iter_mut().zip(gch) {
                        *g += w * v;
                    }
                }
            });
        gin
    }
}

/// `dst[p] += w * src[p + d]` over the in-range region (zero padding outside).
#[inline]
fn add_shifted(dst: &mut [f64], src: &[f64], w: f64, dims: [usize; 3], d: [i64; 3]) {
    let [nx, ny, nz] = dims;
    let (z0, z1) = axis_range(nz, d[2]);
    let (y0, y1) = axis_range(ny, d[1]);
    let (x0, x1) = axis_range(nx, d[0]);
    if x0 >= x1 {
        return;
    }
    for z in z0..z1 {
        let zs = (z as i64 + d[2]) as usize;
        for y in y0..y1 {
            let ys = (y as i64 + d[1]) as usize;
            let drow = (z * ny + y) * nx;
            let srow = (zs * ny + ys) * nx;
            let s0 = (srow as i64 + x0 as i64 + d[0]) as usize;
            let dst_s = &mut dst[drow + x0..drow + x1];
            let src_s = &src[s0..s0 + (x1 - x0)];
            for (o, &v) in dst_s.iter_mut().zip(src_s) {
                *o += w * v;
            }
        }
    }
}

/// `sum over p of a[p] * b[p + d]` over the in-range region.
#[inline]
fn dot_shifted(a: &[f64], b: &[f64], dims: [usize; 3], d: [i64; 3]) -> f64 {
    let [nx, ny, nz] = dims;
    let (z0, z1) = axis_range(nz, d[2]);
    let (y0, y1) = axis_range(ny, d[1]);
    let (x0, x1) = axis_range(nx, d[0]);
    if x0 >= x1 {
        return 0.0;
    }
    let mut acc = 0.0;
    for z in z0..z1 {
        let zs = (z as i64 + d[2]) as usize;
        for y in y0..y1 {
            let ys = (y as i64 + d[1]) as usize;
            let arow = (z * ny + y) * nx;
            let brow = (zs * ny + ys) * nx;
            let b0 = (brow as i64 + x0 as i64 + d[0]) as usize;
            let a_s = &a[arow + x0..arow + x1];
            let b_s = &b[b0..b0 + (x1 - x0)];
            let mut row = 0.0;
            for (&u, &v) in a_s.iter().zip(b_s) {
                row += u * v;
            }
            acc += row;
        }
    }
    acc
}

#[inline]
fn axis_range(n: usize, d: i64) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = ((n as i64 + (-d).min(0)).max(0)) as usize;
    (lo, hi.min(n))
}

/// Per-channel spatial normalization with learned scale and shift.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub channels: usize,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub grad_gamma: Vec<f64>,
    pub grad_beta: Vec<f64>,
    pub eps: f64,
}

/// Cached normalization state for the backward pass.
pub struct NormCtx {
    pub xhat: Tensor4,
    pub inv_std: Vec<f64>,
}

impl InstanceNorm {
    pub fn init(channels: usize) -> Self {
        InstanceNorm {
            channels,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            grad_gamma: vec![0.0; channels],
            grad_beta: vec![0.0; channels],
            eps: 1e-5,
        }
    }

    pub fn zero_grads(&mut self) {
        self.grad_gamma.fill(0.0);
        self.grad_beta.fill(0.0);
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    pub fn forward(&self, x: &Tensor4) -> (Tensor4, NormCtx) {
        let n = x.spatial_len();
        let mut y = Tensor4::zeros(x.channels, x.dims);
        let mut xhat = Tensor4::zeros(x.channels, x.dims);
        let mut inv_std = vec![0.0; x.channels];
        y.data
            .par_chunks_mut(n)
            .zip(xhat.data.par_chunks_mut(n))
            .zip(inv_std.par_iter_mut())
            .enumerate()
            .for_each(|(c, ((yc, xh), istd_slot))| {
                let xc = x.channel(c);
                let mean = xc.iter().sum::<f64>() / n as f64;
                let var = xc.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let istd = 1.0 / (var + self.eps).sqrt();
                *istd_slot = istd;
                let (g, b) = (self.gamma[c], self.beta[c]);
                for i in 0..n {
                    let h = (xc[i] - mean) * istd;
                    xh[i] = h;
                    yc[i] = g * h + b;
                }
            });
        (y, NormCtx { xhat, inv_std })
    }

    pub fn backward(&mut self, gout: &Tensor4, ctx: &NormCtx) -> Tensor4 {
        let n = gout.spatial_len();
        let nf = n as f64;
        let mut gin = Tensor4::zeros(gout.channels, gout.dims);
        let gamma = &self.gamma;
        let sums: Vec<(f64, f64)> = gin
            .data
            .par_chunks_mut(n)
            .enumerate()
            .map(|(c, gc)| {
                let gy = gout.channel(c);
                let xh = ctx.xhat.channel(c);
                let sum_gy: f64 = gy.iter().sum();
                let sum_gy_xh: f64 = gy.iter().zip(xh).map(|(a, b)| a * b).sum();
                let scale = gamma[c] * ctx.inv_std[c];
                let mean_gy = sum_gy / nf;
                let mean_gy_xh = sum_gy_xh / nf;
                for i in 0..n {
                    gc[i] = scale * (gy[i] - mean_gy - xh[i] * mean_gy_xh);
                }
                (sum_gy, sum_gy_xh)
            })
            .collect();
        for (c, (sum_gy, sum_gy_xh)) in sums.into_iter().enumerate() {
            self.grad_beta[c] += sum_gy;
            self.grad_gamma[c] += sum_gy_xh;
        }
        gin
    }
}

/// In-place ReLU; returns the activated tensor.
pub fn relu(mut x: Tensor4) -> Tensor4 {
    x.data.par_chunks_mut(1 << 16).for_each(|chunk| {
        for v in chunk {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    });
    x
}

/// Gradient gate: zero where the cached activation output was zero.
pub fn relu_backward(mut g: Tensor4, activated: &Tensor4) -> Tensor4 {
    g.data
        .par_chunks_mut(1 << 16)
        .zip(activated.data.par_chunks(1 << 16))
        .for_each(|(gs, acts)| {
            for (gv, &a) in gs.iter_mut().zip(acts) {
                if a <= 0.0 {
                    *gv = 0.0;
                }
            }
        });
    g
}

/// 2x2x2 max pooling with stride 2. Input dims must be even.
pub fn max_pool(x: &Tensor4) -> (Tensor4, Vec<u8>) {
    let [nx, ny, nz] = x.dims;
    debug_assert!(nx % 2 == 0 && ny % 2 == 0 && nz % 2 == 0);
    let od = [nx / 2, ny / 2, nz / 2];
    let on = od[0] * od[1] * od[2];
    let mut out = Tensor4::zeros(x.channels, od);
    let mut idx = vec![0u8; x.channels * on];
    out.data
        .par_chunks_mut(on)
        .zip(idx.par_chunks_mut(on))
        .enumerate()
        .for_each(|(c, (oc, ic))| {
            let xc = x.channel(c);
        let mut o = 0usize;
        for z in 0..od[2] {
            for y in 0..od[1] {
                for xx in 0..od[0] {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_k = 0u8;
                    for k in 0..8u8 {
                        let dz = (k >> 2) as usize & 1;
                        let dy = (k >> 1) as usize & 1;
                        let dx = k as usize & 1;
                        let p = ((2 * z + dz) * ny + 2 * y + dy) * nx + 2 * xx + dx;
                        let v = xc[p];
                        if v > best {
                            best = v;
                            best_k = k;
                        }
                    }
                    oc[o] = best;
                    ic[o] = best_k;
                    o += 1;
                }
            }
        }
        });
    (out, idx)
}

/// Backward of [`max_pool`]: gradient routed to the argmax voxel.
pub fn max_pool_backward(gout: &Tensor4, idx: &[u8], in_dims: [usize; 3]) -> Tensor4 {
    let [nx, ny, _nz] = in_dims;
    let od = gout.dims;
    let on = gout.spatial_len();
    let n_in = in_dims[0] * in_dims[1] * in_dims[2];
    let mut gin = Tensor4::zeros(gout.channels, in_dims);
    gin.data
        .par_chunks_mut(n_in)
        .enumerate()
        .for_each(|(c, gi)| {
            let gc = gout.channel(c);
            let ic = &idx[c * on..(c + 1) * on];
        let mut o = 0usize;
        for z in 0..od[2] {
            for y in 0..od[1] {
                for xx in 0..od[0] {
                    let k = ic[o];
                    let dz = (k >> 2) as usize & 1;
                    let dy = (k >> 1) as usize & 1;
                    let dx = k as usize & 1;
                    let p = ((2 * z + dz) * ny + 2 * y + dy) * nx + 2 * xx + dx;
                    gi[p] += gc[o];
                    o += 1;
                }
            }
        }
        });
    gin
}

/// Per-axis interpolation table for 2x trilinear upsampling
/// (half-voxel-aligned, edge-clamped).
fn up_table(n_out: usize, n_in: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|o| {
            let u = (o as f64 + 0.5) / 2.0 - 0.5;
            let fl = u.floor();
            let f = u - fl;
            let i0 = fl.max(0.0) as usize;
            let i1 = ((fl as i64 + 1).max(0) as usize).min(n_in - 1);
            let i0 = i0.min(n_in - 1);
            (i0, i1, f)
        })
        .collect()
}

/// 2x trilinear upsampling.
pub fn upsample2(x: &Tensor4) -> Tensor4 {
    let [nx, ny, nz] = x.dims;
    let od = [nx * 2, ny * 2, nz * 2];
    let tx = up_table(od[0], nx);
    let ty = up_table(od[1], ny);
    let tz = up_table(od[2], nz);
    let mut out = Tensor4::zeros(x.channels, od);
    let n_out = od[0] * od[1] * od[2];
    out.data
        .par_chunks_mut(n_out)
        .enumerate()
        .for_each(|(c, oc)| {
            let xc = x.channel(c);
            let mut o = 0usize;
            for &(z0, z1, fz) in &tz {
                for &(y0, y1, fy) in &ty {
                    let r00 = (z0 * ny + y0) * nx;
                    let r10 = (z0 * ny + y1) * nx;
                    let r01 = (z1 * ny + y0) * nx;
                    let r11 = (z1 * ny + y1) * nx;
                    for &(x0, x1, fx) in &tx {
                        let c00 = xc[r00 + x0] * (1.0 - fx) + xc[r00 + x1] * fx;
                        let c10 = xc[r10 + x0] * (1.0 - fx) + xc[r10 + x1] * fx;
                        let c01 = xc[r01 + x0] * (1.0 - fx) + xc[r01 + x1] * fx;
                        let c11 = xc[r11 + x0] * (1.0 - fx) + xc[r11 + x1] * fx;
                        let c0 = c00 * (1.0 - fy) + c10 * fy;
                        let c1 = c01 * (1.0 - fy) + c11 * fy;
                        oc[o] = c0 * (1.0 - fz) + c1 * fz;
                        o += 1;
                    }
                }
            }
        });
    out
}

/// Backward of [`upsample2`]: transpose scatter of the interpolation weights.
pub fn upsample2_backward(gout: &Tensor4, in_dims: [usize; 3]) -> Tensor4 {
    let [nx, ny, _nz] = in_dims;
    let od = gout.dims;
    let tx = up_table(od[0], nx);
    let ty = up_table(od[1], ny);
    let tz = up_table(od[2], in_dims[2]);
    let mut gin = Tensor4::zeros(gout.channels, in_dims);
    let n_in = in_dims[0] * in_dims[1] * in_dims[2];
    let n_out = gout.spatial_len();
    gin.data
        .par_chunks_mut(n_in)
        .enumerate()
        .for_each(|(c, gc)| {
            let go = &gout.data[c * n_out..(c + 1) * n_out];
            let mut o = 0usize;
            for &(z0, z1, fz) in &tz {
                for &(y0, y1, fy) in &ty {
                    let r00 = (z0 * ny + y0) * nx;
                    let r10 = (z0 * ny + y1) * nx;
                    let r01 = (z1 * ny + y0) * nx;
                    let r11 = (z1 * ny + y1) * nx;
                    for &(x0, x1, fx) in &tx {
                        let g = go[o];
                        o += 1;
                        let w00 = (1.0 - fy) * (1.0 - fz);
                        let w10 = fy * (1.0 - fz);
                        let w01 = (1.0 - fy) * fz;
                        let w11 = fy * fz;
                        gc[r00 + x0] += g * w00 * (1.0 - fx);
                        gc[r00 + x1] += g * w00 * fx;
                        gc[r10 + x0] += g * w10 * (1.0 - fx);
                        gc[r10 + x1] += g * w10 * fx;
                        gc[r01 + x0] += g * w01 * (1.0 - fx);
                        gc[r01 + x1] += g * w01 * fx;
                        gc[r11 + x0] += g * w11 * (1.0 - fx);
                        gc[r11 + x1] += g * w11 * fx;
                    }
                }
            }
        });
    gin
}
