//! Layer kernels with explicit backward passes.
//!
//! Activations are stored `[batch, channel, z, y, x]` with x fastest, matching
//! [`Volume`](crate::volume::Volume). Convolutions use a 3x3x3 kernel, stride 1
//! and zero padding 1; pooling uses a 2x2x2 window, stride 2, ceil mode.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar type the network runs in: `f32` for training, `f64` for checks.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + AddAssign + SubAssign + MulAssign + Sum + Default + Debug + Send + Sync + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub fn voxels(dims: [usize; 3]) -> usize {
    dims[0] * dims[1] * dims[2]
}

pub fn pooled_dims(dims: [usize; 3]) -> [usize; 3] {
    dims.map(|n| n.div_ceil(2))
}

#[inline]
fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

#[inline]
fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let mut xc = x.chunks_exact(8);
    let mut yc = y.chunks_exact(8);
    for (a, b) in (&mut xc).zip(&mut yc) {
        for l in 0..8 {
            acc[l] += a[l] * b[l];
        }
    }
    let mut s = T::zero();
    for (&a, &b) in xc.remainder().iter().zip(yc.remainder()) {
        s += a * b;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + s
}

/// Valid output range along one axis for kernel offset `d` in {-1, 0, 1}.
#[inline]
fn span(n: usize, d: isize) -> (usize, usize) {
    ((-d).max(0) as usize, (n as isize - d.max(0)) as usize)
}

/// Visits every (output row, input row, x range) triple for one kernel tap.
#[inline]
fn for_each_row(dims: [usize; 3], tap: usize, mut f: impl FnMut(usize, usize, usize)) {
    let [nx, ny, nz] = dims;
    let (dz, dy, dx) = ((tap / 9) as isize - 1, ((tap / 3) % 3) as isize - 1, (tap % 3) as isize - 1);
    let (z0, z1) = span(nz, dz);
    let (y0, y1) = span(ny, dy);
    let (x0, x1) = span(nx, dx);
    if x0 >= x1 {
        return;
    }
    for z in z0..z1 {
        let zi = (z as isize + dz) as usize;
        for y in y0..y1 {
            let yi = (y as isize + dy) as usize;
            let out_row = (z * ny + y) * nx;
            let in_row = (zi * ny + yi) * nx;
            f(out_row + x0, (in_row as isize + x0 as isize + dx) as usize, x1 - x0);
        }
    }
}

/// `weight` is `[cout, cin, 3, 3, 3]`.
pub fn conv3d_forward<T: Real>(
    input: &[T],
    batch: usize,
    cin: usize,
    dims: [usize; 3],
    weight: &[T],
    bias: &[T],
    cout: usize,
) -> Vec<T> {
    let n = voxels(dims);
    let mut out = vec![T::zero(); batch * cout * n];
    for b in 0..batch {
        for co in 0..cout {
            let o = &mut out[(b * cout + co) * n..(b * cout + co + 1) * n];
            o.fill(bias[co]);
            for ci in 0..cin {
                let x = &input[(b * cin + ci) * n..(b * cin + ci + 1) * n];
                let w = &weight[(co * cin + ci) * 27..(co * cin + ci + 1) * 27];
                for (tap, &wt) in w.iter().enumerate() {
                    for_each_row(dims, tap, |oi, ii, len| axpy(&mut o[oi..oi + len], wt, &x[ii..ii + len]));
                }
            }
        }
    }
    out
}

/// Returns `(d_input, d_weight, d_bias)`; `d_input` is skipped when not needed.
pub fn conv3d_backward<T: Real>(
    input: &[T],
    d_out: &[T],
    batch: usize,
    cin: usize,
    dims: [usize; 3],
    weight: &[T],
    cout: usize,
    need_input_grad: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let n = voxels(dims);
    let mut d_in = need_input_grad.then(|| vec![T::zero(); batch * cin * n]);
    let mut d_w = vec![T::zero(); weight.len()];
    let mut d_b = vec![T::zero(); cout];
    for b in 0..batch {
        for co in 0..cout {
            let g = &d_out[(b * cout + co) * n..(b * cout + co + 1) * n];
            d_b[co] += g.iter().copied().sum::<T>();
            for ci in 0..cin {
                let x = &input[(b * cin + ci) * n..(b * cin + ci + 1) * n];
                let base = (co * cin + ci) * 27;
                for tap in 0..27 {
                    let mut acc = T::zero();
                    for_each_row(dims, tap, |oi, ii, len| acc += dot(&g[oi..oi + len], &x[ii..ii + len]));
                    d_w[base + tap] += acc;
                }
                if let Some(d_in) = d_in.as_mut() {
                    let dx = &mut d_in[(b * cin + ci) * n..(b * cin + ci + 1) * n];
                    for tap in 0..27 {
                        let wt = weight[base + tap];
                        for_each_row(dims, tap, |oi, ii, len| axpy(&mut dx[ii..ii + len], wt, &g[oi..oi + len]));
                    }
                }
            }
        }
    }
    (d_in, d_w, d_b)
}

pub fn relu<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect()
}

/// Passes the gradient where the pre-activation was positive.
pub fn relu_backward<T: Real>(pre: &[T], d_out: &mut [T]) {
    for (g, &p) in d_out.iter_mut().zip(pre) {
        if !(p > T::zero()) {
            *g = T::zero();
        }
    }
}

/// Batch statistics and normalized values from a train-mode pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

/// Train mode: normalizes each channel with its batch mean and biased variance.
pub fn batchnorm_train<T: Real>(
    x: &[T],
    batch: usize,
    channels: usize,
    spatial: usize,
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, BnCache<T>) {
    let count = batch * spatial;
    let inv_count = 1.0 / count as f64;
    let mut mean = vec![T::zero(); channels];
    let mut var = vec![T::zero(); channels];
    let mut inv_std = vec![T::zero(); channels];
    for c in 0..channels {
        // accumulate in f64 so the statistics do not depend on the scalar type's rounding
        let mut s = 0.0;
        for b in 0..batch {
            s += x[(b * channels + c) * spatial..][..spatial].iter().map(|v| v.f64()).sum::<f64>();
        }
        let m = s * inv_count;
        let mut ss = 0.0;
        for b in 0..batch {
            ss += x[(b * channels + c) * spatial..][..spatial].iter().map(|v| (v.f64() - m).powi(2)).sum::<f64>();
        }
        let v = ss * inv_count;
        mean[c] = T::of(m);
        var[c] = T::of(v);
        inv_std[c] = T::of(1.0 / (v + BN_EPS).sqrt());
    }
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let r = (b * channels + c) * spatial..(b * channels + c + 1) * spatial;
            for i in r {
                let h = (x[i] - mean[c]) * inv_std[c];
                xhat[i] = h;
                y[i] = gamma[c] * h + beta[c];
            }
        }
    }
    (y, BnCache { xhat, inv_std, mean, var, count })
}

/// Eval mode with running statistics. Returns the output and per-channel
/// `1/sqrt(var + eps)`.
pub fn batchnorm_eval<T: Real>(
    x: &[T],
    batch: usize,
    channels: usize,
    spatial: usize,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
) -> (Vec<T>, Vec<T>) {
    let inv_std: Vec<T> = running_var.iter().map(|&v| T::of(1.0 / (v.f64() + BN_EPS).sqrt())).collect();
    let mut y = vec![T::zero(); x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let r = (b * channels + c) * spatial..(b * channels + c + 1) * spatial;
            for i in r {
                y[i] = gamma[c] * (x[i] - running_mean[c]) * inv_std[c] + beta[c];
            }
        }
    }
    (y, inv_std)
}

/// Train-mode backward. Returns `(d_x, d_gamma, d_beta)`.
pub fn batchnorm_train_backward<T: Real>(
    d_y: &[T],
    cache: &BnCache<T>,
    batch: usize,
    channels: usize,
    spatial: usize,
    gamma: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut d_x = vec![T::zero(); d_y.len()];
    let mut d_gamma = vec![T::zero(); channels];
    let mut d_beta = vec![T::zero(); channels];
    let n = T::of(cache.count as f64);
    for c in 0..channels {
        let (mut sg, mut sgx) = (T::zero(), T::zero());
        for b in 0..batch {
            let r = (b * channels + c) * spatial..(b * channels + c + 1) * spatial;
            sg += d_y[r.clone()].iter().copied().sum::<T>();
            sgx += dot(&d_y[r.clone()], &cache.xhat[r]);
        }
        d_beta[c] = sg;
        d_gamma[c] = sgx;
        let k = gamma[c] * cache.inv_std[c] / n;
        for b in 0..batch {
            let r = (b * channels + c) * spatial..(b * channels + c + 1) * spatial;
            for i in r {
                d_x[i] = k * (n * d_y[i] - sg - cache.xhat[i] * sgx);
            }
        }
    }
    (d_x, d_gamma, d_beta)
}

pub fn batchnorm_eval_backward<T: Real>(
    d_y: &[T],
    xhat_source: &[T],
    running_mean: &[T],
    inv_std: &[T],
    batch: usize,
    channels: usize,
    spatial: usize,
    gamma: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut d_x = vec![T::zero(); d_y.len()];
    let mut d_gamma = vec![T::zero(); channels];
    let mut d_beta = vec![T::zero(); channels];
    for b in 0..batch {
        for c in 0..channels {
            let r = (b * channels + c) * spatial..(b * channels + c + 1) * spatial;
            for i in r {
                let xhat = (xhat_source[i] - running_mean[c]) * inv_std[c];
                d_gamma[c] += d_y[i] * xhat;
                d_beta[c] += d_y[i];
                d_x[i] = d_y[i] * gamma[c] * inv_std[c];
            }
        }
    }
    (d_x, d_gamma, d_beta)
}

/// 2x2x2 max pooling, stride 2, ceil mode. `planes` = batch * channels.
/// Returns the pooled values, the flat input index of each maximum (first
/// maximum on ties) and the pooled dims.
pub fn maxpool_forward<T: Real>(x: &[T], planes: usize, dims: [usize; 3]) -> (Vec<T>, Vec<u32>, [usize; 3]) {
    let [nx, ny, nz] = dims;
    let od = pooled_dims(dims);
    let [ox, oy, oz] = od;
    let (n, on) = (voxels(dims), voxels(od));
    let mut y = Vec::with_capacity(planes * on);
    let mut arg = Vec::with_capacity(planes * on);
    for p in 0..planes {
        let base = p * n;
        for z in 0..oz {
            for yy in 0..oy {
                for xx in 0..ox {
                    let mut best = T::neg_infinity();
                    let mut best_i = 0usize;
                    for kz in 2 * z..(2 * z + 2).min(nz) {
                        for ky in 2 * yy..(2 * yy + 2).min(ny) {
                            for kx in 2 * xx..(2 * xx + 2).min(nx) {
                                let i = base + (kz * ny + ky) * nx + kx;
                                if x[i] > best {
                                    best = x[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    y.push(best);
                    arg.push(best_i as u32);
                }
            }
        }
    }
    (y, arg, od)
}

pub fn maxpool_backward<T: Real>(d_out: &[T], argmax: &[u32], input_len: usize) -> Vec<T> {
    let mut d_in = vec![T::zero(); input_len];
    for (&g, &i) in d_out.iter().zip(argmax) {
        d_in[i as usize] += g;
    }
    d_in
}

/// `weight` is `[out, in]` row-major.
pub fn linear_forward<T: Real>(x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let n_in = x.len();
    bias.iter().enumerate().map(|(o, &b)| b + dot(&weight[o * n_in..(o + 1) * n_in], x)).collect()
}

/// Accumulates parameter gradients and returns the input gradient.
pub fn linear_backward<T: Real>(x: &[T], d_y: &[T], weight: &[T], d_weight: &mut [T], d_bias: &mut [T]) -> Vec<T> {
    let n_in = x.len();
    let mut d_x = vec![T::zero(); n_in];
    for (o, &g) in d_y.iter().enumerate() {
        d_bias[o] += g;
        axpy(&mut d_weight[o * n_in..(o + 1) * n_in], g, x);
        axpy(&mut d_x, g, &weight[o * n_in..(o + 1) * n_in]);
    }
    d_x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use rand::Rng;

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_for(seed, &[]);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Direct-sum reference convolution.
    fn conv_reference(x: &[f64], cin: usize, dims: [usize; 3], w: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
        let [nx, ny, nz] = dims;
        let n = voxels(dims);
        let mut out = vec![0.0; cout * n];
        for co in 0..cout {
            for z in 0..nz {
                for y in 0..ny {
                    for xx in 0..nx {
                        let mut s = b[co];
                        for ci in 0..cin {
                            for kz in 0..3 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let (zi, yi, xi) = (z + kz, y + ky, xx + kx);
                                        if zi < 1 || yi < 1 || xi < 1 || zi > nz || yi > ny || xi > nx {
                                            continue;
                                        }
                                        let v = x[ci * n + ((zi - 1) * ny + yi - 1) * nx + xi - 1];
                                        s += w[(co * cin + ci) * 27 + (kz * 3 + ky) * 3 + kx] * v;
                                    }
                                }
                            }
                        }
                        out[co * n + (z * ny + y) * nx + xx] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_sum() {
        let dims = [5, 4, 3];
        let (cin, cout) = (2, 3);
        let x = random(cin * voxels(dims), 1);
        let w = random(cout * cin * 27, 2);
        let b = random(cout, 3);
        let fast = conv3d_forward(&x, 1, cin, dims, &w, &b, cout);
        let slow = conv_reference(&x, cin, dims, &w, &b, cout);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> = <x, conv^T(g)> + <b, sum g>
        let dims = [4, 3, 5];
        let (cin, cout, batch) = (2, 2, 2);
        let x = random(batch * cin * voxels(dims), 4);
        let w = random(cout * cin * 27, 5);
        let zero_b = vec![0.0; cout];
        let g = random(batch * cout * voxels(dims), 6);
        let y = conv3d_forward(&x, batch, cin, dims, &w, &zero_b, cout);
        let (dx, dw, _) = conv3d_backward(&x, &g, batch, cin, dims, &w, cout, true);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(dx.as_ref().unwrap()).map(|(a, b)| a * b).sum();
        let rhs_w: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        // the output is linear in w as well
        assert!((lhs - rhs_w).abs() < 1e-10);
    }

    #[test]
    fn batchnorm_train_output_is_standardized() {
        let (batch, channels, spatial) = (3, 4, 50);
        let mut x = random(batch * channels * spatial, 9);
        for (i, v) in x.iter_mut().enumerate() {
            *v = *v * 7.0 + (i % 5) as f64;
        }
        let gamma = vec![1.0; channels];
        let beta = vec![0.0; channels];
        let (y, _) = batchnorm_train(&x, batch, channels, spatial, &gamma, &beta);
        for c in 0..channels {
            let vals: Vec<f64> =
                (0..batch).flat_map(|b| y[(b * channels + c) * spatial..][..spatial].to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-5, "{v}");
        }
    }

    #[test]
    fn maxpool_ceil_mode_shapes() {
        let dims = [5, 3, 2];
        let x: Vec<f64> = (0..voxels(dims)).map(|i| i as f64).collect();
        let (y, arg, od) = maxpool_forward(&x, 1, dims);
        assert_eq!(od, [3, 2, 1]);
        // the last window in x covers only index 4
        assert_eq!(y[2], x[(3 + 1) * 5 + 4]);
        assert_eq!(arg.len(), 6);
        let d = maxpool_backward(&[1.0; 6], &arg, x.len());
        assert_eq!(d.iter().sum::<f64>(), 6.0);
    }

    #[test]
    fn dot_matches_naive() {
        let a = random(37, 1);
        let b = random(37, 2);
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }
}
