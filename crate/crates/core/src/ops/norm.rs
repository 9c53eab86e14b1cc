use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::ops::Mode;
use crate::tensor::{dims4, Float, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Per-channel affine parameters and running statistics of one BN layer.
#[derive(Clone, Debug)]
pub struct BatchNormState<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Float> BatchNormState<T> {
    /// `gamma = 1`, `beta = 0`, `running_mean = 0`, `running_var = 1`.
    pub fn new(channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: Tensor::ones(&[channels])?,
            beta: Tensor::zeros(&[channels])?,
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::ones(&[channels])?,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Apply BN to `input` outside of any graph, updating running statistics
    /// in train mode.
    pub fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let gamma = g.constant(self.gamma.clone());
        let beta = g.constant(self.beta.clone());
        let (eps, momentum) = (self.eps, self.momentum);
        let y = batch_norm(
            &mut g,
            x,
            gamma,
            beta,
            &mut self.running_mean,
            &mut self.running_var,
            eps,
            momentum,
            mode,
        )?;
        Ok(g.value(y).clone())
    }
}

/// Batch normalization over `(N, H, W)` per channel, followed by
/// `gamma·x̂ + beta`.
///
/// Train mode normalizes with the biased batch variance and blends the batch
/// mean and unbiased variance into the running statistics as
/// `running ← momentum·running + (1 − momentum)·batch`. Eval mode uses the
/// running statistics.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm<T: Float>(
    g: &mut Graph<T>,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    eps: f64,
    momentum: f64,
    mode: Mode,
) -> Result<NodeId> {
    let [n, c, h, w] = dims4(g.value(x), "batch_norm")?;
    for t in [g.value(gamma), g.value(beta), &*running_mean, &*running_var] {
        if t.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                left: t.shape().to_vec(),
                right: vec![c],
            });
        }
    }
    let plane = h * w;
    let count = n * plane;
    let xv = g.value(x).data();

    let (mean, var) = match mode {
        Mode::Train => {
            if count < 2 {
                return Err(Error::invalid(format!(
                    "batch_norm: train mode needs N·H·W >= 2 values per channel, got {count}"
                )));
            }
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for ch in 0..c {
                let planes = || (0..n).map(|img| &xv[(img * c + ch) * plane..(img * c + ch + 1) * plane]);
                let m = planes().map(lane_sum).sum::<f64>() / count as f64;
                mean[ch] = m;
                var[ch] = planes().map(|p| lane_sq_dev(p, m)).sum::<f64>() / count as f64;
            }
            let unbias = count as f64 / (count - 1) as f64;
            let rm = running_mean.data_mut();
            for ch in 0..c {
                rm[ch] = T::from_f64(momentum * rm[ch].as_f64() + (1.0 - momentum) * mean[ch]);
            }
            let rv = running_var.data_mut();
            for ch in 0..c {
                rv[ch] = T::from_f64(momentum * rv[ch].as_f64() + (1.0 - momentum) * var[ch] * unbias);
            }
            (mean, var)
        }
        Mode::Eval => (
            running_mean.data().iter().map(|v| v.as_f64()).collect(),
            running_var.data().iter().map(|v| v.as_f64()).collect(),
        ),
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::from_f64(1.0 / (v + eps).sqrt())).collect();
    // The mean is split into a rounded part and its residual so that
    // subtracting it in T stays exact when the spread is small next to it.
    let mean_t: Vec<(T, T)> = mean
        .iter()
        .map(|&m| {
            let hi = T::from_f64(m);
            (hi, T::from_f64(m - hi.as_f64()))
        })
        .collect();
    let (gv, bv) = (g.value(gamma).data(), g.value(beta).data());
    let mut xhat = vec![T::zero(); xv.len()];
    let mut out = vec![T::zero(); xv.len()];
    for ((xs, (xh, ys)), idx) in xv
        .chunks(plane)
        .zip(xhat.chunks_mut(plane).zip(out.chunks_mut(plane)))
        .zip(0..)
    {
        let ch = idx % c;
        let ((m_hi, m_lo), s, gm, bt) = (mean_t[ch], inv_std[ch], gv[ch], bv[ch]);
        for ((&x, xh), y) in xs.iter().zip(xh.iter_mut()).zip(ys.iter_mut()) {
            *xh = ((x - m_hi) - m_lo) * s;
            *y = gm * *xh + bt;
        }
    }
    let shape = vec![n, c, h, w];
    let out = Tensor::from_parts(shape.clone(), out);
    let xhat = Tensor::from_parts(shape, xhat);

    Ok(g.record(
        "batch_norm",
        &[x, gamma, beta],
        out,
        Box::new(move |args| {
            let dy = args.grad.data();
            let xh = xhat.data();
            let gv = args.inputs[1].data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for ((d, x), idx) in dy.chunks(plane).zip(xh.chunks(plane)).zip(0..) {
                dbeta[idx % c] += lane_sum_t(d);
                dgamma[idx % c] += lane_dot_t(d, x);
            }
            let dx = args.needs[0].then(|| {
                let mut dx = vec![T::zero(); dy.len()];
                let m = T::from_f64(count as f64);
                for ((out, (d, x)), idx) in dx.chunks_mut(plane).zip(dy.chunks(plane).zip(xh.chunks(plane))).zip(0..) {
                    let ch = idx % c;
                    let scale = gv[ch] * inv_std[ch];
                    match mode {
                        Mode::Train => {
                            // dx = (γ/σ)/M · (M·dy − Σdy − x̂·Σ(dy·x̂))
                            let (sum_dy, sum_dy_xh) = (dbeta[ch], dgamma[ch]);
                            let k = scale / m;
                            for ((o, &dv), &xv) in out.iter_mut().zip(d).zip(x) {
                                *o = k * (m * dv - sum_dy - xv * sum_dy_xh);
                            }
                        }
                        Mode::Eval => {
                            for (o, &dv) in out.iter_mut().zip(d) {
                                *o = scale * dv;
                            }
                        }
                    }
                }
                Tensor::from_parts(args.grad.shape().to_vec(), dx)
            });
            vec![
                dx,
                args.needs[1].then(|| Tensor::from_parts(vec![c], dgamma)),
                args.needs[2].then(|| Tensor::from_parts(vec![c], dbeta)),
            ]
        }),
    ))
}

const LANES: usize = 8;

/// Sum in `f64` with independent accumulators so the loop vectorizes.
fn lane_sum<T: Float>(xs: &[T]) -> f64 {
    let mut acc = [0.0f64; LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail: f64 = chunks.remainder().iter().map(|v| v.as_f64()).sum();
    for c in chunks {
        for (a, v) in acc.iter_mut().zip(c) {
            *a += v.as_f64();
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// `Σ (x − m)²` in `f64`.
fn lane_sq_dev<T: Float>(xs: &[T], m: f64) -> f64 {
    let mut acc = [0.0f64; LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail: f64 = chunks.remainder().iter().map(|v| (v.as_f64() - m).powi(2)).sum();
    for c in chunks {
        for (a, v) in acc.iter_mut().zip(c) {
            let d = v.as_f64() - m;
            *a += d * d;
        }
    }
    acc.iter().sum::<f64>() + tail
}

fn lane_sum_t<T: Float>(xs: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail: T = chunks.remainder().iter().copied().sum();
    for c in chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a += v;
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

fn lane_dot_t<T: Float>(xs: &[T], ys: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let (cx, cy) = (xs.chunks_exact(LANES), ys.chunks_exact(LANES));
    let tail: T = cx.remainder().iter().zip(cy.remainder()).map(|(&a, &b)| a * b).sum();
    for (a8, b8) in cx.zip(cy) {
        for ((acc, &a), &b) in acc.iter_mut().zip(a8).zip(b8) {
            *acc += a * b;
        }
    }
    acc.iter().copied().sum::<T>() + tail
}
