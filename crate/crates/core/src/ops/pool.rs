use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{dims4, Float, Tensor};

/// Mean over `k × k` windows placed every `stride` cells; trailing partial
/// windows are dropped.
pub fn avg_pool2d<T: Float>(g: &mut Graph<T>, x: NodeId, k: usize, stride: usize) -> Result<NodeId> {
    if k < 1 || stride < 1 {
        return Err(Error::invalid(format!(
            "avg_pool2d: kernel and stride must be >= 1, got k={k} stride={stride}"
        )));
    }
    let [n, c, h, w] = dims4(g.value(x), "avg_pool2d")?;
    if h < k || w < k {
        return Err(Error::InvalidShape {
            op: "avg_pool2d",
            shape: g.value(x).shape().to_vec(),
            reason: format!("spatial dims smaller than kernel {k}"),
        });
    }
    let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let norm = T::from_f64(1.0 / (k * k) as f64);
    let xv = g.value(x).data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        let src = &xv[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for ky in 0..k {
                    let row = &src[(oy * stride + ky) * w + ox * stride..][..k];
                    acc += row.iter().copied().sum::<T>();
                }
                dst[oy * ow + ox] = acc * norm;
            }
        }
    }
    let out = Tensor::from_parts(vec![n, c, oh, ow], out);
    Ok(g.record(
        "avg_pool2d",
        &[x],
        out,
        Box::new(move |args| {
            let dy = args.grad.data();
            let mut dx = vec![T::zero(); n * c * h * w];
            for p in 0..n * c {
                let dst = &mut dx[p * h * w..(p + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let d = dy[(p * oh + oy) * ow + ox] * norm;
                        for ky in 0..k {
                            dst[(oy * stride + ky) * w + ox * stride..][..k]
                                .iter_mut()
                                .for_each(|v| *v += d);
                        }
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![n, c, h, w], dx))]
        }),
    ))
}

/// Per-channel spatial mean: `(N, C, H, W) → (N, C)`.
pub fn global_avg_pool<T: Float>(g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
    let [n, c, h, w] = dims4(g.value(x), "global_avg_pool")?;
    let plane = h * w;
    let norm = T::from_f64(1.0 / plane as f64);
    let out: Vec<T> = g
        .value(x)
        .data()
        .chunks(plane)
        .map(|p| p.iter().copied().sum::<T>() * norm)
        .collect();
    let out = Tensor::from_parts(vec![n, c], out);
    Ok(g.record(
        "global_avg_pool",
        &[x],
        out,
        Box::new(move |args| {
            let mut dx = Vec::with_capacity(n * c * plane);
            for &d in args.grad.data() {
                dx.extend(std::iter::repeat_n(d * norm, plane));
            }
            vec![Some(Tensor::from_parts(vec![n, c, h, w], dx))]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_mean() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = avg_pool2d(&mut g, x, 2, 2).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[2.5]);
        let z = global_avg_pool(&mut g, x).unwrap();
        assert_eq!(g.value(z).shape(), &[1, 1]);
        assert_eq!(g.value(z).data(), &[2.5]);
    }

    #[test]
    fn constant_in_constant_out_and_floor() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[2, 3, 7, 7], 1.5).unwrap());
        let y = avg_pool2d(&mut g, x, 2, 2).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 3, 3, 3]);
        assert!(g.value(y).data().iter().all(|&v| (v - 1.5).abs() < 1e-15));
    }

    #[test]
    fn global_pool_singleton_is_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[2, 2, 1, 1], &[1.0, -2.0, 3.0, 4.0]).unwrap());
        let y = global_avg_pool(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn bad_kernel_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 2, 2]).unwrap());
        assert!(avg_pool2d(&mut g, x, 0, 1).is_err());
        assert!(avg_pool2d(&mut g, x, 2, 0).is_err());
        assert!(avg_pool2d(&mut g, x, 3, 1).is_err());
    }
}
