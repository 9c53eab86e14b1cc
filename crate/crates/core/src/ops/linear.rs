use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Float, MatRef, Tensor};

/// `input · weightᵀ + bias` with `input (N, D)`, `weight (K, D)`, `bias (K)`.
pub fn linear<T: Float>(g: &mut Graph<T>, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
    let (xs, ws, bs) = (g.value(x).shape(), g.value(weight).shape(), g.value(bias).shape());
    let (&[n, d], &[k, d2]) = (xs, ws) else {
        return Err(Error::ShapeMismatch {
            op: "linear",
            left: xs.to_vec(),
            right: ws.to_vec(),
        });
    };
    if d != d2 || bs != [k] {
        return Err(Error::ShapeMismatch {
            op: "linear",
            left: xs.to_vec(),
            right: ws.to_vec(),
        });
    }
    let mut out = Vec::with_capacity(n * k);
    for _ in 0..n {
        out.extend_from_slice(g.value(bias).data());
    }
    gemm(
        T::one(),
        MatRef::row_major(g.value(x).data(), n, d),
        MatRef::row_major(g.value(weight).data(), k, d).t(),
        T::one(),
        &mut out,
    );
    let out = Tensor::from_parts(vec![n, k], out);
    Ok(g.record(
        "linear",
        &[x, weight, bias],
        out,
        Box::new(move |args| {
            let dy = MatRef::row_major(args.grad.data(), n, k);
            let dx = args.needs[0].then(|| {
                let mut dx = vec![T::zero(); n * d];
                gemm(T::one(), dy, MatRef::row_major(args.inputs[1].data(), k, d), T::zero(), &mut dx);
                Tensor::from_parts(vec![n, d], dx)
            });
            let dw = args.needs[1].then(|| {
                let mut dw = vec![T::zero(); k * d];
                gemm(T::one(), dy.t(), MatRef::row_major(args.inputs[0].data(), n, d), T::zero(), &mut dw);
                Tensor::from_parts(vec![k, d], dw)
            });
            let db = args.needs[2].then(|| {
                let mut db = vec![T::zero(); k];
                for row in args.grad.data().chunks(k) {
                    db.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                }
                Tensor::from_parts(vec![k], db)
            });
            vec![dx, dw, db]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_and_zero_weight() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let eye = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let zb = g.constant(Tensor::zeros(&[2]).unwrap());
        let y = linear(&mut g, x, eye, zb).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let zw = g.constant(Tensor::zeros(&[3, 2]).unwrap());
        let b = g.constant(Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap());
        let y = linear(&mut g, x, zw, b).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn matches_naive_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs = Tensor::<f64>::randn(&[5, 7], 1.0, &mut rng).unwrap();
        let ws = Tensor::<f64>::randn(&[3, 7], 1.0, &mut rng).unwrap();
        let bs = Tensor::<f64>::randn(&[3], 1.0, &mut rng).unwrap();
        let mut want = vec![0.0; 15];
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = bs.data()[j];
                for l in 0..7 {
                    acc += xs.data()[i * 7 + l] * ws.data()[j * 7 + l];
                }
                want[i * 3 + j] = acc;
            }
        }
        let mut g = Graph::new();
        let (x, w, b) = (g.constant(xs), g.constant(ws), g.constant(bs));
        let y = linear(&mut g, x, w, b).unwrap();
        assert!(g.value(y).max_abs_diff(&Tensor::new(&[5, 3], want).unwrap()) < 1e-6);
    }

    #[test]
    fn dim_mismatch_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 3]).unwrap());
        let w = g.constant(Tensor::zeros(&[4, 2]).unwrap());
        let b = g.constant(Tensor::zeros(&[4]).unwrap());
        assert!(linear(&mut g, x, w, b).is_err());
    }
}
