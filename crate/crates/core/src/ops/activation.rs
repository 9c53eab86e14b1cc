use rand::Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::ops::Mode;
use crate::tensor::{Float, Tensor};

/// `max(0, x)`; the gradient at exactly zero is zero.
pub fn relu<T: Float>(g: &mut Graph<T>, x: NodeId) -> NodeId {
    let out = g.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
    g.record(
        "relu",
        &[x],
        out,
        Box::new(|args| {
            let data = args
                .grad
                .data()
                .iter()
                .zip(args.output.data())
                .map(|(&d, &y)| if y > T::zero() { d } else { T::zero() })
                .collect();
            vec![Some(Tensor::from_parts(args.grad.shape().to_vec(), data))]
        }),
    )
}

/// Inverted dropout: in train mode each element survives with probability
/// `keep_prob` and survivors are scaled by `1/keep_prob`. Eval mode, and
/// `keep_prob == 1`, return `x` unchanged.
pub fn dropout<T: Float, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    x: NodeId,
    keep_prob: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<NodeId> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::invalid(format!(
            "dropout: keep_prob must be in (0, 1], got {keep_prob}"
        )));
    }
    if mode == Mode::Eval || keep_prob == 1.0 {
        return Ok(x);
    }
    let scale = T::from_f64(1.0 / keep_prob);
    let mask: Vec<T> = (0..g.value(x).numel())
        .map(|_| if rng.random::<f64>() < keep_prob { scale } else { T::zero() })
        .collect();
    let xv = g.value(x);
    let out = Tensor::from_parts(
        xv.shape().to_vec(),
        xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect(),
    );
    Ok(g.record(
        "dropout",
        &[x],
        out,
        Box::new(move |args| {
            let data = args.grad.data().iter().zip(&mask).map(|(&d, &m)| d * m).collect();
            vec![Some(Tensor::from_parts(args.grad.shape().to_vec(), data))]
        }),
    ))
}
