use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{dims4, Float, Tensor};

/// `a + b` for equal shapes; the gradient passes unchanged to both inputs.
pub fn elementwise_sum<T: Float>(g: &mut Graph<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let (va, vb) = (g.value(a), g.value(b));
    if va.shape() != vb.shape() {
        return Err(Error::ShapeMismatch {
            op: "elementwise_sum",
            left: va.shape().to_vec(),
            right: vb.shape().to_vec(),
        });
    }
    let mut out = va.clone();
    out.add_assign(vb)?;
    Ok(g.record(
        "add",
        &[a, b],
        out,
        Box::new(|args| {
            args.needs
                .iter()
                .map(|&need| need.then(|| args.grad.clone()))
                .collect()
        }),
    ))
}

/// Sum of one or more equal-shaped nodes, folded left to right.
pub fn sum_many<T: Float>(g: &mut Graph<T>, nodes: &[NodeId]) -> Result<NodeId> {
    let (&first, rest) = nodes
        .split_first()
        .ok_or_else(|| Error::invalid("sum_many: no inputs"))?;
    rest.iter().try_fold(first, |acc, &n| elementwise_sum(g, acc, n))
}

/// Elementwise product of equal-shaped tensors.
pub fn mul<T: Float>(g: &mut Graph<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let (va, vb) = (g.value(a), g.value(b));
    if va.shape() != vb.shape() {
        return Err(Error::ShapeMismatch {
            op: "mul",
            left: va.shape().to_vec(),
            right: vb.shape().to_vec(),
        });
    }
    let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
    let out = Tensor::from_parts(va.shape().to_vec(), data);
    Ok(g.record(
        "mul",
        &[a, b],
        out,
        Box::new(|args| {
            let prod = |other: &Tensor<T>| {
                Tensor::from_parts(
                    other.shape().to_vec(),
                    args.grad.data().iter().zip(other.data()).map(|(&d, &o)| d * o).collect(),
                )
            };
            vec![
                args.needs[0].then(|| prod(args.inputs[1])),
                args.needs[1].then(|| prod(args.inputs[0])),
            ]
        }),
    ))
}

/// Sum of all elements as a rank-0 scalar.
pub fn sum_all<T: Float>(g: &mut Graph<T>, a: NodeId) -> NodeId {
    let out = Tensor::scalar(g.value(a).sum());
    g.record(
        "sum_all",
        &[a],
        out,
        Box::new(|args| {
            let d = args.grad.data()[0];
            vec![args.needs[0].then(|| args.inputs[0].map(|_| d))]
        }),
    )
}

/// Concatenate two `(N, C, H, W)` tensors along the channel axis, `a` first.
pub fn concat_channels<T: Float>(g: &mut Graph<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let [n, ca, h, w] = dims4(g.value(a), "concat_channels")?;
    let [nb, cb, hb, wb] = dims4(g.value(b), "concat_channels")?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::ShapeMismatch {
            op: "concat_channels",
            left: g.value(a).shape().to_vec(),
            right: g.value(b).shape().to_vec(),
        });
    }
    let plane = h * w;
    let (va, vb) = (g.value(a).data(), g.value(b).data());
    let mut data = Vec::with_capacity(n * (ca + cb) * plane);
    for img in 0..n {
        data.extend_from_slice(&va[img * ca * plane..(img + 1) * ca * plane]);
        data.extend_from_slice(&vb[img * cb * plane..(img + 1) * cb * plane]);
    }
    let out = Tensor::from_parts(vec![n, ca + cb, h, w], data);
    Ok(g.record(
        "concat_channels",
        &[a, b],
        out,
        Box::new(move |args| {
            vec![
                args.needs[0].then(|| args.grad.slice_channels(0, ca).expect("concat grad slice")),
                args.needs[1].then(|| args.grad.slice_channels(ca, ca + cb).expect("concat grad slice")),
            ]
        }),
    ))
}
