use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Row-wise softmax of an `(N, K)` tensor, stabilized by max subtraction.
pub fn softmax<T: Float>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let &[_, k] = logits.shape() else {
        return Err(Error::InvalidShape {
            op: "softmax",
            shape: logits.shape().to_vec(),
            reason: "expected rank 2 (N, K)".into(),
        });
    };
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        out.extend(row.iter().map(|&v| (v - max).exp()));
        let z: T = out[start..].iter().copied().sum();
        out[start..].iter_mut().for_each(|v| *v /= z);
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), out))
}

/// Mean over the batch of `−log softmax(logits)[label]`, as a rank-0 node.
/// The gradient with respect to the logits is `(softmax − onehot) / N`.
pub fn softmax_cross_entropy<T: Float>(g: &mut Graph<T>, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let lv = g.value(logits);
    let probs = softmax(lv)?;
    let (n, k) = (lv.shape()[0], lv.shape()[1]);
    if labels.len() != n {
        return Err(Error::invalid(format!(
            "softmax_cross_entropy: {} labels for {n} rows",
            labels.len()
        )));
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
        return Err(Error::LabelOutOfRange {
            index,
            label,
            classes: k,
        });
    }
    let mut loss = 0.0f64;
    for (row, &label) in lv.data().chunks(k).zip(labels) {
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
        loss += lse - row[label].as_f64();
    }
    let out = Tensor::scalar(T::from_f64(loss / n as f64));
    let labels = labels.to_vec();
    Ok(g.record(
        "softmax_cross_entropy",
        &[logits],
        out,
        Box::new(move |args| {
            let scale = args.grad.data()[0] / T::from_f64(n as f64);
            let mut d = probs.data().to_vec();
            for (i, &label) in labels.iter().enumerate() {
                d[i * k + label] -= T::one();
            }
            d.iter_mut().for_each(|v| *v *= scale);
            vec![Some(Tensor::from_parts(vec![n, k], d))]
        }),
    ))
}
