//! Oracles and fixtures shared by the integration suites and the acceptance
//! runner. Nothing here calls the code under test to produce expected values
//! except where noted.
#![allow(dead_code)]

use gmnet_core::arch::{Dataset, ForwardOptions, Model, ModelSpec};
use gmnet_core::autodiff::{relative_error, Graph, NodeId, ParamId, ParamKind, ParamSet};
use gmnet_core::data::DatasetSplit;
use gmnet_core::ops::{self, ConvConfig};
use gmnet_core::tensor::Tensor;
use gmnet_core::train::stream_rng;
use gmnet_core::Result;
use rand::Rng;

/// Steps tried in turn for each element. A central difference only counts
/// when no ReLU input changes sign anywhere between `x - h` and `x + h`.
pub const FD_STEPS: [f64; 4] = [1e-5, 1e-6, 1e-7, 1e-8];
/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// Direct seven-loop grouped convolution.
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&[f64]>, cfg: ConvConfig) -> Tensor<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, cg, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let og = o / cfg.groups;
    let oh = (h + 2 * cfg.padding - k) / cfg.stride + 1;
    let ow = (wd + 2 * cfg.padding - k) / cfg.stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            let grp = oc / og;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |bv| bv[oc]);
                    for icl in 0..cg {
                        let ic = grp * cg + icl;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * cfg.stride + ky) as isize - cfg.padding as isize;
                                let ix = (ox * cfg.stride + kx) as isize - cfg.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((b * c + ic) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((oc * cg + icl) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, o, oh, ow], out).unwrap()
}

/// Grouped conv as `g` independent dense convolutions over channel slices,
/// each computed by [`naive_conv`], concatenated along channels.
pub fn sliced_conv(x: &Tensor<f64>, w: &Tensor<f64>, cfg: ConvConfig) -> Tensor<f64> {
    let g = cfg.groups;
    let (c, o) = (x.shape()[1], w.shape()[0]);
    let dense = ConvConfig { groups: 1, ..cfg };
    let parts: Vec<Tensor<f64>> = (0..g)
        .map(|i| {
            let xs = x.slice_channels(i * c / g, (i + 1) * c / g).unwrap();
            let per = w.numel() / o;
            let ws = Tensor::new(
                &[o / g, w.shape()[1], w.shape()[2], w.shape()[3]],
                w.data()[i * (o / g) * per..(i + 1) * (o / g) * per].to_vec(),
            )
            .unwrap();
            naive_conv(&xs, &ws, None, dense)
        })
        .collect();
    let (n, oh, ow) = (x.shape()[0], parts[0].shape()[2], parts[0].shape()[3]);
    let mut out = Vec::with_capacity(n * o * oh * ow);
    for b in 0..n {
        for p in &parts {
            let len = p.shape()[1] * oh * ow;
            out.extend_from_slice(&p.data()[b * len..(b + 1) * len]);
        }
    }
    Tensor::new(&[n, o, oh, ow], out).unwrap()
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut stream_rng(seed, 99)).unwrap()
}

/// Outcome of a finite-difference comparison.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradReport {
    pub worst: f64,
    pub checked: usize,
    /// Samples where every step crossed a ReLU kink.
    pub skipped: usize,
}

impl GradReport {
    pub fn merge(&mut self, o: GradReport) {
        self.worst = self.worst.max(o.worst);
        self.checked += o.checked;
        self.skipped += o.skipped;
    }
}

/// Sign of every ReLU input in the graph. Two evaluations with equal
/// patterns lie on the same smooth piece of the loss.
pub fn relu_pattern(g: &Graph<f64>) -> Vec<bool> {
    g.nodes()
        .iter()
        .filter(|n| n.op == "relu")
        .flat_map(|n| g.value(n.inputs[0]).data().iter().map(|&v| v > 0.0))
        .collect()
}

type Probe<'a> = dyn FnMut(&ParamSet<f64>) -> Result<(f64, Vec<bool>)> + 'a;

fn central_difference(f: &mut Probe<'_>, params: &mut ParamSet<f64>, id: ParamId, e: usize, base: &[bool]) -> Result<Option<f64>> {
    let x0 = params.get(id).value.data()[e];
    for h in FD_STEPS {
        params.get_mut(id).value.data_mut()[e] = x0 + h;
        let (up, pu) = f(params)?;
        params.get_mut(id).value.data_mut()[e] = x0 - h;
        let (down, pd) = f(params)?;
        params.get_mut(id).value.data_mut()[e] = x0;
        if pu == base && pd == base {
            return Ok(Some((up - down) / (2.0 * h)));
        }
    }
    Ok(None)
}

fn compare(f: &mut Probe<'_>, params: &mut ParamSet<f64>, grads: &ParamSet<f64>, per_tensor: Option<usize>, seed: u64) -> Result<GradReport> {
    let mut rng = stream_rng(seed, 77);
    let mut report = GradReport::default();
    let (_, base) = f(params)?;
    for id in params.trainable_ids() {
        let n = params.get(id).value.numel();
        let elems: Vec<usize> = match per_tensor {
            Some(k) => (0..k).map(|_| rng.random_range(0..n)).collect(),
            None => (0..n).collect(),
        };
        let analytic = grads.get(id).grad.clone().unwrap_or_else(|| Tensor::zeros(&[n]).unwrap());
        for e in elems {
            match central_difference(f, params, id, e, &base)? {
                Some(fd) => {
                    report.worst = report.worst.max(relative_error(analytic.data()[e], fd, REL_FLOOR));
                    report.checked += 1;
                }
                None => report.skipped += 1,
            }
        }
    }
    Ok(report)
}

/// Check the gradient of `op` with respect to every element of every input.
/// The scalar under test is `Σ r ⊙ op(inputs)` for a fixed random `r`, so
/// every output element carries a distinct weight.
pub fn gradcheck_op<F>(inputs: &[(&str, Tensor<f64>)], seed: u64, op: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut params = ParamSet::new();
    for (name, t) in inputs {
        params.insert(*name, t.clone(), ParamKind::Affine)?;
    }
    let ids = params.trainable_ids();
    let mut weights: Option<Tensor<f64>> = None;
    let mut run = |ps: &ParamSet<f64>, backward: Option<&mut ParamSet<f64>>| -> Result<(f64, Vec<bool>)> {
        let mut g = Graph::new();
        let nodes: Vec<NodeId> = ids.iter().map(|&id| g.param(ps, id)).collect();
        let y = op(&mut g, &nodes)?;
        let r = weights.get_or_insert_with(|| randn(g.value(y).shape(), seed ^ 0x5eed)).clone();
        let rn = g.constant(r);
        let prod = ops::mul(&mut g, y, rn)?;
        let loss = ops::sum_all(&mut g, prod);
        let v = g.value(loss).item().unwrap();
        if let Some(out) = backward {
            g.backward_into(loss, out)?;
        }
        Ok((v, relu_pattern(&g)))
    };
    let mut grads = params.clone();
    run(&params.clone(), Some(&mut grads))?;
    let mut f = |ps: &ParamSet<f64>| run(ps, None);
    compare(&mut f, &mut params, &grads, None, seed)
}

/// Full-model check: cross-entropy of a train-mode forward pass (dropout
/// off) over a random batch, `per_tensor` sampled elements per parameter.
pub fn gradcheck_model(spec: &ModelSpec, batch: usize, seed: u64, per_tensor: usize) -> Result<GradReport> {
    let mut model: Model<f64> = Model::build(spec, &mut stream_rng(seed, 0))?;
    let s = spec.input_size;
    let x = randn(&[batch, spec.in_channels, s, s], seed);
    let labels: Vec<usize> = (0..batch).map(|i| (i * 7 + seed as usize) % spec.num_classes).collect();
    let opts = ForwardOptions {
        dropout: false,
        ..ForwardOptions::train()
    };
    let loss_of = |m: &Model<f64>, ps: &ParamSet<f64>, g: &mut Graph<f64>| -> Result<NodeId> {
        let xi = g.constant(x.clone());
        let pass = m.forward_with(ps, g, xi, opts, &mut stream_rng(0, 0))?;
        ops::softmax_cross_entropy(g, pass.logits, &labels)
    };
    let mut g = Graph::new();
    let loss = loss_of(&model, &model.params, &mut g)?;
    let mut grads = model.params.clone();
    g.backward_into(loss, &mut grads)?;
    let frozen = model.clone();
    let mut f = |ps: &ParamSet<f64>| -> Result<(f64, Vec<bool>)> {
        let mut g = Graph::new();
        let l = loss_of(&frozen, ps, &mut g)?;
        Ok((g.value(l).item().unwrap(), relu_pattern(&g)))
    };
    compare(&mut f, &mut model.params, &grads, Some(per_tensor), seed)
}

/// MNIST-shaped split where class `k` lights a 6×6 patch at a class-specific
/// position on top of uniform noise. Learnable in a few steps.
pub fn synthetic_mnist(n: usize, seed: u64) -> DatasetSplit {
    let mut rng = stream_rng(seed, 3);
    let mut data = Vec::with_capacity(n * 784);
    let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
    for &l in &labels {
        let (py, px) = (2 + (l / 5) * 14, 2 + (l % 5) * 5);
        for y in 0..28 {
            for x in 0..28 {
                let on = (py..py + 6).contains(&y) && (px..px + 6).contains(&x);
                let noise: f32 = rng.random_range(0.0..0.3);
                data.push(if on { 1.0 } else { noise });
            }
        }
    }
    DatasetSplit::new(Dataset::Mnist, Tensor::new(&[n, 1, 28, 28], data).unwrap(), labels).unwrap()
}

/// Width-0.25 MNIST GM-Net spec with a reduced input size for fast checks.
pub fn small_spec(input_size: usize) -> ModelSpec {
    let mut spec = ModelSpec::gmnet().for_dataset(Dataset::Mnist).with_width(0.25);
    spec.input_size = input_size;
    spec
}

/// Every combination of variant, connection, merge, group preset, placement,
/// bottleneck and dataset. Merge is only varied for GM-Net.
pub fn spec_grid(width: f64) -> Vec<ModelSpec> {
    use gmnet_core::arch::{Bottleneck, Connection, GroupProfile, Merge};
    let mut out = Vec::new();
    for dataset in [Dataset::Mnist, Dataset::Cifar10, Dataset::Cifar100] {
        for base in [ModelSpec::gmnet(), ModelSpec::baseline()] {
            let merges: &[Merge] = if base == ModelSpec::gmnet() { &[Merge::Sum, Merge::Concat] } else { &[Merge::Sum] };
            for &merge in merges {
                for connection in [Connection::Dense, Connection::Straight, Connection::None] {
                    for preset in ["8+4", "8+2", "4+4", "8+4&16+8"] {
                        for placement in ["none", "block1", "block3", "both"] {
                            for bottleneck in [Bottleneck::Grouped, Bottleneck::Dense] {
                                let mut s = base.clone().for_dataset(dataset).with_width(width);
                                s.merge = merge;
                                s.connection = connection;
                                s.bottleneck = bottleneck;
                                s.groups = GroupProfile::preset(preset).unwrap().with_placement(placement).unwrap();
                                out.push(s);
                            }
                        }
                    }
                }
            }
        }
    }
    out
}
