//! Forward pass, losses, and backpropagation.
//!
//! All reductions run in f64 in a fixed order and round to f32 at layer
//! boundaries, so results are bit-identical across runs and opt levels.

use super::topology::{LayerSpec, ModelCheckpoint};
use super::Tensor;
use crate::error::{Error, Result};

/// Activations recorded during a forward pass: input first, then each layer's output.
pub(crate) struct ForwardTrace {
    pub activations: Vec<Tensor>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Tensor {
        self.activations.last().expect("trace holds the input")
    }
}

fn dense_forward(x: &Tensor, w: &[f32], b: Option<&[f32]>, in_dim: usize, out_dim: usize) -> Tensor {
    let n = x.rows();
    let mut out = vec![0.0f32; n * out_dim];
    for r in 0..n {
        let row = x.row(r);
        for o in 0..out_dim {
            let wrow = &w[o * in_dim..(o + 1) * in_dim];
            let mut acc = b.map_or(0.0f64, |b| b[o] as f64);
            for i in 0..in_dim {
                acc += row[i] as f64 * wrow[i] as f64;
            }
            out[r * out_dim + o] = acc as f32;
        }
    }
    Tensor::new(vec![n, out_dim], out).expect("sized above")
}

pub(crate) fn forward_trace(model: &ModelCheckpoint, batch: &Tensor) -> Result<ForwardTrace> {
    if batch.cols() != model.topology.input_dim {
        return Err(Error::Dimension(format!(
            "batch width {} does not match input_dim {}",
            batch.cols(),
            model.topology.input_dim
        )));
    }
    if model.params.len() != model.topology.param_count() {
        return Err(Error::Dimension(format!(
            "parameter buffer holds {} values, topology wants {}",
            model.params.len(),
            model.topology.param_count()
        )));
    }
    let mut activations = Vec::with_capacity(model.topology.layers.len() + 1);
    activations.push(batch.clone());
    let mut ranges = model.topology.layer_ranges().into_iter();
    for (li, layer) in model.topology.layers.iter().enumerate() {
        let prev = activations.last().expect("seeded with input");
        let next = match layer {
            LayerSpec::Dense {
                in_dim, out_dim, ..
            } => {
                let r = ranges.next().expect("ranges align with dense layers");
                let w = &model.params[r.weights.clone()];
                let b = r.bias.clone().map(|b| &model.params[b]);
                dense_forward(prev, w, b, *in_dim, *out_dim)
            }
            LayerSpec::Relu => {
                let mut t = prev.clone();
                for v in t.data_mut() {
                    *v = v.max(0.0);
                }
                t
            }
        };
        if !next.all_finite() {
            return Err(Error::Numeric {
                layer: li,
                msg: "non-finite activation".into(),
            });
        }
        activations.push(next);
    }
    Ok(ForwardTrace { activations })
}

/// Pre-softmax output activations, shape batch x C.
pub fn forward(model: &ModelCheckpoint, batch: &Tensor) -> Result<Tensor> {
    Ok(forward_trace(model, batch)?
        .activations
        .pop()
        .expect("trace holds the input"))
}

/// Index of the row maximum; ties go to the lowest class index.
pub fn argmax_row(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn softmax_f64(row: &[f32]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, |a, b| a.max(b as f64));
    let exps: Vec<f64> = row.iter().map(|&z| ((z as f64) - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Row-wise softmax. Outputs are clamped to the smallest positive f32 so
/// every probability stays strictly positive after rounding.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for r in 0..logits.rows() {
        let p = softmax_f64(logits.row(r));
        for (dst, v) in out.row_mut(r).iter_mut().zip(p) {
            *dst = (v as f32).max(f32::MIN_POSITIVE);
        }
    }
    out
}

/// Log-sum-exp of a row, stable against large logits.
fn logsumexp(row: &[f32]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, |a, b| a.max(b as f64));
    let sum: f64 = row.iter().map(|&z| ((z as f64) - m).exp()).sum();
    m + sum.ln()
}

/// Per-row cluster-mass cross-entropy: -log of the softmax mass on classes
/// whose scheme bit matches `bit`. Returns the row loss and d(loss)/d(logits).
pub(crate) fn cluster_mass_row(row: &[f32], bit: u8, class_to_bit: &[u8]) -> (f64, Vec<f64>) {
    let p = softmax_f64(row);
    let mass: f64 = p
        .iter()
        .zip(class_to_bit)
        .filter(|(_, &b)| b == bit)
        .map(|(pi, _)| pi)
        .sum();
    let loss = -mass.ln();
    // d/dz_j = p_j - [j in cluster] * p_j / mass.
    let dz = p
        .iter()
        .zip(class_to_bit)
        .map(|(&pi, &b)| if b == bit { pi - pi / mass } else { pi })
        .collect();
    (loss, dz)
}

/// Batch loss selector. `Regularized` is the embedding objective: rows from
/// `key_from` on are watermark keys, which contribute cross-entropy against
/// their labels like every other row plus `lambda` times the cluster-mass
/// term toward their signature bit.
pub enum LossSpec<'a> {
    CrossEntropy {
        targets: &'a [usize],
    },
    SquaredError {
        targets: &'a Tensor,
    },
    Regularized {
        targets: &'a [usize],
        key_from: usize,
        key_bits: &'a [u8],
        class_to_bit: &'a [u8],
        lambda: f32,
    },
}

/// Loss value with its logit gradient and the two components of the
/// regularized objective (task term, watermark term).
pub struct LossEval {
    pub loss: f64,
    pub task_loss: f64,
    pub wm_loss: f64,
    pub dlogits: Tensor,
}

pub fn eval_loss(logits: &Tensor, spec: &LossSpec) -> Result<LossEval> {
    let n = logits.rows();
    let c = logits.cols();
    if n == 0 {
        return Err(Error::Dimension("loss over an empty batch".into()));
    }
    let mut dlogits = Tensor::zeros(vec![n, c])?;

    let check_targets = |targets: &[usize]| -> Result<()> {
        if targets.len() != n {
            return Err(Error::Dimension(format!(
                "{} targets for {n} rows",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Dimension(format!("target class {t} out of range {c}")));
        }
        Ok(())
    };

    let eval = match spec {
        LossSpec::CrossEntropy { targets } => {
            check_targets(targets)?;
            let mut total = 0.0f64;
            for r in 0..n {
                let row = logits.row(r);
                total += logsumexp(row) - row[targets[r]] as f64;
                let p = softmax_f64(row);
                let drow = dlogits.row_mut(r);
                for j in 0..c {
                    let one = if j == targets[r] { 1.0 } else { 0.0 };
                    drow[j] = ((p[j] - one) / n as f64) as f32;
                }
            }
            let loss = total / n as f64;
            LossEval {
                loss,
                task_loss: loss,
                wm_loss: 0.0,
                dlogits,
            }
        }
        LossSpec::SquaredError { targets } => {
            if targets.shape() != logits.shape() {
                return Err(Error::Dimension(format!(
                    "squared-error target shape {:?} vs logits {:?}",
                    targets.shape(),
                    logits.shape()
                )));
            }
            let mut total = 0.0f64;
            for r in 0..n {
                let row = logits.row(r);
                let trow = targets.row(r);
                let drow = dlogits.row_mut(r);
                for j in 0..c {
                    let d = row[j] as f64 - trow[j] as f64;
                    total += d * d;
                    drow[j] = (2.0 * d / n as f64) as f32;
                }
            }
            let loss = total / n as f64;
            LossEval {
                loss,
                task_loss: loss,
                wm_loss: 0.0,
                dlogits,
            }
        }
        LossSpec::Regularized {
            targets,
            key_from,
            key_bits,
            class_to_bit,
            lambda,
        } => {
            check_targets(targets)?;
            if *key_from > n {
                return Err(Error::Dimension(format!(
                    "key_from {key_from} beyond batch of {n}"
                )));
            }
            if key_bits.len() != n - key_from {
                return Err(Error::Dimension(format!(
                    "{} key bits for {} key rows",
                    key_bits.len(),
                    n - key_from
                )));
            }
            if class_to_bit.len() != c {
                return Err(Error::Dimension(format!(
                    "class_to_bit covers {} classes, logits have {c}",
                    class_to_bit.len()
                )));
            }
            if !lambda.is_finite() || *lambda < 0.0 {
                return Err(Error::Argument(format!("lambda must be finite and >= 0, got {lambda}")));
            }
            let keys = n - key_from;
            let mut task_total = 0.0f64;
            let mut wm_total = 0.0f64;
            for r in 0..n {
                let row = logits.row(r);
                task_total += logsumexp(row) - row[targets[r]] as f64;
                let p = softmax_f64(row);
                let drow = dlogits.row_mut(r);
                for j in 0..c {
                    let one = if j == targets[r] { 1.0 } else { 0.0 };
                    drow[j] = ((p[j] - one) / n as f64) as f32;
                }
                if r >= *key_from {
                    let bit = key_bits[r - key_from];
                    let (wl, dz) = cluster_mass_row(row, bit, class_to_bit);
                    wm_total += wl;
                    let scale = *lambda as f64 / keys as f64;
                    for j in 0..c {
                        drow[j] = (drow[j] as f64 + scale * dz[j]) as f32;
                    }
                }
            }
            let task_loss = task_total / n as f64;
            let wm_loss = if keys > 0 { wm_total / keys as f64 } else { 0.0 };
            LossEval {
                loss: task_loss + *lambda as f64 * wm_loss,
                task_loss,
                wm_loss,
                dlogits,
            }
        }
    };
    if !eval.loss.is_finite() || !eval.dlogits.all_finite() {
        return Err(Error::Numeric {
            layer: 0,
            msg: "non-finite loss".into(),
        });
    }
    Ok(eval)
}

/// Parameter and input gradients from one backward pass.
pub(crate) struct Gradients {
    pub params: Vec<f32>,
    pub inputs: Tensor,
}

/// Backpropagate a logit gradient through the model.
pub(crate) fn backprop(
    model: &ModelCheckpoint,
    trace: &ForwardTrace,
    dlogits: &Tensor,
) -> Result<Gradients> {
    let mut param_grads = vec![0.0f32; model.params.len()];
    let mut grad = dlogits.clone();
    let mut ranges = model.topology.layer_ranges();
    for (li, layer) in model.topology.layers.iter().enumerate().rev() {
        let input = &trace.activations[li];
        grad = match layer {
            LayerSpec::Dense {
                in_dim, out_dim, ..
            } => {
                let r = ranges.pop().expect("ranges align with dense layers");
                let w = &model.params[r.weights.clone()];
                let n = input.rows();
                // dW[o][i] = sum_n dY[n][o] * X[n][i]; db[o] = sum_n dY[n][o].
                for o in 0..*out_dim {
                    for i in 0..*in_dim {
                        let mut acc = 0.0f64;
                        for row in 0..n {
                            acc += grad.row(row)[o] as f64 * input.row(row)[i] as f64;
                        }
                        param_grads[r.weights.start + o * in_dim + i] = acc as f32;
                    }
                }
                if let Some(b) = &r.bias {
                    for o in 0..*out_dim {
                        let mut acc = 0.0f64;
                        for row in 0..n {
                            acc += grad.row(row)[o] as f64;
                        }
                        param_grads[b.start + o] = acc as f32;
                    }
                }
                // dX[n][i] = sum_o dY[n][o] * W[o][i].
                let mut dx = Tensor::zeros(vec![n, *in_dim])?;
                for row in 0..n {
                    let g = grad.row(row);
                    let d = dx.row_mut(row);
                    for i in 0..*in_dim {
                        let mut acc = 0.0f64;
                        for o in 0..*out_dim {
                            acc += g[o] as f64 * w[o * in_dim + i] as f64;
                        }
                        d[i] = acc as f32;
                    }
                }
                dx
            }
            LayerSpec::Relu => {
                let mut dx = grad.clone();
                for (d, &x) in dx.data_mut().iter_mut().zip(input.data()) {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                }
                dx
            }
        };
        if !grad.all_finite() {
            return Err(Error::Numeric {
                layer: li,
                msg: "non-finite gradient".into(),
            });
        }
    }
    if param_grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric {
            layer: 0,
            msg: "non-finite parameter gradient".into(),
        });
    }
    Ok(Gradients {
        params: param_grads,
        inputs: grad,
    })
}

/// Gradient of the batch loss with respect to every parameter.
pub fn grad_params(model: &ModelCheckpoint, batch: &Tensor, spec: &LossSpec) -> Result<Vec<f32>> {
    let trace = forward_trace(model, batch)?;
    let eval = eval_loss(trace.logits(), spec)?;
    Ok(backprop(model, &trace, &eval.dlogits)?.params)
}

/// Gradient of per-row cross-entropy toward `target_class` with respect to the
/// input. Rows are independent (summed, not averaged), so each output row is
/// exactly that row's own gradient.
pub fn grad_input(model: &ModelCheckpoint, batch: &Tensor, target_class: usize) -> Result<Tensor> {
    let c = model.topology.num_classes;
    if target_class >= c {
        return Err(Error::Argument(format!(
            "target class {target_class} out of range {c}"
        )));
    }
    let trace = forward_trace(model, batch)?;
    let logits = trace.logits();
    let mut dlogits = Tensor::zeros(vec![logits.rows(), c])?;
    for r in 0..logits.rows() {
        let p = softmax_f64(logits.row(r));
        let drow = dlogits.row_mut(r);
        for j in 0..c {
            let one = if j == target_class { 1.0 } else { 0.0 };
            drow[j] = (p[j] - one) as f32;
        }
    }
    Ok(backprop(model, &trace, &dlogits)?.inputs)
}

/// Fraction of rows whose argmax prediction equals the label.
pub fn accuracy(model: &ModelCheckpoint, images: &Tensor, labels: &[usize]) -> Result<f64> {
    if images.rows() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} images vs {} labels",
            images.rows(),
            labels.len()
        )));
    }
    let mut hits = 0usize;
    let n = images.rows();
    let chunk = 512;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let logits = forward(model, &images.gather_rows(&idx)?)?;
        for (r, &label) in idx.iter().enumerate().map(|(r, _)| r).zip(&labels[start..end]) {
            if argmax_row(logits.row(r)) == label {
                hits += 1;
            }
        }
        start = end;
    }
    Ok(hits as f64 / n as f64)
}
