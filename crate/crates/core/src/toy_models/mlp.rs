use super::{output_loss, Batch, ToyModelSpec};

/// Pre-activations and activations of every layer for one input.
pub(super) struct MlpTrace {
    /// `acts[0]` is the input; `acts[l + 1]` the output of layer `l`
    /// (linear for the last layer).
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub(super) fn output(&self) -> Vec<f64> {
        self.acts.last().cloned().unwrap_or_default()
    }
}

pub(super) fn forward(spec: &ToyModelSpec, params: &[&[f64]], x: &[f64]) -> MlpTrace {
    let depth = spec.dims.len() - 1;
    let mut acts = vec![x.to_vec()];
    let mut pre = Vec::with_capacity(depth);
    for l in 0..depth {
        let (n_in, n_out) = (spec.dims[l], spec.dims[l + 1]);
        let (w, b) = (params[2 * l], params[2 * l + 1]);
        let a = &acts[l];
        let mut z = b.to_vec();
        for i in 0..n_in {
            let ai = a[i];
            let row = &w[i * n_out..(i + 1) * n_out];
            for (zj, wij) in z.iter_mut().zip(row) {
                *zj += ai * wij;
            }
        }
        let out = if l + 1 < depth {
            z.iter().map(|&v| spec.activation.apply(v)).collect()
        } else {
            z.clone()
        };
        pre.push(z);
        acts.push(out);
    }
    MlpTrace { acts, pre }
}

/// Adds the gradient of sample `row`'s loss into `grads`; returns the loss.
pub(super) fn backward(
    spec: &ToyModelSpec,
    params: &[&[f64]],
    batch: &Batch,
    row: usize,
    grads: &mut [Vec<f64>],
) -> f64 {
    let depth = spec.dims.len() - 1;
    let trace = forward(spec, params, batch.input(row));
    let out = &trace.acts[depth];
    let mut delta = vec![0.0; out.len()];
    let loss = output_loss(spec.loss, out, &batch.targets, row, &mut delta);

    for l in (0..depth).rev() {
        let (n_in, n_out) = (spec.dims[l], spec.dims[l + 1]);
        let a = &trace.acts[l];
        {
            let gw = &mut grads[2 * l];
            for i in 0..n_in {
                let ai = a[i];
                for (g, d) in gw[i * n_out..(i + 1) * n_out].iter_mut().zip(&delta) {
                    *g += ai * d;
                }
            }
        }
        for (g, d) in grads[2 * l + 1].iter_mut().zip(&delta) {
            *g += d;
        }
        if l > 0 {
            let w = params[2 * l];
            let z_prev = &trace.pre[l - 1];
            delta = (0..n_in)
                .map(|i| {
                    let s: f64 = w[i * n_out..(i + 1) * n_out]
                        .iter()
                        .zip(&delta)
                        .map(|(wij, d)| wij * d)
                        .sum();
                    s * spec.activation.derivative(z_prev[i])
                })
                .collect();
        }
    }
    loss
}
