use super::{output_loss, Batch, ToyModelSpec};

const Q: usize = 0;
const K: usize = 1;
const V: usize = 2;
const O: usize = 3;
const HEAD_W: usize = 4;
const HEAD_B: usize = 5;

/// `x (r × n) · w (n × m)`
fn matmul(x: &[f64], w: &[f64], r: usize, n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * m];
    for t in 0..r {
        let row = &mut out[t * m..(t + 1) * m];
        for k in 0..n {
            let xk = x[t * n + k];
            for (o, wk) in row.iter_mut().zip(&w[k * m..(k + 1) * m]) {
                *o += xk * wk;
            }
        }
    }
    out
}

/// `accum (n × m) += xᵀ (n × r) · y (r × m)` where `x` is `r × n`.
fn add_at_b(accum: &mut [f64], x: &[f64], y: &[f64], r: usize, n: usize, m: usize) {
    for t in 0..r {
        for k in 0..n {
            let xk = x[t * n + k];
            for (a, yv) in accum[k * m..(k + 1) * m]
                .iter_mut()
                .zip(&y[t * m..(t + 1) * m])
            {
                *a += xk * yv;
            }
        }
    }
}

/// `x (r × m) · wᵀ` where `w` is `n × m`; result `r × n`.
fn matmul_bt(x: &[f64], w: &[f64], r: usize, n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * n];
    for t in 0..r {
        for k in 0..n {
            out[t * n + k] = x[t * m..(t + 1) * m]
                .iter()
                .zip(&w[k * m..(k + 1) * m])
                .map(|(a, b)| a * b)
                .sum();
        }
    }
    out
}

pub(super) struct AttnTrace {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn: Vec<f64>,
    z: Vec<f64>,
    o: Vec<f64>,
    pooled: Vec<f64>,
    pub(super) logits: Vec<f64>,
}

pub(super) fn forward(spec: &ToyModelSpec, p: &[&[f64]], x: &[f64]) -> AttnTrace {
    let (t, d, out) = (spec.dims[0], spec.dims[1], spec.dims[2]);
    let q = matmul(x, p[Q], t, d, d);
    let k = matmul(x, p[K], t, d, d);
    let v = matmul(x, p[V], t, d, d);
    let scale = 1.0 / (d as f64).sqrt();
    let mut attn = matmul_bt(&q, &k, t, t, d);
    for row in attn.chunks_mut(t) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max) * scale;
        let mut sum = 0.0;
        for s in row.iter_mut() {
            *s = (*s * scale - max).exp();
            sum += *s;
        }
        row.iter_mut().for_each(|s| *s /= sum);
    }
    let z = matmul(&attn, &v, t, t, d);
    let o = matmul(&z, p[O], t, d, d);
    let mut pooled = vec![0.0; d];
    for row in o.chunks(d) {
        for (pv, ov) in pooled.iter_mut().zip(row) {
            *pv += spec.activation.apply(*ov);
        }
    }
    pooled.iter_mut().for_each(|v| *v /= t as f64);
    let mut logits = matmul(&pooled, p[HEAD_W], 1, d, out);
    logits.iter_mut().zip(p[HEAD_B]).for_each(|(l, b)| *l += b);
    AttnTrace {
        q,
        k,
        v,
        attn,
        z,
        o,
        pooled,
        logits,
    }
}

pub(super) fn backward(
    spec: &ToyModelSpec,
    p: &[&[f64]],
    batch: &Batch,
    row: usize,
    grads: &mut [Vec<f64>],
) -> f64 {
    let (t, d, out) = (spec.dims[0], spec.dims[1], spec.dims[2]);
    let x = batch.input(row);
    let tr = forward(spec, p, x);
    let mut d_logits = vec![0.0; out];
    let loss = output_loss(spec.loss, &tr.logits, &batch.targets, row, &mut d_logits);

    add_at_b(&mut grads[HEAD_W], &tr.pooled, &d_logits, 1, d, out);
    grads[HEAD_B]
        .iter_mut()
        .zip(&d_logits)
        .for_each(|(g, dl)| *g += dl);
    let d_pooled = matmul_bt(&d_logits, p[HEAD_W], 1, d, out);

    // mean pooling then activation
    let mut d_o = vec![0.0; t * d];
    for (i, (dv, ov)) in d_o.iter_mut().zip(&tr.o).enumerate() {
        *dv = d_pooled[i % d] / t as f64 * spec.activation.derivative(*ov);
    }
    add_at_b(&mut grads[O], &tr.z, &d_o, t, d, d);
    let d_z = matmul_bt(&d_o, p[O], t, d, d);

    // z = attn · v
    let d_attn = matmul_bt(&d_z, &tr.v, t, t, d);
    let mut d_v = vec![0.0; t * d];
    add_at_b(&mut d_v, &tr.attn, &d_z, t, t, d);

    // row-wise softmax of scaled scores
    let scale = 1.0 / (d as f64).sqrt();
    let mut d_s = vec![0.0; t * t];
    for r in 0..t {
        let a = &tr.attn[r * t..(r + 1) * t];
        let da = &d_attn[r * t..(r + 1) * t];
        let dot: f64 = a.iter().zip(da).map(|(x, y)| x * y).sum();
        for c in 0..t {
            d_s[r * t + c] = a[c] * (da[c] - dot) * scale;
        }
    }
    // s = q · kᵀ
    let d_q = matmul(&d_s, &tr.k, t, t, d);
    let mut d_k = vec![0.0; t * d];
    add_at_b(&mut d_k, &d_s, &tr.q, t, t, d);

    add_at_b(&mut grads[Q], x, &d_q, t, d, d);
    add_at_b(&mut grads[K], x, &d_k, t, d, d);
    add_at_b(&mut grads[V], x, &d_v, t, d, d);
    loss
}
