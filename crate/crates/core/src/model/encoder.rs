use alloc::vec;
use alloc::vec::Vec;

use super::params::{check_layout, slot, Layout};
use super::{Batch, Labels, ModelSpec, Objective, ParameterSet, IGNORE, LAYER_NORM_EPS};
use crate::numerics::{matmul, matmul_a_bt, matmul_at_b};
use crate::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

struct LnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

struct LayerCache {
    ln1: LnCache,
    h1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Per head, `n × n` attention weights.
    probs: Vec<Vec<f64>>,
    ctx: Vec<f64>,
    ln2: LnCache,
    h2: Vec<f64>,
    up_pre: Vec<f64>,
    up_act: Vec<f64>,
}

struct MlmTarget {
    row: usize,
    target: usize,
    probs: Vec<f64>,
}

struct ClsCache {
    z: Vec<f64>,
    probs: Vec<f64>,
    label: usize,
}

struct ExampleCache {
    positions: Vec<usize>,
    tokens: Vec<usize>,
    layers: Vec<LayerCache>,
    ln_f: LnCache,
    hf: Vec<f64>,
    mlm: Vec<MlmTarget>,
    cls: Option<ClsCache>,
}

/// Loss plus the activations needed by [`backward`].
pub struct ForwardOutput {
    pub loss: f64,
    /// Number of loss terms the mean is taken over.
    pub count: usize,
    examples: Vec<ExampleCache>,
}

fn layer_norm(x: &[f64], n: usize, d: usize, gain: &[f64], shift: &[f64]) -> (Vec<f64>, LnCache) {
    let mut y = vec![0.0; n * d];
    let mut xhat = vec![0.0; n * d];
    let mut inv_std = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
        inv_std[i] = inv;
        for j in 0..d {
            let h = (row[j] - mean) * inv;
            xhat[i * d + j] = h;
            y[i * d + j] = h * gain[j] + shift[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_back(
    dy: &[f64],
    cache: &LnCache,
    gain: &[f64],
    n: usize,
    d: usize,
    dgain: &mut [f64],
    dshift: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; n * d];
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let g = &dy[i * d..(i + 1) * d];
        let mut sum = 0.0;
        let mut sum_xh = 0.0;
        for j in 0..d {
            dgain[j] += g[j] * xh[j];
            dshift[j] += g[j];
            dxhat[j] = g[j] * gain[j];
            sum += dxhat[j];
            sum_xh += dxhat[j] * xh[j];
        }
        let scale = cache.inv_std[i] / d as f64;
        for j in 0..d {
            dx[i * d + j] = scale * (d as f64 * dxhat[j] - sum - xh[j] * sum_xh);
        }
    }
    dx
}

fn linear(x: &[f64], n: usize, din: usize, w: &[f64], b: &[f64], dout: usize) -> Vec<f64> {
    let mut y = matmul(x, w, n, din, dout);
    for row in y.chunks_mut(dout) {
        for (o, &bb) in row.iter_mut().zip(b) {
            *o += bb;
        }
    }
    y
}

/// Accumulates `dW += xᵀ dy`, `db += Σ dy`; returns `dx = dy Wᵀ`.
#[allow(clippy::too_many_arguments)]
fn linear_back(
    dy: &[f64],
    x: &[f64],
    n: usize,
    din: usize,
    w: &[f64],
    dout: usize,
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let gw = matmul_at_b(x, dy, n, din, dout);
    for (a, g) in dw.iter_mut().zip(&gw) {
        *a += g;
    }
    for row in dy.chunks(dout) {
        for (a, g) in db.iter_mut().zip(row) {
            *a += g;
        }
    }
    matmul_a_bt(dy, w, n, dout, din)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(GELU_C * (x + GELU_A * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let t = libm::tanh(GELU_C * (x + GELU_A * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Returns `(−log p_target, probs)`.
fn softmax_xent(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| libm::exp(l - max)).sum();
    let lse = max + libm::log(sum);
    let probs = logits.iter().map(|l| libm::exp(l - lse)).collect();
    (lse - logits[target], probs)
}

fn forward_example(
    spec: &ModelSpec,
    layout: &Layout,
    params: &ParameterSet,
    positions: Vec<usize>,
    tokens: Vec<usize>,
) -> ExampleCache {
    let d = spec.d_model;
    let n = positions.len();
    let nh = spec.n_heads;
    let dh = spec.head_dim();
    let scale = 1.0 / libm::sqrt(dh as f64);
    let tok = params.tensor(Layout::TOKENS).data();
    let pos = params.tensor(Layout::POSITIONS).data();

    let mut x = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            x[i * d + j] = tok[tokens[i] * d + j] + pos[positions[i] * d + j];
        }
    }

    let mut layers = Vec::with_capacity(spec.n_layers);
    for l in 0..spec.n_layers {
        let t = |s: usize| params.tensor(layout.layer(l, s)).data();
        let (h1, ln1) = layer_norm(&x, n, d, t(slot::LN1_GAIN), t(slot::LN1_SHIFT));
        let q = linear(&h1, n, d, t(slot::WQ), t(slot::BQ), d);
        let k = linear(&h1, n, d, t(slot::WK), t(slot::BK), d);
        let v = linear(&h1, n, d, t(slot::WV), t(slot::BV), d);
        let mut ctx = vec![0.0; n * d];
        let mut probs = Vec::with_capacity(nh);
        for h in 0..nh {
            let off = h * dh;
            let mut p = vec![0.0; n * n];
            for i in 0..n {
                let qi = &q[i * d + off..i * d + off + dh];
                let row = &mut p[i * n..(i + 1) * n];
                for jj in 0..n {
                    let kj = &k[jj * d + off..jj * d + off + dh];
                    row[jj] = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                }
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for r in row.iter_mut() {
                    *r = libm::exp(*r - max);
                    sum += *r;
                }
                for r in row.iter_mut() {
                    *r /= sum;
                }
                for jj in 0..n {
                    let w = row[jj];
                    for c in 0..dh {
                        ctx[i * d + off + c] += w * v[jj * d + off + c];
                    }
                }
            }
            probs.push(p);
        }
        let attn_out = linear(&ctx, n, d, t(slot::WO), t(slot::BO), d);
        let x_mid: Vec<f64> = x.iter().zip(&attn_out).map(|(a, b)| a + b).collect();
        let (h2, ln2) = layer_norm(&x_mid, n, d, t(slot::LN2_GAIN), t(slot::LN2_SHIFT));
        let up_pre = linear(&h2, n, d, t(slot::W_UP), t(slot::B_UP), spec.d_ff);
        let up_act: Vec<f64> = up_pre.iter().map(|&z| gelu(z)).collect();
        let down = linear(&up_act, n, spec.d_ff, t(slot::W_DOWN), t(slot::B_DOWN), d);
        x = x_mid.iter().zip(&down).map(|(a, b)| a + b).collect();
        layers.push(LayerCache {
            ln1,
            h1,
            q,
            k,
            v,
            probs,
            ctx,
            ln2,
            h2,
            up_pre,
            up_act,
        });
    }
    let (hf, ln_f) = layer_norm(
        &x,
        n,
        d,
        params.tensor(layout.final_gain()).data(),
        params.tensor(layout.final_shift()).data(),
    );
    ExampleCache {
        positions,
        tokens,
        layers,
        ln_f,
        hf,
        mlm: Vec::new(),
        cls: None,
    }
}

fn head_logits(spec: &ModelSpec, layout: &Layout, params: &ParameterSet, cls_hidden: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = spec.d_model;
    let zpre = linear(
        cls_hidden,
        1,
        d,
        params.tensor(layout.head_dense_w()).data(),
        params.tensor(layout.head_dense_b()).data(),
        d,
    );
    let z: Vec<f64> = zpre.iter().map(|&v| libm::tanh(v)).collect();
    let logits = linear(
        &z,
        1,
        d,
        params.tensor(layout.head_out_w()).data(),
        params.tensor(layout.head_out_b()).data(),
        spec.n_classes,
    );
    (z, logits)
}

fn check_objective(batch: &Batch, objective: Objective) -> Result<()> {
    if batch.objective() != objective {
        return Err(Error::Incompatible(alloc::format!(
            "batch labels are {:?}, objective is {objective:?}",
            batch.objective()
        )));
    }
    Ok(())
}

fn run_forward(spec: &ModelSpec, params: &ParameterSet, batch: &Batch, objective: Objective) -> Result<ForwardOutput> {
    check_objective(batch, objective)?;
    let layout = check_layout(spec, params)?;
    batch.validate(spec)?;
    let t = batch.seq_len;
    let mut examples = Vec::with_capacity(batch.batch_size);
    let mut total = 0.0;
    let mut count = 0usize;
    for b in 0..batch.batch_size {
        let positions: Vec<usize> = (0..t).filter(|&p| batch.attention[b * t + p]).collect();
        let tokens: Vec<usize> = positions.iter().map(|&p| batch.tokens[b * t + p] as usize).collect();
        let mut ex = forward_example(spec, &layout, params, positions, tokens);
        match &batch.labels {
            Labels::Mlm(targets) => {
                let emb = params.tensor(Layout::TOKENS).data();
                let bias = params.tensor(layout.mlm_bias()).data();
                let d = spec.d_model;
                for (row, &p) in ex.positions.iter().enumerate() {
                    let target = targets[b * t + p];
                    if target == IGNORE {
                        continue;
                    }
                    let h = &ex.hf[row * d..(row + 1) * d];
                    let mut logits = matmul_a_bt(h, emb, 1, d, spec.vocab_size);
                    for (l, bb) in logits.iter_mut().zip(bias) {
                        *l += bb;
                    }
                    let (loss, probs) = softmax_xent(&logits, target as usize);
                    total += loss;
                    count += 1;
                    ex.mlm.push(MlmTarget {
                        row,
                        target: target as usize,
                        probs,
                    });
                }
            }
            Labels::Class(labels) => {
                let d = spec.d_model;
                let (z, logits) = head_logits(spec, &layout, params, &ex.hf[..d]);
                let (loss, probs) = softmax_xent(&logits, labels[b]);
                total += loss;
                count += 1;
                ex.cls = Some(ClsCache {
                    z,
                    probs,
                    label: labels[b],
                });
            }
        }
        examples.push(ex);
    }
    if count == 0 {
        return Err(Error::EmptyObjective);
    }
    Ok(ForwardOutput {
        loss: total / count as f64,
        count,
        examples,
    })
}

/// Mean cross-entropy over non-ignored MLM positions or over examples.
pub fn forward_loss(spec: &ModelSpec, params: &ParameterSet, batch: &Batch, objective: Objective) -> Result<ForwardOutput> {
    run_forward(spec, params, batch, objective)
}

/// Class logits (`batch × n_classes`, row-major).
pub fn logits(spec: &ModelSpec, params: &ParameterSet, batch: &Batch) -> Result<Vec<f64>> {
    let layout = check_layout(spec, params)?;
    let unlabeled = Batch {
        labels: Labels::Class(vec![0; batch.batch_size]),
        ..batch.clone()
    };
    unlabeled.validate(spec)?;
    let t = batch.seq_len;
    let mut out = Vec::with_capacity(batch.batch_size * spec.n_classes);
    for b in 0..batch.batch_size {
        let positions: Vec<usize> = (0..t).filter(|&p| batch.attention[b * t + p]).collect();
        let tokens: Vec<usize> = positions.iter().map(|&p| batch.tokens[b * t + p] as usize).collect();
        let ex = forward_example(spec, &layout, params, positions, tokens);
        let (_, l) = head_logits(spec, &layout, params, &ex.hf[..spec.d_model]);
        out.extend(l);
    }
    Ok(out)
}

/// Argmax class per example; ties go to the lower class id.
pub fn predict(spec: &ModelSpec, params: &ParameterSet, batch: &Batch) -> Result<Vec<usize>> {
    let l = logits(spec, params, batch)?;
    Ok(l.chunks(spec.n_classes)
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

/// Loss and its gradient, with the loss multiplied by `loss_scale`.
///
/// The returned loss is unscaled.
pub fn backward(
    spec: &ModelSpec,
    params: &ParameterSet,
    batch: &Batch,
    objective: Objective,
    loss_scale: f64,
) -> Result<(f64, ParameterSet)> {
    let fwd = run_forward(spec, params, batch, objective)?;
    let layout = Layout { n_layers: spec.n_layers };
    let mut grads = params.zeros_like();
    let coeff = loss_scale / fwd.count as f64;
    let d = spec.d_model;
    for ex in &fwd.examples {
        let n = ex.positions.len();
        let mut dhf = vec![0.0; n * d];
        for m in &ex.mlm {
            let mut dlogits: Vec<f64> = m.probs.iter().map(|p| p * coeff).collect();
            dlogits[m.target] -= coeff;
            let h = &ex.hf[m.row * d..(m.row + 1) * d];
            {
                let demb = grads.tensor_mut(Layout::TOKENS).data_mut();
                for (tokid, &g) in dlogits.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    for j in 0..d {
                        demb[tokid * d + j] += g * h[j];
                    }
                }
            }
            {
                let db = grads.tensor_mut(layout.mlm_bias()).data_mut();
                for (a, g) in db.iter_mut().zip(&dlogits) {
                    *a += g;
                }
            }
            let dh = matmul(&dlogits, params.tensor(Layout::TOKENS).data(), 1, spec.vocab_size, d);
            for (a, g) in dhf[m.row * d..(m.row + 1) * d].iter_mut().zip(&dh) {
                *a += g;
            }
        }
        if let Some(c) = &ex.cls {
            let mut dlogits: Vec<f64> = c.probs.iter().map(|p| p * coeff).collect();
            dlogits[c.label] -= coeff;
            let (dw, db) = two_mut(&mut grads, layout.head_out_w(), layout.head_out_b());
            let dz = linear_back(
                &dlogits,
                &c.z,
                1,
                d,
                params.tensor(layout.head_out_w()).data(),
                spec.n_classes,
                dw,
                db,
            );
            let dzpre: Vec<f64> = dz.iter().zip(&c.z).map(|(g, z)| g * (1.0 - z * z)).collect();
            let (dw, db) = two_mut(&mut grads, layout.head_dense_w(), layout.head_dense_b());
            let dcls = linear_back(
                &dzpre,
                &ex.hf[..d],
                1,
                d,
                params.tensor(layout.head_dense_w()).data(),
                d,
                dw,
                db,
            );
            for (a, g) in dhf[..d].iter_mut().zip(&dcls) {
                *a += g;
            }
        }

        let (dg, ds) = two_mut(&mut grads, layout.final_gain(), layout.final_shift());
        let mut dx = layer_norm_back(&dhf, &ex.ln_f, params.tensor(layout.final_gain()).data(), n, d, dg, ds);

        for l in (0..spec.n_layers).rev() {
            let lc = &ex.layers[l];
            let idx = |s: usize| layout.layer(l, s);
            let w = |s: usize| params.tensor(layout.layer(l, s)).data();
            // Feed-forward block: x_out = x_mid + down(gelu(up(ln2(x_mid)))).
            let (dw, db) = two_mut(&mut grads, idx(slot::W_DOWN), idx(slot::B_DOWN));
            let dact = linear_back(&dx, &lc.up_act, n, spec.d_ff, w(slot::W_DOWN), d, dw, db);
            let dpre: Vec<f64> = dact.iter().zip(&lc.up_pre).map(|(g, &z)| g * gelu_grad(z)).collect();
            let (dw, db) = two_mut(&mut grads, idx(slot::W_UP), idx(slot::B_UP));
            let dh2 = linear_back(&dpre, &lc.h2, n, d, w(slot::W_UP), spec.d_ff, dw, db);
            let (dg, ds) = two_mut(&mut grads, idx(slot::LN2_GAIN), idx(slot::LN2_SHIFT));
            let dmid_ln = layer_norm_back(&dh2, &lc.ln2, w(slot::LN2_GAIN), n, d, dg, ds);
            let dmid: Vec<f64> = dx.iter().zip(&dmid_ln).map(|(a, b)| a + b).collect();

            // Attention block: x_mid = x_in + o(attn(ln1(x_in))).
            let (dw, db) = two_mut(&mut grads, idx(slot::WO), idx(slot::BO));
            let dctx = linear_back(&dmid, &lc.ctx, n, d, w(slot::WO), d, dw, db);
            let nh = spec.n_heads;
            let dhd = spec.head_dim();
            let scale = 1.0 / libm::sqrt(dhd as f64);
            let mut dq = vec![0.0; n * d];
            let mut dk = vec![0.0; n * d];
            let mut dv = vec![0.0; n * d];
            let mut dp = vec![0.0; n];
            for h in 0..nh {
                let off = h * dhd;
                let p = &lc.probs[h];
                for i in 0..n {
                    let dci = &dctx[i * d + off..i * d + off + dhd];
                    let prow = &p[i * n..(i + 1) * n];
                    for jj in 0..n {
                        let vj = &lc.v[jj * d + off..jj * d + off + dhd];
                        dp[jj] = dci.iter().zip(vj).map(|(a, b)| a * b).sum();
                        for c in 0..dhd {
                            dv[jj * d + off + c] += prow[jj] * dci[c];
                        }
                    }
                    let dot: f64 = dp.iter().zip(prow).map(|(a, b)| a * b).sum();
                    for jj in 0..n {
                        let ds = prow[jj] * (dp[jj] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for c in 0..dhd {
                            dq[i * d + off + c] += ds * lc.k[jj * d + off + c];
                            dk[jj * d + off + c] += ds * lc.q[i * d + off + c];
                        }
                    }
                }
            }
            let mut dh1 = vec![0.0; n * d];
            for (wslot, bslot, dy) in [(slot::WQ, slot::BQ, &dq), (slot::WK, slot::BK, &dk), (slot::WV, slot::BV, &dv)] {
                let (dw, db) = two_mut(&mut grads, idx(wslot), idx(bslot));
                let part = linear_back(dy, &lc.h1, n, d, w(wslot), d, dw, db);
                for (a, g) in dh1.iter_mut().zip(&part) {
                    *a += g;
                }
            }
            let (dg, ds) = two_mut(&mut grads, idx(slot::LN1_GAIN), idx(slot::LN1_SHIFT));
            let din_ln = layer_norm_back(&dh1, &lc.ln1, w(slot::LN1_GAIN), n, d, dg, ds);
            dx = dmid.iter().zip(&din_ln).map(|(a, b)| a + b).collect();
        }

        {
            let dtok = grads.tensor_mut(Layout::TOKENS).data_mut();
            for (i, &tk) in ex.tokens.iter().enumerate() {
                for j in 0..d {
                    dtok[tk * d + j] += dx[i * d + j];
                }
            }
        }
        let dpos = grads.tensor_mut(Layout::POSITIONS).data_mut();
        for (i, &p) in ex.positions.iter().enumerate() {
            for j in 0..d {
                dpos[p * d + j] += dx[i * d + j];
            }
        }
    }
    Ok((fwd.loss, grads))
}

fn two_mut(grads: &mut ParameterSet, a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    grads.pair_mut(a, b)
}
