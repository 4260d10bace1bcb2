//! Miniature trainer: full-sequence causal forward with cached activations, hand-written
//! backward pass, and clipped SGD.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::PromptLayout;
use crate::model::ops::{gelu, gelu_grad, layer_norm, layer_norm_backward};
use crate::model::weights::ModelWeights;
use crate::numkernel::{log_softmax, softmax, Matrix, SeededRng};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Plain stochastic gradient descent on the clipped gradient.
    #[default]
    Sgd,
    /// Adam (beta1 0.9, beta2 0.999) on the clipped gradient.
    Adam,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub learning_rate: f64,
    /// Sequences averaged per step.
    pub batch: usize,
    pub clip_norm: f64,
    pub optimizer: Optimizer,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 200,
            learning_rate: 1.0,
            batch: 4,
            clip_norm: 1.0,
            optimizer: Optimizer::Sgd,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct TrainReport {
    /// Mean loss of each step's batch, before that step's update.
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Trailing moving average of the loss curve with the given window.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        let window = window.max(1);
        (0..self.losses.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(window);
                let slice = &self.losses[lo..=i];
                slice.iter().sum::<f64>() / slice.len() as f64
            })
            .collect()
    }
}

struct LayerCache {
    ln1_xhat: Matrix<f64>,
    ln1_rstd: Vec<f64>,
    a: Matrix<f64>,
    q: Matrix<f64>,
    k: Matrix<f64>,
    v: Matrix<f64>,
    probs: Vec<Matrix<f64>>,
    attn: Matrix<f64>,
    ln2_xhat: Matrix<f64>,
    ln2_rstd: Vec<f64>,
    b: Matrix<f64>,
    pre: Matrix<f64>,
    act: Matrix<f64>,
}

struct Cache {
    layers: Vec<LayerCache>,
    final_xhat: Matrix<f64>,
    final_rstd: Vec<f64>,
    z: Matrix<f64>,
    logits: Matrix<f64>,
}

fn norm_rows(x: &Matrix<f64>, gain: &[f64], bias: &[f64]) -> (Matrix<f64>, Matrix<f64>, Vec<f64>) {
    let mut y = Matrix::zeros(x.rows(), x.cols());
    let mut xhat = Matrix::zeros(x.rows(), x.cols());
    let mut rstd = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let (yr, hr, s) = layer_norm(x.row(r), gain, bias);
        y.row_mut(r).copy_from_slice(&yr);
        xhat.row_mut(r).copy_from_slice(&hr);
        rstd.push(s);
    }
    (y, xhat, rstd)
}

fn norm_rows_backward(
    dy: &Matrix<f64>,
    xhat: &Matrix<f64>,
    rstd: &[f64],
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Matrix<f64> {
    let mut dx = Matrix::zeros(dy.rows(), dy.cols());
    for r in 0..dy.rows() {
        for ((c, &d), &h) in dy.row(r).iter().enumerate().zip(xhat.row(r)) {
            dgain[c] += d * h;
            dbias[c] += d;
        }
        let g = layer_norm_backward(dy.row(r), xhat.row(r), rstd[r], gain);
        dx.row_mut(r).copy_from_slice(&g);
    }
    dx
}

fn add_assign(a: &mut Matrix<f64>, b: &Matrix<f64>) {
    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
}

fn add_into(dst: &mut [f64], src: &Matrix<f64>) {
    for (x, y) in dst.iter_mut().zip(src.data()) {
        *x += y;
    }
}

fn run_forward(w: &ModelWeights, layout: &PromptLayout) -> Result<Cache> {
    let c = &w.config;
    let n = layout.len();
    let (d, dh) = (c.d_model, c.d_head());
    let mut x = Matrix::zeros(n, d);
    for t in 0..n {
        let pos = layout.positions()[t];
        if pos >= c.max_positions {
            return Err(Error::PositionOverflow {
                position: pos,
                max: c.max_positions,
            });
        }
        let tok = layout.tokens()[t].index();
        for (o, (a, b)) in x
            .row_mut(t)
            .iter_mut()
            .zip(w.token_embed.row(tok).iter().zip(w.pos_embed.row(pos)))
        {
            *o = a + b;
        }
    }
    let mut layers = Vec::with_capacity(c.n_layers);
    for lw in &w.layers {
        let (a, ln1_xhat, ln1_rstd) = norm_rows(&x, &lw.ln1_gain, &lw.ln1_bias);
        let q = a.matmul(&lw.w_q)?;
        let k = a.matmul(&lw.w_k)?;
        let v = a.matmul(&lw.w_v)?;
        let mut attn = Matrix::zeros(n, d);
        let mut probs = Vec::with_capacity(c.n_heads);
        for head in 0..c.n_heads {
            let qh = q.column_block(head * dh, dh);
            let kh = k.column_block(head * dh, dh);
            let vh = v.column_block(head * dh, dh);
            let mut p = Matrix::zeros(n, n);
            for i in 0..n {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| crate::numkernel::dot(qh.row(i), kh.row(j)))
                    .collect();
                let wts = softmax(&scores)?;
                p.row_mut(i)[..=i].copy_from_slice(&wts);
            }
            let oh = p.matmul(&vh)?;
            for i in 0..n {
                attn.row_mut(i)[head * dh..(head + 1) * dh].copy_from_slice(oh.row(i));
            }
            probs.push(p);
        }
        add_assign(&mut x, &attn.matmul(&lw.w_o)?);
        let (b, ln2_xhat, ln2_rstd) = norm_rows(&x, &lw.ln2_gain, &lw.ln2_bias);
        let mut pre = b.matmul(&lw.ff_in)?;
        for r in 0..n {
            for (p, bias) in pre.row_mut(r).iter_mut().zip(&lw.ff_in_bias) {
                *p += bias;
            }
        }
        let act = pre.map(gelu);
        let mut f = act.matmul(&lw.ff_out)?;
        for r in 0..n {
            for (p, bias) in f.row_mut(r).iter_mut().zip(&lw.ff_out_bias) {
                *p += bias;
            }
        }
        add_assign(&mut x, &f);
        layers.push(LayerCache {
            ln1_xhat,
            ln1_rstd,
            a,
            q,
            k,
            v,
            probs,
            attn,
            ln2_xhat,
            ln2_rstd,
            b,
            pre,
            act,
        });
    }
    let (z, final_xhat, final_rstd) = norm_rows(&x, &w.final_gain, &w.final_bias);
    let logits = z.matmul(&w.unembed)?;
    Ok(Cache {
        layers,
        final_xhat,
        final_rstd,
        z,
        logits,
    })
}

fn mean_nll(logits: &Matrix<f64>, layout: &PromptLayout) -> Result<(f64, Matrix<f64>)> {
    let n = layout.len();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "training sequence needs at least two tokens".into(),
        ));
    }
    let count = (n - 1) as f64;
    let mut loss = 0.0;
    let mut dlogits = Matrix::zeros(n, logits.cols());
    for t in 0..n - 1 {
        let target = layout.tokens()[t + 1].index();
        let lp = log_softmax(logits.row(t))?;
        loss -= lp[target];
        for (g, l) in dlogits.row_mut(t).iter_mut().zip(&lp) {
            *g = l.exp() / count;
        }
        dlogits[(t, target)] -= 1.0 / count;
    }
    Ok((loss / count, dlogits))
}

/// Mean next-token cross-entropy over the whole sequence.
pub fn sequence_loss(weights: &ModelWeights, layout: &PromptLayout) -> Result<f64> {
    let cache = run_forward(weights, layout)?;
    Ok(mean_nll(&cache.logits, layout)?.0)
}

/// Logits of every position from the training forward path.
pub fn training_logits(weights: &ModelWeights, layout: &PromptLayout) -> Result<Matrix<f64>> {
    Ok(run_forward(weights, layout)?.logits)
}

/// Loss and its gradient with respect to every parameter.
pub fn loss_and_grad(weights: &ModelWeights, layout: &PromptLayout) -> Result<(f64, ModelWeights)> {
    let w = weights;
    let c = &w.config;
    let n = layout.len();
    let dh = c.d_head();
    let cache = run_forward(w, layout)?;
    let (loss, dlogits) = mean_nll(&cache.logits, layout)?;
    let mut g = ModelWeights::zeros(c);

    add_into(g.unembed.data_mut(), &cache.z.transpose().matmul(&dlogits)?);
    let dz = dlogits.matmul(&w.unembed.transpose())?;
    let mut dx = norm_rows_backward(
        &dz,
        &cache.final_xhat,
        &cache.final_rstd,
        &w.final_gain,
        &mut g.final_gain,
        &mut g.final_bias,
    );

    for (l, lw) in w.layers.iter().enumerate().rev() {
        let lc = &cache.layers[l];
        let gl = &mut g.layers[l];

        // Feed-forward block.
        for r in 0..n {
            for (b, d) in gl.ff_out_bias.iter_mut().zip(dx.row(r)) {
                *b += d;
            }
        }
        add_into(gl.ff_out.data_mut(), &lc.act.transpose().matmul(&dx)?);
        let mut dpre = dx.matmul(&lw.ff_out.transpose())?;
        for (dv, &p) in dpre.data_mut().iter_mut().zip(lc.pre.data()) {
            *dv *= gelu_grad(p);
        }
        for r in 0..n {
            for (b, d) in gl.ff_in_bias.iter_mut().zip(dpre.row(r)) {
                *b += d;
            }
        }
        add_into(gl.ff_in.data_mut(), &lc.b.transpose().matmul(&dpre)?);
        let db = dpre.matmul(&lw.ff_in.transpose())?;
        let dmid = norm_rows_backward(
            &db,
            &lc.ln2_xhat,
            &lc.ln2_rstd,
            &lw.ln2_gain,
            &mut gl.ln2_gain,
            &mut gl.ln2_bias,
        );
        add_assign(&mut dx, &dmid);

        // Attention block.
        add_into(gl.w_o.data_mut(), &lc.attn.transpose().matmul(&dx)?);
        let dattn = dx.matmul(&lw.w_o.transpose())?;
        let mut dq = Matrix::zeros(n, c.d_model);
        let mut dk = Matrix::zeros(n, c.d_model);
        let mut dv = Matrix::zeros(n, c.d_model);
        for head in 0..c.n_heads {
            let cols = head * dh;
            let qh = lc.q.column_block(cols, dh);
            let kh = lc.k.column_block(cols, dh);
            let vh = lc.v.column_block(cols, dh);
            let doh = dattn.column_block(cols, dh);
            let p = &lc.probs[head];
            let dp = doh.matmul(&vh.transpose())?;
            let dvh = p.transpose().matmul(&doh)?;
            let mut ds = Matrix::zeros(n, n);
            for i in 0..n {
                let inner: f64 = (0..=i).map(|j| p[(i, j)] * dp[(i, j)]).sum();
                for j in 0..=i {
                    ds[(i, j)] = p[(i, j)] * (dp[(i, j)] - inner);
                }
            }
            let dqh = ds.matmul(&kh)?;
            let dkh = ds.transpose().matmul(&qh)?;
            for i in 0..n {
                dq.row_mut(i)[cols..cols + dh].copy_from_slice(dqh.row(i));
                dk.row_mut(i)[cols..cols + dh].copy_from_slice(dkh.row(i));
                dv.row_mut(i)[cols..cols + dh].copy_from_slice(dvh.row(i));
            }
        }
        let at = lc.a.transpose();
        add_into(gl.w_q.data_mut(), &at.matmul(&dq)?);
        add_into(gl.w_k.data_mut(), &at.matmul(&dk)?);
        add_into(gl.w_v.data_mut(), &at.matmul(&dv)?);
        let mut da = dq.matmul(&lw.w_q.transpose())?;
        add_assign(&mut da, &dk.matmul(&lw.w_k.transpose())?);
        add_assign(&mut da, &dv.matmul(&lw.w_v.transpose())?);
        let din = norm_rows_backward(
            &da,
            &lc.ln1_xhat,
            &lc.ln1_rstd,
            &lw.ln1_gain,
            &mut gl.ln1_gain,
            &mut gl.ln1_bias,
        );
        add_assign(&mut dx, &din);
    }

    for t in 0..n {
        let tok = layout.tokens()[t].index();
        let pos = layout.positions()[t];
        for (dst, &src) in g.token_embed.row_mut(tok).iter_mut().zip(dx.row(t)) {
            *dst += src;
        }
        for (dst, &src) in g.pos_embed.row_mut(pos).iter_mut().zip(dx.row(t)) {
            *dst += src;
        }
    }
    Ok((loss, g))
}

/// Clipped SGD over `corpus`, visiting sequences in seeded shuffled epochs.
pub fn train_toy(
    weights: &ModelWeights,
    corpus: &[PromptLayout],
    options: TrainOptions,
    rng: &mut SeededRng,
) -> Result<(ModelWeights, TrainReport)> {
    let mut w = weights.clone();
    let mut report = TrainReport::default();
    if options.steps == 0 {
        return Ok((w, report));
    }
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("empty training corpus".into()));
    }
    let batch = options.batch.max(1);
    let mut order: Vec<usize> = Vec::new();
    let mut flat = w.flatten();
    let (mut m, mut v) = (vec![0.0; flat.len()], vec![0.0; flat.len()]);
    for step in 0..options.steps {
        let mut grad = vec![0.0; flat.len()];
        let mut loss = 0.0;
        for _ in 0..batch {
            if order.is_empty() {
                order = rng.sample_indices(corpus.len(), corpus.len());
                order.reverse();
            }
            let idx = order.pop().expect("refilled above");
            let (l, g) = loss_and_grad(&w, &corpus[idx])?;
            loss += l / batch as f64;
            for (acc, x) in grad.iter_mut().zip(g.flatten()) {
                *acc += x / batch as f64;
            }
        }
        let initial = report.losses.first().copied().unwrap_or(loss);
        if !loss.is_finite() || loss > 10.0 * initial {
            return Err(Error::Diverged {
                step,
                loss,
                initial,
            });
        }
        report.losses.push(loss);
        let norm = grad.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = if norm > options.clip_norm {
            options.clip_norm / norm
        } else {
            1.0
        };
        match options.optimizer {
            Optimizer::Sgd => {
                for (p, g) in flat.iter_mut().zip(&grad) {
                    *p -= options.learning_rate * scale * g;
                }
            }
            Optimizer::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                let t = (step + 1) as i32;
                let (c1, c2) = (1.0 - B1.powi(t), 1.0 - B2.powi(t));
                for i in 0..flat.len() {
                    let g = scale * grad[i];
                    m[i] = B1 * m[i] + (1.0 - B1) * g;
                    v[i] = B2 * v[i] + (1.0 - B2) * g * g;
                    flat[i] -= options.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + 1e-8);
                }
            }
        }
        w.unflatten(&flat)?;
    }
    Ok((w, report))
}
