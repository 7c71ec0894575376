//! Full-sequence training with a hand-written backward pass and Adam.
//!
//! Routing is treated as piecewise constant: gradients reach the router through
//! the renormalized top-k weights and through a small load-balancing term on
//! the full router softmax.

use std::thread;

use serde::{Deserialize, Serialize};

use super::{gate, LayerParams, MarkovCorpus, Model, ModelConfig, ModelParams};
use crate::tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f32,
    pub warmup_steps: usize,
    /// Weight of the load-balancing loss.
    pub aux_loss_coef: f32,
    pub grad_clip: f32,
    /// Seed of the training-sequence stream (the corpus has its own seed).
    pub data_seed: u64,
    pub eval_sequences: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            seq_len: 32,
            lr: 3e-3,
            warmup_steps: 50,
            aux_loss_coef: 0.01,
            grad_clip: 1.0,
            data_seed: 1,
            eval_sequences: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub initial_loss: f32,
    pub final_loss: f32,
    /// Mean training-batch loss per step.
    pub step_losses: Vec<f32>,
    pub initial_gate_entropy: Vec<f32>,
    pub final_gate_entropy: Vec<f32>,
}

const EVAL_STREAM: u64 = 0xe7a1;

/// Train `config`'s seeded initialization on sequences drawn from `corpus`.
/// Bit-reproducible for a given (config, corpus, train) triple.
pub fn train_toy(
    config: &ModelConfig,
    corpus: &MarkovCorpus,
    train: &TrainConfig,
) -> Result<(Model, TrainReport)> {
    config.validate()?;
    if corpus.vocab_size() > config.vocab_size {
        return Err(Error::Config(format!(
            "corpus vocabulary {} exceeds model vocabulary {}",
            corpus.vocab_size(),
            config.vocab_size
        )));
    }
    if train.seq_len < 2 || train.seq_len > config.max_seq_len {
        return Err(Error::Config(format!(
            "seq_len must be in 2..={}",
            config.max_seq_len
        )));
    }
    let mut model = Model::init(config)?;
    let eval: Vec<Vec<usize>> = (0..train.eval_sequences.max(1) as u64)
        .map(|i| corpus.sequence(EVAL_STREAM, i, train.seq_len))
        .collect();
    let initial_loss = mean_loss(&model, &eval);
    let initial_gate_entropy = gate_entropy(&model, &eval);

    let mut adam = Adam::new(model.params());
    let mut step_losses = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let batch: Vec<Vec<usize>> = (0..train.batch_size)
            .map(|i| {
                corpus.sequence(
                    train.data_seed,
                    (step * train.batch_size + i) as u64,
                    train.seq_len,
                )
            })
            .collect();
        let (loss, mut grad) = batch_gradient(model.params(), &batch, train.aux_loss_coef);
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        clip(&mut grad, train.grad_clip);
        adam.step(model.params_mut(), &grad, schedule(train, step));
        step_losses.push(loss);
    }

    let final_loss = mean_loss(&model, &eval);
    if !final_loss.is_finite() {
        return Err(Error::Diverged {
            step: train.steps,
            loss: final_loss,
        });
    }
    let final_gate_entropy = gate_entropy(&model, &eval);
    Ok((
        model,
        TrainReport {
            initial_loss,
            final_loss,
            step_losses,
            initial_gate_entropy,
            final_gate_entropy,
        },
    ))
}

fn schedule(train: &TrainConfig, step: usize) -> f32 {
    let warm = train.warmup_steps.max(1);
    if step < warm {
        return train.lr * (step + 1) as f32 / warm as f32;
    }
    let span = (train.steps - warm).max(1) as f32;
    let progress = (step - warm) as f32 / span;
    let cosine = 0.5 * (1.0 + (std::f32::consts::PI * progress).cos());
    train.lr * (0.1 + 0.9 * cosine)
}

/// Mean next-token cross-entropy over one sequence.
pub fn sequence_loss(model: &Model, tokens: &[usize]) -> f32 {
    Forward::run(model.params(), tokens).loss
}

fn mean_loss(model: &Model, seqs: &[Vec<usize>]) -> f32 {
    seqs.iter().map(|s| sequence_loss(model, s)).sum::<f32>() / seqs.len() as f32
}

/// Mean entropy (nats) of each layer's full router softmax over all positions.
pub fn gate_entropy(model: &Model, seqs: &[Vec<usize>]) -> Vec<f32> {
    let n_layers = model.config().n_layers;
    let mut acc = vec![0.0f64; n_layers];
    let mut count = 0usize;
    for s in seqs {
        let fwd = Forward::run(model.params(), s);
        for (l, blk) in fwd.blocks.iter().enumerate() {
            for p in &blk.full_p {
                acc[l] -= p
                    .iter()
                    .filter(|&&x| x > 0.0)
                    .map(|&x| x as f64 * (x as f64).ln())
                    .sum::<f64>();
            }
        }
        count += s.len();
    }
    acc.into_iter().map(|h| (h / count as f64) as f32).collect()
}

fn batch_gradient(params: &ModelParams, batch: &[Vec<usize>], aux: f32) -> (f32, ModelParams) {
    let threads = thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(batch.len())
        .max(1);
    let chunk = batch.len().div_ceil(threads);
    // One gradient per sequence, summed in sequence order so the result does
    // not depend on the thread count.
    let per_seq: Vec<(f32, ModelParams)> = thread::scope(|scope| {
        let handles: Vec<_> = batch
            .chunks(chunk)
            .map(|seqs| {
                scope.spawn(move || {
                    seqs.iter()
                        .map(|s| {
                            let fwd = Forward::run(params, s);
                            let loss = fwd.loss;
                            (loss, fwd.backward(params, s, aux))
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("gradient worker panicked"))
            .collect()
    });
    let scale = 1.0 / batch.len() as f32;
    let mut iter = per_seq.into_iter();
    let (mut loss, mut total) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        for (t, s) in slices_mut(&mut total).into_iter().zip(slices(&g)) {
            tensor::axpy(1.0, s, t);
        }
    }
    for t in slices_mut(&mut total) {
        t.iter_mut().for_each(|v| *v *= scale);
    }
    (loss * scale, total)
}

fn clip(grad: &mut ModelParams, max_norm: f32) {
    if max_norm <= 0.0 {
        return;
    }
    let norm: f64 = slices(grad)
        .iter()
        .flat_map(|s| s.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm as f64 {
        let s = (max_norm as f64 / norm) as f32;
        for t in slices_mut(grad) {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }
}

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    const B1: f32 = 0.9;
    const B2: f32 = 0.98;
    const EPS: f32 = 1e-8;

    fn new(p: &ModelParams) -> Self {
        let shapes: Vec<usize> = slices(p).iter().map(|s| s.len()).collect();
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ModelParams, grad: &ModelParams, lr: f32) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (((p, g), m), v) in slices_mut(params)
            .into_iter()
            .zip(slices(grad))
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                m[i] = Self::B1 * m[i] + (1.0 - Self::B1) * g[i];
                v[i] = Self::B2 * v[i] + (1.0 - Self::B2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

fn slices(p: &ModelParams) -> Vec<&[f32]> {
    let mut out: Vec<&[f32]> = vec![p.tok_emb.as_slice(), p.pos_emb.as_slice()];
    for l in &p.layers {
        out.push(&l.attn_norm);
        out.push(l.wq.as_slice());
        out.push(l.wk.as_slice());
        out.push(l.wv.as_slice());
        out.push(l.wo.as_slice());
        out.push(&l.ffn_norm);
        out.push(l.gate.as_slice());
        out.extend(l.experts.iter().map(|e| e.as_flat()));
    }
    out.push(&p.final_norm);
    out.push(p.lm_head.as_slice());
    out
}

fn slices_mut(p: &mut ModelParams) -> Vec<&mut [f32]> {
    let mut out: Vec<&mut [f32]> = vec![p.tok_emb.as_mut_slice(), p.pos_emb.as_mut_slice()];
    for l in &mut p.layers {
        out.push(&mut l.attn_norm);
        out.push(l.wq.as_mut_slice());
        out.push(l.wk.as_mut_slice());
        out.push(l.wv.as_mut_slice());
        out.push(l.wo.as_mut_slice());
        out.push(&mut l.ffn_norm);
        out.push(l.gate.as_mut_slice());
        out.extend(l.experts.iter_mut().map(|e| e.as_flat_mut()));
    }
    out.push(&mut p.final_norm);
    out.push(p.lm_head.as_mut_slice());
    out
}

fn zeros_like(p: &ModelParams) -> ModelParams {
    let mut z = p.clone();
    for s in slices_mut(&mut z) {
        s.fill(0.0);
    }
    z
}

struct Slot {
    expert: usize,
    weight: f32,
    g: Vec<f32>,
    u: Vec<f32>,
    act: Vec<f32>,
    y: Vec<f32>,
}

#[derive(Default)]
struct Block {
    x_in: Vec<Vec<f32>>,
    r_a: Vec<f32>,
    a: Vec<Vec<f32>>,
    q: Vec<Vec<f32>>,
    k: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    /// `[t][head]`, each of length `t + 1`.
    probs: Vec<Vec<Vec<f32>>>,
    ctx: Vec<Vec<f32>>,
    x_mid: Vec<Vec<f32>>,
    r_f: Vec<f32>,
    n: Vec<Vec<f32>>,
    full_p: Vec<Vec<f32>>,
    slots: Vec<Vec<Slot>>,
}

struct Forward {
    blocks: Vec<Block>,
    x_final: Vec<Vec<f32>>,
    r_final: Vec<f32>,
    z: Vec<Vec<f32>>,
    probs: Vec<Vec<f32>>,
    loss: f32,
}

fn norm_fwd(x: &[f32], gain: &[f32]) -> (f32, Vec<f32>) {
    let r = tensor::inv_rms(x);
    (r, x.iter().zip(gain).map(|(&v, &g)| v * r * g).collect())
}

/// Backward of `y = gain * x * r`; accumulates into `dx` and `dgain`.
fn norm_bwd(x: &[f32], r: f32, gain: &[f32], dy: &[f32], dx: &mut [f32], dgain: &mut [f32]) {
    let d = x.len() as f32;
    let mut s = 0.0f32;
    for i in 0..x.len() {
        dgain[i] += dy[i] * x[i] * r;
        s += dy[i] * gain[i] * x[i];
    }
    let c = r * r * r * s / d;
    for i in 0..x.len() {
        dx[i] += r * gain[i] * dy[i] - c * x[i];
    }
}

impl Forward {
    // Positions index several per-step buffers at once.
    #[allow(clippy::needless_range_loop)]
    fn run(p: &ModelParams, tokens: &[usize]) -> Self {
        let cfg = &p.config;
        let t_len = tokens.len();
        let d = cfg.d_model;
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f32).sqrt();
        let mut x: Vec<Vec<f32>> = tokens
            .iter()
            .enumerate()
            .map(|(t, &tok)| {
                p.tok_emb
                    .row(tok)
                    .iter()
                    .zip(p.pos_emb.row(t))
                    .map(|(a, b)| a + b)
                    .collect()
            })
            .collect();
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for lp in &p.layers {
            let mut blk = Block {
                x_in: x.clone(),
                ..Default::default()
            };
            for xt in &x {
                let (r, a) = norm_fwd(xt, &lp.attn_norm);
                blk.q.push(lp.wq.view().matvec(&a));
                blk.k.push(lp.wk.view().matvec(&a));
                blk.v.push(lp.wv.view().matvec(&a));
                blk.r_a.push(r);
                blk.a.push(a);
            }
            for t in 0..t_len {
                let mut ctx = vec![0.0f32; d];
                let mut heads = Vec::with_capacity(cfg.n_heads);
                for h in 0..cfg.n_heads {
                    let o = h * hd;
                    let mut s: Vec<f32> = (0..=t)
                        .map(|j| tensor::dot(&blk.q[t][o..o + hd], &blk.k[j][o..o + hd]) * scale)
                        .collect();
                    tensor::softmax_in_place(&mut s);
                    for (j, &pj) in s.iter().enumerate() {
                        tensor::axpy(pj, &blk.v[j][o..o + hd], &mut ctx[o..o + hd]);
                    }
                    heads.push(s);
                }
                let attn = lp.wo.view().matvec(&ctx);
                blk.x_mid
                    .push(x[t].iter().zip(&attn).map(|(a, b)| a + b).collect());
                blk.ctx.push(ctx);
                blk.probs.push(heads);
            }
            for t in 0..t_len {
                let (r, n) = norm_fwd(&blk.x_mid[t], &lp.ffn_norm);
                let logits = lp.gate.view().matvec(&n);
                let sel = gate::top_k_indices(&logits, cfg.top_k_gate);
                let w = gate::selected_softmax(&logits, &sel);
                let mut full = logits;
                tensor::softmax_in_place(&mut full);
                let mut out = blk.x_mid[t].clone();
                let mut slots = Vec::with_capacity(sel.len());
                for (&e, &wt) in sel.iter().zip(&w) {
                    let ev = lp.experts[e].view();
                    let g = ev.w_gate_proj.matvec(&n);
                    let u = ev.w_up_proj.matvec(&n);
                    let act: Vec<f32> = g
                        .iter()
                        .zip(&u)
                        .map(|(&g, &u)| tensor::silu(g) * u)
                        .collect();
                    let y = ev.w_down_proj.matvec(&act);
                    tensor::axpy(wt, &y, &mut out);
                    slots.push(Slot {
                        expert: e,
                        weight: wt,
                        g,
                        u,
                        act,
                        y,
                    });
                }
                x[t] = out;
                blk.r_f.push(r);
                blk.n.push(n);
                blk.full_p.push(full);
                blk.slots.push(slots);
            }
            blocks.push(blk);
        }
        let mut r_final = Vec::with_capacity(t_len);
        let mut z = Vec::with_capacity(t_len);
        let mut probs = Vec::with_capacity(t_len);
        let mut loss = 0.0f32;
        for t in 0..t_len {
            let (r, zt) = norm_fwd(&x[t], &p.final_norm);
            let mut pr = p.lm_head.view().matvec(&zt);
            tensor::softmax_in_place(&mut pr);
            if t + 1 < t_len {
                loss -= pr[tokens[t + 1]].max(1e-30).ln();
            }
            r_final.push(r);
            z.push(zt);
            probs.push(pr);
        }
        let n_targets = (t_len.saturating_sub(1)).max(1) as f32;
        Self {
            blocks,
            x_final: x,
            r_final,
            z,
            probs,
            loss: loss / n_targets,
        }
    }

    fn backward(&self, p: &ModelParams, tokens: &[usize], aux_coef: f32) -> ModelParams {
        let cfg = &p.config;
        let t_len = tokens.len();
        let d = cfg.d_model;
        let hd = cfg.head_dim();
        let n_exp = cfg.n_experts;
        let scale = 1.0 / (hd as f32).sqrt();
        let n_targets = (t_len.saturating_sub(1)).max(1) as f32;
        let mut grad = zeros_like(p);

        let mut dx: Vec<Vec<f32>> = vec![vec![0.0; d]; t_len];
        for t in 0..t_len.saturating_sub(1) {
            let mut dl = self.probs[t].clone();
            dl[tokens[t + 1]] -= 1.0;
            dl.iter_mut().for_each(|v| *v /= n_targets);
            tensor::outer_acc(&dl, &self.z[t], grad.lm_head.as_mut_slice());
            let mut dz = vec![0.0; d];
            p.lm_head.view().matvec_t_acc(&dl, &mut dz);
            norm_bwd(
                &self.x_final[t],
                self.r_final[t],
                &p.final_norm,
                &dz,
                &mut dx[t],
                &mut grad.final_norm,
            );
        }

        for (l, (lp, blk)) in p.layers.iter().zip(&self.blocks).enumerate().rev() {
            let gl: &mut LayerParams = &mut grad.layers[l];

            // Load-balancing statistics for this layer.
            let mut frac = vec![0.0f32; n_exp];
            for slots in &blk.slots {
                for s in slots {
                    frac[s.expert] += 1.0;
                }
            }
            let assignments = (t_len * cfg.top_k_gate) as f32;
            frac.iter_mut().for_each(|f| *f /= assignments);
            let aux_scale = aux_coef * n_exp as f32 / (cfg.n_layers as f32 * t_len as f32);

            // MoE block.
            let mut dmid = dx.clone();
            for t in 0..t_len {
                let dout = &dx[t];
                let n = &blk.n[t];
                let mut dn = vec![0.0f32; d];
                let mut dlogits = vec![0.0f32; n_exp];
                let slots = &blk.slots[t];
                let dw: Vec<f32> = slots.iter().map(|s| tensor::dot(dout, &s.y)).collect();
                let mean_dw: f32 = slots.iter().zip(&dw).map(|(s, g)| s.weight * g).sum();
                for (s, &dws) in slots.iter().zip(&dw) {
                    dlogits[s.expert] += s.weight * (dws - mean_dw);
                    let ev = lp.experts[s.expert].view();
                    let ge = gl.experts[s.expert].as_flat_mut();
                    let nn = d * cfg.d_ffn;
                    let dy: Vec<f32> = dout.iter().map(|v| v * s.weight).collect();
                    tensor::outer_acc(&dy, &s.act, &mut ge[2 * nn..]);
                    let mut dact = vec![0.0f32; cfg.d_ffn];
                    ev.w_down_proj.matvec_t_acc(&dy, &mut dact);
                    let mut dg = vec![0.0f32; cfg.d_ffn];
                    let mut du = vec![0.0f32; cfg.d_ffn];
                    for i in 0..cfg.d_ffn {
                        let sg = tensor::sigmoid(s.g[i]);
                        let silu = s.g[i] * sg;
                        du[i] = dact[i] * silu;
                        dg[i] = dact[i] * s.u[i] * sg * (1.0 + s.g[i] * (1.0 - sg));
                    }
                    tensor::outer_acc(&dg, n, &mut ge[..nn]);
                    tensor::outer_acc(&du, n, &mut ge[nn..2 * nn]);
                    ev.w_gate_proj.matvec_t_acc(&dg, &mut dn);
                    ev.w_up_proj.matvec_t_acc(&du, &mut dn);
                }
                if aux_coef != 0.0 {
                    let pf = &blk.full_p[t];
                    let dp: Vec<f32> = frac.iter().map(|f| f * aux_scale).collect();
                    let mean: f32 = pf.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for e in 0..n_exp {
                        dlogits[e] += pf[e] * (dp[e] - mean);
                    }
                }
                tensor::outer_acc(&dlogits, n, gl.gate.as_mut_slice());
                lp.gate.view().matvec_t_acc(&dlogits, &mut dn);
                norm_bwd(
                    &blk.x_mid[t],
                    blk.r_f[t],
                    &lp.ffn_norm,
                    &dn,
                    &mut dmid[t],
                    &mut gl.ffn_norm,
                );
            }

            // Attention block.
            let mut dxin = dmid.clone();
            let mut dq = vec![vec![0.0f32; d]; t_len];
            let mut dk = vec![vec![0.0f32; d]; t_len];
            let mut dv = vec![vec![0.0f32; d]; t_len];
            for t in 0..t_len {
                tensor::outer_acc(&dmid[t], &blk.ctx[t], gl.wo.as_mut_slice());
                let mut dctx = vec![0.0f32; d];
                lp.wo.view().matvec_t_acc(&dmid[t], &mut dctx);
                for h in 0..cfg.n_heads {
                    let o = h * hd;
                    let pr = &blk.probs[t][h];
                    let dc = &dctx[o..o + hd];
                    let dp: Vec<f32> = (0..=t)
                        .map(|j| tensor::dot(dc, &blk.v[j][o..o + hd]))
                        .collect();
                    let mean: f32 = pr.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for j in 0..=t {
                        tensor::axpy(pr[j], dc, &mut dv[j][o..o + hd]);
                        let ds = pr[j] * (dp[j] - mean) * scale;
                        if ds != 0.0 {
                            let kj = blk.k[j][o..o + hd].to_vec();
                            tensor::axpy(ds, &kj, &mut dq[t][o..o + hd]);
                            let qt = blk.q[t][o..o + hd].to_vec();
                            tensor::axpy(ds, &qt, &mut dk[j][o..o + hd]);
                        }
                    }
                }
            }
            for t in 0..t_len {
                let a = &blk.a[t];
                tensor::outer_acc(&dq[t], a, gl.wq.as_mut_slice());
                tensor::outer_acc(&dk[t], a, gl.wk.as_mut_slice());
                tensor::outer_acc(&dv[t], a, gl.wv.as_mut_slice());
                let mut da = vec![0.0f32; d];
                lp.wq.view().matvec_t_acc(&dq[t], &mut da);
                lp.wk.view().matvec_t_acc(&dk[t], &mut da);
                lp.wv.view().matvec_t_acc(&dv[t], &mut da);
                norm_bwd(
                    &blk.x_in[t],
                    blk.r_a[t],
                    &lp.attn_norm,
                    &da,
                    &mut dxin[t],
                    &mut gl.attn_norm,
                );
            }
            dx = dxin;
        }

        for (t, &tok) in tokens.iter().enumerate() {
            tensor::axpy(1.0, &dx[t], grad.tok_emb.row_mut(tok));
            tensor::axpy(1.0, &dx[t], grad.pos_emb.row_mut(t));
        }
        grad
    }
}

/// Total loss including the load-balancing term; used by the gradient check.
#[cfg(test)]
fn total_loss(p: &ModelParams, tokens: &[usize], aux_coef: f32) -> f64 {
    let fwd = Forward::run(p, tokens);
    let cfg = &p.config;
    let t_len = tokens.len();
    let mut aux = 0.0f64;
    for blk in &fwd.blocks {
        let mut frac = vec![0.0f64; cfg.n_experts];
        let mut mean_p = vec![0.0f64; cfg.n_experts];
        for (slots, pf) in blk.slots.iter().zip(&blk.full_p) {
            for s in slots {
                frac[s.expert] += 1.0 / (t_len * cfg.top_k_gate) as f64;
            }
            for e in 0..cfg.n_experts {
                mean_p[e] += pf[e] as f64 / t_len as f64;
            }
        }
        aux += cfg.n_experts as f64 * frac.iter().zip(&mean_p).map(|(a, b)| a * b).sum::<f64>();
    }
    fwd.loss as f64 + aux_coef as f64 * aux / cfg.n_layers as f64
}
