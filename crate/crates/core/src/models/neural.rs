//! Small causal sequence model with hand-written reverse-mode gradients.
//!
//! Each position starts from a token embedding plus a learned position
//! embedding. A block mixes in the causal mean of its inputs and applies a
//! gated feed-forward update with a residual connection:
//!
//! ```text
//! c_t = mean_{s<=t} h_s
//! f_t = tanh(W1 h_t + U1 c_t + b1) * sigmoid(Wg h_t + Ug c_t + bg)
//! h'_t = h_t + W2 f_t + b2
//! ```
//!
//! and the last block feeds a linear readout over the vocabulary.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{TokenId, Vocab};
use crate::error::{Result, SpoError};
use crate::numeric::{log_softmax, sigmoid, softmax};
use crate::seed::stream_rng;

/// Architecture knobs of the neural policy.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuralPolicyConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub hidden: usize,
    /// Maximum prompt + response length.
    pub context_len: usize,
}

impl NeuralPolicyConfig {
    /// Smallest shipped configuration (about 10⁴ parameters for a
    /// two-dozen-token vocabulary).
    pub fn small(context_len: usize) -> Self {
        Self {
            d_model: 32,
            n_layers: 1,
            hidden: 64,
            context_len,
        }
    }

    pub fn base(context_len: usize) -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            hidden: 128,
            context_len,
        }
    }

    pub fn param_count(&self, vocab_size: usize) -> usize {
        Layout::new(self, vocab_size).total
    }

    fn check(&self) -> Result<()> {
        if self.d_model == 0 || self.hidden == 0 || self.context_len < 2 {
            return Err(SpoError::InvalidArgument(format!("degenerate neural config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LayerOffsets {
    w1: usize,
    u1: usize,
    b1: usize,
    wg: usize,
    ug: usize,
    bg: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    vocab: usize,
    d: usize,
    h: usize,
    tok: usize,
    pos: usize,
    layers: Vec<LayerOffsets>,
    wo: usize,
    bo: usize,
    total: usize,
}

impl Layout {
    fn new(config: &NeuralPolicyConfig, vocab: usize) -> Self {
        let (d, h) = (config.d_model, config.hidden);
        let mut next = 0;
        let mut take = |n: usize| {
            let at = next;
            next += n;
            at
        };
        let tok = take(vocab * d);
        let pos = take(config.context_len * d);
        let layers = (0..config.n_layers)
            .map(|_| LayerOffsets {
                w1: take(h * d),
                u1: take(h * d),
                b1: take(h),
                wg: take(h * d),
                ug: take(h * d),
                bg: take(h),
                w2: take(d * h),
                b2: take(d),
            })
            .collect();
        let wo = take(vocab * d);
        let bo = take(vocab);
        Self {
            vocab,
            d,
            h,
            tok,
            pos,
            layers,
            wo,
            bo,
            total: next,
        }
    }
}

/// `out += W x` for a row-major `rows × cols` matrix.
fn matvec_add(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `dx += Wᵀ dy`.
fn matvec_t_add(w: &[f64], dy: &[f64], dx: &mut [f64]) {
    let cols = dx.len();
    for (&g, row) in dy.iter().zip(w.chunks_exact(cols)) {
        if g == 0.0 {
            continue;
        }
        for (d, a) in dx.iter_mut().zip(row) {
            *d += g * a;
        }
    }
}

/// `gw += dy xᵀ`.
fn outer_add(gw: &mut [f64], dy: &[f64], x: &[f64]) {
    let cols = x.len();
    for (&g, row) in dy.iter().zip(gw.chunks_exact_mut(cols)) {
        if g == 0.0 {
            continue;
        }
        for (r, a) in row.iter_mut().zip(x) {
            *r += g * a;
        }
    }
}

/// Activations of one forward pass, kept for the backward pass.
struct Trace {
    positions: usize,
    /// `n_layers + 1` arrays of `positions × d`.
    hs: Vec<Vec<f64>>,
    /// Causal means, `n_layers` arrays of `positions × d`.
    cs: Vec<Vec<f64>>,
    /// `tanh` branch, `n_layers` arrays of `positions × hidden`.
    acts: Vec<Vec<f64>>,
    /// Gate branch after the sigmoid.
    gates: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeuralPolicy {
    vocab: Vocab,
    config: NeuralPolicyConfig,
    layout: Layout,
    params: Vec<f64>,
}

impl NeuralPolicy {
    /// Random initialization from `seed`.
    pub fn new(vocab: Vocab, config: NeuralPolicyConfig, seed: u64) -> Result<Self> {
        config.check()?;
        let layout = Layout::new(&config, vocab.size as usize);
        let mut params = vec![0.0; layout.total];
        let mut rng = stream_rng(seed, "neural-init", 0);
        let (d, h) = (layout.d, layout.h);
        let mut fill = |params: &mut [f64], std: f64| {
            for p in params {
                *p = std * rng.sample::<f64, _>(StandardNormal);
            }
        };
        let emb_std = 1.0 / (d as f64).sqrt();
        fill(&mut params[layout.tok..layout.tok + layout.vocab * d], emb_std);
        fill(&mut params[layout.pos..layout.pos + config.context_len * d], emb_std);
        for l in &layout.layers {
            let in_std = 1.0 / (d as f64).sqrt();
            fill(&mut params[l.w1..l.w1 + h * d], in_std);
            fill(&mut params[l.u1..l.u1 + h * d], in_std);
            fill(&mut params[l.wg..l.wg + h * d], in_std);
            fill(&mut params[l.ug..l.ug + h * d], in_std);
            fill(&mut params[l.w2..l.w2 + d * h], 0.5 / (h as f64).sqrt());
        }
        fill(&mut params[layout.wo..layout.wo + layout.vocab * d], 1.0 / (d as f64).sqrt());
        Ok(Self {
            vocab,
            config,
            layout,
            params,
        })
    }

    /// Rebuilds a policy from stored parameters.
    pub fn from_params(vocab: Vocab, config: NeuralPolicyConfig, params: Vec<f64>) -> Result<Self> {
        config.check()?;
        let layout = Layout::new(&config, vocab.size as usize);
        if params.len() != layout.total {
            return Err(SpoError::ArchitectureMismatch(format!(
                "{} parameters for an architecture with {}",
                params.len(),
                layout.total
            )));
        }
        Ok(Self {
            vocab,
            config,
            layout,
            params,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn config(&self) -> &NeuralPolicyConfig {
        &self.config
    }

    pub(crate) fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_sequence(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<()> {
        if prompt.is_empty() || response.is_empty() {
            return Err(SpoError::InvalidArgument("empty prompt or response".into()));
        }
        let len = prompt.len() + response.len();
        if len > self.config.context_len {
            return Err(SpoError::ContextOverflow {
                len,
                max: self.config.context_len,
            });
        }
        if let Some(t) = prompt.iter().chain(response).find(|&&t| !self.vocab.contains(t)) {
            return Err(SpoError::VocabMismatch(format!("token {t} outside vocabulary")));
        }
        Ok(())
    }

    fn block_forward(&self, layer: &LayerOffsets, h: &[f64], c: &[f64], act: &mut [f64], gate: &mut [f64], out: &mut [f64]) {
        let (d, hid) = (self.layout.d, self.layout.h);
        let p = &self.params;
        act.copy_from_slice(&p[layer.b1..layer.b1 + hid]);
        matvec_add(&p[layer.w1..layer.w1 + hid * d], h, act);
        matvec_add(&p[layer.u1..layer.u1 + hid * d], c, act);
        gate.copy_from_slice(&p[layer.bg..layer.bg + hid]);
        matvec_add(&p[layer.wg..layer.wg + hid * d], h, gate);
        matvec_add(&p[layer.ug..layer.ug + hid * d], c, gate);
        for (a, g) in act.iter_mut().zip(gate.iter_mut()) {
            *a = a.tanh();
            *g = sigmoid(*g);
        }
        let f: Vec<f64> = act.iter().zip(gate.iter()).map(|(a, g)| a * g).collect();
        out.copy_from_slice(h);
        for (o, b) in out.iter_mut().zip(&p[layer.b2..layer.b2 + d]) {
            *o += b;
        }
        matvec_add(&p[layer.w2..layer.w2 + d * hid], &f, out);
    }

    fn readout(&self, h: &[f64]) -> Vec<f64> {
        let (v, d) = (self.layout.vocab, self.layout.d);
        let mut logits = self.params[self.layout.bo..self.layout.bo + v].to_vec();
        matvec_add(&self.params[self.layout.wo..self.layout.wo + v * d], h, &mut logits);
        logits
    }

    fn embed(&self, token: TokenId, position: usize, out: &mut [f64]) {
        let d = self.layout.d;
        let t = self.layout.tok + token as usize * d;
        let p = self.layout.pos + position * d;
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.params[t + i] + self.params[p + i];
        }
    }

    /// Runs the stack over `seq[..positions]`.
    fn forward(&self, seq: &[TokenId], positions: usize) -> Trace {
        let (d, hid) = (self.layout.d, self.layout.h);
        let n_layers = self.layout.layers.len();
        let mut hs = Vec::with_capacity(n_layers + 1);
        let mut h0 = vec![0.0; positions * d];
        for t in 0..positions {
            self.embed(seq[t], t, &mut h0[t * d..(t + 1) * d]);
        }
        hs.push(h0);
        let mut cs = Vec::with_capacity(n_layers);
        let mut acts = Vec::with_capacity(n_layers);
        let mut gates = Vec::with_capacity(n_layers);
        for layer in &self.layout.layers {
            let h_in = hs.last().expect("input layer present");
            let mut c = vec![0.0; positions * d];
            let mut sum = vec![0.0; d];
            for t in 0..positions {
                for (s, x) in sum.iter_mut().zip(&h_in[t * d..(t + 1) * d]) {
                    *s += x;
                }
                let inv = 1.0 / (t + 1) as f64;
                for (ci, s) in c[t * d..(t + 1) * d].iter_mut().zip(&sum) {
                    *ci = s * inv;
                }
            }
            let mut a = vec![0.0; positions * hid];
            let mut g = vec![0.0; positions * hid];
            let mut h_out = vec![0.0; positions * d];
            for t in 0..positions {
                self.block_forward(
                    layer,
                    &h_in[t * d..(t + 1) * d],
                    &c[t * d..(t + 1) * d],
                    &mut a[t * hid..(t + 1) * hid],
                    &mut g[t * hid..(t + 1) * hid],
                    &mut h_out[t * d..(t + 1) * d],
                );
            }
            cs.push(c);
            acts.push(a);
            gates.push(g);
            hs.push(h_out);
        }
        Trace {
            positions,
            hs,
            cs,
            acts,
            gates,
        }
    }

    /// `Σ_t log p(y_t | x, y_<t)`.
    pub fn logprob(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<f64> {
        self.check_sequence(prompt, response)?;
        let seq: Vec<TokenId> = prompt.iter().chain(response).copied().collect();
        let positions = seq.len() - 1;
        let trace = self.forward(&seq, positions);
        let d = self.layout.d;
        let top = &trace.hs[trace.hs.len() - 1];
        let mut total = 0.0;
        for t in prompt.len() - 1..positions {
            let lp = log_softmax(&self.readout(&top[t * d..(t + 1) * d]));
            total += lp[seq[t + 1] as usize];
        }
        Ok(total)
    }

    /// Log-probability plus its gradient, accumulated into `grad`.
    pub fn logprob_grad(&self, prompt: &[TokenId], response: &[TokenId], grad: &mut [f64]) -> Result<f64> {
        self.check_sequence(prompt, response)?;
        let seq: Vec<TokenId> = prompt.iter().chain(response).copied().collect();
        let positions = seq.len() - 1;
        let trace = self.forward(&seq, positions);
        let lay = &self.layout;
        let (v, d, hid) = (lay.vocab, lay.d, lay.h);
        let p = &self.params;

        let mut dh = vec![0.0; positions * d];
        let mut total = 0.0;
        {
            let top = &trace.hs[trace.hs.len() - 1];
            for t in prompt.len() - 1..positions {
                let h = &top[t * d..(t + 1) * d];
                let logits = self.readout(h);
                let target = seq[t + 1] as usize;
                let lp = log_softmax(&logits);
                total += lp[target];
                let mut dlogits: Vec<f64> = lp.iter().map(|l| -l.exp()).collect();
                dlogits[target] += 1.0;
                outer_add(&mut grad[lay.wo..lay.wo + v * d], &dlogits, h);
                for (g, dl) in grad[lay.bo..lay.bo + v].iter_mut().zip(&dlogits) {
                    *g += dl;
                }
                matvec_t_add(&p[lay.wo..lay.wo + v * d], &dlogits, &mut dh[t * d..(t + 1) * d]);
            }
        }

        for (li, layer) in lay.layers.iter().enumerate().rev() {
            let h_in = &trace.hs[li];
            let c = &trace.cs[li];
            let a = &trace.acts[li];
            let s = &trace.gates[li];
            let mut dh_in = dh.clone();
            let mut dc = vec![0.0; positions * d];
            let mut df = vec![0.0; hid];
            let mut dz = vec![0.0; hid];
            let mut dg = vec![0.0; hid];
            for t in 0..positions {
                let dout = &dh[t * d..(t + 1) * d];
                if dout.iter().all(|&x| x == 0.0) {
                    continue;
                }
                let at = &a[t * hid..(t + 1) * hid];
                let st = &s[t * hid..(t + 1) * hid];
                let f: Vec<f64> = at.iter().zip(st).map(|(x, y)| x * y).collect();
                outer_add(&mut grad[layer.w2..layer.w2 + d * hid], dout, &f);
                for (g, x) in grad[layer.b2..layer.b2 + d].iter_mut().zip(dout) {
                    *g += x;
                }
                df.iter_mut().for_each(|x| *x = 0.0);
                matvec_t_add(&p[layer.w2..layer.w2 + d * hid], dout, &mut df);
                for k in 0..hid {
                    dz[k] = df[k] * st[k] * (1.0 - at[k] * at[k]);
                    dg[k] = df[k] * at[k] * st[k] * (1.0 - st[k]);
                }
                let ht = &h_in[t * d..(t + 1) * d];
                let ct = &c[t * d..(t + 1) * d];
                outer_add(&mut grad[layer.w1..layer.w1 + hid * d], &dz, ht);
                outer_add(&mut grad[layer.u1..layer.u1 + hid * d], &dz, ct);
                outer_add(&mut grad[layer.wg..layer.wg + hid * d], &dg, ht);
                outer_add(&mut grad[layer.ug..layer.ug + hid * d], &dg, ct);
                for k in 0..hid {
                    grad[layer.b1 + k] += dz[k];
                    grad[layer.bg + k] += dg[k];
                }
                let dhi = &mut dh_in[t * d..(t + 1) * d];
                matvec_t_add(&p[layer.w1..layer.w1 + hid * d], &dz, dhi);
                matvec_t_add(&p[layer.wg..layer.wg + hid * d], &dg, dhi);
                let dct = &mut dc[t * d..(t + 1) * d];
                matvec_t_add(&p[layer.u1..layer.u1 + hid * d], &dz, dct);
                matvec_t_add(&p[layer.ug..layer.ug + hid * d], &dg, dct);
            }
            // c_t averages h_0..h_t, so h_s collects Σ_{t>=s} dc_t / (t+1).
            let mut acc = vec![0.0; d];
            for t in (0..positions).rev() {
                let inv = 1.0 / (t + 1) as f64;
                for (i, x) in acc.iter_mut().enumerate() {
                    *x += dc[t * d + i] * inv;
                }
                for (x, y) in dh_in[t * d..(t + 1) * d].iter_mut().zip(&acc) {
                    *x += y;
                }
            }
            dh = dh_in;
        }

        for t in 0..positions {
            let tok = lay.tok + seq[t] as usize * d;
            let pos = lay.pos + t * d;
            for i in 0..d {
                grad[tok + i] += dh[t * d + i];
                grad[pos + i] += dh[t * d + i];
            }
        }
        debug_assert_eq!(trace.positions, positions);
        Ok(total)
    }

    /// Next-token distribution after `context` (prompt followed by any
    /// response prefix).
    pub fn next_token_probs(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        if context.is_empty() || context.len() > self.config.context_len {
            return Err(SpoError::ContextOverflow {
                len: context.len(),
                max: self.config.context_len,
            });
        }
        let mut dec = Decoder::new(self);
        let mut logits = Vec::new();
        for &t in context {
            logits = dec.feed(t)?;
        }
        Ok(softmax(&logits))
    }

    pub(crate) fn decoder(&self) -> Decoder<'_> {
        Decoder::new(self)
    }
}

/// Incremental evaluation for generation: keeps only the running sums the
/// causal means need.
pub(crate) struct Decoder<'a> {
    model: &'a NeuralPolicy,
    sums: Vec<Vec<f64>>,
    position: usize,
}

impl<'a> Decoder<'a> {
    fn new(model: &'a NeuralPolicy) -> Self {
        let d = model.layout.d;
        Self {
            model,
            sums: vec![vec![0.0; d]; model.layout.layers.len()],
            position: 0,
        }
    }

    pub(crate) fn position(&self) -> usize {
        self.position
    }

    /// Consumes `token` and returns the logits for the next position.
    pub(crate) fn feed(&mut self, token: TokenId) -> Result<Vec<f64>> {
        let m = self.model;
        if self.position >= m.config.context_len {
            return Err(SpoError::ContextOverflow {
                len: self.position + 1,
                max: m.config.context_len,
            });
        }
        if !m.vocab.contains(token) {
            return Err(SpoError::VocabMismatch(format!("token {token} outside vocabulary")));
        }
        let (d, hid) = (m.layout.d, m.layout.h);
        let mut h = vec![0.0; d];
        m.embed(token, self.position, &mut h);
        let inv = 1.0 / (self.position + 1) as f64;
        let mut act = vec![0.0; hid];
        let mut gate = vec![0.0; hid];
        let mut next = vec![0.0; d];
        for (layer, sum) in m.layout.layers.iter().zip(self.sums.iter_mut()) {
            for (s, x) in sum.iter_mut().zip(&h) {
                *s += x;
            }
            let c: Vec<f64> = sum.iter().map(|s| s * inv).collect();
            m.block_forward(layer, &h, &c, &mut act, &mut gate, &mut next);
            std::mem::swap(&mut h, &mut next);
        }
        self.position += 1;
        Ok(m.readout(&h))
    }
}
