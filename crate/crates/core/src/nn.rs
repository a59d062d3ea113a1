//! A small causal transformer with a hand-written backward pass.
//!
//! Sequences are stored row-major as `T × d` matrices. The network maps a
//! sequence of per-step feature vectors to one output vector per position,
//! with a learned token in front so position 0 has no observations.

use nalgebra::{DMatrix, DVector, RowDVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub enc_hidden: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { input_dim: 0, output_dim: 0, d_model: 32, heads: 2, layers: 2, d_ff: 64, enc_hidden: 32 }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const LN_EPS: f64 = 1e-5;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Sinusoidal position encoding for one position.
pub fn position_encoding(pos: usize, d: usize) -> RowDVector<f64> {
    RowDVector::from_fn(d, |_, j| {
        let i = (j / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
        if j % 2 == 0 { angle.sin() } else { angle.cos() }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `out × in`
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, scale: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, scale / (input as f64).sqrt()).expect("finite scale");
        Linear { w: DMatrix::from_fn(output, input, |_, _| normal.sample(rng)), b: DVector::zeros(output) }
    }

    fn zeros_like(&self) -> Self {
        Linear { w: DMatrix::zeros(self.w.nrows(), self.w.ncols()), b: DVector::zeros(self.b.len()) }
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = x * self.w.transpose();
        let bt = self.b.transpose();
        for mut row in y.row_iter_mut() {
            row += &bt;
        }
        y
    }

    pub fn forward_row(&self, x: &RowDVector<f64>) -> RowDVector<f64> {
        x * self.w.transpose() + self.b.transpose()
    }

    fn backward(&self, x: &DMatrix<f64>, dy: &DMatrix<f64>, g: &mut Linear) -> DMatrix<f64> {
        g.w += dy.transpose() * x;
        g.b += dy.row_sum().transpose();
        dy * &self.w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: DVector<f64>,
    pub beta: DVector<f64>,
}

struct LnCache {
    xhat: DMatrix<f64>,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        LayerNorm { gamma: DVector::from_element(d, 1.0), beta: DVector::zeros(d) }
    }

    fn zeros_like(&self) -> Self {
        LayerNorm { gamma: DVector::zeros(self.gamma.len()), beta: DVector::zeros(self.beta.len()) }
    }

    fn normalize_row(x: &RowDVector<f64>) -> (RowDVector<f64>, f64) {
        let d = x.len() as f64;
        let mean = x.sum() / d;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        (x.map(|v| (v - mean) * inv), inv)
    }

    fn forward_row(&self, x: &RowDVector<f64>) -> RowDVector<f64> {
        let (xhat, _) = Self::normalize_row(x);
        xhat.component_mul(&self.gamma.transpose()) + self.beta.transpose()
    }

    fn forward(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, LnCache) {
        let mut xhat = DMatrix::zeros(x.nrows(), x.ncols());
        let mut inv_std = Vec::with_capacity(x.nrows());
        for (i, row) in x.row_iter().enumerate() {
            let (h, inv) = Self::normalize_row(&row.into_owned());
            xhat.set_row(i, &h);
            inv_std.push(inv);
        }
        let mut y = xhat.clone();
        for mut row in y.row_iter_mut() {
            row.component_mul_assign(&self.gamma.transpose());
            row += self.beta.transpose();
        }
        (y, LnCache { xhat, inv_std })
    }

    fn backward(&self, cache: &LnCache, dy: &DMatrix<f64>, g: &mut LayerNorm) -> DMatrix<f64> {
        g.gamma += dy.component_mul(&cache.xhat).row_sum().transpose();
        g.beta += dy.row_sum().transpose();
        let d = dy.ncols() as f64;
        let mut dx = DMatrix::zeros(dy.nrows(), dy.ncols());
        for i in 0..dy.nrows() {
            let dxhat = dy.row(i).component_mul(&self.gamma.transpose());
            let xh = cache.xhat.row(i);
            let mean_d = dxhat.sum() / d;
            let mean_dx = dxhat.dot(&xh) / d;
            let row = (dxhat - RowDVector::from_element(dy.ncols(), mean_d) - xh * mean_dx) * cache.inv_std[i];
            dx.set_row(i, &row);
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

struct BlockCache {
    ln1: LnCache,
    y1: DMatrix<f64>,
    q: DMatrix<f64>,
    k: DMatrix<f64>,
    v: DMatrix<f64>,
    probs: Vec<DMatrix<f64>>,
    o: DMatrix<f64>,
    ln2: LnCache,
    y2: DMatrix<f64>,
    z1: DMatrix<f64>,
    a1: DMatrix<f64>,
}

impl Block {
    fn new<R: Rng + ?Sized>(cfg: &NetConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        Block {
            ln1: LayerNorm::new(d),
            wq: Linear::new(d, d, 1.0, rng),
            wk: Linear::new(d, d, 1.0, rng),
            wv: Linear::new(d, d, 1.0, rng),
            wo: Linear::new(d, d, 0.5, rng),
            ln2: LayerNorm::new(d),
            ff1: Linear::new(d, cfg.d_ff, 1.0, rng),
            ff2: Linear::new(cfg.d_ff, d, 0.5, rng),
        }
    }

    fn zeros_like(&self) -> Self {
        Block {
            ln1: self.ln1.zeros_like(),
            wq: self.wq.zeros_like(),
            wk: self.wk.zeros_like(),
            wv: self.wv.zeros_like(),
            wo: self.wo.zeros_like(),
            ln2: self.ln2.zeros_like(),
            ff1: self.ff1.zeros_like(),
            ff2: self.ff2.zeros_like(),
        }
    }

    fn forward(&self, x: &DMatrix<f64>, heads: usize) -> (DMatrix<f64>, BlockCache) {
        let t = x.nrows();
        let d = x.ncols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (y1, ln1) = self.ln1.forward(x);
        let q = self.wq.forward(&y1);
        let k = self.wk.forward(&y1);
        let v = self.wv.forward(&y1);
        let mut o = DMatrix::zeros(t, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = q.columns(h * dh, dh);
            let kh = k.columns(h * dh, dh);
            let vh = v.columns(h * dh, dh);
            let mut a = qh * kh.transpose() * scale;
            for i in 0..t {
                let max = (0..=i).map(|j| a[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..t {
                    let e = if j <= i { (a[(i, j)] - max).exp() } else { 0.0 };
                    a[(i, j)] = e;
                    sum += e;
                }
                for j in 0..=i {
                    a[(i, j)] /= sum;
                }
            }
            o.columns_mut(h * dh, dh).copy_from(&(&a * vh));
            probs.push(a);
        }
        let h1 = x + self.wo.forward(&o);
        let (y2, ln2) = self.ln2.forward(&h1);
        let z1 = self.ff1.forward(&y2);
        let a1 = z1.map(gelu);
        let out = &h1 + self.ff2.forward(&a1);
        (out, BlockCache { ln1, y1, q, k, v, probs, o, ln2, y2, z1, a1 })
    }

    fn backward(&self, c: &BlockCache, dout: &DMatrix<f64>, heads: usize, g: &mut Block) -> DMatrix<f64> {
        let d = dout.ncols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        // Feed-forward branch.
        let da1 = self.ff2.backward(&c.a1, dout, &mut g.ff2);
        let dz1 = da1.zip_map(&c.z1, |g, z| g * gelu_grad(z));
        let dy2 = self.ff1.backward(&c.y2, &dz1, &mut g.ff1);
        let dh1 = dout + self.ln2.backward(&c.ln2, &dy2, &mut g.ln2);
        // Attention branch.
        let do_ = self.wo.backward(&c.o, &dh1, &mut g.wo);
        let t = dout.nrows();
        let mut dq = DMatrix::zeros(t, d);
        let mut dk = DMatrix::zeros(t, d);
        let mut dv = DMatrix::zeros(t, d);
        for h in 0..heads {
            let a = &c.probs[h];
            let doh = do_.columns(h * dh, dh);
            let vh = c.v.columns(h * dh, dh);
            let da = doh * vh.transpose();
            dv.columns_mut(h * dh, dh).copy_from(&(a.transpose() * doh));
            let mut ds = DMatrix::zeros(t, t);
            for i in 0..t {
                let dot: f64 = (0..=i).map(|j| a[(i, j)] * da[(i, j)]).sum();
                for j in 0..=i {
                    ds[(i, j)] = a[(i, j)] * (da[(i, j)] - dot) * scale;
                }
            }
            dq.columns_mut(h * dh, dh).copy_from(&(&ds * c.k.columns(h * dh, dh)));
            dk.columns_mut(h * dh, dh).copy_from(&(ds.transpose() * c.q.columns(h * dh, dh)));
        }
        let dy1 = self.wq.backward(&c.y1, &dq, &mut g.wq) + self.wk.backward(&c.y1, &dk, &mut g.wk) + self.wv.backward(&c.y1, &dv, &mut g.wv);
        dh1 + self.ln1.backward(&c.ln1, &dy1, &mut g.ln1)
    }
}

/// Key/value rows cached for one layer during incremental decoding.
#[derive(Debug, Clone, Default)]
struct KvCache {
    k: Vec<RowDVector<f64>>,
    v: Vec<RowDVector<f64>>,
}

/// Incremental decoding state: the prefix seen so far.
#[derive(Debug, Clone)]
pub struct IncState {
    pos: usize,
    layers: Vec<KvCache>,
}

impl IncState {
    /// Number of tokens consumed.
    pub fn len(&self) -> usize {
        self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.pos == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Net {
    pub cfg: NetConfig,
    pub enc: [Linear; 3],
    pub init_token: DVector<f64>,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub head: Linear,
}

/// Activations kept for the backward pass.
pub struct ForwardCache {
    feats: DMatrix<f64>,
    z_enc: [DMatrix<f64>; 2],
    a_enc: [DMatrix<f64>; 2],
    blocks: Vec<BlockCache>,
    lnf: LnCache,
    y_f: DMatrix<f64>,
}

impl Net {
    pub fn new<R: Rng + ?Sized>(cfg: NetConfig, rng: &mut R) -> Self {
        assert!(cfg.heads > 0 && cfg.d_model.is_multiple_of(cfg.heads), "d_model must be a multiple of heads");
        let d = cfg.d_model;
        let enc = [
            Linear::new(cfg.input_dim, cfg.enc_hidden, 1.0, rng),
            Linear::new(cfg.enc_hidden, cfg.enc_hidden, 1.0, rng),
            Linear::new(cfg.enc_hidden, d, 1.0, rng),
        ];
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        Net {
            cfg,
            enc,
            init_token: DVector::from_fn(d, |_, _| normal.sample(rng)),
            blocks: (0..cfg.layers).map(|_| Block::new(&cfg, rng)).collect(),
            ln_f: LayerNorm::new(d),
            head: Linear::new(d, cfg.output_dim, 0.1, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Net {
            cfg: self.cfg,
            enc: [self.enc[0].zeros_like(), self.enc[1].zeros_like(), self.enc[2].zeros_like()],
            init_token: DVector::zeros(self.init_token.len()),
            blocks: self.blocks.iter().map(Block::zeros_like).collect(),
            ln_f: self.ln_f.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.enc {
            out.push(l.w.as_slice());
            out.push(l.b.as_slice());
        }
        out.push(self.init_token.as_slice());
        for b in &self.blocks {
            out.push(b.ln1.gamma.as_slice());
            out.push(b.ln1.beta.as_slice());
            for l in [&b.wq, &b.wk, &b.wv, &b.wo] {
                out.push(l.w.as_slice());
                out.push(l.b.as_slice());
            }
            out.push(b.ln2.gamma.as_slice());
            out.push(b.ln2.beta.as_slice());
            for l in [&b.ff1, &b.ff2] {
                out.push(l.w.as_slice());
                out.push(l.b.as_slice());
            }
        }
        out.push(self.ln_f.gamma.as_slice());
        out.push(self.ln_f.beta.as_slice());
        out.push(self.head.w.as_slice());
        out.push(self.head.b.as_slice());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.enc {
            out.push(l.w.as_mut_slice());
            out.push(l.b.as_mut_slice());
        }
        out.push(self.init_token.as_mut_slice());
        for b in &mut self.blocks {
            out.push(b.ln1.gamma.as_mut_slice());
            out.push(b.ln1.beta.as_mut_slice());
            for l in [&mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo] {
                out.push(l.w.as_mut_slice());
                out.push(l.b.as_mut_slice());
            }
            out.push(b.ln2.gamma.as_mut_slice());
            out.push(b.ln2.beta.as_mut_slice());
            for l in [&mut b.ff1, &mut b.ff2] {
                out.push(l.w.as_mut_slice());
                out.push(l.b.as_mut_slice());
            }
        }
        out.push(self.ln_f.gamma.as_mut_slice());
        out.push(self.ln_f.beta.as_mut_slice());
        out.push(self.head.w.as_mut_slice());
        out.push(self.head.b.as_mut_slice());
        out
    }

    /// Per-parameter flag: true for linear-layer weight matrices, the only
    /// parameters subject to weight decay.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.param_count());
        let mut push = |len: usize, on: bool| mask.extend(std::iter::repeat_n(on, len));
        for l in &self.enc {
            push(l.w.len(), true);
            push(l.b.len(), false);
        }
        push(self.init_token.len(), false);
        for b in &self.blocks {
            push(2 * b.ln1.gamma.len(), false);
            for l in [&b.wq, &b.wk, &b.wv, &b.wo] {
                push(l.w.len(), true);
                push(l.b.len(), false);
            }
            push(2 * b.ln2.gamma.len(), false);
            for l in [&b.ff1, &b.ff2] {
                push(l.w.len(), true);
                push(l.b.len(), false);
            }
        }
        push(2 * self.ln_f.gamma.len(), false);
        push(self.head.w.len(), true);
        push(self.head.b.len(), false);
        mask
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    /// Overwrite every parameter from a flat vector in `to_flat` order.
    pub fn set_flat(&mut self, flat: &[f64]) -> bool {
        if flat.len() != self.param_count() {
            return false;
        }
        let mut at = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[at..at + t.len()]);
            at += t.len();
        }
        true
    }

    fn encode(&self, feats: &DMatrix<f64>) -> ([DMatrix<f64>; 2], [DMatrix<f64>; 2], DMatrix<f64>) {
        let z0 = self.enc[0].forward(feats);
        let a0 = z0.map(gelu);
        let z1 = self.enc[1].forward(&a0);
        let a1 = z1.map(gelu);
        let e = self.enc[2].forward(&a1);
        ([z0, z1], [a0, a1], e)
    }

    fn encode_row(&self, f: &RowDVector<f64>) -> RowDVector<f64> {
        let a0 = self.enc[0].forward_row(f).map(gelu);
        let a1 = self.enc[1].forward_row(&a0).map(gelu);
        self.enc[2].forward_row(&a1)
    }

    /// Raw outputs for positions `0..=T` given `T` feature rows.
    pub fn forward(&self, feats: &DMatrix<f64>) -> (DMatrix<f64>, ForwardCache) {
        let t = feats.nrows();
        let d = self.cfg.d_model;
        let (z_enc, a_enc, e) = self.encode(feats);
        let mut x = DMatrix::zeros(t + 1, d);
        x.set_row(0, &(self.init_token.transpose() + position_encoding(0, d)));
        for i in 0..t {
            x.set_row(i + 1, &(e.row(i) + position_encoding(i + 1, d)));
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (out, c) = b.forward(&x, self.cfg.heads);
            caches.push(c);
            x = out;
        }
        let (y_f, lnf) = self.ln_f.forward(&x);
        let out = self.head.forward(&y_f);
        (out, ForwardCache { feats: feats.clone(), z_enc, a_enc, blocks: caches, lnf, y_f })
    }

    /// Accumulate parameter gradients for `d_out` (same shape as the output).
    pub fn backward(&self, cache: &ForwardCache, d_out: &DMatrix<f64>, g: &mut Net) {
        let dy = self.head.backward(&cache.y_f, d_out, &mut g.head);
        let mut dx = self.ln_f.backward(&cache.lnf, &dy, &mut g.ln_f);
        for (i, b) in self.blocks.iter().enumerate().rev() {
            dx = b.backward(&cache.blocks[i], &dx, self.cfg.heads, &mut g.blocks[i]);
        }
        g.init_token += dx.row(0).transpose();
        let de = dx.rows(1, dx.nrows() - 1).into_owned();
        let da1 = self.enc[2].backward(&cache.a_enc[1], &de, &mut g.enc[2]);
        let dz1 = da1.zip_map(&cache.z_enc[1], |g, z| g * gelu_grad(z));
        let da0 = self.enc[1].backward(&cache.a_enc[0], &dz1, &mut g.enc[1]);
        let dz0 = da0.zip_map(&cache.z_enc[0], |g, z| g * gelu_grad(z));
        self.enc[0].backward(&cache.feats, &dz0, &mut g.enc[0]);
    }

    /// Start incremental decoding; returns the state and the raw output at
    /// position 0.
    pub fn begin(&self) -> (IncState, DVector<f64>) {
        let mut st = IncState { pos: 0, layers: vec![KvCache::default(); self.blocks.len()] };
        let out = self.step_token(&mut st, self.init_token.transpose());
        (st, out)
    }

    /// Consume one feature row; returns the raw output at the new position.
    pub fn push(&self, st: &mut IncState, feats: &RowDVector<f64>) -> DVector<f64> {
        let e = self.encode_row(feats);
        self.step_token(st, e)
    }

    fn step_token(&self, st: &mut IncState, token: RowDVector<f64>) -> DVector<f64> {
        let d = self.cfg.d_model;
        let heads = self.cfg.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = token + position_encoding(st.pos, d);
        for (b, kv) in self.blocks.iter().zip(&mut st.layers) {
            let y1 = b.ln1.forward_row(&x);
            let q = b.wq.forward_row(&y1);
            kv.k.push(b.wk.forward_row(&y1));
            kv.v.push(b.wv.forward_row(&y1));
            let mut o = RowDVector::zeros(d);
            for h in 0..heads {
                let qh = q.columns(h * dh, dh);
                let scores: Vec<f64> = kv.k.iter().map(|k| qh.dot(&k.columns(h * dh, dh)) * scale).collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let sum: f64 = w.iter().sum();
                let mut oh = RowDVector::zeros(dh);
                for (wj, v) in w.iter().zip(&kv.v) {
                    oh += v.columns(h * dh, dh) * (wj / sum);
                }
                o.columns_mut(h * dh, dh).copy_from(&oh);
            }
            let h1 = x + b.wo.forward_row(&o);
            let a1 = b.ff1.forward_row(&b.ln2.forward_row(&h1)).map(gelu);
            x = &h1 + b.ff2.forward_row(&a1);
        }
        st.pos += 1;
        self.head.forward_row(&self.ln_f.forward_row(&x)).transpose()
    }
}

/// Adam with global-norm gradient clipping over flat parameter vectors.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
    /// Decoupled weight decay applied where `mask` is set.
    pub weight_decay: f64,
    mask: Vec<bool>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, clip: f64) -> Self {
        Adam { lr, beta1, beta2, eps: 1e-8, clip, weight_decay: 0.0, mask: vec![false; n], m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64, mask: Vec<bool>) -> Self {
        assert_eq!(mask.len(), self.m.len(), "mask length must match the parameter count");
        self.weight_decay = weight_decay;
        self.mask = mask;
        self
    }

    /// Apply one step in place; returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> f64 {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let factor = if self.clip > 0.0 && norm > self.clip { self.clip / norm } else { 1.0 };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i] * factor;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            if self.mask[i] {
                params[i] -= self.lr * self.weight_decay * params[i];
            }
            params[i] -= self.lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + self.eps);
        }
        norm
    }
}
