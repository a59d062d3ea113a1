//! Learning a sequence model of how a human's internal model evolves, by
//! maximizing the likelihood of their demonstrated actions.
//!
//! The network reads per-step features `[x^t, u_H^t, x^{t+1}]` and predicts
//! `θ̂^{t+1}` at every position; a learned token in front predicts `θ̂^0`.
//! The loss is the negated mean of `log P(u_H^t | x^t; θ̂^t)` under the
//! closed-form LQ policy, and its θ-gradient flows through the Riccati
//! solution into the network.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, RowDVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::demo::{Corpus, Demonstration};
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::human::{SolvedModel, ThetaKind};
use crate::nn::{Adam, IncState, Net, NetConfig};

pub const CHECKPOINT_FORMAT: &str = "influence-net";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Loss charged for a step whose predicted model cannot be solved.
pub const PENALTY_WEIGHT: f64 = 10.0;
/// Upper bound on the residual used in the penalty.
pub const PENALTY_CAP: f64 = 10.0;

/// How raw network outputs become internal-model vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMap {
    Raw,
    /// `K - 1` logits; the last probability is implied: `softmax([z, 0])`.
    Simplex,
}

impl OutputMap {
    pub fn for_env(env: &EnvSpec) -> Self {
        match env.theta_kind {
            ThetaKind::BeliefOverGoals { .. } => OutputMap::Simplex,
            _ => OutputMap::Raw,
        }
    }

    pub fn raw_dim(self, theta_dim: usize) -> usize {
        match self {
            OutputMap::Raw => theta_dim,
            OutputMap::Simplex => theta_dim - 1,
        }
    }

    pub fn apply(self, raw: &[f64]) -> Vec<f64> {
        match self {
            OutputMap::Raw => raw.to_vec(),
            OutputMap::Simplex => {
                let max = raw.iter().cloned().fold(0.0, f64::max);
                let mut p: Vec<f64> = raw.iter().map(|z| (z - max).exp()).collect();
                p.push((-max).exp());
                let sum: f64 = p.iter().sum();
                p.iter_mut().for_each(|v| *v /= sum);
                p
            }
        }
    }

    /// Raw outputs that map to `theta` (used to initialize the output bias).
    pub fn invert(self, theta: &[f64]) -> Vec<f64> {
        match self {
            OutputMap::Raw => theta.to_vec(),
            OutputMap::Simplex => {
                let floor = 1e-3;
                let last = theta[theta.len() - 1].max(floor);
                theta[..theta.len() - 1].iter().map(|p| (p.max(floor) / last).ln()).collect()
            }
        }
    }

    /// Pull a θ-gradient back to the raw outputs.
    pub fn backward(self, raw: &[f64], d_theta: &[f64]) -> Vec<f64> {
        match self {
            OutputMap::Raw => d_theta.to_vec(),
            OutputMap::Simplex => {
                let p = self.apply(raw);
                let dot: f64 = p.iter().zip(d_theta).map(|(a, b)| a * b).sum();
                (0..raw.len()).map(|i| p[i] * (d_theta[i] - dot)).collect()
            }
        }
    }
}

/// Per-feature affine normalization fitted on a training corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn raw_features(x: &[f64], u_h: &[f64], x_next: &[f64]) -> Vec<f64> {
    x.iter().chain(u_h).chain(x_next).copied().collect()
}

impl FeatureNorm {
    pub fn identity(dim: usize) -> Self {
        FeatureNorm { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn fit(demos: &[&Demonstration], dim: usize) -> Self {
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let mut n = 0.0;
        for d in demos {
            for s in &d.steps {
                for (i, v) in raw_features(&s.x, &s.u_h, &s.x_next).into_iter().enumerate() {
                    sum[i] += v;
                    sq[i] += v * v;
                }
                n += 1.0;
            }
        }
        if n == 0.0 {
            return Self::identity(dim);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-6)).collect();
        FeatureNorm { mean, std }
    }

    pub fn apply(&self, raw: &[f64]) -> RowDVector<f64> {
        RowDVector::from_fn(raw.len(), |_, i| (raw[i] - self.mean[i]) / self.std[i])
    }
}

/// A trained (or freshly initialized) model of human learning dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerNet {
    pub env: EnvSpec,
    pub net: Net,
    pub norm: FeatureNorm,
    pub map: OutputMap,
    /// Hash of the experiment configuration that produced the network.
    pub config_hash: String,
}

/// Incremental prediction along one trajectory.
#[derive(Debug, Clone)]
pub struct NetTrack {
    pub inc: IncState,
    /// Latest prediction `θ̂`.
    pub theta: Vec<f64>,
}

impl LearnerNet {
    /// Fresh network whose initial predictions equal the environment's
    /// nominal `θ^0`.
    pub fn new(env: &EnvSpec, cfg: NetConfig, norm: FeatureNorm, seed: u64) -> Self {
        let map = OutputMap::for_env(env);
        let cfg = NetConfig {
            input_dim: 2 * env.state_dim() + env.action_dim(),
            output_dim: map.raw_dim(env.theta_dim()),
            ..cfg
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Net::new(cfg, &mut rng);
        net.head.b = DVector::from_vec(map.invert(&env.theta0));
        LearnerNet { env: env.clone(), net, norm, map, config_hash: String::new() }
    }

    pub fn theta_dim(&self) -> usize {
        match self.map {
            OutputMap::Raw => self.net.cfg.output_dim,
            OutputMap::Simplex => self.net.cfg.output_dim + 1,
        }
    }

    pub fn check_env(&self, env: &EnvSpec) -> Result<()> {
        if env.theta_dim() != self.theta_dim() || 2 * env.state_dim() + env.action_dim() != self.net.cfg.input_dim {
            return Err(Error::ShapeMismatch { net: self.theta_dim(), env: env.theta_dim() });
        }
        Ok(())
    }

    pub fn features(&self, demo: &Demonstration) -> DMatrix<f64> {
        let dim = self.net.cfg.input_dim;
        let mut f = DMatrix::zeros(demo.steps.len(), dim);
        for (i, s) in demo.steps.iter().enumerate() {
            f.set_row(i, &self.norm.apply(&raw_features(&s.x, &s.u_h, &s.x_next)));
        }
        f
    }

    /// `θ̂^{0:T}` for a demonstration of length `T`.
    pub fn predict(&self, demo: &Demonstration) -> Vec<Vec<f64>> {
        let (raw, _) = self.net.forward(&self.features(demo));
        raw.row_iter().map(|r| self.map.apply(r.transpose().as_slice())).collect()
    }

    pub fn begin(&self) -> NetTrack {
        let (inc, raw) = self.net.begin();
        NetTrack { inc, theta: self.map.apply(raw.as_slice()) }
    }

    pub fn push(&self, track: &mut NetTrack, x: &[f64], u_h: &[f64], x_next: &[f64]) {
        let raw = self.net.push(&mut track.inc, &self.norm.apply(&raw_features(x, u_h, x_next)));
        track.theta = self.map.apply(raw.as_slice());
    }
}

/// Outcome of evaluating the likelihood loss on a set of demonstrations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    /// Mean negated log-likelihood per step, penalties included.
    pub nll: f64,
    /// Steps whose predicted model could not be solved.
    pub penalties: usize,
    pub steps: usize,
}

fn penalty_for(err: &Error) -> f64 {
    let residual = match err {
        Error::NonConvergence { residual, .. } if residual.is_finite() => residual.min(PENALTY_CAP),
        _ => PENALTY_CAP,
    };
    PENALTY_WEIGHT * residual
}

/// Negated log-likelihood of the demonstrated actions under the given
/// θ-sequence, with its θ-gradient per step.
pub fn sequence_nll(env: &EnvSpec, demo: &Demonstration, thetas: &[Vec<f64>]) -> (f64, usize, Vec<Option<DVector<f64>>>) {
    let mut total = 0.0;
    let mut penalties = 0;
    let mut grads = Vec::with_capacity(demo.steps.len());
    for (s, theta) in demo.steps.iter().zip(thetas) {
        let x = DVector::from_column_slice(&s.x);
        let u_h = DVector::from_column_slice(&s.u_h);
        let goal = env.goal_for(s.goal);
        let res = SolvedModel::from_vec(env, theta).and_then(|m| m.log_prob_grad(env, &x, &u_h, goal));
        match res {
            Ok((lp, g)) if lp.is_finite() => {
                total -= lp;
                grads.push(Some(-g));
            }
            Ok(_) => {
                total += PENALTY_WEIGHT * PENALTY_CAP;
                penalties += 1;
                grads.push(None);
            }
            Err(e) => {
                log::debug!("unsolvable prediction at step {}: {e}", s.t);
                total += penalty_for(&e);
                penalties += 1;
                grads.push(None);
            }
        }
    }
    (total, penalties, grads)
}

fn batch_pass(net: &LearnerNet, demos: &[&Demonstration], mut grad: Option<&mut Net>) -> LossReport {
    let steps: usize = demos.iter().map(|d| d.steps.len()).sum();
    let mut total = 0.0;
    let mut penalties = 0;
    for demo in demos {
        let (raw, cache) = net.net.forward(&net.features(demo));
        let thetas: Vec<Vec<f64>> = raw.row_iter().map(|r| net.map.apply(r.transpose().as_slice())).collect();
        let (nll, pen, grads) = sequence_nll(&net.env, demo, &thetas);
        total += nll;
        penalties += pen;
        if let Some(g) = grad.as_deref_mut() {
            let mut d_out = DMatrix::zeros(raw.nrows(), raw.ncols());
            for (t, gt) in grads.iter().enumerate() {
                if let Some(gt) = gt {
                    let raw_t: Vec<f64> = raw.row(t).iter().copied().collect();
                    let d = net.map.backward(&raw_t, gt.as_slice());
                    for (j, v) in d.into_iter().enumerate() {
                        d_out[(t, j)] = v / steps as f64;
                    }
                }
            }
            net.net.backward(&cache, &d_out, g);
        }
    }
    LossReport { nll: total / steps.max(1) as f64, penalties, steps }
}

/// Mean negated log-likelihood over every step of `demos`.
pub fn mle_loss(net: &LearnerNet, demos: &[&Demonstration]) -> LossReport {
    batch_pass(net, demos, None)
}

/// Loss and its exact gradient with respect to every network parameter.
pub fn loss_and_grad(net: &LearnerNet, demos: &[&Demonstration]) -> (LossReport, Net) {
    let mut g = net.net.zeros_like();
    let report = batch_pass(net, demos, Some(&mut g));
    (report, g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub clip: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub val_split: f64,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 50, batch_size: 8, lr: 1e-3, beta1: 0.9, beta2: 0.999, clip: 5.0, weight_decay: 0.0, seed: 0, val_split: 0.2, net: NetConfig::default() }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) {
            return Err(Error::Config("learning rate must be nonnegative".into()));
        }
        if !(self.val_split >= 0.0 && self.val_split < 1.0) {
            return Err(Error::Config("validation split must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let n = &self.net;
        if n.heads == 0 || !n.d_model.is_multiple_of(n.heads) || n.layers == 0 {
            return Err(Error::Config("model width must be a positive multiple of the head count".into()));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub nll: f64,
    pub val_nll: f64,
    /// Mean squared θ error on the held-out demos, when ground truth exists.
    pub theta_mse: Option<f64>,
    pub penalties: usize,
}

/// Split demo indices into (train, validation).
pub fn split_indices(n: usize, val_split: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5151));
    let n_val = if n >= 2 { ((n as f64 * val_split).round() as usize).min(n - 1) } else { 0 };
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Mean over demos and positions of `|θ̂^t - θ^t|²`.
pub fn theta_mse(net: &LearnerNet, demos: &[&Demonstration]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for d in demos {
        let truth = d.theta_trace().ok_or(Error::MissingGroundTruth)?;
        for (p, t) in net.predict(d).iter().zip(&truth) {
            total += p.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Per-timestep mean `|θ̂^t - θ^t|` over a corpus with ground truth.
pub fn eval_theta_error(net: &LearnerNet, corpus: &Corpus) -> Result<Vec<f64>> {
    net.check_env(&corpus.env)?;
    let mut sums: Vec<f64> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for d in &corpus.demos {
        let truth = d.theta_trace().ok_or(Error::MissingGroundTruth)?;
        for (t, (p, q)) in net.predict(d).iter().zip(&truth).enumerate() {
            if sums.len() <= t {
                sums.push(0.0);
                counts.push(0);
            }
            sums[t] += p.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            counts[t] += 1;
        }
    }
    Ok(sums.iter().zip(&counts).map(|(s, c)| s / *c as f64).collect())
}

fn epoch_log(net: &LearnerNet, epoch: usize, train: &[&Demonstration], val: &[&Demonstration], truth: bool) -> Result<EpochLog> {
    let tr = mle_loss(net, train);
    let (val_nll, held) = if val.is_empty() { (tr.nll, train) } else { (mle_loss(net, val).nll, val) };
    let theta_mse = if truth { Some(theta_mse(net, held)?) } else { None };
    Ok(EpochLog { epoch, nll: tr.nll, val_nll, theta_mse, penalties: tr.penalties })
}

/// Train a fresh network on a corpus and return the parameters with the
/// lowest validation loss. Ground-truth θ traces, when present, are only
/// used for the logged θ error.
pub fn train(corpus: &Corpus, cfg: &TrainConfig) -> Result<(LearnerNet, Vec<EpochLog>)> {
    train_with(corpus, cfg, |_| {})
}

/// `train` with a callback after every epoch (epoch 0 is the untrained net).
pub fn train_with(corpus: &Corpus, cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochLog)) -> Result<(LearnerNet, Vec<EpochLog>)> {
    cfg.validate()?;
    if corpus.demos.is_empty() {
        return Err(Error::Config("corpus has no demonstrations".into()));
    }
    let env = &corpus.env;
    let (train_idx, val_idx) = split_indices(corpus.demos.len(), cfg.val_split, cfg.seed);
    let train: Vec<&Demonstration> = train_idx.iter().map(|&i| &corpus.demos[i]).collect();
    let val: Vec<&Demonstration> = val_idx.iter().map(|&i| &corpus.demos[i]).collect();
    let dim = 2 * env.state_dim() + env.action_dim();
    let mut net = LearnerNet::new(env, cfg.net, FeatureNorm::fit(&train, dim), cfg.seed);
    let truth = corpus.has_ground_truth();
    let mut params = net.net.to_flat();
    let mut adam = Adam::new(params.len(), cfg.lr, cfg.beta1, cfg.beta2, cfg.clip).with_weight_decay(cfg.weight_decay, net.net.decay_mask());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut logs = vec![epoch_log(&net, 0, &train, &val, truth)?];
    on_epoch(&logs[0]);
    let mut best = (logs[0].val_nll, params.clone());
    let mut bad_epochs = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Demonstration> = chunk.iter().map(|&i| train[i]).collect();
            let (report, g) = loss_and_grad(&net, &batch);
            let grad = g.to_flat();
            if !report.nll.is_finite() || grad.iter().any(|v| !v.is_finite()) {
                continue;
            }
            adam.step(&mut params, &grad);
            net.net.set_flat(&params);
        }
        let log = epoch_log(&net, epoch, &train, &val, truth)?;
        bad_epochs = if log.nll.is_finite() { 0 } else { bad_epochs + 1 };
        if log.val_nll < best.0 {
            best = (log.val_nll, params.clone());
        }
        on_epoch(&log);
        logs.push(log);
        if bad_epochs >= 3 {
            return Err(Error::Diverged(bad_epochs));
        }
    }
    net.net.set_flat(&best.1);
    Ok((net, logs))
}

#[derive(Serialize)]
struct LogRow<'a> {
    epoch: usize,
    nll: f64,
    val_nll: f64,
    theta_mse: Option<f64>,
    penalties: usize,
    config_hash: &'a str,
}

pub fn write_log_csv<W: Write>(w: W, logs: &[EpochLog], config_hash: &str) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for log in logs {
        let row = LogRow { epoch: log.epoch, nll: log.nll, val_nll: log.val_nll, theta_mse: log.theta_mse, penalties: log.penalties, config_hash };
        out.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    env: EnvSpec,
    map: OutputMap,
    norm: FeatureNorm,
    net: NetConfig,
    #[serde(default)]
    config_hash: String,
    params: Vec<f64>,
}

impl LearnerNet {
    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            env: self.env.clone(),
            map: self.map,
            norm: self.norm.clone(),
            net: self.net.cfg,
            config_hash: self.config_hash.clone(),
            params: self.net.to_flat(),
        };
        serde_json::to_writer(w, &ck)?;
        Ok(())
    }

    pub fn read<R: std::io::Read>(r: R) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_reader(r).map_err(|e| Error::Format(format!("checkpoint: {e}")))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format("not a supported network checkpoint".into()));
        }
        let mut net = LearnerNet::new(&ck.env, ck.net, ck.norm, 0);
        net.config_hash = ck.config_hash;
        if net.map != ck.map || net.net.cfg != ck.net || !net.net.set_flat(&ck.params) {
            return Err(Error::Format("checkpoint parameters do not match its architecture".into()));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simplex_map_round_trip_and_gradient() {
        let map = OutputMap::Simplex;
        let theta = [0.6, 0.3, 0.1];
        let back = map.apply(&map.invert(&theta));
        for (a, b) in back.iter().zip(theta) {
            assert!((a - b).abs() < 1e-12);
        }
        let raw = [0.3, -1.2];
        let dt = [0.5, -0.25, 2.0];
        let g = map.backward(&raw, &dt);
        for i in 0..2 {
            let h = 1e-6;
            let f = |z: &[f64]| map.apply(z).iter().zip(dt).map(|(p, d)| p * d).sum::<f64>();
            let mut up = raw;
            up[i] += h;
            let mut dn = raw;
            dn[i] -= h;
            assert!(((f(&up) - f(&dn)) / (2.0 * h) - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn split_is_disjoint_and_deterministic() {
        let (a, b) = split_indices(50, 0.2, 3);
        assert_eq!((a.len(), b.len()), (40, 10));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert_eq!(split_indices(50, 0.2, 3), (a, b));
        assert_eq!(split_indices(1, 0.5, 0).1.len(), 0);
    }
}
