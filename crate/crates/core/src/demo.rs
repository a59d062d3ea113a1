//! Demonstration corpora: seeded generation, replay, and the line-delimited
//! file format.
//!
//! A corpus file is JSON lines. The first line is the header
//!
//! ```text
//! {"kind":"corpus","format":"influence-demos","version":1,"env":{..},"human":{..},"seed":7,"n":50,"robot_sigma":0.3,"config_hash":"..."}
//! ```
//!
//! followed, for every demonstration, by one `demo` line and its `step` lines:
//!
//! ```text
//! {"kind":"demo","index":0,"seed":123,"steps":60}
//! {"kind":"step","t":0,"x":[..],"u_h":[..],"u_r":[..],"u":[..],"x_next":[..],"goal":0,"theta":[..],"theta_next":[..]}
//! ```
//!
//! `theta` and `theta_next` are omitted when no ground truth is known.

use std::io::{BufRead, Write};

use nalgebra::DVector;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::envs::{blend, EnvSpec, EnvState};
use crate::error::{Error, Result};
use crate::human::{act, learner_step, HumanSpec, SolvedModel};

pub const CORPUS_FORMAT: &str = "influence-demos";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub x: Vec<f64>,
    pub u_h: Vec<f64>,
    pub u_r: Vec<f64>,
    pub u: Vec<f64>,
    pub x_next: Vec<f64>,
    /// Goals reached before this step; determines the active goal.
    pub goal: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_next: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub seed: u64,
    pub steps: Vec<StepRecord>,
}

impl Demonstration {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Ground-truth θ^{0:T}, if recorded.
    pub fn theta_trace(&self) -> Option<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(self.steps.len() + 1);
        for s in &self.steps {
            out.push(s.theta.clone()?);
        }
        out.push(self.steps.last()?.theta_next.clone()?);
        Some(out)
    }

    /// Truncate to the first `k` steps.
    pub fn truncated(&self, k: usize) -> Self {
        Demonstration { seed: self.seed, steps: self.steps[..k.min(self.steps.len())].to_vec() }
    }
}

/// How the robot acts while demonstrations are collected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotRandomization {
    /// `u_R = u_H + σ ε`; `σ = 0` means no intervention.
    pub sigma: f64,
}

/// One simulated human-robot rollout step given the robot's action rule.
pub struct SimStep {
    pub record: StepRecord,
    pub state: EnvState,
    pub theta: SolvedModel,
    pub rejected: bool,
}

/// Execute one closed-loop step: the human acts from `theta`, the robot
/// answers with `robot(u_H)`, the blend is executed and the human learns
/// from the executed control.
pub fn sim_step<R: Rng + ?Sized>(
    env: &EnvSpec,
    human: &HumanSpec,
    state: &EnvState,
    theta: &SolvedModel,
    t: usize,
    rng: &mut R,
    robot: impl FnOnce(&DVector<f64>, &mut R) -> Result<DVector<f64>>,
) -> Result<SimStep> {
    let goal = env.active_goal(state).clone();
    let u_h = act(env, theta, &state.x, &goal, rng)?;
    let u_r = robot(&u_h, rng)?;
    let u = blend(&u_h, &u_r, env.alpha)?;
    let next = env.step(state, &u);
    let learned = learner_step(human, env, theta, &state.x, &u, &goal)?;
    let record = StepRecord {
        t,
        x: state.x.as_slice().to_vec(),
        u_h: u_h.as_slice().to_vec(),
        u_r: u_r.as_slice().to_vec(),
        u: u.as_slice().to_vec(),
        x_next: next.x.as_slice().to_vec(),
        goal: state.goal_count,
        theta: Some(theta.model.to_vec(env)),
        theta_next: Some(learned.theta.model.to_vec(env)),
    };
    Ok(SimStep { record, state: next, theta: learned.theta, rejected: learned.rejected })
}

/// Uniform draw from the box of half-width `init_half_width` around the
/// nominal start.
pub fn random_start<R: Rng + ?Sized>(env: &EnvSpec, rng: &mut R) -> DVector<f64> {
    let h = env.init_half_width;
    env.start.map(|s| if h > 0.0 { s + rng.random_range(-h..h) } else { s })
}

pub fn simulate_demo(env: &EnvSpec, human: &HumanSpec, robot: RobotRandomization, horizon: usize, seed: u64) -> Result<Demonstration> {
    human.validate(env)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = env.initial_state(random_start(env, &mut rng));
    let mut theta = SolvedModel::from_vec(env, &human.initial_theta(env))?;
    let mut steps = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let sigma = robot.sigma;
        let out = sim_step(env, human, &state, &theta, t, &mut rng, |u_h, rng| {
            Ok(u_h.map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal)))
        })?;
        steps.push(out.record);
        state = out.state;
        theta = out.theta;
    }
    Ok(Demonstration { seed, steps })
}

/// Per-item seeds derived from a master seed.
pub fn derive_seeds(master: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    (0..n).map(|_| rng.next_u64()).collect()
}

pub fn generate_demos(
    env: &EnvSpec,
    human: &HumanSpec,
    robot: RobotRandomization,
    n: usize,
    horizon: usize,
    seed: u64,
) -> Result<Vec<Demonstration>> {
    if n == 0 || horizon == 0 {
        return Err(Error::Config("need at least one demonstration of at least one step".into()));
    }
    derive_seeds(seed, n)
        .into_iter()
        .map(|s| simulate_demo(env, human, robot, horizon, s))
        .collect()
}

/// Check that every recorded transition replays exactly under `env`.
pub fn replay_matches(env: &EnvSpec, demo: &Demonstration) -> bool {
    let Some(first) = demo.steps.first() else { return true };
    let mut state = env.initial_state(DVector::from_row_slice(&first.x));
    for s in &demo.steps {
        if state.x.as_slice() != s.x.as_slice() || state.goal_count != s.goal {
            return false;
        }
        let u_check = blend(&DVector::from_row_slice(&s.u_h), &DVector::from_row_slice(&s.u_r), env.alpha);
        if u_check.map(|u| u.as_slice() != s.u.as_slice()).unwrap_or(true) {
            return false;
        }
        state = env.step(&state, &DVector::from_row_slice(&s.u));
        if state.x.as_slice() != s.x_next.as_slice() {
            return false;
        }
    }
    true
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub env: EnvSpec,
    pub human: HumanSpec,
    pub seed: u64,
    pub robot: RobotRandomization,
    pub config_hash: String,
    pub demos: Vec<Demonstration>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    format: String,
    version: u32,
    env: EnvSpec,
    human: HumanSpec,
    seed: u64,
    n: usize,
    robot_sigma: f64,
    config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct DemoLine {
    kind: String,
    index: usize,
    seed: u64,
    steps: usize,
}

#[derive(Serialize)]
struct StepLine<'a> {
    kind: &'static str,
    #[serde(flatten)]
    step: &'a StepRecord,
}

#[derive(Deserialize)]
struct AnyLine {
    kind: String,
}

impl Corpus {
    pub fn has_ground_truth(&self) -> bool {
        self.demos.iter().all(|d| d.theta_trace().is_some())
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            kind: "corpus".into(),
            format: CORPUS_FORMAT.into(),
            version: CORPUS_VERSION,
            env: self.env.clone(),
            human: self.human.clone(),
            seed: self.seed,
            n: self.demos.len(),
            robot_sigma: self.robot.sigma,
            config_hash: self.config_hash.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w)?;
        for (index, d) in self.demos.iter().enumerate() {
            serde_json::to_writer(&mut w, &DemoLine { kind: "demo".into(), index, seed: d.seed, steps: d.steps.len() })?;
            writeln!(w)?;
            for s in &d.steps {
                serde_json::to_writer(&mut w, &StepLine { kind: "step", step: s })?;
                writeln!(w)?;
            }
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Format(format!("line {line}: {msg}"));
        let mut lines = r.lines().enumerate();
        let (_, first) = lines.next().ok_or_else(|| bad(1, "empty corpus"))?;
        let header: Header = serde_json::from_str(&first?).map_err(|e| bad(1, &e.to_string()))?;
        if header.kind != "corpus" || header.format != CORPUS_FORMAT {
            return Err(bad(1, "not a demonstration corpus"));
        }
        if header.version != CORPUS_VERSION {
            return Err(bad(1, &format!("unsupported version {}", header.version)));
        }
        let mut demos: Vec<Demonstration> = Vec::with_capacity(header.n);
        let mut expected = Vec::new();
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let kind: AnyLine = serde_json::from_str(&line).map_err(|e| bad(i + 1, &e.to_string()))?;
            match kind.kind.as_str() {
                "demo" => {
                    let d: DemoLine = serde_json::from_str(&line).map_err(|e| bad(i + 1, &e.to_string()))?;
                    if d.index != demos.len() {
                        return Err(bad(i + 1, "demo index out of order"));
                    }
                    expected.push(d.steps);
                    demos.push(Demonstration { seed: d.seed, steps: Vec::with_capacity(d.steps) });
                }
                "step" => {
                    let s: StepRecord = serde_json::from_str(&line).map_err(|e| bad(i + 1, &e.to_string()))?;
                    let demo = demos.last_mut().ok_or_else(|| bad(i + 1, "step before any demo"))?;
                    if s.t != demo.steps.len() {
                        return Err(bad(i + 1, "step index out of order"));
                    }
                    let (n, m) = (header.env.state_dim(), header.env.action_dim());
                    if s.x.len() != n || s.x_next.len() != n || s.u.len() != m || s.u_h.len() != m || s.u_r.len() != m {
                        return Err(bad(i + 1, "step dimensions do not match the environment"));
                    }
                    demo.steps.push(s);
                }
                other => return Err(bad(i + 1, &format!("unknown record kind {other}"))),
            }
        }
        if demos.len() != header.n {
            return Err(Error::Format(format!("header promises {} demos, found {}", header.n, demos.len())));
        }
        for (d, n) in demos.iter().zip(&expected) {
            if d.steps.len() != *n {
                return Err(Error::Format(format!("demo {} is truncated", d.seed)));
            }
        }
        Ok(Corpus {
            env: header.env,
            human: header.human,
            seed: header.seed,
            robot: RobotRandomization { sigma: header.robot_sigma },
            config_hash: header.config_hash,
            demos,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(f)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_round_trip() {
        let env = EnvSpec::lander();
        let human = HumanSpec::gradient(0.05);
        let demos = generate_demos(&env, &human, RobotRandomization { sigma: 0.3 }, 3, 5, 1).unwrap();
        let corpus = Corpus { env, human, seed: 1, robot: RobotRandomization { sigma: 0.3 }, config_hash: "abc".into(), demos };
        let mut buf = Vec::new();
        corpus.write(&mut buf).unwrap();
        let back = Corpus::read(&buf[..]).unwrap();
        assert_eq!(back, corpus);
    }

    #[test]
    fn corrupted_lines_are_rejected() {
        let env = EnvSpec::lander();
        let human = HumanSpec::gradient(0.05);
        let demos = generate_demos(&env, &human, RobotRandomization { sigma: 0.3 }, 2, 3, 1).unwrap();
        let corpus = Corpus { env, human, seed: 1, robot: RobotRandomization { sigma: 0.3 }, config_hash: String::new(), demos };
        let mut buf = Vec::new();
        corpus.write(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let truncated: String = text.lines().take(5).collect::<Vec<_>>().join("\n");
        assert!(matches!(Corpus::read(truncated.as_bytes()), Err(Error::Format(_))));
        let garbled = text.replacen("\"step\"", "\"stpe\"", 1);
        assert!(matches!(Corpus::read(garbled.as_bytes()), Err(Error::Format(_))));
        assert!(Corpus::read("not json".as_bytes()).is_err());
    }
}
