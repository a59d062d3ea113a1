//! Session backend for the interactive teleoperation-teaching demo.
//!
//! A [`Session`] is a synchronous state machine that owns one simulated
//! arm and, under active teaching, a planner working through the trained
//! network. The HTTP/WebSocket layer drives it from a fixed-rate timer.
//!
//! Protocol: after `{"type":"start"}` the server sends a `state` message
//! whose `tick` is the index of the next step to execute. The client
//! answers with at most one `input` carrying that tick. At every timer
//! tick the server executes the step with the latest input (repeating the
//! previous `u_H` when none arrived) and sends the next `state`.
//! `{"type":"end"}` is answered with a `summary`.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::{Json, Router};
use log::{debug, info, warn};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::time::MissedTickBehavior;

use crate::demo::{random_start, Corpus, Demonstration, RobotRandomization, StepRecord};
use crate::envs::{blend, EnvSpec, EnvState};
use crate::error::{Error, Result};
use crate::human::{act, learner_step, HumanSpec, SolvedModel};
use crate::inference::LearnerNet;
use crate::planner::{expert_action, ActiveController, Controller, PlannerConfig, Transition};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Teaching {
    #[serde(rename = "no-teaching")]
    NoTeaching,
    #[serde(rename = "active-teaching")]
    ActiveTeaching,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Bias {
    #[serde(rename = "bias-x")]
    X,
    #[serde(rename = "bias-y")]
    Y,
    /// Unbiased arm for familiarization rounds.
    #[serde(rename = "bias-free")]
    Free,
}

impl Bias {
    /// The session arm: the biased arm restricted to the tabletop plane.
    pub fn env(self) -> EnvSpec {
        match self {
            Bias::X => EnvSpec::by_name("arm-planar").expect("builtin"),
            Bias::Y => EnvSpec::by_name("arm-planar-y").expect("builtin"),
            Bias::Free => EnvSpec::arm_with_bias(DVector::zeros(2)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Condition {
    pub strategy: Teaching,
    pub bias: Bias,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Input {
        tick: u64,
        #[serde(rename = "u_H")]
        u_h: [f64; 2],
    },
    Start {
        condition: Condition,
        #[serde(default)]
        seed: Option<u64>,
    },
    End,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TickMetrics {
    /// `|u_H - u*|²` of the step just executed.
    pub action_optimality: f64,
    /// `|u - u_H|`
    pub effort: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMessage {
    /// Index of the next step; inputs must echo it.
    pub tick: u64,
    pub x: Vec<f64>,
    /// Executed control of the previous step.
    pub executed_u: Vec<f64>,
    #[serde(rename = "u_R")]
    pub u_r: Vec<f64>,
    #[serde(rename = "u_H")]
    pub u_h: Vec<f64>,
    pub goals: Vec<Vec<f64>>,
    pub active_goal: Vec<f64>,
    pub theta_hat: Option<Vec<f64>>,
    pub metrics: TickMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub tick: u64,
    #[serde(rename = "u_H")]
    pub u_h: Vec<f64>,
    #[serde(rename = "u_R")]
    pub u_r: Vec<f64>,
    pub u: Vec<f64>,
    pub x: Vec<f64>,
    pub action_optimality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryMessage {
    pub condition: Condition,
    pub action_optimality_series: Vec<f64>,
    pub series: Vec<SeriesRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    State(StateMessage),
    Summary(SummaryMessage),
    Error { message: String },
}

pub struct Session {
    pub id: u64,
    pub condition: Condition,
    pub env: EnvSpec,
    pub seed: u64,
    state: EnvState,
    tick: u64,
    last_u_h: DVector<f64>,
    pending: Option<DVector<f64>>,
    tracker: Option<ActiveController<Arc<LearnerNet>>>,
    expert: SolvedModel,
    records: Vec<StepRecord>,
    series: Vec<SeriesRow>,
    last_metrics: TickMetrics,
    ended: bool,
}

impl Session {
    /// `net` tracks `θ̂` in both conditions; active teaching requires it.
    pub fn new(id: u64, condition: Condition, net: Option<Arc<LearnerNet>>, planner: PlannerConfig, seed: u64) -> Result<Self> {
        let env = condition.bias.env();
        if condition.strategy == Teaching::ActiveTeaching && net.is_none() {
            return Err(Error::CheckpointRequired("active-teaching".into()));
        }
        let tracker = net.map(|n| ActiveController::new(&env, n, planner, seed)).transpose()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = env.initial_state(random_start(&env, &mut rng));
        let expert = SolvedModel::from_vec(&env, &env.theta_star)?;
        let m = env.action_dim();
        Ok(Session {
            id,
            condition,
            seed,
            state,
            tick: 0,
            last_u_h: DVector::zeros(m),
            pending: None,
            tracker,
            expert,
            records: Vec::new(),
            series: Vec::new(),
            last_metrics: TickMetrics { action_optimality: 0.0, effort: 0.0 },
            ended: false,
            env,
        })
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn is_ended(&self) -> bool {
        self.ended
    }

    pub fn budget_hits(&self) -> usize {
        self.tracker.as_ref().map_or(0, |t| t.budget_hits())
    }

    /// Queue the input for the current tick.
    pub fn input(&mut self, tick: u64, u_h: [f64; 2]) -> Result<()> {
        if self.ended {
            return Err(Error::SessionEnded);
        }
        if tick != self.tick {
            return Err(Error::StaleTick { got: tick, current: self.tick });
        }
        self.pending = Some(DVector::from_vec(u_h.to_vec()));
        Ok(())
    }

    /// The message describing the current state.
    pub fn state_message(&self) -> StateMessage {
        let last = self.records.last();
        let m = self.env.action_dim();
        let zeros = || vec![0.0; m];
        StateMessage {
            tick: self.tick,
            x: self.state.x.as_slice().to_vec(),
            executed_u: last.map_or_else(zeros, |r| r.u.clone()),
            u_r: last.map_or_else(zeros, |r| r.u_r.clone()),
            u_h: last.map_or_else(zeros, |r| r.u_h.clone()),
            goals: self.env.goals.iter().map(|g| g.as_slice().to_vec()).collect(),
            active_goal: self.env.active_goal(&self.state).as_slice().to_vec(),
            theta_hat: self.tracker.as_ref().and_then(|t| t.estimate()).map(|t| t.to_vec()),
            metrics: self.last_metrics,
        }
    }

    /// Execute one step with the queued input, or the previous one when
    /// the client sent nothing.
    pub fn advance(&mut self) -> Result<StateMessage> {
        if self.ended {
            return Err(Error::SessionEnded);
        }
        let env = &self.env;
        let u_h = self.pending.take().unwrap_or_else(|| self.last_u_h.clone());
        let goal = env.active_goal(&self.state).clone();
        let t = self.tick as usize;
        let delta = match (self.condition.strategy, self.tracker.as_mut()) {
            (Teaching::ActiveTeaching, Some(tracker)) => tracker.correction(env, &self.state, &self.expert, &u_h, t)?,
            _ => DVector::zeros(env.action_dim()),
        };
        let u_r = &u_h + delta;
        let u = blend(&u_h, &u_r, env.alpha)?;
        let next = env.step(&self.state, &u);
        if let Some(tracker) = self.tracker.as_mut() {
            tracker.observe(env, &Transition { x: &self.state.x, u_h: &u_h, u: &u, x_next: &next.x, goal: &goal })?;
        }
        let u_star = expert_action(env, &self.expert, &self.state.x, &goal)?;
        let action_optimality = (&u_h - u_star).norm_squared();
        self.last_metrics = TickMetrics { action_optimality, effort: (&u - &u_h).norm() };
        self.series.push(SeriesRow {
            tick: self.tick,
            u_h: u_h.as_slice().to_vec(),
            u_r: u_r.as_slice().to_vec(),
            u: u.as_slice().to_vec(),
            x: self.state.x.as_slice().to_vec(),
            action_optimality,
        });
        self.records.push(StepRecord {
            t,
            x: self.state.x.as_slice().to_vec(),
            u_h: u_h.as_slice().to_vec(),
            u_r: u_r.as_slice().to_vec(),
            u: u.as_slice().to_vec(),
            x_next: next.x.as_slice().to_vec(),
            goal: self.state.goal_count,
            theta: None,
            theta_next: None,
        });
        self.state = next;
        self.last_u_h = u_h;
        self.tick += 1;
        Ok(self.state_message())
    }

    pub fn end(&mut self) {
        self.ended = true;
    }

    pub fn summary(&self) -> Result<SummaryMessage> {
        if !self.ended {
            return Err(Error::SessionNotEnded);
        }
        Ok(SummaryMessage {
            condition: self.condition,
            action_optimality_series: self.series.iter().map(|r| r.action_optimality).collect(),
            series: self.series.clone(),
        })
    }

    /// The session as a one-demonstration corpus. The human is not
    /// simulated, so the header carries the environment's default learner.
    pub fn export(&self) -> Corpus {
        Corpus {
            env: self.env.clone(),
            human: HumanSpec::default_for(&self.env),
            seed: self.seed,
            robot: RobotRandomization { sigma: 0.0 },
            config_hash: String::new(),
            demos: vec![Demonstration { seed: self.seed, steps: self.records.clone() }],
        }
    }
}

/// Headless stand-in for a participant: a simulated human with an
/// imperfect internal model who learns from what they see.
pub struct ScriptedClient {
    pub env: EnvSpec,
    pub human: HumanSpec,
    theta: SolvedModel,
    rng: ChaCha8Rng,
    prev: Option<StateMessage>,
}

impl ScriptedClient {
    pub fn new(env: EnvSpec, human: HumanSpec, seed: u64) -> Result<Self> {
        let theta = SolvedModel::from_vec(&env, &human.initial_theta(&env))?;
        Ok(ScriptedClient { env, human, theta, rng: ChaCha8Rng::seed_from_u64(seed ^ 0x00C1_1E47), prev: None })
    }

    /// Client with the environment's default learner.
    pub fn imperfect(env: EnvSpec, seed: u64) -> Result<Self> {
        let human = HumanSpec::default_for(&env);
        Self::new(env, human, seed)
    }

    pub fn theta(&self) -> Vec<f64> {
        self.theta.model.to_vec(&self.env)
    }

    /// Learn from the step that led to `state`, then choose the next input.
    pub fn respond(&mut self, state: &StateMessage) -> Result<[f64; 2]> {
        if let Some(prev) = self.prev.take() {
            let x = DVector::from_vec(prev.x);
            let goal = DVector::from_vec(prev.active_goal);
            let u = DVector::from_vec(state.executed_u.clone());
            self.theta = learner_step(&self.human, &self.env, &self.theta, &x, &u, &goal)?.theta;
        }
        let x = DVector::from_vec(state.x.clone());
        let goal = DVector::from_vec(state.active_goal.clone());
        let u_h = act(&self.env, &self.theta, &x, &goal, &mut self.rng)?;
        self.prev = Some(state.clone());
        Ok([u_h[0], u_h[1]])
    }
}

/// Drive a session with a scripted client for `ticks` steps and end it.
pub fn run_scripted(session: &mut Session, client: &mut ScriptedClient, ticks: usize) -> Result<SummaryMessage> {
    let mut state = session.state_message();
    for _ in 0..ticks {
        let u_h = client.respond(&state)?;
        session.input(state.tick, u_h)?;
        state = session.advance()?;
    }
    session.end();
    session.summary()
}

/// Shared server state. Networks are read-only.
pub struct ServiceState {
    pub nets: HashMap<Bias, Arc<LearnerNet>>,
    pub planner: PlannerConfig,
    pub teach: bool,
    pub tick: Duration,
    next_id: AtomicU64,
}

impl ServiceState {
    pub fn new(nets: HashMap<Bias, Arc<LearnerNet>>, planner: PlannerConfig, teach: bool, tick_hz: f64) -> Self {
        ServiceState { nets, planner, teach, tick: Duration::from_secs_f64(1.0 / tick_hz), next_id: AtomicU64::new(1) }
    }

    pub fn conditions(&self) -> Vec<Condition> {
        let mut out = vec![Condition { strategy: Teaching::NoTeaching, bias: Bias::Free }];
        for bias in [Bias::X, Bias::Y] {
            out.push(Condition { strategy: Teaching::NoTeaching, bias });
            if self.teach && self.nets.contains_key(&bias) {
                out.push(Condition { strategy: Teaching::ActiveTeaching, bias });
            }
        }
        out
    }

    pub fn open(&self, condition: Condition, seed: Option<u64>) -> Result<Session> {
        if !self.conditions().contains(&condition) {
            return Err(Error::Config("condition is not offered by this server".into()));
        }
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        Session::new(id, condition, self.nets.get(&condition.bias).cloned(), self.planner.clone(), seed.unwrap_or(id))
    }
}

#[derive(Serialize, Deserialize)]
pub struct Health {
    pub version: String,
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/health", get(|| async { Json(Health { version: VERSION.into() }) }))
        .route("/conditions", get(|State(s): State<Arc<ServiceState>>| async move { Json(s.conditions()) }))
        .route("/session", get(ws_upgrade))
        .with_state(state)
}

pub async fn bind(host: &str, port: u16) -> Result<TcpListener> {
    match TcpListener::bind((host, port)).await {
        Ok(l) => Ok(l),
        Err(e) if e.kind() == std::io::ErrorKind::AddrInUse => Err(Error::PortInUse(port)),
        Err(e) => Err(e.into()),
    }
}

pub async fn serve(listener: TcpListener, state: Arc<ServiceState>) -> Result<()> {
    let addr: SocketAddr = listener.local_addr()?;
    info!("listening on {addr}");
    axum::serve(listener, router(state)).await?;
    Ok(())
}

async fn ws_upgrade(ws: WebSocketUpgrade, State(state): State<Arc<ServiceState>>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| handle_socket(socket, state))
}

async fn send(socket: &mut WebSocket, msg: &ServerMessage) -> bool {
    let text = serde_json::to_string(msg).expect("messages serialize");
    socket.send(Message::Text(text.into())).await.is_ok()
}

async fn handle_socket(mut socket: WebSocket, app: Arc<ServiceState>) {
    let mut session: Option<Session> = None;
    let mut ticker = tokio::time::interval(app.tick);
    ticker.set_missed_tick_behavior(MissedTickBehavior::Delay);
    loop {
        tokio::select! {
            incoming = socket.recv() => {
                let text = match incoming {
                    Some(Ok(Message::Text(t))) => t,
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                    Some(Ok(_)) => continue,
                };
                let reply = match serde_json::from_str::<ClientMessage>(&text) {
                    Ok(ClientMessage::Start { condition, seed }) => match app.open(condition, seed) {
                        Ok(s) => {
                            let msg = ServerMessage::State(s.state_message());
                            session = Some(s);
                            ticker.reset();
                            Some(msg)
                        }
                        Err(e) => Some(ServerMessage::Error { message: e.to_string() }),
                    },
                    Ok(ClientMessage::Input { tick, u_h }) => match session.as_mut().map(|s| s.input(tick, u_h)) {
                        Some(Ok(())) => None,
                        Some(Err(e)) => {
                            debug!("input dropped: {e}");
                            None
                        }
                        None => Some(ServerMessage::Error { message: "no active session".into() }),
                    },
                    Ok(ClientMessage::End) => match session.take() {
                        Some(mut s) => {
                            s.end();
                            info!("session {} ended after {} ticks", s.id, s.tick());
                            s.summary().ok().map(ServerMessage::Summary)
                        }
                        None => Some(ServerMessage::Error { message: "no active session".into() }),
                    },
                    Err(e) => Some(ServerMessage::Error { message: format!("malformed message: {e}") }),
                };
                if let Some(msg) = reply {
                    if !send(&mut socket, &msg).await {
                        break;
                    }
                }
            }
            _ = ticker.tick(), if session.is_some() => {
                let mut s = session.take().expect("guarded by the select condition");
                let joined = tokio::task::spawn_blocking(move || {
                    let r = s.advance();
                    (s, r)
                })
                .await;
                let (s, result) = match joined {
                    Ok(v) => v,
                    Err(e) => {
                        warn!("session task failed: {e}");
                        break;
                    }
                };
                session = Some(s);
                let msg = match result {
                    Ok(state) => ServerMessage::State(state),
                    Err(e) => ServerMessage::Error { message: e.to_string() },
                };
                if !send(&mut socket, &msg).await {
                    break;
                }
            }
        }
    }
    if let Some(s) = session {
        info!("session {} dropped at tick {}", s.id, s.tick());
    }
}
