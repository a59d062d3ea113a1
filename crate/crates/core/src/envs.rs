//! Simulated environments and the shared-control execution rule.
//!
//! All four environments share the biased-linear form
//! `x' = A x + B [u - sign(x - x_g) ⊙ w]`; the lander and the bias-free arm
//! variants simply have `w = 0`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::human::ThetaKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Lander,
    Arm,
    Goal,
    Pref,
}

impl EnvKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "lander" => Ok(EnvKind::Lander),
            "arm" => Ok(EnvKind::Arm),
            "goal" => Ok(EnvKind::Goal),
            "pref" => Ok(EnvKind::Pref),
            other => Err(Error::UnknownEnv(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Lander => "lander",
            EnvKind::Arm => "arm",
            EnvKind::Goal => "goal",
            EnvKind::Pref => "pref",
        }
    }
}

/// How the active goal evolves over an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalMode {
    /// The first goal stays active.
    Fixed,
    /// Goals are visited in order, wrapping around, advancing whenever the
    /// state comes within `goal_radius` of the active goal.
    Cycle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// True control bias, indexed like the state (zero when the dynamics
    /// are bias-free).
    pub w: DVector<f64>,
    /// Human reward weights. For preference tasks this is the human's
    /// initial preference and `robot_q` holds the robot's.
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub robot_q: DMatrix<f64>,
    pub robot_r: DMatrix<f64>,
    pub goals: Vec<DVector<f64>>,
    pub goal_mode: GoalMode,
    pub goal_radius: f64,
    pub start: DVector<f64>,
    pub init_half_width: f64,
    pub horizon: usize,
    pub alpha: f64,
    pub robot_sigma: f64,
    pub theta_kind: ThetaKind,
    /// Internal model the robot wants the human to hold, as a flat vector.
    pub theta_star: Vec<f64>,
    /// Default initial internal model of the simulated human.
    pub theta0: Vec<f64>,
    /// Default step size and threshold of the simulated gradient learners.
    pub eta: f64,
    pub epsilon: f64,
    /// Weight of `|u - u_H|²` in the robot's reward.
    pub effort_weight: f64,
}

/// Physical state plus the goal bookkeeping needed to replay it.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub x: DVector<f64>,
    /// Number of goals reached so far; the active goal is derived from it.
    pub goal_count: usize,
}

pub fn blend(u_h: &DVector<f64>, u_r: &DVector<f64>, alpha: f64) -> Result<DVector<f64>> {
    if u_h.len() != u_r.len() {
        return Err(Error::DimensionMismatch(format!("u_H has {} entries, u_R has {}", u_h.len(), u_r.len())));
    }
    Ok(u_r * alpha + u_h * (1.0 - alpha))
}

fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `sign(x - x_g)` with `sign(0) = 0`.
pub fn sign_offset(x: &DVector<f64>, goal: &DVector<f64>) -> DVector<f64> {
    (x - goal).map(sign0)
}

pub fn lander_a() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 1.0])
}

pub fn lander_b() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 1, &[0.0, 0.5])
}

pub fn lander_step(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    lander_a() * x + lander_b() * u
}

pub const ARM_GAIN: f64 = 0.4;

pub fn arm_bias() -> DVector<f64> {
    DVector::from_vec(vec![-0.15, 0.0, 0.0])
}

pub fn arm_bias_y() -> DVector<f64> {
    DVector::from_vec(vec![0.0, -0.15, 0.0])
}

/// One step of the biased arm: `x + B [u - sign(x - x_g) ⊙ w]` with `A = I`.
pub fn arm_step(x: &DVector<f64>, u: &DVector<f64>, goal: &DVector<f64>, b: &DMatrix<f64>, w: &DVector<f64>) -> DVector<f64> {
    let push = sign_offset(x, goal).component_mul(w);
    x + b * (u - push)
}

/// Control offset `o = -sign(x - x_g) ⊙ w` of the human's linearization,
/// so that the planned control is `ũ = u + o`.
pub fn linearize_offset(x: &DVector<f64>, goal: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
    -sign_offset(x, goal).component_mul(w)
}

fn diamond(center: &DVector<f64>, radius: f64) -> Vec<DVector<f64>> {
    [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)]
        .iter()
        .map(|(dx, dy)| {
            let mut p = center.clone();
            p[0] += radius * dx;
            p[1] += radius * dy;
            p
        })
        .collect()
}

/// Weight scale applied to the arm-family reward matrices.
pub const ARM_WEIGHT_SCALE: f64 = 10.0;

impl EnvSpec {
    /// Named environment. Besides the kind names: `arm-y` moves the arm's
    /// bias to the y channel, and `arm-planar`/`arm-planar-y` are the
    /// tabletop-plane arms of the interactive sessions.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "arm-y" => Ok(Self::arm_with_bias(arm_bias_y())),
            "arm-planar" => Ok(Self::arm_with_bias(arm_bias().rows(0, 2).into_owned())),
            "arm-planar-y" => Ok(Self::arm_with_bias(arm_bias_y().rows(0, 2).into_owned())),
            _ => Ok(Self::new(EnvKind::parse(name)?)),
        }
    }

    pub fn new(kind: EnvKind) -> Self {
        match kind {
            EnvKind::Lander => Self::lander(),
            EnvKind::Arm => Self::arm(),
            EnvKind::Goal => Self::goal_env(),
            EnvKind::Pref => Self::pref_env(),
        }
    }

    pub fn lander() -> Self {
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.1]));
        let r = DMatrix::from_element(1, 1, 0.1);
        EnvSpec {
            kind: EnvKind::Lander,
            a: lander_a(),
            b: lander_b(),
            w: DVector::zeros(2),
            robot_q: q.clone(),
            robot_r: r.clone(),
            q,
            r,
            goals: vec![DVector::zeros(2)],
            goal_mode: GoalMode::Fixed,
            goal_radius: 0.05,
            start: DVector::from_vec(vec![0.3, 0.0]),
            init_half_width: 0.1,
            horizon: 60,
            alpha: 0.5,
            robot_sigma: 0.3,
            theta_kind: ThetaKind::DynamicsB,
            theta_star: vec![0.0, 0.5],
            theta0: vec![0.2, 0.8],
            eta: 0.1,
            // Median |∇P| over passive demonstrations.
            epsilon: 0.2,
            effort_weight: 0.01,
        }
    }

    fn arm_base(kind: EnvKind) -> Self {
        Self::arm_base_dim(kind, 3)
    }

    fn arm_base_dim(kind: EnvKind, n: usize) -> Self {
        let q = DMatrix::identity(n, n) * ARM_WEIGHT_SCALE;
        let r = DMatrix::identity(n, n) * (0.1 * ARM_WEIGHT_SCALE);
        EnvSpec {
            kind,
            a: DMatrix::identity(n, n),
            b: DMatrix::identity(n, n) * ARM_GAIN,
            w: DVector::zeros(n),
            robot_q: q.clone(),
            robot_r: r.clone(),
            q,
            r,
            goals: vec![DVector::zeros(n)],
            goal_mode: GoalMode::Fixed,
            goal_radius: 0.05,
            start: DVector::zeros(n),
            init_half_width: 0.1,
            horizon: 60,
            alpha: 0.5,
            robot_sigma: 0.3,
            theta_kind: ThetaKind::DynamicsBw { bias_axes: vec![0] },
            theta_star: vec![],
            theta0: vec![],
            eta: 0.02,
            // Median |∇P| over passive demonstrations of the 3-D arm.
            epsilon: 1.3,
            effort_weight: 0.01,
        }
    }

    /// Biased arm tracing a diamond of goals.
    pub fn arm() -> Self {
        Self::arm_with_bias(arm_bias())
    }

    /// Biased arm with an arbitrary bias; the learned bias axes are the
    /// nonzero entries of `w`.
    /// The arm's dimension follows `w`: three for the full arm, two for
    /// the tabletop-plane arm used by interactive sessions.
    pub fn arm_with_bias(w: DVector<f64>) -> Self {
        let n = w.len();
        let mut env = Self::arm_base_dim(EnvKind::Arm, n);
        let axes: Vec<usize> = (0..n).filter(|&i| w[i] != 0.0).collect();
        env.goals = diamond(&DVector::zeros(n), 0.3);
        env.goal_mode = GoalMode::Cycle;
        env.theta_star = vec![ARM_GAIN; n];
        env.theta_star.extend(axes.iter().map(|&i| w[i]));
        env.theta0 = vec![ARM_GAIN; n];
        env.theta0.extend(axes.iter().map(|_| 0.0));
        env.theta_kind = ThetaKind::DynamicsBw { bias_axes: axes };
        env.w = w;
        env
    }

    /// Bias-free arm with three candidate trays; the human holds a belief
    /// over which tray is the right one.
    pub fn goal_env() -> Self {
        let mut env = Self::arm_base(EnvKind::Goal);
        env.goals = vec![
            DVector::from_vec(vec![-0.3, 0.3, 0.0]),
            DVector::from_vec(vec![0.0, 0.4, 0.0]),
            DVector::from_vec(vec![0.3, 0.3, 0.0]),
        ];
        env.theta_kind = ThetaKind::BeliefOverGoals { goals: 3 };
        env.theta_star = vec![0.0, 0.0, 1.0];
        env.theta0 = vec![0.6, 0.3, 0.1];
        env.effort_weight = 5.0;
        env
    }

    /// Bias-free arm moving a cup to a fixed target. The human starts with
    /// an isotropic preference (straight line); the robot prefers closing
    /// the lateral error first and descending last.
    pub fn pref_env() -> Self {
        let mut env = Self::arm_base(EnvKind::Pref);
        env.goals = vec![DVector::from_vec(vec![0.3, 0.2, -0.3])];
        env.start = DVector::from_vec(vec![0.0, 0.0, 0.0]);
        let human = [1.0, 1.0, 1.0];
        let robot = [1.0, 1.0, 0.05];
        env.q = DMatrix::from_diagonal(&DVector::from_row_slice(&human)) * ARM_WEIGHT_SCALE;
        env.robot_q = DMatrix::from_diagonal(&DVector::from_row_slice(&robot)) * ARM_WEIGHT_SCALE;
        env.theta_kind = ThetaKind::PrefQ;
        env.theta_star = robot.iter().map(|v| v * ARM_WEIGHT_SCALE).collect();
        env.theta0 = human.iter().map(|v| v * ARM_WEIGHT_SCALE).collect();
        env.eta = 20.0;
        env.effort_weight = 1.0;
        env
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn theta_dim(&self) -> usize {
        self.theta_kind.dim(self)
    }

    pub fn initial_state(&self, x: DVector<f64>) -> EnvState {
        EnvState { x, goal_count: 0 }
    }

    pub fn active_goal(&self, state: &EnvState) -> &DVector<f64> {
        self.goal_for(state.goal_count)
    }

    /// Active goal after `goal_count` goals have been reached.
    pub fn goal_for(&self, goal_count: usize) -> &DVector<f64> {
        match self.goal_mode {
            GoalMode::Fixed => &self.goals[0],
            GoalMode::Cycle => &self.goals[goal_count % self.goals.len()],
        }
    }

    /// Physics only: `A x + B [u - sign(x - x_g) ⊙ w]`.
    pub fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>, goal: &DVector<f64>) -> DVector<f64> {
        if self.w.iter().all(|v| *v == 0.0) {
            return &self.a * x + &self.b * u;
        }
        let push = sign_offset(x, goal).component_mul(&self.w);
        &self.a * x + &self.b * (u - push)
    }

    /// Advance the physical state and the goal bookkeeping.
    pub fn step(&self, state: &EnvState, u: &DVector<f64>) -> EnvState {
        let x = self.dynamics(&state.x, u, self.active_goal(state));
        let mut next = EnvState { x, goal_count: state.goal_count };
        if self.goal_mode == GoalMode::Cycle && (&next.x - self.active_goal(&next)).norm() < self.goal_radius {
            next.goal_count += 1;
        }
        next
    }

    /// Task part of the robot's cost at one step (positive).
    pub fn task_cost(&self, state: &EnvState, u: &DVector<f64>) -> f64 {
        let goal = match self.kind {
            EnvKind::Goal => &self.goals[self.target_goal()],
            _ => self.active_goal(state),
        };
        let e = &state.x - goal;
        e.dot(&(&self.robot_q * &e)) + u.dot(&(&self.robot_r * u))
    }

    /// Index of the goal the robot wants in belief tasks.
    pub fn target_goal(&self) -> usize {
        self.theta_star
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    }

    pub fn theta_error(&self, theta: &[f64]) -> f64 {
        theta.iter().zip(&self.theta_star).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    #[test]
    fn blend_examples() {
        let uh = v(&[1.0, 0.0]);
        let ur = v(&[0.0, 1.0]);
        assert_eq!(blend(&uh, &ur, 0.0).unwrap(), uh);
        assert_eq!(blend(&uh, &ur, 1.0).unwrap(), ur);
        assert_eq!(blend(&uh, &ur, 0.5).unwrap(), v(&[0.5, 0.5]));
        assert!(blend(&uh, &v(&[1.0]), 0.5).is_err());
    }

    #[test]
    fn lander_examples() {
        assert_eq!(lander_step(&v(&[0.0, 0.0]), &v(&[0.0])), v(&[0.0, 0.0]));
        assert_eq!(lander_step(&v(&[0.1, 0.0]), &v(&[0.0])), v(&[0.1, 0.0]));
        assert_eq!(lander_step(&v(&[0.0, 0.0]), &v(&[1.0])), v(&[0.0, 0.5]));
    }

    #[test]
    fn arm_examples() {
        let b = DMatrix::identity(3, 3) * ARM_GAIN;
        let g = v(&[0.1, 0.2, 0.3]);
        assert_eq!(arm_step(&g, &DVector::zeros(3), &g, &b, &arm_bias()), g);
        let x = &g + v(&[1.0, 1.0, 1.0]);
        let next = arm_step(&x, &DVector::zeros(3), &g, &b, &arm_bias());
        assert!((next - &x - v(&[0.06, 0.0, 0.0])).abs().max() < 1e-15);
        let u = v(&[0.2, -0.1, 0.5]);
        let free = arm_step(&x, &u, &g, &b, &DVector::zeros(3));
        assert_eq!(free, &x + &u * ARM_GAIN);
    }

    #[test]
    fn linearization_offset_compensates_bias() {
        let g = DVector::zeros(3);
        let east = v(&[0.2, 0.0, 0.0]);
        assert_eq!(linearize_offset(&east, &g, &DVector::zeros(3)), DVector::zeros(3));
        let o = linearize_offset(&east, &g, &arm_bias());
        assert!((o[0] - 0.15).abs() < 1e-15);
        let west = v(&[-0.2, 0.0, 0.0]);
        assert!((linearize_offset(&west, &g, &arm_bias())[0] + 0.15).abs() < 1e-15);
    }

    #[test]
    fn env_dynamics_match_free_functions() {
        let env = EnvSpec::arm();
        let x = v(&[0.4, -0.1, 0.05]);
        let u = v(&[0.1, 0.2, -0.3]);
        let g = env.goals[0].clone();
        assert_eq!(env.dynamics(&x, &u, &g), arm_step(&x, &u, &g, &env.b, &env.w));
        let lander = EnvSpec::lander();
        let x = v(&[0.3, -0.2]);
        let u = v(&[0.7]);
        assert_eq!(lander.dynamics(&x, &u, &lander.goals[0]), lander_step(&x, &u));
    }

    #[test]
    fn goals_advance_on_arrival_only() {
        let env = EnvSpec::arm();
        let mut s = env.initial_state(DVector::zeros(3));
        let g0 = env.goals[0].clone();
        // Land exactly on the first goal (bias term is zero there).
        let u = (&g0 - &s.x) / ARM_GAIN;
        let u = &u - linearize_offset(&s.x, &g0, &env.w);
        s = env.step(&s, &u);
        assert!((&s.x - &g0).norm() < 1e-12);
        assert_eq!(s.goal_count, 1);
        let stay = env.step(&s, &DVector::zeros(3));
        assert_eq!(stay.goal_count, 1);
    }

    #[test]
    fn tray_layout_is_constant() {
        assert_eq!(EnvSpec::goal_env().goals, EnvSpec::goal_env().goals);
        assert_eq!(EnvSpec::goal_env().target_goal(), 2);
    }

    #[test]
    fn unknown_env_name() {
        assert!(matches!(EnvSpec::by_name("moon"), Err(Error::UnknownEnv(_))));
    }
}
