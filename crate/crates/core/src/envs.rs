//! Desk-scale meta-task families with parameterized rewards and a
//! reward-free interaction mode.
//!
//! All three families are point masses driven directly by the action:
//! position += dt·action, velocity = action. Families differ only in the
//! reward and the observation layout:
//!
//! - `point_direction_2d`: obs [x, y, vx, vy], reward dot(velocity, dir).
//! - `point_velocity_1d`:  obs [x, vx], reward −|vx − target|.
//! - `sparse_reach`:       obs [x, y, vx, vy, gx, gy] in a clamped arena,
//!   reward 0 inside the goal box else −1. The goal box center is part of
//!   the observation, so task identity is visible through dynamics-free
//!   channels the way a robot sees the object configuration it must reach.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SmacError};

pub const DT: f64 = 0.1;
/// Sparse-reach arena is [−1, 1]²; positions clamp at the walls.
pub const ARENA_HALF: f64 = 1.0;
/// Goal box half-width (∞-norm) for sparse_reach.
pub const GOAL_HALF: f64 = 0.2;
/// Goal centers are sampled uniformly in [−0.8, 0.8]².
pub const GOAL_CENTER_MAX: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "point_direction_2d")]
    PointDirection2d,
    #[serde(rename = "point_velocity_1d")]
    PointVelocity1d,
    #[serde(rename = "sparse_reach")]
    SparseReach,
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::PointDirection2d => "point_direction_2d",
            Family::PointVelocity1d => "point_velocity_1d",
            Family::SparseReach => "sparse_reach",
        }
    }

    pub fn parse(s: &str) -> Result<Family> {
        match s {
            "point_direction_2d" => Ok(Family::PointDirection2d),
            "point_velocity_1d" => Ok(Family::PointVelocity1d),
            "sparse_reach" => Ok(Family::SparseReach),
            other => Err(SmacError::InvalidConfig(format!(
                "unknown environment family {other:?} (expected point_direction_2d, point_velocity_1d, or sparse_reach)"
            ))),
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            Family::PointDirection2d => 4,
            Family::PointVelocity1d => 2,
            Family::SparseReach => 6,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            Family::PointDirection2d => 2,
            Family::PointVelocity1d => 1,
            Family::SparseReach => 2,
        }
    }

    /// Whether positions live in 2-D (trajectory dumps need x, y).
    pub fn is_2d(&self) -> bool {
        !matches!(self, Family::PointVelocity1d)
    }
}

/// Default episode length per family.
pub fn horizon(family: Family) -> usize {
    match family {
        Family::PointDirection2d | Family::PointVelocity1d => 60,
        Family::SparseReach => 50,
    }
}

/// One task: the family plus the parameters of its reward function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub family: Family,
    /// Direction unit vector, [target speed], or goal box center.
    pub params: Vec<f64>,
    pub task_id: u32,
}

/// Plain-data environment state; the observation is the full state.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub observation: Vec<f64>,
    pub step_index: u32,
    pub done: bool,
}

/// Draws a task from the family's distribution.
pub fn sample_task<R: Rng + ?Sized>(family: Family, task_id: u32, rng: &mut R) -> TaskSpec {
    let params = match family {
        Family::PointDirection2d => {
            let theta: f64 = rng.random::<f64>() * std::f64::consts::TAU;
            vec![theta.cos(), theta.sin()]
        }
        Family::PointVelocity1d => vec![rng.random::<f64>() * 3.0],
        Family::SparseReach => vec![
            (rng.random::<f64>() * 2.0 - 1.0) * GOAL_CENTER_MAX,
            (rng.random::<f64>() * 2.0 - 1.0) * GOAL_CENTER_MAX,
        ],
    };
    TaskSpec {
        family,
        params,
        task_id,
    }
}

pub fn validate_task(task: &TaskSpec) -> Result<()> {
    let want = match task.family {
        Family::PointDirection2d => 2,
        Family::PointVelocity1d => 1,
        Family::SparseReach => 2,
    };
    if task.params.len() != want {
        return Err(SmacError::Data(format!(
            "task {} has {} params, family {} expects {want}",
            task.task_id,
            task.params.len(),
            task.family.name()
        )));
    }
    match task.family {
        Family::PointDirection2d => {
            let norm = (task.params[0] * task.params[0] + task.params[1] * task.params[1]).sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(SmacError::Data(format!(
                    "direction task {} params not unit norm ({norm})",
                    task.task_id
                )));
            }
        }
        Family::PointVelocity1d => {
            if !(0.0..=3.0).contains(&task.params[0]) {
                return Err(SmacError::Data(format!(
                    "velocity task {} target {} outside [0, 3]",
                    task.task_id, task.params[0]
                )));
            }
        }
        Family::SparseReach => {
            if task.params.iter().any(|g| g.abs() > ARENA_HALF) {
                return Err(SmacError::Data(format!(
                    "sparse_reach task {} goal outside the arena",
                    task.task_id
                )));
            }
        }
    }
    Ok(())
}

/// Initial state: point families start at the origin at rest; sparse_reach
/// starts at a uniform arena position with the goal visible in the
/// observation.
pub fn reset<R: Rng + ?Sized>(task: &TaskSpec, rng: &mut R) -> EnvState {
    let observation = match task.family {
        Family::PointDirection2d => vec![0.0; 4],
        Family::PointVelocity1d => vec![0.0; 2],
        Family::SparseReach => {
            let x = (rng.random::<f64>() * 2.0 - 1.0) * ARENA_HALF;
            let y = (rng.random::<f64>() * 2.0 - 1.0) * ARENA_HALF;
            vec![x, y, 0.0, 0.0, task.params[0], task.params[1]]
        }
    };
    EnvState {
        observation,
        step_index: 0,
        done: false,
    }
}

fn clip_action(task: &TaskSpec, action: &[f64]) -> Result<Vec<f64>> {
    if action.len() != task.family.action_dim() {
        return Err(SmacError::ShapeMismatch {
            context: "env action",
            expected: format!("{}", task.family.action_dim()),
            got: format!("{}", action.len()),
        });
    }
    Ok(action.iter().map(|a| a.clamp(-1.0, 1.0)).collect())
}

/// True reward for taking (clipped) action `a` in observation `s`.
///
/// Rewards are deterministic in (s, a, task params); the sparse next-position
/// is recomputed from s and a, so logged transitions replay exactly.
pub fn true_reward(task: &TaskSpec, s: &[f64], action: &[f64]) -> Result<f64> {
    let a = clip_action(task, action)?;
    Ok(match task.family {
        Family::PointDirection2d => a[0] * task.params[0] + a[1] * task.params[1],
        Family::PointVelocity1d => -(a[0] - task.params[0]).abs(),
        Family::SparseReach => {
            let nx = (s[0] + DT * a[0]).clamp(-ARENA_HALF, ARENA_HALF);
            let ny = (s[1] + DT * a[1]).clamp(-ARENA_HALF, ARENA_HALF);
            let inside = (nx - task.params[0]).abs() <= GOAL_HALF
                && (ny - task.params[1]).abs() <= GOAL_HALF;
            if inside {
                0.0
            } else {
                -1.0
            }
        }
    })
}

/// Advances the state by one step under the given horizon. Returns the next
/// state and the reward, or `None` for the reward when `reveal_reward` is
/// false.
pub fn step(
    task: &TaskSpec,
    state: &EnvState,
    action: &[f64],
    reveal_reward: bool,
    horizon: usize,
) -> Result<(EnvState, Option<f64>)> {
    if state.done {
        return Err(SmacError::Env(format!(
            "stepping a done state (task {}, step {})",
            task.task_id, state.step_index
        )));
    }
    let a = clip_action(task, action)?;
    let reward = if reveal_reward {
        Some(true_reward(task, &state.observation, &a)?)
    } else {
        None
    };
    let observation = match task.family {
        Family::PointDirection2d => {
            let x = state.observation[0] + DT * a[0];
            let y = state.observation[1] + DT * a[1];
            vec![x, y, a[0], a[1]]
        }
        Family::PointVelocity1d => {
            let x = state.observation[0] + DT * a[0];
            vec![x, a[0]]
        }
        Family::SparseReach => {
            let x = (state.observation[0] + DT * a[0]).clamp(-ARENA_HALF, ARENA_HALF);
            let y = (state.observation[1] + DT * a[1]).clamp(-ARENA_HALF, ARENA_HALF);
            vec![x, y, a[0], a[1], task.params[0], task.params[1]]
        }
    };
    let step_index = state.step_index + 1;
    Ok((
        EnvState {
            observation,
            step_index,
            done: step_index as usize >= horizon,
        },
        reward,
    ))
}

/// A live environment with an enforced reward-visibility mode.
///
/// Self-supervised collection constructs these with `reveal_allowed = false`;
/// any attempt to read a true reward then fails the run instead of silently
/// leaking labels.
#[derive(Debug, Clone)]
pub struct RolloutEnv {
    pub task: TaskSpec,
    pub horizon: usize,
    pub reveal_allowed: bool,
    state: EnvState,
}

impl RolloutEnv {
    pub fn new<R: Rng + ?Sized>(
        task: TaskSpec,
        horizon: usize,
        reveal_allowed: bool,
        rng: &mut R,
    ) -> Self {
        let state = reset(&task, rng);
        RolloutEnv {
            task,
            horizon,
            reveal_allowed,
            state,
        }
    }

    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.state = reset(&self.task, rng);
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    /// Steps the environment; `want_reward = true` on a reward-free instance
    /// is a contract violation and aborts.
    pub fn step(&mut self, action: &[f64], want_reward: bool) -> Result<Option<f64>> {
        if want_reward && !self.reveal_allowed {
            return Err(SmacError::RewardAccess {
                task_id: self.task.task_id,
            });
        }
        let (next, reward) = step(&self.task, &self.state, action, want_reward, self.horizon)?;
        self.state = next;
        Ok(reward)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    #[test]
    fn direction_tasks_have_unit_norm_params() {
        let mut rng = derive_rng(31, &["envs", "unit"]);
        for id in 0..200 {
            let t = sample_task(Family::PointDirection2d, id, &mut rng);
            let norm = (t.params[0] * t.params[0] + t.params[1] * t.params[1]).sqrt();
            assert!((norm - 1.0).abs() < 1e-9, "direction params must be unit norm");
            validate_task(&t).unwrap();
        }
    }

    #[test]
    fn velocity_targets_lie_in_range() {
        let mut rng = derive_rng(32, &["envs", "vel"]);
        for id in 0..200 {
            let t = sample_task(Family::PointVelocity1d, id, &mut rng);
            assert!((0.0..=3.0).contains(&t.params[0]), "target speed must be in [0,3]");
        }
    }

    #[test]
    fn angle_distribution_is_uniform_by_chi_square() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let mut rng = derive_rng(33, &["envs", "chi2"]);
        let bins = 16;
        let n = 10_000;
        let mut counts = vec![0usize; bins];
        for id in 0..n {
            let t = sample_task(Family::PointDirection2d, id as u32, &mut rng);
            let mut theta = t.params[1].atan2(t.params[0]);
            if theta < 0.0 {
                theta += std::f64::consts::TAU;
            }
            let b = ((theta / std::f64::consts::TAU * bins as f64) as usize).min(bins - 1);
            counts[b] += 1;
        }
        let expected = n as f64 / bins as f64;
        let stat: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        let chi = ChiSquared::new((bins - 1) as f64).unwrap();
        let p = 1.0 - chi.cdf(stat);
        assert!(p > 0.01, "angle distribution failed chi-square: stat {stat}, p {p}");
    }

    #[test]
    fn point_reset_is_origin_at_rest() {
        let mut rng = derive_rng(34, &["envs", "reset"]);
        for family in [Family::PointDirection2d, Family::PointVelocity1d] {
            let t = sample_task(family, 0, &mut rng);
            let s = reset(&t, &mut rng);
            assert!(s.observation.iter().all(|v| *v == 0.0), "point reset must be zeros");
            assert_eq!(s.step_index, 0);
            assert!(!s.done);
        }
    }

    #[test]
    fn sparse_reset_positions_stay_in_arena() {
        let mut rng = derive_rng(35, &["envs", "sparse_reset"]);
        let t = sample_task(Family::SparseReach, 0, &mut rng);
        for _ in 0..10_000 {
            let s = reset(&t, &mut rng);
            assert!(s.observation[0].abs() <= ARENA_HALF);
            assert!(s.observation[1].abs() <= ARENA_HALF);
            assert_eq!(&s.observation[4..], &t.params[..], "goal must be visible in obs");
        }
    }

    #[test]
    fn direction_reward_is_unit_for_aligned_unit_velocity() {
        let t = TaskSpec {
            family: Family::PointDirection2d,
            params: vec![0.6, 0.8],
            task_id: 0,
        };
        let mut rng = derive_rng(36, &["envs", "aligned"]);
        let s = reset(&t, &mut rng);
        let (_, r) = step(&t, &s, &[0.6, 0.8], true, 60).unwrap();
        assert!((r.unwrap() - 1.0).abs() < 1e-15, "aligned unit velocity must score 1");
    }

    #[test]
    fn velocity_reward_is_zero_at_target() {
        let t = TaskSpec {
            family: Family::PointVelocity1d,
            params: vec![0.7],
            task_id: 0,
        };
        let mut rng = derive_rng(37, &["envs", "at_target"]);
        let s = reset(&t, &mut rng);
        let (_, r) = step(&t, &s, &[0.7], true, 60).unwrap();
        assert_eq!(r.unwrap(), 0.0, "matching the target speed is the maximum reward");
        let (_, r2) = step(&t, &s, &[0.2], true, 60).unwrap();
        assert!((r2.unwrap() + 0.5).abs() < 1e-15);
    }

    #[test]
    fn sparse_rewards_are_zero_or_minus_one() {
        let mut rng = derive_rng(38, &["envs", "sparse_r"]);
        let t = sample_task(Family::SparseReach, 0, &mut rng);
        let mut hit = false;
        let mut miss = false;
        for _ in 0..2000 {
            let s = reset(&t, &mut rng);
            let a = [rng.random::<f64>() * 2.0 - 1.0, rng.random::<f64>() * 2.0 - 1.0];
            let (_, r) = step(&t, &s, &a, true, 50).unwrap();
            let r = r.unwrap();
            assert!(r == 0.0 || r == -1.0, "sparse reward must be 0 or −1, got {r}");
            hit |= r == 0.0;
            miss |= r == -1.0;
        }
        assert!(hit && miss, "both sparse outcomes should occur over random starts");
    }

    #[test]
    fn dynamics_ignore_reward_visibility() {
        let mut rng = derive_rng(39, &["envs", "blind"]);
        for family in [Family::PointDirection2d, Family::PointVelocity1d, Family::SparseReach] {
            let t = sample_task(family, 3, &mut rng);
            let s0 = reset(&t, &mut rng);
            let mut a_state = s0.clone();
            let mut b_state = s0;
            for k in 0..horizon(family) {
                let a: Vec<f64> = (0..family.action_dim())
                    .map(|i| ((k * 3 + i) as f64 * 0.77).sin())
                    .collect();
                let (na, _) = step(&t, &a_state, &a, true, horizon(family)).unwrap();
                let (nb, _) = step(&t, &b_state, &a, false, horizon(family)).unwrap();
                assert_eq!(na.observation, nb.observation, "reward visibility must not affect dynamics");
                a_state = na;
                b_state = nb;
            }
            assert!(a_state.done, "episode must end exactly at the horizon");
        }
    }

    #[test]
    fn logged_rewards_recompute_exactly() {
        let mut rng = derive_rng(40, &["envs", "recompute"]);
        for family in [Family::PointDirection2d, Family::PointVelocity1d, Family::SparseReach] {
            let t = sample_task(family, 5, &mut rng);
            let mut state = reset(&t, &mut rng);
            for k in 0..20 {
                let a: Vec<f64> = (0..family.action_dim())
                    .map(|i| 1.3 * ((k * 2 + i) as f64 * 0.51).cos())
                    .collect();
                let s_logged = state.observation.clone();
                let (next, r) = step(&t, &state, &a, true, 60).unwrap();
                assert_eq!(
                    true_reward(&t, &s_logged, &a).unwrap(),
                    r.unwrap(),
                    "recomputed reward must reproduce the logged value exactly"
                );
                state = next;
            }
        }
    }

    #[test]
    fn direction_reward_is_linear_in_action_scale() {
        let mut rng = derive_rng(41, &["envs", "linear"]);
        let t = sample_task(Family::PointDirection2d, 0, &mut rng);
        let s = reset(&t, &mut rng);
        let a = [0.9, -0.4];
        let r1 = true_reward(&t, &s.observation, &a).unwrap();
        for alpha in [0.0, 0.25, 0.5, 1.0] {
            let scaled = [alpha * a[0], alpha * a[1]];
            let r = true_reward(&t, &s.observation, &scaled).unwrap();
            assert!((r - alpha * r1).abs() < 1e-15, "direction reward must scale linearly");
        }
    }

    #[test]
    fn stepping_done_state_errors() {
        let mut rng = derive_rng(42, &["envs", "done"]);
        let t = sample_task(Family::PointVelocity1d, 0, &mut rng);
        let mut state = reset(&t, &mut rng);
        for _ in 0..3 {
            let (next, _) = step(&t, &state, &[0.5], true, 3).unwrap();
            state = next;
        }
        assert!(state.done);
        let err = step(&t, &state, &[0.5], true, 3).unwrap_err();
        assert!(matches!(err, SmacError::Env(_)));
    }

    #[test]
    fn reward_free_env_rejects_reward_reads() {
        let mut rng = derive_rng(43, &["envs", "guard"]);
        let t = sample_task(Family::PointDirection2d, 9, &mut rng);
        let mut env = RolloutEnv::new(t, 60, false, &mut rng);
        assert!(env.step(&[0.1, 0.2], false).unwrap().is_none());
        let err = env.step(&[0.1, 0.2], true).unwrap_err();
        assert!(
            matches!(err, SmacError::RewardAccess { task_id: 9 }),
            "reward read on a reward-free env must abort"
        );
    }

    #[test]
    fn actions_are_clipped_to_unit_box() {
        let t = TaskSpec {
            family: Family::PointVelocity1d,
            params: vec![3.0],
            task_id: 0,
        };
        let s = EnvState {
            observation: vec![0.0, 0.0],
            step_index: 0,
            done: false,
        };
        let (next, r) = step(&t, &s, &[7.0], true, 60).unwrap();
        assert_eq!(next.observation[1], 1.0, "velocity must reflect the clipped action");
        assert_eq!(r.unwrap(), -2.0, "reward must use the clipped action");
    }
}
