//! Scenario generation: random placement of the robot and agents.

use nalgebra::Vector2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ScenarioConfig, SimError};
use crate::dynamics::AgentState;

const SPAWN_ATTEMPTS: usize = 1000;

/// What an agent actually does, unknown to the robot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Behavior {
    /// PD straight to goal, oblivious to everyone.
    Blind,
    /// PD filtered through the agent's own certainty-equivalent collision
    /// filter with private barrier parameters.
    Avoider { eta: f64, d_s: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub state: AgentState,
    pub goal: Vector2<f64>,
    pub behavior: Behavior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub robot: AgentState,
    pub goal: Vector2<f64>,
    pub agents: Vec<Agent>,
}

fn uniform_point(rng: &mut ChaCha8Rng, half_width: f64) -> Vector2<f64> {
    Vector2::new(
        rng.gen_range(-half_width..half_width),
        rng.gen_range(-half_width..half_width),
    )
}

/// Draws a random world: agent count uniform in the configured range, agent
/// start positions pairwise separated by at least `2 D_s` and outside the
/// robot's constraint-activation radius (rejection sampling), random goals,
/// and a round-half-up blind/avoider split with per-avoider private barrier
/// parameters. Starting agents beyond the activation radius means every
/// encounter begins with an approach phase, during which the robot's online
/// disturbance window fills before any constraint becomes active.
pub fn spawn_scenario(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Result<World, SimError> {
    cfg.validate()?;
    let n = rng.gen_range(cfg.n_agents_range.0..=cfg.n_agents_range.1);
    let hw = cfg.arena_half_width;
    let min_sep = 2.0 * cfg.barrier.d_s;
    let robot_clear = cfg.activation_radius().max(min_sep);

    let mut starts: Vec<Vector2<f64>> = Vec::with_capacity(n + 1);
    for _ in 0..=n {
        let mut attempts = 0;
        loop {
            let c = uniform_point(rng, hw);
            let clear_of_robot =
                starts.first().map_or(true, |r| (r - c).norm() >= robot_clear);
            if clear_of_robot && starts.iter().skip(1).all(|p| (p - c).norm() >= min_sep) {
                starts.push(c);
                break;
            }
            attempts += 1;
            if attempts >= SPAWN_ATTEMPTS {
                return Err(SimError::SpawnFailed(SPAWN_ATTEMPTS));
            }
        }
    }

    let robot = AgentState::new(starts[0], Vector2::zeros());
    let goal = uniform_point(rng, hw);

    let n_blind = ((n as f64) * cfg.blind_fraction + 0.5).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let blind: std::collections::HashSet<usize> = order[..n_blind.min(n)].iter().copied().collect();

    let mut agents = Vec::with_capacity(n);
    for i in 0..n {
        let agent_goal = uniform_point(rng, hw);
        let behavior = if blind.contains(&i) {
            Behavior::Blind
        } else {
            Behavior::Avoider {
                eta: rng.gen_range(0.2..0.8),
                d_s: rng.gen_range(0.8..1.2) * cfg.barrier.d_s,
            }
        };
        agents.push(Agent {
            state: AgentState::new(starts[i + 1], Vector2::zeros()),
            goal: agent_goal,
            behavior,
        });
    }

    Ok(World { robot, goal, agents })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn spawn_is_deterministic_for_fixed_seed() {
        let cfg = ScenarioConfig::default();
        let w1 = spawn_scenario(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let w2 = spawn_scenario(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(w1, w2);
    }

    #[test]
    fn blind_count_rounds_half_up() {
        let cfg = ScenarioConfig {
            n_agents_range: (3, 3),
            ..ScenarioConfig::default()
        };
        let w = spawn_scenario(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(w.agents.len(), 3);
        let blind = w
            .agents
            .iter()
            .filter(|a| matches!(a.behavior, Behavior::Blind))
            .count();
        // 3 · 0.5 = 1.5 rounds up to 2
        assert_eq!(blind, 2);
    }

    #[test]
    fn initial_separations_respect_margin() {
        let cfg = ScenarioConfig::default();
        for seed in 0..20 {
            let w = spawn_scenario(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let pts: Vec<_> = w.agents.iter().map(|a| a.state.p).collect();
            for p in &pts {
                assert!((w.robot.p - p).norm() >= cfg.activation_radius());
            }
            for i in 0..pts.len() {
                for j in (i + 1)..pts.len() {
                    assert!((pts[i] - pts[j]).norm() >= 2.0 * cfg.barrier.d_s);
                }
            }
        }
    }

    #[test]
    fn tiny_arena_fails_to_spawn() {
        let cfg = ScenarioConfig {
            arena_half_width: 1.0,
            n_agents_range: (12, 12),
            ..ScenarioConfig::default()
        };
        assert!(matches!(
            spawn_scenario(&cfg, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(SimError::SpawnFailed(_))
        ));
    }

    #[test]
    fn avoider_parameters_in_configured_ranges() {
        let cfg = ScenarioConfig::default();
        for seed in 0..20 {
            let w = spawn_scenario(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            for a in &w.agents {
                if let Behavior::Avoider { eta, d_s } = a.behavior {
                    assert!((0.2..0.8).contains(&eta));
                    assert!(
                        d_s >= 0.8 * cfg.barrier.d_s && d_s <= 1.2 * cfg.barrier.d_s
                    );
                }
            }
        }
    }
}
