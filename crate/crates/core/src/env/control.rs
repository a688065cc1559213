//! Stateless scripted controllers: one proportional reach-engage-drag
//! policy per skill, derived purely from the current scene state.

use super::{success, SceneState, Skill, ACTION_DIM, LIGHT_X, LIGHT_Y};

/// Completion margin beyond the success threshold so that noise during the
/// final hold cannot undo the predicate.
const MARGIN: f64 = 0.04;

/// Expert action for `skill` at `state`. Pure function; callers add
/// exploration or demonstration noise themselves.
pub fn expert_action(state: &SceneState, skill: Skill, step_size: f64, reach: f64) -> [f64; ACTION_DIM] {
    match skill {
        Skill::OpenDrawer => drag(state, state.drawer_handle(), state.drawer, 1.0 - MARGIN, step_size, reach),
        Skill::CloseDrawer => drag(state, state.drawer_handle(), state.drawer, MARGIN, step_size, reach),
        Skill::SlideRight => drag(state, state.slider_handle(), state.slider, 1.0 - MARGIN, step_size, reach),
        Skill::ToggleLight => press(state, step_size, reach),
    }
}

/// Drag controller used for play collection: moves a fixture's scalar
/// toward an arbitrary target value.
pub fn drag(
    state: &SceneState,
    handle: (f64, f64),
    value: f64,
    target: f64,
    step_size: f64,
    reach: f64,
) -> [f64; ACTION_DIM] {
    if (value - target).abs() <= MARGIN {
        return hold();
    }
    let (hx, hy) = handle;
    let dist = ((state.ex - hx).powi(2) + (state.ey - hy).powi(2)).sqrt();
    if dist > reach {
        approach(state, hx, hy, step_size)
    } else {
        // Engaged: pull along x toward the target, keep y centered.
        let dir = if target > value { 1.0 } else { -1.0 };
        let ay = ((hy - state.ey) / step_size).clamp(-1.0, 1.0);
        [dir, ay, 1.0]
    }
}

fn press(state: &SceneState, step_size: f64, reach: f64) -> [f64; ACTION_DIM] {
    if success(state, Skill::ToggleLight) {
        return hold();
    }
    let dist = ((state.ex - LIGHT_X).powi(2) + (state.ey - LIGHT_Y).powi(2)).sqrt();
    if dist > 0.7 * reach {
        approach(state, LIGHT_X, LIGHT_Y, step_size)
    } else if state.grasp {
        // Release so the next engage is a fresh press edge.
        let mut a = approach(state, LIGHT_X, LIGHT_Y, step_size);
        a[2] = -1.0;
        a
    } else {
        [0.0, 0.0, 1.0]
    }
}

fn approach(state: &SceneState, tx: f64, ty: f64, step_size: f64) -> [f64; ACTION_DIM] {
    let ax = ((tx - state.ex) / step_size).clamp(-1.0, 1.0);
    let ay = ((ty - state.ey) / step_size).clamp(-1.0, 1.0);
    [ax, ay, -1.0]
}

/// Stay still with the interact channel released.
pub fn hold() -> [f64; ACTION_DIM] {
    [0.0, 0.0, -1.0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{step_state, EnvConfig, Playbench};
    use crate::rng::stream;

    #[test]
    fn expert_reaches_open_drawer_within_40_steps_from_canonical_start() {
        let cfg = EnvConfig { sigma_env: 0.01, ..EnvConfig::default() };
        let mut env = Playbench::new(cfg);
        env.reset_canonical();
        let mut rng = stream(3, "expert");
        let mut done_at = None;
        for t in 0..40 {
            let a = expert_action(&env.state, Skill::OpenDrawer, cfg.step_size, cfg.engage_radius * 0.8);
            env.state = step_state(&cfg, &env.state, &a, &mut rng);
            if success(&env.state, Skill::OpenDrawer) {
                done_at = Some(t);
                break;
            }
        }
        assert!(done_at.is_some(), "expert failed to open the drawer in 40 steps");
    }

    #[test]
    fn experts_succeed_on_every_skill_at_default_noise() {
        // ≥95% success over 100 seeded jittered rollouts per skill.
        let cfg = EnvConfig::default();
        for skill in Skill::ALL {
            let mut wins = 0;
            for seed in 0..100u64 {
                let mut env = Playbench::new(cfg);
                let mut rng = stream(seed, &format!("expert-{}", skill.name()));
                env.reset_jittered(&mut rng);
                for _ in 0..60 {
                    let a = expert_action(&env.state, skill, cfg.step_size, cfg.engage_radius * 0.8);
                    env.state = step_state(&cfg, &env.state, &a, &mut rng);
                    if success(&env.state, skill) {
                        wins += 1;
                        break;
                    }
                }
            }
            assert!(wins >= 95, "{skill}: only {wins}/100 expert successes");
        }
    }
}
