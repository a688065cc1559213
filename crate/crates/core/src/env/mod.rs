//! Desk-scale tabletop benchmark: a deterministic, seedable POMDP with
//! continuous low-dimensional dynamics, two rendered views, scripted
//! controllers, and ground-truth success predicates per skill.
//!
//! The scene holds three fixtures on a unit table: a drawer and a slider
//! that are dragged by the effector while the interact channel is engaged,
//! and a light that toggles on a press edge. Rendering is a pure function
//! of [`SceneState`], so observations are never stored — they are
//! re-rendered on demand.

mod collect;
mod control;
mod render;

pub use collect::{collect_demos, collect_play, DemoConfig, PlayConfig};
pub use control::expert_action;
pub use render::{render, GRIP_RES, STATIC_RES};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Action dimensionality: Δx, Δy, interact.
pub const ACTION_DIM: usize = 3;

/// Number of scalar fields in a [`SceneState`] snapshot.
pub const STATE_DIM: usize = 6;

/// Drawer handle track: x = DRAWER_X0 + DRAWER_SPAN · extent, at DRAWER_Y.
pub const DRAWER_X0: f64 = 0.15;
pub const DRAWER_SPAN: f64 = 0.45;
pub const DRAWER_Y: f64 = 0.25;

/// Slider handle track: x = SLIDER_X0 + SLIDER_SPAN · position, at SLIDER_Y.
pub const SLIDER_X0: f64 = 0.30;
pub const SLIDER_SPAN: f64 = 0.40;
pub const SLIDER_Y: f64 = 0.75;

/// Light button center.
pub const LIGHT_X: f64 = 0.85;
pub const LIGHT_Y: f64 = 0.85;

/// Full state of the tabletop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneState {
    /// Effector position in [0,1]².
    pub ex: f64,
    pub ey: f64,
    /// Drawer extent in [0,1]; open at 1.
    pub drawer: f64,
    /// Slider position in [0,1]; right at 1.
    pub slider: f64,
    /// Light flag.
    pub light: bool,
    /// Whether the interact channel was engaged on the previous step
    /// (used for press-edge detection).
    pub grasp: bool,
}

impl SceneState {
    /// Fixed reset state in which every skill predicate is false.
    pub fn canonical() -> Self {
        SceneState { ex: 0.5, ey: 0.5, drawer: 0.4, slider: 0.2, light: false, grasp: false }
    }

    pub fn to_array(&self) -> [f64; STATE_DIM] {
        [
            self.ex,
            self.ey,
            self.drawer,
            self.slider,
            if self.light { 1.0 } else { 0.0 },
            if self.grasp { 1.0 } else { 0.0 },
        ]
    }

    pub fn from_array(a: &[f64; STATE_DIM]) -> Self {
        SceneState {
            ex: a[0],
            ey: a[1],
            drawer: a[2],
            slider: a[3],
            light: a[4] >= 0.5,
            grasp: a[5] >= 0.5,
        }
    }

    pub fn drawer_handle(&self) -> (f64, f64) {
        (DRAWER_X0 + DRAWER_SPAN * self.drawer, DRAWER_Y)
    }

    pub fn slider_handle(&self) -> (f64, f64) {
        (SLIDER_X0 + SLIDER_SPAN * self.slider, SLIDER_Y)
    }

    fn clamped(mut self) -> Self {
        self.ex = self.ex.clamp(0.0, 1.0);
        self.ey = self.ey.clamp(0.0, 1.0);
        self.drawer = self.drawer.clamp(0.0, 1.0);
        self.slider = self.slider.clamp(0.0, 1.0);
        self
    }
}

/// One rendered observation: a wide static view and a zoomed gripper view.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// `[STATIC_RES, STATIC_RES, 3]` intensities in [0,1].
    pub static_view: Tensor,
    /// `[GRIP_RES, GRIP_RES, 3]` intensities in [0,1], centered on the effector.
    pub gripper_view: Tensor,
}

/// The tabletop skills and their success predicates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Skill {
    OpenDrawer,
    CloseDrawer,
    SlideRight,
    ToggleLight,
}

impl Skill {
    pub const ALL: [Skill; 4] =
        [Skill::OpenDrawer, Skill::CloseDrawer, Skill::SlideRight, Skill::ToggleLight];

    pub fn name(&self) -> &'static str {
        match self {
            Skill::OpenDrawer => "open-drawer",
            Skill::CloseDrawer => "close-drawer",
            Skill::SlideRight => "slide-right",
            Skill::ToggleLight => "toggle-light",
        }
    }

    pub fn from_name(name: &str) -> Result<Skill> {
        Skill::ALL
            .iter()
            .find(|s| s.name() == name)
            .copied()
            .ok_or_else(|| Error::config(format!("unknown skill '{name}'")))
    }

    pub fn index(&self) -> usize {
        Skill::ALL.iter().position(|s| s == self).unwrap()
    }
}

impl std::fmt::Display for Skill {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Pure success predicate per skill.
pub fn success(state: &SceneState, skill: Skill) -> bool {
    match skill {
        Skill::OpenDrawer => state.drawer >= 0.9,
        Skill::CloseDrawer => state.drawer <= 0.1,
        Skill::SlideRight => state.slider >= 0.9,
        Skill::ToggleLight => state.light,
    }
}

/// Success flags for every skill, in [`Skill::ALL`] order.
pub fn success_flags(state: &SceneState) -> [bool; 4] {
    [
        success(state, Skill::OpenDrawer),
        success(state, Skill::CloseDrawer),
        success(state, Skill::SlideRight),
        success(state, Skill::ToggleLight),
    ]
}

/// Environment parameters; echoed into every dataset and checkpoint header.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    /// Effector displacement per unit action component.
    pub step_size: f64,
    /// Std of Gaussian actuation noise added to the displacement.
    pub sigma_env: f64,
    /// Radius within which the interact channel engages a fixture.
    pub engage_radius: f64,
    /// Effector jitter applied by [`Playbench::reset_jittered`].
    pub start_jitter: f64,
    /// Drawer/slider jitter applied by [`Playbench::reset_jittered`].
    pub fixture_jitter: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            step_size: 0.08,
            sigma_env: 0.01,
            engage_radius: 0.10,
            start_jitter: 0.08,
            fixture_jitter: 0.05,
        }
    }
}

/// A single environment instance. Instances are independent; one instance
/// must not be stepped concurrently.
#[derive(Clone, Debug)]
pub struct Playbench {
    pub cfg: EnvConfig,
    pub state: SceneState,
}

impl Playbench {
    pub fn new(cfg: EnvConfig) -> Self {
        Playbench { cfg, state: SceneState::canonical() }
    }

    pub fn reset_canonical(&mut self) -> &SceneState {
        self.state = SceneState::canonical();
        &self.state
    }

    /// Canonical state with small start jitter; used for demos and evaluation.
    pub fn reset_jittered(&mut self, rng: &mut impl Rng) -> &SceneState {
        let c = SceneState::canonical();
        let j = self.cfg.start_jitter;
        let f = self.cfg.fixture_jitter;
        self.state = SceneState {
            ex: c.ex + rng.gen_range(-j..=j),
            ey: c.ey + rng.gen_range(-j..=j),
            drawer: c.drawer + rng.gen_range(-f..=f),
            slider: c.slider + rng.gen_range(-f..=f),
            light: false,
            grasp: false,
        }
        .clamped();
        &self.state
    }

    /// Fully randomized state; used for play collection.
    pub fn reset_random(&mut self, rng: &mut impl Rng) -> &SceneState {
        self.state = SceneState {
            ex: rng.gen_range(0.05..0.95),
            ey: rng.gen_range(0.05..0.95),
            drawer: rng.gen_range(0.02..0.98),
            slider: rng.gen_range(0.02..0.98),
            light: rng.gen_bool(0.5),
            grasp: false,
        };
        &self.state
    }

    /// Advance one step. Action components are clamped to [−1,1]; the
    /// interact component engages at values ≥ 0. Returns the fresh
    /// observation of the new state.
    pub fn step(&mut self, action: &[f64; ACTION_DIM], rng: &mut impl Rng) -> Observation {
        self.state = step_state(&self.cfg, &self.state, action, rng);
        self.observe()
    }

    pub fn observe(&self) -> Observation {
        render(&self.state)
    }
}

/// Pure transition function behind [`Playbench::step`].
pub fn step_state(
    cfg: &EnvConfig,
    state: &SceneState,
    action: &[f64; ACTION_DIM],
    rng: &mut impl Rng,
) -> SceneState {
    let ax = sanitize(action[0]);
    let ay = sanitize(action[1]);
    let interact = sanitize(action[2]) >= 0.0;

    let (nx, ny) = if cfg.sigma_env > 0.0 {
        (
            cfg.sigma_env * rng.sample::<f64, _>(StandardNormal),
            cfg.sigma_env * rng.sample::<f64, _>(StandardNormal),
        )
    } else {
        (0.0, 0.0)
    };
    let dx = cfg.step_size * ax + nx;
    let dy = cfg.step_size * ay + ny;

    let mut next = *state;
    if interact {
        // Engage the nearest fixture within reach, measured before moving.
        let handles = [
            (state.drawer_handle(), Fixture::Drawer),
            (state.slider_handle(), Fixture::Slider),
            ((LIGHT_X, LIGHT_Y), Fixture::Light),
        ];
        let mut engaged: Option<(f64, Fixture)> = None;
        for ((hx, hy), fixture) in handles {
            let d = ((state.ex - hx).powi(2) + (state.ey - hy).powi(2)).sqrt();
            if d <= cfg.engage_radius && engaged.map_or(true, |(bd, _)| d < bd) {
                engaged = Some((d, fixture));
            }
        }
        match engaged {
            Some((_, Fixture::Drawer)) => next.drawer += dx / DRAWER_SPAN,
            Some((_, Fixture::Slider)) => next.slider += dx / SLIDER_SPAN,
            Some((_, Fixture::Light)) => {
                if !state.grasp {
                    next.light = !state.light;
                }
            }
            None => {}
        }
    }
    next.ex += dx;
    next.ey += dy;
    next.grasp = interact;
    next.clamped()
}

#[derive(Clone, Copy, Debug)]
enum Fixture {
    Drawer,
    Slider,
    Light,
}

fn sanitize(v: f64) -> f64 {
    if v.is_finite() {
        v.clamp(-1.0, 1.0)
    } else {
        0.0
    }
}
