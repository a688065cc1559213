//! Analytic scene renderer. Pure function of [`SceneState`]: shapes are
//! drawn with smooth edges so small motions change pixel intensities
//! continuously even at 16×16.

use super::{
    Observation, SceneState, DRAWER_X0, DRAWER_Y, LIGHT_X, LIGHT_Y, SLIDER_X0, SLIDER_SPAN,
    SLIDER_Y,
};
use crate::tensor::Tensor;

pub const STATIC_RES: usize = 16;
pub const GRIP_RES: usize = 8;

/// Half-width of the window covered by the gripper view.
const GRIP_HALF: f64 = 0.125;

/// Edge softness in world units (about one static-view pixel).
const EDGE: f64 = 0.05;

fn smooth_ge(x: f64, edge: f64) -> f64 {
    // 0 well below `edge`, 1 well above, linear ramp of width 2·EDGE.
    ((x - edge + EDGE) / (2.0 * EDGE)).clamp(0.0, 1.0)
}

fn inside(x: f64, lo: f64, hi: f64) -> f64 {
    smooth_ge(x, lo) * (1.0 - smooth_ge(x, hi))
}

fn blob(px: f64, py: f64, cx: f64, cy: f64, radius: f64) -> f64 {
    let d2 = (px - cx) * (px - cx) + (py - cy) * (py - cy);
    (-d2 / (2.0 * radius * radius)).exp()
}

/// Shade one world-space point.
fn shade(state: &SceneState, px: f64, py: f64) -> [f64; 3] {
    let mut r = 0.08;
    let mut g = 0.08;
    let mut b = 0.10;

    // Drawer: red bar growing with extent, plus a bright handle knob.
    let (hx, hy) = state.drawer_handle();
    let bar = inside(px, DRAWER_X0 - 0.05, hx + 0.03) * inside(py, DRAWER_Y - 0.07, DRAWER_Y + 0.07);
    r += 0.55 * bar;
    let knob = blob(px, py, hx, hy, 0.035);
    r += 0.35 * knob;
    g += 0.25 * knob;

    // Slider: faint green track with a bright block at the handle.
    let track = inside(px, SLIDER_X0 - 0.05, SLIDER_X0 + SLIDER_SPAN + 0.05)
        * inside(py, SLIDER_Y - 0.03, SLIDER_Y + 0.03);
    g += 0.18 * track;
    let (sx, sy) = state.slider_handle();
    let block = inside(px, sx - 0.05, sx + 0.05) * inside(py, sy - 0.06, sy + 0.06);
    g += 0.6 * block;

    // Light: blue disk, bright when on.
    let lamp = blob(px, py, LIGHT_X, LIGHT_Y, 0.06);
    let glow = if state.light { 0.85 } else { 0.18 };
    b += glow * lamp;
    if state.light {
        r += 0.25 * lamp;
        g += 0.25 * lamp;
    }

    // Effector: white dot on top.
    let dot = blob(px, py, state.ex, state.ey, 0.03);
    r += 0.9 * dot;
    g += 0.9 * dot;
    b += 0.9 * dot;

    [r.clamp(0.0, 1.0), g.clamp(0.0, 1.0), b.clamp(0.0, 1.0)]
}

fn render_view(state: &SceneState, res: usize, origin: (f64, f64), size: f64) -> Tensor {
    let mut data = Vec::with_capacity(res * res * 3);
    for i in 0..res {
        let py = origin.1 + size * (i as f64 + 0.5) / res as f64;
        for j in 0..res {
            let px = origin.0 + size * (j as f64 + 0.5) / res as f64;
            data.extend_from_slice(&shade(state, px, py));
        }
    }
    Tensor::new(vec![res, res, 3], data).unwrap()
}

/// Render both views of a state.
pub fn render(state: &SceneState) -> Observation {
    let static_view = render_view(state, STATIC_RES, (0.0, 0.0), 1.0);
    let gripper_view = render_view(
        state,
        GRIP_RES,
        (state.ex - GRIP_HALF, state.ey - GRIP_HALF),
        2.0 * GRIP_HALF,
    );
    Observation { static_view, gripper_view }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_pure_and_in_range() {
        let s = SceneState::canonical();
        let a = render(&s);
        let b = render(&s);
        assert_eq!(a.static_view.data(), b.static_view.data());
        assert_eq!(a.gripper_view.data(), b.gripper_view.data());
        for v in a.static_view.data().iter().chain(a.gripper_view.data()) {
            assert!((0.0..=1.0).contains(v));
        }
        assert_eq!(a.static_view.shape(), &[STATIC_RES, STATIC_RES, 3]);
        assert_eq!(a.gripper_view.shape(), &[GRIP_RES, GRIP_RES, 3]);
    }

    #[test]
    fn state_changes_are_visible() {
        let s0 = SceneState::canonical();
        let mut s1 = s0;
        s1.drawer = 0.95;
        let d: f64 = render(&s0)
            .static_view
            .data()
            .iter()
            .zip(render(&s1).static_view.data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(d > 0.5, "drawer motion must change pixels, delta {d}");

        let mut s2 = s0;
        s2.light = true;
        let d: f64 = render(&s0)
            .static_view
            .data()
            .iter()
            .zip(render(&s2).static_view.data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(d > 0.5, "light must change pixels, delta {d}");
    }
}
