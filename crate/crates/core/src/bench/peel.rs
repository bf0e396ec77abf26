//! Peel-and-rotate ring task. The apple is the rotor disk; a tool fixed in
//! the world peels the arc under it when a full stroke keeps the contact
//! force inside a band. Between strokes the hand must turn the apple without
//! dropping it.

use std::f64::consts::{FRAC_PI_2, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mix, mixing, Task, TaskEnv, FORCE_DIM, TACTILE_DIM};
use crate::backbone::{ModelDims, Observation};
use crate::error::{contract, Result};
use crate::flow::ActionLayout;
use crate::imcopilot::rotor::{FINGERS, JOINTS};
use crate::imcopilot::{randomize_domain, ObsHistory, RandomizationRanges, RotorConfig, RotorEnv, RotorState};
use crate::record::Outcome;

pub const BINS: usize = 8;
pub const VISION_DIM: usize = 2 + BINS + 1;
pub const PROPRIO_DIM: usize = 9 + 1;
pub const ACTION_DIM: usize = 2 + JOINTS + 1;

pub fn dims() -> ModelDims {
    ModelDims {
        d_v: VISION_DIM,
        d_s: PROPRIO_DIM,
        d_f: FORCE_DIM,
        d_g: TACTILE_DIM,
        instructions: Task::ALL.len(),
        layout: ActionLayout::contiguous(2, JOINTS, 1).expect("static layout"),
    }
}

/// Disjoint closed arcs on the circle, stored as sorted `[start, end]` pairs
/// inside `[0, 2π]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArcSet {
    arcs: Vec<(f64, f64)>,
}

impl ArcSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn arcs(&self) -> &[(f64, f64)] {
        &self.arcs
    }

    /// Adds the arc from `start` running `width` radians counter-clockwise.
    pub fn add(&mut self, start: f64, width: f64) {
        if width <= 0.0 {
            return;
        }
        if width >= TAU {
            self.arcs = vec![(0.0, TAU)];
            return;
        }
        let a = start.rem_euclid(TAU);
        let b = a + width;
        if b > TAU {
            self.insert(a, TAU);
            self.insert(0.0, b - TAU);
        } else {
            self.insert(a, b);
        }
    }

    fn insert(&mut self, a: f64, b: f64) {
        self.arcs.push((a, b));
        self.arcs.sort_by(|x, y| x.0.total_cmp(&y.0));
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(self.arcs.len());
        for &(s, e) in &self.arcs {
            match merged.last_mut() {
                Some(last) if s <= last.1 => last.1 = last.1.max(e),
                _ => merged.push((s, e)),
            }
        }
        self.arcs = merged;
    }

    pub fn length(&self) -> f64 {
        self.arcs.iter().map(|(a, b)| b - a).sum()
    }

    pub fn fraction(&self) -> f64 {
        (self.length() / TAU).min(1.0)
    }

    pub fn contains(&self, theta: f64) -> bool {
        let t = theta.rem_euclid(TAU);
        self.arcs.iter().any(|&(a, b)| a <= t && t <= b)
    }

    /// Covered length inside the arc from `start` running `width` radians.
    pub fn covered(&self, start: f64, width: f64) -> f64 {
        let mut probe = ArcSet::new();
        probe.add(start, width);
        let mut total = 0.0;
        for &(a, b) in &probe.arcs {
            for &(c, d) in &self.arcs {
                total += (b.min(d) - a.max(c)).max(0.0);
            }
        }
        total
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PeelConfig {
    /// Arc under the tool (rad).
    pub tool_width: f64,
    /// World angle of the tool.
    pub tool_angle: f64,
    /// Contact stiffness of the skin (N/m).
    pub stiffness: f64,
    pub force_band: (f64, f64),
    /// Tool press displacement per unit action (m).
    pub press_step: f64,
    /// Stroke progress per unit action.
    pub stroke_step: f64,
    /// Per-episode spread of the skin surface relative to the nominal tool
    /// contact (m).
    pub surface_spread: f64,
    pub max_steps: usize,
    pub rotor: RotorConfig,
    pub apple: RandomizationRanges,
}

impl Default for PeelConfig {
    fn default() -> Self {
        let rotor = RotorConfig {
            horizon: 1_000_000,
            ..RotorConfig::default()
        };
        Self {
            tool_width: 1.2,
            tool_angle: FRAC_PI_2,
            stiffness: 1000.0,
            force_band: (1.0, 3.0),
            press_step: 0.001,
            stroke_step: 0.25,
            surface_spread: 0.0015,
            max_steps: 200,
            rotor,
            apple: RandomizationRanges::default(),
        }
    }
}

impl PeelConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [self.tool_width, self.stiffness, self.press_step, self.stroke_step];
        if pos.iter().any(|v| !(v.is_finite() && *v > 0.0)) || self.tool_width >= TAU || self.max_steps == 0 {
            return contract("peel widths, gains and step budget must be positive");
        }
        if !(0.0 < self.force_band.0 && self.force_band.0 < self.force_band.1) {
            return contract("peel force band must satisfy 0 < min < max");
        }
        self.rotor.validate()?;
        self.apple.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeelState {
    pub rotor: RotorState,
    pub peeled: ArcSet,
    /// Commanded tool press beyond the nominal contact (m).
    pub press: f64,
    /// Where the skin actually is relative to the nominal contact (m).
    pub surface: f64,
    pub tool_force: f64,
    pub stroke: f64,
    pub stroke_ok: bool,
    pub strokes: usize,
    pub dropped: bool,
    pub steps: usize,
}

#[derive(Clone, Debug)]
pub struct PeelEnv {
    pub cfg: PeelConfig,
    pub rotor: RotorEnv,
    pub state: PeelState,
    pub history: ObsHistory,
    force_map: Vec<f64>,
    tactile_map: Vec<f64>,
}

impl PeelEnv {
    pub fn new(cfg: PeelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let surface = rng.gen_range(-cfg.surface_spread..=cfg.surface_spread);
        let mut last = None;
        for _ in 0..20 {
            let domain = randomize_domain(&mut rng, &cfg.apple)?;
            let rotor = RotorEnv::new(cfg.rotor, domain)?;
            match rotor.reset(&mut rng, 1.0) {
                Ok(rs) => {
                    let history = ObsHistory::new(rotor.frame(&rs));
                    return Ok(Self {
                        state: PeelState {
                            rotor: rs,
                            peeled: ArcSet::new(),
                            press: 0.0,
                            surface,
                            tool_force: 0.0,
                            stroke: 0.0,
                            stroke_ok: false,
                            strokes: 0,
                            dropped: false,
                            steps: 0,
                        },
                        rotor,
                        history,
                        force_map: mixing(FORCE_DIM, 1, 3),
                        tactile_map: mixing(TACTILE_DIM, 7, 4),
                        cfg,
                    });
                }
                Err(e @ crate::Error::InitFailure { .. }) => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(last.expect("at least one draw"))
    }

    /// Start of the apple-frame arc currently under the tool.
    pub fn window_start(&self) -> f64 {
        self.cfg.tool_angle - self.state.rotor.phi - 0.5 * self.cfg.tool_width
    }

    pub fn window_bins(&self) -> [f64; BINS] {
        let w = self.cfg.tool_width / BINS as f64;
        let start = self.window_start();
        std::array::from_fn(|k| self.state.peeled.covered(start + k as f64 * w, w) / w)
    }

    pub fn unpeeled_in_window(&self) -> f64 {
        self.cfg.tool_width - self.state.peeled.covered(self.window_start(), self.cfg.tool_width)
    }

    pub fn fraction(&self) -> f64 {
        self.state.peeled.fraction()
    }

    fn in_band(&self) -> bool {
        let (lo, hi) = self.cfg.force_band;
        (lo..=hi).contains(&self.state.tool_force)
    }

    /// Demonstrator: press into the band, stroke, then hand control to the
    /// rotation skill until fresh skin is under the tool. Returns the action
    /// with the trigger set during rotation; the hand part is zero and must be
    /// filled by the rotation controller when the trigger is on.
    pub fn expert_action(&self) -> [f64; ACTION_DIM] {
        let s = &self.state;
        let c = &self.cfg;
        let mut a = [0.0; ACTION_DIM];
        let target = s.surface + 0.5 * (c.force_band.0 + c.force_band.1) / c.stiffness;
        a[0] = ((target - s.press) / c.press_step).clamp(-1.0, 1.0);
        let remaining = TAU - s.peeled.length();
        let fresh = self.unpeeled_in_window();
        let rotating = s.strokes > 0 && s.stroke == 0.0 && fresh < (0.75 * c.tool_width).min(remaining) - 1e-9;
        if rotating {
            a[ACTION_DIM - 1] = 1.0;
        } else if self.in_band() || s.stroke > 0.0 {
            a[1] = 1.0;
        }
        a
    }

    fn tactile_reading(&self) -> Vec<f64> {
        let r = &self.state.rotor;
        let mut x = Vec::with_capacity(7);
        x.extend(r.normal.iter().map(|n| n / 2.0));
        x.extend(r.tangential.iter().copied());
        x.push(r.support_ratio.min(5.0) - 1.0);
        debug_assert_eq!(x.len(), 2 * FINGERS + 1);
        mix(&self.tactile_map, &x)
    }
}

impl TaskEnv for PeelEnv {
    fn task(&self) -> Task {
        Task::Peel
    }

    fn observe(&self) -> Observation {
        let s = &self.state;
        let mut vision = Vec::with_capacity(VISION_DIM);
        vision.push(s.stroke);
        vision.push((s.strokes as f64).min(10.0) / 10.0);
        vision.extend(self.window_bins());
        vision.push(self.fraction());
        let frame = self.rotor.frame(&s.rotor);
        let mut proprio = frame[..9].to_vec();
        proprio.push(s.press / self.cfg.press_step);
        Observation {
            vision,
            instruction: Task::Peel.instruction(),
            proprio,
            force: mix(&self.force_map, &[s.tool_force / 2.0]),
            tactile: self.tactile_reading(),
        }
    }

    fn step(&mut self, action: &[f64]) -> Result<()> {
        if action.len() != ACTION_DIM {
            return contract(format!("peel action has {} entries, expected {ACTION_DIM}", action.len()));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(crate::Error::NonFinite(format!("peel action at step {}", self.state.steps)));
        }
        let c = self.cfg.clone();
        {
            let s = &mut self.state;
            s.press = (s.press + action[0].clamp(-1.0, 1.0) * c.press_step).clamp(-0.004, 0.006);
            s.tool_force = c.stiffness * (s.press - s.surface).max(0.0);
        }
        let ok = self.in_band();
        let s = &mut self.state;
        let next = (s.stroke + action[1].clamp(-1.0, 1.0) * c.stroke_step).clamp(0.0, 1.0);
        if next > 0.0 {
            s.stroke_ok = if s.stroke == 0.0 { ok } else { s.stroke_ok && ok };
        }
        s.stroke = next;
        if s.stroke >= 1.0 {
            if s.stroke_ok {
                let start = c.tool_angle - s.rotor.phi - 0.5 * c.tool_width;
                s.peeled.add(start, c.tool_width);
                s.strokes += 1;
            }
            s.stroke = 0.0;
            s.stroke_ok = false;
        }
        let hand = &action[2..2 + JOINTS];
        let out = self.rotor.step(&mut self.state.rotor, hand)?;
        self.history.push(self.rotor.frame(&self.state.rotor));
        let s = &mut self.state;
        s.dropped = out.dropped;
        s.steps += 1;
        Ok(())
    }

    fn done(&self) -> bool {
        let s = &self.state;
        s.dropped || s.steps >= self.cfg.max_steps || self.fraction() >= 1.0
    }

    fn outcome(&self) -> Outcome {
        let f = self.fraction();
        Outcome {
            success: f >= 1.0,
            peeled: Some(f),
        }
    }

    fn steps(&self) -> usize {
        self.state.steps
    }

    fn max_steps(&self) -> usize {
        self.cfg.max_steps
    }

    fn copilot_history(&self) -> Option<&ObsHistory> {
        Some(&self.history)
    }
}
