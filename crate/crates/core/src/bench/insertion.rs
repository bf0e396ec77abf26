//! Planar peg insertion. The hole sits at a hidden lateral offset; vision
//! sees it through per-episode noise larger than the tolerance, and the
//! chamfer around the hole tilts the contact normal towards the hole centre,
//! so only the contact force tells how far off the peg is.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mix, mixing, Task, TaskEnv, FORCE_DIM, TACTILE_DIM};
use crate::backbone::{ModelDims, Observation};
use crate::error::{contract, Result};
use crate::flow::ActionLayout;
use crate::record::Outcome;

pub const VISION_DIM: usize = 4;
pub const PROPRIO_DIM: usize = 3;
pub const ACTION_DIM: usize = 4;
/// Vision and proprioception report positions in these units.
const UNIT: f64 = 0.01;

pub fn dims() -> ModelDims {
    ModelDims {
        d_v: VISION_DIM,
        d_s: PROPRIO_DIM,
        d_f: FORCE_DIM,
        d_g: TACTILE_DIM,
        instructions: Task::ALL.len(),
        layout: ActionLayout::contiguous(2, 1, 1).expect("static layout"),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InsertionConfig {
    /// Lateral success tolerance (m).
    pub tolerance: f64,
    /// Std of the per-episode error of the visual hole estimate (m).
    pub vision_noise: f64,
    pub offset_range: f64,
    pub start_range: f64,
    pub start_height: f64,
    pub chamfer_radius: f64,
    pub chamfer_depth: f64,
    pub hole_depth: f64,
    /// Contact stiffness (N/m).
    pub stiffness: f64,
    /// Largest commanded displacement per step (m).
    pub max_step: f64,
    /// Force the demonstrator presses with (N).
    pub press_force: f64,
    /// Pressing force beyond which the grip slips and friction jams
    /// lateral motion (N).
    pub slip_force: f64,
    /// Deepest command below the surface the arm will follow (m).
    pub max_press: f64,
    /// Shear the skin holds before taxels register it (N).
    pub shear_deadband: f64,
    /// Vision resolves height only to this quantum (m).
    pub height_quantum: f64,
    pub max_steps: usize,
}

impl Default for InsertionConfig {
    fn default() -> Self {
        Self {
            tolerance: 0.002,
            vision_noise: 0.006,
            offset_range: 0.015,
            start_range: 0.02,
            start_height: 0.025,
            chamfer_radius: 0.02,
            chamfer_depth: 0.003,
            hole_depth: 0.01,
            stiffness: 2000.0,
            max_step: 0.004,
            press_force: 4.0,
            slip_force: 16.0,
            max_press: 0.012,
            shear_deadband: 0.25,
            height_quantum: 0.01,
            max_steps: 40,
        }
    }
}

impl InsertionConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            self.tolerance,
            self.chamfer_radius,
            self.chamfer_depth,
            self.hole_depth,
            self.stiffness,
            self.max_step,
            self.press_force,
            self.slip_force,
            self.max_press,
            self.height_quantum,
        ];
        if pos.iter().any(|v| !(v.is_finite() && *v > 0.0)) || self.vision_noise < 0.0 || self.max_steps == 0 {
            return contract("insertion lengths, gains and step budget must be positive");
        }
        if self.press_force >= self.slip_force || self.shear_deadband < 0.0 {
            return contract("press force must stay below the slip force");
        }
        if self.chamfer_radius <= self.tolerance {
            return contract("chamfer must be wider than the hole tolerance");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InsertionState {
    pub peg: [f64; 2],
    pub command: [f64; 2],
    pub hole_offset: f64,
    /// Visual estimate of the hole centre.
    pub hole_seen: f64,
    pub contact: bool,
    pub force: [f64; 2],
    /// Instantaneous grip slip, zero below the slip force.
    pub slip: f64,
    pub grip: f64,
    pub touched: bool,
    pub success: bool,
    pub lost: bool,
    pub steps: usize,
}

#[derive(Clone, Debug)]
pub struct InsertionEnv {
    pub cfg: InsertionConfig,
    pub state: InsertionState,
    force_map: Vec<f64>,
    tactile_map: Vec<f64>,
}

impl InsertionEnv {
    pub fn new(cfg: InsertionConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hole = rng.gen_range(-cfg.offset_range..=cfg.offset_range);
        let noise = cfg.vision_noise * rng.sample::<f64, _>(rand_distr::StandardNormal);
        let x0 = rng.gen_range(-cfg.start_range..=cfg.start_range);
        let start = [x0, cfg.start_height];
        let mut env = Self {
            state: InsertionState {
                peg: start,
                command: start,
                hole_offset: hole,
                hole_seen: hole + noise,
                contact: false,
                force: [0.0; 2],
                slip: 0.0,
                grip: 1.0,
                touched: false,
                success: false,
                lost: false,
                steps: 0,
            },
            cfg,
            force_map: mixing(FORCE_DIM, 2, 1),
            tactile_map: mixing(TACTILE_DIM, 3, 2),
        };
        env.resolve();
        Ok(env)
    }

    /// Height of the surface at lateral position `x` and its slope.
    pub fn surface(&self, x: f64) -> (f64, f64) {
        let c = &self.cfg;
        let u = x - self.state.hole_offset;
        if u.abs() <= c.tolerance {
            (-c.hole_depth - 0.005, 0.0)
        } else if u.abs() < c.chamfer_radius {
            let r2 = c.chamfer_radius * c.chamfer_radius;
            (-c.chamfer_depth * (1.0 - u * u / r2), 2.0 * c.chamfer_depth * u / r2)
        } else {
            (0.0, 0.0)
        }
    }

    fn rim(&self) -> f64 {
        self.surface(self.state.hole_offset + self.cfg.tolerance * 1.000001).0
    }

    /// Places the peg given the command: blocked by the surface, held inside
    /// the hole walls once below the rim.
    fn resolve(&mut self) {
        let c = self.cfg.clone();
        let s = &self.state;
        let mut x = s.command[0];
        let inside = (s.peg[0] - s.hole_offset).abs() <= c.tolerance && s.peg[1] < self.rim();
        if inside {
            x = x.clamp(s.hole_offset - c.tolerance, s.hole_offset + c.tolerance);
        }
        let (floor, slope) = self.surface(x);
        let z = s.command[1].max(floor);
        let pen = floor - s.command[1];
        let st = &mut self.state;
        st.peg = [x, z];
        if pen > 0.0 {
            let n = (1.0 + slope * slope).sqrt();
            let f = c.stiffness * pen;
            st.force = [-slope * f / n, f / n];
            st.contact = true;
            st.touched = true;
        } else {
            st.force = [0.0; 2];
            st.contact = false;
        }
        if z <= -c.hole_depth {
            st.success = true;
        }
    }

    pub fn force_reading(&self) -> Vec<f64> {
        mix(&self.force_map, &[self.state.force[0] / 0.3, self.state.force[1] / 4.0])
    }

    /// Taxel responses to saturated shear, saturated pressure and slip.
    pub fn tactile_reading(&self) -> Vec<f64> {
        let s = &self.state;
        let held = (s.force[0].abs() - self.cfg.shear_deadband).max(0.0);
        let shear = s.force[0].signum() * (held / 0.05).tanh();
        let press = (s.force[1] / 2.0).tanh();
        mix(&self.tactile_map, &[shear, press, s.slip])
    }

    /// Demonstrator with privileged access to the true hole: approaches the
    /// visual estimate, presses, then corrects towards the true hole.
    pub fn expert_action(&self) -> [f64; ACTION_DIM] {
        let s = &self.state;
        self.guided(s.hole_offset - s.peg[0])
    }

    /// Reads the hole direction and distance from the contact normal.
    pub fn force_aware_action(&self) -> [f64; ACTION_DIM] {
        let s = &self.state;
        let c = &self.cfg;
        let slope = if s.contact && s.force[1] > 0.0 { -s.force[0] / s.force[1] } else { 0.0 };
        let u = slope * c.chamfer_radius.powi(2) / (2.0 * c.chamfer_depth);
        self.guided(-u)
    }

    /// Trusts the visual estimate and never corrects.
    pub fn vision_only_action(&self) -> [f64; ACTION_DIM] {
        self.guided(0.0)
    }

    fn guided(&self, correction: f64) -> [f64; ACTION_DIM] {
        let s = &self.state;
        let c = &self.cfg;
        let step = |d: f64| (d / c.max_step).clamp(-1.0, 1.0);
        let hover = 0.004;
        let inside = (s.peg[0] - s.hole_offset).abs() <= c.tolerance && s.peg[1] < self.rim();
        let (dx, dz) = if inside {
            (0.0, -1.0)
        } else if !s.touched {
            let dx = step(s.hole_seen - s.peg[0]);
            let aligned = (s.hole_seen - s.peg[0]).abs() < 0.001;
            let dz = if aligned { -1.0 } else { step(hover - s.command[1]) };
            (dx, dz)
        } else {
            let (floor, _) = self.surface(s.peg[0]);
            let target = floor - c.press_force / c.stiffness;
            (step(0.7 * correction), step(target - s.command[1]))
        };
        [dx, dz, 1.0, 0.0]
    }
}

impl TaskEnv for InsertionEnv {
    fn task(&self) -> Task {
        Task::Insertion
    }

    fn observe(&self) -> Observation {
        let s = &self.state;
        let q = self.cfg.height_quantum;
        Observation {
            vision: vec![
                s.peg[0] / UNIT,
                (s.peg[1] / q).round() * q / UNIT,
                s.hole_seen / UNIT,
                (s.hole_seen - s.peg[0]) / UNIT,
            ],
            instruction: Task::Insertion.instruction(),
            proprio: vec![s.command[0] / UNIT, s.command[1] / UNIT, s.grip],
            force: self.force_reading(),
            tactile: self.tactile_reading(),
        }
    }

    fn step(&mut self, action: &[f64]) -> Result<()> {
        if action.len() != ACTION_DIM {
            return contract(format!("insertion action has {} entries, expected {ACTION_DIM}", action.len()));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(crate::Error::NonFinite(format!("insertion action at step {}", self.state.steps)));
        }
        let c = &self.cfg;
        let jammed = self.state.force[1] > c.slip_force;
        let (floor, _) = self.surface(self.state.peg[0]);
        let s = &mut self.state;
        if !jammed {
            s.command[0] = (s.command[0] + action[0].clamp(-1.0, 1.0) * c.max_step).clamp(-0.05, 0.05);
        }
        s.command[1] = (s.command[1] + action[1].clamp(-1.0, 1.0) * c.max_step).clamp(floor - c.max_press, 0.05);
        s.grip = action[2].clamp(0.0, 1.0);
        s.steps += 1;
        self.resolve();
        let c = &self.cfg;
        let s = &mut self.state;
        s.slip = (s.force[1] - c.slip_force).max(0.0) / c.slip_force;
        if s.grip < 0.5 {
            s.lost = true;
            s.success = false;
        }
        Ok(())
    }

    fn done(&self) -> bool {
        let s = &self.state;
        s.success || s.lost || s.steps >= self.cfg.max_steps
    }

    fn outcome(&self) -> Outcome {
        Outcome {
            success: self.state.success,
            peeled: None,
        }
    }

    fn steps(&self) -> usize {
        self.state.steps
    }

    fn max_steps(&self) -> usize {
        self.cfg.max_steps
    }
}
