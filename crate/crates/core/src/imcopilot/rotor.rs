//! Planar in-hand rotation surrogate: a disk held by three fingers at 120°
//! spacing. Each finger has a flexion joint that moves its tip radially and a
//! roller joint whose rim drives the disk tangentially.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::domain::PrivilegedInfo;
use crate::error::{contract, Error, Result};

pub const FINGERS: usize = 3;
pub const JOINTS: usize = 2 * FINGERS;
pub const GRAVITY: f64 = 9.81;

/// Reward weights and clip.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardWeights {
    pub rot: f64,
    pub vel: f64,
    pub work: f64,
    pub torq: f64,
    pub diff: f64,
    pub omega_cap: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            rot: 1.0,
            vel: 0.3,
            work: 0.01,
            torq: 0.001,
            diff: 0.1,
            omega_cap: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RotorConfig {
    /// Control steps per episode.
    pub horizon: usize,
    pub control_dt: f64,
    pub substeps: usize,
    /// Joint offset per unit action (rad).
    pub lambda_scale: f64,
    pub drop_steps: usize,
    /// Nominal disk radius (m).
    pub radius: f64,
    /// Tip distance from the palm center at zero flexion (m).
    pub open_radius: f64,
    /// Radial tip travel per radian of flexion (m/rad).
    pub flex_lever: f64,
    pub flex_limits: (f64, f64),
    pub roller_radius: f64,
    pub k_normal: f64,
    pub k_tangent: f64,
    /// Viscous damping on the disk center (N s/m).
    pub c_linear: f64,
    /// Angular damping rate (1/s).
    pub c_damp: f64,
    /// Palm drag torque as a multiple of `m g R`.
    pub palm_drag: f64,
    pub palm_omega: f64,
    /// Finger joint inertia (kg m^2); PD gains act as accelerations.
    pub joint_inertia: f64,
    /// Grasp squeeze sampled at reset (m of penetration).
    pub reset_squeeze: (f64, f64),
    pub reset_offset: f64,
    pub settle_steps: usize,
    pub max_reset_attempts: usize,
    pub target_angle: f64,
    pub reward: RewardWeights,
}

impl Default for RotorConfig {
    fn default() -> Self {
        Self {
            horizon: 80,
            control_dt: 0.05,
            substeps: 200,
            lambda_scale: 0.1,
            drop_steps: 10,
            radius: 0.04,
            open_radius: 0.06,
            flex_lever: 0.05,
            flex_limits: (0.0, 1.2),
            roller_radius: 0.04,
            k_normal: 2000.0,
            k_tangent: 100.0,
            c_linear: 8.0,
            c_damp: 0.5,
            palm_drag: 8.0,
            palm_omega: 2.0,
            joint_inertia: 1e-3,
            reset_squeeze: (0.0002, 0.0012),
            reset_offset: 0.002,
            settle_steps: 20,
            max_reset_attempts: 100,
            target_angle: FRAC_PI_2,
            reward: RewardWeights::default(),
        }
    }
}

impl RotorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.control_dt,
            self.lambda_scale,
            self.radius,
            self.open_radius,
            self.flex_lever,
            self.roller_radius,
            self.k_normal,
            self.k_tangent,
            self.joint_inertia,
            self.palm_omega,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return contract("rotor lengths, gains and time steps must be positive");
        }
        if self.horizon == 0 || self.substeps == 0 || self.drop_steps == 0 || self.max_reset_attempts == 0 {
            return contract("rotor step counts must be positive");
        }
        if self.flex_limits.0 > self.flex_limits.1 || self.reset_squeeze.0 > self.reset_squeeze.1 {
            return contract("inverted rotor range");
        }
        Ok(())
    }

    /// Flexion at which a fingertip touches a disk of radius `r` centered in
    /// the palm.
    pub fn touch_flex(&self, r: f64) -> f64 {
        (self.open_radius - r) / self.flex_lever
    }

    /// Default pose: rollers at zero, tips resting on the nominal disk.
    pub fn default_pose(&self) -> [f64; JOINTS] {
        let f = self.touch_flex(self.radius);
        [f, f, f, 0.0, 0.0, 0.0]
    }

    pub fn finger_dir(j: usize) -> [f64; 2] {
        let a = FRAC_PI_2 + j as f64 * 2.0 * PI / 3.0;
        [a.cos(), a.sin()]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotorState {
    /// `[flex_0, flex_1, flex_2, roll_0, roll_1, roll_2]`.
    pub q: [f64; JOINTS],
    pub qd: [f64; JOINTS],
    pub target: [f64; JOINTS],
    pub phi: f64,
    pub omega: f64,
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub normal: [f64; FINGERS],
    pub tangential: [f64; FINGERS],
    pub drop_counter: usize,
    pub dropped: bool,
    /// Mean joint torque over the last control step.
    pub torque: [f64; JOINTS],
    /// Joint displacement over the last control step.
    pub dq: [f64; JOINTS],
    /// Friction left for carrying the weight, over the weight, at the end of
    /// the last step; below one the step counts towards a drop.
    pub support_ratio: f64,
    pub phi_start: f64,
    pub steps: usize,
    pub target_dir: f64,
}

impl RotorState {
    /// Signed rotation towards the target since reset.
    pub fn progress(&self) -> f64 {
        self.target_dir * (self.phi - self.phi_start)
    }

    pub fn rotated(&self, cfg: &RotorConfig) -> bool {
        self.progress() >= cfg.target_angle
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardTerms {
    pub rot: f64,
    pub vel: f64,
    pub work: f64,
    pub torq: f64,
    pub diff: f64,
}

impl RewardTerms {
    pub fn total(&self, w: &RewardWeights) -> f64 {
        w.rot * self.rot + w.vel * self.vel + w.work * self.work + w.torq * self.torq + w.diff * self.diff
    }
}

pub fn compute_reward(cfg: &RotorConfig, state: &RotorState, target_dir: f64) -> (f64, RewardTerms) {
    let w = &cfg.reward;
    let default = cfg.default_pose();
    let terms = RewardTerms {
        rot: (target_dir * state.omega).clamp(-w.omega_cap, w.omega_cap),
        vel: -(state.vel[0].powi(2) + state.vel[1].powi(2)),
        work: -(0..JOINTS).map(|j| (state.torque[j] * state.dq[j]).abs()).sum::<f64>(),
        torq: -state.torque.iter().map(|t| t * t).sum::<f64>(),
        // Rollers turn continuously, so only flexion is held near default.
        diff: -(0..FINGERS).map(|j| (state.q[j] - default[j]).powi(2)).sum::<f64>(),
    };
    (terms.total(w), terms)
}

pub struct StepOutcome {
    pub reward: f64,
    pub terms: RewardTerms,
    pub dropped: bool,
    pub timeout: bool,
}

impl StepOutcome {
    pub fn done(&self) -> bool {
        self.dropped || self.timeout
    }
}

/// `q + lambda * dtheta`, clamped per joint to `limits` where given.
pub fn integrate_targets(prev: &[f64], dtheta: &[f64], lambda: f64, limits: &[Option<(f64, f64)>]) -> Vec<f64> {
    prev.iter()
        .zip(dtheta)
        .enumerate()
        .map(|(j, (&q, &d))| {
            let v = q + lambda * d;
            match limits.get(j).copied().flatten() {
                Some((lo, hi)) => v.clamp(lo, hi),
                None => v,
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct RotorEnv {
    pub cfg: RotorConfig,
    pub domain: PrivilegedInfo,
}

impl RotorEnv {
    pub fn new(cfg: RotorConfig, domain: PrivilegedInfo) -> Result<Self> {
        cfg.validate()?;
        if !(domain.friction > 0.0 && domain.inertia_ratio > 0.0 && domain.mass > 0.0 && domain.scale > 0.0) {
            return contract("friction, inertia, mass and scale must be positive");
        }
        Ok(Self { cfg, domain })
    }

    pub fn object_radius(&self) -> f64 {
        self.cfg.radius * self.domain.scale
    }

    pub fn weight(&self) -> f64 {
        self.domain.mass * GRAVITY * self.domain.gravity_scale
    }

    pub fn inertia(&self) -> f64 {
        self.domain.inertia_ratio * self.domain.mass * self.object_radius().powi(2)
    }

    pub fn joint_limits(&self) -> [Option<(f64, f64)>; JOINTS] {
        let f = Some(self.cfg.flex_limits);
        [f, f, f, None, None, None]
    }

    /// State with the tips pushed `squeeze[j]` meters into a disk at `pos`.
    pub fn grasp_state(&self, squeeze: [f64; FINGERS], pos: [f64; 2], phi: f64, target_dir: f64) -> RotorState {
        let r = self.object_radius();
        let mut q = [0.0; JOINTS];
        for j in 0..FINGERS {
            let u = RotorConfig::finger_dir(j);
            let along = pos[0] * u[0] + pos[1] * u[1];
            let tip = along + (r * r - (pos[0] * u[1] - pos[1] * u[0]).powi(2)).max(0.0).sqrt() - squeeze[j];
            q[j] = ((self.cfg.open_radius - tip) / self.cfg.flex_lever).clamp(self.cfg.flex_limits.0, self.cfg.flex_limits.1);
        }
        let mut s = RotorState {
            q,
            qd: [0.0; JOINTS],
            target: q,
            phi,
            omega: 0.0,
            pos,
            vel: [0.0; 2],
            normal: [0.0; FINGERS],
            tangential: [0.0; FINGERS],
            drop_counter: 0,
            dropped: false,
            torque: [0.0; JOINTS],
            dq: [0.0; JOINTS],
            support_ratio: 0.0,
            phi_start: phi,
            steps: 0,
            target_dir,
        };
        self.contacts(&mut s);
        s.support_ratio = self.support(&s) / self.weight();
        s
    }

    /// Samples a grasp and keeps it only if a zero-action settling rollout
    /// ends with all three contacts closed and no drop pending.
    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R, target_dir: f64) -> Result<RotorState> {
        let c = &self.cfg;
        for _ in 0..c.max_reset_attempts {
            let squeeze = [(); FINGERS].map(|_| sample(rng, c.reset_squeeze));
            let pos = [sample(rng, (-c.reset_offset, c.reset_offset)), sample(rng, (-c.reset_offset, c.reset_offset))];
            let phi = rng.gen_range(-PI..PI);
            let mut s = self.grasp_state(squeeze, pos, phi, target_dir);
            if let Some(settled) = self.settle(&mut s)? {
                return Ok(settled);
            }
        }
        Err(Error::InitFailure { attempts: c.max_reset_attempts })
    }

    /// Runs the settling rollout; `None` if the grasp is rejected.
    pub fn settle(&self, s: &mut RotorState) -> Result<Option<RotorState>> {
        for _ in 0..self.cfg.settle_steps {
            self.step(s, &[0.0; JOINTS])?;
            if s.dropped {
                return Ok(None);
            }
        }
        if s.normal.iter().all(|&n| n > 0.0) && s.drop_counter == 0 {
            s.steps = 0;
            s.phi_start = s.phi;
            s.drop_counter = 0;
            Ok(Some(s.clone()))
        } else {
            Ok(None)
        }
    }

    fn contacts(&self, s: &mut RotorState) {
        let r = self.object_radius();
        let mu = self.domain.friction;
        for j in 0..FINGERS {
            let (n, _, t) = self.contact_frame(s, j);
            let pen = r - n;
            if pen <= 0.0 {
                s.normal[j] = 0.0;
                s.tangential[j] = 0.0;
                continue;
            }
            let nf = self.cfg.k_normal * pen;
            let v_tip = self.cfg.roller_radius * s.qd[FINGERS + j];
            let v_surf = s.vel[0] * t[0] + s.vel[1] * t[1] + s.omega * r;
            let limit = mu * nf;
            s.normal[j] = nf;
            s.tangential[j] = (self.cfg.k_tangent * (v_tip - v_surf)).clamp(-limit, limit);
        }
    }

    /// Distance from tip to disk center, outward normal (tip to center) and
    /// the tangent along which positive roller speed pushes the rim.
    fn contact_frame(&self, s: &RotorState, j: usize) -> (f64, [f64; 2], [f64; 2]) {
        let u = RotorConfig::finger_dir(j);
        let tip_r = self.cfg.open_radius - self.cfg.flex_lever * s.q[j];
        let d = [s.pos[0] - tip_r * u[0], s.pos[1] - tip_r * u[1]];
        let dist = (d[0] * d[0] + d[1] * d[1]).sqrt().max(1e-12);
        let n = [d[0] / dist, d[1] / dist];
        (dist, n, [n[1], -n[0]])
    }

    /// Implicit update of the spin rate. Contacts that are inside the
    /// friction cone act as a stiff viscous coupling, so they and the palm
    /// drag are linearized around the current rate; saturated contacts keep
    /// their explicit force. Tangential forces are then recomputed at the new
    /// rate and clamped to the cone.
    fn spin(&self, s: &mut RotorState, dt: f64, drag: f64, inertia: f64) {
        let c = &self.cfg;
        let r = self.object_radius();
        let mu = self.domain.friction;
        let mut stiff = c.c_damp;
        let mut drive = 0.0;
        for j in 0..FINGERS {
            if s.normal[j] <= 0.0 {
                continue;
            }
            if s.tangential[j].abs() < mu * s.normal[j] {
                let (_, _, t) = self.contact_frame(s, j);
                let v_tip = c.roller_radius * s.qd[FINGERS + j];
                let v_lin = s.vel[0] * t[0] + s.vel[1] * t[1];
                stiff += c.k_tangent * r * r / inertia;
                drive += c.k_tangent * (v_tip - v_lin) * r / inertia;
            } else {
                drive += s.tangential[j] * r / inertia;
            }
        }
        let x = s.omega / c.palm_omega;
        let th = x.tanh();
        let slope = drag * (1.0 - th * th) / (c.palm_omega * inertia);
        drive -= drag * th / inertia - slope * s.omega;
        stiff += slope;
        s.omega = (s.omega + dt * drive) / (1.0 + dt * stiff);
        s.phi += s.omega * dt;
        for j in 0..FINGERS {
            if s.normal[j] <= 0.0 {
                continue;
            }
            let (_, _, t) = self.contact_frame(s, j);
            let v_tip = c.roller_radius * s.qd[FINGERS + j];
            let v_surf = s.vel[0] * t[0] + s.vel[1] * t[1] + s.omega * r;
            let limit = mu * s.normal[j];
            s.tangential[j] = (c.k_tangent * (v_tip - v_surf)).clamp(-limit, limit);
        }
    }

    fn support(&self, s: &RotorState) -> f64 {
        let mu = self.domain.friction;
        (0..FINGERS)
            .map(|j| ((mu * s.normal[j]).powi(2) - s.tangential[j].powi(2)).max(0.0).sqrt())
            .sum()
    }

    /// Advances one control period with joint offsets `action`.
    pub fn step(&self, s: &mut RotorState, action: &[f64]) -> Result<StepOutcome> {
        if action.len() != JOINTS {
            return contract(format!("rotor action has {} entries, expected {JOINTS}", action.len()));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("rotor action".into()));
        }
        let c = &self.cfg;
        let a: Vec<f64> = action.iter().map(|a| a.clamp(-1.0, 1.0)).collect();
        let targets = integrate_targets(&s.target, &a, c.lambda_scale, &self.joint_limits());
        s.target.copy_from_slice(&targets);

        let dt = c.control_dt / c.substeps as f64;
        let (kp, kd) = (self.domain.kp, self.domain.kd);
        let (m, inertia, r) = (self.domain.mass, self.inertia(), self.object_radius());
        let drag = c.palm_drag * self.weight() * r;
        let q_before = s.q;
        let mut torque_sum = [0.0; JOINTS];
        for _ in 0..c.substeps {
            for j in 0..JOINTS {
                let acc = kp * (s.target[j] - s.q[j]) - kd * s.qd[j];
                torque_sum[j] += c.joint_inertia * acc;
                s.qd[j] += acc * dt;
                s.q[j] += s.qd[j] * dt;
                if j < FINGERS {
                    let (lo, hi) = c.flex_limits;
                    if s.q[j] < lo || s.q[j] > hi {
                        s.q[j] = s.q[j].clamp(lo, hi);
                        s.qd[j] = 0.0;
                    }
                }
            }
            self.contacts(s);
            self.spin(s, dt, drag, inertia);
            let mut force = [-c.c_linear * s.vel[0], -c.c_linear * s.vel[1]];
            for j in 0..FINGERS {
                let (_, n, t) = self.contact_frame(s, j);
                force[0] += s.normal[j] * n[0] + s.tangential[j] * t[0];
                force[1] += s.normal[j] * n[1] + s.tangential[j] * t[1];
            }
            // An off-center mass pulls the center outwards while spinning.
            let (sp, cp) = s.phi.sin_cos();
            let e = self.domain.com_offset;
            let w2 = s.omega * s.omega;
            force[0] += m * w2 * (cp * e[0] - sp * e[1]);
            force[1] += m * w2 * (sp * e[0] + cp * e[1]);
            for k in 0..2 {
                s.vel[k] += force[k] / m * dt;
                s.pos[k] += s.vel[k] * dt;
            }
        }
        for j in 0..JOINTS {
            s.torque[j] = torque_sum[j] / c.substeps as f64;
            s.dq[j] = s.q[j] - q_before[j];
        }
        let finite = s.q.iter().chain(&s.qd).chain(&s.pos).chain(&s.vel).all(|v| v.is_finite())
            && s.phi.is_finite()
            && s.omega.is_finite();
        if !finite {
            return Err(Error::NonFinite(format!("rotor dynamics at step {}", s.steps)));
        }
        s.support_ratio = self.support(s) / self.weight();
        if s.support_ratio < 1.0 {
            s.drop_counter += 1;
        } else {
            s.drop_counter = 0;
        }
        let escaped = (s.pos[0].powi(2) + s.pos[1].powi(2)).sqrt() > 0.5 * r;
        if s.drop_counter >= c.drop_steps || escaped {
            s.dropped = true;
        }
        s.steps += 1;
        let (reward, terms) = compute_reward(c, s, s.target_dir);
        Ok(StepOutcome {
            reward,
            terms,
            dropped: s.dropped,
            timeout: s.steps >= c.horizon,
        })
    }

    /// Privileged features: domain, object pose and velocities.
    pub fn privileged(&self, s: &RotorState) -> Vec<f64> {
        let mut e = self.domain.features().to_vec();
        e.extend([
            s.pos[0] / 0.002,
            s.pos[1] / 0.002,
            s.vel[0] / 0.02,
            s.vel[1] / 0.02,
            s.omega,
            s.progress() / self.cfg.target_angle,
            s.support_ratio.min(5.0) - 1.0,
        ]);
        e
    }

    /// One observation frame: flexion offsets, roller phases, contact forces
    /// and the target direction.
    pub fn frame(&self, s: &RotorState) -> Vec<f64> {
        let default = self.cfg.default_pose();
        let mut f = Vec::with_capacity(FRAME);
        for j in 0..FINGERS {
            f.push((s.q[j] - default[j]) * 5.0);
        }
        for j in 0..FINGERS {
            f.push(s.q[FINGERS + j].sin());
            f.push(s.q[FINGERS + j].cos());
        }
        f.extend(s.normal.iter().map(|n| n / 2.0));
        f.extend(s.tangential.iter().map(|t| t / 1.0));
        f.push(s.target_dir);
        f
    }
}

/// Width of one observation frame.
pub const FRAME: usize = 3 + 6 + 3 + 3 + 1;
/// Width of the privileged vector.
pub const PRIVILEGED: usize = 9 + 7;

fn sample<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// The last three observation frames, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct ObsHistory {
    frames: [Vec<f64>; 3],
}

impl ObsHistory {
    pub const LEN: usize = 3;

    pub fn new(first: Vec<f64>) -> Self {
        Self {
            frames: [first.clone(), first.clone(), first],
        }
    }

    pub fn push(&mut self, frame: Vec<f64>) {
        self.frames.rotate_left(1);
        self.frames[2] = frame;
    }

    pub fn frames(&self) -> &[Vec<f64>; 3] {
        &self.frames
    }

    pub fn flat(&self) -> Vec<f64> {
        self.frames.concat()
    }
}
