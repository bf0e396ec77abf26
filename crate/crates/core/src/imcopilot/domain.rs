use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Physical parameters hidden from the deployed policy and visible to the
/// teacher encoder.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivilegedInfo {
    /// Coulomb friction coefficient at the fingertips.
    pub friction: f64,
    /// Moment of inertia as a fraction of `mass * radius^2`.
    pub inertia_ratio: f64,
    pub mass: f64,
    pub com_offset: [f64; 2],
    /// Multiplier on the nominal object radius.
    pub scale: f64,
    pub kp: f64,
    pub kd: f64,
    pub gravity_scale: f64,
}

impl PrivilegedInfo {
    pub fn nominal() -> Self {
        Self {
            friction: 0.7,
            inertia_ratio: 0.5,
            mass: 0.1,
            com_offset: [0.0, 0.0],
            scale: 1.0,
            kp: 400.0,
            kd: 38.0,
            gravity_scale: 1.0,
        }
    }

    /// Fixed-width encoding, roughly unit scale per entry.
    pub fn features(&self) -> [f64; 9] {
        [
            (self.friction.ln() - 0.7f64.ln()) * 1.5,
            (self.inertia_ratio - 0.55) * 6.0,
            (self.mass.ln() - 0.1f64.ln()) * 1.5,
            self.com_offset[0] / 0.004,
            self.com_offset[1] / 0.004,
            (self.scale - 1.0) * 6.0,
            (self.kp - 400.0) / 100.0,
            (self.kd - 38.0) / 8.0,
            (self.gravity_scale - 1.0) * 8.0,
        ]
    }
}

/// Closed interval `[lo, hi]` for one randomized field.
pub type Range = (f64, f64);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomizationRanges {
    pub friction: Range,
    pub inertia_ratio: Range,
    pub mass: Range,
    /// Per-axis bound on the center-of-mass offset (meters).
    pub com_offset: Range,
    pub scale: Range,
    pub kp: Range,
    pub kd: Range,
    pub gravity_scale: Range,
}

impl Default for RandomizationRanges {
    fn default() -> Self {
        Self {
            friction: (0.3, 1.2),
            inertia_ratio: (0.4, 0.7),
            mass: (0.05, 0.2),
            com_offset: (-0.004, 0.004),
            scale: (0.85, 1.15),
            kp: (300.0, 500.0),
            kd: (30.0, 46.0),
            gravity_scale: (0.9, 1.1),
        }
    }
}

impl RandomizationRanges {
    /// Every range collapsed onto the nominal domain.
    pub fn nominal() -> Self {
        let n = PrivilegedInfo::nominal();
        Self {
            friction: (n.friction, n.friction),
            inertia_ratio: (n.inertia_ratio, n.inertia_ratio),
            mass: (n.mass, n.mass),
            com_offset: (0.0, 0.0),
            scale: (n.scale, n.scale),
            kp: (n.kp, n.kp),
            kd: (n.kd, n.kd),
            gravity_scale: (n.gravity_scale, n.gravity_scale),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("friction", self.friction),
            ("inertia_ratio", self.inertia_ratio),
            ("mass", self.mass),
            ("com_offset", self.com_offset),
            ("scale", self.scale),
            ("kp", self.kp),
            ("kd", self.kd),
            ("gravity_scale", self.gravity_scale),
        ];
        for (name, (lo, hi)) in named {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return contract(format!("range {name} = [{lo}, {hi}] is inverted or non-finite"));
            }
        }
        for (name, (lo, _)) in [
            ("friction", self.friction),
            ("mass", self.mass),
            ("inertia_ratio", self.inertia_ratio),
            ("scale", self.scale),
        ] {
            if lo <= 0.0 {
                return contract(format!("range {name} must be positive"));
            }
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): Range) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

fn log_uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): Range) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo.ln()..=hi.ln()).exp()
    }
}

/// Draws one domain: log-uniform friction and mass, uniform elsewhere.
pub fn randomize_domain<R: Rng + ?Sized>(rng: &mut R, ranges: &RandomizationRanges) -> Result<PrivilegedInfo> {
    ranges.validate()?;
    Ok(PrivilegedInfo {
        friction: log_uniform(rng, ranges.friction),
        inertia_ratio: uniform(rng, ranges.inertia_ratio),
        mass: log_uniform(rng, ranges.mass),
        com_offset: [uniform(rng, ranges.com_offset), uniform(rng, ranges.com_offset)],
        scale: uniform(rng, ranges.scale),
        kp: uniform(rng, ranges.kp),
        kd: uniform(rng, ranges.kd),
        gravity_scale: uniform(rng, ranges.gravity_scale),
    })
}
