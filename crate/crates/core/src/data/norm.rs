//! Per-dimension normalization statistics.

use serde::{Deserialize, Serialize};

use crate::backbone::Observation;
use crate::error::{contract, Result};
use crate::record::EpisodeRecord;

pub const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Moments {
    /// Population moments of the columns of `rows`. Each column is summed in
    /// sorted order, so the result does not depend on row order.
    pub fn of<'a>(rows: impl Iterator<Item = &'a [f64]> + Clone) -> Result<Self> {
        let width = match rows.clone().next() {
            Some(r) => r.len(),
            None => return contract("moments of zero rows"),
        };
        let mut mean = Vec::with_capacity(width);
        let mut std = Vec::with_capacity(width);
        for k in 0..width {
            let mut col: Vec<f64> = Vec::new();
            for r in rows.clone() {
                if r.len() != width {
                    return contract(format!("ragged column set: {} vs {width}", r.len()));
                }
                col.push(r[k]);
            }
            col.sort_by(f64::total_cmp);
            let n = col.len() as f64;
            let mu = col.iter().sum::<f64>() / n;
            let mut dev: Vec<f64> = col.iter().map(|x| (x - mu) * (x - mu)).collect();
            dev.sort_by(f64::total_cmp);
            mean.push(mu);
            std.push((dev.iter().sum::<f64>() / n).sqrt().max(STD_FLOOR));
        }
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().enumerate().map(|(i, v)| (v - self.mean[i % self.mean.len()]) / self.std[i % self.std.len()]).collect()
    }

    pub fn denormalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().enumerate().map(|(i, v)| v * self.std[i % self.std.len()] + self.mean[i % self.mean.len()]).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub action: Moments,
    pub proprio: Moments,
    pub force: Moments,
    pub tactile: Moments,
}

impl NormStats {
    pub fn normalize_obs(&self, o: &Observation) -> Observation {
        Observation {
            vision: o.vision.clone(),
            instruction: o.instruction,
            proprio: self.proprio.normalize(&o.proprio),
            force: self.force.normalize(&o.force),
            tactile: self.tactile.normalize(&o.tactile),
        }
    }
}

pub fn compute_norm_stats(records: &[EpisodeRecord]) -> Result<NormStats> {
    let rows = || records.iter().flat_map(|r| r.rows.iter());
    if rows().next().is_none() {
        return contract("normalization statistics of an empty dataset");
    }
    Ok(NormStats {
        action: Moments::of(rows().map(|r| r.action.as_slice()))?,
        proprio: Moments::of(rows().map(|r| r.proprio.as_slice()))?,
        force: Moments::of(rows().map(|r| r.force.as_slice()))?,
        tactile: Moments::of(rows().map(|r| r.tactile.as_slice()))?,
    })
}
