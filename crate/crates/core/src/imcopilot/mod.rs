pub mod domain;
pub mod policy;
pub mod ppo;
pub mod rotor;

pub use domain::{randomize_domain, PrivilegedInfo, RandomizationRanges};
pub use policy::{Copilot, CopilotNets, LatentSource, NetConfig};
pub use ppo::{
    distill_student, evaluate_rotation, gae, ppo_train, scripted_rotation, Controller, CurveRow, DistillConfig,
    DistillReport, PpoConfig, RotationStats,
};
pub use rotor::{compute_reward, ObsHistory, RewardTerms, RewardWeights, RotorConfig, RotorEnv, RotorState};
