//! Clipped-surrogate PPO for the teacher and single-pass latent distillation
//! for the student.

use dexmode_autodiff::{AdamWConfig, OptimizerState, Session, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::domain::{randomize_domain, RandomizationRanges};
use super::policy::{Copilot, LatentSource, NetConfig, OBS};
use super::rotor::{ObsHistory, RewardTerms, RotorConfig, RotorEnv, RotorState, JOINTS, PRIVILEGED};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub iterations: usize,
    pub envs: usize,
    /// Steps collected per environment per iteration.
    pub rollout: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    pub net: NetConfig,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            envs: 16,
            rollout: 80,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            epochs: 4,
            minibatch: 256,
            lr: 3e-4,
            value_coef: 0.5,
            entropy_coef: 0.0,
            max_grad_norm: 1.0,
            net: NetConfig::default(),
        }
    }
}

/// Generalized advantage estimation over one trajectory segment. `terminal[i]`
/// marks a true end after step `i` (no bootstrap); `cut[i]` marks a segment
/// boundary that bootstraps from `next_value[i]`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    terminal: &[bool],
    cut: &[bool],
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for i in (0..n).rev() {
        let boot = if terminal[i] { 0.0 } else { next_values[i] };
        let delta = rewards[i] + gamma * boot - values[i];
        if terminal[i] || cut[i] {
            acc = 0.0;
        }
        acc = delta + gamma * lambda * acc;
        adv[i] = acc;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// `min(r A, clip(r, 1 - eps, 1 + eps) A)`.
pub fn clipped_objective(ratio: f64, adv: f64, clip: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - clip, 1.0 + clip) * adv)
}

/// Whether the unclipped branch is the active one (gradient flows through the
/// ratio).
pub fn surrogate_active(ratio: f64, adv: f64, clip: f64) -> bool {
    !((adv > 0.0 && ratio > 1.0 + clip) || (adv < 0.0 && ratio < 1.0 - clip))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub iteration: usize,
    pub mean_return: f64,
    pub episodes: usize,
    pub success_rate: f64,
    pub rot: f64,
    pub vel: f64,
    pub work: f64,
    pub torq: f64,
    pub diff: f64,
}

impl CurveRow {
    pub const HEADER: &'static str = "iteration,mean_return,episodes,success_rate,rot,vel,work,torq,diff";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.iteration, self.mean_return, self.episodes, self.success_rate, self.rot, self.vel, self.work, self.torq, self.diff
        )
    }
}

struct Slot {
    env: RotorEnv,
    state: RotorState,
    hist: ObsHistory,
    ep_return: f64,
}

/// Draws a domain and a settled reset. A domain whose grasp never settles is
/// physically infeasible (too slippery for its weight) and is redrawn.
fn new_slot<R: Rng + ?Sized>(rng: &mut R, cfg: &RotorConfig, ranges: &RandomizationRanges) -> Result<Slot> {
    let mut last = None;
    for _ in 0..DOMAIN_DRAWS {
        let domain = randomize_domain(rng, ranges)?;
        let env = RotorEnv::new(*cfg, domain)?;
        let dir = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        match env.reset(rng, dir) {
            Ok(state) => {
                let hist = ObsHistory::new(env.frame(&state));
                return Ok(Slot { env, state, hist, ep_return: 0.0 });
            }
            Err(e @ Error::InitFailure { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one draw"))
}

const DOMAIN_DRAWS: usize = 20;

fn gaussian_logp(a: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    a.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((a, m), ls)| -0.5 * ((a - m) / ls.exp()).powi(2) - ls - 0.5 * (2.0 * std::f64::consts::PI).ln())
        .sum()
}

/// Trains the teacher. `log` receives one curve row per iteration.
pub fn ppo_train(
    cfg: &PpoConfig,
    rotor: &RotorConfig,
    ranges: &RandomizationRanges,
    seed: u64,
    mut log: impl FnMut(&CurveRow),
) -> Result<(Copilot, Vec<CurveRow>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut copilot = Copilot::new(&cfg.net, &mut rng)?;
    let teacher = copilot.nets.teacher_params();
    for id in copilot.store.ids().collect::<Vec<_>>() {
        copilot.store.set_trainable(id, teacher.contains(&id));
    }
    let horizon = cfg.iterations * cfg.epochs * (cfg.envs * cfg.rollout).div_ceil(cfg.minibatch);
    let mut opt = OptimizerState::new(
        AdamWConfig { lr: cfg.lr, weight_decay: 0.0, horizon, ..AdamWConfig::default() },
        &copilot.store,
    );
    let mut slots: Vec<Slot> = (0..cfg.envs).map(|_| new_slot(&mut rng, rotor, ranges)).collect::<Result<_>>()?;
    let mut curve = Vec::with_capacity(cfg.iterations);
    let n = cfg.envs * cfg.rollout;
    for it in 0..cfg.iterations {
        // Buffers are env-major so each env's segment is contiguous.
        let mut obs = vec![vec![]; cfg.envs];
        let mut priv_ = vec![vec![]; cfg.envs];
        let mut acts = vec![vec![]; cfg.envs];
        let mut logp = vec![vec![]; cfg.envs];
        let mut vals = vec![vec![]; cfg.envs];
        let mut next_vals = vec![vec![]; cfg.envs];
        let mut rews = vec![vec![]; cfg.envs];
        let mut terms = vec![vec![]; cfg.envs];
        let mut cuts = vec![vec![]; cfg.envs];
        let mut term_sum = RewardTerms::default();
        let (mut done_returns, mut successes) = (vec![], 0usize);
        let log_std: Vec<f64> = copilot.store.get(copilot.nets.log_std).to_f64();
        for step in 0..cfg.rollout {
            let o: Vec<f64> = slots.iter().flat_map(|s| s.hist.flat()).collect();
            let e: Vec<f64> = slots.iter().flat_map(|s| s.env.privileged(&s.state)).collect();
            let (mean, value) = {
                let s = Session::inference(&copilot.store);
                let f = copilot.nets.forward(&s, &o, Some(&e), LatentSource::Teacher)?;
                (s.value(f.mean).to_f64(), s.value(f.value.expect("teacher value")).to_f64())
            };
            for (k, slot) in slots.iter_mut().enumerate() {
                let m = &mean[k * JOINTS..(k + 1) * JOINTS];
                let a: Vec<f64> = m
                    .iter()
                    .zip(&log_std)
                    .map(|(m, ls)| m + ls.exp() * rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect();
                let out = slot.env.step(&mut slot.state, &a)?;
                slot.hist.push(slot.env.frame(&slot.state));
                slot.ep_return += out.reward;
                term_sum.rot += out.terms.rot;
                term_sum.vel += out.terms.vel;
                term_sum.work += out.terms.work;
                term_sum.torq += out.terms.torq;
                term_sum.diff += out.terms.diff;
                obs[k].extend_from_slice(&o[k * OBS..(k + 1) * OBS]);
                priv_[k].extend_from_slice(&e[k * PRIVILEGED..(k + 1) * PRIVILEGED]);
                logp[k].push(gaussian_logp(&a, m, &log_std));
                acts[k].extend(a);
                vals[k].push(value[k]);
                rews[k].push(out.reward);
                terms[k].push(out.dropped);
                cuts[k].push(out.timeout || step + 1 == cfg.rollout);
                next_vals[k].push(0.0);
                if out.done() {
                    done_returns.push(slot.ep_return);
                    if !slot.state.dropped && slot.state.rotated(&slot.env.cfg) {
                        successes += 1;
                    }
                    *slot = new_slot(&mut rng, rotor, ranges)?;
                }
            }
        }
        // Bootstrap values for cut points: evaluate the post-step observation
        // for every cut that was not a true terminal.
        for k in 0..cfg.envs {
            let idx: Vec<usize> = (0..cfg.rollout).filter(|&i| cuts[k][i] && !terms[k][i]).collect();
            if idx.is_empty() {
                continue;
            }
            // The next observation of a mid-rollout timeout is a fresh episode;
            // the last step's successor is the live slot.
            let last = *idx.last().unwrap();
            if last + 1 == cfg.rollout {
                let s = Session::inference(&copilot.store);
                let f = copilot.nets.forward(
                    &s,
                    &slots[k].hist.flat(),
                    Some(&slots[k].env.privileged(&slots[k].state)),
                    LatentSource::Teacher,
                )?;
                next_vals[k][last] = s.value(f.value.unwrap()).to_f64()[0];
            }
            for &i in &idx {
                if i + 1 < cfg.rollout {
                    // Time-limit truncation: approximate the tail by the
                    // current value estimate.
                    next_vals[k][i] = vals[k][i];
                }
            }
        }
        for k in 0..cfg.envs {
            for i in 0..cfg.rollout {
                if !cuts[k][i] && !terms[k][i] {
                    next_vals[k][i] = if i + 1 < cfg.rollout { vals[k][i + 1] } else { 0.0 };
                }
            }
        }
        let mut adv = Vec::with_capacity(n);
        let mut ret = Vec::with_capacity(n);
        for k in 0..cfg.envs {
            let (a, r) = gae(&rews[k], &vals[k], &next_vals[k], &terms[k], &cuts[k], cfg.gamma, cfg.gae_lambda);
            adv.extend(a);
            ret.extend(r);
        }
        let obs: Vec<f64> = obs.concat();
        let priv_: Vec<f64> = priv_.concat();
        let acts: Vec<f64> = acts.concat();
        let logp: Vec<f64> = logp.concat();

        let mut order: Vec<usize> = (0..n).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for mb in order.chunks(cfg.minibatch) {
                update(&mut copilot, &mut opt, cfg, mb, &obs, &priv_, &acts, &logp, &adv, &ret, it)?;
            }
        }
        let steps = n as f64;
        let row = CurveRow {
            iteration: it,
            mean_return: if done_returns.is_empty() { 0.0 } else { done_returns.iter().sum::<f64>() / done_returns.len() as f64 },
            episodes: done_returns.len(),
            success_rate: if done_returns.is_empty() { 0.0 } else { successes as f64 / done_returns.len() as f64 },
            rot: term_sum.rot / steps,
            vel: term_sum.vel / steps,
            work: term_sum.work / steps,
            torq: term_sum.torq / steps,
            diff: term_sum.diff / steps,
        };
        log(&row);
        curve.push(row);
    }
    Ok((copilot, curve))
}

#[allow(clippy::too_many_arguments)]
fn update(
    copilot: &mut Copilot,
    opt: &mut OptimizerState<f32>,
    cfg: &PpoConfig,
    mb: &[usize],
    obs: &[f64],
    privileged: &[f64],
    acts: &[f64],
    logp_old: &[f64],
    adv: &[f64],
    ret: &[f64],
    it: usize,
) -> Result<()> {
    let b = mb.len();
    let pick = |src: &[f64], w: usize| -> Vec<f64> { mb.iter().flat_map(|&i| src[i * w..(i + 1) * w].iter().copied()).collect() };
    let o = pick(obs, OBS);
    let e = pick(privileged, PRIVILEGED);
    let a = pick(acts, JOINTS);
    let lp_old: Vec<f64> = mb.iter().map(|&i| logp_old[i]).collect();
    let mut ad: Vec<f64> = mb.iter().map(|&i| adv[i]).collect();
    let r: Vec<f64> = mb.iter().map(|&i| ret[i]).collect();
    let mu = ad.iter().sum::<f64>() / b as f64;
    let sd = (ad.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / b as f64).sqrt().max(1e-8);
    for x in &mut ad {
        *x = (*x - mu) / sd;
    }

    let grads = {
        let s = Session::new(&copilot.store);
        let f = copilot.nets.forward(&s, &o, Some(&e), LatentSource::Teacher)?;
        let log_std = s.p(copilot.nets.log_std);
        let av = s.constant(Tensor::from_f64(vec![b, JOINTS], &a)?);
        let z = s.mul(s.sub(av, f.mean)?, s.exp(s.neg(log_std)?))?;
        // log N(a; mean, std) up to a constant, summed over joints.
        let per = s.add(s.scale(s.square(z)?, -0.5)?, s.neg(log_std)?)?;
        let logp = s.sum_axis(per, 1)?;
        let c = -0.5 * (2.0 * std::f64::consts::PI).ln() * JOINTS as f64;
        let ratio = s.exp(s.add_scalar(s.sub(logp, s.constant(Tensor::from_f64(vec![b], &lp_old)?))?, c)?);
        let rv = s.value(ratio).to_f64();
        let mut mask = vec![0.0; b];
        let mut fixed = vec![0.0; b];
        for i in 0..b {
            if surrogate_active(rv[i], ad[i], cfg.clip) {
                mask[i] = ad[i];
            } else {
                fixed[i] = clipped_objective(rv[i], ad[i], cfg.clip);
            }
        }
        let surr = s.add(
            s.mul(ratio, s.constant(Tensor::from_f64(vec![b], &mask)?))?,
            s.constant(Tensor::from_f64(vec![b], &fixed)?),
        )?;
        let pg = s.neg(s.mean(surr))?;
        let value = s.reshape(f.value.expect("teacher value"), &[b])?;
        let vl = s.mse(value, s.constant(Tensor::from_f64(vec![b], &r)?))?;
        let ent = s.mean(log_std);
        let loss = s.add(s.add(pg, s.scale(vl, cfg.value_coef)?)?, s.scale(ent, -cfg.entropy_coef * JOINTS as f64)?)?;
        let lv = s.item(loss);
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!("ppo loss at iteration {it}")));
        }
        s.grads(loss)?
    };
    let grads = clip_grad_norm(grads, cfg.max_grad_norm);
    opt.step(&mut copilot.store, &grads)?;
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
pub fn clip_grad_norm(mut grads: Vec<Option<Tensor<f32>>>, max_norm: f64) -> Vec<Option<Tensor<f32>>> {
    let total: f64 = grads.iter().flatten().map(|g| g.sq_norm()).sum::<f64>().sqrt();
    if total > max_norm && total.is_finite() {
        let k = (max_norm / total) as f32;
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }
    grads
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub episodes: usize,
    pub heldout_episodes: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Std of the exploration noise added to teacher actions while
    /// collecting, so the buffer covers slightly off-policy states.
    pub action_noise: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            episodes: 200,
            heldout_episodes: 40,
            epochs: 30,
            batch: 256,
            lr: 1e-3,
            action_noise: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub train_mse: f64,
    pub heldout_mse: f64,
    /// Mean per-coordinate variance of the held-out teacher latents: the
    /// error of always predicting their mean.
    pub heldout_variance: f64,
    pub samples: usize,
}

fn collect_latents<R: Rng + ?Sized>(
    copilot: &Copilot,
    rotor: &RotorConfig,
    ranges: &RandomizationRanges,
    episodes: usize,
    noise: f64,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let l = copilot.nets.cfg.latent;
    let (mut obs, mut lat) = (vec![], vec![]);
    for _ in 0..episodes {
        let mut slot = new_slot(rng, rotor, ranges)?;
        loop {
            let o = slot.hist.flat();
            let e = slot.env.privileged(&slot.state);
            let (mean, latent) = {
                let s = Session::inference(&copilot.store);
                let f = copilot.nets.forward(&s, &o, Some(&e), LatentSource::Teacher)?;
                (s.value(f.mean).to_f64(), s.value(f.latent).to_f64())
            };
            debug_assert_eq!(latent.len(), l);
            obs.extend_from_slice(&o);
            lat.extend_from_slice(&latent);
            let a: Vec<f64> = mean.iter().map(|m| m + noise * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
            let out = slot.env.step(&mut slot.state, &a)?;
            slot.hist.push(slot.env.frame(&slot.state));
            if out.done() {
                break;
            }
        }
    }
    Ok((obs, lat))
}

fn latent_mse(copilot: &Copilot, obs: &[f64], lat: &[f64]) -> Result<f64> {
    let l = copilot.nets.cfg.latent;
    let b = obs.len() / OBS;
    let s = Session::inference(&copilot.store);
    let o = s.constant(Tensor::from_f64(vec![b, OBS], obs)?);
    let p = copilot.nets.encode_student(&s, o)?;
    let t = s.constant(Tensor::from_f64(vec![b, l], lat)?);
    Ok(s.item(s.mse(p, t)?) as f64)
}

fn latent_variance(lat: &[f64], l: usize) -> f64 {
    let n = (lat.len() / l).max(1) as f64;
    (0..l)
        .map(|k| {
            let col = lat.iter().skip(k).step_by(l);
            let mu = col.clone().sum::<f64>() / n;
            col.map(|x| (x - mu).powi(2)).sum::<f64>() / n
        })
        .sum::<f64>()
        / l as f64
}

/// Fits the student encoder to teacher latents from teacher rollouts; the
/// teacher stays frozen.
pub fn distill_student(
    copilot: &mut Copilot,
    rotor: &RotorConfig,
    ranges: &RandomizationRanges,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<DistillReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (obs, lat) = collect_latents(copilot, rotor, ranges, cfg.episodes, cfg.action_noise, &mut rng)?;
    let (ho_obs, ho_lat) = collect_latents(copilot, rotor, ranges, cfg.heldout_episodes, cfg.action_noise, &mut rng)?;
    let student = copilot.nets.student_params();
    for id in copilot.store.ids().collect::<Vec<_>>() {
        copilot.store.set_trainable(id, student.contains(&id));
    }
    let l = copilot.nets.cfg.latent;
    let n = obs.len() / OBS;
    let steps = cfg.epochs * n.div_ceil(cfg.batch);
    let mut opt = OptimizerState::new(
        AdamWConfig { lr: cfg.lr, weight_decay: 0.0, horizon: steps, ..AdamWConfig::default() },
        &copilot.store,
    );
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for mb in order.chunks(cfg.batch) {
            let o: Vec<f64> = mb.iter().flat_map(|&i| obs[i * OBS..(i + 1) * OBS].iter().copied()).collect();
            let t: Vec<f64> = mb.iter().flat_map(|&i| lat[i * l..(i + 1) * l].iter().copied()).collect();
            let grads = {
                let s = Session::new(&copilot.store);
                let ov = s.constant(Tensor::from_f64(vec![mb.len(), OBS], &o)?);
                let p = copilot.nets.encode_student(&s, ov)?;
                let loss = s.mse(p, s.constant(Tensor::from_f64(vec![mb.len(), l], &t)?))?;
                s.grads(loss)?
            };
            opt.step(&mut copilot.store, &grads)?;
        }
    }
    for id in copilot.store.ids().collect::<Vec<_>>() {
        copilot.store.set_trainable(id, true);
    }
    Ok(DistillReport {
        train_mse: latent_mse(copilot, &obs, &lat)?,
        heldout_mse: latent_mse(copilot, &ho_obs, &ho_lat)?,
        heldout_variance: latent_variance(&ho_lat, l),
        samples: n,
    })
}

/// Controller kinds compared in evaluation.
#[derive(Clone, Copy, Debug)]
pub enum Controller<'a> {
    Zero,
    Scripted,
    Teacher(&'a Copilot),
    Student(&'a Copilot),
}

/// Constant full-speed roller command in the target direction, no squeeze:
/// the teleoperation-style baseline.
pub fn scripted_rotation(target_dir: f64) -> [f64; JOINTS] {
    let d = target_dir.signum();
    [0.0, 0.0, 0.0, d, d, d]
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RotationStats {
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_return: f64,
    pub mean_abs_rotation: f64,
    pub drop_rate: f64,
    /// Fraction of episodes whose net rotation has the target's sign.
    pub sign_agreement: f64,
}

/// Runs `episodes` randomized episodes. Each episode draws its domain, target
/// direction and reset from its own stream derived from `(seed, index)`, so
/// controllers are compared on identical conditions.
pub fn evaluate_rotation(
    controller: Controller<'_>,
    rotor: &RotorConfig,
    ranges: &RandomizationRanges,
    episodes: usize,
    seed: u64,
) -> Result<RotationStats> {
    let mut st = RotationStats { episodes, ..Default::default() };
    for ep in 0..episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(ep as u64));
        let mut slot = new_slot(&mut rng, rotor, ranges)?;
        loop {
            let a = match controller {
                Controller::Zero => [0.0; JOINTS],
                Controller::Scripted => scripted_rotation(slot.state.target_dir),
                Controller::Teacher(c) => c.act_teacher(&slot.hist, &slot.env.privileged(&slot.state))?,
                Controller::Student(c) => c.act(&slot.hist)?,
            };
            let out = slot.env.step(&mut slot.state, &a)?;
            slot.hist.push(slot.env.frame(&slot.state));
            slot.ep_return += out.reward;
            if out.done() {
                break;
            }
        }
        let s = &slot.state;
        let progress = s.progress();
        st.mean_return += slot.ep_return;
        st.mean_abs_rotation += (s.phi - s.phi_start).abs();
        if s.dropped {
            st.drop_rate += 1.0;
        } else if s.rotated(rotor) {
            st.success_rate += 1.0;
        }
        if progress > 0.0 {
            st.sign_agreement += 1.0;
        }
    }
    let n = episodes.max(1) as f64;
    st.success_rate /= n;
    st.mean_return /= n;
    st.mean_abs_rotation /= n;
    st.drop_rate /= n;
    st.sign_agreement /= n;
    Ok(st)
}
