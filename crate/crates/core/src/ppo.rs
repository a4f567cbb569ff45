//! On-policy optimisation: rollout buffer, collection, GAE and the clipped
//! surrogate update, plus a dense-reward reach-goal task used as a sanity
//! check for the optimiser.

use std::ops::Range;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::demos::{HistoryWindow, LiveHistory};
use crate::env::{AgentAction, FetchQuest, Observation, OBS_DIM};
use crate::model::{
    ppo_loss_on_tape, CoPolicy, PpoBatch, PpoCoefficients, CODE_DIM, JOINT_DIM, POLICY_INPUT, ROBOT_DIMS,
};
use crate::nn::{clip_grad_norm, Adam, AdamConfig, Mlp, Tape};
use crate::{CoreError, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub lr: f64,
    pub lr_decay: bool,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    /// Bootstrap from the critic when an episode ends in success instead of
    /// treating it as absorbing. With an always-positive imitation reward an
    /// absorbing success would make finishing look worse than dawdling.
    pub bootstrap_on_success: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            lr_decay: true,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            epochs: 10,
            minibatch: 256,
            value_coef: 0.5,
            entropy_coef: 0.01,
            max_grad_norm: 0.5,
            bootstrap_on_success: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        let bad = |m: &str| Err(CoreError::Config(m.to_string()));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must lie in [0, 1]");
        }
        if !(self.clip > 0.0) {
            return bad("clip must be positive");
        }
        if !(self.lr > 0.0) || self.epochs == 0 || self.minibatch == 0 {
            return bad("lr, epochs and minibatch must be positive");
        }
        if !(self.max_grad_norm > 0.0) || self.value_coef < 0.0 || self.entropy_coef < 0.0 {
            return bad("invalid loss coefficients");
        }
        Ok(())
    }

    /// `lr0 · (1 − done/total)`.
    pub fn lr_at(&self, done: usize, total: usize) -> f64 {
        if !self.lr_decay || total == 0 {
            return self.lr;
        }
        self.lr * (1.0 - done as f64 / total as f64).max(0.0)
    }

    pub fn coefficients(&self) -> PpoCoefficients {
        PpoCoefficients {
            clip: self.clip,
            value_coef: self.value_coef,
            entropy_coef: self.entropy_coef,
        }
    }
}

/// Transitions stored contiguously, episode after episode.
#[derive(Clone, Debug, Default)]
pub struct RolloutBuffer {
    pub hist_len: usize,
    pub obs: Vec<f64>,
    pub z: Vec<f64>,
    pub history: Vec<f64>,
    pub next_history: Vec<f64>,
    pub raw: Vec<f64>,
    pub action: Vec<f64>,
    pub logprob: Vec<f64>,
    pub value: Vec<f64>,
    pub reward: Vec<f64>,
    /// Last transition of an episode (terminal, timeout or buffer cut).
    pub boundary: Vec<bool>,
    /// Boundary that is treated as absorbing (no bootstrap).
    pub terminal: Vec<bool>,
    /// Critic value of the state after a non-absorbing boundary.
    pub bootstrap: Vec<f64>,
    pub episodes: Vec<EpisodeSummary>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeSummary {
    pub start: usize,
    pub len: usize,
    pub success: bool,
    /// False when the buffer filled before the episode finished.
    pub finished: bool,
}

impl RolloutBuffer {
    pub fn new(hist_len: usize) -> Self {
        Self {
            hist_len,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.logprob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logprob.is_empty()
    }

    pub fn clear(&mut self) {
        *self = Self::new(self.hist_len);
    }

    pub fn obs_row(&self, i: usize) -> &[f64] {
        &self.obs[i * OBS_DIM..(i + 1) * OBS_DIM]
    }

    pub fn z_row(&self, i: usize) -> [f64; CODE_DIM] {
        [self.z[i * CODE_DIM], self.z[i * CODE_DIM + 1]]
    }

    pub fn history_row(&self, i: usize) -> &[f64] {
        &self.history[i * self.hist_len..(i + 1) * self.hist_len]
    }

    pub fn next_history_row(&self, i: usize) -> &[f64] {
        &self.next_history[i * self.hist_len..(i + 1) * self.hist_len]
    }

    pub fn action_row(&self, i: usize) -> &[f64] {
        &self.action[i * JOINT_DIM..(i + 1) * JOINT_DIM]
    }

    pub fn raw_row(&self, i: usize) -> &[f64] {
        &self.raw[i * JOINT_DIM..(i + 1) * JOINT_DIM]
    }

    pub fn success_rate(&self) -> f64 {
        let done: Vec<_> = self.episodes.iter().filter(|e| e.finished).collect();
        if done.is_empty() {
            return 0.0;
        }
        done.iter().filter(|e| e.success).count() as f64 / done.len() as f64
    }

    /// Mean undiscounted reward per finished episode.
    pub fn mean_episode_return(&self) -> f64 {
        let done: Vec<_> = self.episodes.iter().filter(|e| e.finished).collect();
        if done.is_empty() {
            return self.reward.iter().sum::<f64>();
        }
        done.iter()
            .map(|e| self.reward[e.start..e.start + e.len].iter().sum::<f64>())
            .sum::<f64>()
            / done.len() as f64
    }

    /// `[B × 12]` observation ‖ code rows.
    pub fn policy_inputs<T: Scalar>(&self, rows: &[usize]) -> Array2<T> {
        Array2::from_shape_fn((rows.len(), POLICY_INPUT), |(r, c)| {
            let i = rows[r];
            T::c(if c < OBS_DIM {
                self.obs[i * OBS_DIM + c]
            } else {
                self.z[i * CODE_DIM + c - OBS_DIM]
            })
        })
    }

    pub fn histories<T: Scalar>(&self, rows: &[usize]) -> Array2<T> {
        let h = self.hist_len;
        Array2::from_shape_fn((rows.len(), h), |(r, c)| T::c(self.history[rows[r] * h + c]))
    }

    pub fn codes<T: Scalar>(&self, rows: &[usize]) -> Array2<T> {
        Array2::from_shape_fn((rows.len(), CODE_DIM), |(r, c)| T::c(self.z[rows[r] * CODE_DIM + c]))
    }
}

/// Who moves the human in the simulated episodes.
#[derive(Clone, Copy, Debug)]
pub enum HumanDriver<'a, T> {
    /// The co-policy's own human head.
    CoPolicy,
    /// A fixed behaviour-cloned network, queried at `z = 0`.
    Frozen(&'a Mlp<T>),
}

impl<T: Scalar> HumanDriver<'_, T> {
    fn override_action(&self, obs: &Observation, joint: &mut [f64; JOINT_DIM]) -> Result<(), CoreError> {
        if let HumanDriver::Frozen(net) = self {
            let out = net.forward_one(&crate::model::policy_input::<T>(obs, &[0.0; CODE_DIM]))?;
            for (d, v) in out.iter().take(2).enumerate() {
                joint[d] = v.f64().clamp(-1.0, 1.0);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct CollectSpec {
    pub capacity: usize,
    pub history: usize,
    pub scored: Range<usize>,
    pub bootstrap_on_success: bool,
}

/// Fills `buffer` to `spec.capacity` steps. Each episode draws a code from
/// `next_code` and a reset seed from `rng`; rewards are left at zero for the
/// caller to assign.
pub fn collect_rollouts<T, R, F>(
    env: &FetchQuest,
    policy: &CoPolicy<T>,
    human: HumanDriver<'_, T>,
    mut next_code: F,
    spec: &CollectSpec,
    buffer: &mut RolloutBuffer,
    rng: &mut R,
) -> Result<(), CoreError>
where
    T: Scalar,
    R: Rng + ?Sized,
    F: FnMut(&mut R) -> [f64; CODE_DIM],
{
    if !buffer.is_empty() {
        return Err(CoreError::Config("rollout buffer must start empty".into()));
    }
    buffer.hist_len = HistoryWindow::flat_len(spec.history);
    while buffer.len() < spec.capacity {
        let z = next_code(rng);
        let mut state = env.reset(rng.gen());
        let mut obs = env.observe(&state);
        let mut hist = LiveHistory::new(spec.history, obs);
        let start = buffer.len();
        loop {
            let step = policy.act(&obs, &z, false, spec.scored.clone(), rng)?;
            let mut joint = step.action;
            human.override_action(&obs, &mut joint)?;
            let ah = AgentAction::new(joint[0], joint[1]);
            let ar = AgentAction::new(joint[2], joint[3]);
            hist.write_flat(&mut buffer.history);
            env.step_mut(&mut state, ah, ar)?;
            let next = env.observe(&state);
            hist.advance(ah, next);
            hist.write_flat(&mut buffer.next_history);

            buffer.obs.extend_from_slice(&obs);
            buffer.z.extend_from_slice(&z);
            buffer.raw.extend_from_slice(&step.raw);
            buffer.action.extend_from_slice(&joint);
            buffer.logprob.push(step.logprob);
            buffer.value.push(step.value);
            buffer.reward.push(0.0);

            let full = buffer.len() >= spec.capacity;
            let boundary = state.done || full;
            let terminal = state.success && !spec.bootstrap_on_success;
            buffer.boundary.push(boundary);
            buffer.terminal.push(boundary && terminal);
            buffer.bootstrap.push(if boundary && !terminal {
                policy.value(&next, &z)?
            } else {
                0.0
            });
            obs = next;
            if boundary {
                buffer.episodes.push(EpisodeSummary {
                    start,
                    len: buffer.len() - start,
                    success: state.success,
                    finished: state.done,
                });
                break;
            }
        }
    }
    Ok(())
}

/// Generalised advantage estimates and returns; resets at every boundary.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    boundary: &[bool],
    terminal: &[bool],
    bootstrap: &[f64],
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut gae = 0.0;
    for t in (0..n).rev() {
        let next_value = if boundary[t] {
            gae = 0.0;
            if terminal[t] {
                0.0
            } else {
                bootstrap[t]
            }
        } else {
            values[t + 1]
        };
        let delta = rewards[t] + gamma * next_value - values[t];
        gae = delta + gamma * lambda * gae;
        adv[t] = gae;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Shifts and scales to zero mean and unit (population) variance.
pub fn normalize(values: &mut [f64]) {
    let n = values.len() as f64;
    if values.is_empty() {
        return;
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    values.iter_mut().for_each(|v| *v = (*v - mean) / std);
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PpoStats {
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub grad_norm: f64,
    pub minibatches: usize,
}

/// Optimiser state for the actor, log-std and critic (in that order).
pub fn policy_optimizer<T: Scalar>(policy: &CoPolicy<T>) -> Adam<T> {
    let params: Vec<Array2<T>> = policy.tensors().into_iter().cloned().collect();
    Adam::new(&params, AdamConfig::default())
}

/// Runs `cfg.epochs` passes of shuffled minibatches over the buffer.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update<T: Scalar, R: Rng + ?Sized>(
    policy: &mut CoPolicy<T>,
    opt: &mut Adam<T>,
    buffer: &RolloutBuffer,
    advantages: &[f64],
    returns: &[f64],
    cfg: &PpoConfig,
    lr: f64,
    scored: Range<usize>,
    update_actor: bool,
    rng: &mut R,
) -> Result<PpoStats, CoreError> {
    let n = buffer.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut stats = PpoStats::default();
    let col = |rows: &[usize], src: &[f64]| Array2::from_shape_fn((rows.len(), 1), |(r, _)| T::c(src[rows[r]]));
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for rows in order.chunks(cfg.minibatch) {
            let batch = PpoBatch {
                input: buffer.policy_inputs(rows),
                raw_actions: Array2::from_shape_fn((rows.len(), JOINT_DIM), |(r, c)| {
                    T::c(buffer.raw[rows[r] * JOINT_DIM + c])
                }),
                old_logprob: col(rows, &buffer.logprob),
                advantages: col(rows, advantages),
                returns: col(rows, returns),
            };
            let mut tape = Tape::new();
            let actor = policy.actor.bind(&mut tape);
            let log_std = tape.param(policy.log_std.clone());
            let critic = policy.critic.bind(&mut tape);
            let terms = ppo_loss_on_tape(
                &mut tape,
                &actor,
                log_std,
                &critic,
                &batch,
                scored.clone(),
                cfg.coefficients(),
            );
            let loss = tape.scalar(terms.total);
            if !loss.is_finite() {
                return Err(CoreError::NonFinite(format!("ppo loss {loss}")));
            }
            let g = tape.backward(terms.total)?;
            let vars: Vec<_> = actor
                .vars
                .iter()
                .copied()
                .chain(std::iter::once(log_std))
                .chain(critic.vars.iter().copied())
                .collect();
            let mut grads = g.collect(&vars);
            if !update_actor {
                grads[..=actor.vars.len()].iter_mut().for_each(|g| g.fill(T::zero()));
            }
            stats.grad_norm += clip_grad_norm(&mut grads, cfg.max_grad_norm);
            opt.step_refs(&mut policy.tensors_mut(), &grads, lr)?;
            policy.clamp_log_std();
            stats.surrogate += tape.scalar(terms.surrogate).f64();
            stats.value_loss += tape.scalar(terms.value_loss).f64();
            stats.entropy += tape.scalar(terms.entropy).f64();
            stats.minibatches += 1;
        }
    }
    let k = stats.minibatches.max(1) as f64;
    stats.surrogate /= k;
    stats.value_loss /= k;
    stats.entropy /= k;
    stats.grad_norm /= k;
    Ok(stats)
}

/// Point robot on the open 8×8 map rewarded by negative distance to a goal.
/// The observation reuses the game layout: robot position in slots 2–3 and
/// goal in slots 4–5 (scaled by 1/8).
#[derive(Clone, Debug)]
pub struct ReachGoal {
    pub horizon: usize,
    pub speed: f64,
    pub size: f64,
}

impl Default for ReachGoal {
    fn default() -> Self {
        Self {
            horizon: 200,
            speed: 0.15,
            size: 8.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ReachState {
    pub pos: [f64; 2],
    pub goal: [f64; 2],
    pub t: usize,
}

impl ReachGoal {
    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> ReachState {
        let mut p = || [rng.gen_range(0.0..self.size), rng.gen_range(0.0..self.size)];
        ReachState {
            pos: p(),
            goal: p(),
            t: 0,
        }
    }

    pub fn observe(&self, s: &ReachState) -> Observation {
        let mut o = [0.0; OBS_DIM];
        o[2] = s.pos[0] / self.size;
        o[3] = s.pos[1] / self.size;
        o[4] = s.goal[0] / self.size;
        o[5] = s.goal[1] / self.size;
        o
    }

    /// Returns `(reward, done)`.
    pub fn step(&self, s: &mut ReachState, a: [f64; 2]) -> (f64, bool) {
        for (p, d) in s.pos.iter_mut().zip(a) {
            *p = (*p + self.speed * d.clamp(-1.0, 1.0)).clamp(0.0, self.size);
        }
        s.t += 1;
        let d = ((s.pos[0] - s.goal[0]).powi(2) + (s.pos[1] - s.goal[1]).powi(2)).sqrt();
        (-d, s.t >= self.horizon)
    }

    /// Mean return of `act` over `episodes` episodes seeded from `seed`.
    pub fn mean_return<F: FnMut(&Observation, &mut ChaCha8Rng) -> [f64; 2]>(
        &self,
        episodes: usize,
        seed: u64,
        mut act: F,
    ) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut total = 0.0;
        for _ in 0..episodes {
            let mut s = self.reset(&mut rng);
            loop {
                let a = act(&self.observe(&s), &mut rng);
                let (r, done) = self.step(&mut s, a);
                total += r;
                if done {
                    break;
                }
            }
        }
        total / episodes as f64
    }
}

#[derive(Clone, Debug)]
pub struct ReachReport {
    /// Mean training-episode return after each update.
    pub curve: Vec<f64>,
    pub random_return: f64,
    pub trained_return: f64,
}

/// Trains the robot head of a fresh co-policy on [`ReachGoal`] with `updates`
/// PPO iterations of `steps` transitions and compares its deterministic
/// return to a uniform random policy on the same evaluation episodes.
pub fn train_reach_goal<T: Scalar>(
    task: &ReachGoal,
    cfg: &PpoConfig,
    updates: usize,
    steps: usize,
    seed: u64,
) -> Result<ReachReport, CoreError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut policy = CoPolicy::<T>::new(&mut rng);
    let mut opt = policy_optimizer(&policy);
    let z = [0.0; CODE_DIM];
    let mut curve = Vec::with_capacity(updates);
    for u in 0..updates {
        let mut buf = RolloutBuffer::new(0);
        let mut s = task.reset(&mut rng);
        let mut start = 0;
        while buf.len() < steps {
            let obs = task.observe(&s);
            let step = policy.act(&obs, &z, false, ROBOT_DIMS, &mut rng)?;
            let (r, done) = task.step(&mut s, [step.action[2], step.action[3]]);
            buf.obs.extend_from_slice(&obs);
            buf.z.extend_from_slice(&z);
            buf.raw.extend_from_slice(&step.raw);
            buf.action.extend_from_slice(&step.action);
            buf.logprob.push(step.logprob);
            buf.value.push(step.value);
            buf.reward.push(r);
            let cut = buf.len() >= steps;
            buf.boundary.push(done || cut);
            buf.terminal.push(false);
            buf.bootstrap.push(if done || cut {
                policy.value(&task.observe(&s), &z)?
            } else {
                0.0
            });
            if done || cut {
                buf.episodes.push(EpisodeSummary {
                    start,
                    len: buf.len() - start,
                    success: false,
                    finished: done,
                });
                start = buf.len();
                s = task.reset(&mut rng);
            }
        }
        let (mut adv, ret) = compute_gae(
            &buf.reward,
            &buf.value,
            &buf.boundary,
            &buf.terminal,
            &buf.bootstrap,
            cfg.gamma,
            cfg.gae_lambda,
        );
        normalize(&mut adv);
        curve.push(buf.mean_episode_return());
        let lr = cfg.lr_at(u, updates);
        ppo_update(
            &mut policy,
            &mut opt,
            &buf,
            &adv,
            &ret,
            cfg,
            lr,
            ROBOT_DIMS,
            true,
            &mut rng,
        )?;
    }
    let eval_seed = seed ^ 0x5eed;
    let random_return = task.mean_return(20, eval_seed, |_, r| [r.gen_range(-1.0..=1.0), r.gen_range(-1.0..=1.0)]);
    let trained_return = task.mean_return(20, eval_seed, |o, _| {
        let m = policy.mean(o, &z).expect("finite policy");
        [m[2].f64().clamp(-1.0, 1.0), m[3].f64().clamp(-1.0, 1.0)]
    });
    Ok(ReachReport {
        curve,
        random_return,
        trained_return,
    })
}
