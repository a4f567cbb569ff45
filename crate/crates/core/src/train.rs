//! The adversarial co-policy training loop and the baseline training modes.

use std::ops::Range;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::demos::{DemoDataset, DemoIndex, HistoryWindow};
use crate::env::{FetchQuest, OBS_DIM};
use crate::model::{
    bc_loss_on_tape, disc_loss_on_tape, la_on_tape, lz_on_tape, to_array, CoPolicy, CodeSampler, DiscInput, DiscLoss,
    Discriminator, RecognitionNet, ALL_DIMS, CODE_DIM, HUMAN_DIMS, JOINT_DIM, ROBOT_DIMS,
};
use crate::nn::{Adam, AdamConfig, Mlp, Tape};
use crate::ppo::{
    collect_rollouts, compute_gae, normalize, policy_optimizer, ppo_update, CollectSpec, HumanDriver, PpoConfig,
    RolloutBuffer,
};
use crate::{CoreError, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Adversarial co-policy with strategy reconstruction and behaviour
    /// reconstruction.
    Cogail,
    /// Adversarial co-policy with strategy reconstruction only.
    Mainfogail,
    /// Adversarial co-policy; codes are sampled but no loss uses them.
    Magail,
    /// Supervised robot policy; the human is replayed open loop.
    BcSingle,
    /// Cloned human frozen into the environment, robot trained adversarially.
    BcGail,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Cogail,
        Mode::Mainfogail,
        Mode::Magail,
        Mode::BcSingle,
        Mode::BcGail,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Mode::Cogail => "cogail",
            Mode::Mainfogail => "mainfogail",
            Mode::Magail => "magail",
            Mode::BcSingle => "bc_single",
            Mode::BcGail => "bc_gail",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.tag() == tag)
    }

    pub fn uses_lz(self) -> bool {
        matches!(self, Mode::Cogail | Mode::Mainfogail)
    }

    pub fn uses_la(self) -> bool {
        self == Mode::Cogail
    }

    pub fn samples_codes(self) -> bool {
        matches!(self, Mode::Cogail | Mode::Mainfogail | Mode::Magail)
    }

    pub fn is_adversarial(self) -> bool {
        self != Mode::BcSingle
    }

    /// Action dimensions the policy is trained on.
    pub fn scored_dims(self) -> Range<usize> {
        match self {
            Mode::BcSingle | Mode::BcGail => ROBOT_DIMS,
            _ => ALL_DIMS,
        }
    }

    pub fn disc_input(self) -> DiscInput {
        if self == Mode::BcGail {
            DiscInput::RobotOnly
        } else {
            DiscInput::Joint
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub episodes: usize,
    pub steps_per_episode: usize,
    pub lambda_z: f64,
    /// Only read in `cogail` mode.
    pub lambda_a: f64,
    pub history: usize,
    pub seed: u64,
    pub disc_loss: DiscLoss,
    pub checkpoint_interval: usize,
    /// Recognition/discriminator minibatches per episode.
    pub inner_updates: usize,
    pub inner_batch: usize,
    /// Weight of the per-step strategy-recovery reward
    /// `−‖ψ(h_{t+1}) − z‖` added to the imitation reward in `cogail` and
    /// `mainfogail` modes.
    pub info_reward: f64,
    pub code_noise: f64,
    /// Supervised epochs (bc_single, and bc_gail's human stage).
    pub bc_epochs: usize,
    pub bc_lr: f64,
    pub bc_batch: usize,
    /// Supervised epochs cloning both heads before the first adversarial
    /// episode (cogail, mainfogail, magail).
    pub warm_start_epochs: usize,
    /// Code input of the warm start in cogail/mainfogail (magail always
    /// uses sampled codes, its ψ being untrained).
    pub warm_start_codes: CodeSource,
    /// Code input of the behaviour-cloning anchor in cogail/mainfogail.
    pub bc_reg_codes: CodeSource,
    /// Leading adversarial episodes in which PPO fits only the critic, so
    /// the first actor updates see sensible advantages.
    pub critic_warmup: usize,
    /// Behaviour-cloning minibatches on the demonstrations after every PPO
    /// update, anchoring the actor while the discriminator is still weak.
    pub bc_reg_steps: usize,
    /// Linearly anneal the anchor to zero over the adversarial episodes.
    pub bc_reg_decay: bool,
    pub ppo: PpoConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Cogail,
            episodes: 200,
            steps_per_episode: 6000,
            lambda_z: 1.0,
            lambda_a: 0.5,
            history: crate::demos::DEFAULT_HISTORY,
            seed: 300,
            disc_loss: DiscLoss::CrossEntropy,
            checkpoint_interval: 10,
            inner_updates: 10,
            inner_batch: 256,
            info_reward: 0.5,
            code_noise: crate::model::CODE_NOISE,
            bc_epochs: 200,
            bc_lr: 1e-3,
            bc_batch: 256,
            warm_start_epochs: 100,
            warm_start_codes: CodeSource::Mixed,
            bc_reg_codes: CodeSource::Mixed,
            critic_warmup: 5,
            bc_reg_steps: 200,
            bc_reg_decay: false,
            ppo: PpoConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        self.ppo.validate()?;
        let bad = |m: &str| Err(CoreError::Config(m.to_string()));
        if self.episodes == 0 || self.steps_per_episode == 0 || self.checkpoint_interval == 0 {
            return bad("episodes, steps_per_episode and checkpoint_interval must be positive");
        }
        if self.inner_batch == 0 || self.bc_batch == 0 || !(self.bc_lr > 0.0) {
            return bad("batch sizes and bc_lr must be positive");
        }
        if self.lambda_z < 0.0 || self.lambda_a < 0.0 || self.info_reward < 0.0 {
            return bad("loss weights must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.code_noise) {
            return bad("code_noise must lie in [0, 1]");
        }
        Ok(())
    }

    /// Short digest of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    /// Total units of work: PPO episodes, plus supervised epochs where used.
    pub fn schedule_len(&self) -> usize {
        match self.mode {
            Mode::BcSingle => self.bc_epochs,
            Mode::BcGail => self.bc_epochs + self.episodes,
            _ => self.warm_start_epochs + self.episodes,
        }
    }
}

/// Every trainable object and optimiser state of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct Learner<T> {
    pub policy: CoPolicy<T>,
    pub psi: RecognitionNet<T>,
    pub disc: Discriminator<T>,
    /// Cloned human network (bc_gail only).
    pub frozen_human: Option<Mlp<T>>,
    pub opt_policy: Adam<T>,
    /// Actor updates driven by the behaviour-reconstruction loss.
    pub opt_actor_aux: Adam<T>,
    pub opt_psi: Adam<T>,
    pub opt_disc: Adam<T>,
    pub sampler: CodeSampler,
    /// Completed units of the schedule.
    pub episode: usize,
}

fn adam_for<T: Scalar>(tensors: &[Array2<T>]) -> Adam<T> {
    Adam::new(tensors, AdamConfig::default())
}

impl<T: Scalar> Learner<T> {
    pub fn new(cfg: &TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let hist = HistoryWindow::flat_len(cfg.history);
        let policy = CoPolicy::<T>::new(&mut rng);
        let psi = if cfg.mode.samples_codes() {
            RecognitionNet::new(hist, &mut rng)
        } else {
            RecognitionNet::constant_zero(hist, &mut rng)
        };
        let disc = Discriminator::new(cfg.disc_loss, cfg.mode.disc_input(), &mut rng);
        Self {
            opt_policy: policy_optimizer(&policy),
            opt_actor_aux: adam_for(policy.actor.tensors()),
            opt_psi: adam_for(psi.net.tensors()),
            opt_disc: adam_for(disc.net.tensors()),
            policy,
            psi,
            disc,
            frozen_human: None,
            sampler: CodeSampler::new(),
            episode: 0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.policy.is_finite()
            && self.psi.net.is_finite()
            && self.disc.net.is_finite()
            && self.frozen_human.as_ref().is_none_or(|m| m.is_finite())
    }
}

/// One row of the metrics log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub disc_loss: f64,
    #[serde(rename = "L_z")]
    pub l_z: f64,
    #[serde(rename = "L_a")]
    pub l_a: f64,
    pub ppo_surrogate: f64,
    pub value_loss: f64,
    pub mean_reward: f64,
    pub lr: f64,
    pub wall_time: f64,
    /// Supervised loss (BC stages), zero otherwise.
    pub bc_loss: f64,
    /// Success rate of the training rollouts.
    pub rollout_success: f64,
    pub entropy: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct InnerLosses {
    pub disc_loss: f64,
    pub l_z: f64,
    pub l_a: f64,
}

fn gather<'a, T: Scalar>(rows: &[usize], width: usize, f: impl Fn(usize) -> &'a [f64]) -> Array2<T> {
    let mut data = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        data.extend_from_slice(f(r));
    }
    to_array(rows.len(), width, &data)
}

fn expert_disc_rows<T: Scalar>(index: &DemoIndex, rows: &[usize], input: DiscInput) -> Array2<T> {
    let mut data = Vec::with_capacity(rows.len() * input.width());
    for &r in rows {
        let joint: Vec<f64> = index.human_row(r).iter().chain(index.robot_row(r)).copied().collect();
        input.push_row(&mut data, index.obs_row(r), &joint);
    }
    to_array(rows.len(), input.width(), &data)
}

fn policy_disc_rows<T: Scalar>(buf: &RolloutBuffer, rows: &[usize], input: DiscInput) -> Array2<T> {
    let mut data = Vec::with_capacity(rows.len() * input.width());
    for &r in rows {
        input.push_row(&mut data, buf.obs_row(r), buf.action_row(r));
    }
    to_array(rows.len(), input.width(), &data)
}

/// One recognition/behaviour step (`λ1·L_z + λ2·L_a` on ψ and the actor)
/// followed by one discriminator step. Weights of zero skip the first part.
#[allow(clippy::too_many_arguments)]
pub fn combined_update<T: Scalar>(
    learner: &mut Learner<T>,
    index: &DemoIndex,
    demo_rows: &[usize],
    buffer: &RolloutBuffer,
    buffer_rows: &[usize],
    lambda_z: f64,
    lambda_a: f64,
    lr: f64,
) -> Result<InnerLosses, CoreError> {
    let mut out = InnerLosses::default();
    if lambda_z > 0.0 || lambda_a > 0.0 {
        let mut tape = Tape::new();
        let psi = learner.psi.net.bind(&mut tape);
        let actor = learner.policy.actor.bind(&mut tape);
        let mut total = None;
        if lambda_z > 0.0 {
            let h = tape.constant(buffer.histories(buffer_rows));
            let z = tape.constant(buffer.codes(buffer_rows));
            let lz = lz_on_tape(&mut tape, &psi, h, z);
            out.l_z = tape.scalar(lz).f64();
            total = Some(tape.scale(lz, T::c(lambda_z)));
        }
        if lambda_a > 0.0 {
            let hl = HistoryWindow::flat_len(index.k);
            let h = tape.constant(gather(demo_rows, hl, |r| index.history_row(r)));
            let o = tape.constant(gather(demo_rows, OBS_DIM, |r| index.obs_row(r)));
            let a = tape.constant(gather(demo_rows, 2, |r| index.human_row(r)));
            let la = la_on_tape(&mut tape, &psi, &actor, h, o, a);
            out.l_a = tape.scalar(la).f64();
            let w = tape.scale(la, T::c(lambda_a));
            total = Some(match total {
                Some(t) => tape.add(t, w),
                None => w,
            });
        }
        let total = total.expect("at least one weight is positive");
        if !tape.scalar(total).is_finite() {
            return Err(CoreError::NonFinite("reconstruction loss".into()));
        }
        let g = tape.backward(total)?;
        learner
            .opt_psi
            .step(learner.psi.net.tensors_mut(), &g.collect(&psi.vars), lr)?;
        if lambda_a > 0.0 {
            learner
                .opt_actor_aux
                .step(learner.policy.actor.tensors_mut(), &g.collect(&actor.vars), lr)?;
        }
    }

    let input = learner.disc.input;
    let mut tape = Tape::new();
    let d = learner.disc.net.bind(&mut tape);
    let e = tape.constant(expert_disc_rows(index, demo_rows, input));
    let p = tape.constant(policy_disc_rows(buffer, buffer_rows, input));
    let loss = disc_loss_on_tape(&mut tape, &d, learner.disc.mode, e, p);
    out.disc_loss = tape.scalar(loss).f64();
    if !out.disc_loss.is_finite() {
        return Err(CoreError::NonFinite("discriminator loss".into()));
    }
    let g = tape.backward(loss)?;
    learner
        .opt_disc
        .step(learner.disc.net.tensors_mut(), &g.collect(&d.vars), lr)?;
    Ok(out)
}

/// Imitation reward of every buffer transition under the current
/// discriminator, plus the strategy-recovery term when `info_weight > 0`.
pub fn relabel_rewards<T: Scalar>(
    learner: &Learner<T>,
    buffer: &mut RolloutBuffer,
    info_weight: f64,
) -> Result<(), CoreError> {
    let rows: Vec<usize> = (0..buffer.len()).collect();
    let input = learner.disc.input;
    let rewards = learner.disc.rewards(&policy_disc_rows::<T>(buffer, &rows, input))?;
    buffer.reward = rewards;
    if info_weight > 0.0 {
        let h = gather::<T>(&rows, buffer.hist_len, |r| buffer.next_history_row(r));
        let zhat = learner.psi.net.forward(&h)?;
        for i in 0..buffer.len() {
            let z = buffer.z_row(i);
            let d = ((zhat[[i, 0]].f64() - z[0]).powi(2) + (zhat[[i, 1]].f64() - z[1]).powi(2)).sqrt();
            buffer.reward[i] -= info_weight * d;
        }
    }
    Ok(())
}

/// Drives one run; each call to [`Trainer::step`] completes one unit of the
/// schedule (a PPO episode or a supervised epoch).
pub struct Trainer<'a, T> {
    pub cfg: TrainConfig,
    pub env: &'a FetchQuest,
    pub learner: Learner<T>,
    index: Option<DemoIndex>,
    rng: ChaCha8Rng,
    started: Instant,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(env: &'a FetchQuest, demos: Option<&DemoDataset>, cfg: TrainConfig) -> Result<Self, CoreError> {
        cfg.validate()?;
        let index = match demos {
            Some(d) if !d.is_empty() => {
                d.check_layout(env)?;
                Some(DemoIndex::new(d, cfg.history))
            }
            _ => None,
        };
        if index.is_none() {
            return Err(CoreError::Config(format!(
                "mode {} needs a demonstration dataset",
                cfg.mode.tag()
            )));
        }
        let learner = Learner::new(&cfg);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_6e64_6f6d_2121);
        Ok(Self {
            cfg,
            env,
            learner,
            index,
            rng,
            started: Instant::now(),
        })
    }

    pub fn finished(&self) -> bool {
        self.learner.episode >= self.cfg.schedule_len()
    }

    /// True when the unit just completed should be checkpointed.
    pub fn checkpoint_due(&self) -> bool {
        let e = self.learner.episode;
        e > 0 && (e.is_multiple_of(self.cfg.checkpoint_interval) || e == self.cfg.schedule_len())
    }

    pub fn step(&mut self) -> Result<EpisodeMetrics, CoreError> {
        if self.finished() {
            return Err(CoreError::Config("training schedule already complete".into()));
        }
        let e = self.learner.episode;
        let mut m = match self.cfg.mode {
            Mode::BcSingle => self.bc_epoch(ROBOT_DIMS, false, e, self.cfg.bc_epochs)?,
            Mode::BcGail if e < self.cfg.bc_epochs => {
                let m = self.bc_epoch(HUMAN_DIMS, false, e, self.cfg.bc_epochs)?;
                if e + 1 == self.cfg.bc_epochs {
                    self.learner.frozen_human = Some(self.learner.policy.actor.clone());
                }
                m
            }
            Mode::BcGail => self.adversarial_episode(e - self.cfg.bc_epochs)?,
            _ if e < self.cfg.warm_start_epochs => {
                let m = self.bc_epoch(ALL_DIMS, true, e, self.cfg.warm_start_epochs)?;
                if e + 1 == self.cfg.warm_start_epochs {
                    let index = self.index.as_ref().expect("checked in new");
                    let code = self.code_source(index.len(), true);
                    fit_log_std(&mut self.learner, self.index.as_ref().expect("checked in new"), code)?;
                }
                m
            }
            _ => self.adversarial_episode(e - self.cfg.warm_start_epochs)?,
        };
        if !self.learner.is_finite() {
            return Err(CoreError::NonFinite(format!("parameters after unit {e}")));
        }
        self.learner.episode += 1;
        m.episode = self.learner.episode;
        m.wall_time = self.started.elapsed().as_secs_f64();
        Ok(m)
    }

    /// Codes the supervised losses condition on for `rows` demonstration
    /// rows: none for the single-agent baselines, fresh sampler draws for
    /// `magail` (whose code is an ignored input), and `ψ(h)` otherwise.
    fn code_source(&mut self, rows: usize, warm: bool) -> BcCode<T> {
        match self.cfg.mode {
            Mode::BcSingle | Mode::BcGail => BcCode::Zero,
            Mode::Magail => self.sampled_codes(rows),
            Mode::Cogail | Mode::Mainfogail => {
                let source = if warm {
                    self.cfg.warm_start_codes
                } else {
                    self.cfg.bc_reg_codes
                };
                match source {
                    CodeSource::Zero => BcCode::Zero,
                    CodeSource::Recognized => BcCode::Recognized { train_psi: warm },
                    CodeSource::Sampled => self.sampled_codes(rows),
                    CodeSource::Mixed if self.rng.gen_bool(0.5) => BcCode::Recognized { train_psi: warm },
                    CodeSource::Mixed => self.sampled_codes(rows),
                }
            }
        }
    }

    fn anchor_steps(&self, e: usize) -> usize {
        let n = self.cfg.bc_reg_steps;
        if self.cfg.bc_reg_decay {
            (n as f64 * (1.0 - e as f64 / self.cfg.episodes as f64)).round() as usize
        } else {
            n
        }
    }

    fn sampled_codes(&mut self, rows: usize) -> BcCode<T> {
        let (sampler, noise) = (&mut self.learner.sampler, self.cfg.code_noise);
        let codes: Vec<f64> = (0..rows)
            .flat_map(|_| sampler.sample_with_noise(&mut self.rng, noise))
            .collect();
        BcCode::Given(to_array(rows, CODE_DIM, &codes))
    }

    /// One pass over the demonstrations regressing `dims` of the actor mean
    /// (mean-squared error); `warm` marks the pre-adversarial warm start.
    fn bc_epoch(
        &mut self,
        dims: Range<usize>,
        warm: bool,
        epoch: usize,
        total: usize,
    ) -> Result<EpisodeMetrics, CoreError> {
        let lr = self.cfg.bc_lr * (1.0 - epoch as f64 / total as f64);
        let index = self.index.as_ref().expect("checked in new");
        let mut order: Vec<usize> = (0..index.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut self.rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for rows in order.chunks(self.cfg.bc_batch) {
            let code = self.code_source(rows.len(), warm);
            let index = self.index.as_ref().expect("checked in new");
            let loss = bc_step(&mut self.learner, index, rows, dims.clone(), code, lr)?;
            loss_sum += loss;
            batches += 1;
        }
        Ok(EpisodeMetrics {
            bc_loss: loss_sum / batches as f64,
            lr,
            ..Default::default()
        })
    }

    fn adversarial_episode(&mut self, e: usize) -> Result<EpisodeMetrics, CoreError> {
        let cfg = &self.cfg;
        let mode = cfg.mode;
        let lr = cfg.ppo.lr_at(e, cfg.episodes);
        let spec = CollectSpec {
            capacity: cfg.steps_per_episode,
            history: cfg.history,
            scored: mode.scored_dims(),
            bootstrap_on_success: cfg.ppo.bootstrap_on_success,
        };
        let mut buffer = RolloutBuffer::new(HistoryWindow::flat_len(cfg.history));
        {
            let learner = &mut self.learner;
            let human = match &learner.frozen_human {
                Some(net) => HumanDriver::Frozen(net),
                None => HumanDriver::CoPolicy,
            };
            let sampler = &mut learner.sampler;
            let noise = cfg.code_noise;
            let sample_codes = mode.samples_codes();
            collect_rollouts(
                self.env,
                &learner.policy,
                human,
                |r: &mut ChaCha8Rng| {
                    if sample_codes {
                        sampler.sample_with_noise(r, noise)
                    } else {
                        [0.0; CODE_DIM]
                    }
                },
                &spec,
                &mut buffer,
                &mut self.rng,
            )?;
        }

        let (lambda_z, lambda_a) = (
            if mode.uses_lz() { cfg.lambda_z } else { 0.0 },
            if mode.uses_la() { cfg.lambda_a } else { 0.0 },
        );
        let mut inner = InnerLosses::default();
        let index = self.index.as_ref().expect("checked in new");
        for _ in 0..cfg.inner_updates {
            let demo_rows = index.sample_batch(cfg.inner_batch, &mut self.rng);
            let buf_rows = sample(&mut self.rng, buffer.len(), cfg.inner_batch.min(buffer.len())).into_vec();
            let l = combined_update(
                &mut self.learner,
                index,
                &demo_rows,
                &buffer,
                &buf_rows,
                lambda_z,
                lambda_a,
                lr,
            )?;
            inner.disc_loss += l.disc_loss;
            inner.l_z += l.l_z;
            inner.l_a += l.l_a;
        }
        let k = cfg.inner_updates.max(1) as f64;

        let info = if mode.uses_lz() { cfg.info_reward } else { 0.0 };
        relabel_rewards(&self.learner, &mut buffer, info)?;
        let (mut adv, ret) = compute_gae(
            &buffer.reward,
            &buffer.value,
            &buffer.boundary,
            &buffer.terminal,
            &buffer.bootstrap,
            cfg.ppo.gamma,
            cfg.ppo.gae_lambda,
        );
        normalize(&mut adv);
        let learner = &mut self.learner;
        let stats = ppo_update(
            &mut learner.policy,
            &mut learner.opt_policy,
            &buffer,
            &adv,
            &ret,
            &cfg.ppo,
            lr,
            mode.scored_dims(),
            e >= cfg.critic_warmup,
            &mut self.rng,
        )?;
        let mut bc = 0.0;
        let anchor_steps = self.anchor_steps(e);
        for _ in 0..anchor_steps {
            let index = self.index.as_ref().expect("checked in new");
            let rows = index.sample_batch(self.cfg.bc_batch, &mut self.rng);
            let code = self.code_source(rows.len(), false);
            let index = self.index.as_ref().expect("checked in new");
            bc += bc_step(
                &mut self.learner,
                index,
                &rows,
                mode.scored_dims(),
                code,
                self.cfg.bc_lr,
            )?;
        }
        Ok(EpisodeMetrics {
            disc_loss: inner.disc_loss / k,
            l_z: inner.l_z / k,
            l_a: inner.l_a / k,
            ppo_surrogate: stats.surrogate,
            value_loss: stats.value_loss,
            mean_reward: buffer.reward.iter().sum::<f64>() / buffer.len() as f64,
            lr,
            rollout_success: buffer.success_rate(),
            entropy: stats.entropy,
            bc_loss: bc / anchor_steps.max(1) as f64,
            ..Default::default()
        })
    }

    /// Runs the remaining schedule, handing every metrics row and every due
    /// checkpoint to the callbacks.
    pub fn run<M, C>(&mut self, mut on_metrics: M, mut on_checkpoint: C) -> Result<(), CoreError>
    where
        M: FnMut(&EpisodeMetrics) -> Result<(), CoreError>,
        C: FnMut(&Self) -> Result<(), CoreError>,
    {
        while !self.finished() {
            let m = self.step()?;
            on_metrics(&m)?;
            if self.checkpoint_due() {
                on_checkpoint(self)?;
            }
        }
        Ok(())
    }
}

/// One supervised minibatch step on the actor's `dims`; returns the loss.
/// With `recognized` the code comes from `ψ(h)` and ψ is trained as well.
/// Where supervised phases take the code input from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeSource {
    Zero,
    /// `ψ(h)` of the demonstration history.
    Recognized,
    /// Fresh draws from the training code sampler, one per row.
    Sampled,
    /// `Recognized` or `Sampled`, chosen per minibatch with equal odds.
    Mixed,
}

/// Code input of a supervised step.
#[derive(Clone, Debug)]
pub enum BcCode<T> {
    Zero,
    /// `ψ(h)` of each row; gradients reach ψ only when `train_psi`.
    Recognized {
        train_psi: bool,
    },
    /// One row per demonstration row.
    Given(Array2<T>),
}

pub fn bc_step<T: Scalar>(
    learner: &mut Learner<T>,
    index: &DemoIndex,
    rows: &[usize],
    dims: Range<usize>,
    code: BcCode<T>,
    lr: f64,
) -> Result<f64, CoreError> {
    let mut target = Vec::with_capacity(rows.len() * dims.len());
    for &r in rows {
        let joint: Vec<f64> = index.human_row(r).iter().chain(index.robot_row(r)).copied().collect();
        target.extend_from_slice(&joint[dims.clone()]);
    }
    debug_assert_eq!(JOINT_DIM, 4);
    let mut tape = Tape::new();
    let actor = learner.policy.actor.bind(&mut tape);
    let obs = tape.constant(gather(rows, OBS_DIM, |r| index.obs_row(r)));
    let mut psi = None;
    let code = match code {
        BcCode::Recognized { train_psi } => {
            let b = learner.psi.net.bind(&mut tape);
            let h = tape.constant(gather(rows, HistoryWindow::flat_len(index.k), |r| index.history_row(r)));
            let c = b.forward(&mut tape, h);
            psi = train_psi.then_some(b);
            c
        }
        BcCode::Zero => tape.constant(Array2::zeros((rows.len(), CODE_DIM))),
        BcCode::Given(c) => tape.constant(c),
    };
    let x = tape.concat_cols(obs, code);
    let y = tape.constant(to_array(rows.len(), dims.len(), &target));
    let loss = bc_loss_on_tape(&mut tape, &actor, x, y, dims);
    let value = tape.scalar(loss).f64();
    if !value.is_finite() {
        return Err(CoreError::NonFinite("behaviour-cloning loss".into()));
    }
    let g = tape.backward(loss)?;
    learner
        .opt_actor_aux
        .step(learner.policy.actor.tensors_mut(), &g.collect(&actor.vars), lr)?;
    if let Some(psi) = &psi {
        learner
            .opt_psi
            .step(learner.psi.net.tensors_mut(), &g.collect(&psi.vars), lr)?;
    }
    Ok(value)
}

/// Sets the policy's log-std to the maximum-likelihood value given the
/// current mean: half the log of the per-dimension residual variance on the
/// demonstrations.
pub fn fit_log_std<T: Scalar>(learner: &mut Learner<T>, index: &DemoIndex, code: BcCode<T>) -> Result<(), CoreError> {
    let rows: Vec<usize> = (0..index.len()).collect();
    let code = match code {
        BcCode::Recognized { .. } => {
            learner
                .psi
                .net
                .forward(&gather(&rows, HistoryWindow::flat_len(index.k), |r| {
                    index.history_row(r)
                }))?
        }
        BcCode::Zero => Array2::zeros((rows.len(), CODE_DIM)),
        BcCode::Given(c) => c,
    };
    let obs = gather::<T>(&rows, OBS_DIM, |r| index.obs_row(r));
    let input = ndarray::concatenate![ndarray::Axis(1), obs, code];
    let mean = learner.policy.actor.forward(&input)?;
    for d in ALL_DIMS {
        let var = rows
            .iter()
            .map(|&r| {
                let target = if d < 2 {
                    index.human_row(r)[d]
                } else {
                    index.robot_row(r)[d - 2]
                };
                (mean[[r, d]].f64() - target).powi(2)
            })
            .sum::<f64>()
            / rows.len() as f64;
        learner.policy.log_std[[0, d]] = T::c(0.5 * var.max(1e-12).ln());
    }
    learner.policy.clamp_log_std();
    Ok(())
}

/// Mean `‖ψ(h) − z‖` over a fresh buffer collected with the learner's policy.
pub fn recognition_error<T: Scalar>(
    env: &FetchQuest,
    learner: &Learner<T>,
    cfg: &TrainConfig,
    steps: usize,
    seed: u64,
) -> Result<f64, CoreError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sampler = CodeSampler::new();
    let mut buffer = RolloutBuffer::new(HistoryWindow::flat_len(cfg.history));
    let spec = CollectSpec {
        capacity: steps,
        history: cfg.history,
        scored: ALL_DIMS,
        bootstrap_on_success: true,
    };
    collect_rollouts(
        env,
        &learner.policy,
        HumanDriver::CoPolicy,
        |r: &mut ChaCha8Rng| sampler.sample_with_noise(r, cfg.code_noise),
        &spec,
        &mut buffer,
        &mut rng,
    )?;
    let rows: Vec<usize> = (0..buffer.len()).collect();
    let zhat = learner.psi.net.forward(&buffer.histories::<T>(&rows))?;
    let total: f64 = rows
        .iter()
        .map(|&i| {
            let z = buffer.z_row(i);
            ((zhat[[i, 0]].f64() - z[0]).powi(2) + (zhat[[i, 1]].f64() - z[1]).powi(2)).sqrt()
        })
        .sum();
    Ok(total / rows.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demos::{generate_dataset, DatasetSpec};

    fn seeded(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn dataset(n: usize, seed: u64) -> DemoDataset {
        generate_dataset(&FetchQuest::default(), &DatasetSpec::new(n, [0.25; 4], seed)).unwrap()
    }

    fn smoke(mode: Mode) -> TrainConfig {
        TrainConfig {
            mode,
            episodes: 2,
            steps_per_episode: 600,
            bc_epochs: 3,
            warm_start_epochs: 0,
            critic_warmup: 0,
            bc_reg_steps: 2,
            ppo: PpoConfig {
                epochs: 2,
                ..PpoConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn mode_tags_round_trip() {
        for m in Mode::ALL {
            assert_eq!(Mode::from_tag(m.tag()), Some(m));
        }
        assert_eq!(Mode::from_tag("gail"), None);
    }

    #[test]
    fn smoke_run_emits_finite_metrics_and_one_checkpoint() {
        let env = FetchQuest::default();
        let ds = dataset(4, 1);
        let mut t = Trainer::<f32>::new(&env, Some(&ds), smoke(Mode::Cogail)).unwrap();
        let mut rows = Vec::new();
        let mut checkpoints = 0;
        t.run(
            |m| {
                rows.push(m.clone());
                Ok(())
            },
            |_| {
                checkpoints += 1;
                Ok(())
            },
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(checkpoints, 1);
        for m in &rows {
            for v in [m.disc_loss, m.l_z, m.l_a, m.ppo_surrogate, m.value_loss, m.mean_reward] {
                assert!(v.is_finite());
            }
            assert!(m.l_z > 0.0 && m.l_a > 0.0);
        }
        assert!(rows[1].lr < rows[0].lr);
    }

    #[test]
    fn warm_start_runs_before_the_adversarial_phase() {
        let env = FetchQuest::default();
        let ds = dataset(4, 4);
        let cfg = TrainConfig {
            warm_start_epochs: 2,
            critic_warmup: 1,
            episodes: 1,
            ..smoke(Mode::Cogail)
        };
        let mut t = Trainer::<f32>::new(&env, Some(&ds), cfg).unwrap();
        let psi0 = t.learner.psi.clone();
        for _ in 0..2 {
            let m = t.step().unwrap();
            assert!(m.bc_loss > 0.0);
            assert_eq!((m.disc_loss, m.l_z), (0.0, 0.0));
        }
        assert_eq!(t.learner.episode, 2);
        // The mixed code source routes some warm-start batches through ψ.
        assert_ne!(t.learner.psi, psi0);
        let d0 = t.learner.disc.clone();
        let m = t.step().unwrap();
        assert!(m.disc_loss > 0.0 && m.l_z > 0.0);
        assert_ne!(t.learner.disc, d0);
        assert!(t.finished());
    }

    #[test]
    fn mode_isolation() {
        let env = FetchQuest::default();
        let ds = dataset(4, 2);
        let mut t = Trainer::<f32>::new(&env, Some(&ds), smoke(Mode::Magail)).unwrap();
        let psi0 = t.learner.psi.clone();
        let m = t.step().unwrap();
        assert_eq!((m.l_z, m.l_a), (0.0, 0.0));
        assert_eq!(t.learner.psi, psi0);

        let mut t = Trainer::<f32>::new(&env, Some(&ds), smoke(Mode::Mainfogail)).unwrap();
        let m = t.step().unwrap();
        assert_eq!(m.l_a, 0.0);
        assert!(m.l_z > 0.0);
    }

    #[test]
    fn zero_weights_leave_psi_and_actor_untouched() {
        let env = FetchQuest::default();
        let ds = dataset(4, 3);
        let cfg = smoke(Mode::Cogail);
        let mut learner = Learner::<f64>::new(&cfg);
        let index = DemoIndex::new(&ds, 4);
        let mut buffer = RolloutBuffer::new(52);
        let spec = CollectSpec {
            capacity: 300,
            history: 4,
            scored: ALL_DIMS,
            bootstrap_on_success: true,
        };
        let mut rng = seeded(0);
        collect_rollouts(
            &env,
            &learner.policy,
            HumanDriver::CoPolicy,
            |_: &mut ChaCha8Rng| [0.2, -0.2],
            &spec,
            &mut buffer,
            &mut rng,
        )
        .unwrap();
        let (psi0, actor0, d0) = (learner.psi.clone(), learner.policy.actor.clone(), learner.disc.clone());
        let rows: Vec<usize> = (0..64).collect();
        combined_update(&mut learner, &index, &rows, &buffer, &rows, 0.0, 0.0, 1e-3).unwrap();
        assert_eq!(learner.psi, psi0);
        assert_eq!(learner.policy.actor, actor0);
        assert_ne!(learner.disc, d0);
    }

    #[test]
    fn discriminator_step_descends_at_small_lr() {
        let env = FetchQuest::default();
        let ds = dataset(4, 4);
        let cfg = smoke(Mode::Magail);
        let index = DemoIndex::new(&ds, 4);
        for mode in [DiscLoss::CrossEntropy, DiscLoss::LeastSquares] {
            let mut learner = Learner::<f64>::new(&TrainConfig {
                disc_loss: mode,
                ..cfg.clone()
            });
            let mut buffer = RolloutBuffer::new(52);
            let spec = CollectSpec {
                capacity: 256,
                history: 4,
                scored: ALL_DIMS,
                bootstrap_on_success: true,
            };
            collect_rollouts(
                &env,
                &learner.policy,
                HumanDriver::CoPolicy,
                |_: &mut ChaCha8Rng| [0.0; 2],
                &spec,
                &mut buffer,
                &mut seeded(1),
            )
            .unwrap();
            let rows: Vec<usize> = (0..256).collect();
            let before = combined_update(&mut learner.clone(), &index, &rows, &buffer, &rows, 0.0, 0.0, 0.0).unwrap();
            combined_update(&mut learner, &index, &rows, &buffer, &rows, 0.0, 0.0, 1e-5).unwrap();
            let after = combined_update(&mut learner.clone(), &index, &rows, &buffer, &rows, 0.0, 0.0, 0.0).unwrap();
            assert!(
                after.disc_loss <= before.disc_loss,
                "{mode:?}: {} > {}",
                after.disc_loss,
                before.disc_loss
            );
        }
    }

    #[test]
    fn combined_update_losses_stay_finite() {
        let env = FetchQuest::default();
        let ds = dataset(4, 5);
        let cfg = smoke(Mode::Cogail);
        let index = DemoIndex::new(&ds, 4);
        let mut learner = Learner::<f32>::new(&cfg);
        let mut buffer = RolloutBuffer::new(52);
        let spec = CollectSpec {
            capacity: 512,
            history: 4,
            scored: ALL_DIMS,
            bootstrap_on_success: true,
        };
        let mut sampler = CodeSampler::new();
        let mut rng = seeded(2);
        collect_rollouts(
            &env,
            &learner.policy,
            HumanDriver::CoPolicy,
            |r: &mut ChaCha8Rng| sampler.sample(r),
            &spec,
            &mut buffer,
            &mut rng,
        )
        .unwrap();
        for _ in 0..100 {
            let d = index.sample_batch(64, &mut rng);
            let b = sample(&mut rng, buffer.len(), 64).into_vec();
            let l = combined_update(&mut learner, &index, &d, &buffer, &b, 1.0, 0.5, 3e-4).unwrap();
            assert!(l.disc_loss.is_finite() && l.l_z.is_finite() && l.l_a.is_finite());
        }
    }

    #[test]
    fn bc_single_loss_decreases_and_memorizes_one_demo() {
        let env = FetchQuest::default();
        let ds = dataset(4, 6);
        let cfg = TrainConfig {
            mode: Mode::BcSingle,
            bc_epochs: 10,
            bc_lr: 1e-3,
            ..TrainConfig::default()
        };
        let mut t = Trainer::<f64>::new(&env, Some(&ds), cfg).unwrap();
        let losses: Vec<f64> = (0..10).map(|_| t.step().unwrap().bc_loss).collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");

        let one = DemoDataset {
            header: ds.header.clone(),
            demos: vec![ds.demos[0].clone()],
        };
        let cfg = TrainConfig {
            mode: Mode::BcSingle,
            bc_epochs: 3000,
            bc_batch: 64,
            bc_lr: 2e-3,
            ..TrainConfig::default()
        };
        let mut t = Trainer::<f32>::new(&env, Some(&one), cfg).unwrap();
        t.run(|_| Ok(()), |_| Ok(())).unwrap();
        let worst = one.demos[0]
            .steps
            .iter()
            .map(|s| {
                let m = t.learner.policy.mean(&s.obs, &[0.0; 2]).unwrap();
                let (dx, dy) = (
                    m[2].f64().clamp(-1.0, 1.0) - s.ar.dx,
                    m[3].f64().clamp(-1.0, 1.0) - s.ar.dy,
                );
                (dx * dx + dy * dy).sqrt()
            })
            .sum::<f64>()
            / one.demos[0].len() as f64;
        assert!(worst < 0.05, "mean per-step error {worst}");
    }

    #[test]
    fn bc_gail_freezes_the_cloned_human() {
        let env = FetchQuest::default();
        let ds = dataset(4, 7);
        let cfg = TrainConfig {
            bc_epochs: 2,
            ..smoke(Mode::BcGail)
        };
        let mut t = Trainer::<f32>::new(&env, Some(&ds), cfg).unwrap();
        t.step().unwrap();
        assert!(t.learner.frozen_human.is_none());
        t.step().unwrap();
        let frozen = t.learner.frozen_human.clone().expect("frozen after stage one");
        for _ in 0..2 {
            let m = t.step().unwrap();
            assert!(m.disc_loss.is_finite() && m.disc_loss < 10.0);
        }
        assert!(t.finished());
        assert_eq!(t.learner.frozen_human.as_ref(), Some(&frozen));
    }

    #[test]
    fn imitation_modes_require_demos() {
        let env = FetchQuest::default();
        assert!(Trainer::<f32>::new(&env, None, smoke(Mode::Cogail)).is_err());
    }
}
