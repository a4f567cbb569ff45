//! Co-policy, recognition network, discriminator, their losses, and the
//! grid-based strategy-code sampler.

use std::ops::Range;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{ACTION_DIM, OBS_DIM};
use crate::nn::gaussian::{clamp_log_std_param, entropy_on_tape, log_prob_on_tape};
use crate::nn::{Activation, BoundMlp, GaussianHead, Mlp, MlpSpec, Tape, Var};
use crate::{CoreError, Scalar};

pub const CODE_DIM: usize = 2;
/// Joint action: human `[0, 2)`, robot `[2, 4)`.
pub const JOINT_DIM: usize = 2 * ACTION_DIM;
pub const POLICY_INPUT: usize = OBS_DIM + CODE_DIM;
pub const HUMAN_DIMS: Range<usize> = 0..ACTION_DIM;
pub const ROBOT_DIMS: Range<usize> = ACTION_DIM..JOINT_DIM;
pub const ALL_DIMS: Range<usize> = 0..JOINT_DIM;

pub const POLICY_HIDDEN: [usize; 4] = [128; 4];
pub const RECOGNITION_HIDDEN: [usize; 2] = [128; 2];
pub const DISC_HIDDEN: [usize; 2] = [64; 2];
pub const INITIAL_LOG_STD: f64 = -0.5;

pub fn to_array<T: Scalar>(rows: usize, cols: usize, data: &[f64]) -> Array2<T> {
    assert_eq!(data.len(), rows * cols, "buffer does not match {rows}×{cols}");
    Array2::from_shape_vec((rows, cols), data.iter().map(|&v| T::c(v)).collect()).expect("shape checked")
}

/// `[obs ‖ z]` rows for the co-policy.
pub fn policy_input<T: Scalar>(obs: &[f64], z: &[f64; CODE_DIM]) -> Vec<T> {
    obs.iter().chain(z).map(|&v| T::c(v)).collect()
}

fn check_finite<T: Scalar>(what: &str, values: &[T]) -> Result<(), CoreError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CoreError::NonFinite(format!("{what} output {values:?}")))
    }
}

/// One sampled joint action with its bookkeeping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicyStep {
    /// Pre-clamp Gaussian sample (the mean when deterministic).
    pub raw: [f64; JOINT_DIM],
    /// Executed action, clamped to `[-1, 1]`.
    pub action: [f64; JOINT_DIM],
    /// Log-density of `raw` over the scored dimensions.
    pub logprob: f64,
    pub value: f64,
}

/// Strategy-conditioned joint policy `π_co(aH, aR | s, z)` with its critic.
#[derive(Clone, Debug, PartialEq)]
pub struct CoPolicy<T> {
    pub actor: Mlp<T>,
    /// State-independent `[1 × 4]` log standard deviation.
    pub log_std: Array2<T>,
    pub critic: Mlp<T>,
}

impl<T: Scalar> CoPolicy<T> {
    pub fn actor_spec() -> MlpSpec {
        MlpSpec::new(POLICY_INPUT, &POLICY_HIDDEN, JOINT_DIM, Activation::Identity)
    }

    pub fn critic_spec() -> MlpSpec {
        MlpSpec::new(POLICY_INPUT, &POLICY_HIDDEN, 1, Activation::Identity)
    }

    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let gain = std::f64::consts::SQRT_2;
        Self {
            actor: Mlp::orthogonal(Self::actor_spec(), gain, 0.01, rng).expect("static spec"),
            log_std: Array2::from_elem((1, JOINT_DIM), T::c(INITIAL_LOG_STD)),
            critic: Mlp::orthogonal(Self::critic_spec(), gain, 1.0, rng).expect("static spec"),
        }
    }

    pub fn mean(&self, obs: &[f64], z: &[f64; CODE_DIM]) -> Result<Vec<T>, CoreError> {
        let mean = self.actor.forward_one(&policy_input::<T>(obs, z))?;
        check_finite("actor", &mean)?;
        Ok(mean)
    }

    pub fn value(&self, obs: &[f64], z: &[f64; CODE_DIM]) -> Result<f64, CoreError> {
        let v = self.critic.forward_one(&policy_input::<T>(obs, z))?;
        check_finite("critic", &v)?;
        Ok(v[0].f64())
    }

    /// Samples (or takes the mode of) the joint action; `scored` selects the
    /// dimensions whose log-density is reported.
    pub fn act<R: Rng + ?Sized>(
        &self,
        obs: &[f64],
        z: &[f64; CODE_DIM],
        deterministic: bool,
        scored: Range<usize>,
        rng: &mut R,
    ) -> Result<PolicyStep, CoreError> {
        let mean = self.mean(obs, z)?;
        let value = self.value(obs, z)?;
        let head = GaussianHead::new(mean, self.log_std.row(0).to_vec());
        let sample = head.sample(rng, deterministic);
        let sub = GaussianHead::new(
            head.mean[scored.clone()].to_vec(),
            head.log_std[scored.clone()].to_vec(),
        );
        let logprob = sub.log_prob(&sample[scored]).f64();
        let mut raw = [0.0; JOINT_DIM];
        let mut action = [0.0; JOINT_DIM];
        for i in 0..JOINT_DIM {
            raw[i] = sample[i].f64();
            action[i] = raw[i].clamp(-1.0, 1.0);
        }
        Ok(PolicyStep {
            raw,
            action,
            logprob,
            value,
        })
    }

    pub fn clamp_log_std(&mut self) {
        clamp_log_std_param(&mut self.log_std);
    }

    pub fn is_finite(&self) -> bool {
        self.actor.is_finite() && self.critic.is_finite() && self.log_std.iter().all(|v| v.is_finite())
    }

    /// Actor tensors, then log-std, then critic tensors.
    pub fn tensors(&self) -> Vec<&Array2<T>> {
        self.actor
            .tensors()
            .iter()
            .chain(std::iter::once(&self.log_std))
            .chain(self.critic.tensors())
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<T>> {
        self.actor
            .tensors_mut()
            .iter_mut()
            .chain(std::iter::once(&mut self.log_std))
            .chain(self.critic.tensors_mut().iter_mut())
            .collect()
    }
}

/// `ψ(h)`: history window → strategy estimate in `(-1, 1)²`.
#[derive(Clone, Debug, PartialEq)]
pub struct RecognitionNet<T> {
    pub net: Mlp<T>,
}

impl<T: Scalar> RecognitionNet<T> {
    pub fn spec(input: usize) -> MlpSpec {
        MlpSpec::new(input, &RECOGNITION_HIDDEN, CODE_DIM, Activation::Tanh)
    }

    pub fn new<R: Rng + ?Sized>(input: usize, rng: &mut R) -> Self {
        let net = Mlp::orthogonal(Self::spec(input), std::f64::consts::SQRT_2, 1.0, rng).expect("static spec");
        Self { net }
    }

    /// A network whose output layer is zero, so it always reports `(0, 0)`.
    pub fn constant_zero<R: Rng + ?Sized>(input: usize, rng: &mut R) -> Self {
        let mut r = Self::new(input, rng);
        let last = r.net.spec().layers() - 1;
        r.net.weight_mut(last).fill(T::zero());
        r.net.bias_mut(last).fill(T::zero());
        r
    }

    pub fn input_len(&self) -> usize {
        self.net.spec().input()
    }

    pub fn recognize(&self, history: &[f64]) -> Result<[f64; CODE_DIM], CoreError> {
        let x: Vec<T> = history.iter().map(|&v| T::c(v)).collect();
        let out = self.net.forward_one(&x)?;
        check_finite("recognition", &out)?;
        Ok([out[0].f64(), out[1].f64()])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscLoss {
    CrossEntropy,
    LeastSquares,
}

impl DiscLoss {
    pub fn tag(self) -> &'static str {
        match self {
            DiscLoss::CrossEntropy => "cross_entropy",
            DiscLoss::LeastSquares => "least_squares",
        }
    }

    /// Policy reward from a raw score; increasing in `raw` for both modes.
    pub fn reward(self, raw: f64) -> f64 {
        match self {
            // −log(1 − σ(raw)) = softplus(raw)
            DiscLoss::CrossEntropy => crate::nn::tape::softplus(raw).clamp(0.0, 10.0),
            DiscLoss::LeastSquares => (raw.tanh() + 1.0) / 2.0,
        }
    }
}

/// What the discriminator scores alongside the observation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscInput {
    /// `(s, aH, aR)`
    Joint,
    /// `(s, aR)` for the robot-only baseline.
    RobotOnly,
}

impl DiscInput {
    pub fn width(self) -> usize {
        match self {
            DiscInput::Joint => OBS_DIM + JOINT_DIM,
            DiscInput::RobotOnly => OBS_DIM + ACTION_DIM,
        }
    }

    /// Appends one discriminator row for `(obs, joint action)`.
    pub fn push_row(self, out: &mut Vec<f64>, obs: &[f64], joint: &[f64]) {
        out.extend_from_slice(obs);
        match self {
            DiscInput::Joint => out.extend_from_slice(&joint[ALL_DIMS]),
            DiscInput::RobotOnly => out.extend_from_slice(&joint[ROBOT_DIMS]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T> {
    pub net: Mlp<T>,
    pub mode: DiscLoss,
    pub input: DiscInput,
}

impl<T: Scalar> Discriminator<T> {
    pub fn spec(input: DiscInput) -> MlpSpec {
        MlpSpec::new(input.width(), &DISC_HIDDEN, 1, Activation::Identity)
    }

    pub fn new<R: Rng + ?Sized>(mode: DiscLoss, input: DiscInput, rng: &mut R) -> Self {
        let net = Mlp::orthogonal(Self::spec(input), std::f64::consts::SQRT_2, 1.0, rng).expect("static spec");
        Self { net, mode, input }
    }

    /// Raw scores for `[B × width]` rows.
    pub fn raw_scores(&self, rows: &Array2<T>) -> Result<Vec<f64>, CoreError> {
        let out = self.net.forward(rows)?;
        let v: Vec<f64> = out.iter().map(|x| x.f64()).collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::NonFinite("discriminator output".into()));
        }
        Ok(v)
    }

    pub fn rewards(&self, rows: &Array2<T>) -> Result<Vec<f64>, CoreError> {
        Ok(self
            .raw_scores(rows)?
            .into_iter()
            .map(|r| self.mode.reward(r))
            .collect())
    }
}

/// Discriminator objective (minimized): cross-entropy
/// `E[softplus(−D(x))] + E[softplus(D(y))]`, or least-squares
/// `E[(tanh D(x) − 1)²] + E[(tanh D(y) + 1)²]`; `x` expert, `y` policy.
pub fn disc_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    disc: &BoundMlp,
    mode: DiscLoss,
    expert: Var,
    policy: Var,
) -> Var {
    let de = disc.forward(tape, expert);
    let dp = disc.forward(tape, policy);
    let (le, lp) = match mode {
        DiscLoss::CrossEntropy => {
            let neg = tape.neg(de);
            (tape.softplus(neg), tape.softplus(dp))
        }
        DiscLoss::LeastSquares => {
            let se = tape.tanh(de);
            let sp = tape.tanh(dp);
            let e = tape.offset(se, -T::one());
            let p = tape.offset(sp, T::one());
            (tape.square(e), tape.square(p))
        }
    };
    let me = tape.mean(le);
    let mp = tape.mean(lp);
    tape.add(me, mp)
}

/// `L_z = E‖ψ(h) − z‖`; the history is data, so only ψ receives gradient.
pub fn lz_on_tape<T: Scalar>(tape: &mut Tape<T>, psi: &BoundMlp, history: Var, z: Var) -> Var {
    let zhat = psi.forward(tape, history);
    let d = tape.sub(zhat, z);
    let n = tape.row_norm(d);
    tape.mean(n)
}

/// `L_a = E‖π^H_mean(s, ψ(h)) − aH‖`, differentiable through ψ and the actor.
pub fn la_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    psi: &BoundMlp,
    actor: &BoundMlp,
    history: Var,
    obs: Var,
    human: Var,
) -> Var {
    let zhat = psi.forward(tape, history);
    let x = tape.concat_cols(obs, zhat);
    let mean = actor.forward(tape, x);
    let mh = tape.slice_cols(mean, HUMAN_DIMS.start, HUMAN_DIMS.end);
    let d = tape.sub(mh, human);
    let n = tape.row_norm(d);
    tape.mean(n)
}

/// Minibatch for the clipped-surrogate objective.
#[derive(Clone, Debug)]
pub struct PpoBatch<T> {
    /// `[B × 12]` observation ‖ code.
    pub input: Array2<T>,
    /// `[B × 4]` pre-clamp actions.
    pub raw_actions: Array2<T>,
    pub old_logprob: Array2<T>,
    pub advantages: Array2<T>,
    pub returns: Array2<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct PpoCoefficients {
    pub clip: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
}

/// Loss handles recorded by [`ppo_loss_on_tape`].
#[derive(Clone, Copy, Debug)]
pub struct PpoTerms {
    pub total: Var,
    pub surrogate: Var,
    pub value_loss: Var,
    pub entropy: Var,
}

/// `−E[min(ρA, clip(ρ)A)] + c_v·E[(V − R)²] − c_e·H` over the `scored`
/// action dimensions.
#[allow(clippy::too_many_arguments)]
pub fn ppo_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    actor: &BoundMlp,
    log_std: Var,
    critic: &BoundMlp,
    batch: &PpoBatch<T>,
    scored: Range<usize>,
    coef: PpoCoefficients,
) -> PpoTerms {
    let x = tape.constant(batch.input.clone());
    let acts = tape.constant(batch.raw_actions.clone());
    let old = tape.constant(batch.old_logprob.clone());
    let adv = tape.constant(batch.advantages.clone());
    let ret = tape.constant(batch.returns.clone());

    let mean = actor.forward(tape, x);
    let (mean, ls, acts) = if scored == ALL_DIMS {
        (mean, log_std, acts)
    } else {
        (
            tape.slice_cols(mean, scored.start, scored.end),
            tape.slice_cols(log_std, scored.start, scored.end),
            tape.slice_cols(acts, scored.start, scored.end),
        )
    };
    let logp = log_prob_on_tape(tape, mean, ls, acts);
    let log_ratio = tape.sub(logp, old);
    let ratio = tape.exp(log_ratio);
    let s1 = tape.mul(ratio, adv);
    let clipped = tape.clamp(ratio, T::c(1.0 - coef.clip), T::c(1.0 + coef.clip));
    let s2 = tape.mul(clipped, adv);
    let smin = tape.min(s1, s2);
    let surrogate = tape.mean(smin);

    let v = critic.forward(tape, x);
    let err = tape.sub(v, ret);
    let sq = tape.square(err);
    let value_loss = tape.mean(sq);

    let entropy = entropy_on_tape(tape, ls);

    let pl = tape.neg(surrogate);
    let vl = tape.scale(value_loss, T::c(coef.value_coef));
    let el = tape.scale(entropy, T::c(-coef.entropy_coef));
    let total = tape.add(pl, vl);
    let total = tape.add(total, el);
    PpoTerms {
        total,
        surrogate,
        value_loss,
        entropy,
    }
}

/// Mean-squared error between the actor's mean on `dims` and `targets`.
pub fn bc_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    actor: &BoundMlp,
    input: Var,
    targets: Var,
    dims: Range<usize>,
) -> Var {
    let mean = actor.forward(tape, input);
    let m = tape.slice_cols(mean, dims.start, dims.end);
    let d = tape.sub(m, targets);
    let sq = tape.square(d);
    tape.mean(sq)
}

pub const GRID_CENTERS: [f64; 5] = [-0.8, -0.4, 0.0, 0.4, 0.8];
pub const CODE_NOISE: f64 = 0.2;

/// Cycles through the 25 grid centres, adding uniform noise per dimension.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeSampler {
    pub counter: u64,
}

impl CodeSampler {
    pub fn new() -> Self {
        Self { counter: 0 }
    }

    pub fn center(index: u64) -> [f64; CODE_DIM] {
        let i = (index % 25) as usize;
        [GRID_CENTERS[i / 5], GRID_CENTERS[i % 5]]
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> [f64; CODE_DIM] {
        self.sample_with_noise(rng, CODE_NOISE)
    }

    pub fn sample_with_noise<R: Rng + ?Sized>(&mut self, rng: &mut R, noise: f64) -> [f64; CODE_DIM] {
        let c = Self::center(self.counter);
        self.counter += 1;
        c.map(|v| {
            let e = if noise > 0.0 {
                rng.gen_range(-noise..=noise)
            } else {
                0.0
            };
            (v + e).clamp(-1.0, 1.0)
        })
    }
}

impl Default for CodeSampler {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::finite_diff_check;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || r.gen_range(-1.0..1.0))
    }

    /// Discriminator whose raw score is the constant `c` (zero weights).
    fn constant_disc(c: f64) -> Discriminator<f64> {
        let mut d = Discriminator::new(DiscLoss::LeastSquares, DiscInput::Joint, &mut rng(0));
        let last = d.net.spec().layers() - 1;
        d.net.weight_mut(last).fill(0.0);
        d.net.bias_mut(last).fill(c);
        d
    }

    fn disc_loss_value(d: &Discriminator<f64>, mode: DiscLoss, e: &Array2<f64>, p: &Array2<f64>) -> f64 {
        let mut tape = Tape::new();
        let b = d.net.bind(&mut tape);
        let (ev, pv) = (tape.constant(e.clone()), tape.constant(p.clone()));
        let l = disc_loss_on_tape(&mut tape, &b, mode, ev, pv);
        tape.scalar(l)
    }

    #[test]
    fn least_squares_loss_at_targets_and_zero() {
        let mut r = rng(1);
        let (e, p) = (random(8, 14, &mut r), random(8, 14, &mut r));
        let zero = constant_disc(0.0);
        assert_abs_diff_eq!(
            disc_loss_value(&zero, DiscLoss::LeastSquares, &e, &p),
            2.0,
            epsilon = 1e-12
        );
        // tanh saturates to ±1 at large raw scores; use separate networks per side.
        let hi = constant_disc(40.0);
        let lo = constant_disc(-40.0);
        let at_target = {
            let mut tape = Tape::new();
            let bh = hi.net.bind(&mut tape);
            let bl = lo.net.bind(&mut tape);
            let ev = tape.constant(e.clone());
            let pv = tape.constant(p.clone());
            let de = bh.forward(&mut tape, ev);
            let dp = bl.forward(&mut tape, pv);
            let (se, sp) = (tape.tanh(de), tape.tanh(dp));
            let (a, b) = (tape.offset(se, -1.0), tape.offset(sp, 1.0));
            let (a, b) = (tape.square(a), tape.square(b));
            let (a, b) = (tape.mean(a), tape.mean(b));
            let l = tape.add(a, b);
            tape.scalar(l)
        };
        assert_abs_diff_eq!(at_target, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_loss_at_half() {
        let mut r = rng(2);
        let (e, p) = (random(5, 14, &mut r), random(7, 14, &mut r));
        let v = disc_loss_value(&constant_disc(0.0), DiscLoss::CrossEntropy, &e, &p);
        assert_abs_diff_eq!(v, 2.0 * 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn reward_values_and_monotonicity() {
        assert_abs_diff_eq!(DiscLoss::CrossEntropy.reward(0.0), 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(DiscLoss::LeastSquares.reward(0.0), 0.5, epsilon = 1e-12);
        assert!((DiscLoss::LeastSquares.reward(50.0) - 1.0).abs() < 1e-12);
        assert_eq!(DiscLoss::CrossEntropy.reward(100.0), 10.0);
        for mode in [DiscLoss::CrossEntropy, DiscLoss::LeastSquares] {
            let sweep: Vec<f64> = (-200..=200).map(|i| mode.reward(i as f64 * 0.05)).collect();
            assert!(sweep.windows(2).all(|w| w[1] >= w[0]), "{mode:?} not monotone");
            assert!(sweep[150] < sweep[250]);
        }
    }

    #[test]
    fn lz_examples() {
        let mut r = rng(3);
        let psi = RecognitionNet::<f64>::constant_zero(52, &mut r);
        let h = random(6, 52, &mut r);
        let mut tape = Tape::new();
        let b = psi.net.bind(&mut tape);
        let hv = tape.constant(h.clone());
        let z = tape.constant(Array2::from_shape_fn((6, 2), |(_, j)| if j == 0 { 0.4 } else { 0.0 }));
        let l = lz_on_tape(&mut tape, &b, hv, z);
        assert_abs_diff_eq!(tape.scalar(l), 0.4, epsilon = 1e-12);

        let trained = RecognitionNet::<f64>::new(52, &mut r);
        let zhat = trained.net.forward(&h).unwrap();
        let mut tape = Tape::new();
        let b = trained.net.bind(&mut tape);
        let hv = tape.constant(h);
        let z = tape.constant(zhat);
        let l = lz_on_tape(&mut tape, &b, hv, z);
        assert_abs_diff_eq!(tape.scalar(l), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn la_examples_and_robot_action_independence() {
        let mut r = rng(4);
        let mut policy = CoPolicy::<f64>::new(&mut r);
        let last = policy.actor.spec().layers() - 1;
        policy.actor.weight_mut(last).fill(0.0);
        policy.actor.bias_mut(last).fill(0.0);
        let psi = RecognitionNet::<f64>::new(52, &mut r);
        let (h, obs) = (random(3, 52, &mut r), random(3, 10, &mut r));
        let ah = Array2::from_shape_fn((3, 2), |(_, j)| if j == 0 { 0.6 } else { -0.8 });
        let mut tape = Tape::new();
        let (bp, ba) = (psi.net.bind(&mut tape), policy.actor.bind(&mut tape));
        let (hv, ov, av) = (tape.constant(h), tape.constant(obs), tape.constant(ah));
        let l = la_on_tape(&mut tape, &bp, &ba, hv, ov, av);
        assert_abs_diff_eq!(tape.scalar(l), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn la_is_zero_at_exact_reconstruction_and_a_batch_mean() {
        let mut r = rng(5);
        let policy = CoPolicy::<f64>::new(&mut r);
        let psi = RecognitionNet::<f64>::new(52, &mut r);
        let (h, obs) = (random(4, 52, &mut r), random(4, 10, &mut r));
        let zhat = psi.net.forward(&h).unwrap();
        let x = ndarray::concatenate![ndarray::Axis(1), obs, zhat];
        let exact = policy
            .actor
            .forward(&x)
            .unwrap()
            .slice(ndarray::s![.., 0..2])
            .to_owned();
        let la = |h: &Array2<f64>, o: &Array2<f64>, a: &Array2<f64>| {
            let mut tape = Tape::new();
            let (bp, ba) = (psi.net.bind(&mut tape), policy.actor.bind(&mut tape));
            let (hv, ov, av) = (
                tape.constant(h.clone()),
                tape.constant(o.clone()),
                tape.constant(a.clone()),
            );
            let l = la_on_tape(&mut tape, &bp, &ba, hv, ov, av);
            tape.scalar(l)
        };
        assert_abs_diff_eq!(la(&h, &obs, &exact), 0.0, epsilon = 1e-12);
        let target = random(4, 2, &mut r);
        let per_row: f64 = (0..4)
            .map(|i| {
                let s = ndarray::s![i..i + 1, ..];
                la(
                    &h.slice(s).to_owned(),
                    &obs.slice(s).to_owned(),
                    &target.slice(s).to_owned(),
                )
            })
            .sum::<f64>()
            / 4.0;
        assert_abs_diff_eq!(la(&h, &obs, &target), per_row, epsilon = 1e-12);
    }

    #[test]
    fn zero_output_layers() {
        let mut r = rng(6);
        let mut policy = CoPolicy::<f64>::new(&mut r);
        let last = policy.actor.spec().layers() - 1;
        policy.actor.weight_mut(last).fill(0.0);
        policy.actor.bias_mut(last).fill(0.0);
        let obs = [0.3; 10];
        let step = policy.act(&obs, &[0.1, 0.2], true, ALL_DIMS, &mut r).unwrap();
        assert_eq!(step.action, [0.0; 4]);
        let psi = RecognitionNet::<f64>::constant_zero(52, &mut r);
        assert_eq!(psi.recognize(&[0.5; 52]).unwrap(), [0.0, 0.0]);
    }

    #[test]
    fn act_logprob_matches_gaussian_oracle() {
        let mut r = rng(7);
        let policy = CoPolicy::<f64>::new(&mut r);
        let obs = [0.2, 0.4, 0.6, 0.8, 0.1, 0.9, 0.9, 0.1, 0.0, 1.0];
        let z = [0.3, -0.5];
        let a = policy.act(&obs, &z, false, ALL_DIMS, &mut rng(9)).unwrap();
        let b = policy.act(&obs, &z, false, ALL_DIMS, &mut rng(9)).unwrap();
        assert_eq!(a, b);
        let mean = policy.mean(&obs, &z).unwrap();
        let oracle = GaussianHead::new(mean.clone(), policy.log_std.row(0).to_vec()).log_prob(&a.raw);
        assert_abs_diff_eq!(a.logprob, oracle, epsilon = 1e-12);
        assert!(a.action.iter().all(|v| (-1.0..=1.0).contains(v)));
        let robot = policy.act(&obs, &z, false, ROBOT_DIMS, &mut rng(9)).unwrap();
        let sub = GaussianHead::new(mean[2..].to_vec(), vec![INITIAL_LOG_STD; 2]).log_prob(&robot.raw[2..]);
        assert_abs_diff_eq!(robot.logprob, sub, epsilon = 1e-12);
        let d1 = policy.act(&obs, &z, true, ALL_DIMS, &mut rng(1)).unwrap();
        let d2 = policy.act(&obs, &z, true, ALL_DIMS, &mut rng(2)).unwrap();
        assert_eq!(d1, d2);
        assert_abs_diff_eq!(a.value, policy.value(&obs, &z).unwrap());
    }

    #[test]
    fn code_sampler_cycle_and_noise_bound() {
        let mut s = CodeSampler::new();
        let mut r = rng(8);
        let first: Vec<_> = (0..25).map(|_| s.sample_with_noise(&mut r, 0.0)).collect();
        let mut uniq = first.clone();
        uniq.sort_by(|a, b| a.partial_cmp(b).unwrap());
        uniq.dedup();
        assert_eq!(uniq.len(), 25);
        assert_eq!(s.sample_with_noise(&mut r, 0.0), first[0]);
        for _ in 0..1000 {
            let c = s.sample(&mut r);
            let near = first
                .iter()
                .any(|g| ((c[0] - g[0]).powi(2) + (c[1] - g[1]).powi(2)).sqrt() <= 0.2 * 2f64.sqrt() + 1e-12);
            assert!(near && c.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn code_sampler_grid_coverage() {
        let mut s = CodeSampler::new();
        let mut r = rng(10);
        let mut hist = [0usize; 25];
        for _ in 0..2500 {
            let c = s.sample(&mut r);
            let cell = |v: f64| (((v + 1.0) / 0.4).floor() as usize).min(4);
            hist[cell(c[0]) * 5 + cell(c[1])] += 1;
        }
        assert!(hist.iter().all(|&h| (60..=140).contains(&h)), "{hist:?}");
    }

    #[test]
    fn disc_loss_gradients_match_finite_differences() {
        for mode in [DiscLoss::CrossEntropy, DiscLoss::LeastSquares] {
            let mut r = rng(11);
            let d = Discriminator::<f64>::new(mode, DiscInput::Joint, &mut r);
            let (e, p) = (random(6, 14, &mut r), random(5, 14, &mut r));
            let report = finite_diff_check(
                d.net.tensors(),
                |params| {
                    let mut tape = Tape::new();
                    let b = d.net.bind_with(&mut tape, params);
                    let (ev, pv) = (tape.constant(e.clone()), tape.constant(p.clone()));
                    let l = disc_loss_on_tape(&mut tape, &b, mode, ev, pv);
                    let g = tape.backward(l).unwrap();
                    (tape.scalar(l), g.collect(&b.vars))
                },
                1e-5,
                200,
                &mut r,
            );
            assert!(report.max_rel_err <= 1e-4, "{mode:?}: {report:?}");
        }
    }

    #[test]
    fn ppo_clip_uses_clipped_ratio_for_positive_advantage() {
        // One-dimensional check of the surrogate at ratio 1.5, clip 0.2.
        let mut tape = Tape::<f64>::new();
        let ratio = tape.constant(array![[1.5]]);
        let adv = tape.constant(array![[2.0]]);
        let s1 = tape.mul(ratio, adv);
        let c = tape.clamp(ratio, 0.8, 1.2);
        let s2 = tape.mul(c, adv);
        let m = tape.min(s1, s2);
        assert_abs_diff_eq!(tape.scalar(m), 2.4, epsilon = 1e-12);
    }
}
