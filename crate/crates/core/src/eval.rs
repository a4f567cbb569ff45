//! Evaluation protocols: strategy-space interpolation, open-loop replay of
//! held-out human trajectories, latent-code export and seed aggregation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::demos::{history_window, Demonstration, LiveHistory};
use crate::env::{AgentAction, FetchQuest, Observation};
use crate::expert::classify_strategy;
use crate::model::{policy_input, CODE_DIM};
use crate::train::Learner;
use crate::{CoreError, Scalar};

pub const DEFAULT_CODES: usize = 100;
/// Histogram slots: strategies 1–4, then unclassified.
pub const BUCKETS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Interpolation,
    Replay,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub index: usize,
    pub env_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub code: Option<[f64; CODE_DIM]>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub demo_id: Option<u64>,
    pub success: bool,
    pub strategy: Option<u8>,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    /// Training units completed by the evaluated checkpoint.
    pub episode: usize,
    pub n_trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Strategy of every trial (index 4 = unknown); sums to `n_trials`.
    pub histogram: [usize; BUCKETS],
    /// Strategy of the successful trials only; sums to `successes`.
    pub success_histogram: [usize; BUCKETS],
    pub trials: Vec<TrialRow>,
}

fn bucket(strategy: Option<u8>) -> usize {
    strategy.map_or(BUCKETS - 1, |s| s as usize - 1)
}

impl EvalReport {
    pub fn from_trials(protocol: Protocol, episode: usize, trials: Vec<TrialRow>) -> Self {
        let mut histogram = [0; BUCKETS];
        let mut success_histogram = [0; BUCKETS];
        for t in &trials {
            histogram[bucket(t.strategy)] += 1;
            if t.success {
                success_histogram[bucket(t.strategy)] += 1;
            }
        }
        let successes = trials.iter().filter(|t| t.success).count();
        let n = trials.len();
        Self {
            protocol,
            episode,
            n_trials: n,
            successes,
            success_rate: if n == 0 { 0.0 } else { successes as f64 / n as f64 },
            histogram,
            success_histogram,
            trials,
        }
    }

    /// Share of each strategy among successful trials (zeros when none).
    pub fn strategy_proportions(&self) -> [f64; 4] {
        let mut p = [0.0; 4];
        if self.successes > 0 {
            for (i, v) in p.iter_mut().enumerate() {
                *v = self.success_histogram[i] as f64 / self.successes as f64;
            }
        }
        p
    }

    pub fn min_strategy_proportion(&self) -> f64 {
        self.strategy_proportions().into_iter().fold(f64::INFINITY, f64::min)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// A demonstration reduced to what open-loop replay may see: its reset seed
/// and the human's actions. The robot's recorded actions are dropped here.
#[derive(Clone, Debug, PartialEq)]
pub struct HumanStream {
    pub demo_id: u64,
    pub seed: u64,
    pub actions: Vec<AgentAction>,
}

impl HumanStream {
    pub fn from_demo(demo: &Demonstration) -> Self {
        Self {
            demo_id: demo.meta.id,
            seed: demo.meta.seed,
            actions: demo.steps.iter().map(|s| s.ah).collect(),
        }
    }

    /// Recorded action at `t`, then zero once the recording runs out.
    pub fn at(&self, t: usize) -> AgentAction {
        self.actions.get(t).copied().unwrap_or(AgentAction::ZERO)
    }
}

fn clamp_pair<T: Scalar>(v: &[T]) -> AgentAction {
    AgentAction::new(v[0].f64(), v[1].f64())
}

/// Human action of the learned model at `(obs, z)`: the cloned human when
/// present, else the co-policy's human head.
fn model_human<T: Scalar>(
    learner: &Learner<T>,
    obs: &Observation,
    z: &[f64; CODE_DIM],
) -> Result<AgentAction, CoreError> {
    match &learner.frozen_human {
        Some(net) => Ok(clamp_pair(&net.forward_one(&policy_input::<T>(obs, &[0.0; CODE_DIM]))?)),
        None => Ok(clamp_pair(&learner.policy.mean(obs, z)?[..2])),
    }
}

/// Rolls out both heads deterministically under `n_codes` codes drawn
/// uniformly from `(-1, 1)²`.
pub fn eval_interpolation<T: Scalar>(
    env: &FetchQuest,
    learner: &Learner<T>,
    n_codes: usize,
    seed: u64,
) -> Result<EvalReport, CoreError> {
    if n_codes == 0 {
        return Err(CoreError::Config("n_codes must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let codes: Vec<[f64; CODE_DIM]> = (0..n_codes)
        .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
        .collect();
    eval_codes(env, learner, &codes, seed)
}

/// Deterministic closed-loop rollouts of both heads, one per code; reset
/// seeds are drawn from `seed`.
pub fn eval_codes<T: Scalar>(
    env: &FetchQuest,
    learner: &Learner<T>,
    codes: &[[f64; CODE_DIM]],
    seed: u64,
) -> Result<EvalReport, CoreError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut trials = Vec::with_capacity(codes.len());
    for (index, &z) in codes.iter().enumerate() {
        let env_seed: u64 = rng.gen();
        let mut s = env.reset(env_seed);
        let mut observations = vec![env.observe(&s)];
        while !s.done {
            let obs = *observations.last().expect("non-empty");
            let mean = learner.policy.mean(&obs, &z)?;
            let ah = model_human(learner, &obs, &z)?;
            env.step_mut(&mut s, ah, clamp_pair(&mean[2..]))?;
            observations.push(env.observe(&s));
        }
        trials.push(TrialRow {
            index,
            env_seed,
            code: Some(z),
            demo_id: None,
            success: s.success,
            strategy: classify_strategy(&observations).map(|s| s.id()),
            steps: s.step as usize,
        });
    }
    Ok(EvalReport::from_trials(
        Protocol::Interpolation,
        learner.episode,
        trials,
    ))
}

/// Replays each human stream open loop from its recorded seed while the
/// robot head acts on `ψ`'s running estimate of the strategy.
pub fn eval_replay<T: Scalar>(
    env: &FetchQuest,
    learner: &Learner<T>,
    streams: &[HumanStream],
    history: usize,
) -> Result<EvalReport, CoreError> {
    let mut trials = Vec::with_capacity(streams.len());
    let mut flat = Vec::new();
    for (index, stream) in streams.iter().enumerate() {
        let mut s = env.reset(stream.seed);
        let first = env.observe(&s);
        let mut hist = LiveHistory::new(history, first);
        let mut observations = vec![first];
        while !s.done {
            let obs = *observations.last().expect("non-empty");
            flat.clear();
            hist.write_flat(&mut flat);
            let zhat = learner.psi.recognize(&flat)?;
            let mean = learner.policy.mean(&obs, &zhat)?;
            let ah = stream.at(s.step as usize);
            env.step_mut(&mut s, ah, clamp_pair(&mean[2..]))?;
            let next = env.observe(&s);
            hist.advance(ah, next);
            observations.push(next);
        }
        trials.push(TrialRow {
            index,
            env_seed: stream.seed,
            code: None,
            demo_id: Some(stream.demo_id),
            success: s.success,
            strategy: classify_strategy(&observations).map(|s| s.id()),
            steps: s.step as usize,
        });
    }
    Ok(EvalReport::from_trials(Protocol::Replay, learner.episode, trials))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentRow {
    pub demo_id: u64,
    pub strategy: Option<u8>,
    pub mean_z: [f64; CODE_DIM],
}

/// Mean `ψ(h_t)` over each demonstration's own recorded history.
pub fn export_latent<T: Scalar>(
    learner: &Learner<T>,
    demos: &[Demonstration],
    history: usize,
) -> Result<Vec<LatentRow>, CoreError> {
    demos
        .iter()
        .map(|d| {
            let obs = d.observations();
            let ah = d.human_actions();
            let mut sum = [0.0; CODE_DIM];
            for t in 0..d.len() {
                let z = learner
                    .psi
                    .recognize(&history_window(&obs, &ah, t, history).flatten())?;
                sum[0] += z[0];
                sum[1] += z[1];
            }
            let n = d.len().max(1) as f64;
            Ok(LatentRow {
                demo_id: d.meta.id,
                strategy: classify_strategy(&obs).map(|s| s.id()).or(d.meta.strategy),
                mean_z: [sum[0] / n, sum[1] / n],
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    /// Mean distance of a trajectory code to its strategy's centroid,
    /// averaged over strategies.
    pub within: f64,
    /// Mean pairwise distance between strategy centroids.
    pub between: f64,
    pub ratio: f64,
}

pub fn cluster_stats(rows: &[LatentRow]) -> Result<ClusterStats, CoreError> {
    let mut groups: Vec<Vec<[f64; 2]>> = vec![Vec::new(); 4];
    for r in rows {
        if let Some(s) = r.strategy {
            groups[s as usize - 1].push(r.mean_z);
        }
    }
    groups.retain(|g| !g.is_empty());
    if groups.len() < 2 {
        return Err(CoreError::Config("need at least two labelled strategies".into()));
    }
    let dist = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let centroids: Vec<[f64; 2]> = groups
        .iter()
        .map(|g| {
            let n = g.len() as f64;
            [
                g.iter().map(|p| p[0]).sum::<f64>() / n,
                g.iter().map(|p| p[1]).sum::<f64>() / n,
            ]
        })
        .collect();
    let within = groups
        .iter()
        .zip(&centroids)
        .map(|(g, c)| g.iter().map(|&p| dist(p, *c)).sum::<f64>() / g.len() as f64)
        .sum::<f64>()
        / groups.len() as f64;
    let mut pairs = 0;
    let mut between = 0.0;
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            between += dist(centroids[i], centroids[j]);
            pairs += 1;
        }
    }
    between /= pairs as f64;
    let ratio = if between > 0.0 { within / between } else { f64::INFINITY };
    Ok(ClusterStats { within, between, ratio })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub episodes: Vec<usize>,
    pub mean: Vec<f64>,
    /// Population standard deviation across seeds.
    pub std: Vec<f64>,
    pub best_index: usize,
    pub best_mean: f64,
    pub best_std: f64,
}

/// Per-checkpoint mean and spread of success across seeds; `series[s][c]` is
/// seed `s`'s report for checkpoint `c`. Ties resolve to the later checkpoint.
pub fn aggregate_seeds(series: &[Vec<EvalReport>]) -> Result<SeedAggregate, CoreError> {
    let first = series.first().ok_or_else(|| CoreError::Config("no reports".into()))?;
    if first.is_empty() {
        return Err(CoreError::Config("empty checkpoint series".into()));
    }
    let episodes: Vec<usize> = first.iter().map(|r| r.episode).collect();
    for s in series {
        if s.iter().map(|r| r.episode).collect::<Vec<_>>() != episodes
            || s.iter().any(|r| r.protocol != first[0].protocol)
        {
            return Err(CoreError::Config(
                "reports do not share a protocol and checkpoint schedule".into(),
            ));
        }
    }
    let n = series.len() as f64;
    let mut mean = Vec::with_capacity(episodes.len());
    let mut std = Vec::with_capacity(episodes.len());
    for c in 0..episodes.len() {
        let m = series.iter().map(|s| s[c].success_rate).sum::<f64>() / n;
        let v = series.iter().map(|s| (s[c].success_rate - m).powi(2)).sum::<f64>() / n;
        mean.push(m);
        std.push(v.sqrt());
    }
    let best_index = (0..mean.len()).fold(0, |b, i| if mean[i] >= mean[b] { i } else { b });
    Ok(SeedAggregate {
        best_mean: mean[best_index],
        best_std: std[best_index],
        episodes,
        mean,
        std,
        best_index,
    })
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demos::{generate_dataset, DatasetSpec};
    use crate::train::{Mode, TrainConfig};
    use approx::assert_abs_diff_eq;

    fn fresh(mode: Mode) -> Learner<f32> {
        Learner::new(&TrainConfig {
            mode,
            ..TrainConfig::default()
        })
    }

    fn report(rates: &[f64], episodes: &[usize]) -> Vec<EvalReport> {
        rates
            .iter()
            .zip(episodes)
            .map(|(&r, &e)| {
                let trials = (0..10)
                    .map(|i| TrialRow {
                        index: i,
                        env_seed: 0,
                        code: None,
                        demo_id: None,
                        success: (i as f64) < r * 10.0 - 1e-9,
                        strategy: Some(1),
                        steps: 1,
                    })
                    .collect();
                EvalReport::from_trials(Protocol::Replay, e, trials)
            })
            .collect()
    }

    #[test]
    fn random_init_models_fail_both_protocols() {
        let env = FetchQuest::default();
        let ds = generate_dataset(&env, &DatasetSpec::new(8, [0.25; 4], 3)).unwrap();
        let streams: Vec<_> = ds.demos.iter().map(HumanStream::from_demo).collect();
        for mode in [Mode::Cogail, Mode::BcSingle] {
            let l = fresh(mode);
            let r = eval_interpolation(&env, &l, 20, 1).unwrap();
            assert!(r.success_rate < 0.05);
            assert_eq!(r.histogram.iter().sum::<usize>(), r.n_trials);
            let r = eval_replay(&env, &l, &streams, 4).unwrap();
            assert!(r.success_rate < 0.05);
        }
    }

    #[test]
    fn interpolation_is_deterministic() {
        let env = FetchQuest::default();
        let l = fresh(Mode::Cogail);
        assert_eq!(
            eval_interpolation(&env, &l, 5, 9).unwrap(),
            eval_interpolation(&env, &l, 5, 9).unwrap()
        );
    }

    #[test]
    fn replay_ignores_recorded_robot_actions() {
        let env = FetchQuest::default();
        let ds = generate_dataset(&env, &DatasetSpec::new(4, [0.25; 4], 4)).unwrap();
        let mut poisoned = ds.demos.clone();
        for d in &mut poisoned {
            for s in &mut d.steps {
                s.ar = AgentAction {
                    dx: f64::NAN,
                    dy: f64::NAN,
                };
            }
        }
        let l = fresh(Mode::Cogail);
        let a: Vec<_> = ds.demos.iter().map(HumanStream::from_demo).collect();
        let b: Vec<_> = poisoned.iter().map(HumanStream::from_demo).collect();
        assert_eq!(a, b);
        assert_eq!(
            eval_replay(&env, &l, &a, 4).unwrap(),
            eval_replay(&env, &l, &b, 4).unwrap()
        );
    }

    #[test]
    fn recorded_robot_actions_replay_to_success() {
        // The fidelity baseline: feeding both recorded streams succeeds.
        let env = FetchQuest::default();
        let ds = generate_dataset(&env, &DatasetSpec::new(8, [0.25; 4], 5)).unwrap();
        for d in &ds.demos {
            let mut s = env.reset(d.meta.seed);
            for step in &d.steps {
                env.step_mut(&mut s, step.ah, step.ar).unwrap();
            }
            assert!(s.success);
        }
    }

    #[test]
    fn zero_recognition_exports_zero_codes() {
        let env = FetchQuest::default();
        let ds = generate_dataset(&env, &DatasetSpec::new(4, [0.25; 4], 6)).unwrap();
        let rows = export_latent(&fresh(Mode::BcSingle), &ds.demos, 4).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.mean_z == [0.0, 0.0]));
        let rows = export_latent(&fresh(Mode::Cogail), &ds.demos, 4).unwrap();
        assert!(rows.iter().all(|r| r.mean_z.iter().all(|v| v.abs() < 1.0)));
    }

    #[test]
    fn cluster_statistics() {
        let row = |s, x: f64, y: f64| LatentRow {
            demo_id: 0,
            strategy: Some(s),
            mean_z: [x, y],
        };
        let rows = vec![row(1, 0.5, 0.0), row(1, 0.7, 0.0), row(2, -0.5, 0.0), row(2, -0.7, 0.0)];
        let c = cluster_stats(&rows).unwrap();
        assert_abs_diff_eq!(c.within, 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(c.between, 1.2, epsilon = 1e-12);
        assert!(cluster_stats(&rows[..2]).is_err());
    }

    #[test]
    fn seed_aggregation() {
        let same = vec![report(&[0.3, 0.5], &[10, 20]); 3];
        let a = aggregate_seeds(&same).unwrap();
        assert_eq!(a.std, vec![0.0, 0.0]);
        assert_eq!(a.best_index, 1);

        let s = vec![report(&[0.4], &[10]), report(&[0.5], &[10]), report(&[0.6], &[10])];
        let a = aggregate_seeds(&s).unwrap();
        assert_abs_diff_eq!(a.mean[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(a.std[0], (0.02f64 / 3.0).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(a.std[0], 0.0816, epsilon = 1e-4);

        let mono = vec![report(&[0.1, 0.2, 0.3], &[1, 2, 3])];
        assert_eq!(aggregate_seeds(&mono).unwrap().best_index, 2);
        assert!(aggregate_seeds(&[report(&[0.1], &[1]), report(&[0.1], &[2])]).is_err());
    }

    #[test]
    fn histogram_conservation() {
        let trials = vec![
            TrialRow {
                index: 0,
                env_seed: 0,
                code: None,
                demo_id: None,
                success: true,
                strategy: Some(2),
                steps: 1,
            },
            TrialRow {
                index: 1,
                env_seed: 0,
                code: None,
                demo_id: None,
                success: false,
                strategy: None,
                steps: 1,
            },
            TrialRow {
                index: 2,
                env_seed: 0,
                code: None,
                demo_id: None,
                success: true,
                strategy: Some(4),
                steps: 1,
            },
        ];
        let r = EvalReport::from_trials(Protocol::Interpolation, 0, trials);
        assert_eq!(r.histogram, [0, 1, 0, 1, 1]);
        assert_eq!(r.success_histogram, [0, 1, 0, 1, 0]);
        assert_eq!(r.strategy_proportions(), [0.0, 0.5, 0.0, 0.5]);
        assert_abs_diff_eq!(r.success_rate, 2.0 / 3.0);
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
