//! Demonstration datasets: generation from the scripted experts, the
//! line-delimited file format, stratified splits and history windows.
//!
//! File layout, one JSON document per line:
//!
//! ```text
//! {"format_version":1,"env_version":"fetchquest-1","layout_hash":"…"}
//! {"meta":{…},"steps":[{"obs":[…10],"ah":{…},"ar":{…}},…]}
//! …
//! {"sha256":"<hex digest of every preceding byte>"}
//! ```

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{AgentAction, FetchQuest, Observation, ENV_VERSION, OBS_DIM};
use crate::expert::{classify_strategy, run_scripted, ExpertPlan, Strategy, DEFAULT_NOISE};
use crate::CoreError;

pub const DEMO_FORMAT_VERSION: u32 = 1;
/// History length K: ψ sees `K + 1` observations and the previous human action.
pub const DEFAULT_HISTORY: usize = 4;
pub const MAX_CONSECUTIVE_FAILURES: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoSource {
    Scripted,
    Ui,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoMeta {
    pub id: u64,
    pub env_version: String,
    /// Seed passed to `reset` for the first state.
    pub seed: u64,
    pub source: DemoSource,
    pub strategy: Option<u8>,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoStep {
    pub obs: Observation,
    pub ah: AgentAction,
    pub ar: AgentAction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub meta: DemoMeta,
    pub steps: Vec<DemoStep>,
}

impl Demonstration {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn observations(&self) -> Vec<Observation> {
        self.steps.iter().map(|s| s.obs).collect()
    }

    pub fn human_actions(&self) -> Vec<AgentAction> {
        self.steps.iter().map(|s| s.ah).collect()
    }

    pub fn strategy(&self) -> Option<Strategy> {
        self.meta.strategy.and_then(|s| Strategy::new(s).ok())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoHeader {
    pub format_version: u32,
    pub env_version: String,
    pub layout_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoDataset {
    pub header: DemoHeader,
    pub demos: Vec<Demonstration>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub total: usize,
    /// Share of strategies 1–4; must sum to one.
    pub proportions: [f64; 4],
    pub seed: u64,
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_noise() -> f64 {
    DEFAULT_NOISE
}

impl DatasetSpec {
    pub fn new(total: usize, proportions: [f64; 4], seed: u64) -> Self {
        Self {
            total,
            proportions,
            seed,
            noise: DEFAULT_NOISE,
        }
    }

    /// Builds a spec from percentage-like weights, e.g. `[17, 17, 33, 33]`.
    pub fn from_weights(total: usize, weights: [f64; 4], seed: u64) -> Result<Self, CoreError> {
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || !(sum > 0.0) {
            return Err(CoreError::Config(format!("invalid strategy weights {weights:?}")));
        }
        Ok(Self::new(total, weights.map(|w| w / sum), seed))
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        let sum: f64 = self.proportions.iter().sum();
        if self.proportions.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(CoreError::Config(format!(
                "strategy proportions {:?} must be non-negative and sum to 1",
                self.proportions
            )));
        }
        if self.total == 0 {
            return Err(CoreError::Config("dataset size must be positive".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(CoreError::Config("expert noise must be non-negative".into()));
        }
        Ok(())
    }

    /// Per-strategy counts by largest remainder (ties go to the lower id).
    pub fn counts(&self) -> [usize; 4] {
        let exact = self.proportions.map(|p| p * self.total as f64);
        let mut counts = exact.map(|e| e.floor() as usize);
        let assigned: usize = counts.iter().sum();
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| {
            let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
            fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        for &i in order.iter().take(self.total.saturating_sub(assigned)) {
            counts[i] += 1;
        }
        counts
    }
}

impl DemoDataset {
    pub fn new(env: &FetchQuest, demos: Vec<Demonstration>) -> Self {
        Self {
            header: DemoHeader {
                format_version: DEMO_FORMAT_VERSION,
                env_version: ENV_VERSION.to_string(),
                layout_hash: env.layout.hash(),
            },
            demos,
        }
    }

    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }

    pub fn total_steps(&self) -> usize {
        self.demos.iter().map(|d| d.len()).sum()
    }

    /// Number of demos per strategy label (index 0 = strategy 1).
    pub fn strategy_counts(&self) -> [usize; 4] {
        let mut c = [0; 4];
        for d in &self.demos {
            if let Some(s) = d.strategy() {
                c[s.index()] += 1;
            }
        }
        c
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(&self.header).expect("header serializes");
        out.push(b'\n');
        for d in &self.demos {
            serde_json::to_writer(&mut out, d).expect("demo serializes");
            out.push(b'\n');
        }
        let digest = hex::encode(Sha256::digest(&out));
        out.extend_from_slice(format!("{{\"sha256\":\"{digest}\"}}\n").as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CoreError> {
        let body_end = bytes
            .strip_suffix(b"\n")
            .and_then(|b| b.iter().rposition(|&c| c == b'\n'))
            .map(|i| i + 1)
            .ok_or(CoreError::Checksum)?;
        #[derive(Deserialize)]
        struct Trailer {
            sha256: String,
        }
        let trailer: Trailer = serde_json::from_slice(&bytes[body_end..]).map_err(|_| CoreError::Checksum)?;
        let body = &bytes[..body_end];
        if hex::encode(Sha256::digest(body)) != trailer.sha256 {
            return Err(CoreError::Checksum);
        }
        let mut lines = body.split(|&c| c == b'\n').filter(|l| !l.is_empty());
        let header: DemoHeader = serde_json::from_slice(lines.next().ok_or(CoreError::Checksum)?)
            .map_err(|e| CoreError::Format(format!("demo header: {e}")))?;
        if header.format_version != DEMO_FORMAT_VERSION {
            return Err(CoreError::Version {
                expected: DEMO_FORMAT_VERSION.to_string(),
                found: header.format_version.to_string(),
            });
        }
        if header.env_version != ENV_VERSION {
            return Err(CoreError::Version {
                expected: ENV_VERSION.to_string(),
                found: header.env_version,
            });
        }
        let demos = lines
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_slice::<Demonstration>(l)
                    .map_err(|e| CoreError::Format(format!("demo record {i}: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if demos.iter().any(|d| d.is_empty()) {
            return Err(CoreError::Format("empty demonstration".into()));
        }
        Ok(Self { header, demos })
    }

    pub fn save(&self, path: &Path) -> Result<(), CoreError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CoreError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CoreError> {
        let bytes = std::fs::read(path).map_err(|source| CoreError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// Checks the dataset was recorded on `env`'s layout.
    pub fn check_layout(&self, env: &FetchQuest) -> Result<(), CoreError> {
        let want = env.layout.hash();
        if self.header.layout_hash != want {
            return Err(CoreError::Version {
                expected: want,
                found: self.header.layout_hash.clone(),
            });
        }
        Ok(())
    }

    /// Stratified split by strategy label; `fraction` of each stratum
    /// (rounded, at least one demo on each side) goes to the first set.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(DemoDataset, DemoDataset), CoreError> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(CoreError::Config(format!("split fraction {fraction} outside (0, 1)")));
        }
        let mut strata: BTreeMap<Option<u8>, Vec<usize>> = BTreeMap::new();
        for (i, d) in self.demos.iter().enumerate() {
            strata.entry(d.meta.strategy).or_default().push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut first, mut second) = (Vec::new(), Vec::new());
        for (label, mut idx) in strata {
            if idx.len() < 2 {
                return Err(CoreError::Config(format!(
                    "stratum {label:?} has {} demo(s); need at least 2 to split",
                    idx.len()
                )));
            }
            idx.shuffle(&mut rng);
            let n = ((idx.len() as f64 * fraction).round() as usize).clamp(1, idx.len() - 1);
            first.extend_from_slice(&idx[..n]);
            second.extend_from_slice(&idx[n..]);
        }
        first.sort_unstable();
        second.sort_unstable();
        let pick = |ids: &[usize]| DemoDataset {
            header: self.header.clone(),
            demos: ids.iter().map(|&i| self.demos[i].clone()).collect(),
        };
        Ok((pick(&first), pick(&second)))
    }
}

/// Records successful scripted demonstrations until each strategy reaches its
/// requested count. Failed rollouts are discarded.
pub fn generate_dataset(env: &FetchQuest, spec: &DatasetSpec) -> Result<DemoDataset, CoreError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut demos = Vec::with_capacity(spec.total);
    for (strategy, count) in Strategy::ALL.into_iter().zip(spec.counts()) {
        let plan = ExpertPlan::new(env, strategy, spec.noise);
        let mut failures = 0;
        let mut made = 0;
        while made < count {
            let seed: u64 = rng.gen();
            let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
            let r = run_scripted(env, &plan, seed, &mut noise_rng);
            if !r.success || classify_strategy(&r.observations) != Some(strategy) {
                failures += 1;
                if failures > MAX_CONSECUTIVE_FAILURES {
                    return Err(CoreError::ExpertFailed(failures));
                }
                continue;
            }
            failures = 0;
            made += 1;
            let steps = r
                .human_actions
                .iter()
                .zip(&r.robot_actions)
                .zip(&r.observations)
                .map(|((&ah, &ar), &obs)| DemoStep { obs, ah, ar })
                .collect();
            demos.push(Demonstration {
                meta: DemoMeta {
                    id: seed,
                    env_version: ENV_VERSION.to_string(),
                    seed,
                    source: DemoSource::Scripted,
                    strategy: Some(strategy.id()),
                    success: true,
                },
                steps,
            });
        }
    }
    Ok(DemoDataset::new(env, demos))
}

/// Steps `env` from the demo's seed with the recorded actions; returns the
/// largest per-component observation deviation and whether the final state
/// was a success.
pub fn replay_deviation(env: &FetchQuest, demo: &Demonstration) -> Result<(f64, bool), CoreError> {
    let mut s = env.reset(demo.meta.seed);
    let mut worst = 0.0_f64;
    for step in &demo.steps {
        let o = env.observe(&s);
        for (a, b) in o.iter().zip(&step.obs) {
            worst = worst.max((a - b).abs());
        }
        env.step_mut(&mut s, step.ah, step.ar)?;
    }
    Ok((worst, s.success))
}

/// `(s_{t-K..t}, a^H_{t-1})`, front-padded with `s_0` and a zero action.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryWindow {
    pub observations: Vec<Observation>,
    pub prev_human: AgentAction,
}

impl HistoryWindow {
    pub fn flat_len(k: usize) -> usize {
        (k + 1) * OBS_DIM + 2
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.observations.iter().flatten().copied().collect();
        v.extend_from_slice(&self.prev_human.as_array());
        v
    }
}

pub fn history_window(
    observations: &[Observation],
    human_actions: &[AgentAction],
    t: usize,
    k: usize,
) -> HistoryWindow {
    assert!(t < observations.len(), "history index {t} out of range");
    let observations = (0..=k).map(|j| observations[(t + j).saturating_sub(k)]).collect();
    let prev_human = if t == 0 {
        AgentAction::ZERO
    } else {
        human_actions[t - 1]
    };
    HistoryWindow {
        observations,
        prev_human,
    }
}

/// Rolling history for live episodes; agrees with [`history_window`] on the
/// same trajectory.
#[derive(Clone, Debug)]
pub struct LiveHistory {
    k: usize,
    window: VecDeque<Observation>,
    prev_human: AgentAction,
}

impl LiveHistory {
    pub fn new(k: usize, first: Observation) -> Self {
        Self {
            k,
            window: std::iter::repeat_n(first, k + 1).collect(),
            prev_human: AgentAction::ZERO,
        }
    }

    /// Records the human action just taken and the observation it led to.
    pub fn advance(&mut self, human: AgentAction, next: Observation) {
        self.prev_human = human;
        self.window.pop_front();
        self.window.push_back(next);
    }

    pub fn window(&self) -> HistoryWindow {
        HistoryWindow {
            observations: self.window.iter().copied().collect(),
            prev_human: self.prev_human,
        }
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for o in &self.window {
            out.extend_from_slice(o);
        }
        out.extend_from_slice(&self.prev_human.as_array());
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

/// Flattened per-step view of a dataset for minibatch sampling.
#[derive(Clone, Debug)]
pub struct DemoIndex {
    pub k: usize,
    /// `(demo, t)` for every row.
    pub pairs: Vec<(usize, usize)>,
    pub history: Vec<f64>,
    pub obs: Vec<f64>,
    pub human: Vec<f64>,
    pub robot: Vec<f64>,
}

impl DemoIndex {
    pub fn new(dataset: &DemoDataset, k: usize) -> Self {
        let n = dataset.total_steps();
        let hl = HistoryWindow::flat_len(k);
        let mut ix = Self {
            k,
            pairs: Vec::with_capacity(n),
            history: Vec::with_capacity(n * hl),
            obs: Vec::with_capacity(n * OBS_DIM),
            human: Vec::with_capacity(n * 2),
            robot: Vec::with_capacity(n * 2),
        };
        for (d, demo) in dataset.demos.iter().enumerate() {
            let obs = demo.observations();
            let ah = demo.human_actions();
            for (t, step) in demo.steps.iter().enumerate() {
                ix.pairs.push((d, t));
                ix.history.extend(history_window(&obs, &ah, t, k).flatten());
                ix.obs.extend_from_slice(&step.obs);
                ix.human.extend_from_slice(&step.ah.as_array());
                ix.robot.extend_from_slice(&step.ar.as_array());
            }
        }
        ix
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Uniform draw (with replacement) over all `(demo, t)` rows.
    pub fn sample_batch<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<usize> {
        assert!(!self.is_empty(), "cannot sample from an empty dataset");
        (0..batch).map(|_| rng.gen_range(0..self.len())).collect()
    }

    pub fn history_row(&self, row: usize) -> &[f64] {
        let hl = HistoryWindow::flat_len(self.k);
        &self.history[row * hl..(row + 1) * hl]
    }

    pub fn obs_row(&self, row: usize) -> &[f64] {
        &self.obs[row * OBS_DIM..(row + 1) * OBS_DIM]
    }

    pub fn human_row(&self, row: usize) -> &[f64] {
        &self.human[row * 2..row * 2 + 2]
    }

    pub fn robot_row(&self, row: usize) -> &[f64] {
        &self.robot[row * 2..row * 2 + 2]
    }

    /// Whether every stored action lies in `[-1, 1]`.
    pub fn actions_in_range(&self) -> bool {
        self.human.iter().chain(&self.robot).all(|v| (-1.0..=1.0).contains(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, p: [f64; 4], seed: u64) -> DemoDataset {
        generate_dataset(&FetchQuest::default(), &DatasetSpec::new(n, p, seed)).unwrap()
    }

    #[test]
    fn largest_remainder_counts() {
        let d1 = DatasetSpec::from_weights(60, [17.0, 17.0, 33.0, 33.0], 0).unwrap();
        assert_eq!(d1.counts(), [10, 10, 20, 20]);
        let exact = DatasetSpec::new(60, [1.0 / 6.0, 1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0], 0);
        assert_eq!(exact.counts(), [10, 10, 20, 20]);
        assert_eq!(DatasetSpec::new(4, [0.25; 4], 0).counts(), [1, 1, 1, 1]);
        assert_eq!(DatasetSpec::new(7, [0.25; 4], 0).counts(), [2, 2, 2, 1]);
        assert!(DatasetSpec::new(4, [0.5, 0.5, 0.5, 0.0], 0).validate().is_err());
    }

    #[test]
    fn one_demo_per_strategy_with_matching_labels() {
        let ds = small(4, [0.25; 4], 11);
        assert_eq!(ds.strategy_counts(), [1, 1, 1, 1]);
        for d in &ds.demos {
            assert_eq!(classify_strategy(&d.observations()), d.strategy());
            assert!(d.meta.success);
        }
    }

    #[test]
    fn recorded_demos_replay_exactly() {
        let env = FetchQuest::default();
        let ds = small(8, [0.25; 4], 5);
        for d in &ds.demos {
            let (dev, success) = replay_deviation(&env, d).unwrap();
            assert!(dev <= 1e-9, "deviation {dev}");
            assert!(success);
        }
    }

    #[test]
    fn save_load_round_trip_is_byte_identical() {
        let ds = small(4, [0.25; 4], 2);
        let bytes = ds.to_bytes();
        let back = DemoDataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncated_or_tampered_files_fail_the_checksum() {
        let bytes = small(4, [0.25; 4], 2).to_bytes();
        for cut in [bytes.len() - 1, bytes.len() - 30, bytes.len() / 2, 10] {
            assert!(matches!(
                DemoDataset::from_bytes(&bytes[..cut]),
                Err(CoreError::Checksum)
            ));
        }
        let mut tampered = bytes.clone();
        let pos = tampered.iter().position(|&c| c == b'7').unwrap();
        tampered[pos] = b'8';
        assert!(matches!(DemoDataset::from_bytes(&tampered), Err(CoreError::Checksum)));
    }

    #[test]
    fn wrong_env_version_is_rejected() {
        let mut ds = small(4, [0.25; 4], 2);
        ds.header.env_version = "fetchquest-0".into();
        assert!(matches!(
            DemoDataset::from_bytes(&ds.to_bytes()),
            Err(CoreError::Version { .. })
        ));
    }

    #[test]
    fn stratified_split() {
        let ds = small(16, [0.25; 4], 3);
        let (a, b) = ds.split(0.5, 9).unwrap();
        assert_eq!(a.strategy_counts(), [2, 2, 2, 2]);
        assert_eq!(b.strategy_counts(), [2, 2, 2, 2]);
        let ids = |d: &DemoDataset| d.demos.iter().map(|x| x.meta.id).collect::<Vec<_>>();
        let (ia, ib) = (ids(&a), ids(&b));
        assert!(ia.iter().all(|i| !ib.contains(i)));
        let mut all: Vec<_> = ia.iter().chain(&ib).copied().collect();
        all.sort_unstable();
        let mut orig = ids(&ds);
        orig.sort_unstable();
        assert_eq!(all, orig);
        let (a2, _) = ds.split(0.5, 9).unwrap();
        assert_eq!(ids(&a2), ia);
        assert!(small(4, [0.25; 4], 3).split(0.5, 0).is_err());
        assert!(ds.split(1.0, 0).is_err());
    }

    #[test]
    fn history_padding_and_alignment() {
        let ds = small(4, [0.25; 4], 8);
        let d = &ds.demos[0];
        let (obs, ah) = (d.observations(), d.human_actions());
        let h0 = history_window(&obs, &ah, 0, 4);
        assert!(h0.observations.iter().all(|o| *o == obs[0]));
        assert_eq!(h0.prev_human, AgentAction::ZERO);
        let h4 = history_window(&obs, &ah, 4, 4);
        assert_eq!(h4.observations, obs[0..=4].to_vec());
        assert_eq!(h4.prev_human, ah[3]);
        assert_eq!(h4.flatten().len(), 52);
        assert_eq!(HistoryWindow::flat_len(4), 52);

        let mut live = LiveHistory::new(4, obs[0]);
        for t in 0..obs.len() {
            assert_eq!(live.window(), history_window(&obs, &ah, t, 4));
            if t + 1 < obs.len() {
                live.advance(ah[t], obs[t + 1]);
            }
        }
    }

    #[test]
    fn single_step_dataset_batch() {
        let env = FetchQuest::default();
        let s = env.reset(0);
        let demo = Demonstration {
            meta: DemoMeta {
                id: 1,
                env_version: ENV_VERSION.into(),
                seed: 0,
                source: DemoSource::Ui,
                strategy: None,
                success: false,
            },
            steps: vec![DemoStep {
                obs: env.observe(&s),
                ah: AgentAction::new(0.5, -0.5),
                ar: AgentAction::ZERO,
            }],
        };
        let ds = DemoDataset::new(&env, vec![demo]);
        let ix = DemoIndex::new(&ds, 4);
        let rows = ix.sample_batch(1, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(rows, vec![0]);
        assert_eq!(ix.human_row(0), &[0.5, -0.5]);
        assert_eq!(ix.obs_row(0), &env.observe(&s)[..]);
    }

    #[test]
    fn batch_sampling_is_uniform() {
        let ds = small(4, [0.25; 4], 4);
        let ix = DemoIndex::new(&ds, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let draws = 100_000;
        let mut hits = vec![0usize; ix.len()];
        for r in ix.sample_batch(draws, &mut rng) {
            hits[r] += 1;
        }
        let p = 1.0 / ix.len() as f64;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        // Per-demo totals within 3σ of their expected share.
        let mut offset = 0;
        for d in &ds.demos {
            let got: usize = hits[offset..offset + d.len()].iter().sum();
            let want = draws as f64 * d.len() as f64 / ix.len() as f64;
            let sd_d = (want * (1.0 - d.len() as f64 / ix.len() as f64)).sqrt();
            assert!((got as f64 - want).abs() < 3.0 * sd_d, "demo total {got} vs {want}");
            offset += d.len();
        }
        let worst = hits.iter().map(|&h| (h as f64 - mean).abs() / sd).fold(0.0, f64::max);
        assert!(worst < 5.0, "worst per-row z-score {worst}");
        assert!(ix.actions_in_range());
    }

    proptest::proptest! {
        #[test]
        fn apportioned_counts_sum_to_total_and_stay_within_one_of_exact(
            total in 1usize..500,
            weights in proptest::array::uniform4(0.0f64..10.0),
        ) {
            proptest::prop_assume!(weights.iter().sum::<f64>() > 1e-3);
            let spec = DatasetSpec::from_weights(total, weights, 0).unwrap();
            let counts = spec.counts();
            proptest::prop_assert_eq!(counts.iter().sum::<usize>(), total);
            for (c, p) in counts.iter().zip(spec.proportions) {
                proptest::prop_assert!((*c as f64 - p * total as f64).abs() < 1.0 + 1e-9);
            }
        }
    }
}
