//! One game session as a plain state machine. The server feeds it inbound
//! messages and calls [`Session::tick`] at the fixed rate; everything it wants
//! sent comes back as [`Outbound`] values, so the logic runs without sockets
//! or clocks.

use std::sync::Arc;

use cogail_core::demos::{DemoMeta, DemoSource, DemoStep, Demonstration, LiveHistory};
use cogail_core::env::{AgentAction, EnvState, FetchQuest, Observation, ENV_VERSION};
use cogail_core::expert::classify_strategy;
use cogail_core::Learner;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::protocol::{ClientMsg, ErrorCode, Role, ServerMsg, SessionMode};

pub type ConnId = u64;

/// A loaded checkpoint the robot can be driven by.
#[derive(Clone, Debug)]
pub struct PlaylistEntry {
    /// Blinded label shown to the operator.
    pub label: String,
    /// Where it came from; written to the session report only.
    pub source: String,
    pub learner: Learner,
    pub history: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SessionSettings {
    pub rounds: usize,
    pub round_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Outbound {
    pub to: ConnId,
    pub msg: ServerMsg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundOutcome {
    pub round: usize,
    pub seed: u64,
    pub label: Option<String>,
    pub source: Option<String>,
    pub success: bool,
    pub steps: usize,
    /// Ended by a disconnect rather than by the environment.
    pub aborted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub session: u64,
    pub mode: SessionMode,
    pub rounds: usize,
    pub successes: usize,
    pub outcomes: Vec<RoundOutcome>,
}

struct LiveRound {
    seed: u64,
    state: EnvState,
    steps: Vec<DemoStep>,
    /// Play mode: recognition history and the estimate for the current state.
    history: Option<(LiveHistory, [f64; 2])>,
    slot: Option<usize>,
}

pub struct Session {
    pub id: u64,
    pub mode: SessionMode,
    env: FetchQuest,
    settings: SessionSettings,
    playlist: Arc<Vec<PlaylistEntry>>,
    order: Vec<usize>,
    roles: [Option<ConnId>; 2],
    held: [AgentAction; 2],
    last_seq: [Option<u64>; 2],
    live: Option<LiveRound>,
    tick: u64,
    outcomes: Vec<RoundOutcome>,
    recordings: Vec<Demonstration>,
}

impl Session {
    pub fn new(
        id: u64,
        mode: SessionMode,
        env: FetchQuest,
        settings: SessionSettings,
        playlist: Arc<Vec<PlaylistEntry>>,
    ) -> Result<Self, ServerMsg> {
        let mut order = Vec::new();
        if mode == SessionMode::PlayVsPolicy {
            if playlist.is_empty() {
                return Err(ServerMsg::error(
                    ErrorCode::NoCheckpoint,
                    "play_vs_policy needs a checkpoint",
                ));
            }
            // Each block of |playlist| rounds visits every entry once.
            let mut rng = ChaCha8Rng::seed_from_u64(settings.round_seed);
            while order.len() < settings.rounds {
                let mut block: Vec<usize> = (0..playlist.len()).collect();
                block.shuffle(&mut rng);
                order.extend(block);
            }
            order.truncate(settings.rounds);
        }
        Ok(Self {
            id,
            mode,
            env,
            settings,
            playlist,
            order,
            roles: [None; 2],
            held: [AgentAction::ZERO; 2],
            last_seq: [None; 2],
            live: None,
            tick: 0,
            outcomes: Vec::new(),
            recordings: Vec::new(),
        })
    }

    pub fn members(&self) -> Vec<ConnId> {
        self.roles.iter().flatten().copied().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.iter().all(Option::is_none)
    }

    pub fn role_of(&self, conn: ConnId) -> Option<Role> {
        [Role::Human, Role::RobotHuman2]
            .into_iter()
            .find(|r| self.roles[r.index()] == Some(conn))
    }

    pub fn has_free(&self, role: Role) -> bool {
        self.roles[role.index()].is_none()
    }

    pub fn round_live(&self) -> bool {
        self.live.is_some()
    }

    pub fn complete(&self) -> bool {
        self.outcomes.len() >= self.settings.rounds
    }

    pub fn outcomes(&self) -> &[RoundOutcome] {
        &self.outcomes
    }

    pub fn recordings(&self) -> &[Demonstration] {
        &self.recordings
    }

    pub fn report(&self) -> SessionReport {
        SessionReport {
            session: self.id,
            mode: self.mode,
            rounds: self.settings.rounds,
            successes: self.outcomes.iter().filter(|o| o.success).count(),
            outcomes: self.outcomes.clone(),
        }
    }

    fn reply(conn: ConnId, code: ErrorCode, detail: impl Into<String>) -> Vec<Outbound> {
        vec![Outbound {
            to: conn,
            msg: ServerMsg::error(code, detail),
        }]
    }

    fn broadcast(&self, msg: ServerMsg) -> Vec<Outbound> {
        self.members()
            .into_iter()
            .map(|to| Outbound { to, msg: msg.clone() })
            .collect()
    }

    fn lobby(&self) -> Vec<Outbound> {
        let joined = [Role::Human, Role::RobotHuman2]
            .into_iter()
            .filter(|r| !self.has_free(*r))
            .collect();
        self.broadcast(ServerMsg::Lobby {
            mode: self.mode,
            joined,
            rounds: self.settings.rounds,
        })
    }

    fn round_report(&self) -> Vec<Outbound> {
        let successes = self.outcomes.iter().filter(|o| o.success).count();
        self.broadcast(ServerMsg::RoundReport {
            successes,
            rounds: self.outcomes.len(),
        })
    }

    pub fn join(&mut self, conn: ConnId, role: Role) -> Vec<Outbound> {
        if self.role_of(conn).is_some() {
            return Self::reply(conn, ErrorCode::AlreadyJoined, "connection already holds a role");
        }
        if self.mode == SessionMode::PlayVsPolicy && role != Role::Human {
            return Self::reply(conn, ErrorCode::BadRole, "play_vs_policy has only the human role");
        }
        if !self.has_free(role) {
            return Self::reply(conn, ErrorCode::RoleTaken, format!("role {role:?} is taken"));
        }
        self.roles[role.index()] = Some(conn);
        self.lobby()
    }

    /// Drops `conn`; a round in progress is aborted and counted as failed.
    pub fn leave(&mut self, conn: ConnId) -> Vec<Outbound> {
        let Some(role) = self.role_of(conn) else {
            return Vec::new();
        };
        self.roles[role.index()] = None;
        self.held[role.index()] = AgentAction::ZERO;
        self.last_seq[role.index()] = None;
        let mut out = Vec::new();
        if self.live.is_some() {
            self.finish_round(true);
            out.extend(self.round_report());
        }
        out.extend(self.lobby());
        out
    }

    pub fn handle(&mut self, conn: ConnId, msg: ClientMsg) -> Vec<Outbound> {
        let Some(role) = self.role_of(conn) else {
            return Self::reply(conn, ErrorCode::NotJoined, "join a session first");
        };
        match msg {
            ClientMsg::Join { .. } => Self::reply(conn, ErrorCode::AlreadyJoined, "connection already holds a role"),
            ClientMsg::Action { seq, dx, dy } => {
                if !(dx.is_finite() && dy.is_finite()) {
                    return Self::reply(conn, ErrorCode::BadAction, "action components must be finite");
                }
                let i = role.index();
                // Resends and reordered frames are ignored.
                if self.last_seq[i].is_none_or(|s| seq > s) {
                    self.last_seq[i] = Some(seq);
                    self.held[i] = AgentAction::new(dx, dy);
                }
                Vec::new()
            }
            ClientMsg::Start => {
                if self.live.is_some() {
                    return Self::reply(conn, ErrorCode::RoundActive, "a round is already running");
                }
                if self.complete() {
                    return Self::reply(conn, ErrorCode::SessionComplete, "all rounds have been played");
                }
                if self.mode == SessionMode::CollectTwoHuman && self.roles.iter().any(Option::is_none) {
                    return Self::reply(conn, ErrorCode::NotReady, "both roles must join before start");
                }
                self.start_round();
                self.state_frame()
            }
            ClientMsg::Reset => {
                if self.live.is_none() {
                    return Self::reply(conn, ErrorCode::NotReady, "no round is running");
                }
                // Restart the same round; the tally is untouched.
                self.start_round();
                self.state_frame()
            }
        }
    }

    fn start_round(&mut self) {
        let round = self.outcomes.len();
        let seed = self.settings.round_seed + round as u64;
        let state = self.env.reset(seed);
        let slot = self.order.get(round).copied();
        let history = slot.map(|s| {
            let entry = &self.playlist[s];
            let h = LiveHistory::new(entry.history, self.env.observe(&state));
            let z = recognize(entry, &h);
            (h, z)
        });
        self.held = [AgentAction::ZERO; 2];
        self.live = Some(LiveRound {
            seed,
            state,
            steps: Vec::new(),
            history,
            slot,
        });
    }

    fn label(&self, slot: Option<usize>) -> Option<String> {
        slot.map(|s| self.playlist[s].label.clone())
    }

    fn state_frame(&self) -> Vec<Outbound> {
        let Some(live) = &self.live else { return Vec::new() };
        self.broadcast(ServerMsg::State {
            tick: self.tick,
            obs: self.env.observe(&live.state),
            done: live.state.done,
            success: live.state.success,
            zhat: live.history.as_ref().map(|(_, z)| *z),
            round: self.outcomes.len(),
            label: self.label(live.slot),
        })
    }

    /// Advances a running round by one environment step.
    pub fn tick(&mut self) -> Vec<Outbound> {
        let Some(live) = &mut self.live else { return Vec::new() };
        let obs = self.env.observe(&live.state);
        let human = self.held[Role::Human.index()];
        let robot = match (&live.history, live.slot) {
            (Some((_, z)), Some(s)) => robot_action(&self.playlist[s], &obs, z),
            _ => self.held[Role::RobotHuman2.index()],
        };
        self.env
            .step_mut(&mut live.state, human, robot)
            .expect("live round is not done");
        live.steps.push(DemoStep {
            obs,
            ah: human,
            ar: robot,
        });
        let next = self.env.observe(&live.state);
        if let (Some((h, z)), Some(s)) = (&mut live.history, live.slot) {
            h.advance(human, next);
            *z = recognize(&self.playlist[s], h);
        }
        self.tick += 1;
        let mut out = self.state_frame();
        if self.live.as_ref().is_some_and(|l| l.state.done) {
            self.finish_round(false);
            out.extend(self.round_report());
        }
        out
    }

    fn finish_round(&mut self, aborted: bool) {
        let live = self.live.take().expect("round is live");
        let round = self.outcomes.len();
        let success = live.state.success && !aborted;
        let mut observations: Vec<Observation> = live.steps.iter().map(|s| s.obs).collect();
        observations.push(self.env.observe(&live.state));
        self.recordings.push(Demonstration {
            meta: DemoMeta {
                id: (self.id << 16) | round as u64,
                env_version: ENV_VERSION.to_string(),
                seed: live.seed,
                source: DemoSource::Ui,
                strategy: classify_strategy(&observations).map(|s| s.id()),
                success,
            },
            steps: live.steps,
        });
        self.outcomes.push(RoundOutcome {
            round,
            seed: live.seed,
            label: self.label(live.slot),
            source: live.slot.map(|s| self.playlist[s].source.clone()),
            success,
            steps: self.recordings.last().map_or(0, |d| d.len()),
            aborted,
        });
    }
}

fn recognize(entry: &PlaylistEntry, history: &LiveHistory) -> [f64; 2] {
    let mut flat = Vec::new();
    history.write_flat(&mut flat);
    entry
        .learner
        .psi
        .recognize(&flat)
        .expect("history width matches the checkpoint")
}

fn robot_action(entry: &PlaylistEntry, obs: &Observation, z: &[f64; 2]) -> AgentAction {
    let mean = entry
        .learner
        .policy
        .mean(obs, z)
        .expect("observation width matches the checkpoint");
    AgentAction::new(f64::from(mean[2]), f64::from(mean[3]))
}
