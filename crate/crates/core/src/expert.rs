//! Scripted demonstrators for the four collaboration strategies and a
//! rule-based classifier that recovers the strategy from a trajectory.
//!
//! | strategy | fetches first | human's treasure |
//! |----------|---------------|------------------|
//! | 1        | robot         | room 0           |
//! | 2        | human         | room 0           |
//! | 3        | robot         | room 1           |
//! | 4        | human         | room 1           |
//!
//! Plans 2 and 4 are the images of plans 1 and 3 under the map's point
//! reflection combined with swapping the two agents.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::{Agent, AgentAction, EnvState, FetchQuest, Observation, Vec2};
use crate::CoreError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Strategy(u8);

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy(1), Strategy(2), Strategy(3), Strategy(4)];

    pub fn new(id: u8) -> Result<Self, CoreError> {
        if (1..=4).contains(&id) {
            Ok(Self(id))
        } else {
            Err(CoreError::Config(format!("strategy id {id} outside 1..=4")))
        }
    }

    pub fn id(self) -> u8 {
        self.0
    }

    /// 0-based index for histograms.
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    fn from_parts(robot_first: bool, nominal: bool) -> Self {
        match (robot_first, nominal) {
            (true, true) => Strategy(1),
            (false, true) => Strategy(2),
            (true, false) => Strategy(3),
            (false, false) => Strategy(4),
        }
    }
}

/// Condition that must hold, after arriving, before a waypoint is released.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    Arrive,
    DoorOpen(usize),
    /// Released once this agent carries the treasure (target is its spawn).
    Pickup(usize),
    /// Hold position until the partner carries the treasure.
    PartnerCarries(usize),
    Hold,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Waypoint {
    pub target: Vec2,
    pub gate: Gate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertPlan {
    pub strategy: Strategy,
    pub human: Vec<Waypoint>,
    pub robot: Vec<Waypoint>,
    pub noise: f64,
}

/// Waypoint cursor for one rollout of an [`ExpertPlan`].
#[derive(Clone, Debug, PartialEq)]
pub struct ScriptedExpert {
    pub plan: ExpertPlan,
    cursor: [usize; 2],
}

pub const ARRIVE_TOL: f64 = 0.1;
pub const DEFAULT_NOISE: f64 = 0.05;

impl ExpertPlan {
    pub fn new(env: &FetchQuest, strategy: Strategy, noise: f64) -> Self {
        match strategy.id() {
            1 => Self::robot_first(env, strategy, 1, noise),
            3 => Self::robot_first(env, strategy, 0, noise),
            2 => Self::new(env, Strategy(1), noise).mirrored(env, strategy),
            _ => Self::new(env, Strategy(3), noise).mirrored(env, strategy),
        }
    }

    /// The human first opens room `robot_room` for the robot; the robot then
    /// opens the other room for the human. Both finish in the destination
    /// nearest their last task.
    fn robot_first(env: &FetchQuest, strategy: Strategy, robot_room: usize, noise: f64) -> Self {
        let l = &env.layout;
        let human_room = 1 - robot_room;
        let approach = |room: usize| {
            // Just outside the door corner, on the map-centre side.
            let r = &l.rooms[room];
            let corner = if room == 0 {
                Vec2::new(r.max.x, r.min.y)
            } else {
                Vec2::new(r.min.x, r.max.y)
            };
            let out = if room == 0 {
                Vec2::new(0.3, -0.3)
            } else {
                Vec2::new(-0.3, 0.3)
            };
            corner + out
        };
        let nearest_dest = |from: Vec2| {
            let [a, b] = l.destinations;
            if from.dist(a.center) <= from.dist(b.center) {
                a.center
            } else {
                b.center
            }
        };
        let robot_button = l.buttons[human_room].center;
        let robot_dest = nearest_dest(robot_button);
        let human_dest = if robot_dest == l.destinations[0].center {
            l.destinations[1].center
        } else {
            l.destinations[0].center
        };
        let human = vec![
            Waypoint {
                target: l.buttons[robot_room].center,
                gate: Gate::PartnerCarries(robot_room),
            },
            Waypoint {
                target: approach(human_room),
                gate: Gate::DoorOpen(human_room),
            },
            Waypoint {
                target: l.treasure_spawns[human_room],
                gate: Gate::Pickup(human_room),
            },
            Waypoint {
                target: human_dest,
                gate: Gate::Hold,
            },
        ];
        let robot = vec![
            Waypoint {
                target: approach(robot_room),
                gate: Gate::DoorOpen(robot_room),
            },
            Waypoint {
                target: l.treasure_spawns[robot_room],
                gate: Gate::Pickup(robot_room),
            },
            Waypoint {
                target: robot_button,
                gate: Gate::PartnerCarries(human_room),
            },
            Waypoint {
                target: robot_dest,
                gate: Gate::Hold,
            },
        ];
        Self {
            strategy,
            human,
            robot,
            noise,
        }
    }

    /// Point-reflects every waypoint and swaps the agents' scripts.
    fn mirrored(self, env: &FetchQuest, strategy: Strategy) -> Self {
        let flip = |w: &Waypoint| Waypoint {
            target: env.mirror(w.target),
            gate: match w.gate {
                Gate::DoorOpen(i) => Gate::DoorOpen(1 - i),
                Gate::Pickup(i) => Gate::Pickup(1 - i),
                Gate::PartnerCarries(i) => Gate::PartnerCarries(1 - i),
                g => g,
            },
        };
        Self {
            strategy,
            human: self.robot.iter().map(flip).collect(),
            robot: self.human.iter().map(flip).collect(),
            noise: self.noise,
        }
    }
}

impl ScriptedExpert {
    pub fn new(plan: ExpertPlan) -> Self {
        Self { plan, cursor: [0, 0] }
    }

    pub fn strategy(&self) -> Strategy {
        self.plan.strategy
    }

    /// Commands for both agents in `state`: a saturating proportional
    /// controller toward the current waypoint plus Gaussian command noise.
    pub fn act<R: Rng + ?Sized>(
        &mut self,
        env: &FetchQuest,
        state: &EnvState,
        rng: &mut R,
    ) -> (AgentAction, AgentAction) {
        let h = self.command(env, state, Agent::Human);
        let r = self.command(env, state, Agent::Robot);
        if self.plan.noise > 0.0 {
            let n = Normal::new(0.0, self.plan.noise).expect("finite noise");
            let mut jitter = |a: AgentAction| AgentAction::new(a.dx + n.sample(rng), a.dy + n.sample(rng));
            (jitter(h), jitter(r))
        } else {
            (h, r)
        }
    }

    fn command(&mut self, env: &FetchQuest, state: &EnvState, agent: Agent) -> AgentAction {
        let slot = match agent {
            Agent::Human => 0,
            Agent::Robot => 1,
        };
        let script = match agent {
            Agent::Human => &self.plan.human,
            Agent::Robot => &self.plan.robot,
        };
        let pos = state.pos(agent);
        while self.cursor[slot] + 1 < script.len() {
            let w = script[self.cursor[slot]];
            let arrived = pos.dist(w.target) <= ARRIVE_TOL;
            let released = match w.gate {
                Gate::Arrive => arrived,
                Gate::DoorOpen(i) => arrived && state.door_open[i],
                Gate::Pickup(i) => state.carried_by(agent) == Some(i),
                Gate::PartnerCarries(i) => state.carried_by(agent.other()) == Some(i),
                Gate::Hold => false,
            };
            if !released {
                break;
            }
            self.cursor[slot] += 1;
        }
        let target = script[self.cursor[slot]].target;
        let d = (target - pos) * (1.0 / env.layout.speed_scale);
        AgentAction::new(d.x, d.y)
    }
}

/// One recorded rollout of a scripted expert.
#[derive(Clone, Debug)]
pub struct ScriptedRollout {
    pub observations: Vec<Observation>,
    pub human_actions: Vec<AgentAction>,
    pub robot_actions: Vec<AgentAction>,
    pub states: Vec<EnvState>,
    pub success: bool,
}

/// Runs `plan` from `reset(seed)` until the episode ends.
pub fn run_scripted<R: Rng + ?Sized>(env: &FetchQuest, plan: &ExpertPlan, seed: u64, rng: &mut R) -> ScriptedRollout {
    run_scripted_from(env, plan, env.reset(seed), rng)
}

pub fn run_scripted_from<R: Rng + ?Sized>(
    env: &FetchQuest,
    plan: &ExpertPlan,
    mut state: EnvState,
    rng: &mut R,
) -> ScriptedRollout {
    let mut expert = ScriptedExpert::new(plan.clone());
    let mut out = ScriptedRollout {
        observations: Vec::new(),
        human_actions: Vec::new(),
        robot_actions: Vec::new(),
        states: vec![state.clone()],
        success: false,
    };
    while !state.done {
        let (h, r) = expert.act(env, &state, rng);
        out.observations.push(env.observe(&state));
        out.human_actions.push(h);
        out.robot_actions.push(r);
        env.step_mut(&mut state, h, r).expect("episode not done");
        out.states.push(state.clone());
    }
    out.observations.push(env.observe(&state));
    out.success = state.success;
    out
}

const SAME_POS: f64 = 1e-12;

/// Labels a trajectory of observations by its first treasure pickup: which
/// agent picked up (robot → 1/3, human → 2/4) and whether that pairing is the
/// nominal one (robot with treasure 1 or human with treasure 0 → 1/2).
/// Returns `None` when no treasure ever leaves its spawn.
pub fn classify_strategy(observations: &[Observation]) -> Option<Strategy> {
    let first = observations.first()?;
    let spawn = |i: usize| (first[4 + 2 * i], first[5 + 2 * i]);
    for o in observations {
        for i in 0..2 {
            let t = (o[4 + 2 * i], o[5 + 2 * i]);
            let (sx, sy) = spawn(i);
            if (t.0 - sx).abs() <= SAME_POS && (t.1 - sy).abs() <= SAME_POS {
                continue;
            }
            let at = |x: f64, y: f64| (t.0 - x).abs() <= SAME_POS && (t.1 - y).abs() <= SAME_POS;
            let robot_first = if at(o[2], o[3]) {
                true
            } else if at(o[0], o[1]) {
                false
            } else {
                continue;
            };
            let nominal = if robot_first { i == 1 } else { i == 0 };
            return Some(Strategy::from_parts(robot_first, nominal));
        }
    }
    None
}
