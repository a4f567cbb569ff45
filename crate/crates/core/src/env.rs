//! The two-agent fetch game: an 8×8 map with two locked corner rooms, a
//! button beside each room that holds its door open, a treasure inside each
//! room and two destination zones.
//!
//! The simulator is a pure state machine. [`FetchQuest::step`] is a function
//! of `(state, human action, robot action)`; randomness only enters through
//! the start jitter drawn in [`FetchQuest::reset`].

use std::ops::{Add, Mul, Neg, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CoreError;

/// Bumped whenever dynamics or layout semantics change.
pub const ENV_VERSION: &str = "fetchquest-1";
pub const OBS_DIM: usize = 10;
pub const ACTION_DIM: usize = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, other: Vec2) -> f64 {
        (self - other).norm()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Per-agent translation command, each component in `[-1, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentAction {
    pub dx: f64,
    pub dy: f64,
}

impl AgentAction {
    pub const ZERO: AgentAction = AgentAction { dx: 0.0, dy: 0.0 };

    /// Clamps both components into `[-1, 1]`; non-finite input becomes 0.
    pub fn new(dx: f64, dy: f64) -> Self {
        let c = |v: f64| if v.is_finite() { v.clamp(-1.0, 1.0) } else { 0.0 };
        Self { dx: c(dx), dy: c(dy) }
    }

    pub fn as_array(self) -> [f64; 2] {
        [self.dx, self.dy]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Agent {
    Human,
    Robot,
}

impl Agent {
    pub fn other(self) -> Agent {
        match self {
            Agent::Human => Agent::Robot,
            Agent::Robot => Agent::Human,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WallAxis {
    /// A vertical wall, crossed by motion along x.
    X,
    /// A horizontal wall, crossed by motion along y.
    Y,
}

/// Opening in a room wall: the wall `axis = at`, spanning `[lo, hi]` along
/// the other coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoorSegment {
    pub axis: WallAxis,
    pub at: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Room {
    pub min: Vec2,
    pub max: Vec2,
    pub door: Vec<DoorSegment>,
}

impl Room {
    /// Interior test. Sides lying on the map border are closed, inner walls
    /// are open, so standing exactly on an inner wall counts as outside.
    pub fn contains(&self, p: Vec2, map_size: f64) -> bool {
        let lower = |v: f64, lo: f64| if lo <= 0.0 { v >= lo } else { v > lo };
        let upper = |v: f64, hi: f64| if hi >= map_size { v <= hi } else { v < hi };
        lower(p.x, self.min.x) && upper(p.x, self.max.x) && lower(p.y, self.min.y) && upper(p.y, self.max.y)
    }

    fn door_admits(&self, axis: WallAxis, crossing: f64) -> bool {
        self.door
            .iter()
            .any(|d| d.axis == axis && crossing >= d.lo && crossing <= d.hi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub center: Vec2,
    pub radius: f64,
}

impl Zone {
    pub fn contains(&self, p: Vec2) -> bool {
        p.dist(self.center) <= self.radius
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layout {
    pub map_size: f64,
    pub rooms: [Room; 2],
    pub buttons: [Zone; 2],
    pub destinations: [Zone; 2],
    pub treasure_spawns: [Vec2; 2],
    pub human_start: Vec2,
    pub robot_start: Vec2,
    pub start_jitter: f64,
    pub pickup_radius: f64,
    pub speed_scale: f64,
    pub max_steps: u32,
}

impl Default for Layout {
    fn default() -> Self {
        let room0 = Room {
            min: Vec2::new(0.0, 6.4),
            max: Vec2::new(1.6, 8.0),
            door: vec![
                DoorSegment {
                    axis: WallAxis::X,
                    at: 1.6,
                    lo: 6.4,
                    hi: 7.2,
                },
                DoorSegment {
                    axis: WallAxis::Y,
                    at: 6.4,
                    lo: 0.8,
                    hi: 1.6,
                },
            ],
        };
        let room1 = Room {
            min: Vec2::new(6.4, 0.0),
            max: Vec2::new(8.0, 1.6),
            door: vec![
                DoorSegment {
                    axis: WallAxis::X,
                    at: 6.4,
                    lo: 0.8,
                    hi: 1.6,
                },
                DoorSegment {
                    axis: WallAxis::Y,
                    at: 1.6,
                    lo: 6.4,
                    hi: 7.2,
                },
            ],
        };
        Self {
            map_size: 8.0,
            rooms: [room0, room1],
            buttons: [
                Zone {
                    center: Vec2::new(2.6, 7.2),
                    radius: 0.4,
                },
                Zone {
                    center: Vec2::new(5.4, 0.8),
                    radius: 0.4,
                },
            ],
            destinations: [
                Zone {
                    center: Vec2::new(0.8, 0.8),
                    radius: 0.5,
                },
                Zone {
                    center: Vec2::new(7.2, 7.2),
                    radius: 0.5,
                },
            ],
            treasure_spawns: [Vec2::new(0.8, 7.2), Vec2::new(7.2, 0.8)],
            human_start: Vec2::new(3.0, 4.0),
            robot_start: Vec2::new(5.0, 4.0),
            start_jitter: 0.3,
            pickup_radius: 0.3,
            speed_scale: 0.15,
            max_steps: 300,
        }
    }
}

impl Layout {
    pub fn validate(&self) -> Result<(), CoreError> {
        let bad = |m: &str| Err(CoreError::Config(format!("layout: {m}")));
        if !(self.map_size > 0.0) || !(self.speed_scale > 0.0) || self.max_steps == 0 {
            return bad("map_size, speed_scale and max_steps must be positive");
        }
        for (i, room) in self.rooms.iter().enumerate() {
            if room.min.x >= room.max.x || room.min.y >= room.max.y {
                return bad(&format!("room {i} is empty"));
            }
            if room.contains(self.buttons[i].center, self.map_size) {
                return bad(&format!("button {i} lies inside its room"));
            }
            if !room.contains(self.treasure_spawns[i], self.map_size) {
                return bad(&format!("treasure {i} spawns outside its room"));
            }
        }
        Ok(())
    }

    /// Short digest of the serialized layout, written into demo files.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("layout serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Carrier {
    None,
    Human,
    Robot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub human_pos: Vec2,
    pub robot_pos: Vec2,
    pub treasure_pos: [Vec2; 2],
    pub door_open: [bool; 2],
    pub carrier: [Carrier; 2],
    pub step: u32,
    pub done: bool,
    pub success: bool,
}

impl EnvState {
    pub fn pos(&self, agent: Agent) -> Vec2 {
        match agent {
            Agent::Human => self.human_pos,
            Agent::Robot => self.robot_pos,
        }
    }

    /// Index of the treasure `agent` currently carries.
    pub fn carried_by(&self, agent: Agent) -> Option<usize> {
        let want = match agent {
            Agent::Human => Carrier::Human,
            Agent::Robot => Carrier::Robot,
        };
        self.carrier.iter().position(|&c| c == want)
    }
}

/// Observable projection: `[human, robot, treasure0, treasure1, door flags]`
/// with positions divided by the map size.
pub type Observation = [f64; OBS_DIM];

#[derive(Clone, Debug, PartialEq, Default)]
pub struct FetchQuest {
    pub layout: Layout,
}

impl FetchQuest {
    pub fn new(layout: Layout) -> Result<Self, CoreError> {
        layout.validate()?;
        Ok(Self { layout })
    }

    pub fn reset(&self, seed: u64) -> EnvState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let j = self.layout.start_jitter;
        let mut jitter = |p: Vec2| Vec2::new(p.x + rng.gen_range(-j..=j), p.y + rng.gen_range(-j..=j));
        let human_pos = jitter(self.layout.human_start);
        let robot_pos = jitter(self.layout.robot_start);
        EnvState {
            human_pos,
            robot_pos,
            treasure_pos: self.layout.treasure_spawns,
            door_open: [false; 2],
            carrier: [Carrier::None; 2],
            step: 0,
            done: false,
            success: false,
        }
    }

    pub fn step(&self, state: &EnvState, human: AgentAction, robot: AgentAction) -> Result<EnvState, CoreError> {
        let mut next = state.clone();
        self.step_mut(&mut next, human, robot)?;
        Ok(next)
    }

    /// In-place variant of [`FetchQuest::step`].
    pub fn step_mut(&self, s: &mut EnvState, human: AgentAction, robot: AgentAction) -> Result<(), CoreError> {
        if s.done {
            return Err(CoreError::EpisodeDone);
        }
        let human = AgentAction::new(human.dx, human.dy);
        let robot = AgentAction::new(robot.dx, robot.dy);
        let doors = s.door_open;
        s.human_pos = self.move_agent(s.human_pos, human, doors);
        s.robot_pos = self.move_agent(s.robot_pos, robot, doors);

        let l = &self.layout;
        for i in 0..2 {
            s.door_open[i] = l.buttons[i].contains(s.human_pos) || l.buttons[i].contains(s.robot_pos);
        }

        for (agent, carrier) in [(Agent::Human, Carrier::Human), (Agent::Robot, Carrier::Robot)] {
            if s.carried_by(agent).is_some() {
                continue;
            }
            let p = s.pos(agent);
            if let Some(i) = (0..2).find(|&i| {
                s.carrier[i] == Carrier::None
                    && l.rooms[i].contains(s.treasure_pos[i], l.map_size)
                    && p.dist(s.treasure_pos[i]) <= l.pickup_radius
            }) {
                s.carrier[i] = carrier;
            }
        }
        for i in 0..2 {
            match s.carrier[i] {
                Carrier::Human => s.treasure_pos[i] = s.human_pos,
                Carrier::Robot => s.treasure_pos[i] = s.robot_pos,
                Carrier::None => {}
            }
        }

        s.step += 1;
        let both_carry = s.carried_by(Agent::Human).is_some() && s.carried_by(Agent::Robot).is_some();
        let [d0, d1] = &l.destinations;
        let zones = (d0.contains(s.human_pos) && d1.contains(s.robot_pos))
            || (d1.contains(s.human_pos) && d0.contains(s.robot_pos));
        s.success = both_carry && zones;
        s.done = s.success || s.step >= l.max_steps;
        Ok(())
    }

    /// Axis-separated motion: x first, then y. A component that would carry
    /// the agent into a room is cancelled unless that room's door is open and
    /// the crossing point lies on the door segment. Leaving is never blocked.
    fn move_agent(&self, p: Vec2, a: AgentAction, doors: [bool; 2]) -> Vec2 {
        let l = &self.layout;
        let step = l.speed_scale;
        let mut q = p;
        let nx = (p.x + step * a.dx).clamp(0.0, l.map_size);
        if !self.entry_blocked(q, Vec2::new(nx, q.y), WallAxis::X, q.y, doors) {
            q.x = nx;
        }
        let ny = (q.y + step * a.dy).clamp(0.0, l.map_size);
        if !self.entry_blocked(q, Vec2::new(q.x, ny), WallAxis::Y, q.x, doors) {
            q.y = ny;
        }
        q
    }

    fn entry_blocked(&self, from: Vec2, to: Vec2, axis: WallAxis, crossing: f64, doors: [bool; 2]) -> bool {
        let size = self.layout.map_size;
        self.layout.rooms.iter().enumerate().any(|(i, room)| {
            !room.contains(from, size) && room.contains(to, size) && !(doors[i] && room.door_admits(axis, crossing))
        })
    }

    pub fn observe(&self, s: &EnvState) -> Observation {
        let k = 1.0 / self.layout.map_size;
        let flag = |b: bool| if b { 1.0 } else { 0.0 };
        [
            s.human_pos.x * k,
            s.human_pos.y * k,
            s.robot_pos.x * k,
            s.robot_pos.y * k,
            s.treasure_pos[0].x * k,
            s.treasure_pos[0].y * k,
            s.treasure_pos[1].x * k,
            s.treasure_pos[1].y * k,
            flag(s.door_open[0]),
            flag(s.door_open[1]),
        ]
    }

    /// Point reflection through the map centre.
    pub fn mirror(&self, p: Vec2) -> Vec2 {
        Vec2::new(self.layout.map_size - p.x, self.layout.map_size - p.y)
    }
}
