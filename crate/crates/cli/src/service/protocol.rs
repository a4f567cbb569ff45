//! Wire messages. One JSON object per frame: a line on the TCP transport, a
//! text message on the WebSocket transport.

use cogail_core::env::{Observation, OBS_DIM};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionMode {
    CollectTwoHuman,
    PlayVsPolicy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// The human agent (play mode's only client).
    Human,
    /// Second operator steering the robot agent during collection.
    RobotHuman2,
}

impl Role {
    pub fn index(self) -> usize {
        match self {
            Role::Human => 0,
            Role::RobotHuman2 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMsg {
    Join { mode: SessionMode, role: Role },
    Start,
    Action { seq: u64, dx: f64, dy: f64 },
    Reset,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Malformed,
    NotJoined,
    AlreadyJoined,
    RoleTaken,
    BadRole,
    NoCheckpoint,
    NotReady,
    RoundActive,
    SessionComplete,
    BadAction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMsg {
    State {
        tick: u64,
        obs: Observation,
        done: bool,
        success: bool,
        /// Live strategy estimate (play mode only).
        #[serde(skip_serializing_if = "Option::is_none", default)]
        zhat: Option<[f64; 2]>,
        round: usize,
        /// Blinded checkpoint label of the round (play mode only).
        #[serde(skip_serializing_if = "Option::is_none", default)]
        label: Option<String>,
    },
    RoundReport {
        successes: usize,
        rounds: usize,
    },
    /// Session membership, sent to every member whenever it changes.
    Lobby {
        mode: SessionMode,
        joined: Vec<Role>,
        rounds: usize,
    },
    Error {
        code: ErrorCode,
        detail: String,
    },
}

impl ServerMsg {
    pub fn error(code: ErrorCode, detail: impl Into<String>) -> Self {
        ServerMsg::Error {
            code,
            detail: detail.into(),
        }
    }

    pub fn encode(&self) -> String {
        serde_json::to_string(self).expect("server messages serialize")
    }

    pub fn is_state(&self) -> bool {
        matches!(self, ServerMsg::State { .. })
    }
}

pub fn parse_client(frame: &str) -> Result<ClientMsg, ServerMsg> {
    serde_json::from_str(frame.trim()).map_err(|e| ServerMsg::error(ErrorCode::Malformed, e.to_string()))
}

pub fn parse_server(frame: &str) -> Result<ServerMsg, serde_json::Error> {
    serde_json::from_str(frame.trim())
}

const _: () = assert!(OBS_DIM == 10);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn client_messages_use_normative_field_names() {
        assert_eq!(
            parse_client(r#"{"type":"join","mode":"play_vs_policy","role":"human"}"#).unwrap(),
            ClientMsg::Join {
                mode: SessionMode::PlayVsPolicy,
                role: Role::Human
            }
        );
        assert_eq!(
            parse_client(r#"{"type":"join","mode":"collect_two_human","role":"robot_human2"}"#).unwrap(),
            ClientMsg::Join {
                mode: SessionMode::CollectTwoHuman,
                role: Role::RobotHuman2
            }
        );
        assert_eq!(parse_client(r#"{"type":"start"}"#).unwrap(), ClientMsg::Start);
        assert_eq!(parse_client(r#"{"type":"reset"}"#).unwrap(), ClientMsg::Reset);
        assert_eq!(
            parse_client(r#"{"type":"action","seq":3,"dx":0.5,"dy":-1}"#).unwrap(),
            ClientMsg::Action {
                seq: 3,
                dx: 0.5,
                dy: -1.0
            }
        );
    }

    #[test]
    fn malformed_frames_become_error_messages() {
        for bad in [
            "",
            "{",
            r#"{"type":"fly"}"#,
            r#"{"type":"action","seq":-1,"dx":0,"dy":0}"#,
            "[1,2]",
        ] {
            match parse_client(bad) {
                Err(ServerMsg::Error {
                    code: ErrorCode::Malformed,
                    ..
                }) => {}
                other => panic!("{bad:?} -> {other:?}"),
            }
        }
    }

    #[test]
    fn server_messages_round_trip() {
        let msgs = [
            ServerMsg::State {
                tick: 4,
                obs: [0.5; 10],
                done: false,
                success: false,
                zhat: Some([0.1, -0.2]),
                round: 1,
                label: Some("A".into()),
            },
            ServerMsg::State {
                tick: 0,
                obs: [0.0; 10],
                done: true,
                success: true,
                zhat: None,
                round: 0,
                label: None,
            },
            ServerMsg::RoundReport {
                successes: 3,
                rounds: 20,
            },
            ServerMsg::error(ErrorCode::RoleTaken, "role human is taken"),
        ];
        for m in msgs {
            let line = m.encode();
            assert!(!line.contains('\n'));
            assert_eq!(parse_server(&line).unwrap(), m);
        }
        let line = ServerMsg::State {
            tick: 0,
            obs: [0.0; 10],
            done: false,
            success: false,
            zhat: None,
            round: 0,
            label: None,
        }
        .encode();
        assert!(line.starts_with(r#"{"type":"state","tick":0,"obs":["#));
        assert!(!line.contains("zhat"));
    }
}
