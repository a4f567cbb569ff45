//! Real-time game service for demonstration collection and play against a
//! trained robot policy.

pub mod protocol;
pub mod server;
pub mod session;

pub use protocol::{ClientMsg, ErrorCode, Role, ServerMsg, SessionMode};
pub use server::{Server, ServerConfig};
pub use session::{PlaylistEntry, Session, SessionReport, SessionSettings};

/// Blinded label for playlist slot `i`: A, B, …, Z, AA, AB, …
pub fn blind_label(mut i: usize) -> String {
    let mut s = Vec::new();
    loop {
        s.push(b'A' + (i % 26) as u8);
        if i < 26 {
            break;
        }
        i = i / 26 - 1;
    }
    s.reverse();
    String::from_utf8(s).expect("ascii")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels() {
        assert_eq!(blind_label(0), "A");
        assert_eq!(blind_label(25), "Z");
        assert_eq!(blind_label(26), "AA");
        assert_eq!(blind_label(27), "AB");
    }
}
