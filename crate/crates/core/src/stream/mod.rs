//! Two-thread streaming inference: a recording thread pushes 10 ms units into
//! a ring buffer and a decoding thread classifies each complete 10 s window.

mod ring;
mod session;

pub use ring::{capacity_for, ring_buffer, RingReader, RingWriter};
pub use session::{
    event_json, overrun_json, replay_offline, run_session, run_session_observed, SessionConfig, SessionStats,
    Source, StreamEvent, StreamMessage,
};
