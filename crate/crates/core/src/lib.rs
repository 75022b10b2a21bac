//! Full-duplex, event-driven orchestration engine for cascaded
//! speech-to-speech dialogue.

pub mod audio;
pub mod backend;
pub mod bus;
pub mod corpus;
pub mod mock;
pub mod scenario;
pub mod agent;
pub mod asr;
pub mod tts;
pub mod turn;
pub mod wire;
pub mod side;
pub mod config;
pub mod session;
pub mod telemetry;
pub mod loopback;
pub mod server;
