pub mod audio;
pub mod enhance;
pub mod error;
pub mod excitation;
pub mod ga;
pub mod metrics;
pub mod mixing;
pub mod pipeline;
pub mod protocols;
pub mod snr;
pub mod synth;
