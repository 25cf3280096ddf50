use serde::Deserialize;

use super::connection::Protocols;
use super::multistream::{NOISE_ID, TLS_ID, YAMUX_ID};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HostConfig {
    /// Time allowed from the first hello to a ready connection.
    pub connect_timeout_s: f64,
    pub connect_attempts: u32,
    /// How long a liveness probe may go unanswered.
    pub probe_timeout_s: f64,
    /// Consecutive unanswered probes before the connection is dropped.
    pub max_missed_probes: u32,
    /// Security protocols in proposal order.
    pub security: Vec<String>,
    pub muxers: Vec<String>,
    /// Probe period; 0 disables probing. Scenarios set this from their
    /// top-level `keep_alive_s`.
    #[serde(skip)]
    pub keep_alive_s: f64,
}

impl Default for HostConfig {
    fn default() -> Self {
        HostConfig {
            connect_timeout_s: 60.0,
            connect_attempts: 3,
            probe_timeout_s: 30.0,
            max_missed_probes: 2,
            security: vec![TLS_ID.into(), NOISE_ID.into()],
            muxers: vec![YAMUX_ID.into()],
            keep_alive_s: 540.0,
        }
    }
}

impl HostConfig {
    pub fn protocols(&self) -> Protocols {
        Protocols { security: self.security.clone(), muxers: self.muxers.clone(), ..Protocols::default() }
    }

    pub fn validate(&self) -> Result<(), String> {
        if [self.connect_timeout_s, self.probe_timeout_s].iter().any(|t| t.is_nan() || *t <= 0.0) {
            return Err("host timeouts must be positive".into());
        }
        if self.connect_attempts == 0 || self.max_missed_probes == 0 {
            return Err("connect_attempts and max_missed_probes must be at least 1".into());
        }
        if self.keep_alive_s.is_nan() || self.keep_alive_s < 0.0 {
            return Err("keep_alive_s must be non-negative".into());
        }
        Ok(())
    }
}
