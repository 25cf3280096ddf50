use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fixed per-transmission advertising cost, in milliseconds.
pub const TX_SLOT_MS: u64 = 10;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TimingError {
    #[error("segment count must be at least 1")]
    NoSegments,
}

/// Average time to send `n_segments` segments, each repeated `t_count`
/// extra times spaced `t_int_ms` apart:
/// `(10 + (t_int + 10) * t_count) * n`.
pub fn avg_tx_time(t_count: u32, t_int_ms: u32, n_segments: u32) -> Result<u64, TimingError> {
    if n_segments == 0 {
        return Err(TimingError::NoSegments);
    }
    Ok((TX_SLOT_MS + (t_int_ms as u64 + TX_SLOT_MS) * t_count as u64) * n_segments as u64)
}

/// Gap between successive segments for a SAR interval step: `(step + 1) * 10`.
pub fn seg_interval(step: u32) -> u64 {
    (step as u64 + 1) * 10
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AddressKind {
    Unicast,
    Group,
}

/// 16-bit mesh address. `0x0001..=0x7FFF` are unicast, `0xC000..=0xFFFF`
/// are groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MeshAddress(pub u16);

impl MeshAddress {
    pub const UNASSIGNED: MeshAddress = MeshAddress(0);

    pub fn kind(self) -> Option<AddressKind> {
        match self.0 {
            0x0001..=0x7FFF => Some(AddressKind::Unicast),
            0xC000..=0xFFFF => Some(AddressKind::Group),
            _ => None,
        }
    }

    pub fn is_unicast(self) -> bool {
        self.kind() == Some(AddressKind::Unicast)
    }

    pub fn is_group(self) -> bool {
        self.kind() == Some(AddressKind::Group)
    }
}

impl fmt::Display for MeshAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{:04X}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "RawMeshConfig")]
pub struct MeshConfig {
    /// Extra network-layer transmissions per unicast message.
    pub t_count_unicast: u32,
    /// Extra network-layer transmissions per group message.
    pub t_count_multicast: u32,
    pub t_int_ms: u32,
    pub tx_seg_int_step: u32,
    pub rx_seg_int_step: u32,
    /// SAR retransmissions of an unacknowledged unicast segment.
    pub retries_unicast: u32,
    /// Blind repetitions of every segment of a group message.
    pub retries_multicast: u32,
    pub seg_payload: usize,
    pub unsegmented_max: usize,
    pub max_segments: usize,
    /// Hops a group message may be relayed; 0 disables relaying.
    pub relay_ttl: u8,
    pub discovery_group: MeshAddress,
}

impl Default for MeshConfig {
    fn default() -> Self {
        MeshConfig {
            t_count_unicast: 1,
            t_count_multicast: 2,
            t_int_ms: 20,
            tx_seg_int_step: 5,
            rx_seg_int_step: 5,
            retries_unicast: 1,
            retries_multicast: 2,
            seg_payload: 12,
            unsegmented_max: 11,
            max_segments: 32,
            relay_ttl: 0,
            discovery_group: MeshAddress(0xC000),
        }
    }
}

/// File form of [`MeshConfig`]; `t_count` sets both address kinds.
#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawMeshConfig {
    t_count: Option<u32>,
    t_count_unicast: u32,
    t_count_multicast: u32,
    t_int_ms: u32,
    tx_seg_int_step: u32,
    rx_seg_int_step: u32,
    retries_unicast: u32,
    retries_multicast: u32,
    seg_payload: usize,
    unsegmented_max: usize,
    max_segments: usize,
    relay_ttl: u8,
    discovery_group: u16,
}

impl Default for RawMeshConfig {
    fn default() -> Self {
        let d = MeshConfig::default();
        RawMeshConfig {
            t_count: None,
            t_count_unicast: d.t_count_unicast,
            t_count_multicast: d.t_count_multicast,
            t_int_ms: d.t_int_ms,
            tx_seg_int_step: d.tx_seg_int_step,
            rx_seg_int_step: d.rx_seg_int_step,
            retries_unicast: d.retries_unicast,
            retries_multicast: d.retries_multicast,
            seg_payload: d.seg_payload,
            unsegmented_max: d.unsegmented_max,
            max_segments: d.max_segments,
            relay_ttl: d.relay_ttl,
            discovery_group: d.discovery_group.0,
        }
    }
}

impl From<RawMeshConfig> for MeshConfig {
    fn from(raw: RawMeshConfig) -> Self {
        MeshConfig {
            t_count_unicast: raw.t_count.unwrap_or(raw.t_count_unicast),
            t_count_multicast: raw.t_count.unwrap_or(raw.t_count_multicast),
            t_int_ms: raw.t_int_ms,
            tx_seg_int_step: raw.tx_seg_int_step,
            rx_seg_int_step: raw.rx_seg_int_step,
            retries_unicast: raw.retries_unicast,
            retries_multicast: raw.retries_multicast,
            seg_payload: raw.seg_payload,
            unsegmented_max: raw.unsegmented_max,
            max_segments: raw.max_segments,
            relay_ttl: raw.relay_ttl,
            discovery_group: MeshAddress(raw.discovery_group),
        }
    }
}

impl MeshConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.seg_payload == 0 || self.max_segments == 0 {
            return Err("segment payload and segment cap must be positive".into());
        }
        if self.unsegmented_max >= self.seg_payload * self.max_segments {
            return Err("unsegmented_max must be below the segmented capacity".into());
        }
        if !self.discovery_group.is_group() {
            return Err(format!("discovery group {} is not a group address", self.discovery_group));
        }
        Ok(())
    }

    pub fn t_count(&self, kind: AddressKind) -> u32 {
        match kind {
            AddressKind::Unicast => self.t_count_unicast,
            AddressKind::Group => self.t_count_multicast,
        }
    }

    pub fn retries(&self, kind: AddressKind) -> u32 {
        match kind {
            AddressKind::Unicast => self.retries_unicast,
            AddressKind::Group => self.retries_multicast,
        }
    }

    /// Largest payload a single mesh message can carry.
    pub fn max_payload(&self) -> usize {
        self.seg_payload * self.max_segments
    }

    pub fn segment_count(&self, payload_len: usize) -> usize {
        if payload_len <= self.unsegmented_max {
            1
        } else {
            payload_len.div_ceil(self.seg_payload)
        }
    }

    /// Airtime of one (possibly repeated) transmission to `kind`.
    pub fn transmission_time(&self, kind: AddressKind) -> Duration {
        let ms = avg_tx_time(self.t_count(kind), self.t_int_ms, 1).expect("n = 1");
        Duration::from_millis(ms)
    }

    pub fn tx_seg_int(&self) -> Duration {
        Duration::from_millis(seg_interval(self.tx_seg_int_step))
    }

    pub fn rx_seg_int(&self) -> Duration {
        Duration::from_millis(seg_interval(self.rx_seg_int_step))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn avg_tx_time_examples() {
        assert_eq!(avg_tx_time(0, 20, 1), Ok(10));
        assert_eq!(avg_tx_time(0, 999, 1), Ok(10));
        assert_eq!(avg_tx_time(0, 20, 32), Ok(320));
        assert_eq!(avg_tx_time(2, 20, 1), Ok(70));
        assert_eq!(avg_tx_time(1, 20, 0), Err(TimingError::NoSegments));
    }

    #[test]
    fn avg_tx_time_linear_and_monotone() {
        for t_count in 0..6 {
            for t_int in (0..200).step_by(10) {
                let one = avg_tx_time(t_count, t_int, 1).unwrap();
                for n in 1..=32 {
                    let v = avg_tx_time(t_count, t_int, n).unwrap();
                    assert_eq!(v, one * n as u64);
                    assert!(v <= avg_tx_time(t_count + 1, t_int, n).unwrap());
                    assert!(v <= avg_tx_time(t_count, t_int + 10, n).unwrap());
                }
            }
        }
    }

    #[test]
    fn seg_interval_examples() {
        assert_eq!(seg_interval(5), 60);
        assert_eq!(seg_interval(0), 10);
        assert_eq!(seg_interval(5) * 32, 1920);
    }

    #[test]
    fn defaults() {
        let cfg = MeshConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.tx_seg_int(), Duration::from_millis(60));
        assert_eq!(cfg.rx_seg_int(), Duration::from_millis(60));
        assert_eq!(cfg.max_payload(), 384);
        assert_eq!(cfg.segment_count(11), 1);
        assert_eq!(cfg.segment_count(12), 1);
        assert_eq!(cfg.segment_count(255), 22);
        assert!(cfg.segment_count(cfg.max_payload()) <= cfg.max_segments);
    }

    #[test]
    fn address_kinds() {
        assert_eq!(MeshAddress(0x0027).kind(), Some(AddressKind::Unicast));
        assert_eq!(MeshAddress(0xC000).kind(), Some(AddressKind::Group));
        assert_eq!(MeshAddress(0).kind(), None);
        assert_eq!(MeshAddress(0x8001).kind(), None);
    }

    #[test]
    fn t_count_key_sets_both() {
        let cfg: MeshConfig = toml::from_str("t_count = 0\nt_int_ms = 30").unwrap();
        assert_eq!(cfg.t_count_unicast, 0);
        assert_eq!(cfg.t_count_multicast, 0);
        assert_eq!(cfg.t_int_ms, 30);
        let cfg: MeshConfig = toml::from_str("retries_unicast = 3").unwrap();
        assert_eq!(cfg.t_count_multicast, 2);
        assert_eq!(cfg.retries_unicast, 3);
    }
}
