use std::fmt;
use std::io::{self, Write};

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Delivered,
    Lost,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Delivered => "delivered",
            Status::Lost => "lost",
        })
    }
}

/// One published packet. Times are virtual milliseconds.
#[derive(Debug, Clone, PartialEq)]
pub struct PacketRecord {
    pub index: u32,
    pub sent_ms: f64,
    pub received_ms: Option<f64>,
}

impl PacketRecord {
    pub fn status(&self) -> Status {
        if self.received_ms.is_some() {
            Status::Delivered
        } else {
            Status::Lost
        }
    }

    pub fn latency_ms(&self) -> Option<f64> {
        self.received_ms.map(|r| r - self.sent_ms)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StatsError {
    #[error("no packets to summarize")]
    Empty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub records: Vec<PacketRecord>,
    /// Over delivered packets; `None` when nothing arrived.
    pub mean_latency_ms: Option<f64>,
    pub max_latency_ms: Option<f64>,
    pub median_latency_ms: Option<f64>,
    /// Population standard deviation of the delivered latencies among
    /// records `0..=i`; `None` until the first delivery.
    pub stddev_series: Vec<Option<f64>>,
    pub delivered: u32,
    /// Percentage of sent packets that were delivered.
    pub pdr: f64,
}

impl RunReport {
    pub fn sent(&self) -> u32 {
        self.records.len() as u32
    }

    /// Index of the slowest delivered packet.
    pub fn max_latency_index(&self) -> Option<u32> {
        self.records
            .iter()
            .filter_map(|r| r.latency_ms().map(|l| (r.index, l)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
    }

    pub fn final_stddev_ms(&self) -> Option<f64> {
        self.stddev_series.last().copied().flatten()
    }
}

pub fn report_stats(records: Vec<PacketRecord>) -> Result<RunReport, StatsError> {
    if records.is_empty() {
        return Err(StatsError::Empty);
    }
    let mut stddev_series = Vec::with_capacity(records.len());
    let (mut n, mut sum, mut sum_sq) = (0u32, 0.0f64, 0.0f64);
    for r in &records {
        if let Some(l) = r.latency_ms() {
            n += 1;
            sum += l;
            sum_sq += l * l;
        }
        stddev_series.push((n > 0).then(|| {
            let mean = sum / n as f64;
            (sum_sq / n as f64 - mean * mean).max(0.0).sqrt()
        }));
    }
    let mut latencies: Vec<f64> = records.iter().filter_map(PacketRecord::latency_ms).collect();
    latencies.sort_by(f64::total_cmp);
    let median = match latencies.len() {
        0 => None,
        k if k % 2 == 1 => Some(latencies[k / 2]),
        k => Some((latencies[k / 2 - 1] + latencies[k / 2]) / 2.0),
    };
    Ok(RunReport {
        mean_latency_ms: (n > 0).then(|| sum / n as f64),
        max_latency_ms: latencies.last().copied(),
        median_latency_ms: median,
        stddev_series,
        delivered: n,
        pdr: 100.0 * n as f64 / records.len() as f64,
        records,
    })
}

fn ms(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_default()
}

pub fn write_csv<W: Write>(mut w: W, records: &[PacketRecord]) -> io::Result<()> {
    writeln!(w, "index,sent_ms,recv_ms,latency_ms,status")?;
    for r in records {
        writeln!(w, "{},{:.3},{},{},{}", r.index, r.sent_ms, ms(r.received_ms), ms(r.latency_ms()), r.status())?;
    }
    Ok(())
}

/// Where a delivered packet's latency went, in milliseconds. The four
/// parts add up to the latency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PacketBreakdown {
    pub index: u32,
    /// Held by the host behind a keep-alive probe.
    pub hold_ms: f64,
    /// From leaving the host to the last serial frame being written.
    pub bridge_ms: f64,
    /// Mesh queueing, segmentation and retransmissions.
    pub mesh_ms: f64,
    /// Radio latency of the transmission that completed the message.
    pub link_ms: f64,
}

pub fn write_breakdown_csv<W: Write>(mut w: W, rows: &[PacketBreakdown]) -> io::Result<()> {
    writeln!(w, "index,hold_ms,bridge_ms,mesh_ms,link_ms")?;
    for b in rows {
        writeln!(w, "{},{:.3},{:.3},{:.3},{:.3}", b.index, b.hold_ms, b.bridge_ms, b.mesh_ms, b.link_ms)?;
    }
    Ok(())
}

/// Wilson score interval for a binomial proportion at normal quantile `z`.
pub fn wilson_interval(successes: u64, trials: u64, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    // the closed form lands a rounding error short of the bound at p = 0 or 1
    let lo = if successes == 0 { 0.0 } else { (centre - half).max(0.0) };
    let hi = if successes >= trials { 1.0 } else { (centre + half).min(1.0) };
    (lo, hi)
}

/// PDR over several independent runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub runs: usize,
    pub sent: u64,
    pub delivered: u64,
    /// Pooled percentage.
    pub pdr: f64,
    /// 95% Wilson interval of the pooled PDR, in percent.
    pub pdr_ci: (f64, f64),
    pub median_pdr: f64,
    pub mean_latency_ms: Option<f64>,
}

pub fn aggregate(reports: &[RunReport]) -> Option<Aggregate> {
    if reports.is_empty() {
        return None;
    }
    let sent: u64 = reports.iter().map(|r| r.sent() as u64).sum();
    let delivered: u64 = reports.iter().map(|r| r.delivered as u64).sum();
    let mut pdrs: Vec<f64> = reports.iter().map(|r| r.pdr).collect();
    pdrs.sort_by(f64::total_cmp);
    let k = pdrs.len();
    let median_pdr = if k % 2 == 1 { pdrs[k / 2] } else { (pdrs[k / 2 - 1] + pdrs[k / 2]) / 2.0 };
    let lat: Vec<f64> = reports.iter().flat_map(|r| r.records.iter().filter_map(PacketRecord::latency_ms)).collect();
    let (lo, hi) = wilson_interval(delivered, sent, 1.96);
    Some(Aggregate {
        runs: reports.len(),
        sent,
        delivered,
        pdr: 100.0 * delivered as f64 / sent.max(1) as f64,
        pdr_ci: (100.0 * lo, 100.0 * hi),
        median_pdr,
        mean_latency_ms: (!lat.is_empty()).then(|| lat.iter().sum::<f64>() / lat.len() as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(index: u32, sent: f64, latency: Option<f64>) -> PacketRecord {
        PacketRecord { index, sent_ms: sent, received_ms: latency.map(|l| sent + l) }
    }

    #[test]
    fn mean_of_three() {
        let r =
            report_stats(vec![rec(0, 0.0, Some(8000.0)), rec(1, 9000.0, Some(8000.0)), rec(2, 18000.0, Some(11000.0))])
                .unwrap();
        assert_eq!(r.mean_latency_ms, Some(9000.0));
        assert_eq!(r.stddev_series[0], Some(0.0));
        assert_eq!(r.stddev_series[1], Some(0.0));
        assert!((r.stddev_series[2].unwrap() - 2.0e6f64.sqrt()).abs() < 1e-6);
        assert_eq!(r.max_latency_index(), Some(2));
        assert_eq!(r.pdr, 100.0);
    }

    #[test]
    fn lost_packets_count_against_pdr_only() {
        let r = report_stats(vec![rec(0, 0.0, None), rec(1, 9.0, Some(5.0))]).unwrap();
        assert_eq!(r.stddev_series, vec![None, Some(0.0)]);
        assert_eq!(r.mean_latency_ms, Some(5.0));
        assert_eq!(r.pdr, 50.0);
        let r = report_stats(vec![rec(0, 0.0, None)]).unwrap();
        assert_eq!(r.mean_latency_ms, None);
        assert_eq!(r.pdr, 0.0);
        assert_eq!(report_stats(vec![]), Err(StatsError::Empty));
    }

    #[test]
    fn single_delivery() {
        let r = report_stats(vec![rec(0, 0.0, Some(1.0))]).unwrap();
        assert_eq!(r.pdr, 100.0);
    }

    #[test]
    fn csv_rows() {
        let mut out = Vec::new();
        write_csv(&mut out, &[rec(0, 0.0, Some(8200.5)), rec(1, 9000.0, None)]).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "index,sent_ms,recv_ms,latency_ms,status\n0,0.000,8200.500,8200.500,delivered\n1,9000.000,,,lost\n"
        );
    }

    #[test]
    fn wilson_known_values() {
        // 95 of 100: textbook interval (0.8882, 0.9785)
        let (lo, hi) = wilson_interval(95, 100, 1.96);
        assert!((lo - 0.8882).abs() < 5e-4 && (hi - 0.9785).abs() < 5e-4);
        let (lo, hi) = wilson_interval(100, 100, 1.96);
        assert!(hi == 1.0 && lo > 0.96);
    }
}
