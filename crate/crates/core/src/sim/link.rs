use std::collections::BTreeMap;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Loss and latency of one radio link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    pub base_latency_ms: f64,
    /// Half-width of the uniform jitter added to `base_latency_ms`.
    #[serde(default)]
    pub jitter_ms: f64,
    /// Probability that a single transmission is lost.
    #[serde(default)]
    pub loss_p: f64,
    #[serde(default = "default_range")]
    pub max_range_m: f64,
    #[serde(default)]
    pub distance_m: f64,
}

fn default_range() -> f64 {
    f64::INFINITY
}

impl Default for LinkModel {
    fn default() -> Self {
        LinkModel { base_latency_ms: 0.0, jitter_ms: 0.0, loss_p: 0.0, max_range_m: f64::INFINITY, distance_m: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transmission {
    Delivered(Duration),
    Lost,
}

impl LinkModel {
    pub fn lossless(base_latency_ms: f64) -> Self {
        LinkModel { base_latency_ms, ..Default::default() }
    }

    pub fn in_range(&self) -> bool {
        self.distance_m <= self.max_range_m
    }

    /// Upper bound on the latency a delivered transmission can see.
    pub fn max_latency(&self) -> Duration {
        Duration::from_secs_f64((self.base_latency_ms + self.jitter_ms).max(0.0) / 1e3)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.loss_p) {
            return Err(format!("loss_p {} is not a probability", self.loss_p));
        }
        if self.base_latency_ms < 0.0 || self.jitter_ms < 0.0 {
            return Err("latency and jitter must be non-negative".into());
        }
        if self.distance_m < 0.0 || self.max_range_m < 0.0 {
            return Err("distances must be non-negative".into());
        }
        Ok(())
    }
}

/// One transmission attempt over `link`.
///
/// Always consumes exactly two draws from `rng` when in range, so the
/// stream position does not depend on the outcome.
pub fn link_transmit<R: Rng + ?Sized>(link: &LinkModel, rng: &mut R) -> Transmission {
    if !link.in_range() {
        return Transmission::Lost;
    }
    let lost = rng.gen::<f64>() < link.loss_p;
    let offset = (rng.gen::<f64>() * 2.0 - 1.0) * link.jitter_ms;
    if lost {
        return Transmission::Lost;
    }
    let ms = (link.base_latency_ms + offset).max(0.0);
    Transmission::Delivered(Duration::from_micros((ms * 1e3).round() as u64))
}

/// Undirected link table keyed by 16-bit node addresses.
#[derive(Debug, Clone, Default)]
pub struct Topology {
    links: BTreeMap<(u16, u16), LinkModel>,
}

fn key(a: u16, b: u16) -> (u16, u16) {
    (a.min(b), a.max(b))
}

impl Topology {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn connect(&mut self, a: u16, b: u16, link: LinkModel) {
        self.links.insert(key(a, b), link);
    }

    pub fn link(&self, a: u16, b: u16) -> Option<&LinkModel> {
        self.links.get(&key(a, b))
    }

    pub fn link_mut(&mut self, a: u16, b: u16) -> Option<&mut LinkModel> {
        self.links.get_mut(&key(a, b))
    }

    pub fn neighbors(&self, a: u16) -> impl Iterator<Item = u16> + '_ {
        self.links.keys().filter_map(move |&(x, y)| {
            if x == a {
                Some(y)
            } else if y == a {
                Some(x)
            } else {
                None
            }
        })
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lossless_always_delivers() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let link = LinkModel { base_latency_ms: 5.0, jitter_ms: 2.0, ..Default::default() };
        for _ in 0..1000 {
            match link_transmit(&link, &mut rng) {
                Transmission::Delivered(d) => {
                    assert!(d >= Duration::from_millis(3) && d <= Duration::from_millis(7))
                }
                Transmission::Lost => panic!("lost on lossless link"),
            }
        }
    }

    #[test]
    fn certain_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let link = LinkModel { loss_p: 1.0, ..Default::default() };
        assert!((0..1000).all(|_| link_transmit(&link, &mut rng) == Transmission::Lost));
    }

    #[test]
    fn out_of_range_is_lost() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let link = LinkModel { max_range_m: 10.0, distance_m: 10.5, ..Default::default() };
        assert_eq!(link_transmit(&link, &mut rng), Transmission::Lost);
    }

    #[test]
    fn latency_clamped_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let link = LinkModel { base_latency_ms: 0.5, jitter_ms: 5.0, ..Default::default() };
        for _ in 0..200 {
            assert!(matches!(link_transmit(&link, &mut rng), Transmission::Delivered(_)));
        }
    }

    #[test]
    fn loss_frequency_within_binomial_interval() {
        // p = 0.1, n = 10_000: 95% interval for the delivered fraction
        let n = 10_000;
        let q = 0.9f64;
        let half = 1.96 * (q * (1.0 - q) / n as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let link = LinkModel { loss_p: 0.1, ..Default::default() };
        let delivered = (0..n).filter(|_| matches!(link_transmit(&link, &mut rng), Transmission::Delivered(_))).count();
        let frac = delivered as f64 / n as f64;
        assert!((frac - q).abs() <= half, "fraction {frac} outside {q}±{half}");
    }

    #[test]
    fn topology_is_symmetric() {
        let mut t = Topology::new();
        t.connect(3, 1, LinkModel::lossless(1.0));
        assert!(t.link(1, 3).is_some());
        assert_eq!(t.neighbors(1).collect::<Vec<_>>(), vec![3]);
        assert_eq!(t.neighbors(3).collect::<Vec<_>>(), vec![1]);
    }
}
