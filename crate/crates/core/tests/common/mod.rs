#![allow(dead_code)]

use std::collections::{BTreeSet, VecDeque};
use std::path::PathBuf;

use oec_core::p2p::{Keypair, PeerId};
use oec_core::pubsub::{FloodSub, Output, Record};
use oec_core::sim::{ScenarioConfig, SimTime};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn scenario(name: &str) -> ScenarioConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name);
    ScenarioConfig::load(path).expect("shipped scenario loads")
}

pub fn fixture(rel: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel);
    std::fs::read_to_string(path).expect("fixture exists")
}

/// Hex fixture lines with `#` comments stripped.
pub fn hex_lines(text: &str) -> Vec<String> {
    text.lines().map(|l| l.split('#').next().unwrap().trim().to_string()).filter(|l| !l.is_empty()).collect()
}

/// A random spanning tree plus extra random edges, so always connected.
pub fn random_connected_graph(rng: &mut ChaCha8Rng, n: usize) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut edges = BTreeSet::new();
    for i in 1..n {
        let parent = order[rng.gen_range(0..i)];
        let (a, b) = (order[i].min(parent), order[i].max(parent));
        edges.insert((a, b));
    }
    if n > 2 {
        let extra = rng.gen_range(0..=n);
        for _ in 0..extra {
            let a = rng.gen_range(0..n);
            let b = rng.gen_range(0..n);
            if a != b {
                edges.insert((a.min(b), a.max(b)));
            }
        }
    }
    edges.into_iter().collect()
}

/// Nodes reachable from `start` moving only through nodes allowed by
/// `pass` (the start and the end of each step must pass, except the start).
pub fn reachable(n: usize, edges: &[(usize, usize)], start: usize, pass: impl Fn(usize) -> bool) -> BTreeSet<usize> {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut seen = BTreeSet::from([start]);
    let mut q = VecDeque::from([start]);
    while let Some(v) = q.pop_front() {
        for &w in &adj[v] {
            if pass(w) && seen.insert(w) {
                q.push_back(w);
            }
        }
    }
    seen
}

pub fn peer_ids(n: usize, seed: u64) -> Vec<PeerId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| Keypair::generate(&mut rng).peer_id()).collect()
}

pub struct FloodOutcome {
    /// Deliveries per node.
    pub delivered: Vec<usize>,
    /// Message records sent over any edge.
    pub forwards: usize,
}

/// Wires routers over `edges`, subscribes `subscribers`, publishes one
/// message from `publisher` and runs the exchange to quiescence.
pub fn flood(
    ids: &[PeerId],
    edges: &[(usize, usize)],
    subscribers: &BTreeSet<usize>,
    publisher: usize,
    strict: bool,
) -> FloodOutcome {
    let n = ids.len();
    let mut nodes: Vec<FloodSub> = ids
        .iter()
        .map(|p| {
            let mut f = FloodSub::new(p.clone());
            f.set_strict(strict);
            f
        })
        .collect();
    let index = |p: &PeerId| ids.iter().position(|x| x == p).unwrap();
    let mut out = FloodOutcome { delivered: vec![0; n], forwards: 0 };
    let mut q: VecDeque<(usize, Output)> = VecDeque::new();
    for &s in subscribers {
        nodes[s].subscribe("t");
    }
    for &(a, b) in edges {
        q.extend(nodes[a].add_neighbor(ids[b].clone()).into_iter().map(|o| (a, o)));
        q.extend(nodes[b].add_neighbor(ids[a].clone()).into_iter().map(|o| (b, o)));
    }
    let run = |q: &mut VecDeque<(usize, Output)>, nodes: &mut Vec<FloodSub>, out: &mut FloodOutcome| {
        while let Some((at, o)) = q.pop_front() {
            match o {
                Output::Deliver(_) => out.delivered[at] += 1,
                Output::Send { to, bytes } => {
                    let mut buf = bytes.clone();
                    let recs = oec_core::pubsub::decode_records(&mut buf).unwrap();
                    if recs.iter().any(|r| matches!(r, Record::Message(_))) {
                        out.forwards += 1;
                    }
                    let t = index(&to);
                    let more = nodes[t].on_bytes(&ids[at], &bytes, SimTime::ZERO).unwrap();
                    q.extend(more.into_iter().map(|o| (t, o)));
                }
            }
        }
    };
    run(&mut q, &mut nodes, &mut out);
    let (_, o) = nodes[publisher].publish("t", b"payload".to_vec(), SimTime::ZERO);
    q.extend(o.into_iter().map(|o| (publisher, o)));
    run(&mut q, &mut nodes, &mut out);
    out
}
