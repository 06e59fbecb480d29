//! Single-threaded creation and processing latency measurements.
//!
//! Each cell warms up for a fixed time, then collects samples. A sample is
//! the mean time of one batch of iterations, which keeps timer granularity
//! out of the result. The packets a batch consumes are built before its
//! timer starts.

use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::address::Address;
use crate::crypto::{GroupElement, GroupScalar, MasterKey, Pattern};
use crate::data_protocol::{create_packet, process_packet, Outgoing, PacketFormat, PathHop, PathSpec};
use crate::error::{Error, Result};
use crate::key_reference::{PatternTable, DEFAULT_WINDOW};
use crate::node::NodeContext;
use crate::setup_protocol::{create_setup_packet, process_setup_packet, SessionParams, SetupPacketBody};
use crate::wire::FRAME_LEN;

pub const MIN_SAMPLES: usize = 100;
pub const MIN_BATCH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PacketKind {
    Data,
    Setup,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Create,
    Process,
}

#[derive(Clone, Copy, Debug)]
pub struct BenchConfig {
    pub warmup: Duration,
    pub samples: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { warmup: Duration::from_secs(3), samples: MIN_SAMPLES, batch: MIN_BATCH, seed: 1 }
    }
}

impl BenchConfig {
    fn validate(&self) -> Result<()> {
        if self.samples < MIN_SAMPLES || self.batch < MIN_BATCH {
            return Err(Error::Config(format!(
                "need at least {MIN_SAMPLES} samples of {MIN_BATCH} iterations"
            )));
        }
        Ok(())
    }
}

/// One measured cell, serialized as one JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub kind: PacketKind,
    pub role: Role,
    pub hops: usize,
    pub samples: usize,
    pub batch: usize,
    pub mean_ns: f64,
    pub std_ns: f64,
    pub packets_per_sec: f64,
    /// At 1500-byte frames.
    pub bits_per_sec: f64,
}

impl BenchRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("bench records serialize")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::Config(format!("bad bench record: {e}")))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub records: Vec<BenchRecord>,
}

impl BenchReport {
    pub fn get(&self, kind: PacketKind, role: Role, hops: usize) -> Option<&BenchRecord> {
        self.records.iter().find(|r| r.kind == kind && r.role == role && r.hops == hops)
    }

    pub fn to_json_lines(&self) -> String {
        self.records.iter().map(|r| r.to_json_line() + "\n").collect()
    }

    pub fn from_json_lines(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(BenchRecord::from_json_line)
            .collect::<Result<_>>()?;
        Ok(BenchReport { records })
    }
}

fn addr(i: usize) -> Address {
    let mut a = [0u8; 16];
    a[0] = 0xfd;
    a[15] = i as u8 + 1;
    Address(a)
}

/// Per-batch timing harness: `prepare` builds the batch's inputs untimed,
/// `run` consumes them under the timer.
fn measure<S, T>(
    cfg: &BenchConfig,
    state: &mut S,
    mut prepare: impl FnMut(&mut S, usize) -> Result<Vec<T>>,
    mut run: impl FnMut(&mut S, Vec<T>),
) -> Result<(f64, f64)> {
    let warm_until = Instant::now() + cfg.warmup;
    while Instant::now() < warm_until {
        let inputs = prepare(state, cfg.batch)?;
        run(state, inputs);
    }
    let mut means = Vec::with_capacity(cfg.samples);
    for _ in 0..cfg.samples {
        let inputs = prepare(state, cfg.batch)?;
        let start = Instant::now();
        run(state, inputs);
        means.push(start.elapsed().as_nanos() as f64 / cfg.batch as f64);
    }
    let n = means.len() as f64;
    let mean = means.iter().sum::<f64>() / n;
    let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok((mean, var.sqrt()))
}

fn record(kind: PacketKind, role: Role, hops: usize, cfg: &BenchConfig, (mean_ns, std_ns): (f64, f64)) -> BenchRecord {
    let pps = 1e9 / mean_ns;
    BenchRecord {
        kind,
        role,
        hops,
        samples: cfg.samples,
        batch: cfg.batch,
        mean_ns,
        std_ns,
        packets_per_sec: pps,
        bits_per_sec: pps * (FRAME_LEN * 8) as f64,
    }
}

/// Measures one cell. Processing is measured at the first hop of a
/// `hops`-hop path.
pub fn bench_cell(kind: PacketKind, role: Role, hops: usize, cfg: &BenchConfig) -> Result<BenchRecord> {
    cfg.validate()?;
    if !(1..=PacketFormat::DATA.slots).contains(&hops) {
        return Err(Error::PathTooLong { hops, max: PacketFormat::DATA.slots });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ (hops as u64) << 8);
    let pattern = Pattern::default();
    let payload = vec![0xa5u8; 1024];
    let stats = match (kind, role) {
        (PacketKind::Data, Role::Create) => {
            let path = data_path(hops, &mut rng);
            let mut t = 0u64;
            let mut create_rng = ChaCha20Rng::seed_from_u64(rng.next_u64());
            measure(
                cfg,
                &mut (),
                |_, n| Ok(vec![(); n]),
                |_, batch| {
                    for _ in batch {
                        let out = create_packet(&PacketFormat::DATA, &path, t, &pattern, &payload, &mut create_rng);
                        std::hint::black_box(out.ok());
                        t += 1;
                    }
                },
            )?
        }
        (PacketKind::Data, Role::Process) => {
            let path = data_path(hops, &mut rng);
            let mut node = NodeContext::new(path.hops[0].address, pattern, rng.next_u64());
            node.table.register_session(path.hops[0].key.clone(), pattern, DEFAULT_WINDOW)?;
            let mut t = 0u64;
            let mut failures = 0usize;
            let stats = measure(
                cfg,
                &mut node,
                |_, n| {
                    (0..n)
                        .map(|_| {
                            t += 1;
                            create_packet(&PacketFormat::DATA, &path, t - 1, &pattern, &payload, &mut rng)
                        })
                        .collect::<Result<Vec<Outgoing>>>()
                },
                |node, batch| {
                    for pkt in batch {
                        let out = process_packet(node, &pkt.header, pkt.body);
                        failures += usize::from(out.is_drop());
                        std::hint::black_box(out);
                    }
                },
            )?;
            if failures > 0 {
                return Err(Error::Config(format!("{failures} benchmark packets were dropped")));
            }
            stats
        }
        (PacketKind::Setup, Role::Create) => {
            let path = setup_path(hops, &mut rng);
            let params = SessionParams { pattern, window: DEFAULT_WINDOW as u16, nonce: [0; 16] };
            let mut create_rng = ChaCha20Rng::seed_from_u64(rng.next_u64());
            measure(
                cfg,
                &mut (),
                |_, n| Ok(vec![(); n]),
                |_, batch| {
                    for _ in batch {
                        let out = create_setup_packet(&PacketFormat::SETUP, &path.1, &params, &[], &mut create_rng);
                        std::hint::black_box(out.ok());
                    }
                },
            )?
        }
        (PacketKind::Setup, Role::Process) => {
            let (secrets, path) = setup_path(hops, &mut rng);
            let params = SessionParams { pattern, window: DEFAULT_WINDOW as u16, nonce: [0; 16] };
            let mut node = NodeContext::new(path[0].0, pattern, rng.next_u64()).with_static_key(secrets[0].clone());
            let mut failures = 0usize;
            let stats = measure(
                cfg,
                &mut node,
                |node, n| {
                    // bound the table: every processed setup installs a session
                    node.table = PatternTable::default();
                    (0..n)
                        .map(|_| {
                            create_setup_packet(&PacketFormat::SETUP, &path, &params, &[], &mut rng).map(|(o, _)| o)
                        })
                        .collect::<Result<Vec<Outgoing<SetupPacketBody>>>>()
                },
                |node, batch| {
                    for pkt in batch {
                        let out = process_setup_packet(node, &pkt.header, pkt.body);
                        failures += usize::from(out.outcome.is_drop());
                        std::hint::black_box(out);
                    }
                },
            )?;
            if failures > 0 {
                return Err(Error::Config(format!("{failures} benchmark packets were dropped")));
            }
            stats
        }
    };
    Ok(record(kind, role, hops, cfg, stats))
}

fn data_path(hops: usize, rng: &mut ChaCha20Rng) -> PathSpec {
    PathSpec::new((0..hops).map(|i| PathHop { address: addr(i), key: MasterKey::random(rng) }).collect())
}

fn setup_path(hops: usize, rng: &mut ChaCha20Rng) -> (Vec<GroupScalar>, Vec<(Address, GroupElement)>) {
    let secrets: Vec<GroupScalar> = (0..hops).map(|_| GroupScalar::random(rng)).collect();
    let path = secrets.iter().enumerate().map(|(i, s)| (addr(i), s.public())).collect();
    (secrets, path)
}

/// Measures every requested cell.
pub fn run_bench(cells: &[(PacketKind, Role, usize)], cfg: &BenchConfig) -> Result<BenchReport> {
    let records = cells
        .iter()
        .map(|&(k, r, h)| bench_cell(k, r, h, cfg))
        .collect::<Result<_>>()?;
    Ok(BenchReport { records })
}
