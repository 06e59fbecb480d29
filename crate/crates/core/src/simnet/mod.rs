//! In-process network of Ariadne nodes exchanging 1500-byte frames.
//!
//! Delivery is synchronous: a frame injected at a source is carried hop by
//! hop until it is delivered or dropped. Every link crossing can be recorded
//! on a tap, and corrupted nodes keep a trace of what they processed.

pub mod config;
pub mod games;

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::address::Address;
use crate::crypto::{GroupScalar, MasterKey, Pattern};
use crate::data_protocol::{create_packet, process_packet_traced, DropReason, PacketFormat, PathHop, PathSpec, ProcessOutcome};
use crate::error::{Error, Result};
use crate::key_reference::{PatternTable, SessionId, DEFAULT_WINDOW};
use crate::node::NodeContext;
use crate::setup_protocol::{create_setup_packet, data_path, process_setup_packet, SessionParams, SetupKeys};
use crate::wire::{self, Frame, FramePacket, DEFAULT_HOP_LIMIT};

/// Upper bound on link crossings per injected frame.
const MAX_LINK_CROSSINGS: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum HopOutcome {
    Forwarded { to: Address },
    Delivered { len: usize },
    Dropped { reason: DropReason },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct HopRecord {
    pub node: Address,
    pub outcome: HopOutcome,
}

/// One frame seen crossing a link.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TapRecord {
    pub seq: u64,
    /// Caller-chosen label of the injected packet.
    pub packet: u64,
    pub from: Address,
    pub to: Address,
    #[serde(serialize_with = "hex_bytes")]
    pub frame: Vec<u8>,
}

fn hex_bytes<S: serde::Serializer>(b: &[u8], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&hex::encode(b))
}

/// What a corrupted node exposes about one processed frame.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TraceEntry {
    pub seq: u64,
    pub packet: u64,
    pub setup: bool,
    /// Table entry that verified, for data packets.
    pub matched: Option<(SessionId, u64)>,
    pub outcome: HopOutcome,
}

#[derive(Debug)]
pub struct SimNode {
    pub name: String,
    pub ctx: NodeContext,
    pub corrupted: bool,
    pub trace: Vec<TraceEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PacketReport {
    pub packet: u64,
    pub hops: Vec<HopRecord>,
    #[serde(skip)]
    pub delivered: Option<Vec<u8>>,
}

impl PacketReport {
    pub fn drop_reason(&self) -> Option<(Address, DropReason)> {
        self.hops.iter().find_map(|h| match h.outcome {
            HopOutcome::Dropped { reason } => Some((h.node, reason)),
            _ => None,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct DeliveryReport {
    pub packets: Vec<PacketReport>,
}

impl DeliveryReport {
    pub fn delivered(&self) -> usize {
        self.packets.iter().filter(|p| p.delivered.is_some()).count()
    }

    pub fn dropped(&self) -> usize {
        self.packets.len() - self.delivered()
    }
}

/// Frame mutation applied before a frame crosses link `index`
/// (0 is the source's first link).
pub type Tamper<'a> = &'a mut dyn FnMut(usize, &mut Vec<u8>);

pub struct SimNetwork {
    nodes: BTreeMap<Address, SimNode>,
    names: BTreeMap<String, Address>,
    /// Directed links; `None` means every pair of nodes is connected.
    links: Option<BTreeSet<(Address, Address)>>,
    taps: Vec<TapRecord>,
    taps_enabled: bool,
    seq: u64,
    next_label: u64,
    pattern: Pattern,
    window: usize,
    max_hops: usize,
    rng: ChaCha20Rng,
}

impl SimNetwork {
    pub fn new(seed: u64) -> Self {
        SimNetwork {
            nodes: BTreeMap::new(),
            names: BTreeMap::new(),
            links: None,
            taps: Vec::new(),
            taps_enabled: true,
            seq: 0,
            next_label: 0,
            pattern: Pattern::default(),
            window: DEFAULT_WINDOW,
            max_hops: PacketFormat::DATA.slots,
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn with_pattern(mut self, pattern: Pattern) -> Self {
        self.pattern = pattern;
        self
    }

    /// Window used for every session registered from now on.
    pub fn with_window(mut self, window: usize) -> Self {
        self.window = window;
        self
    }

    /// Policy limit on path length, at most the number of vector slots.
    pub fn with_max_hops(mut self, max_hops: usize) -> Self {
        self.max_hops = max_hops.min(PacketFormat::DATA.slots);
        self
    }

    pub fn pattern(&self) -> Pattern {
        self.pattern
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn set_taps(&mut self, enabled: bool) {
        self.taps_enabled = enabled;
    }

    pub fn add_node(&mut self, name: &str, address: Address, corrupted: bool) -> Result<()> {
        if self.nodes.contains_key(&address) || self.names.contains_key(name) {
            return Err(Error::Config(format!("duplicate node {name} ({address})")));
        }
        let seed = self.rng.next_u64();
        let ctx = NodeContext::new(address, self.pattern, seed)
            .with_static_key(GroupScalar::random(&mut self.rng))
            .with_window(self.window);
        self.nodes.insert(address, SimNode { name: name.to_string(), ctx, corrupted, trace: Vec::new() });
        self.names.insert(name.to_string(), address);
        Ok(())
    }

    /// Connects `a` and `b` in both directions. Once any link exists, only
    /// listed links carry frames.
    pub fn add_link(&mut self, a: Address, b: Address) {
        let links = self.links.get_or_insert_with(BTreeSet::new);
        links.insert((a, b));
        links.insert((b, a));
    }

    pub fn address_of(&self, name: &str) -> Result<Address> {
        self.names.get(name).copied().ok_or_else(|| Error::UnknownNode(name.to_string()))
    }

    pub fn node(&self, address: &Address) -> Result<&SimNode> {
        self.nodes.get(address).ok_or_else(|| Error::UnknownNode(address.to_string()))
    }

    pub fn node_mut(&mut self, address: &Address) -> Result<&mut SimNode> {
        self.nodes.get_mut(address).ok_or_else(|| Error::UnknownNode(address.to_string()))
    }

    pub fn nodes(&self) -> impl Iterator<Item = &SimNode> {
        self.nodes.values()
    }

    pub fn set_corrupted(&mut self, address: &Address, corrupted: bool) -> Result<()> {
        self.node_mut(address)?.corrupted = corrupted;
        Ok(())
    }

    pub fn taps(&self) -> &[TapRecord] {
        &self.taps
    }

    pub fn clear_taps(&mut self) {
        self.taps.clear();
    }

    /// Taps as JSON lines.
    pub fn export_taps(&self) -> String {
        let mut out = String::new();
        for t in &self.taps {
            out.push_str(&serde_json::to_string(t).expect("tap records serialize"));
            out.push('\n');
        }
        out
    }

    /// Drops every registered session and trace.
    pub fn reset_sessions(&mut self) {
        for node in self.nodes.values_mut() {
            node.ctx.table = PatternTable::default();
            node.trace.clear();
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha20Rng {
        &mut self.rng
    }

    /// `count` payloads of random content and length up to `max_len`.
    pub fn random_payloads(&mut self, count: usize, max_len: usize) -> Vec<Vec<u8>> {
        (0..count)
            .map(|_| {
                let mut p = vec![0u8; self.rng.gen_range(0..=max_len)];
                self.rng.fill_bytes(&mut p);
                p
            })
            .collect()
    }

    fn check_path(&self, hops: &[Address]) -> Result<()> {
        if hops.is_empty() {
            return Err(Error::EmptyPath);
        }
        if hops.len() > self.max_hops {
            return Err(Error::PathTooLong { hops: hops.len(), max: self.max_hops });
        }
        for h in hops {
            self.node(h)?;
        }
        Ok(())
    }

    /// Registers the given master keys at the hops of a path.
    pub fn provision_with_keys(&mut self, hops: &[Address], keys: &[MasterKey]) -> Result<PathSpec> {
        self.check_path(hops)?;
        if hops.len() != keys.len() {
            return Err(Error::LengthMismatch("keys vs hops"));
        }
        let (pattern, window) = (self.pattern, self.window);
        for (h, k) in hops.iter().zip(keys) {
            self.node_mut(h)?.ctx.table.register_session(k.clone(), pattern, window)?;
        }
        Ok(PathSpec::new(
            hops.iter().zip(keys).map(|(a, k)| PathHop { address: *a, key: k.clone() }).collect(),
        ))
    }

    /// Shares fresh random master keys with the hops of a path.
    pub fn provision_direct(&mut self, hops: &[Address]) -> Result<PathSpec> {
        let keys: Vec<MasterKey> = hops.iter().map(|_| MasterKey::random(&mut self.rng)).collect();
        self.provision_with_keys(hops, &keys)
    }

    /// Runs the setup protocol from `source` along `hops`.
    pub fn provision_via_setup(&mut self, source: Address, hops: &[Address]) -> Result<(PathSpec, SetupKeys, PacketReport)> {
        self.check_path(hops)?;
        let mut path = Vec::with_capacity(hops.len());
        for h in hops {
            let public = self.node(h)?.ctx.static_public().ok_or(Error::Config(format!("{h} has no static key")))?;
            path.push((*h, public));
        }
        let mut nonce = [0u8; 16];
        self.rng.fill_bytes(&mut nonce);
        let params = SessionParams { pattern: self.pattern, window: self.window as u16, nonce };
        let (out, keys) = create_setup_packet(&PacketFormat::SETUP, &path, &params, &[], &mut self.rng)?;
        let frame = Frame {
            src: source,
            dst: out.next_hop,
            hop_limit: DEFAULT_HOP_LIMIT,
            packet: FramePacket::Setup { header: out.header, body: out.body },
        };
        let label = self.label();
        let report = self.inject(label, wire::encode(&frame)?, None)?;
        Ok((data_path(hops, &keys), keys, report))
    }

    fn label(&mut self) -> u64 {
        self.next_label += 1;
        self.next_label
    }

    /// Builds the frame a source sends for counter `t`.
    pub fn create_data_frame(&mut self, source: Address, path: &PathSpec, t: u64, payload: &[u8]) -> Result<Vec<u8>> {
        self.check_path(&path.addresses())?;
        let out = create_packet(&PacketFormat::DATA, path, t, &self.pattern, payload, &mut self.rng)?;
        wire::encode(&Frame {
            src: source,
            dst: out.next_hop,
            hop_limit: DEFAULT_HOP_LIMIT,
            packet: FramePacket::Data { header: out.header, body: out.body },
        })
    }

    /// Carries `frame` from its IPv6 source until it is delivered or dropped.
    pub fn inject(&mut self, packet: u64, mut frame: Vec<u8>, mut tamper: Option<Tamper<'_>>) -> Result<PacketReport> {
        if frame.len() < wire::IPV6_HEADER_LEN {
            return Err(Error::Malformed("frame shorter than the IPv6 header"));
        }
        let mut report = PacketReport { packet, hops: Vec::new(), delivered: None };
        for index in 0..MAX_LINK_CROSSINGS {
            let from = Address::from_slice(&frame[8..24]).expect("16 bytes");
            let to = Address::from_slice(&frame[24..40]).expect("16 bytes");
            if let Some(links) = &self.links {
                if !links.contains(&(from, to)) {
                    return Err(Error::NoLink { from: from.to_string(), to: to.to_string() });
                }
            }
            if let Some(f) = tamper.as_mut() {
                f(index, &mut frame);
            }
            self.seq += 1;
            let seq = self.seq;
            if self.taps_enabled {
                self.taps.push(TapRecord { seq, packet, from, to, frame: frame.clone() });
            }
            let node = self.nodes.get_mut(&to).ok_or_else(|| Error::UnknownNode(to.to_string()))?;
            let (outcome, next) = receive(node, seq, packet, &frame);
            report.hops.push(HopRecord { node: to, outcome: outcome.clone() });
            match (outcome, next) {
                (HopOutcome::Forwarded { .. }, Some(Next::Frame(bytes))) => frame = bytes,
                (HopOutcome::Delivered { .. }, Some(Next::Payload(p))) => {
                    report.delivered = Some(p);
                    return Ok(report);
                }
                _ => return Ok(report),
            }
        }
        Err(Error::Malformed("frame exceeded the link crossing limit"))
    }

    /// Sends one packet per `(t, payload)` pair, in the given order.
    pub fn run_packets(
        &mut self,
        source: Address,
        path: &PathSpec,
        packets: &[(u64, Vec<u8>)],
        mut tamper: Option<Tamper<'_>>,
    ) -> Result<DeliveryReport> {
        let mut report = DeliveryReport::default();
        for (t, payload) in packets {
            let frame = self.create_data_frame(source, path, *t, payload)?;
            let label = self.label();
            let r = match tamper.as_mut() {
                Some(f) => self.inject(label, frame, Some(&mut **f))?,
                None => self.inject(label, frame, None)?,
            };
            report.packets.push(r);
        }
        Ok(report)
    }

    /// Sends `payloads` with consecutive counters from `start_t`.
    pub fn run_path(&mut self, source: Address, path: &PathSpec, payloads: &[Vec<u8>], start_t: u64) -> Result<DeliveryReport> {
        let packets: Vec<(u64, Vec<u8>)> =
            payloads.iter().enumerate().map(|(i, p)| (start_t + i as u64, p.clone())).collect();
        self.run_packets(source, path, &packets, None)
    }
}

enum Next {
    Frame(Vec<u8>),
    Payload(Vec<u8>),
}

fn receive(node: &mut SimNode, seq: u64, packet: u64, bytes: &[u8]) -> (HopOutcome, Option<Next>) {
    let own = node.ctx.address;
    let (setup, matched, outcome, next) = match wire::decode(bytes) {
        Err(_) => (false, None, HopOutcome::Dropped { reason: DropReason::Malformed }, None),
        Ok(frame) => match frame.packet {
            FramePacket::Data { header, body } => {
                let processed = process_packet_traced(&mut node.ctx, &header, body);
                let (outcome, next) = match processed.outcome {
                    ProcessOutcome::Forward(out) => {
                        let to = out.next_hop;
                        let f = Frame {
                            src: own,
                            dst: to,
                            hop_limit: DEFAULT_HOP_LIMIT,
                            packet: FramePacket::Data { header: out.header, body: out.body },
                        };
                        (HopOutcome::Forwarded { to }, wire::encode(&f).ok().map(Next::Frame))
                    }
                    ProcessOutcome::Deliver(p) => (HopOutcome::Delivered { len: p.len() }, Some(Next::Payload(p))),
                    ProcessOutcome::Drop(reason) => (HopOutcome::Dropped { reason }, None),
                };
                (false, processed.matched, outcome, next)
            }
            FramePacket::Setup { header, body } => {
                let processed = process_setup_packet(&mut node.ctx, &header, body);
                let (outcome, next) = match processed.outcome {
                    ProcessOutcome::Forward(out) => {
                        let to = out.next_hop;
                        let f = Frame {
                            src: own,
                            dst: to,
                            hop_limit: DEFAULT_HOP_LIMIT,
                            packet: FramePacket::Setup { header: out.header, body: out.body },
                        };
                        (HopOutcome::Forwarded { to }, wire::encode(&f).ok().map(Next::Frame))
                    }
                    ProcessOutcome::Deliver(p) => (HopOutcome::Delivered { len: p.len() }, Some(Next::Payload(p))),
                    ProcessOutcome::Drop(reason) => (HopOutcome::Dropped { reason }, None),
                };
                (true, None, outcome, next)
            }
        },
    };
    if node.corrupted {
        node.trace.push(TraceEntry { seq, packet, setup, matched, outcome: outcome.clone() });
    }
    (outcome, next)
}
