//! TOML description of a simulated deployment.
//!
//! ```toml
//! seed = 7
//! max_hops = 5
//! window = 32
//! pattern = "415244"
//!
//! [[nodes]]
//! name = "src"
//! address = "fd00::1"
//!
//! [[links]]             # optional; without links every node reaches every other
//! a = "src"
//! b = "r1"
//!
//! [[paths]]
//! source = "src"
//! hops = ["r1", "r2", "dst"]
//! payloads = 100
//! setup = true          # run the setup protocol instead of sharing keys directly
//!
//! [games]
//! honest = "r2"
//! trials = 5000
//! corrupted = ["r1", "dst"]   # default: every node except the honest one
//! ```

use std::collections::{BTreeSet, HashSet};

use serde::Deserialize;

use super::games::GameSetup;
use super::SimNetwork;
use crate::address::Address;
use crate::crypto::Pattern;
use crate::data_protocol::PacketFormat;
use crate::error::{Error, Result};
use crate::key_reference::{DEFAULT_WINDOW, MAX_WINDOW};

/// Environment variable overriding the configured seed.
pub const SEED_ENV: &str = "ARIADNE_SEED";

fn default_seed() -> u64 {
    1
}

fn default_max_hops() -> usize {
    PacketFormat::DATA.slots
}

fn default_window() -> usize {
    DEFAULT_WINDOW
}

fn default_payloads() -> usize {
    100
}

fn default_true() -> bool {
    true
}

fn default_trials() -> usize {
    5000
}

fn default_game_window() -> usize {
    4
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_max_hops")]
    pub max_hops: usize,
    #[serde(default = "default_window")]
    pub window: usize,
    /// Three bytes in hex.
    #[serde(default)]
    pub pattern: Option<String>,
    pub nodes: Vec<NodeConfig>,
    #[serde(default)]
    pub links: Vec<LinkConfig>,
    #[serde(default)]
    pub paths: Vec<PathConfig>,
    #[serde(default)]
    pub games: Option<GamesConfig>,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub name: String,
    pub address: Address,
    #[serde(default)]
    pub corrupted: bool,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    pub a: String,
    pub b: String,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PathConfig {
    pub source: String,
    pub hops: Vec<String>,
    #[serde(default = "default_payloads")]
    pub payloads: usize,
    #[serde(default = "default_true")]
    pub setup: bool,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GamesConfig {
    pub honest: String,
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// Index into `paths` of the game path `P`.
    #[serde(default)]
    pub path: usize,
    #[serde(default)]
    pub corrupted: Option<Vec<String>>,
    /// Defaults to the first node outside `P` that is not its source.
    #[serde(default)]
    pub alt_source: Option<String>,
    /// Defaults to nodes outside `P`, as many as the prefix they replace.
    #[serde(default)]
    pub alt_prefix: Option<Vec<String>>,
    /// Window used for game sessions.
    #[serde(default = "default_game_window")]
    pub window: usize,
}

impl NetConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: NetConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn pattern(&self) -> Result<Pattern> {
        match &self.pattern {
            None => Ok(Pattern::default()),
            Some(h) => {
                let bytes = hex::decode(h).map_err(|e| Error::Config(format!("pattern: {e}")))?;
                let arr: [u8; 3] = bytes.try_into().map_err(|_| Error::Config("pattern must be 3 bytes".into()))?;
                Ok(Pattern(arr))
            }
        }
    }

    fn has_node(&self, name: &str) -> bool {
        self.nodes.iter().any(|n| n.name == name)
    }

    fn require(&self, name: &str) -> Result<()> {
        if self.has_node(name) {
            Ok(())
        } else {
            Err(Error::UnknownNode(name.to_string()))
        }
    }

    pub fn validate(&self) -> Result<()> {
        let slots = PacketFormat::DATA.slots;
        if !(1..=slots).contains(&self.max_hops) {
            return Err(Error::Config(format!("max_hops must be in 1..={slots}")));
        }
        if !(1..=MAX_WINDOW).contains(&self.window) {
            return Err(Error::InvalidWindow(self.window));
        }
        self.pattern()?;
        let mut names = HashSet::new();
        let mut addrs = HashSet::new();
        for n in &self.nodes {
            if !names.insert(&n.name) || !addrs.insert(n.address) {
                return Err(Error::Config(format!("duplicate node {}", n.name)));
            }
        }
        for l in &self.links {
            self.require(&l.a)?;
            self.require(&l.b)?;
        }
        for p in &self.paths {
            self.require(&p.source)?;
            if p.hops.is_empty() {
                return Err(Error::EmptyPath);
            }
            if p.hops.len() > self.max_hops {
                return Err(Error::PathTooLong { hops: p.hops.len(), max: self.max_hops });
            }
            for h in &p.hops {
                self.require(h)?;
            }
        }
        if let Some(g) = &self.games {
            if g.trials == 0 {
                return Err(Error::Config("games.trials must be positive".into()));
            }
            if !(1..=MAX_WINDOW).contains(&g.window) {
                return Err(Error::InvalidWindow(g.window));
            }
            let path = self
                .paths
                .get(g.path)
                .ok_or_else(|| Error::Config(format!("games.path {} does not exist", g.path)))?;
            if !path.hops.contains(&g.honest) {
                return Err(Error::Config(format!("honest node {} is not on the game path", g.honest)));
            }
            if self.game_corrupted()?.contains(&g.honest)
                || self.nodes.iter().any(|n| n.corrupted && n.name == g.honest)
            {
                return Err(Error::Config(format!("honest node {} is in the corrupted set", g.honest)));
            }
            for n in g.corrupted.iter().flatten().chain(g.alt_prefix.iter().flatten()).chain(&g.alt_source) {
                self.require(n)?;
            }
        }
        Ok(())
    }

    fn game_corrupted(&self) -> Result<BTreeSet<String>> {
        let g = self.games.as_ref().ok_or_else(|| Error::Config("no [games] section".into()))?;
        Ok(match &g.corrupted {
            Some(list) => list.iter().cloned().collect(),
            None => self.nodes.iter().map(|n| n.name.clone()).filter(|n| *n != g.honest).collect(),
        })
    }

    /// Builds the network with the given seed.
    pub fn build_network(&self, seed: u64) -> Result<SimNetwork> {
        self.build_network_with_window(seed, self.window)
    }

    fn build_network_with_window(&self, seed: u64, window: usize) -> Result<SimNetwork> {
        let mut net = SimNetwork::new(seed)
            .with_pattern(self.pattern()?)
            .with_window(window)
            .with_max_hops(self.max_hops);
        for n in &self.nodes {
            net.add_node(&n.name, n.address, n.corrupted)?;
        }
        for l in &self.links {
            let (a, b) = (net.address_of(&l.a)?, net.address_of(&l.b)?);
            net.add_link(a, b);
        }
        Ok(net)
    }

    /// Network and participants for the configured games.
    pub fn game(&self, seed: u64) -> Result<(SimNetwork, GameSetup)> {
        let g = self.games.as_ref().ok_or_else(|| Error::Config("no [games] section".into()))?;
        let net = self.build_network_with_window(seed, g.window)?;
        let p = &self.paths[g.path];
        let path: Vec<Address> = p.hops.iter().map(|h| net.address_of(h)).collect::<Result<_>>()?;
        let honest = p.hops.iter().position(|h| *h == g.honest).expect("validated");
        let source = net.address_of(&p.source)?;
        let outside: Vec<&NodeConfig> = self
            .nodes
            .iter()
            .filter(|n| !p.hops.contains(&n.name) && n.name != p.source)
            .collect();
        let alt_source = match &g.alt_source {
            Some(n) => net.address_of(n)?,
            None => outside
                .first()
                .map(|n| n.address)
                .ok_or_else(|| Error::Config("no node available as alternative source".into()))?,
        };
        let alt_prefix: Vec<Address> = match &g.alt_prefix {
            Some(list) => list.iter().map(|n| net.address_of(n)).collect::<Result<_>>()?,
            None => outside
                .iter()
                .map(|n| n.address)
                .filter(|a| *a != alt_source)
                .take(honest)
                .collect(),
        };
        let corrupted = self
            .game_corrupted()?
            .iter()
            .map(|n| net.address_of(n))
            .collect::<Result<BTreeSet<_>>>()?;
        Ok((net, GameSetup { source, alt_source, path, honest, alt_prefix, corrupted }))
    }
}
