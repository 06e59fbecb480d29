use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::address::Address;
use crate::crypto::{GroupElement, GroupScalar, Pattern};
use crate::data_protocol::PacketFormat;
use crate::key_reference::{PatternTable, DEFAULT_WINDOW};

/// State held by one relay or destination.
#[derive(Debug)]
pub struct NodeContext {
    pub address: Address,
    pub pattern: Pattern,
    /// Window registered for sessions installed by setup packets.
    pub window: usize,
    pub data_format: PacketFormat,
    pub setup_format: PacketFormat,
    pub table: PatternTable,
    static_secret: Option<GroupScalar>,
    static_public: Option<GroupElement>,
    pub(crate) rng: ChaCha20Rng,
}

impl NodeContext {
    pub fn new(address: Address, pattern: Pattern, seed: u64) -> Self {
        NodeContext {
            address,
            pattern,
            window: DEFAULT_WINDOW,
            data_format: PacketFormat::DATA,
            setup_format: PacketFormat::SETUP,
            table: PatternTable::default(),
            static_secret: None,
            static_public: None,
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn with_static_key(mut self, secret: GroupScalar) -> Self {
        self.set_static_key(secret);
        self
    }

    pub fn with_window(mut self, window: usize) -> Self {
        self.window = window;
        self
    }

    pub fn set_static_key(&mut self, secret: GroupScalar) {
        self.static_public = Some(secret.public());
        self.static_secret = Some(secret);
    }

    pub fn static_public(&self) -> Option<GroupElement> {
        self.static_public
    }

    pub(crate) fn static_secret(&self) -> Option<&GroupScalar> {
        self.static_secret.as_ref()
    }
}
