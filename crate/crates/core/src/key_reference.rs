//! Relay-side matching table from encrypted patterns to temporary keys.
//!
//! For every registered session the table holds `W` live entries, each keyed
//! by the 3-byte encryption of the deployment pattern under `δ(k, t).enc`.
//! Consuming an entry erases its keys and derives the entry for the next
//! counter value above the highest one ever inserted, so the live set always
//! holds `W` unconsumed counters and reordering inside the window is
//! tolerated. Packets whose counter has not been derived yet are not
//! matched: there is no on-demand derivation.
//!
//! The table is a plain single-owner structure. Lookups take `&self`;
//! registration and consumption take `&mut self`, so wrapping the table in a
//! `Mutex` or `RwLock` makes the check-and-remove of [`PatternTable::consume`]
//! atomic.

use std::collections::{BTreeMap, HashMap, VecDeque};

use crate::crypto::{derive_temp_keys, encrypt_pattern, MasterKey, Pattern, TempKeyPair, PATTERN_LEN};
use crate::error::{Error, Result};

pub type SessionId = u64;
pub type PatternPrefix = [u8; PATTERN_LEN];

pub const DEFAULT_WINDOW: usize = 32;
pub const MAX_WINDOW: usize = 1024;
pub const DEFAULT_CAPACITY: usize = 1 << 22;

/// One live table entry.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub session: SessionId,
    pub keys: TempKeyPair,
}

impl Candidate {
    pub fn t(&self) -> u64 {
        self.keys.t
    }
}

#[derive(Debug)]
pub struct SessionRecord {
    pub id: SessionId,
    pub master_key: MasterKey,
    pub pattern: Pattern,
    pub window_size: usize,
    /// Live counters and the prefix each one is filed under.
    live: BTreeMap<u64, PatternPrefix>,
    /// Highest counter ever derived.
    t_high: u64,
    /// Most recent consumptions, kept for replay diagnostics.
    consumed: VecDeque<(PatternPrefix, u64)>,
}

impl SessionRecord {
    /// Lowest live counter.
    pub fn window_base(&self) -> Option<u64> {
        self.live.keys().next().copied()
    }

    pub fn live_counters(&self) -> impl Iterator<Item = u64> + '_ {
        self.live.keys().copied()
    }

    pub fn t_high(&self) -> u64 {
        self.t_high
    }
}

/// Snapshot of table occupancy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct TableStats {
    pub sessions: usize,
    pub entries: usize,
    pub buckets: usize,
    /// Buckets holding more than one candidate.
    pub collisions: usize,
}

#[derive(Debug)]
pub struct PatternTable {
    buckets: HashMap<PatternPrefix, Vec<Candidate>>,
    sessions: BTreeMap<SessionId, SessionRecord>,
    tombstones: HashMap<PatternPrefix, Vec<(SessionId, u64)>>,
    entries: usize,
    capacity: usize,
    next_id: SessionId,
}

impl Default for PatternTable {
    fn default() -> Self {
        Self::with_capacity(DEFAULT_CAPACITY)
    }
}

impl PatternTable {
    pub fn with_capacity(capacity: usize) -> Self {
        PatternTable {
            buckets: HashMap::new(),
            sessions: BTreeMap::new(),
            tombstones: HashMap::new(),
            entries: 0,
            capacity,
            next_id: 0,
        }
    }

    /// Registers a session and derives entries for `t = 0 .. window`.
    pub fn register_session(&mut self, master_key: MasterKey, pattern: Pattern, window: usize) -> Result<SessionId> {
        if !(1..=MAX_WINDOW).contains(&window) {
            return Err(Error::InvalidWindow(window));
        }
        if self.entries + window > self.capacity {
            return Err(Error::TableFull(self.capacity));
        }
        let id = self.next_id;
        self.next_id += 1;
        let mut record = SessionRecord {
            id,
            master_key,
            pattern,
            window_size: window,
            live: BTreeMap::new(),
            t_high: window as u64 - 1,
            consumed: VecDeque::with_capacity(window),
        };
        for t in 0..window as u64 {
            let (prefix, candidate) = derive_entry(&record, t);
            record.live.insert(t, prefix);
            self.insert(prefix, candidate);
        }
        self.sessions.insert(id, record);
        Ok(id)
    }

    fn insert(&mut self, prefix: PatternPrefix, candidate: Candidate) {
        self.buckets.entry(prefix).or_default().push(candidate);
        self.entries += 1;
    }

    /// All live candidates filed under `prefix`; empty when nothing matches.
    pub fn lookup(&self, prefix: &PatternPrefix) -> &[Candidate] {
        self.buckets.get(prefix).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Whether `prefix` belongs to a recently consumed entry.
    pub fn was_consumed(&self, prefix: &PatternPrefix) -> bool {
        self.tombstones.contains_key(prefix)
    }

    /// Removes the entry `(session, t)` and slides the window forward by one.
    pub fn consume(&mut self, session: SessionId, t: u64) -> Result<()> {
        let record = self.sessions.get_mut(&session).ok_or(Error::UnknownSession(session))?;
        let Some(prefix) = record.live.remove(&t) else {
            return Err(if record.consumed.iter().any(|&(_, c)| c == t) {
                Error::Replay { session, t }
            } else {
                Error::OutOfWindow { session, t }
            });
        };

        record.consumed.push_back((prefix, t));
        let evicted = if record.consumed.len() > record.window_size {
            record.consumed.pop_front()
        } else {
            None
        };
        record.t_high += 1;
        let next_t = record.t_high;
        let (next_prefix, next) = derive_entry(record, next_t);
        record.live.insert(next_t, next_prefix);

        if let Some(bucket) = self.buckets.get_mut(&prefix) {
            // dropping the candidate zeroizes its keys
            bucket.retain(|c| !(c.session == session && c.t() == t));
            if bucket.is_empty() {
                self.buckets.remove(&prefix);
            }
        }
        self.entries -= 1;
        self.tombstones.entry(prefix).or_default().push((session, t));
        if let Some((old_prefix, old_t)) = evicted {
            if let Some(list) = self.tombstones.get_mut(&old_prefix) {
                list.retain(|&e| e != (session, old_t));
                if list.is_empty() {
                    self.tombstones.remove(&old_prefix);
                }
            }
        }
        self.insert(next_prefix, next);
        Ok(())
    }

    pub fn session(&self, id: SessionId) -> Option<&SessionRecord> {
        self.sessions.get(&id)
    }

    pub fn sessions(&self) -> impl Iterator<Item = &SessionRecord> {
        self.sessions.values()
    }

    /// First session registered under `key`, if any.
    pub fn find_session(&self, key: &MasterKey) -> Option<SessionId> {
        self.sessions.values().find(|s| &s.master_key == key).map(|s| s.id)
    }

    pub fn len(&self) -> usize {
        self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries == 0
    }

    pub fn stats(&self) -> TableStats {
        TableStats {
            sessions: self.sessions.len(),
            entries: self.entries,
            buckets: self.buckets.len(),
            collisions: self.buckets.values().filter(|b| b.len() > 1).count(),
        }
    }
}

fn derive_entry(record: &SessionRecord, t: u64) -> (PatternPrefix, Candidate) {
    let keys = derive_temp_keys(&record.master_key, t);
    let prefix = encrypt_pattern(&keys.enc, &record.pattern);
    (prefix, Candidate { session: record.id, keys })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(77)
    }

    fn prefix_of(k: &MasterKey, t: u64) -> PatternPrefix {
        encrypt_pattern(&derive_temp_keys(k, t).enc, &Pattern::default())
    }

    #[test]
    fn single_entry_window() {
        let mut table = PatternTable::default();
        let k = MasterKey::random(&mut rng());
        let id = table.register_session(k.clone(), Pattern::default(), 1).unwrap();
        assert_eq!(table.len(), 1);
        let hits = table.lookup(&prefix_of(&k, 0));
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].session, id);
        assert_eq!(hits[0].keys, derive_temp_keys(&k, 0));
    }

    #[test]
    fn window_of_32() {
        let mut table = PatternTable::default();
        let k = MasterKey::random(&mut rng());
        let id = table.register_session(k.clone(), Pattern::default(), 32).unwrap();
        assert_eq!(table.len(), 32);
        let record = table.session(id).unwrap();
        assert_eq!(record.live_counters().collect::<Vec<_>>(), (0..32).collect::<Vec<_>>());
        // distinct prefixes unless a birthday collision happened
        let stats = table.stats();
        assert_eq!(stats.buckets + stats.collisions, 32);
    }

    #[test]
    fn duplicate_key_gives_two_candidates() {
        let mut table = PatternTable::default();
        let k = MasterKey::random(&mut rng());
        let a = table.register_session(k.clone(), Pattern::default(), 4).unwrap();
        let b = table.register_session(k.clone(), Pattern::default(), 4).unwrap();
        assert_ne!(a, b);
        let hits = table.lookup(&prefix_of(&k, 2));
        let mut ids: Vec<_> = hits.iter().map(|c| c.session).collect();
        ids.sort();
        assert_eq!(ids, vec![a, b]);
        assert_eq!(table.find_session(&k), Some(a));
    }

    #[test]
    fn lookup_consume_and_slide() {
        let mut table = PatternTable::default();
        let k = MasterKey::random(&mut rng());
        let id = table.register_session(k.clone(), Pattern::default(), 32).unwrap();
        assert!(table.lookup(&[0xde, 0xad, 0xbe]).iter().all(|c| c.session != id || c.t() >= 32));
        let hits = table.lookup(&prefix_of(&k, 3));
        assert!(hits.iter().any(|c| c.session == id && c.t() == 3 && c.keys == derive_temp_keys(&k, 3)));

        table.consume(id, 3).unwrap();
        assert!(!table.lookup(&prefix_of(&k, 3)).iter().any(|c| c.session == id && c.t() == 3));
        assert!(table.was_consumed(&prefix_of(&k, 3)));
        assert_eq!(table.consume(id, 3), Err(Error::Replay { session: id, t: 3 }));
        assert!(table.lookup(&prefix_of(&k, 32)).iter().any(|c| c.t() == 32));
        assert_eq!(table.len(), 32);

        table.consume(id, 0).unwrap();
        assert!(table.lookup(&prefix_of(&k, 33)).iter().any(|c| c.t() == 33));
        assert_eq!(table.consume(id, 500), Err(Error::OutOfWindow { session: id, t: 500 }));
        assert_eq!(table.consume(99, 0), Err(Error::UnknownSession(99)));
    }

    #[test]
    fn shuffled_windows_consume_exactly_once() {
        let mut r = rng();
        let mut table = PatternTable::default();
        let k = MasterKey::random(&mut r);
        let id = table.register_session(k.clone(), Pattern::default(), 32).unwrap();
        let mut order: Vec<u64> = (0..1000).collect();
        for chunk in order.chunks_mut(32) {
            chunk.shuffle(&mut r);
        }
        for &t in &order {
            let prefix = prefix_of(&k, t);
            assert!(table.lookup(&prefix).iter().any(|c| c.session == id && c.t() == t), "t={t}");
            table.consume(id, t).unwrap();
        }
        for &t in &order[order.len() - 32..] {
            assert!(table.consume(id, t).is_err());
        }
        assert_eq!(table.len(), 32);
        assert_eq!(table.session(id).unwrap().window_base(), Some(1000));
    }

    #[test]
    fn tombstones_are_bounded() {
        let mut table = PatternTable::default();
        let k = MasterKey::random(&mut rng());
        let id = table.register_session(k, Pattern::default(), 8).unwrap();
        for t in 0..200 {
            table.consume(id, t).unwrap();
        }
        assert!(table.tombstones.values().map(Vec::len).sum::<usize>() <= 8);
    }

    #[test]
    fn random_prefix_hit_rate_matches_occupancy() {
        let mut r = rng();
        let mut table = PatternTable::default();
        for _ in 0..64 {
            table.register_session(MasterKey::random(&mut r), Pattern::default(), 256).unwrap();
        }
        let buckets = table.stats().buckets as f64;
        let trials = 200_000usize;
        let mut hits = 0usize;
        for _ in 0..trials {
            let mut p = [0u8; 3];
            r.fill_bytes(&mut p);
            hits += !table.lookup(&p).is_empty() as usize;
        }
        let p = buckets / (1u64 << 24) as f64;
        let mean = trials as f64 * p;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        assert!((hits as f64 - mean).abs() <= 4.0 * sigma, "hits {hits}, expected {mean}");
    }

    #[test]
    fn memory_bound_and_capacity() {
        let mut r = rng();
        let mut table = PatternTable::with_capacity(100);
        for _ in 0..3 {
            table.register_session(MasterKey::random(&mut r), Pattern::default(), 32).unwrap();
        }
        assert_eq!(table.len(), 96);
        assert_eq!(table.stats().sessions, 3);
        assert_eq!(
            table.register_session(MasterKey::random(&mut r), Pattern::default(), 32),
            Err(Error::TableFull(100))
        );
        assert_eq!(
            table.register_session(MasterKey::random(&mut r), Pattern::default(), 0),
            Err(Error::InvalidWindow(0))
        );
        assert_eq!(
            table.register_session(MasterKey::random(&mut r), Pattern::default(), 1025),
            Err(Error::InvalidWindow(1025))
        );
    }
}
