//! Two-tier paged KV-block store.
//!
//! Each tier has `n_num` physical block slots per KV head, laid out as
//! `(n_num, heads, n_b, d_head)`. A logical block `(batch, head, block)` lives
//! in exactly one tier at a time; the manager keeps one logical-to-physical
//! table per tier plus a LIFO free list per `(tier, head)`.
//!
//! Decoding works in plan/apply rounds: [`KvBlockManager::plan_transfers`]
//! turns the set of blocks a step needs into fetches (slow to fast) and
//! evictions (fast to slow), and [`KvBlockManager::apply_transfers`] executes
//! the plan, moving payloads through a [`PayloadMover`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Fast,
    Slow,
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Fast => "fast",
            Tier::Slow => "slow",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhysicalLayout {
    pub tier: Tier,
    /// Block slots per head.
    pub n_num: usize,
    pub n_heads: usize,
    pub n_b: usize,
    pub d_head: usize,
    /// Bytes per element (2 for 16-bit caches, 4 for 32-bit).
    pub element_width: usize,
}

impl PhysicalLayout {
    /// K and V for one block of one head.
    pub fn bytes_per_block(&self) -> u64 {
        2 * (self.n_b * self.d_head * self.element_width) as u64
    }

    /// Whole tier footprint.
    pub fn total_bytes(&self) -> u64 {
        self.n_num as u64 * self.n_heads as u64 * self.bytes_per_block()
    }
}

/// Logical position of a block: the `block`-th block of `(batch, head)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockKey {
    pub batch: usize,
    pub head: usize,
    pub block: usize,
}

impl BlockKey {
    pub fn new(batch: usize, head: usize, block: usize) -> Self {
        Self { batch, head, block }
    }
}

impl fmt::Display for BlockKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.batch, self.head, self.block)
    }
}

/// Physical position `(tier, head, slot)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Location {
    pub tier: Tier,
    pub head: usize,
    pub slot: usize,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ManagerError {
    #[error("tier layouts disagree: {0}")]
    LayoutMismatch(String),
    #[error("head {head} out of range ({heads} heads)")]
    InvalidHead { head: usize, heads: usize },
    #[error("{tier} tier has no free block for head {head}")]
    OutOfBlocks { tier: Tier, head: usize },
    #[error("block {0} is already mapped")]
    DuplicateKey(BlockKey),
    #[error("block {0} is not mapped")]
    UnknownKey(BlockKey),
    #[error("head {head} needs {required} fast blocks but the tier has {capacity}")]
    CapacityExceeded {
        head: usize,
        required: usize,
        capacity: usize,
    },
    #[error("plan was made against table version {planned}, tables are at {current}")]
    StalePlan { planned: u64, current: u64 },
    #[error("audit failed: {0}")]
    Audit(String),
}

/// Receives physical block copies when blocks change tier.
pub trait PayloadMover {
    fn copy_block(&mut self, from: Location, to: Location);
}

/// Mover for runs that only track placement.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullMover;

impl PayloadMover for NullMover {
    fn copy_block(&mut self, _from: Location, _to: Location) {}
}

/// Host-memory payloads for both tiers, `bytes_per_block` bytes per slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostPayloads {
    bytes_per_block: usize,
    fast: Vec<u8>,
    slow: Vec<u8>,
    n_heads: usize,
}

impl HostPayloads {
    pub fn new(fast: &PhysicalLayout, slow: &PhysicalLayout) -> Self {
        let bpb = fast.bytes_per_block() as usize;
        Self {
            bytes_per_block: bpb,
            fast: vec![0; fast.n_num * fast.n_heads * bpb],
            slow: vec![0; slow.n_num * slow.n_heads * bpb],
            n_heads: fast.n_heads,
        }
    }

    fn range(&self, loc: Location) -> std::ops::Range<usize> {
        // (n_num, heads, ...) layout: slot-major, then head.
        let start = (loc.slot * self.n_heads + loc.head) * self.bytes_per_block;
        start..start + self.bytes_per_block
    }

    pub fn block(&self, loc: Location) -> &[u8] {
        let r = self.range(loc);
        match loc.tier {
            Tier::Fast => &self.fast[r],
            Tier::Slow => &self.slow[r],
        }
    }

    pub fn block_mut(&mut self, loc: Location) -> &mut [u8] {
        let r = self.range(loc);
        match loc.tier {
            Tier::Fast => &mut self.fast[r],
            Tier::Slow => &mut self.slow[r],
        }
    }
}

impl PayloadMover for HostPayloads {
    fn copy_block(&mut self, from: Location, to: Location) {
        let data = self.block(from).to_vec();
        self.block_mut(to).copy_from_slice(&data);
    }
}

/// A fast-resident block that may be evicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VictimCandidate {
    pub key: BlockKey,
    /// Step stamp of the last time the block was required (0 = never).
    pub last_required: u64,
}

/// Chooses which fast-resident blocks to move out.
pub trait VictimPolicy: fmt::Debug + Send + Sync {
    /// Returns exactly `count` keys drawn from `candidates`.
    fn choose(&self, candidates: Vec<VictimCandidate>, count: usize) -> Vec<BlockKey>;
}

/// Evicts the blocks required longest ago; ties go to the smallest key.
#[derive(Debug, Default, Clone, Copy)]
pub struct LeastRecentlyRequired;

impl VictimPolicy for LeastRecentlyRequired {
    fn choose(&self, mut candidates: Vec<VictimCandidate>, count: usize) -> Vec<BlockKey> {
        candidates.sort_unstable_by_key(|c| (c.last_required, c.key));
        candidates.into_iter().take(count).map(|c| c.key).collect()
    }
}

/// Moves needed to make a required block set fast-resident.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferPlan {
    /// Table version the plan was computed against.
    pub version: u64,
    pub required: Vec<BlockKey>,
    /// Slow to fast.
    pub fetch: Vec<BlockKey>,
    /// Fast to slow, chosen among fast-resident blocks not in `required`.
    pub evict: Vec<BlockKey>,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

impl TransferPlan {
    pub fn is_empty(&self) -> bool {
        self.fetch.is_empty() && self.evict.is_empty()
    }
}

/// Counters since construction or the last [`KvBlockManager::reset_stats`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ResidencyStats {
    pub steps: u64,
    pub required_blocks: u64,
    pub hit_blocks: u64,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

impl ResidencyStats {
    /// Fraction of required blocks already fast-resident when planned.
    /// Defined as 1 when nothing has been required yet.
    pub fn hit_rate(&self) -> f64 {
        if self.required_blocks == 0 {
            1.0
        } else {
            self.hit_blocks as f64 / self.required_blocks as f64
        }
    }
}

#[derive(Debug)]
struct TierTable {
    layout: PhysicalLayout,
    map: HashMap<BlockKey, usize>,
    /// `owners[head][slot]`
    owners: Vec<Vec<Option<BlockKey>>>,
    /// LIFO: the next slot handed out is `free[head].last()`.
    free: Vec<Vec<usize>>,
}

impl TierTable {
    fn new(layout: PhysicalLayout) -> Self {
        Self {
            layout,
            map: HashMap::new(),
            owners: vec![vec![None; layout.n_num]; layout.n_heads],
            free: (0..layout.n_heads)
                .map(|_| (0..layout.n_num).rev().collect())
                .collect(),
        }
    }

    fn insert(&mut self, key: BlockKey) -> Result<usize, ManagerError> {
        let slot = self.free[key.head].pop().ok_or(ManagerError::OutOfBlocks {
            tier: self.layout.tier,
            head: key.head,
        })?;
        self.owners[key.head][slot] = Some(key);
        self.map.insert(key, slot);
        Ok(slot)
    }

    fn remove(&mut self, key: &BlockKey) -> Option<usize> {
        let slot = self.map.remove(key)?;
        self.owners[key.head][slot] = None;
        self.free[key.head].push(slot);
        Some(slot)
    }

    fn location(&self, key: &BlockKey) -> Option<Location> {
        self.map.get(key).map(|&slot| Location {
            tier: self.layout.tier,
            head: key.head,
            slot,
        })
    }
}

/// Logical-to-physical block tables for a fast and a slow tier.
#[derive(Debug)]
pub struct KvBlockManager {
    fast: TierTable,
    slow: TierTable,
    last_required: HashMap<BlockKey, u64>,
    /// Stamp given to blocks required by the next applied plan.
    clock: u64,
    version: u64,
    stats: ResidencyStats,
    policy: Box<dyn VictimPolicy>,
}

impl KvBlockManager {
    pub fn new(fast: PhysicalLayout, slow: PhysicalLayout) -> Result<Self, ManagerError> {
        Self::with_policy(fast, slow, Box::new(LeastRecentlyRequired))
    }

    pub fn with_policy(
        fast: PhysicalLayout,
        slow: PhysicalLayout,
        policy: Box<dyn VictimPolicy>,
    ) -> Result<Self, ManagerError> {
        if fast.tier != Tier::Fast || slow.tier != Tier::Slow {
            return Err(ManagerError::LayoutMismatch("tier labels".into()));
        }
        if (fast.n_heads, fast.n_b, fast.d_head, fast.element_width)
            != (slow.n_heads, slow.n_b, slow.d_head, slow.element_width)
        {
            return Err(ManagerError::LayoutMismatch(format!(
                "fast {fast:?} vs slow {slow:?}"
            )));
        }
        Ok(Self {
            fast: TierTable::new(fast),
            slow: TierTable::new(slow),
            last_required: HashMap::new(),
            clock: 1,
            version: 0,
            stats: ResidencyStats::default(),
            policy,
        })
    }

    pub fn layout(&self, tier: Tier) -> &PhysicalLayout {
        &self.table(tier).layout
    }

    pub fn bytes_per_block(&self) -> u64 {
        self.fast.layout.bytes_per_block()
    }

    /// Incremented by every mutation.
    pub fn version(&self) -> u64 {
        self.version
    }

    fn table(&self, tier: Tier) -> &TierTable {
        match tier {
            Tier::Fast => &self.fast,
            Tier::Slow => &self.slow,
        }
    }

    fn table_mut(&mut self, tier: Tier) -> &mut TierTable {
        match tier {
            Tier::Fast => &mut self.fast,
            Tier::Slow => &mut self.slow,
        }
    }

    fn check_head(&self, head: usize) -> Result<(), ManagerError> {
        let heads = self.fast.layout.n_heads;
        if head >= heads {
            return Err(ManagerError::InvalidHead { head, heads });
        }
        Ok(())
    }

    pub fn free_slots(&self, tier: Tier, head: usize) -> usize {
        self.table(tier).free[head].len()
    }

    pub fn resident_count(&self, tier: Tier) -> usize {
        self.table(tier).map.len()
    }

    /// Maps `key` into `tier`.
    pub fn allocate(&mut self, tier: Tier, key: BlockKey) -> Result<usize, ManagerError> {
        self.check_head(key.head)?;
        if self.lookup(key).is_some() {
            return Err(ManagerError::DuplicateKey(key));
        }
        let slot = self.table_mut(tier).insert(key)?;
        self.version += 1;
        Ok(slot)
    }

    pub fn lookup(&self, key: BlockKey) -> Option<Location> {
        self.fast
            .location(&key)
            .or_else(|| self.slow.location(&key))
    }

    /// Unmaps `key`, returning its slot to the front of the free list.
    pub fn free(&mut self, key: BlockKey) -> Result<(), ManagerError> {
        let freed = self.fast.remove(&key).or_else(|| self.slow.remove(&key));
        if freed.is_none() {
            return Err(ManagerError::UnknownKey(key));
        }
        self.last_required.remove(&key);
        self.version += 1;
        Ok(())
    }

    fn move_block(&mut self, key: BlockKey, to: Tier, mover: &mut dyn PayloadMover) -> Result<(), ManagerError> {
        let from_tier = match to {
            Tier::Fast => Tier::Slow,
            Tier::Slow => Tier::Fast,
        };
        let from = self
            .table(from_tier)
            .location(&key)
            .ok_or(ManagerError::UnknownKey(key))?;
        let slot = self.table_mut(to).insert(key)?;
        self.table_mut(from_tier).remove(&key);
        mover.copy_block(
            from,
            Location {
                tier: to,
                head: key.head,
                slot,
            },
        );
        Ok(())
    }

    fn victim_candidates(&self, head: usize, keep: &BTreeSet<BlockKey>) -> Vec<VictimCandidate> {
        self.fast.owners[head]
            .iter()
            .flatten()
            .filter(|k| !keep.contains(k))
            .map(|&key| VictimCandidate {
                key,
                last_required: self.last_required.get(&key).copied().unwrap_or(0),
            })
            .collect()
    }

    /// Registers a newly created block. It goes to the fast tier, evicting
    /// the policy's victim to the slow tier if the head has no free fast
    /// slot; a tier with zero fast slots places it in the slow tier.
    pub fn append(&mut self, key: BlockKey, mover: &mut dyn PayloadMover) -> Result<Location, ManagerError> {
        self.check_head(key.head)?;
        if self.lookup(key).is_some() {
            return Err(ManagerError::DuplicateKey(key));
        }
        if self.fast.layout.n_num == 0 {
            self.slow.insert(key)?;
        } else {
            if self.fast.free[key.head].is_empty() {
                let victim = self
                    .policy
                    .choose(self.victim_candidates(key.head, &BTreeSet::new()), 1);
                if self.slow.free[key.head].is_empty() {
                    return Err(ManagerError::OutOfBlocks {
                        tier: Tier::Slow,
                        head: key.head,
                    });
                }
                self.move_block(victim[0], Tier::Slow, mover)?;
                self.stats.bytes_down += self.bytes_per_block();
            }
            self.fast.insert(key)?;
        }
        self.last_required.insert(key, self.clock);
        self.version += 1;
        Ok(self.lookup(key).expect("just inserted"))
    }

    /// Computes the moves that leave every key of `required` fast-resident.
    ///
    /// Fetches are exactly the required blocks currently in the slow tier.
    /// Evictions are only made when a head lacks free fast slots and are
    /// chosen by the victim policy among non-required fast blocks.
    pub fn plan_transfers(&self, required: &BTreeSet<BlockKey>) -> Result<TransferPlan, ManagerError> {
        let mut fetch = Vec::new();
        let mut per_head: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for &key in required {
            self.check_head(key.head)?;
            let loc = self.lookup(key).ok_or(ManagerError::UnknownKey(key))?;
            let entry = per_head.entry(key.head).or_default();
            entry.0 += 1;
            if loc.tier == Tier::Slow {
                fetch.push(key);
                entry.1 += 1;
            }
        }
        let mut evict = Vec::new();
        for (&head, &(needed, fetching)) in &per_head {
            let capacity = self.fast.layout.n_num;
            if needed > capacity {
                return Err(ManagerError::CapacityExceeded {
                    head,
                    required: needed,
                    capacity,
                });
            }
            let short = fetching.saturating_sub(self.fast.free[head].len());
            if short > 0 {
                if self.slow.free[head].len() < short {
                    return Err(ManagerError::OutOfBlocks {
                        tier: Tier::Slow,
                        head,
                    });
                }
                evict.extend(self.policy.choose(self.victim_candidates(head, required), short));
            }
        }
        let bpb = self.bytes_per_block();
        Ok(TransferPlan {
            version: self.version,
            required: required.iter().copied().collect(),
            bytes_up: fetch.len() as u64 * bpb,
            bytes_down: evict.len() as u64 * bpb,
            fetch,
            evict,
        })
    }

    /// Convenience wrapper for one `(batch, head)` and a list of block indices.
    pub fn plan_for(&self, batch: usize, head: usize, blocks: &[usize]) -> Result<TransferPlan, ManagerError> {
        let required = blocks.iter().map(|&b| BlockKey::new(batch, head, b)).collect();
        self.plan_transfers(&required)
    }

    /// Executes `plan`: evictions first, then fetches, then stamps the
    /// required blocks and updates the counters.
    pub fn apply_transfers(
        &mut self,
        plan: &TransferPlan,
        mover: &mut dyn PayloadMover,
    ) -> Result<ResidencyStats, ManagerError> {
        if plan.version != self.version {
            return Err(ManagerError::StalePlan {
                planned: plan.version,
                current: self.version,
            });
        }
        for &key in &plan.evict {
            self.move_block(key, Tier::Slow, mover)?;
        }
        for &key in &plan.fetch {
            self.move_block(key, Tier::Fast, mover)?;
        }
        for &key in &plan.required {
            self.last_required.insert(key, self.clock);
        }
        self.clock += 1;
        self.version += 1;
        self.stats.steps += 1;
        self.stats.required_blocks += plan.required.len() as u64;
        self.stats.hit_blocks += (plan.required.len() - plan.fetch.len()) as u64;
        self.stats.bytes_up += plan.bytes_up;
        self.stats.bytes_down += plan.bytes_down;
        Ok(self.stats)
    }

    pub fn residency_stats(&self) -> ResidencyStats {
        self.stats
    }

    pub fn reset_stats(&mut self) {
        self.stats = ResidencyStats::default();
    }

    /// Walks both tiers and checks that mapped slots and free lists exactly
    /// partition every `(tier, head)` and that no key is in both tiers.
    pub fn audit(&self) -> Result<(), ManagerError> {
        for table in [&self.fast, &self.slow] {
            let tier = table.layout.tier;
            let mut mapped = 0;
            for (head, owners) in table.owners.iter().enumerate() {
                let mut seen = vec![false; owners.len()];
                for &slot in &table.free[head] {
                    if slot >= owners.len() || seen[slot] {
                        return Err(ManagerError::Audit(format!("{tier} head {head}: bad free slot {slot}")));
                    }
                    seen[slot] = true;
                    if owners[slot].is_some() {
                        return Err(ManagerError::Audit(format!("{tier} head {head}: slot {slot} free and mapped")));
                    }
                }
                for (slot, owner) in owners.iter().enumerate() {
                    match owner {
                        Some(key) => {
                            mapped += 1;
                            if key.head != head || table.map.get(key) != Some(&slot) {
                                return Err(ManagerError::Audit(format!("{tier}: {key} / slot {slot} disagree")));
                            }
                        }
                        None if !seen[slot] => {
                            return Err(ManagerError::Audit(format!("{tier} head {head}: slot {slot} leaked")));
                        }
                        None => {}
                    }
                }
            }
            if mapped != table.map.len() {
                return Err(ManagerError::Audit(format!("{tier}: table has unowned entries")));
            }
        }
        if let Some(k) = self.fast.map.keys().find(|k| self.slow.map.contains_key(k)) {
            return Err(ManagerError::Audit(format!("{k} mapped in both tiers")));
        }
        Ok(())
    }

    /// Every mapping sorted by key.
    pub fn mappings(&self) -> Vec<(BlockKey, Location)> {
        let mut all: Vec<(BlockKey, Location)> = self
            .fast
            .map
            .keys()
            .chain(self.slow.map.keys())
            .map(|&k| (k, self.lookup(k).expect("mapped")))
            .collect();
        all.sort_by_key(|(k, _)| *k);
        all
    }

    /// Audit dump with header `batch,head,block,tier,slot`.
    pub fn dump_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "batch,head,block,tier,slot")?;
        for (k, loc) in self.mappings() {
            writeln!(out, "{},{},{},{},{}", k.batch, k.head, k.block, loc.tier, loc.slot)?;
        }
        Ok(())
    }
}
