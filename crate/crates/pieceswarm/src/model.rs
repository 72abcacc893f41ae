//! Count-state Markov chain of the swarm.
//!
//! A state assigns to every piece collection `C` (a subset of the `K` pieces)
//! the number of peers currently holding exactly `C`. Peers holding all `K`
//! pieces are "peer seeds"; with an infinite seed-departure rate they leave
//! the instant they complete, so the full collection never appears in a state.
//!
//! Transition rates out of a state `x` with `n >= 1` peers:
//!
//! * arrival of a type-`C` peer at rate `lambda_C`,
//! * departure of a peer seed at rate `gamma * x_F` (finite `gamma` only),
//! * upgrade of a type-`C` peer by piece `i`, at the contact rate
//!
//!   `(x_C / n) * (Us / (K - |C|) + mu * sum over S containing i of x_S / |S \ C|)`.
//!
//! The first term is the fixed seed picking a uniformly random peer and then a
//! uniformly random piece the target lacks; the second is every holder of `i`
//! picking a uniformly random peer (possibly itself, a no-op) and then a
//! uniformly random piece useful to it. When an upgrade completes a collection
//! and `gamma` is infinite, the peer departs in the same transition.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Result, SwarmError};

/// Largest piece count supported by count-state enumeration.
pub const MAX_PIECES: u32 = 24;

/// A subset of the pieces `{1, ..., K}`, stored as a bitmask.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct PieceSet(u32);

impl PieceSet {
    pub const EMPTY: PieceSet = PieceSet(0);

    /// The full collection for a `k`-piece file.
    pub fn full(k: u32) -> PieceSet {
        debug_assert!((1..=MAX_PIECES).contains(&k));
        PieceSet((1u32 << k) - 1)
    }

    /// Builds a set from 1-based piece indices, validating the range.
    pub fn from_pieces<I: IntoIterator<Item = u32>>(pieces: I, k: u32) -> Result<PieceSet> {
        let mut bits = 0u32;
        for p in pieces {
            if p < 1 || p > k {
                return Err(SwarmError::PieceOutOfRange { piece: p, k });
            }
            bits |= 1 << (p - 1);
        }
        Ok(PieceSet(bits))
    }

    pub fn from_bits(bits: u32) -> PieceSet {
        PieceSet(bits)
    }

    pub fn bits(self) -> u32 {
        self.0
    }

    pub fn len(self) -> u32 {
        self.0.count_ones()
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn contains(self, piece: u32) -> bool {
        piece >= 1 && self.0 & (1 << (piece - 1)) != 0
    }

    /// Set with `piece` added (1-based).
    pub fn with(self, piece: u32) -> PieceSet {
        PieceSet(self.0 | (1 << (piece - 1)))
    }

    pub fn is_subset_of(self, other: PieceSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn is_full(self, k: u32) -> bool {
        self == PieceSet::full(k)
    }

    /// Pieces in `self` but not in `other`.
    pub fn minus(self, other: PieceSet) -> PieceSet {
        PieceSet(self.0 & !other.0)
    }

    /// Iterates the 1-based piece indices present in the set.
    pub fn pieces(self) -> impl Iterator<Item = u32> {
        let bits = self.0;
        (1..=MAX_PIECES).filter(move |p| bits & (1 << (p - 1)) != 0)
    }

    /// Iterates the 1-based piece indices missing from the set, up to `k`.
    pub fn missing(self, k: u32) -> impl Iterator<Item = u32> {
        let bits = self.0;
        (1..=k).filter(move |p| bits & (1 << (p - 1)) == 0)
    }
}

impl fmt::Display for PieceSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        let mut first = true;
        for p in self.pieces() {
            if !first {
                write!(f, ",")?;
            }
            write!(f, "{p}")?;
            first = false;
        }
        write!(f, "}}")
    }
}

impl fmt::Debug for PieceSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// Rate at which a completed peer leaves the system.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Departure {
    Finite(f64),
    /// Completed peers leave instantly; the full collection is never occupied.
    Infinite,
}

impl Departure {
    pub fn is_infinite(self) -> bool {
        matches!(self, Departure::Infinite)
    }

    /// `mu / gamma`, the expected number of contacts a lingering seed makes.
    pub fn rho(self, mu: f64) -> f64 {
        match self {
            Departure::Finite(g) => mu / g,
            Departure::Infinite => 0.0,
        }
    }
}

/// Fixed parameters of the swarm chain.
#[derive(Clone, Debug)]
pub struct SwarmParams {
    /// Number of pieces in the file, `1..=24`.
    pub k: u32,
    /// Upload rate of the permanent seed, `Us >= 0`.
    pub seed_rate: f64,
    /// Contact rate of each peer, `mu > 0`.
    pub contact_rate: f64,
    /// Departure rate of completed peers.
    pub departure: Departure,
    /// Arrival rate per collection type; types must be distinct, rates `> 0`.
    pub arrivals: Vec<(PieceSet, f64)>,
}

impl SwarmParams {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.k > MAX_PIECES {
            return Err(SwarmError::InvalidParams(format!(
                "piece count {} outside 1..={MAX_PIECES}",
                self.k
            )));
        }
        if !(self.contact_rate > 0.0) || !self.contact_rate.is_finite() {
            return Err(SwarmError::InvalidParams(
                "contact rate mu must be positive and finite".into(),
            ));
        }
        if !(self.seed_rate >= 0.0) || !self.seed_rate.is_finite() {
            return Err(SwarmError::InvalidParams(
                "seed rate Us must be nonnegative and finite".into(),
            ));
        }
        if let Departure::Finite(g) = self.departure {
            if !(g > 0.0) || !g.is_finite() {
                return Err(SwarmError::InvalidParams(
                    "finite departure rate gamma must be positive".into(),
                ));
            }
        }
        let full = PieceSet::full(self.k);
        let mut seen = std::collections::BTreeSet::new();
        let mut total = 0.0f64;
        for &(c, rate) in &self.arrivals {
            if c.bits() & !full.bits() != 0 {
                return Err(SwarmError::InvalidParams(format!(
                    "arrival type {c} has pieces beyond K={}",
                    self.k
                )));
            }
            if !(rate > 0.0) || !rate.is_finite() {
                return Err(SwarmError::InvalidParams(format!(
                    "arrival rate for {c} must be positive and finite"
                )));
            }
            if !seen.insert(c) {
                return Err(SwarmError::InvalidParams(format!(
                    "duplicate arrival type {c}"
                )));
            }
            if c == full && self.departure.is_infinite() {
                return Err(SwarmError::InvalidParams(
                    "arrivals of the full collection require a finite departure rate".into(),
                ));
            }
            total += rate;
        }
        if !(total > 0.0) {
            return Err(SwarmError::InvalidParams(
                "total arrival rate must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn lambda_total(&self) -> f64 {
        self.arrivals.iter().map(|&(_, r)| r).sum()
    }

    pub fn lambda_of(&self, c: PieceSet) -> f64 {
        self.arrivals
            .iter()
            .find(|&&(t, _)| t == c)
            .map_or(0.0, |&(_, r)| r)
    }

    /// `mu / gamma` (zero when departures are instantaneous).
    pub fn rho(&self) -> f64 {
        self.departure.rho(self.contact_rate)
    }

    pub fn full_set(&self) -> PieceSet {
        PieceSet::full(self.k)
    }
}

/// Number of peers per collection type. Zero-count types are not stored.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CountState {
    counts: BTreeMap<PieceSet, u64>,
    total: u64,
}

impl CountState {
    pub fn empty() -> CountState {
        CountState::default()
    }

    pub fn from_pairs<I: IntoIterator<Item = (PieceSet, u64)>>(pairs: I) -> CountState {
        let mut s = CountState::default();
        for (c, v) in pairs {
            if v > 0 {
                s.add(c, v as i64);
            }
        }
        s
    }

    pub fn get(&self, c: PieceSet) -> u64 {
        self.counts.get(&c).copied().unwrap_or(0)
    }

    /// Total population `n`.
    pub fn n(&self) -> u64 {
        self.total
    }

    /// Adjusts the count of `c` by `delta`, panicking if it would go negative.
    pub fn add(&mut self, c: PieceSet, delta: i64) {
        if delta == 0 {
            return;
        }
        let cur = self.get(c) as i64;
        let next = cur + delta;
        assert!(next >= 0, "count of {c} would become negative");
        if next == 0 {
            self.counts.remove(&c);
        } else {
            self.counts.insert(c, next as u64);
        }
        self.total = (self.total as i64 + delta) as u64;
    }

    /// Nonzero entries in deterministic (bitmask) order.
    pub fn iter(&self) -> impl Iterator<Item = (PieceSet, u64)> + '_ {
        self.counts.iter().map(|(&c, &v)| (c, v))
    }

    pub fn type_count(&self) -> usize {
        self.counts.len()
    }

    /// Checks the state is consistent with the parameters: no out-of-range
    /// pieces, and no occupied full collection when departures are instant.
    pub fn validate_for(&self, params: &SwarmParams) -> Result<()> {
        let full = params.full_set();
        for (c, _) in self.iter() {
            if c.bits() & !full.bits() != 0 {
                return Err(SwarmError::InvalidParams(format!(
                    "state holds type {c} beyond K={}",
                    params.k
                )));
            }
            if c == full && params.departure.is_infinite() {
                return Err(SwarmError::InvalidParams(
                    "full collection occupied under instantaneous departures".into(),
                ));
            }
        }
        Ok(())
    }
}

/// What a generator entry does, for reporting and aggregation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransitionKind {
    Arrival(PieceSet),
    /// Type `C` peer gains piece `i` (target type still incomplete, or
    /// complete with a finite departure rate).
    Upgrade(PieceSet, u32),
    /// Type `C` peer gains its last piece and leaves at once (infinite gamma).
    CompletionDeparture(PieceSet, u32),
    SeedDeparture,
}

/// One positive off-diagonal generator entry `q(x, x')`.
#[derive(Clone, Debug)]
pub struct RateEntry {
    pub kind: TransitionKind,
    /// Sparse count changes taking `x` to the target state.
    pub delta: Vec<(PieceSet, i64)>,
    pub rate: f64,
}

impl RateEntry {
    pub fn apply(&self, state: &mut CountState) {
        for &(c, d) in &self.delta {
            state.add(c, d);
        }
    }

    pub fn revert(&self, state: &mut CountState) {
        for &(c, d) in &self.delta {
            state.add(c, -d);
        }
    }

    /// The target state reached from `base`.
    pub fn target(&self, base: &CountState) -> CountState {
        let mut t = base.clone();
        self.apply(&mut t);
        t
    }
}

/// All positive transition rates out of one state. The diagonal is implicit.
#[derive(Clone, Debug)]
pub struct RateTable {
    entries: Vec<RateEntry>,
}

impl RateTable {
    pub fn entries(&self) -> &[RateEntry] {
        &self.entries
    }

    pub fn total_rate(&self) -> f64 {
        self.entries.iter().map(|e| e.rate).sum()
    }

    /// Pairwise flow `Gamma_{C,C'}`: the rate of upgrades taking a type-`C`
    /// peer to type `C'` (including completion departures when `C'` is full).
    pub fn gamma_between(&self, c: PieceSet, c_next: PieceSet, k: u32) -> f64 {
        self.entries
            .iter()
            .filter(|e| match e.kind {
                TransitionKind::Upgrade(from, i) => from == c && from.with(i) == c_next,
                TransitionKind::CompletionDeparture(from, i) => {
                    from == c && from.with(i) == c_next && c_next.is_full(k)
                }
                _ => false,
            })
            .map(|e| e.rate)
            .sum()
    }

    /// Departure aggregate `D_C`: total upgrade rate out of an incomplete
    /// type `C`, or the seed-departure rate for the full collection.
    pub fn d_aggregate(&self, c: PieceSet, k: u32) -> f64 {
        if c.is_full(k) {
            self.entries
                .iter()
                .filter(|e| e.kind == TransitionKind::SeedDeparture)
                .map(|e| e.rate)
                .sum()
        } else {
            self.entries
                .iter()
                .filter(|e| {
                    matches!(e.kind,
                        TransitionKind::Upgrade(from, _)
                        | TransitionKind::CompletionDeparture(from, _) if from == c)
                })
                .map(|e| e.rate)
                .sum()
        }
    }
}

/// Aggregate rate at which some type-`C` peer acquires piece `i`.
///
/// Zero when there are no peers, no type-`C` peers, or `C` already has `i`.
pub fn gamma_rate(state: &CountState, params: &SwarmParams, c: PieceSet, i: u32) -> f64 {
    let n = state.n();
    let x_c = state.get(c);
    if n == 0 || x_c == 0 || c.contains(i) || c.is_full(params.k) {
        return 0.0;
    }
    let mut supply = 0.0;
    for (s, x_s) in state.iter() {
        if s.contains(i) {
            let gap = s.minus(c).len();
            debug_assert!(gap >= 1);
            supply += x_s as f64 / gap as f64;
        }
    }
    let seed_part = params.seed_rate / (params.k - c.len()) as f64;
    (x_c as f64 / n as f64) * (seed_part + params.contact_rate * supply)
}

/// Builds the generator row out of `state`: arrivals, seed departures, and
/// every positive upgrade (with completion folded into departure when
/// departures are instantaneous).
pub fn neighbors(state: &CountState, params: &SwarmParams) -> RateTable {
    let full = params.full_set();
    let mut entries = Vec::new();

    for &(c, rate) in &params.arrivals {
        entries.push(RateEntry {
            kind: TransitionKind::Arrival(c),
            delta: vec![(c, 1)],
            rate,
        });
    }

    if let Departure::Finite(g) = params.departure {
        let x_f = state.get(full);
        if x_f > 0 {
            entries.push(RateEntry {
                kind: TransitionKind::SeedDeparture,
                delta: vec![(full, -1)],
                rate: g * x_f as f64,
            });
        }
    }

    for (c, _) in state.iter() {
        if c == full {
            continue;
        }
        for i in c.missing(params.k) {
            let rate = gamma_rate(state, params, c, i);
            if rate <= 0.0 {
                continue;
            }
            let next = c.with(i);
            if next == full && params.departure.is_infinite() {
                entries.push(RateEntry {
                    kind: TransitionKind::CompletionDeparture(c, i),
                    delta: vec![(c, -1)],
                    rate,
                });
            } else {
                entries.push(RateEntry {
                    kind: TransitionKind::Upgrade(c, i),
                    delta: vec![(c, -1), (next, 1)],
                    rate,
                });
            }
        }
    }

    RateTable { entries }
}

/// Exact generator drift `sum over x' of q(x,x') * (f(x') - f(x))`.
pub fn drift<F: Fn(&CountState) -> f64>(state: &CountState, params: &SwarmParams, f: F) -> f64 {
    let table = neighbors(state, params);
    let mut work = state.clone();
    let base = f(&work);
    let mut acc = 0.0;
    for entry in table.entries() {
        entry.apply(&mut work);
        acc += entry.rate * (f(&work) - base);
        entry.revert(&mut work);
    }
    acc
}
