//! Event-driven simulation of the swarm in exact per-peer form.
//!
//! The simulator keeps a roster of individual peers rather than count
//! aggregates, because the census groups (gifted, infected, one-club
//! membership) depend on each peer's history, not just its current type.
//! Contacts are pull-based: a uniformly chosen contactor downloads one piece
//! from a uniformly chosen target, self-contact included as a no-op. With the
//! random-useful policy the induced count-state chain has exactly the
//! generator built by [`crate::model::neighbors`]; a test pins that down by
//! comparing empirical transition frequencies against the generator row.
//!
//! Three engines share one event loop:
//! * the uncoded roster engine, for any piece-selection policy;
//! * the coded engine, where a peer's knowledge is a subspace of `F_q^K` and
//!   transfers carry random combinations of the uploader's basis;
//! * the watched chain ([`run_watched`]), which collapses the one-club regime
//!   to its slow component `(n, k)` and resolves the fast exchange phases as
//!   embedded jump chains.
//!
//! Time advances by exponential holding times at the total event rate
//! `lambda + U_s 1{n >= 1} + n mu + gamma * #seeds`; events that move no piece
//! (self-contact, nothing useful, a zero combination) still consume their
//! tick. Sampling happens on a wall-clock grid and optionally every fixed
//! number of events; the second-half time average of `n` is integrated
//! exactly over the event path, not read off the samples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Exp};

use crate::coding::{CodedArrival, CodedParams, Field, Subspace};
use crate::error::{Result, SwarmError};
use crate::exec;
use crate::model::{CountState, Departure, PieceSet, SwarmParams};
use crate::policy::{Policy, Uploader};
use crate::stats;

/// Largest type space reported per-type; larger files get size histograms.
pub const FULL_TYPE_LIMIT: usize = 4096;

/// One roster entry. The collection only grows, and the history tags
/// (`gifted`, `infected`, `was_one_club`) are set at most once and never
/// cleared, so every census group except `e` is monotone in time.
#[derive(Clone, Debug, PartialEq)]
pub struct Peer {
    pub have: PieceSet,
    pub arrived_with: PieceSet,
    /// Arrived already holding the designated piece.
    pub gifted: bool,
    /// Downloaded the designated piece while still missing another.
    pub infected: bool,
    /// Was at some point exactly one piece short, missing the designated one.
    pub was_one_club: bool,
    /// Completion time, for peers that linger as seeds (finite departures).
    pub seed_since: Option<f64>,
}

/// Roster entry in coded mode: knowledge is a subspace, and the designated
/// piece generalises to the hyperplane of vectors with a zero designated
/// coordinate. A peer is "enlightened" once its span leaves that hyperplane.
#[derive(Clone, Debug)]
pub struct CodedPeer {
    pub span: Subspace,
    pub gifted: bool,
    pub infected: bool,
    pub was_one_club: bool,
    pub seed_since: Option<f64>,
}

/// Peer counts by census group for the designated piece: `a` still missing it
/// and at least one other, `b` infected, `g` gifted, `e` currently one short
/// with the designated piece the gap, `f` complete former `e` members.
///
/// The five groups partition the roster: a gifted peer always holds the
/// designated piece so it can never enter `e`, and a complete peer either
/// passed through `e` (hence `f`) or acquired the piece earlier (hence `g` or
/// `b`).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Census {
    pub a: u64,
    pub b: u64,
    pub g: u64,
    pub e: u64,
    pub f: u64,
}

impl Census {
    pub fn total(&self) -> u64 {
        self.a + self.b + self.g + self.e + self.f
    }
}

/// Classifies a roster against the designated piece. Priority order: current
/// one-club type, then complete former members, then gifted, then infected.
pub fn census(roster: &[Peer], k: u32, designated: u32) -> Census {
    let full = PieceSet::full(k);
    let one_club = full.minus(PieceSet::EMPTY.with(designated));
    let mut c = Census::default();
    for p in roster {
        if p.have == one_club {
            c.e += 1;
        } else if p.have == full && p.was_one_club {
            c.f += 1;
        } else if p.gifted {
            c.g += 1;
        } else if p.infected {
            c.b += 1;
        } else {
            c.a += 1;
        }
    }
    c
}

/// Whether every basis vector has a zero in the designated coordinate, i.e.
/// the span lies inside the hyperplane that misses the designated piece.
fn span_avoids(span: &Subspace, coord: usize) -> bool {
    span.basis().iter().all(|row| row[coord] == 0)
}

/// Coded analogue of [`census`]; `e` is the hyperplane itself (dimension
/// `K-1`, designated coordinate zero throughout).
pub fn coded_census(roster: &[CodedPeer], k: u32, designated: u32) -> Census {
    let coord = designated as usize - 1;
    let mut c = Census::default();
    for p in roster {
        let inside = span_avoids(&p.span, coord);
        if inside && p.span.dim() == k as usize - 1 {
            c.e += 1;
        } else if p.span.is_full() && p.was_one_club {
            c.f += 1;
        } else if p.gifted {
            c.g += 1;
        } else if p.infected {
            c.b += 1;
        } else {
            c.a += 1;
        }
    }
    c
}

/// Occupancy snapshot, shaped to the run: per-type counts while the type
/// space is small, a collection-size histogram for larger `K`, a subspace
/// dimension histogram in coded mode.
#[derive(Clone, Debug, PartialEq)]
pub enum TypeCounts {
    /// Indexed by the type bitmask; length `2^K`.
    Full(Vec<u64>),
    /// Indexed by `|C|`; length `K + 1`.
    SizeHist(Vec<u64>),
    /// Indexed by subspace dimension; length `K + 1`.
    DimHist(Vec<u64>),
}

impl TypeCounts {
    pub fn total(&self) -> u64 {
        match self {
            TypeCounts::Full(v) | TypeCounts::SizeHist(v) | TypeCounts::DimHist(v) => {
                v.iter().sum()
            }
        }
    }
}

/// State snapshot taken at one sampling instant.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub n: u64,
    pub types: TypeCounts,
    /// Fraction of current peers in census group `e`; zero on an empty swarm.
    pub one_club_frac: f64,
    pub census: Census,
    /// Cumulative arrivals that did not bring the designated piece.
    pub a_cum: u64,
    /// Cumulative designated-piece downloads (enlightenments in coded mode).
    pub d_cum: u64,
}

/// One simulated path, with samples plus a few exactly integrated summaries.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub samples: Vec<Sample>,
    pub horizon: f64,
    pub final_n: u64,
    pub arrivals_total: u64,
    pub departures_total: u64,
    /// Time average of `n` over the second half of the horizon.
    pub avg_n_last_half: f64,
    /// Smallest population at any instant in the second half.
    pub min_n_after_half: u64,
}

/// Which engine to run.
#[derive(Clone, Debug)]
pub enum Setting {
    Uncoded { params: SwarmParams, policy: Policy },
    Coded(CodedParams),
}

impl Setting {
    pub fn pieces(&self) -> u32 {
        match self {
            Setting::Uncoded { params, .. } => params.k,
            Setting::Coded(cp) => cp.k,
        }
    }
}

/// A complete simulation request: dynamics, horizon, the designated piece the
/// censuses track, an optional warm start, and the sampling plan.
#[derive(Clone, Debug)]
pub struct SimSpec {
    pub setting: Setting,
    pub horizon: f64,
    /// 1-based piece index (coordinate in coded mode) the censuses track.
    pub designated: u32,
    /// Initial count state; empty means the swarm starts with nobody. The
    /// synthetic history tags peers as if they had just arrived with their
    /// current collection. Uncoded only.
    pub initial: CountState,
    /// Wall-clock sampling period; zero disables grid samples.
    pub sample_grid: f64,
    /// Extra sample every this many events; zero disables.
    pub sample_stride: u64,
}

impl SimSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(SwarmError::InvalidParams(
                "horizon must be finite and positive".into(),
            ));
        }
        if !(self.sample_grid >= 0.0 && self.sample_grid.is_finite()) {
            return Err(SwarmError::InvalidParams(
                "sample grid must be finite and nonnegative".into(),
            ));
        }
        let k = self.setting.pieces();
        if self.designated < 1 || self.designated > k {
            return Err(SwarmError::PieceOutOfRange {
                piece: self.designated,
                k,
            });
        }
        match &self.setting {
            Setting::Uncoded { params, policy: _ } => {
                params.validate()?;
                self.initial.validate_for(params)
            }
            Setting::Coded(cp) => {
                cp.validate()?;
                if self.initial.n() != 0 {
                    return Err(SwarmError::Unsupported("warm starts in coded mode".into()));
                }
                Ok(())
            }
        }
    }
}

/// Cumulative flow counters shared by both engines.
#[derive(Clone, Copy, Debug, Default)]
struct Flow {
    arrivals: u64,
    departures: u64,
    a_cum: u64,
    d_cum: u64,
}

/// What the generic event loop needs from an engine.
trait Dynamics {
    fn population(&self) -> u64;
    fn total_rate(&self) -> f64;
    /// Draws and applies one event at time `t`. No-ops are legitimate.
    fn step<R: Rng + ?Sized>(&mut self, t: f64, rng: &mut R);
    fn observe(&self, t: f64) -> Sample;
    fn flow(&self) -> Flow;
}

fn drive<D: Dynamics, R: Rng + ?Sized>(
    dynamics: &mut D,
    horizon: f64,
    grid: f64,
    stride: u64,
    rng: &mut R,
) -> Trajectory {
    let half = horizon * 0.5;
    let mut t = 0.0;
    let mut samples = vec![dynamics.observe(0.0)];
    let mut next_grid = if grid > 0.0 { grid } else { f64::INFINITY };
    let mut events: u64 = 0;
    let mut area = 0.0;
    let mut min_after = u64::MAX;
    loop {
        let total = dynamics.total_rate();
        debug_assert!(total > 0.0, "event rate vanished");
        let tau = Exp::new(total).expect("positive total rate").sample(rng);
        let cut = (t + tau).min(horizon);
        // n is constant on [t, cut); fold that stretch into the summaries.
        let n = dynamics.population();
        if cut > t.max(half) {
            area += n as f64 * (cut - t.max(half));
        }
        if cut >= half {
            min_after = min_after.min(n);
        }
        while next_grid <= cut {
            samples.push(dynamics.observe(next_grid));
            next_grid += grid;
        }
        if t + tau >= horizon {
            break;
        }
        t += tau;
        dynamics.step(t, rng);
        events += 1;
        if stride > 0 && events.is_multiple_of(stride) {
            samples.push(dynamics.observe(t));
        }
    }
    if samples.last().map(|s| s.t < horizon).unwrap_or(true) {
        samples.push(dynamics.observe(horizon));
    }
    let flow = dynamics.flow();
    Trajectory {
        samples,
        horizon,
        final_n: dynamics.population(),
        arrivals_total: flow.arrivals,
        departures_total: flow.departures,
        avg_n_last_half: area / (horizon - half),
        min_n_after_half: min_after,
    }
}

struct UncodedDynamics {
    params: SwarmParams,
    policy: Policy,
    designated: u32,
    one_club: PieceSet,
    full: PieceSet,
    roster: Vec<Peer>,
    /// Count mirror of the roster; doubles as the replica view for policies.
    counts: CountState,
    seeds: u64,
    flow: Flow,
}

impl UncodedDynamics {
    fn new(
        params: &SwarmParams,
        policy: Policy,
        designated: u32,
        initial: &CountState,
    ) -> UncodedDynamics {
        let full = params.full_set();
        let one_club = full.minus(PieceSet::EMPTY.with(designated));
        let mut roster = Vec::with_capacity(initial.n() as usize);
        let mut seeds = 0;
        for (c, x) in initial.iter() {
            for _ in 0..x {
                roster.push(Peer {
                    have: c,
                    arrived_with: c,
                    gifted: c.contains(designated),
                    infected: false,
                    was_one_club: c == one_club,
                    seed_since: (c == full).then_some(0.0),
                });
            }
            if c == full {
                seeds += x;
            }
        }
        UncodedDynamics {
            params: params.clone(),
            policy,
            designated,
            one_club,
            full,
            roster,
            counts: initial.clone(),
            seeds,
            flow: Flow::default(),
        }
    }

    /// (arrivals, seed uploads, peer ticks, seed departures).
    fn rate_parts(&self) -> [f64; 4] {
        let n = self.roster.len() as f64;
        let us = if self.roster.is_empty() {
            0.0
        } else {
            self.params.seed_rate
        };
        let dep = match self.params.departure {
            Departure::Finite(g) if self.seeds > 0 => g * self.seeds as f64,
            _ => 0.0,
        };
        [
            self.params.lambda_total(),
            us,
            n * self.params.contact_rate,
            dep,
        ]
    }

    fn admit(&mut self, c: PieceSet, t: f64) {
        let complete = c == self.full;
        self.roster.push(Peer {
            have: c,
            arrived_with: c,
            gifted: c.contains(self.designated),
            infected: false,
            was_one_club: c == self.one_club,
            seed_since: complete.then_some(t),
        });
        self.counts.add(c, 1);
        if complete {
            self.seeds += 1;
        }
        if !c.contains(self.designated) {
            self.flow.a_cum += 1;
        }
        self.flow.arrivals += 1;
    }

    fn pick_piece<R: Rng + ?Sized>(
        &self,
        idx: usize,
        uploader: Uploader,
        rng: &mut R,
    ) -> Option<u32> {
        let down = self.roster[idx].have;
        if self.policy == Policy::RandomUseful {
            // Uniform over the gap, without building the weight table.
            let gap = match uploader {
                Uploader::Seed => self.full.minus(down),
                Uploader::Peer(h) => h.minus(down),
            };
            let m = gap.len();
            if m == 0 {
                return None;
            }
            let j = rng.random_range(0..m) as usize;
            return gap.pieces().nth(j);
        }
        self.policy
            .choose(down, uploader, self.params.k, &self.counts, rng)
    }

    fn transfer(&mut self, idx: usize, piece: u32, t: f64) {
        let old = self.roster[idx].have;
        debug_assert!(!old.contains(piece), "transfer must enlarge the collection");
        let new = old.with(piece);
        if piece == self.designated {
            self.flow.d_cum += 1;
        }
        self.counts.add(old, -1);
        if new == self.full && self.params.departure.is_infinite() {
            self.roster.swap_remove(idx);
            self.flow.departures += 1;
            return;
        }
        self.counts.add(new, 1);
        let peer = &mut self.roster[idx];
        peer.have = new;
        if piece == self.designated && !peer.gifted && new != self.full {
            peer.infected = true;
        }
        if new == self.one_club {
            peer.was_one_club = true;
        }
        if new == self.full {
            peer.seed_since = Some(t);
            self.seeds += 1;
        }
    }

    fn seed_departure<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        debug_assert!(self.seeds > 0);
        let r = rng.random_range(0..self.seeds);
        let mut seen = 0;
        for i in 0..self.roster.len() {
            if self.roster[i].have == self.full {
                if seen == r {
                    self.roster.swap_remove(i);
                    self.counts.add(self.full, -1);
                    self.seeds -= 1;
                    self.flow.departures += 1;
                    return;
                }
                seen += 1;
            }
        }
        unreachable!("seed counter out of sync with the roster");
    }
}

impl Dynamics for UncodedDynamics {
    fn population(&self) -> u64 {
        self.roster.len() as u64
    }

    fn total_rate(&self) -> f64 {
        self.rate_parts().iter().sum()
    }

    fn step<R: Rng + ?Sized>(&mut self, t: f64, rng: &mut R) {
        let [lam, us, peers, dep] = self.rate_parts();
        let mut u = rng.random::<f64>() * (lam + us + peers + dep);
        if u < lam {
            for &(c, r) in &self.params.arrivals {
                if u < r {
                    self.admit(c, t);
                    return;
                }
                u -= r;
            }
            // Float tail: credit the last class.
            let c = self.params.arrivals.last().expect("validated nonempty").0;
            self.admit(c, t);
            return;
        }
        u -= lam;
        if u < us {
            let idx = rng.random_range(0..self.roster.len());
            if let Some(p) = self.pick_piece(idx, Uploader::Seed, rng) {
                self.transfer(idx, p, t);
            }
            return;
        }
        u -= us;
        if u < peers {
            let n = self.roster.len();
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            if a == b {
                return; // self-contact burns the tick
            }
            let uploader = Uploader::Peer(self.roster[b].have);
            if let Some(p) = self.pick_piece(a, uploader, rng) {
                self.transfer(a, p, t);
            }
            return;
        }
        self.seed_departure(rng);
    }

    fn observe(&self, t: f64) -> Sample {
        let n = self.roster.len() as u64;
        let cs = census(&self.roster, self.params.k, self.designated);
        let types = if (1usize << self.params.k) <= FULL_TYPE_LIMIT {
            let mut v = vec![0u64; 1 << self.params.k];
            for (c, x) in self.counts.iter() {
                v[c.bits() as usize] = x;
            }
            TypeCounts::Full(v)
        } else {
            let mut v = vec![0u64; self.params.k as usize + 1];
            for (c, x) in self.counts.iter() {
                v[c.len() as usize] += x;
            }
            TypeCounts::SizeHist(v)
        };
        Sample {
            t,
            n,
            types,
            one_club_frac: if n == 0 { 0.0 } else { cs.e as f64 / n as f64 },
            census: cs,
            a_cum: self.flow.a_cum,
            d_cum: self.flow.d_cum,
        }
    }

    fn flow(&self) -> Flow {
        self.flow
    }
}

enum CodedStart {
    Fixed(Subspace),
    Uniform,
}

struct CodedDynamics {
    cp: CodedParams,
    field: Field,
    full_space: Subspace,
    /// 0-based designated coordinate.
    coord: usize,
    designated: u32,
    starts: Vec<(CodedStart, f64)>,
    roster: Vec<CodedPeer>,
    seeds: u64,
    flow: Flow,
}

impl CodedDynamics {
    fn new(cp: &CodedParams, designated: u32) -> Result<CodedDynamics> {
        let field = Field::new(cp.q)?;
        let k = cp.k as usize;
        let unit_vectors: Vec<Vec<u16>> = (0..k)
            .map(|i| {
                let mut v = vec![0u16; k];
                v[i] = 1;
                v
            })
            .collect();
        let full_space = Subspace::span(k, &unit_vectors, &field)?;
        let starts = cp
            .arrivals
            .iter()
            .map(|(arr, rate)| {
                let start = match arr {
                    CodedArrival::Explicit(vectors) => {
                        CodedStart::Fixed(Subspace::span(k, vectors, &field)?)
                    }
                    CodedArrival::UniformVector => CodedStart::Uniform,
                };
                Ok((start, *rate))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CodedDynamics {
            cp: cp.clone(),
            field,
            full_space,
            coord: designated as usize - 1,
            designated,
            starts,
            roster: Vec::new(),
            seeds: 0,
            flow: Flow::default(),
        })
    }

    fn rate_parts(&self) -> [f64; 4] {
        let n = self.roster.len() as f64;
        let us = if self.roster.is_empty() {
            0.0
        } else {
            self.cp.seed_rate
        };
        let dep = match self.cp.departure {
            Departure::Finite(g) if self.seeds > 0 => g * self.seeds as f64,
            _ => 0.0,
        };
        [self.cp.lambda_total(), us, n * self.cp.contact_rate, dep]
    }

    fn admit<R: Rng + ?Sized>(&mut self, which: usize, t: f64, rng: &mut R) {
        let k = self.cp.k as usize;
        let span = match &self.starts[which].0 {
            CodedStart::Fixed(s) => s.clone(),
            CodedStart::Uniform => {
                let v: Vec<u16> = (0..k).map(|_| self.field.random_element(rng)).collect();
                Subspace::span(k, &[v], &self.field).expect("ambient dimension fixed")
            }
        };
        let inside = span_avoids(&span, self.coord);
        let complete = span.is_full();
        if inside {
            self.flow.a_cum += 1;
        }
        if complete {
            self.seeds += 1;
        }
        self.roster.push(CodedPeer {
            was_one_club: inside && span.dim() == k - 1,
            gifted: !inside,
            infected: false,
            seed_since: complete.then_some(t),
            span,
        });
        self.flow.arrivals += 1;
    }

    /// Delivers one coded block; useless (already spanned, or zero) draws
    /// are no-ops.
    fn receive(&mut self, idx: usize, v: &[u16], t: f64) {
        let k = self.cp.k as usize;
        let peer = &mut self.roster[idx];
        let was_inside = span_avoids(&peer.span, self.coord);
        let grew = peer
            .span
            .insert_vector(v, &self.field)
            .expect("ambient dimension fixed");
        if !grew {
            return;
        }
        let inside = span_avoids(&peer.span, self.coord);
        let complete = peer.span.is_full();
        let enlightened = was_inside && !inside;
        if enlightened && !peer.gifted && !complete {
            peer.infected = true;
        }
        if inside && peer.span.dim() == k - 1 {
            peer.was_one_club = true;
        }
        let instant = complete && self.cp.departure.is_infinite();
        if complete && !instant {
            peer.seed_since = Some(t);
        }
        if enlightened {
            self.flow.d_cum += 1;
        }
        if instant {
            self.roster.swap_remove(idx);
            self.flow.departures += 1;
        } else if complete {
            self.seeds += 1;
        }
    }

    fn seed_departure<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        debug_assert!(self.seeds > 0);
        let r = rng.random_range(0..self.seeds);
        let mut seen = 0;
        for i in 0..self.roster.len() {
            if self.roster[i].span.is_full() {
                if seen == r {
                    self.roster.swap_remove(i);
                    self.seeds -= 1;
                    self.flow.departures += 1;
                    return;
                }
                seen += 1;
            }
        }
        unreachable!("seed counter out of sync with the roster");
    }
}

impl Dynamics for CodedDynamics {
    fn population(&self) -> u64 {
        self.roster.len() as u64
    }

    fn total_rate(&self) -> f64 {
        self.rate_parts().iter().sum()
    }

    fn step<R: Rng + ?Sized>(&mut self, t: f64, rng: &mut R) {
        let [lam, us, peers, dep] = self.rate_parts();
        let mut u = rng.random::<f64>() * (lam + us + peers + dep);
        if u < lam {
            for i in 0..self.starts.len() {
                if u < self.starts[i].1 || i + 1 == self.starts.len() {
                    self.admit(i, t, rng);
                    return;
                }
                u -= self.starts[i].1;
            }
            unreachable!("arrival classes are nonempty");
        }
        u -= lam;
        if u < us {
            let idx = rng.random_range(0..self.roster.len());
            let v = self.full_space.random_combination(&self.field, rng);
            self.receive(idx, &v, t);
            return;
        }
        u -= us;
        if u < peers {
            let n = self.roster.len();
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            if a == b {
                return;
            }
            let v = self.roster[b].span.random_combination(&self.field, rng);
            self.receive(a, &v, t);
            return;
        }
        self.seed_departure(rng);
    }

    fn observe(&self, t: f64) -> Sample {
        let n = self.roster.len() as u64;
        let cs = coded_census(&self.roster, self.cp.k, self.designated);
        let mut hist = vec![0u64; self.cp.k as usize + 1];
        for p in &self.roster {
            hist[p.span.dim()] += 1;
        }
        Sample {
            t,
            n,
            types: TypeCounts::DimHist(hist),
            one_club_frac: if n == 0 { 0.0 } else { cs.e as f64 / n as f64 },
            census: cs,
            a_cum: self.flow.a_cum,
            d_cum: self.flow.d_cum,
        }
    }

    fn flow(&self) -> Flow {
        self.flow
    }
}

/// Simulates one path. Runs with the same spec and seed are bit-identical.
pub fn run(spec: &SimSpec, seed: u64) -> Result<Trajectory> {
    spec.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    match &spec.setting {
        Setting::Uncoded { params, policy } => {
            let mut d = UncodedDynamics::new(params, *policy, spec.designated, &spec.initial);
            Ok(drive(
                &mut d,
                spec.horizon,
                spec.sample_grid,
                spec.sample_stride,
                &mut rng,
            ))
        }
        Setting::Coded(cp) => {
            let mut d = CodedDynamics::new(cp, spec.designated)?;
            Ok(drive(
                &mut d,
                spec.horizon,
                spec.sample_grid,
                spec.sample_stride,
                &mut rng,
            ))
        }
    }
}

/// Runs one replication per seed, in parallel when built with the `parallel`
/// feature. The result is deterministic given the seed list either way.
pub fn replicate(spec: &SimSpec, seeds: &[u64]) -> Result<Vec<Trajectory>> {
    spec.validate()?;
    exec::map_indexed(seeds.len(), |i| run(spec, seeds[i]))
        .into_iter()
        .collect()
}

/// Mean, variance, and percentile band of one scalar across replications.
#[derive(Clone, Copy, Debug)]
pub struct ObservableSummary {
    pub mean: f64,
    pub variance: f64,
    pub p10: f64,
    pub p50: f64,
    pub p90: f64,
}

fn summarize_observable(values: &[f64]) -> ObservableSummary {
    let mut m = stats::OnlineMoments::default();
    for &v in values {
        m.push(v);
    }
    ObservableSummary {
        mean: m.mean(),
        variance: m.variance(),
        p10: stats::quantile(values, 0.1),
        p50: stats::quantile(values, 0.5),
        p90: stats::quantile(values, 0.9),
    }
}

/// Cross-replication summary of the headline observables.
#[derive(Clone, Debug)]
pub struct ReplicationSummary {
    pub replications: usize,
    pub final_n: ObservableSummary,
    pub avg_n_last_half: ObservableSummary,
    pub growth_slope: ObservableSummary,
}

/// Least-squares slope of the sampled population over the second half of the
/// horizon. Near zero for a stable swarm, near the arrival surplus when the
/// one-club regime takes over.
pub fn growth_slope(traj: &Trajectory) -> f64 {
    let cutoff = traj.horizon * 0.5;
    let pts: Vec<(f64, f64)> = traj
        .samples
        .iter()
        .filter(|s| s.t >= cutoff)
        .map(|s| (s.t, s.n as f64))
        .collect();
    stats::ls_slope(&pts)
}

pub fn summarize_replications(trajectories: &[Trajectory]) -> ReplicationSummary {
    assert!(!trajectories.is_empty(), "need at least one replication");
    let finals: Vec<f64> = trajectories.iter().map(|t| t.final_n as f64).collect();
    let avgs: Vec<f64> = trajectories.iter().map(|t| t.avg_n_last_half).collect();
    let slopes: Vec<f64> = trajectories.iter().map(growth_slope).collect();
    ReplicationSummary {
        replications: trajectories.len(),
        final_n: summarize_observable(&finals),
        avg_n_last_half: summarize_observable(&avgs),
        growth_slope: summarize_observable(&slopes),
    }
}

// ---------------------------------------------------------------------------
// Watched chain: the one-club regime with instant downloads.
//
// When downloads are infinitely faster than arrivals, the swarm is almost
// always a one-club crowd of n peers sharing the same K-1 pieces, plus the
// seed's designated piece floating in. The slow component is (n, k): the
// population and the size of the common collection. An arrival triggers a
// burst of exchanges that resolves instantly on the arrival time scale; we
// simulate that burst as an embedded jump chain over contact pairs.

/// Slow-chain state right after an arrival has been resolved.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WatchedSample {
    pub t: f64,
    pub n: u64,
    /// Size of the collection shared by the whole crowd.
    pub k_common: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WatchedTrajectory {
    pub k: u32,
    pub lambda: f64,
    pub horizon: f64,
    pub samples: Vec<WatchedSample>,
    /// Number of completions in each run triggered by the missing piece.
    pub z_log: Vec<u64>,
    /// Completion runs that drained the whole crowd before the newcomer
    /// collected its remaining pieces.
    pub resets: u64,
}

/// Fast phase below the top layer: the newcomer brought a piece `p` nobody
/// has, and the crowd of `m` shares `c < K-1` pieces. Only `K-1` distinct
/// pieces exist in the whole system, so nobody can complete; the phase always
/// ends with everyone holding the common `c` pieces plus `p`. The pair counts
/// drive the embedded chain: `(m-w)(w+1)` contacts spread `p` (any of the
/// `w+1` holders uploading to a non-holder), `m` contacts hand the newcomer
/// one of its `c` gaps.
fn resolve_spread<R: Rng + ?Sized>(rng: &mut R, m: u64, c: u32) {
    let mut w = 0u64; // crowd members holding p
    let mut s = 0u32; // common pieces the newcomer has collected
    while w < m || s < c {
        let w_pairs = (m - w) * (w + 1);
        let s_pairs = if s < c { m } else { 0 };
        if rng.random_range(0..w_pairs + s_pairs) < w_pairs {
            w += 1;
        } else {
            s += 1;
        }
    }
}

struct CompletionRun {
    z: u64,
    n: u64,
    k_common: u32,
    drained: bool,
}

/// Top layer: the crowd of `m` shares `K-1` pieces and the newcomer brought
/// the missing one. Useful contacts come in two equal masses of `m` pairs:
/// a club member pulls the missing piece from the newcomer, completes, and
/// departs at once (so the piece never propagates), or the newcomer pulls one
/// of its `K-1` gaps from a member. Each step is therefore a fair coin; `z`
/// counts completions before the newcomer's (K-1)th gap closes. If the crowd
/// drains first, the newcomer is left alone with the piece and its winnings.
fn resolve_completion_run<R: Rng + ?Sized>(rng: &mut R, m0: u64, k: u32) -> CompletionRun {
    let mut m = m0;
    let mut z = 0u64;
    let mut tails = 0u32;
    loop {
        if m == 0 {
            return CompletionRun {
                z,
                n: 1,
                k_common: 1 + tails,
                drained: true,
            };
        }
        if tails == k - 1 {
            return CompletionRun {
                z,
                n: m,
                k_common: k - 1,
                drained: false,
            };
        }
        if rng.random_range(0..2 * m) < m {
            m -= 1;
            z += 1;
        } else {
            tails += 1;
        }
    }
}

/// Simulates the watched slow chain. Arrivals come at rate `K * lambda` and
/// carry a uniformly random piece; one already in the common collection just
/// grows the crowd, a new one triggers the fast phase for its layer. Time
/// accrues only between arrivals; the bursts are instantaneous.
pub fn run_watched(k: u32, lambda: f64, horizon: f64, seed: u64) -> Result<WatchedTrajectory> {
    if k < 2 {
        return Err(SwarmError::InvalidParams(
            "the watched chain needs at least two pieces".into(),
        ));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(SwarmError::InvalidParams(
            "per-piece arrival rate must be finite and positive".into(),
        ));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(SwarmError::InvalidParams(
            "horizon must be finite and positive".into(),
        ));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let exp = Exp::new(k as f64 * lambda).expect("positive arrival rate");
    let mut t = 0.0;
    let mut n = 0u64;
    let mut common = 0u32;
    let mut samples = vec![WatchedSample {
        t: 0.0,
        n: 0,
        k_common: 0,
    }];
    let mut z_log = Vec::new();
    let mut resets = 0u64;
    loop {
        t += exp.sample(&mut rng);
        if t > horizon {
            break;
        }
        if rng.random_range(0..k) < common {
            // The arriving piece is already common knowledge.
            n += 1;
        } else if common < k - 1 {
            resolve_spread(&mut rng, n, common);
            n += 1;
            common += 1;
        } else {
            let out = resolve_completion_run(&mut rng, n, k);
            z_log.push(out.z);
            if out.drained {
                resets += 1;
            }
            n = out.n;
            common = out.k_common;
        }
        samples.push(WatchedSample {
            t,
            n,
            k_common: common,
        });
    }
    Ok(WatchedTrajectory {
        k,
        lambda,
        horizon,
        samples,
        z_log,
        resets,
    })
}

/// Draws completion counts from independent top-layer bursts with a club of
/// `club_size` peers. The burst law is a fair coin walk, so for large clubs
/// `Z` approaches the negative binomial with `K-1` failures at probability
/// one half: mean `K-1`, and no completion at all with probability
/// `2^-(K-1)`.
pub fn sample_z(k: u32, club_size: u64, count: usize, seed: u64) -> Result<Vec<u64>> {
    if k < 2 || club_size == 0 {
        return Err(SwarmError::InvalidParams(
            "completion bursts need K >= 2 and a nonempty club".into(),
        ));
    }
    Ok(exec::map_indexed(count, |i| {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        resolve_completion_run(&mut rng, club_size, k).z
    }))
}

/// Draws the population increment of one slow-chain step at the top layer:
/// `+1` when the arriving piece is already common (probability `(K-1)/K`),
/// otherwise the burst outcome. The drift is zero: the expected loss `K-1`
/// of a burst exactly cancels the `K-1` quiet arrivals between bursts.
pub fn sample_top_increment(k: u32, club_size: u64, count: usize, seed: u64) -> Result<Vec<i64>> {
    if k < 2 || club_size == 0 {
        return Err(SwarmError::InvalidParams(
            "completion bursts need K >= 2 and a nonempty club".into(),
        ));
    }
    Ok(exec::map_indexed(count, |i| {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        if rng.random_range(0..k) < k - 1 {
            1
        } else {
            let out = resolve_completion_run(&mut rng, club_size, k);
            out.n as i64 - club_size as i64
        }
    }))
}

/// Windowed time averages of the watched population and their least-squares
/// slope. A slope hugging zero over long horizons is the recurrence
/// signature; sustained drift would show up as a trend.
#[derive(Clone, Debug)]
pub struct RecurrenceTrend {
    /// (window midpoint, time-averaged population).
    pub window_means: Vec<(f64, f64)>,
    pub slope: f64,
}

pub fn recurrence_trend(traj: &WatchedTrajectory, windows: usize) -> RecurrenceTrend {
    let w = windows.max(1);
    let dt = traj.horizon / w as f64;
    let mut acc = vec![0.0; w];
    let pts = &traj.samples;
    for i in 0..pts.len() {
        let start = pts[i].t;
        let end = if i + 1 < pts.len() {
            pts[i + 1].t
        } else {
            traj.horizon
        };
        let n = pts[i].n as f64;
        let mut lo = start;
        while lo < end {
            let wi = ((lo / dt) as usize).min(w - 1);
            let hi = end.min((wi as f64 + 1.0) * dt);
            acc[wi] += n * (hi - lo);
            lo = hi;
        }
    }
    let window_means: Vec<(f64, f64)> = acc
        .iter()
        .enumerate()
        .map(|(i, a)| ((i as f64 + 0.5) * dt, a / dt))
        .collect();
    RecurrenceTrend {
        slope: stats::ls_slope(&window_means),
        window_means,
    }
}
