//! Closed-form stability classification and growth/tail analysis.
//!
//! The swarm is transient exactly when, for some piece `k`, peers needing `k`
//! arrive faster than the system can hand `k` out even if everyone helps; it
//! is positive recurrent when the reverse strict inequality holds for every
//! piece (plus a separate regime where lingering seeds dominate contacts).
//! The margin of piece `k` is the one-club balance
//!
//! `Delta_S = sum of lambda_C over C inside S
//!           - (Us + sum over C outside S of lambda_C * (K - |C| + mu/gamma)) / (1 - mu/gamma)`
//!
//! evaluated at `S = F - {k}`: positive means a club of peers missing only `k`
//! grows on average, negative means it drains. All verdicts are decided in
//! exact rational arithmetic so boundary cases classify as Borderline instead
//! of falling to floating-point noise; an infinite departure rate enters
//! symbolically as `mu/gamma = 0`.
//!
//! The module also provides the coded-mode classifier (per-hyperplane balance
//! with the effective contact rate `(1 - 1/q) * mu`), the offspring moments of
//! the two-type branching process that dominates the early spread of a rare
//! piece, and two closed-form tail bounds used to control workload overshoot.

use num::{BigRational, FromPrimitive, One, Signed, ToPrimitive, Zero};

use crate::coding::{CodedArrival, CodedParams};
use crate::error::{Result, SwarmError};
use crate::model::{Departure, PieceSet, SwarmParams};

type Rat = BigRational;

fn rat(x: f64) -> Rat {
    Rat::from_float(x).expect("finite float")
}

fn rat_u(x: u64) -> Rat {
    Rat::from_u64(x).unwrap()
}

/// `mu/gamma` as an exact rational; requires `mu < gamma`.
fn rho_exact(mu: f64, departure: Departure) -> Result<Rat> {
    match departure {
        Departure::Infinite => Ok(Rat::zero()),
        Departure::Finite(g) if mu < g => Ok(rat(mu) / rat(g)),
        Departure::Finite(_) => Err(SwarmError::Unsupported(
            "margin formula requires mu < gamma".into(),
        )),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    PositiveRecurrent,
    Transient,
    /// At least one exact equality and no strict violation.
    Borderline,
    /// Coded mode only: parameters fall in the gap between the transience
    /// and recurrence conditions.
    Unknown,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::PositiveRecurrent => "PositiveRecurrent",
            Verdict::Transient => "Transient",
            Verdict::Borderline => "Borderline",
            Verdict::Unknown => "Unknown",
        })
    }
}

#[derive(Clone, Debug)]
pub struct Margin {
    pub label: String,
    pub value: f64,
}

/// Outcome of a stability classification.
#[derive(Clone, Debug)]
pub struct StabilityReport {
    pub verdict: Verdict,
    /// Pieces whose one-club margin attains the maximum (uncoded mode).
    pub binding_pieces: Vec<u32>,
    /// The corresponding one-club collections `F - {k}`.
    pub binding_sets: Vec<PieceSet>,
    pub margins: Vec<Margin>,
    /// Which clause fired, in words.
    pub reason: String,
}

/// One-club balance `Delta_S` for an incomplete collection `S`.
///
/// Negative for every `S` exactly when the chain is positive recurrent in the
/// `mu < gamma` regime; checking the `K` collections `F - {k}` suffices.
pub fn delta_s(params: &SwarmParams, s: PieceSet) -> Result<Rat> {
    params.validate()?;
    if s.is_full(params.k) {
        return Err(SwarmError::Unsupported(
            "margin is defined for incomplete collections only".into(),
        ));
    }
    let rho = rho_exact(params.contact_rate, params.departure)?;
    let one = Rat::one();
    let k_rat = rat_u(params.k as u64);

    let mut inside = Rat::zero();
    let mut outside = rat(params.seed_rate);
    for &(c, rate) in &params.arrivals {
        if c.is_subset_of(s) {
            inside += rat(rate);
        } else {
            let size = rat_u(c.len() as u64);
            outside += rat(rate) * (&k_rat - size + &rho);
        }
    }
    Ok(inside - outside / (one - rho))
}

/// Convenience f64 view of [`delta_s`].
pub fn delta_s_f64(params: &SwarmParams, s: PieceSet) -> Result<f64> {
    Ok(delta_s(params, s)?.to_f64().unwrap_or(f64::NAN))
}

/// Classifies a parameter point as transient, positive recurrent, or
/// borderline.
///
/// For `mu < gamma` the verdict is the sign pattern of the `K` one-club
/// margins; for `gamma <= mu` the chain is transient exactly when some piece
/// can never enter the system (no seed and no arrival carries it).
pub fn classify(params: &SwarmParams) -> Result<StabilityReport> {
    params.validate()?;
    let full = params.full_set();
    let mu_lt_gamma = match params.departure {
        Departure::Infinite => true,
        Departure::Finite(g) => params.contact_rate < g,
    };

    if mu_lt_gamma {
        let mut margins = Vec::new();
        let mut deltas: Vec<(u32, Rat)> = Vec::new();
        for k in 1..=params.k {
            let s = full.minus(PieceSet::EMPTY.with(k));
            let d = delta_s(params, s)?;
            margins.push(Margin {
                label: format!("k={k}"),
                value: d.to_f64().unwrap_or(f64::NAN),
            });
            deltas.push((k, d));
        }
        let max = deltas.iter().map(|(_, d)| d.clone()).max().unwrap();
        let binding_pieces: Vec<u32> = deltas
            .iter()
            .filter(|(_, d)| *d == max)
            .map(|&(k, _)| k)
            .collect();
        let binding_sets = binding_pieces
            .iter()
            .map(|&k| full.minus(PieceSet::EMPTY.with(k)))
            .collect();
        let (verdict, reason) = if max.is_positive() {
            (
                Verdict::Transient,
                "peers missing a binding piece accumulate: its one-club balance is positive"
                    .to_string(),
            )
        } else if max.is_negative() {
            (
                Verdict::PositiveRecurrent,
                "every one-club balance is strictly negative".to_string(),
            )
        } else {
            (
                Verdict::Borderline,
                "the worst one-club balance is exactly zero".to_string(),
            )
        };
        Ok(StabilityReport {
            verdict,
            binding_pieces,
            binding_sets,
            margins,
            reason,
        })
    } else {
        // gamma <= mu: lingering seeds hold everything; only reachability of
        // each piece matters.
        let blocked: Vec<u32> = (1..=params.k)
            .filter(|&k| {
                params.seed_rate == 0.0 && params.arrivals.iter().all(|&(c, _)| !c.contains(k))
            })
            .collect();
        if blocked.is_empty() {
            Ok(StabilityReport {
                verdict: Verdict::PositiveRecurrent,
                binding_pieces: Vec::new(),
                binding_sets: Vec::new(),
                margins: Vec::new(),
                reason: "seeds linger at least as long as contacts (gamma <= mu) and every piece \
                         can enter the system"
                    .to_string(),
            })
        } else {
            let binding_sets = blocked
                .iter()
                .map(|&k| full.minus(PieceSet::EMPTY.with(k)))
                .collect();
            Ok(StabilityReport {
                verdict: Verdict::Transient,
                binding_pieces: blocked,
                binding_sets,
                margins: Vec::new(),
                reason: "some piece can never enter the system (no seed uploads and no arrival \
                         carries it)"
                    .to_string(),
            })
        }
    }
}

/// Uncoded classification for the piece-symmetric gifted model at arbitrary
/// `K`: blank peers arrive at `lambda0`, peers holding one uniformly random
/// data piece at `lambda1`, no seed uploads, instant departures.
///
/// Every one-club margin reduces to `lambda0`, so the swarm is transient
/// whenever any blank arrivals occur at all. Provided separately because the
/// general classifier enumerates collections and this model is used at `K`
/// far beyond the count-state cap.
pub fn classify_uniform_gifted_uncoded(k: u32, lambda0: f64, lambda1: f64) -> StabilityReport {
    assert!(k >= 1 && lambda0 >= 0.0 && lambda1 >= 0.0 && lambda0 + lambda1 > 0.0);
    let margin = lambda0;
    let verdict = if lambda0 > 0.0 {
        Verdict::Transient
    } else {
        Verdict::Borderline
    };
    StabilityReport {
        verdict,
        binding_pieces: Vec::new(),
        binding_sets: Vec::new(),
        margins: vec![Margin {
            label: "all k".to_string(),
            value: margin,
        }],
        reason: if lambda0 > 0.0 {
            "blank arrivals make every one-club balance positive regardless of the gifted \
             fraction"
                .to_string()
        } else {
            "every arrival carries a piece; the one-club balance is exactly zero".to_string()
        },
    }
}

/// Per-hyperplane sums needed by the coded classifier, as exact rationals.
struct CodedSums {
    lambda_total: Rat,
    /// For each candidate hyperplane: sum over arrival mass outside it of
    /// `lambda * (K - dim(V) + 1)` (transience side) and
    /// `lambda * (K - dim(V) + q/(q-1))` (recurrence side).
    per_hyperplane: Vec<(Rat, Rat)>,
    spans: bool,
}

/// Candidate hyperplane count cap for explicit enumeration.
const HYPERPLANE_CAP: u64 = 100_000;

fn coded_sums(cp: &CodedParams) -> Result<CodedSums> {
    let q = rat_u(cp.q as u64);
    let k_rat = rat_u(cp.k as u64);
    let one = Rat::one();
    // q/(q-1) as a rational.
    let q_frac = &q / (&q - &one);

    let mut lambda_total = Rat::zero();
    let mut uniform_rate = Rat::zero();
    let mut explicit: Vec<(crate::coding::Subspace, Rat)> = Vec::new();
    let field = crate::coding::Field::new(cp.q)?;
    for (arr, rate) in &cp.arrivals {
        lambda_total += rat(*rate);
        match arr {
            CodedArrival::UniformVector => uniform_rate += rat(*rate),
            CodedArrival::Explicit(vectors) => {
                let space = crate::coding::Subspace::span(cp.k as usize, vectors, &field)?;
                explicit.push((space, rat(*rate)));
            }
        }
    }

    // A uniform-vector class puts positive rate on every line, so it spans;
    // otherwise the explicit subspaces must span jointly.
    let spans = if !uniform_rate.is_zero() {
        true
    } else {
        let mut joint = crate::coding::Subspace::zero(cp.k as usize);
        for (space, _) in &explicit {
            for row in space.basis() {
                joint.insert_vector(row, &field)?;
            }
        }
        joint.is_full()
    };

    // Symmetric contributions: a uniform vector lands outside any given
    // hyperplane with probability 1 - 1/q, always with dim 1. The dim-0
    // residue (the all-zero draw, probability q^-K) is inside every
    // hyperplane and contributes nothing.
    let outside_frac = &one - &one / &q;
    let uniform_a = &uniform_rate * &outside_frac * (&k_rat - &one + &one);
    let uniform_b = &uniform_rate * &outside_frac * (&k_rat - &one + &q_frac);

    let nontrivial_explicit = explicit.iter().any(|(s, _)| s.dim() > 0);
    if !nontrivial_explicit {
        // Every hyperplane sees the same mass; one row represents them all.
        return Ok(CodedSums {
            lambda_total,
            per_hyperplane: vec![(uniform_a, uniform_b)],
            spans,
        });
    }

    // Explicit subspaces break symmetry: enumerate hyperplanes by their
    // normal vectors (first nonzero coordinate scaled to 1).
    let qk = (cp.q as u64)
        .checked_pow(cp.k)
        .ok_or_else(|| SwarmError::Unsupported("q^K overflows hyperplane enumeration".into()))?;
    let count = (qk - 1) / (cp.q as u64 - 1);
    if count > HYPERPLANE_CAP {
        return Err(SwarmError::Unsupported(format!(
            "explicit coded arrivals need hyperplane enumeration, but (q^K-1)/(q-1) = {count} \
             exceeds {HYPERPLANE_CAP}"
        )));
    }

    let mut per_hyperplane = Vec::new();
    let mut normal = vec![0u16; cp.k as usize];
    loop {
        // Advance to the next vector in lexicographic order.
        let mut idx = 0;
        loop {
            if idx == normal.len() {
                break;
            }
            normal[idx] += 1;
            if normal[idx] < cp.q {
                break;
            }
            normal[idx] = 0;
            idx += 1;
        }
        if idx == normal.len() {
            break;
        }
        // Keep one representative per line of normals.
        let first_nonzero = normal.iter().position(|&x| x != 0).unwrap();
        if normal[first_nonzero] != 1 {
            continue;
        }

        let mut sum_a = uniform_a.clone();
        let mut sum_b = uniform_b.clone();
        for (space, rate) in &explicit {
            // V outside the hyperplane iff some basis row has nonzero dot
            // product with the normal.
            let outside = space.basis().iter().any(|row| {
                let mut dot = 0u16;
                for (a, b) in row.iter().zip(&normal) {
                    dot = field.add(dot, field.mul(*a, *b));
                }
                dot != 0
            });
            if outside {
                let dim = rat_u(space.dim() as u64);
                sum_a += rate * (&k_rat - &dim + &one);
                sum_b += rate * (&k_rat - &dim + &q_frac);
            }
        }
        per_hyperplane.push((sum_a, sum_b));
    }
    Ok(CodedSums {
        lambda_total,
        per_hyperplane,
        spans,
    })
}

/// Classifies a coded swarm. The recurrence side uses the effective contact
/// rate `(1-1/q) * mu`; parameters strictly between the transience and
/// recurrence conditions come back `Unknown` (the conditions do not meet).
pub fn classify_coded(cp: &CodedParams) -> Result<StabilityReport> {
    cp.validate()?;
    let mu = cp.contact_rate;
    let one = Rat::one();
    let q = rat_u(cp.q as u64);
    let outside_frac = &one - &one / &q; // 1 - 1/q
    let mu_eff = (&outside_frac * rat(mu)).to_f64().unwrap();

    let sums = coded_sums(cp)?;
    let us = rat(cp.seed_rate);

    let mu_lt_gamma = match cp.departure {
        Departure::Infinite => true,
        Departure::Finite(g) => mu < g,
    };
    let mu_eff_lt_gamma = match cp.departure {
        Departure::Infinite => true,
        Departure::Finite(g) => mu_eff < g,
    };
    let gamma_le_mu = !mu_lt_gamma;
    let gamma_le_mu_eff = !mu_eff_lt_gamma;

    let mut margins = Vec::new();
    let mut transient = false;
    let mut recurrent = false;
    let mut boundary = false;
    let mut reason = String::new();

    if mu_lt_gamma {
        let rho = rho_exact(mu, cp.departure)?;
        let min_rhs_a = sums
            .per_hyperplane
            .iter()
            .map(|(a, _)| (&us + a) / (&one - &rho))
            .min()
            .unwrap();
        margins.push(Margin {
            label: "transience-clause".to_string(),
            value: (&sums.lambda_total - &min_rhs_a)
                .to_f64()
                .unwrap_or(f64::NAN),
        });
        if sums.lambda_total > min_rhs_a {
            transient = true;
            reason = "arrivals outrun the worst hyperplane's upload capacity".to_string();
        } else if sums.lambda_total == min_rhs_a {
            boundary = true;
        }
    } else if cp.seed_rate == 0.0 && !sums.spans {
        transient = true;
        reason = "no seed uploads and arrival subspaces do not span the full space".to_string();
    }

    if mu_eff_lt_gamma {
        let rho_eff = match cp.departure {
            Departure::Infinite => Rat::zero(),
            Departure::Finite(g) => &outside_frac * rat(mu) / rat(g),
        };
        let min_rhs_b = sums
            .per_hyperplane
            .iter()
            .map(|(_, b)| (&us + b) * &outside_frac / (&one - &rho_eff))
            .min()
            .unwrap();
        margins.push(Margin {
            label: "recurrence-clause".to_string(),
            value: (&min_rhs_b - &sums.lambda_total)
                .to_f64()
                .unwrap_or(f64::NAN),
        });
        if !transient {
            if sums.lambda_total < min_rhs_b {
                recurrent = true;
                reason =
                    "every hyperplane's coded upload capacity strictly covers arrivals".to_string();
            } else if sums.lambda_total == min_rhs_b {
                boundary = true;
            }
        }
    }
    if !transient && !recurrent && gamma_le_mu_eff && (cp.seed_rate > 0.0 || sums.spans) {
        recurrent = true;
        reason = "seeds linger at least as long as effective contacts and every direction can \
                  enter"
            .to_string();
    }

    let verdict = if transient {
        Verdict::Transient
    } else if recurrent {
        Verdict::PositiveRecurrent
    } else if boundary {
        reason = "parameters sit exactly on a clause boundary".to_string();
        Verdict::Borderline
    } else {
        reason = if gamma_le_mu && !gamma_le_mu_eff {
            "departure rate falls between the effective and raw contact rates; neither clause \
             applies"
                .to_string()
        } else {
            "parameters fall in the gap between the transience and recurrence conditions"
                .to_string()
        };
        Verdict::Unknown
    };

    Ok(StabilityReport {
        verdict,
        binding_pieces: Vec::new(),
        binding_sets: Vec::new(),
        margins,
        reason,
    })
}

/// Offspring moments of the two-type branching envelope for the spread of a
/// rare piece: type `b` peers download the other `K-1` pieces at rate
/// `mu(1-xi)` then linger `Exp(gamma)`; type `f` peers just linger. Both
/// spawn `b` children at rate `xi*mu` and `f` children at rate `mu`.
#[derive(Clone, Debug)]
pub struct BranchingMoments {
    pub k: u32,
    pub xi: f64,
    /// `mu/gamma` (zero for instant departures).
    pub rho: f64,
    /// Mean offspring counts `[[b->b, b->f], [f->b, f->f]]`.
    pub offspring: [[f64; 2]; 2],
    /// Spectral radius of the offspring matrix (it has rank one).
    pub criticality: f64,
    pub finite: bool,
    /// Mean total progeny (including the root) of a `b` / `f` root.
    pub m_b: f64,
    pub m_f: f64,
}

impl BranchingMoments {
    /// Mean total progeny spawned by a peer that arrives already holding a
    /// collection of size `c_size` (it must download `K - c_size` pieces).
    pub fn m_g(&self, c_size: u32) -> f64 {
        assert!(c_size <= self.k);
        if !self.finite {
            return f64::INFINITY;
        }
        let need = (self.k - c_size) as f64;
        (need / (1.0 - self.xi) + self.rho) * (self.xi * self.m_b + self.m_f)
    }
}

/// Solves the progeny-mean equations in closed form. Requires `mu < gamma`
/// and `0 <= xi < 1`; the means are infinite exactly when
/// `xi*((K-1)/(1-xi) + mu/gamma) + mu/gamma >= 1`.
pub fn branching_moments(
    k: u32,
    mu: f64,
    departure: Departure,
    xi: f64,
) -> Result<BranchingMoments> {
    if k < 1 {
        return Err(SwarmError::InvalidParams("need at least one piece".into()));
    }
    if !(0.0..1.0).contains(&xi) {
        return Err(SwarmError::InvalidParams("xi must lie in [0,1)".into()));
    }
    if !(mu > 0.0) {
        return Err(SwarmError::InvalidParams("mu must be positive".into()));
    }
    let rho = match departure {
        Departure::Infinite => 0.0,
        Departure::Finite(g) if mu < g => mu / g,
        Departure::Finite(_) => {
            return Err(SwarmError::Unsupported(
                "branching envelope requires mu < gamma".into(),
            ))
        }
    };
    // Expected uploads over a b-sojourn and an f-sojourn.
    let t_b = (k - 1) as f64 / (1.0 - xi) + rho;
    let offspring = [[xi * t_b, t_b], [xi * rho, rho]];
    let s = xi * t_b + rho;
    let finite = s < 1.0;
    let (m_b, m_f) = if finite {
        let factor = (1.0 + xi) / (1.0 - s);
        (1.0 + factor * t_b, 1.0 + factor * rho)
    } else {
        (f64::INFINITY, f64::INFINITY)
    };
    Ok(BranchingMoments {
        k,
        xi,
        rho,
        offspring,
        criticality: s,
        finite,
        m_b,
        m_f,
    })
}

/// Lower bound on the probability that a compound Poisson process with rate
/// `alpha` and jump moments `m1, m2` stays below the line `B + eps*t`
/// forever: `max(0, 1 - alpha*m2 / (2B(eps - alpha*m1)))`.
pub fn kingman_bound(alpha: f64, m1: f64, m2: f64, b: f64, eps: f64) -> Result<f64> {
    if !(b > 0.0) {
        return Err(SwarmError::InvalidParams("B must be positive".into()));
    }
    if !(eps > alpha * m1) {
        return Err(SwarmError::InvalidParams(
            "slope eps must exceed the mean drift alpha*m1".into(),
        ));
    }
    Ok((1.0 - alpha * m2 / (2.0 * b * (eps - alpha * m1))).max(0.0))
}

/// Upper bound on the probability that an M/GI/infinity queue started empty,
/// with arrival rate `lambda` and mean service time `m`, ever exceeds the
/// line `B + eps*t`: `min(1, e^(lambda(m+1)) * 2^-B / (1 - 2^-eps))`.
pub fn mginfty_bound(lambda: f64, m: f64, b: f64, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(SwarmError::InvalidParams("eps must be positive".into()));
    }
    if !(lambda >= 0.0 && m >= 0.0) {
        return Err(SwarmError::InvalidParams(
            "lambda and m must be nonnegative".into(),
        ));
    }
    let v = (lambda * (m + 1.0)).exp() * 2f64.powf(-b) / (1.0 - 2f64.powf(-eps));
    Ok(v.min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coding::CodedParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn params(k: u32, us: f64, mu: f64, dep: Departure, arrivals: &[(&[u32], f64)]) -> SwarmParams {
        SwarmParams {
            k,
            seed_rate: us,
            contact_rate: mu,
            departure: dep,
            arrivals: arrivals
                .iter()
                .map(|&(p, r)| (PieceSet::from_pieces(p.iter().copied(), k).unwrap(), r))
                .collect(),
        }
    }

    #[test]
    fn two_club_margin_example() {
        // K=4, no seed, instant departures, lambda_12 = 1, lambda_34 = 3,
        // S = {1,2,4}: inside mass 1, outside mass 3 with weight K-2 = 2.
        let p = params(
            4,
            0.0,
            1.0,
            Departure::Infinite,
            &[(&[1, 2], 1.0), (&[3, 4], 3.0)],
        );
        let s = PieceSet::from_pieces([1, 2, 4], 4).unwrap();
        let d = delta_s(&p, s).unwrap();
        assert_eq!(d, rat(-5.0));
    }

    #[test]
    fn three_piece_margin_identity() {
        // For single-piece arrivals and S = {1,2}, the margin is negative
        // exactly when l1 + l2 < l3 * (2 + rho) / (1 - rho).
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..200 {
            let l1 = rng.random_range(1..20) as f64 / 4.0;
            let l2 = rng.random_range(1..20) as f64 / 4.0;
            let l3 = rng.random_range(1..20) as f64 / 4.0;
            let mu = 1.0;
            let gamma = rng.random_range(2..8) as f64;
            let p = params(
                3,
                0.0,
                mu,
                Departure::Finite(gamma),
                &[(&[1], l1), (&[2], l2), (&[3], l3)],
            );
            let s = PieceSet::from_pieces([1, 2], 3).unwrap();
            let d = delta_s(&p, s).unwrap();
            let rho = mu / gamma;
            let rhs = l3 * (2.0 + rho) / (1.0 - rho);
            assert_eq!(
                d.is_negative(),
                l1 + l2 < rhs,
                "l=({l1},{l2},{l3}) g={gamma}"
            );
        }
    }

    #[test]
    fn full_collection_arrivals_only_is_stable_everywhere() {
        let p = params(3, 0.5, 1.0, Departure::Finite(4.0), &[(&[1, 2, 3], 2.0)]);
        for bits in 0..7u32 {
            let s = PieceSet::from_bits(bits);
            assert!(delta_s(&p, s).unwrap().is_negative(), "S={s}");
        }
    }

    #[test]
    fn classify_single_piece_seeded_swarm() {
        // lambda_0 = 1 < Us / (1 - mu/gamma) = 4: stable.
        let p = params(1, 2.0, 1.0, Departure::Finite(2.0), &[(&[], 1.0)]);
        let r = classify(&p).unwrap();
        assert_eq!(r.verdict, Verdict::PositiveRecurrent);
        assert_eq!(r.margins.len(), 1);
        assert!(r.margins[0].value < 0.0);
    }

    #[test]
    fn classify_two_club_imbalance() {
        let p = params(
            4,
            0.0,
            1.0,
            Departure::Infinite,
            &[(&[1, 2], 1.0), (&[3, 4], 3.0)],
        );
        let r = classify(&p).unwrap();
        assert_eq!(r.verdict, Verdict::Transient);
        assert_eq!(r.binding_pieces, vec![1, 2]);
        let full = PieceSet::full(4);
        for (&k, &s) in r.binding_pieces.iter().zip(&r.binding_sets) {
            assert_eq!(s, full.minus(PieceSet::EMPTY.with(k)));
        }
    }

    #[test]
    fn classify_symmetric_three_piece_borderline() {
        let p = params(
            3,
            0.0,
            1.0,
            Departure::Infinite,
            &[(&[1], 1.0), (&[2], 1.0), (&[3], 1.0)],
        );
        let r = classify(&p).unwrap();
        assert_eq!(r.verdict, Verdict::Borderline);
    }

    #[test]
    fn classify_blocked_piece_with_lingering_seeds() {
        let p = params(2, 0.0, 1.0, Departure::Finite(0.5), &[(&[1], 1.0)]);
        let r = classify(&p).unwrap();
        assert_eq!(r.verdict, Verdict::Transient);
        assert_eq!(r.binding_pieces, vec![2]);

        // Any seed upload rate unblocks it.
        let p2 = params(2, 0.1, 1.0, Departure::Finite(0.5), &[(&[1], 1.0)]);
        assert_eq!(classify(&p2).unwrap().verdict, Verdict::PositiveRecurrent);
    }

    #[test]
    fn classify_is_time_scale_invariant() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        for _ in 0..100 {
            let k = rng.random_range(1..=4);
            let gamma = rng.random_range(1..6) as f64 / 2.0;
            let us = rng.random_range(0..3) as f64 / 2.0;
            let mut arrivals = Vec::new();
            for bits in 0..(1u32 << k) {
                if bits == (1u32 << k) - 1 {
                    continue;
                }
                if rng.random_range(0..2) == 1 {
                    arrivals.push((
                        PieceSet::from_bits(bits),
                        rng.random_range(1..8) as f64 / 2.0,
                    ));
                }
            }
            if arrivals.is_empty() {
                arrivals.push((PieceSet::EMPTY, 1.0));
            }
            let base = SwarmParams {
                k,
                seed_rate: us,
                contact_rate: 1.0,
                departure: Departure::Finite(gamma),
                arrivals: arrivals.clone(),
            };
            let scaled = SwarmParams {
                k,
                seed_rate: us * 4.0,
                contact_rate: 4.0,
                departure: Departure::Finite(gamma * 4.0),
                arrivals: arrivals.iter().map(|&(c, r)| (c, r * 4.0)).collect(),
            };
            let a = classify(&base).unwrap();
            let b = classify(&scaled).unwrap();
            assert_eq!(a.verdict, b.verdict);
        }
    }

    #[test]
    fn uniform_gifted_uncoded_transient_below_full_gifting() {
        for f in [0.1, 0.5, 0.9, 0.99] {
            let r = classify_uniform_gifted_uncoded(200, 1.0 - f, f);
            assert_eq!(r.verdict, Verdict::Transient, "f={f}");
        }
        let r = classify_uniform_gifted_uncoded(200, 0.0, 1.0);
        assert_eq!(r.verdict, Verdict::Borderline);
    }

    #[test]
    fn uniform_gifted_helper_agrees_with_general_classifier() {
        // At small K the helper and the full classifier see the same model.
        for k in [2u32, 3, 4] {
            for f in [0.25, 0.75] {
                let helper = classify_uniform_gifted_uncoded(k, 1.0 - f, f);
                let mut arrivals = vec![(PieceSet::EMPTY, 1.0 - f)];
                for piece in 1..=k {
                    arrivals.push((PieceSet::EMPTY.with(piece), f / k as f64));
                }
                let p = SwarmParams {
                    k,
                    seed_rate: 0.0,
                    contact_rate: 1.0,
                    departure: Departure::Infinite,
                    arrivals,
                };
                let general = classify(&p).unwrap();
                assert_eq!(helper.verdict, general.verdict, "k={k} f={f}");
            }
        }
    }

    #[test]
    fn coded_uniform_gifted_thresholds() {
        let mk = |f: f64| CodedParams {
            k: 200,
            q: 64,
            seed_rate: 0.0,
            contact_rate: 1.0,
            departure: Departure::Infinite,
            arrivals: vec![
                (CodedArrival::Explicit(vec![]), 1.0 - f),
                (CodedArrival::UniformVector, f),
            ],
        };
        assert_eq!(
            classify_coded(&mk(0.00507)).unwrap().verdict,
            Verdict::Transient
        );
        assert_eq!(
            classify_coded(&mk(0.004)).unwrap().verdict,
            Verdict::Transient
        );
        assert_eq!(
            classify_coded(&mk(0.00516)).unwrap().verdict,
            Verdict::PositiveRecurrent
        );
        assert_eq!(
            classify_coded(&mk(0.2)).unwrap().verdict,
            Verdict::PositiveRecurrent
        );
        assert_eq!(
            classify_coded(&mk(0.0051)).unwrap().verdict,
            Verdict::Unknown
        );
    }

    #[test]
    fn coded_lingering_seed_clause() {
        let cp = CodedParams {
            k: 3,
            q: 4,
            seed_rate: 0.5,
            contact_rate: 1.0,
            departure: Departure::Finite(0.25),
            arrivals: vec![(CodedArrival::Explicit(vec![]), 1.0)],
        };
        let r = classify_coded(&cp).unwrap();
        assert_eq!(r.verdict, Verdict::PositiveRecurrent);

        // Without the seed, blank arrivals never span: transient.
        let cp2 = CodedParams {
            seed_rate: 0.0,
            ..cp
        };
        assert_eq!(classify_coded(&cp2).unwrap().verdict, Verdict::Transient);
    }

    #[test]
    fn coded_dimension_aggregation_matches_direct_enumeration() {
        // The uniform-vector class, re-expressed by hand as explicit lines
        // with the exact per-line rates, must classify identically.
        for k in [2u32, 3] {
            for f in [0.02, 0.3, 0.8] {
                let lambda1 = f;
                let lambda0 = 1.0 - f;
                let qk = 2u64.pow(k) as f64;
                let uniform = CodedParams {
                    k,
                    q: 2,
                    seed_rate: 0.0,
                    contact_rate: 1.0,
                    departure: Departure::Infinite,
                    arrivals: vec![
                        (CodedArrival::Explicit(vec![]), lambda0),
                        (CodedArrival::UniformVector, lambda1),
                    ],
                };
                // Over F_2 each nonzero vector is its own line, drawn with
                // probability 2^-K; the zero draw joins the blank class.
                let mut arrivals = vec![(CodedArrival::Explicit(vec![]), lambda0 + lambda1 / qk)];
                for bits in 1..(1u64 << k) {
                    let v: Vec<u16> = (0..k).map(|j| ((bits >> j) & 1) as u16).collect();
                    arrivals.push((CodedArrival::Explicit(vec![v]), lambda1 / qk));
                }
                let explicit = CodedParams {
                    k,
                    q: 2,
                    seed_rate: 0.0,
                    contact_rate: 1.0,
                    departure: Departure::Infinite,
                    arrivals,
                };
                let a = classify_coded(&uniform).unwrap();
                let b = classify_coded(&explicit).unwrap();
                assert_eq!(a.verdict, b.verdict, "k={k} f={f}");
                for (ma, mb) in a.margins.iter().zip(&b.margins) {
                    assert!(
                        (ma.value - mb.value).abs() <= 1e-12 * ma.value.abs().max(1.0),
                        "k={k} f={f}: {} vs {}",
                        ma.value,
                        mb.value
                    );
                }
            }
        }
    }

    #[test]
    fn branching_limits_at_zero_tilt() {
        // xi = 0: m_b = K/(1-rho), m_f = 1/(1-rho), and a one-piece gifted
        // root spawns (K-1+rho)/(1-rho) descendants on average.
        let m = branching_moments(3, 1.0, Departure::Finite(2.0), 0.0).unwrap();
        assert!((m.m_b - 6.0).abs() < 1e-12);
        assert!((m.m_f - 2.0).abs() < 1e-12);
        assert!((m.m_g(1) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn branching_closed_form_small_case() {
        let m = branching_moments(2, 1.0, Departure::Finite(2.0), 0.2).unwrap();
        assert!((m.m_b - 15.0).abs() < 1e-12);
        assert!((m.m_f - 5.0).abs() < 1e-12);
        assert!((m.criticality - 0.85).abs() < 1e-12);
    }

    #[test]
    fn branching_finiteness_boundary_is_exact() {
        // With instant departures, criticality is xi*(K-1)/(1-xi), which
        // equals one exactly at xi = 1/K.
        let at = branching_moments(2, 1.0, Departure::Infinite, 0.5).unwrap();
        assert!(!at.finite);
        assert!(at.m_b.is_infinite() && at.m_g(0).is_infinite());
        let below = branching_moments(2, 1.0, Departure::Infinite, 0.5 - 1e-9).unwrap();
        assert!(below.finite && below.m_b.is_finite());
    }

    #[test]
    fn branching_rejects_wrong_regime() {
        assert!(branching_moments(2, 1.0, Departure::Finite(0.5), 0.1).is_err());
        assert!(branching_moments(2, 1.0, Departure::Infinite, 1.0).is_err());
    }

    #[test]
    fn kingman_examples() {
        assert!((kingman_bound(1.0, 1.0, 2.0, 10.0, 2.0).unwrap() - 0.9).abs() < 1e-12);
        assert!(kingman_bound(1.0, 1.0, 1.0, 1e18, 2.0).unwrap() > 0.999_999);
        assert!(kingman_bound(1.0, 1.0, 1.0, 10.0, 1.0).is_err());
        // Clamped at zero when the bound is vacuous.
        assert_eq!(kingman_bound(1.0, 1.0, 100.0, 0.1, 1.5).unwrap(), 0.0);
    }

    #[test]
    fn mginfty_examples() {
        let v = mginfty_bound(1.0, 1.0, 20.0, 1.0).unwrap();
        let expect = 2.0 * 2.0f64.exp() * 2f64.powi(-20);
        assert!((v - expect).abs() < 1e-15);
        assert!((v - 1.4095e-5).abs() < 1e-8);
        assert_eq!(mginfty_bound(1.0, 1.0, 0.0, 1.0).unwrap(), 1.0);
        assert!(mginfty_bound(1.0, 1.0, 10.0, 0.0).is_err());
    }
}
