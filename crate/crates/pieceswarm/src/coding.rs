//! Linear network coding over small finite fields.
//!
//! In coded mode a peer's knowledge is the subspace of `F_q^K` spanned by the
//! coded blocks it holds. An upload is a uniformly random linear combination
//! of the uploader's basis; it is useful exactly when it falls outside the
//! downloader's subspace, which happens with probability
//! `1 - q^(dim(A /\ B) - dim B)` and hence at least `1 - 1/q` whenever the
//! uploader knows anything the downloader does not. The all-zero draw is a
//! legitimate sample and is delivered as a no-op rather than re-drawn.
//!
//! Field orders: any prime up to 256 (modular arithmetic) and any power of two
//! up to 256 (log/antilog tables over a fixed primitive polynomial). Other
//! prime powers are rejected.

use rand::Rng;

use crate::error::{Result, SwarmError};

/// Primitive polynomials (with `x` primitive) for GF(2^m), m = 2..=8,
/// written with the high bit included: index [m-2].
const BINARY_POLYS: [u16; 7] = [0x7, 0xB, 0x13, 0x25, 0x43, 0x89, 0x11D];

#[derive(Clone, Debug)]
enum FieldKind {
    Prime,
    Binary { log: Vec<u16>, exp: Vec<u16> },
}

/// Arithmetic in `F_q`. Elements are `0..q` stored as `u16`.
#[derive(Clone, Debug)]
pub struct Field {
    q: u16,
    kind: FieldKind,
}

impl Field {
    pub fn new(q: u16) -> Result<Field> {
        if !(2..=256).contains(&q) {
            return Err(SwarmError::UnsupportedField(q));
        }
        if is_prime(q) {
            return Ok(Field {
                q,
                kind: FieldKind::Prime,
            });
        }
        if q.is_power_of_two() {
            let m = q.trailing_zeros() as usize;
            let poly = BINARY_POLYS[m - 2] as u32;
            // exp[i] = x^i; log inverts it on nonzero elements.
            let mut exp = vec![0u16; (q as usize - 1) * 2];
            let mut log = vec![0u16; q as usize];
            let mut v: u32 = 1;
            for i in 0..(q as usize - 1) {
                exp[i] = v as u16;
                log[v as usize] = i as u16;
                v <<= 1;
                if v & (q as u32) != 0 {
                    v ^= poly;
                }
            }
            for i in 0..(q as usize - 1) {
                exp[i + q as usize - 1] = exp[i];
            }
            return Ok(Field {
                q,
                kind: FieldKind::Binary { log, exp },
            });
        }
        Err(SwarmError::UnsupportedField(q))
    }

    pub fn order(&self) -> u16 {
        self.q
    }

    pub fn add(&self, a: u16, b: u16) -> u16 {
        match &self.kind {
            FieldKind::Prime => ((a as u32 + b as u32) % self.q as u32) as u16,
            FieldKind::Binary { .. } => a ^ b,
        }
    }

    pub fn sub(&self, a: u16, b: u16) -> u16 {
        match &self.kind {
            FieldKind::Prime => ((a as u32 + self.q as u32 - b as u32) % self.q as u32) as u16,
            FieldKind::Binary { .. } => a ^ b,
        }
    }

    pub fn neg(&self, a: u16) -> u16 {
        self.sub(0, a)
    }

    pub fn mul(&self, a: u16, b: u16) -> u16 {
        if a == 0 || b == 0 {
            return 0;
        }
        match &self.kind {
            FieldKind::Prime => ((a as u32 * b as u32) % self.q as u32) as u16,
            FieldKind::Binary { log, exp } => {
                exp[log[a as usize] as usize + log[b as usize] as usize]
            }
        }
    }

    pub fn inv(&self, a: u16) -> u16 {
        assert!(a != 0, "inverse of zero");
        match &self.kind {
            FieldKind::Prime => {
                // Fermat: a^(q-2) mod q.
                let mut result = 1u16;
                let mut base = a;
                let mut e = self.q - 2;
                while e > 0 {
                    if e & 1 == 1 {
                        result = self.mul(result, base);
                    }
                    base = self.mul(base, base);
                    e >>= 1;
                }
                result
            }
            FieldKind::Binary { log, exp } => {
                let l = log[a as usize] as usize;
                exp[(self.q as usize - 1 - l) % (self.q as usize - 1)]
            }
        }
    }

    pub fn div(&self, a: u16, b: u16) -> u16 {
        self.mul(a, self.inv(b))
    }

    pub fn random_element<R: Rng + ?Sized>(&self, rng: &mut R) -> u16 {
        rng.random_range(0..self.q)
    }
}

fn is_prime(n: u16) -> bool {
    if n < 2 {
        return false;
    }
    let mut d = 2u16;
    while (d as u32) * (d as u32) <= n as u32 {
        if n.is_multiple_of(d) {
            return false;
        }
        d += 1;
    }
    true
}

/// A subspace of `F_q^K`, stored as a reduced row-echelon basis so that equal
/// subspaces compare equal structurally.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Subspace {
    k: usize,
    rows: Vec<Vec<u16>>,
    pivots: Vec<usize>,
}

impl Subspace {
    pub fn zero(k: usize) -> Subspace {
        Subspace {
            k,
            rows: Vec::new(),
            pivots: Vec::new(),
        }
    }

    /// Spans the given vectors.
    pub fn span(k: usize, vectors: &[Vec<u16>], field: &Field) -> Result<Subspace> {
        let mut s = Subspace::zero(k);
        for v in vectors {
            s.insert_vector(v, field)?;
        }
        Ok(s)
    }

    pub fn ambient_dim(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    pub fn is_full(&self) -> bool {
        self.rows.len() == self.k
    }

    pub fn basis(&self) -> &[Vec<u16>] {
        &self.rows
    }

    /// Reduces `v` against the basis in place; the remainder is zero exactly
    /// when `v` lies in the subspace.
    fn reduce(&self, v: &mut [u16], field: &Field) {
        for (row, &p) in self.rows.iter().zip(&self.pivots) {
            let c = v[p];
            if c != 0 {
                for j in p..self.k {
                    v[j] = field.sub(v[j], field.mul(c, row[j]));
                }
            }
        }
    }

    pub fn contains(&self, v: &[u16], field: &Field) -> Result<bool> {
        if v.len() != self.k {
            return Err(SwarmError::DimensionMismatch {
                got: v.len(),
                want: self.k,
            });
        }
        let mut w = v.to_vec();
        self.reduce(&mut w, field);
        Ok(w.iter().all(|&x| x == 0))
    }

    /// Adds `v` to the span, keeping the basis in reduced row-echelon form.
    /// Returns whether the dimension grew (i.e. the vector was useful).
    pub fn insert_vector(&mut self, v: &[u16], field: &Field) -> Result<bool> {
        if v.len() != self.k {
            return Err(SwarmError::DimensionMismatch {
                got: v.len(),
                want: self.k,
            });
        }
        let mut w = v.to_vec();
        self.reduce(&mut w, field);
        let pivot = match w.iter().position(|&x| x != 0) {
            Some(p) => p,
            None => return Ok(false),
        };
        let lead_inv = field.inv(w[pivot]);
        for x in w.iter_mut() {
            *x = field.mul(*x, lead_inv);
        }
        // Eliminate the new pivot column from existing rows.
        for row in self.rows.iter_mut() {
            let c = row[pivot];
            if c != 0 {
                for j in 0..self.k {
                    row[j] = field.sub(row[j], field.mul(c, w[j]));
                }
            }
        }
        let at = self.pivots.partition_point(|&p| p < pivot);
        self.pivots.insert(at, pivot);
        self.rows.insert(at, w);
        Ok(true)
    }

    /// Uniformly random combination of the basis; the zero subspace always
    /// yields the zero vector.
    pub fn random_combination<R: Rng + ?Sized>(&self, field: &Field, rng: &mut R) -> Vec<u16> {
        let mut v = vec![0u16; self.k];
        for row in &self.rows {
            let theta = field.random_element(rng);
            if theta != 0 {
                for j in 0..self.k {
                    v[j] = field.add(v[j], field.mul(theta, row[j]));
                }
            }
        }
        v
    }

    /// The sum (join) of two subspaces.
    pub fn sum(&self, other: &Subspace, field: &Field) -> Result<Subspace> {
        let mut s = self.clone();
        for row in &other.rows {
            s.insert_vector(row, field)?;
        }
        Ok(s)
    }

    /// `dim(self /\ other)`, via `dim A + dim B - dim(A + B)`.
    pub fn intersection_dim(&self, other: &Subspace, field: &Field) -> Result<usize> {
        let joint = self.sum(other, field)?;
        Ok(self.dim() + other.dim() - joint.dim())
    }
}

/// Probability that a uniformly random combination of `uploader`'s basis is
/// useful to `downloader`: `1 - q^(dim(A /\ B) - dim B)`. Zero when the
/// uploader's subspace is contained in the downloader's (including the zero
/// subspace), and at least `1 - 1/q` otherwise.
pub fn useful_probability(
    downloader: &Subspace,
    uploader: &Subspace,
    field: &Field,
) -> Result<f64> {
    let meet = downloader.intersection_dim(uploader, field)? as i32;
    let exponent = meet - uploader.dim() as i32;
    Ok(1.0 - (field.order() as f64).powi(exponent))
}

/// What an arriving peer already knows, in coded mode.
#[derive(Clone, Debug, PartialEq)]
pub enum CodedArrival {
    /// Peers arrive holding the span of these vectors (empty list = blank).
    Explicit(Vec<Vec<u16>>),
    /// Peers arrive holding the span of one uniformly random vector; the
    /// all-zero draw (probability `q^-K`) leaves them blank.
    UniformVector,
}

/// Parameters of a coded swarm over `GF(q)^K`. The file is `K` information
/// vectors; a peer is complete when its received subspace is the full space.
/// Contacts transfer one uniformly random combination of the uploader's
/// basis (seeds upload a uniformly random combination of the whole space).
#[derive(Clone, Debug)]
pub struct CodedParams {
    pub k: u32,
    pub q: u16,
    pub seed_rate: f64,
    pub contact_rate: f64,
    pub departure: crate::model::Departure,
    pub arrivals: Vec<(CodedArrival, f64)>,
}

impl CodedParams {
    /// Checks dimensions, rates, and the field order. Arrival classes whose
    /// span is the full space are rejected under instant departures, where a
    /// complete peer cannot exist.
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.k > 4096 {
            return Err(SwarmError::InvalidParams(format!(
                "K must lie in 1..=4096, got {}",
                self.k
            )));
        }
        let field = Field::new(self.q)?;
        if !(self.seed_rate >= 0.0 && self.seed_rate.is_finite()) {
            return Err(SwarmError::InvalidParams(
                "seed upload rate must be finite and nonnegative".into(),
            ));
        }
        if !(self.contact_rate > 0.0 && self.contact_rate.is_finite()) {
            return Err(SwarmError::InvalidParams(
                "contact rate must be finite and positive".into(),
            ));
        }
        if let crate::model::Departure::Finite(g) = self.departure {
            if !(g > 0.0 && g.is_finite()) {
                return Err(SwarmError::InvalidParams(
                    "departure rate must be positive (use Infinite for instant departures)".into(),
                ));
            }
        }
        if self.arrivals.is_empty() {
            return Err(SwarmError::InvalidParams(
                "at least one arrival class is required".into(),
            ));
        }
        for (arr, rate) in &self.arrivals {
            if !(*rate > 0.0 && rate.is_finite()) {
                return Err(SwarmError::InvalidParams(
                    "arrival rates must be finite and positive".into(),
                ));
            }
            match arr {
                CodedArrival::Explicit(vectors) => {
                    let span = Subspace::span(self.k as usize, vectors, &field)?;
                    if span.is_full() && self.departure.is_infinite() {
                        return Err(SwarmError::InvalidParams(
                            "arrivals spanning the full space are incompatible with instant \
                             departures"
                                .into(),
                        ));
                    }
                }
                CodedArrival::UniformVector => {
                    if self.k == 1 && self.departure.is_infinite() {
                        return Err(SwarmError::InvalidParams(
                            "a uniform-vector arrival can complete a K=1 peer, which is \
                             incompatible with instant departures"
                                .into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn lambda_total(&self) -> f64 {
        self.arrivals.iter().map(|(_, r)| r).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn rejects_non_binary_prime_powers() {
        for q in [0u16, 1, 9, 25, 27, 49, 121, 125, 169] {
            assert!(Field::new(q).is_err(), "q={q} should be rejected");
        }
        for q in [2u16, 3, 5, 7, 11, 101, 251, 4, 8, 16, 32, 64, 128, 256] {
            assert!(Field::new(q).is_ok(), "q={q} should be accepted");
        }
    }

    fn check_field_axioms(q: u16) {
        let f = Field::new(q).unwrap();
        for a in 0..q {
            assert_eq!(f.add(a, f.neg(a)), 0);
            if a != 0 {
                assert_eq!(f.mul(a, f.inv(a)), 1, "q={q} a={a}");
            }
            for b in 0..q {
                assert_eq!(f.add(a, b), f.add(b, a));
                assert_eq!(f.mul(a, b), f.mul(b, a));
                for c in 0..q.min(16) {
                    let lhs = f.mul(a, f.add(b, c));
                    let rhs = f.add(f.mul(a, b), f.mul(a, c));
                    assert_eq!(lhs, rhs, "distributivity q={q} {a},{b},{c}");
                }
            }
        }
    }

    #[test]
    fn field_axioms_small_orders() {
        for q in [2u16, 3, 5, 4, 8, 16] {
            check_field_axioms(q);
        }
    }

    #[test]
    fn gf256_has_full_multiplicative_order() {
        let f = Field::new(256).unwrap();
        // x generates the multiplicative group: powers must cycle length 255.
        let mut v = 1u16;
        let mut seen = std::collections::HashSet::new();
        for _ in 0..255 {
            assert!(seen.insert(v));
            v = f.mul(v, 2);
        }
        assert_eq!(v, 1);
    }

    #[test]
    fn rref_canonical_form_is_unique() {
        let f = Field::new(5).unwrap();
        // Same plane reached by two different spanning sets.
        let a = Subspace::span(3, &[vec![1, 2, 0], vec![0, 0, 1]], &f).unwrap();
        let b = Subspace::span(3, &[vec![2, 4, 1], vec![0, 0, 3], vec![3, 6, 2]], &f).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 2);
    }

    #[test]
    fn insert_reports_usefulness() {
        let f = Field::new(2).unwrap();
        let mut s = Subspace::zero(3);
        assert!(s.insert_vector(&[1, 1, 0], &f).unwrap());
        assert!(!s.insert_vector(&[1, 1, 0], &f).unwrap());
        assert!(!s.insert_vector(&[0, 0, 0], &f).unwrap());
        assert!(s.insert_vector(&[0, 1, 1], &f).unwrap());
        assert!(!s.insert_vector(&[1, 0, 1], &f).unwrap());
        assert_eq!(s.dim(), 2);
    }

    #[test]
    fn intersection_dims() {
        let f = Field::new(2).unwrap();
        let a = Subspace::span(3, &[vec![1, 0, 0], vec![0, 1, 0]], &f).unwrap();
        let b = Subspace::span(3, &[vec![0, 1, 0], vec![0, 0, 1]], &f).unwrap();
        assert_eq!(a.intersection_dim(&b, &f).unwrap(), 1);
        let c = Subspace::span(3, &[vec![1, 1, 1]], &f).unwrap();
        assert_eq!(a.intersection_dim(&c, &f).unwrap(), 0);
    }

    #[test]
    fn useful_probability_examples() {
        let f2 = Field::new(2).unwrap();
        // Disjoint lines in F_2^2: dim(A /\ B) = 0, dim B = 1 -> 1/2.
        let a = Subspace::span(2, &[vec![1, 0]], &f2).unwrap();
        let b = Subspace::span(2, &[vec![0, 1]], &f2).unwrap();
        assert!((useful_probability(&a, &b, &f2).unwrap() - 0.5).abs() < 1e-15);
        // Contained subspace: never useful.
        assert_eq!(useful_probability(&a, &a, &f2).unwrap(), 0.0);
        // Zero uploader: never useful.
        let z = Subspace::zero(2);
        assert_eq!(useful_probability(&a, &z, &f2).unwrap(), 0.0);

        // Full-knowledge uploader against a hyperplane in F_64^2: 63/64.
        let f64q = Field::new(64).unwrap();
        let down = Subspace::span(2, &[vec![1, 0]], &f64q).unwrap();
        let up = Subspace::span(2, &[vec![1, 0], vec![0, 1]], &f64q).unwrap();
        let p = useful_probability(&down, &up, &f64q).unwrap();
        assert!((p - 63.0 / 64.0).abs() < 1e-15);
    }

    #[test]
    fn empirical_usefulness_matches_formula() {
        // Frequency of useful draws within 3 SE of the closed form,
        // for q = 2 and q = 16.
        for (q, seed) in [(2u16, 11u64), (16, 12)] {
            let f = Field::new(q).unwrap();
            let k = 4;
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let mut down = Subspace::zero(k);
            down.insert_vector(&[1, 0, 0, 0], &f).unwrap();
            down.insert_vector(&[0, 1, 0, 0], &f).unwrap();
            let mut up = Subspace::zero(k);
            up.insert_vector(&[0, 1, 1, 0], &f).unwrap();
            up.insert_vector(&[0, 0, 0, 1], &f).unwrap();
            up.insert_vector(&[1, 0, 0, 0], &f).unwrap();

            let p = useful_probability(&down, &up, &f).unwrap();
            let trials = 40_000u32;
            let mut useful = 0u32;
            for _ in 0..trials {
                let v = up.random_combination(&f, &mut rng);
                if !down.contains(&v, &f).unwrap() {
                    useful += 1;
                }
            }
            let freq = useful as f64 / trials as f64;
            let se = (p * (1.0 - p) / trials as f64).sqrt();
            assert!(
                (freq - p).abs() <= 3.0 * se,
                "q={q}: freq {freq} vs p {p} (se {se})"
            );
        }
    }

    #[test]
    fn zero_draw_is_possible_and_useless() {
        let f = Field::new(2).unwrap();
        let up = Subspace::span(2, &[vec![1, 1]], &f).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut zeros = 0;
        for _ in 0..2000 {
            let v = up.random_combination(&f, &mut rng);
            if v.iter().all(|&x| x == 0) {
                zeros += 1;
            }
        }
        // Half the draws of a 1-dim space over F_2 are zero.
        assert!(zeros > 800 && zeros < 1200);
    }
}
