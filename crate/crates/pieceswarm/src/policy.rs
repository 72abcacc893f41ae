//! Piece-selection rules for uploaders.
//!
//! When an uploader (a peer or the fixed seed) contacts a downloader, a rule
//! from this family picks which useful piece to send, as a function of the two
//! collections and of the aggregate count state only. Every rule here always
//! sends *some* useful piece whenever one exists, which is the property the
//! stability analysis relies on; the rules differ only in how they distribute
//! probability over the useful set.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::model::{CountState, PieceSet};

/// Who is uploading: the fixed seed holds everything.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Uploader {
    Seed,
    Peer(PieceSet),
}

impl Uploader {
    fn have(self, k: u32) -> PieceSet {
        match self {
            Uploader::Seed => PieceSet::full(k),
            Uploader::Peer(c) => c,
        }
    }
}

/// Global replica counts visible to count-based rules: how many peers
/// currently hold piece `i`.
pub trait ReplicaView {
    fn replica(&self, piece: u32) -> u64;
}

impl ReplicaView for CountState {
    fn replica(&self, piece: u32) -> u64 {
        self.iter()
            .filter(|(c, _)| c.contains(piece))
            .map(|(_, v)| v)
            .sum()
    }
}

/// A uniform dummy view for rules that ignore replica counts.
pub struct NoView;

impl ReplicaView for NoView {
    fn replica(&self, _piece: u32) -> u64 {
        0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Policy {
    /// Uniform over the useful pieces.
    RandomUseful,
    /// Fewest replicas system-wide among the useful pieces, ties uniform.
    RarestFirst,
    /// Lowest-numbered useful piece, deterministic.
    Sequential,
}

impl Policy {
    /// The selection distribution over useful pieces: pairs `(piece, prob)`.
    /// Empty exactly when the uploader has nothing the downloader lacks;
    /// otherwise the probabilities sum to one.
    pub fn weights<V: ReplicaView>(
        &self,
        downloader: PieceSet,
        uploader: Uploader,
        k: u32,
        view: &V,
    ) -> Vec<(u32, f64)> {
        let useful: Vec<u32> = uploader
            .have(k)
            .minus(downloader)
            .pieces()
            .filter(|&p| p <= k)
            .collect();
        if useful.is_empty() {
            return Vec::new();
        }
        match self {
            Policy::RandomUseful => {
                let p = 1.0 / useful.len() as f64;
                useful.into_iter().map(|i| (i, p)).collect()
            }
            Policy::RarestFirst => {
                let min = useful.iter().map(|&i| view.replica(i)).min().unwrap();
                let rare: Vec<u32> = useful
                    .into_iter()
                    .filter(|&i| view.replica(i) == min)
                    .collect();
                let p = 1.0 / rare.len() as f64;
                rare.into_iter().map(|i| (i, p)).collect()
            }
            Policy::Sequential => vec![(useful.into_iter().min().unwrap(), 1.0)],
        }
    }

    /// Samples a piece from [`Policy::weights`]; `None` when nothing useful.
    pub fn choose<V: ReplicaView, R: Rng + ?Sized>(
        &self,
        downloader: PieceSet,
        uploader: Uploader,
        k: u32,
        view: &V,
        rng: &mut R,
    ) -> Option<u32> {
        let w = self.weights(downloader, uploader, k, view);
        match w.len() {
            0 => None,
            1 => Some(w[0].0),
            // All built-in rules are uniform over their support.
            m => Some(w[rng.random_range(0..m)].0),
        }
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random-useful" => Ok(Policy::RandomUseful),
            "rarest-first" => Ok(Policy::RarestFirst),
            "sequential" => Ok(Policy::Sequential),
            other => Err(format!(
                "unknown policy {other:?}: expected random-useful, rarest-first, or sequential"
            )),
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy::RandomUseful => "random-useful",
            Policy::RarestFirst => "rarest-first",
            Policy::Sequential => "sequential",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn random_useful_is_uniform_over_gap() {
        let a = PieceSet::from_pieces([1], 4).unwrap();
        let b = PieceSet::from_pieces([1, 2, 3], 4).unwrap();
        let w = Policy::RandomUseful.weights(a, Uploader::Peer(b), 4, &NoView);
        assert_eq!(w.len(), 2);
        for &(i, p) in &w {
            assert!(i == 2 || i == 3);
            assert!((p - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn rarest_first_prefers_scarce_piece() {
        // Piece 3 held by one peer, piece 2 by three: rarest-first sends 3.
        let k = 3;
        let state = CountState::from_pairs([
            (PieceSet::from_pieces([2], k).unwrap(), 3),
            (PieceSet::from_pieces([2, 3], k).unwrap(), 1),
        ]);
        let down = PieceSet::from_pieces([1], k).unwrap();
        let w = Policy::RarestFirst.weights(down, Uploader::Seed, k, &state);
        assert_eq!(w, vec![(3, 1.0)]);
    }

    #[test]
    fn rarest_first_breaks_ties_uniformly() {
        let k = 2;
        let state = CountState::empty();
        let down = PieceSet::EMPTY;
        let w = Policy::RarestFirst.weights(down, Uploader::Seed, k, &state);
        assert_eq!(w.len(), 2);
        assert!(w.iter().all(|&(_, p)| (p - 0.5).abs() < 1e-15));

        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut hits = [0u32; 2];
        for _ in 0..4000 {
            let i = Policy::RarestFirst
                .choose(down, Uploader::Seed, k, &state, &mut rng)
                .unwrap();
            hits[(i - 1) as usize] += 1;
        }
        // 3 SE band around 2000 for a fair coin over 4000 draws.
        let se = (4000.0f64 * 0.25).sqrt();
        assert!((hits[0] as f64 - 2000.0).abs() < 3.0 * se);
    }

    #[test]
    fn sequential_picks_lowest_index() {
        let a = PieceSet::from_pieces([1, 3], 5).unwrap();
        let w = Policy::Sequential.weights(a, Uploader::Seed, 5, &NoView);
        assert_eq!(w, vec![(2, 1.0)]);
    }

    #[test]
    fn nothing_useful_yields_empty() {
        let a = PieceSet::from_pieces([1, 2], 3).unwrap();
        let b = PieceSet::from_pieces([2], 3).unwrap();
        for policy in [
            Policy::RandomUseful,
            Policy::RarestFirst,
            Policy::Sequential,
        ] {
            assert!(policy.weights(a, Uploader::Peer(b), 3, &NoView).is_empty());
            let mut rng = ChaCha12Rng::seed_from_u64(1);
            assert_eq!(
                policy.choose(a, Uploader::Peer(b), 3, &NoView, &mut rng),
                None
            );
        }
    }

    proptest! {
        // Whenever the uploader holds something the downloader lacks, every
        // rule returns a distribution over that gap summing to one.
        #[test]
        fn usefulness_sums_to_one(a_bits in 0u32..32, b_bits in 0u32..32) {
            let k = 5;
            let a = PieceSet::from_bits(a_bits);
            let b = PieceSet::from_bits(b_bits);
            let state = CountState::from_pairs([(a, 2), (b, 1)]);
            for policy in [Policy::RandomUseful, Policy::RarestFirst, Policy::Sequential] {
                let w = policy.weights(a, Uploader::Peer(b), k, &state);
                let gap = b.minus(a);
                if gap.is_empty() {
                    prop_assert!(w.is_empty());
                } else {
                    let total: f64 = w.iter().map(|&(_, p)| p).sum();
                    prop_assert!((total - 1.0).abs() < 1e-12);
                    for &(i, p) in &w {
                        prop_assert!(gap.contains(i));
                        prop_assert!(p > 0.0);
                    }
                }
            }
        }
    }
}
