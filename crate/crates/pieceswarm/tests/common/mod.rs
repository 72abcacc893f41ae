//! Shared fixtures for the integration suite: the three worked scenarios and
//! an exact stationary oracle for the single-piece chain.

use pieceswarm::model::{Departure, PieceSet, SwarmParams};

pub fn example1(lambda0: f64) -> SwarmParams {
    SwarmParams {
        k: 1,
        seed_rate: 2.0,
        contact_rate: 1.0,
        departure: Departure::Finite(2.0),
        arrivals: vec![(PieceSet::EMPTY, lambda0)],
    }
}

/// Two disjoint two-piece arrival classes, no fixed seed uploads, instant
/// departures. Stable exactly when each class's rate is under twice the
/// other's.
pub fn example2(lambda12: f64, lambda34: f64) -> SwarmParams {
    SwarmParams {
        k: 4,
        seed_rate: 0.0,
        contact_rate: 1.0,
        departure: Departure::Infinite,
        arrivals: vec![
            (PieceSet::from_pieces([1, 2], 4).unwrap(), lambda12),
            (PieceSet::from_pieces([3, 4], 4).unwrap(), lambda34),
        ],
    }
}

/// Three single-piece arrival classes, no fixed seed uploads.
pub fn example3(lambda: [f64; 3], departure: Departure) -> SwarmParams {
    SwarmParams {
        k: 3,
        seed_rate: 0.0,
        contact_rate: 1.0,
        departure,
        arrivals: (1..=3)
            .map(|p| {
                (
                    PieceSet::from_pieces([p], 3).unwrap(),
                    lambda[p as usize - 1],
                )
            })
            .collect(),
    }
}

pub struct StationaryOracle {
    /// Stationary expectation of the population size.
    pub avg_n: f64,
    /// L1 residual of the balance equations at the solution.
    pub residual: f64,
    /// Probability mass on the truncation boundary `n = cap`.
    pub boundary_mass: f64,
}

/// Solves the truncated stationary distribution of the K=1 chain by
/// Gauss-Seidel sweeps over the balance equations.
///
/// The state is `(a, s)`: incomplete peers and lingering seeds, `a + s <= cap`.
/// Transitions: arrivals at `lambda` (blocked on the boundary), completions at
/// `(a/n)(Us + mu*s)` moving one peer from `a` to `s`, seed departures at
/// `gamma*s`. Sweeps alternate direction until the iterate is stationary to
/// machine precision.
pub fn solve_k1_stationary(params: &SwarmParams, cap: usize) -> StationaryOracle {
    assert_eq!(params.k, 1, "oracle covers the single-piece chain");
    assert_eq!(params.arrivals.len(), 1);
    assert!(params.arrivals[0].0.is_empty());
    let lambda = params.arrivals[0].1;
    let us = params.seed_rate;
    let mu = params.contact_rate;
    let gamma = match params.departure {
        Departure::Finite(g) => g,
        Departure::Infinite => panic!("oracle needs lingering seeds"),
    };

    let side = cap + 1;
    let idx = |a: usize, s: usize| a * side + s;
    let states: Vec<(usize, usize)> = (0..=cap)
        .flat_map(|n| (0..=n).map(move |a| (a, n - a)))
        .collect();

    let up = |a: usize, s: usize| {
        if a == 0 {
            0.0
        } else {
            (a as f64 / (a + s) as f64) * (us + mu * s as f64)
        }
    };
    let out = |a: usize, s: usize| {
        let arr = if a + s < cap { lambda } else { 0.0 };
        arr + up(a, s) + gamma * s as f64
    };

    let mut pi = vec![0.0f64; side * side];
    pi[idx(0, 0)] = 1.0;
    let inflow = |pi: &[f64], a: usize, s: usize| {
        let mut acc = 0.0;
        if a >= 1 {
            acc += lambda * pi[idx(a - 1, s)];
        }
        if s >= 1 {
            acc += up(a + 1, s - 1) * pi[idx(a + 1, s - 1)];
        }
        if a + s < cap {
            acc += gamma * (s + 1) as f64 * pi[idx(a, s + 1)];
        }
        acc
    };

    let mut converged = false;
    for sweep in 0..200_000 {
        let mut delta = 0.0f64;
        let update = |pi: &mut Vec<f64>, a: usize, s: usize, delta: &mut f64| {
            let new = inflow(pi, a, s) / out(a, s).max(f64::MIN_POSITIVE);
            *delta = (*delta).max((new - pi[idx(a, s)]).abs());
            pi[idx(a, s)] = new;
        };
        if sweep % 2 == 0 {
            for &(a, s) in &states {
                if (a, s) != (0, 0) {
                    update(&mut pi, a, s, &mut delta);
                }
            }
        } else {
            for &(a, s) in states.iter().rev() {
                if (a, s) != (0, 0) {
                    update(&mut pi, a, s, &mut delta);
                }
            }
        }
        let mass: f64 = states.iter().map(|&(a, s)| pi[idx(a, s)]).sum();
        if delta / mass < 1e-15 {
            converged = true;
            break;
        }
    }
    assert!(converged, "stationary sweeps did not converge");

    let mass: f64 = states.iter().map(|&(a, s)| pi[idx(a, s)]).sum();
    for &(a, s) in &states {
        pi[idx(a, s)] /= mass;
    }
    let mut avg_n = 0.0;
    let mut residual = 0.0;
    let mut boundary_mass = 0.0;
    for &(a, s) in &states {
        let p = pi[idx(a, s)];
        avg_n += p * (a + s) as f64;
        residual += (inflow(&pi, a, s) - out(a, s) * p).abs();
        if a + s == cap {
            boundary_mass += p;
        }
    }
    StationaryOracle {
        avg_n,
        residual,
        boundary_mass,
    }
}
