//! Command implementations. Each builds on the library crate and emits
//! schema-stable CSVs (fixed headers, fixed column order, floats printed to
//! nine significant digits) so repeated runs with one seed are byte-identical.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use pieceswarm::analyze::{classify, classify_coded, StabilityReport};
use pieceswarm::lyapunov::find_consts;
use pieceswarm::model::{CountState, Departure, PieceSet, SwarmParams};
use pieceswarm::simulate::{
    growth_slope, recurrence_trend, replicate, run_watched, Setting, SimSpec, Trajectory,
    TypeCounts, WatchedTrajectory,
};
use pieceswarm::stats::{self, fmt_sig9};

use crate::config::{Scenario, SweepParam};

/// Failure classes; each maps to one documented exit code in `main`.
pub enum CmdError {
    /// Scenario or usage problem (exit 2).
    Config(String),
    /// Simulation or I/O failure (exit 3).
    Runtime(String),
    /// No drift certificate could be found or confirmed (exit 4).
    Certificate(String),
}

pub type CmdResult = Result<(), CmdError>;

fn runtime(e: impl std::fmt::Display) -> CmdError {
    CmdError::Runtime(e.to_string())
}

/// Counter-based replication streams: SplitMix64 over an offset counter, so
/// every (seed, index) pair gets an uncorrelated engine seed independent of
/// scheduling order.
pub fn rep_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, CmdError> {
    std::fs::create_dir_all(dir).map_err(runtime)?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(runtime)?;
    Ok(path)
}

fn spec_for(scenario: &Scenario) -> Result<SimSpec, CmdError> {
    let spec = SimSpec {
        setting: scenario.setting.clone(),
        horizon: scenario.horizon,
        designated: scenario.designated,
        initial: CountState::empty(),
        sample_grid: scenario.sample_grid,
        sample_stride: scenario.sample_stride,
    };
    spec.validate()
        .map_err(|e| CmdError::Config(e.to_string()))?;
    Ok(spec)
}

fn type_headers(types: &TypeCounts) -> String {
    // Full columns: x{m} counts peers whose piece bitmask is m (bit i-1 is
    // piece i). Histograms: s{j} / d{j} count peers holding j pieces / a
    // span of dimension j.
    let (prefix, len) = match types {
        TypeCounts::Full(v) => ("x", v.len()),
        TypeCounts::SizeHist(v) => ("s", v.len()),
        TypeCounts::DimHist(v) => ("d", v.len()),
    };
    (0..len)
        .map(|m| format!("{prefix}{m}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn trajectory_csv(traj: &Trajectory) -> String {
    let mut out = String::new();
    let first = traj
        .samples
        .first()
        .expect("every trajectory starts with t = 0");
    out.push_str("t,n,");
    out.push_str(&type_headers(&first.types));
    out.push_str(",one_club_frac,ya,yb,yg,ye,yf,A,D\n");
    for s in &traj.samples {
        let counts = match &s.types {
            TypeCounts::Full(v) | TypeCounts::SizeHist(v) | TypeCounts::DimHist(v) => v,
        };
        let cols: Vec<String> = counts.iter().map(|c| c.to_string()).collect();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            fmt_sig9(s.t),
            s.n,
            cols.join(","),
            fmt_sig9(s.one_club_frac),
            s.census.a,
            s.census.b,
            s.census.g,
            s.census.e,
            s.census.f,
            s.a_cum,
            s.d_cum
        )
        .unwrap();
    }
    out
}

pub fn cmd_simulate(scenario: &Scenario, out: &Path) -> CmdResult {
    let spec = spec_for(scenario)?;
    let seeds: Vec<u64> = (0..scenario.replications as u64)
        .map(|i| rep_seed(scenario.seed, i))
        .collect();
    let trajs = replicate(&spec, &seeds).map_err(runtime)?;

    let mut summary = String::from(
        "replication,seed,final_n,avg_n_last_half,min_n_after_half,growth_slope,arrivals,departures\n",
    );
    for (i, traj) in trajs.iter().enumerate() {
        write_file(
            out,
            &format!("trajectory_rep{i:03}.csv"),
            &trajectory_csv(traj),
        )?;
        writeln!(
            summary,
            "{},{},{},{},{},{},{},{}",
            i,
            seeds[i],
            traj.final_n,
            fmt_sig9(traj.avg_n_last_half),
            traj.min_n_after_half,
            fmt_sig9(growth_slope(traj)),
            traj.arrivals_total,
            traj.departures_total
        )
        .unwrap();
    }
    write_file(out, "summary.csv", &summary)?;

    let finals: Vec<f64> = trajs.iter().map(|t| t.final_n as f64).collect();
    let avgs: Vec<f64> = trajs.iter().map(|t| t.avg_n_last_half).collect();
    println!(
        "simulate: {} replication(s) to horizon {}; median final n = {}, median time-average n \
         over the last half = {}",
        trajs.len(),
        fmt_sig9(scenario.horizon),
        fmt_sig9(stats::median(&finals)),
        fmt_sig9(stats::median(&avgs)),
    );
    println!(
        "wrote {} trajectory file(s) and summary.csv under {}",
        trajs.len(),
        out.display()
    );
    Ok(())
}

fn report_for(scenario: &Scenario) -> Result<StabilityReport, CmdError> {
    match &scenario.setting {
        Setting::Uncoded { params, .. } => classify(params),
        Setting::Coded(params) => classify_coded(params),
    }
    .map_err(runtime)
}

pub fn cmd_analyze(scenario: &Scenario, out: &Path) -> CmdResult {
    let report = report_for(scenario)?;
    println!("verdict: {}", report.verdict);
    println!("reason: {}", report.reason);
    if !report.binding_pieces.is_empty() {
        let pieces: Vec<String> = report
            .binding_pieces
            .iter()
            .map(|p| p.to_string())
            .collect();
        println!("binding pieces: {}", pieces.join(", "));
    }
    println!();
    println!("{:<24} delta", "margin");
    let mut csv = String::from("label,delta\n");
    for m in &report.margins {
        println!("{:<24} {}", m.label, fmt_sig9(m.value));
        writeln!(csv, "{},{}", m.label, fmt_sig9(m.value)).unwrap();
    }
    write_file(out, "margins.csv", &csv)?;
    println!();
    println!("wrote margins.csv under {}", out.display());
    Ok(())
}

pub fn cmd_lyapunov(scenario: &Scenario, out: &Path) -> CmdResult {
    let Setting::Uncoded { params, .. } = &scenario.setting else {
        return Err(CmdError::Config(
            "drift certificates support uncoded scenarios only".into(),
        ));
    };
    let found = find_consts(params).map_err(runtime)?;
    let Some(consts) = &found.consts else {
        return Err(CmdError::Certificate(format!(
            "no certificate after {} attempt(s): {}",
            found.attempts, found.reason
        )));
    };
    let cert = found
        .certificate
        .as_ref()
        .expect("found constants always carry their confirmation run");
    if !cert.pass {
        return Err(CmdError::Certificate(format!(
            "search produced constants whose confirmation failed (max Q(W)/n = {})",
            fmt_sig9(cert.max_ratio)
        )));
    }

    println!("certificate found after {} attempt(s)", found.attempts);
    for (name, value) in [
        ("r", consts.r),
        ("d", consts.d),
        ("beta", consts.beta),
        ("alpha", consts.alpha),
        ("eps", consts.eps),
    ] {
        println!("{name:<8} {}", fmt_sig9(value));
    }
    println!("{:<8} {}", "n_o", consts.n_o);
    println!("{:<8} {}", "xi", fmt_sig9(consts.xi));
    if let Some(p) = consts.p {
        println!("{:<8} {}", "p", fmt_sig9(p));
    }
    println!(
        "confirmation: {} sampled states, max Q(W)/n = {} (certified slope -{})",
        cert.samples,
        fmt_sig9(cert.max_ratio),
        fmt_sig9(cert.xi)
    );

    let mut csv = String::from("name,value\n");
    for (name, value) in [
        ("r", fmt_sig9(consts.r)),
        ("d", fmt_sig9(consts.d)),
        ("beta", fmt_sig9(consts.beta)),
        ("alpha", fmt_sig9(consts.alpha)),
        ("eps", fmt_sig9(consts.eps)),
        ("n_o", consts.n_o.to_string()),
        ("xi", fmt_sig9(consts.xi)),
        ("p", consts.p.map(fmt_sig9).unwrap_or_default()),
        ("pass", cert.pass.to_string()),
        ("samples", cert.samples.to_string()),
        ("max_ratio", fmt_sig9(cert.max_ratio)),
        ("attempts", found.attempts.to_string()),
    ] {
        writeln!(csv, "{name},{value}").unwrap();
    }
    write_file(out, "certificate.csv", &csv)?;
    println!("wrote certificate.csv under {}", out.display());
    Ok(())
}

fn apply_sweep(
    base: &SwarmParams,
    param: &SweepParam,
    value: f64,
) -> Result<SwarmParams, CmdError> {
    let mut params = base.clone();
    match param {
        SweepParam::ClassRate(set) => {
            let slot = params
                .arrivals
                .iter_mut()
                .find(|(s, _)| s == set)
                .ok_or_else(|| CmdError::Config("swept arrival class is not declared".into()))?;
            slot.1 = value;
        }
        SweepParam::SeedRate => params.seed_rate = value,
        SweepParam::ContactRate => params.contact_rate = value,
        SweepParam::DepartureRate => params.departure = Departure::Finite(value),
    }
    Ok(params)
}

pub fn cmd_sweep(scenario: &Scenario, out: &Path) -> CmdResult {
    let Some(sweep) = &scenario.sweep else {
        return Err(CmdError::Config("scenario has no [sweep] section".into()));
    };
    let Setting::Uncoded { params, policy } = &scenario.setting else {
        return Err(CmdError::Config(
            "sweeps support uncoded scenarios only".into(),
        ));
    };

    let mut csv = String::from("value,verdict,growth_slope,mean_n\n");
    println!(
        "sweeping {} over {} value(s)",
        sweep.param,
        sweep.values.len()
    );
    println!(
        "{:>14} {:>18} {:>14} {:>14}",
        "value", "verdict", "growth_slope", "mean_n"
    );
    for (vi, &value) in sweep.values.iter().enumerate() {
        let varied = apply_sweep(params, &sweep.param, value)?;
        varied
            .validate()
            .map_err(|e| CmdError::Config(format!("sweep value {value}: {e}")))?;
        let report = classify(&varied).map_err(runtime)?;
        let spec = SimSpec {
            setting: Setting::Uncoded {
                params: varied,
                policy: *policy,
            },
            horizon: scenario.horizon,
            designated: scenario.designated,
            initial: CountState::empty(),
            sample_grid: scenario.sample_grid,
            sample_stride: scenario.sample_stride,
        };
        spec.validate()
            .map_err(|e| CmdError::Config(e.to_string()))?;
        let seeds: Vec<u64> = (0..scenario.replications as u64)
            .map(|r| rep_seed(scenario.seed, ((vi as u64) << 32) | r))
            .collect();
        let trajs = replicate(&spec, &seeds).map_err(runtime)?;
        let slope = stats::median(&trajs.iter().map(growth_slope).collect::<Vec<f64>>());
        let mean_n = stats::median(
            &trajs
                .iter()
                .map(|t| t.avg_n_last_half)
                .collect::<Vec<f64>>(),
        );
        println!(
            "{:>14} {:>18} {:>14} {:>14}",
            fmt_sig9(value),
            report.verdict.to_string(),
            fmt_sig9(slope),
            fmt_sig9(mean_n)
        );
        writeln!(
            csv,
            "{},{},{},{}",
            fmt_sig9(value),
            report.verdict,
            fmt_sig9(slope),
            fmt_sig9(mean_n)
        )
        .unwrap();
    }
    write_file(out, "sweep.csv", &csv)?;
    println!("wrote sweep.csv under {}", out.display());
    Ok(())
}

/// The watched chain needs the symmetric fast-contact setup: no server,
/// instant departures, and one single-piece arrival class per piece at a
/// common rate. Returns (K, per-class rate).
fn watched_rate(scenario: &Scenario) -> Result<(u32, f64), CmdError> {
    let Setting::Uncoded { params, .. } = &scenario.setting else {
        return Err(CmdError::Config(
            "watched mode supports uncoded scenarios only".into(),
        ));
    };
    let bad = |msg: &str| {
        CmdError::Config(format!(
            "watched mode needs the symmetric fast-contact setup: {msg}"
        ))
    };
    let k = params.k;
    if k < 2 {
        return Err(bad("K must be at least 2"));
    }
    if params.departure != Departure::Infinite {
        return Err(bad("gamma must be \"inf\""));
    }
    if params.seed_rate != 0.0 {
        return Err(bad("Us must be 0"));
    }
    if params.arrivals.len() != k as usize {
        return Err(bad("declare exactly one single-piece class per piece"));
    }
    let rate = params.arrivals[0].1;
    for piece in 1..=k {
        let set = PieceSet::from_pieces([piece], k).map_err(|e| bad(&e.to_string()))?;
        let class = params
            .arrivals
            .iter()
            .find(|(s, _)| *s == set)
            .ok_or_else(|| bad(&format!("missing the single-piece class {{{piece}}}")))?;
        if class.1 != rate {
            return Err(bad("all classes must share one arrival rate"));
        }
    }
    Ok((k, rate))
}

pub fn cmd_watched(scenario: &Scenario, out: &Path) -> CmdResult {
    let (k, lambda) = watched_rate(scenario)?;
    let mut histogram: BTreeMap<u64, u64> = BTreeMap::new();
    let mut first: Option<WatchedTrajectory> = None;
    let mut resets = 0u64;
    for r in 0..scenario.replications as u64 {
        let traj = run_watched(k, lambda, scenario.horizon, rep_seed(scenario.seed, r))
            .map_err(runtime)?;
        for &z in &traj.z_log {
            *histogram.entry(z).or_insert(0) += 1;
        }
        resets += traj.resets;
        if first.is_none() {
            first = Some(traj);
        }
    }

    let max_z = histogram.keys().next_back().copied().unwrap_or(0);
    let mut csv = String::from("z,count\n");
    let mut bursts = 0u64;
    let mut weighted = 0.0;
    for z in 0..=max_z {
        let count = histogram.get(&z).copied().unwrap_or(0);
        bursts += count;
        weighted += z as f64 * count as f64;
        writeln!(csv, "{z},{count}").unwrap();
    }
    write_file(out, "z_histogram.csv", &csv)?;

    let traj = first.expect("replications >= 1");
    let trend = recurrence_trend(&traj, 10);
    let mut trend_csv = String::from("window_mid,mean_n\n");
    for &(mid, mean) in &trend.window_means {
        writeln!(trend_csv, "{},{}", fmt_sig9(mid), fmt_sig9(mean)).unwrap();
    }
    write_file(out, "recurrence_trend.csv", &trend_csv)?;

    if bursts > 0 {
        println!(
            "watched chain: {bursts} completion burst(s) across {} replication(s); mean Z = {} \
             (the burst law predicts K-1 = {})",
            scenario.replications,
            fmt_sig9(weighted / bursts as f64),
            k - 1
        );
    } else {
        println!("watched chain: no completion bursts within the horizon");
    }
    if resets > 0 {
        println!("note: {resets} burst(s) drained the whole crowd");
    }
    println!(
        "population trend: slope {} per unit time over 10 windows (qualitative report only)",
        fmt_sig9(trend.slope)
    );
    println!(
        "wrote z_histogram.csv and recurrence_trend.csv under {}",
        out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::rep_seed;

    #[test]
    fn rep_seeds_are_distinct_and_stable() {
        let a: Vec<u64> = (0..64).map(|i| rep_seed(7, i)).collect();
        let b: Vec<u64> = (0..64).map(|i| rep_seed(7, i)).collect();
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 64, "stream collision");
        // Different base seeds must not share streams either.
        assert_ne!(rep_seed(7, 0), rep_seed(8, 0));
    }
}
