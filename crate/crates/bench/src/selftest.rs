//! Quick internal consistency checks, one line per check.

use streamopt::blocktridiag::{eps_recursion, eps_star, solve_dense, Depth};
use streamopt::convex_frames::{check_derivatives, ls_losses};
use streamopt::dense::Vector;
use streamopt::noa::{run_noa, NoaConfig};
use streamopt::stream_ls::{normal_equations, solve_stream, LagTable, LsStream};
use streamopt::testbeds::nhpp::{nhpp_instance, SplineNhppConfig};
use streamopt::testbeds::synthetic::{decoupled_ls_stream, dominant_ls_stream, SyntheticLsConfig};

use crate::runner::max_frame_relative;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, result: anyhow::Result<(bool, String)>) -> Check {
    match result {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e:#}"),
        },
    }
}

fn stream_vs_dense() -> anyhow::Result<(bool, String)> {
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let cfg = SyntheticLsConfig::new(4, 12, 20, 0.1);
        let (batches, _) = dominant_ls_stream(&cfg, seed)?;
        let x = solve_stream(4, 0.1, Depth::Full, &batches)?;
        let d = solve_dense(&normal_equations(4, 0.1, &batches)?)?;
        worst = worst.max(max_frame_relative(&x, &d));
    }
    Ok((worst < 1e-9, format!("max rel err {worst:.2e}")))
}

fn eps_closed_form() -> anyhow::Result<(bool, String)> {
    let mut worst = 0.0f64;
    for i in 0..10 {
        for j in 0..10 {
            let delta = i as f64 / 10.0;
            let theta = 0.9 * j as f64 / 10.0 * 0.5 * (1.0 - delta);
            let closed = eps_star(delta, theta).ok_or_else(|| anyhow::anyhow!("no closed form at ({delta}, {theta})"))?;
            let (iterated, _) = eps_recursion(delta, theta, 1e-16, 100_000);
            worst = worst.max((closed - iterated).abs());
        }
    }
    Ok((worst < 1e-10, format!("max deviation {worst:.2e}")))
}

fn noa_matches_stream() -> anyhow::Result<(bool, String)> {
    let cfg = SyntheticLsConfig::new(3, 6, 15, 0.1);
    let (batches, _) = dominant_ls_stream(&cfg, 11)?;
    let (x, _) = run_noa(NoaConfig::with_buffer(Depth::Full), &ls_losses(&batches, 0.1)?)?;
    let z = solve_stream(3, 0.1, Depth::Full, &batches)?;
    let err = max_frame_relative(&x, &z);
    Ok((err < 1e-9, format!("max rel err {err:.2e}")))
}

fn nhpp_derivatives() -> anyhow::Result<(bool, String)> {
    let cfg = SplineNhppConfig {
        frames: 6,
        ..SplineNhppConfig::with_seed(2)
    };
    let inst = nhpp_instance(&cfg)?;
    let (mut g, mut h) = (0.0f64, 0.0f64);
    for (k, f) in inst.losses.iter().enumerate() {
        let prev = Vector::from_fn(f.dim(), |i, _| cfg.floor * (1.0 + 0.1 * ((i + k) % 3) as f64));
        let cur = Vector::from_fn(f.dim(), |i, _| cfg.floor * (1.2 - 0.1 * ((i + 2 * k) % 4) as f64));
        let c = check_derivatives(f.as_ref(), &prev, &cur, 1e-4);
        g = g.max(c.gradient_error);
        h = h.max(c.hessian_error);
    }
    Ok((g < 1e-5 && h < 1e-4, format!("gradient {g:.2e}, hessian {h:.2e}")))
}

fn decoupled_lag_table() -> anyhow::Result<(bool, String)> {
    let batches = decoupled_ls_stream(3, 6, 12, 4)?;
    let mut s = LsStream::new(3, 0.0, Depth::Full)?.with_history();
    for b in &batches {
        s.ingest(b)?;
    }
    let table = LagTable::from_history(s.history().unwrap_or(&[]), &s.estimates())?;
    let worst = (1..11).flat_map(|lag| table.lag_entries(lag)).fold(f64::NEG_INFINITY, f64::max);
    Ok((worst <= -12.0, format!("largest off-diagonal entry {worst:.2}")))
}

pub fn run_all() -> Vec<Check> {
    vec![
        check("stream-vs-dense", stream_vs_dense()),
        check("eps-closed-form", eps_closed_form()),
        check("noa-vs-stream", noa_matches_stream()),
        check("nhpp-derivatives", nhpp_derivatives()),
        check("decoupled-lag-table", decoupled_lag_table()),
    ]
}
