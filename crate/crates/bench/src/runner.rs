//! Scenario execution: generate, solve, compare against oracles, write artifacts.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::Context;
use log::{debug, info};
use streamopt::blocktridiag::{solve_dense, Depth};
use streamopt::convex_frames::{ls_losses, rate_report, AggregateObjective, ConvexRateReport, SharedLoss, BATCH_TOL_SQ};
use streamopt::dense::Vector;
use streamopt::fit;
use streamopt::noa::{run_noa, BarrierSchedule, NoaConfig};
use streamopt::stream_ls::{format_f64, normal_equations, truncation_error, truncation_sweep, LsBatch, LsStream, UpdateRecord};
use streamopt::testbeds::lot::generate_lot_stream;
use streamopt::testbeds::nhpp::{intensity_relative_l2, nhpp_instance, NhppInstance};
use streamopt::testbeds::synthetic::ls_stream;

use crate::scenario::{Buffer, Kind, Scenario};
use crate::summary::Summary;

/// Relative tolerance of the full-buffer least-squares oracle comparison.
pub const ORACLE_TOL: f64 = 1e-9;
/// Relative `L²` tolerance of online against batch intensity estimates.
pub const RECOVERY_TOL: f64 = 1e-6;
/// Smallest buffer for which the intensity recovery check is enforced.
pub const RECOVERY_MIN_BUFFER: usize = 6;
/// Allowed excess of a fitted slope or ratio over its bound.
pub const SLACK: f64 = 0.05;

/// An in-run check that did not hold.
#[derive(Debug, Clone, PartialEq)]
pub struct InvariantFailed {
    pub name: &'static str,
    pub detail: String,
}

impl fmt::Display for InvariantFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invariant `{}` failed: {}", self.name, self.detail)
    }
}

impl std::error::Error for InvariantFailed {}

fn ensure(ok: bool, name: &'static str, detail: impl FnOnce() -> String) -> anyhow::Result<()> {
    if ok {
        Ok(())
    } else {
        Err(InvariantFailed { name, detail: detail() }.into())
    }
}

/// Runs every seed of the scenario, one worker thread per seed.
///
/// Results come back in seed order; the first failing seed's error is returned.
pub fn run(sc: &Scenario) -> anyhow::Result<Vec<(u64, Summary)>> {
    sc.validate()?;
    std::fs::create_dir_all(&sc.out).with_context(|| format!("creating {}", sc.out.display()))?;
    let results: Vec<anyhow::Result<Summary>> = std::thread::scope(|s| {
        let handles: Vec<_> = sc.seeds.iter().map(|&seed| s.spawn(move || run_seed(sc, seed))).collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    sc.seeds
        .iter()
        .zip(results)
        .map(|(&seed, r)| r.map(|s| (seed, s)).with_context(|| format!("{} seed {seed}", sc.kind)))
        .collect()
}

/// Runs one seed and writes its artifacts to [`Scenario::run_dir`].
pub fn run_seed(sc: &Scenario, seed: u64) -> anyhow::Result<Summary> {
    let dir = sc.run_dir(seed);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut summary = Summary::default();
    summary.push("kind", sc.kind.name());
    summary.push("seed", seed);
    summary.push("buffer", sc.buffer.to_string());
    summary.push("frames", sc.frames());
    info!("{} seed {seed}: {} frames, buffer {}", sc.kind, sc.frames(), sc.buffer);
    let outcome = match sc.kind {
        Kind::SyntheticLs => {
            let cfg = sc.synthetic_config();
            let batches = ls_stream(&cfg, seed)?;
            run_ls(sc, &dir, cfg.n, cfg.gamma, &batches, &mut summary)
        }
        Kind::LotLs => {
            let cfg = sc.lot_config(seed);
            if cfg.frames == 0 {
                write_crossings_header(&dir)?;
                run_ls(sc, &dir, cfg.n, cfg.gamma, &[], &mut summary)
            } else {
                let lot = generate_lot_stream(&cfg)?;
                lot.crossings.write_csv(BufWriter::new(File::create(dir.join("crossings.csv"))?))?;
                summary.push("crossings", lot.crossings.len());
                run_ls(sc, &dir, cfg.n, cfg.gamma, &lot.batches, &mut summary)
            }
        }
        Kind::NhppNoa => run_nhpp(sc, seed, &dir, &mut summary),
    };
    summary.push("status", if outcome.is_ok() { "ok" } else { "failed" });
    if let Some(inv) = outcome.as_ref().err().and_then(|e| e.downcast_ref::<InvariantFailed>()) {
        summary.push("failed_invariant", inv.name);
    }
    summary.write(&dir)?;
    outcome.map(|()| summary)
}

fn create(dir: &Path, name: &str) -> anyhow::Result<BufWriter<File>> {
    let path = dir.join(name);
    Ok(BufWriter::new(
        File::create(&path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_crossings_header(dir: &Path) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(create(dir, "crossings.csv")?);
    w.write_record(["time", "value"])?;
    w.flush()?;
    Ok(())
}

fn write_blocks<W: Write>(writer: W, blocks: &[Vector]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["frame", "component", "value"])?;
    for (t, x) in blocks.iter().enumerate() {
        for (i, v) in x.iter().enumerate() {
            w.write_record([t.to_string(), i.to_string(), format_f64(*v)])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_history<W: Write>(writer: W, history: &[Vec<Vector>]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["append", "frame", "component", "value"])?;
    for (k, snap) in history.iter().enumerate() {
        for (t, x) in snap.iter().enumerate() {
            for (i, v) in x.iter().enumerate() {
                w.write_record([k.to_string(), t.to_string(), i.to_string(), format_f64(*v)])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn write_updates<W: Write>(writer: W, updates: &[UpdateRecord]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["append_T", "lag", "magnitude"])?;
    for r in updates {
        w.write_record([r.append.to_string(), r.lag.to_string(), format_f64(r.magnitude)])?;
    }
    w.flush()?;
    Ok(())
}

fn write_sweep(dir: &Path, buffers: &[usize], errors: &[f64]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(create(dir, "sweep.csv")?);
    w.write_record(["buffer", "max_error"])?;
    for (b, e) in buffers.iter().zip(errors) {
        w.write_record([b.to_string(), format_f64(*e)])?;
    }
    w.flush()?;
    Ok(())
}

/// Largest per-frame `‖a_t − b_t‖ / ‖b_t‖` (absolute where `b_t = 0`).
pub fn max_frame_relative(a: &[Vector], b: &[Vector]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = (x - y).norm();
            let s = y.norm();
            if s > 0.0 {
                d / s
            } else {
                d
            }
        })
        .fold(0.0, f64::max)
}

fn max_frame_abs(a: &[Vector], b: &[Vector]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

fn run_ls(sc: &Scenario, dir: &Path, n: usize, gamma: f64, batches: &[LsBatch], summary: &mut Summary) -> anyhow::Result<()> {
    let mut main = LsStream::new(n, gamma, sc.buffer.depth())?.with_archive_sink(create(dir, "archive.csv")?)?;
    let mut reference = LsStream::new(n, gamma, Depth::Full)?.with_history();
    for b in batches {
        main.ingest(b)?;
        reference.ingest(b)?;
    }
    main.finish()?;
    reference.finish()?;
    reference.write_decay_log(create(dir, "decay.csv")?)?;
    write_history(create(dir, "history.csv")?, reference.history().unwrap_or(&[]))?;
    if batches.is_empty() {
        return Ok(());
    }

    let estimates = main.estimates();
    let full = reference.estimates();
    let dense = solve_dense(&normal_equations(n, gamma, batches)?)?;
    let oracle_err = max_frame_relative(&full, &dense);
    summary.push("oracle_max_rel_err", oracle_err);
    ensure(oracle_err < ORACLE_TOL, "oracle-equivalence", || {
        format!("full-buffer estimates differ from the dense solve by {oracle_err:e} (tolerance {ORACLE_TOL:e})")
    })?;
    let report = reference.conditioning();
    if let Some(r) = &report {
        summary.push("kappa", r.kappa);
        summary.push("delta", r.delta);
        summary.push("theta", r.theta);
        summary.push("eps_star", r.eps_star);
        summary.push("rho", r.rho);
        summary.push("dominant", r.dominant);
    }
    if sc.buffer == Buffer::Full {
        let err = max_frame_relative(&estimates, &dense);
        ensure(err < ORACLE_TOL, "oracle-equivalence", || {
            format!("streamed archive differs from the dense solve by {err:e}")
        })?;
    } else {
        let trunc = truncation_error(&full, &estimates)?.into_iter().fold(0.0, f64::max);
        summary.push("truncation_max_err", trunc);
    }
    summary.push("peak_live_frames", main.peak_live());
    if let Ok(decay) = reference.decay_profile() {
        summary.push("decay_fitted_ratio", decay.fitted_ratio);
        summary.push("decay_bound_ratio", decay.bound_ratio);
    }

    if !sc.buffer_sweep.is_empty() {
        let sweep = truncation_sweep(n, gamma, batches, &sc.buffer_sweep)?;
        write_sweep(dir, &sweep.buffers, &sweep.max_errors)?;
        summary.push("sweep_slope", sweep.slope);
        let bound = report.filter(|r| r.dominant).and_then(|r| r.rho).map(f64::ln);
        summary.push("sweep_slope_bound", bound);
        if let (Some(slope), Some(bound)) = (sweep.slope, bound) {
            ensure(slope <= bound + SLACK, "sweep-slope", || {
                format!("slope {slope} exceeds ln(rho) + {SLACK} = {}", bound + SLACK)
            })?;
        }
    }
    Ok(())
}

/// Barrier schedule and solver settings of an intensity scenario at buffer `buffer`.
pub fn nhpp_noa_config(sc: &Scenario, buffer: Buffer) -> NoaConfig {
    let width = match buffer {
        Buffer::Full => sc.nhpp.frames + 1,
        Buffer::Frames(b) => b,
    };
    NoaConfig {
        eps0: sc.eps0,
        barrier: Some(BarrierSchedule::for_window(width, sc.nhpp.n)),
        ..NoaConfig::with_buffer(buffer.depth())
    }
}

fn barrier_weight(cfg: &NoaConfig) -> f64 {
    cfg.barrier.map_or(0.0, |b| b.final_weight())
}

/// Batch minimizers keyed by barrier weight.
struct BatchCache<'a> {
    losses: &'a [SharedLoss],
    solved: Vec<(f64, AggregateObjective, Vec<Vector>)>,
}

impl<'a> BatchCache<'a> {
    fn new(losses: &'a [SharedLoss]) -> Self {
        Self {
            losses,
            solved: Vec::new(),
        }
    }

    fn get(&mut self, weight: f64) -> anyhow::Result<(&AggregateObjective, &[Vector])> {
        if let Some(i) = self.solved.iter().position(|(w, _, _)| *w == weight) {
            let (_, obj, x) = &self.solved[i];
            return Ok((obj, x));
        }
        let obj = AggregateObjective::with_barrier(self.losses.to_vec(), weight)?;
        let x = obj.batch_minimize(None, BATCH_TOL_SQ)?.y;
        debug!("batch oracle at barrier weight {weight:e} solved");
        self.solved.push((weight, obj, x));
        let (_, obj, x) = self.solved.last().expect("just pushed");
        Ok((obj, x))
    }
}

/// Rate constants of an intensity instance, measured at its batch minimizer.
pub fn nhpp_rate_report(sc: &Scenario, inst: &NhppInstance) -> anyhow::Result<ConvexRateReport> {
    let weight = barrier_weight(&nhpp_noa_config(sc, sc.buffer));
    let mut cache = BatchCache::new(&inst.losses);
    let (obj, x) = cache.get(weight)?;
    Ok(rate_report(obj, &obj.isolated_minimizers()?, &[x.to_vec()])?)
}

fn run_nhpp(sc: &Scenario, seed: u64, dir: &Path, summary: &mut Summary) -> anyhow::Result<()> {
    if sc.nhpp.frames == 0 {
        let mut w = csv::Writer::from_writer(create(dir, "events.csv")?);
        w.write_record(["time", "value"])?;
        w.flush()?;
        write_blocks(create(dir, "archive.csv")?, &[])?;
        write_updates(create(dir, "decay.csv")?, &[])?;
        let mut w = csv::Writer::from_writer(create(dir, "trace.csv")?);
        w.write_record(["time_step", "newton_iter", "grad_norm", "step_norm", "damping"])?;
        w.flush()?;
        return Ok(());
    }
    let inst = nhpp_instance(&sc.nhpp_config(seed))?;
    inst.write_events_csv(create(dir, "events.csv")?)?;
    summary.push("events", inst.events.len());
    summary.push("events_per_frame", inst.events_per_frame());

    let cfg = nhpp_noa_config(sc, sc.buffer);
    let (online, state) = run_noa(cfg, &inst.losses)?;
    write_blocks(create(dir, "archive.csv")?, &online)?;
    write_updates(create(dir, "decay.csv")?, state.updates())?;
    state.write_trace(create(dir, "trace.csv")?)?;
    let iters: Vec<f64> = state.steps().iter().map(|s| s.iterations as f64).collect();
    summary.push("newton_iters_max", iters.iter().copied().fold(0.0, f64::max));
    summary.push("newton_iters_median", fit::median(&iters));

    let lowest = online.iter().flat_map(|x| x.iter().copied()).fold(f64::INFINITY, f64::min);
    summary.push("min_coefficient", lowest);
    ensure(lowest >= 0.0, "nonnegativity", || format!("coefficient {lowest:e} is negative"))?;

    let mut cache = BatchCache::new(&inst.losses);
    let (obj, batch) = cache.get(barrier_weight(&cfg))?;
    let report = rate_report(obj, &obj.isolated_minimizers()?, &[batch.to_vec()])?;
    let basis = inst.config.basis();
    let (lo, hi) = inst.config.horizon();
    let l2 = intensity_relative_l2(&basis, &online, batch, lo, hi);
    summary.push("batch_max_frame_err", max_frame_abs(&online, batch));
    summary.push("intensity_rel_l2", l2);
    summary.push("a", report.a);
    summary.push("m_g", report.m_g);
    summary.push("c0", report.c0);
    summary.push("c1", report.c1);
    summary.push("c_b", report.c_b);
    let enforced = match sc.buffer {
        Buffer::Full => true,
        Buffer::Frames(b) => b >= RECOVERY_MIN_BUFFER,
    };
    if enforced {
        ensure(l2 < RECOVERY_TOL, "nhpp-recovery", || {
            format!("online intensity differs from the batch oracle by {l2:e} (tolerance {RECOVERY_TOL:e})")
        })?;
    }

    if !sc.buffer_sweep.is_empty() {
        let mut errors = Vec::with_capacity(sc.buffer_sweep.len());
        for &b in &sc.buffer_sweep {
            let cfg = nhpp_noa_config(sc, Buffer::Frames(b));
            let (x, _) = run_noa(cfg, &inst.losses)?;
            let (_, batch) = cache.get(barrier_weight(&cfg))?;
            let err = max_frame_abs(&x, batch);
            debug!("buffer {b}: max frame error {err:e}");
            errors.push(err);
        }
        write_sweep(dir, &sc.buffer_sweep, &errors)?;
        let xs: Vec<f64> = sc.buffer_sweep.iter().map(|&b| b as f64).collect();
        let slope = fit::log_slope(&xs, &errors);
        let bound = report.a.ln();
        summary.push("sweep_slope", slope);
        summary.push("sweep_slope_bound", bound);
        if let Some(slope) = slope {
            ensure(slope <= bound + SLACK, "sweep-slope", || {
                format!("slope {slope} exceeds ln(a) + {SLACK} = {}", bound + SLACK)
            })?;
        }
    }
    Ok(())
}

/// Conditioning constants of one seed of the scenario.
pub fn conditioning(sc: &Scenario, seed: u64) -> anyhow::Result<Summary> {
    let mut s = Summary::default();
    s.push("kind", sc.kind.name());
    s.push("seed", seed);
    let (n, gamma, batches) = match sc.kind {
        Kind::NhppNoa => {
            let inst = nhpp_instance(&sc.nhpp_config(seed))?;
            let r = nhpp_rate_report(sc, &inst)?;
            push_convex(&mut s, &r, true);
            return Ok(s);
        }
        Kind::SyntheticLs => {
            let cfg = sc.synthetic_config();
            (cfg.n, cfg.gamma, ls_stream(&cfg, seed)?)
        }
        Kind::LotLs => {
            let cfg = sc.lot_config(seed);
            (cfg.n, cfg.gamma, generate_lot_stream(&cfg)?.batches)
        }
    };
    anyhow::ensure!(!batches.is_empty(), "conditioning needs at least one frame");
    let mut stream = LsStream::new(n, gamma, Depth::Frames(1))?;
    for b in &batches {
        stream.ingest(b)?;
    }
    let r = stream.conditioning().context("no conditioning report available")?;
    s.push("kappa", r.kappa);
    s.push("delta", r.delta);
    s.push("theta", r.theta);
    s.push("eps_star", r.eps_star);
    s.push("rho", r.rho);
    if batches.len() >= 2 {
        let obj = AggregateObjective::new(ls_losses(&batches, gamma)?)?;
        let x = solve_dense(&normal_equations(n, gamma, &batches)?)?;
        let cr = rate_report(&obj, &obj.isolated_minimizers()?, &[x])?;
        push_convex(&mut s, &cr, false);
    }
    s.push("dominant", r.dominant);
    Ok(s)
}

fn push_convex(s: &mut Summary, r: &ConvexRateReport, with_base: bool) {
    if with_base {
        s.push("kappa", r.kappa);
        s.push("delta", r.delta);
        s.push("theta", r.theta);
        s.push("eps_star", r.eps_star);
        s.push("rho", r.rho);
    }
    s.push("a", r.a);
    s.push("m_g", r.m_g);
    s.push("c0", r.c0);
    s.push("c1", r.c1);
    s.push("c_b", r.c_b);
    if with_base {
        s.push("dominant", r.dominant);
    }
}
