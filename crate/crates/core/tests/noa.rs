mod common;

use std::sync::Arc;

use common::*;
use streamopt::blocktridiag::{conditioning_report, Depth};
use streamopt::convex_frames::*;
use streamopt::dense::{self, Mat, Vector};
use streamopt::fit;
use streamopt::noa::*;
use streamopt::stream_ls::LsStream;
use streamopt::testbeds::nhpp::{nhpp_instance, NhppInstance, SplineNhppConfig};
use streamopt::testbeds::synthetic::*;
use streamopt::Error;

fn run_with_history(cfg: NoaConfig, losses: &[SharedLoss]) -> NoaState {
    let mut s = NoaState::new(cfg).unwrap().with_history();
    for f in losses {
        s.advance(f.clone()).unwrap();
    }
    s
}

fn nhpp(seed: u64, frames: usize) -> NhppInstance {
    nhpp_instance(&SplineNhppConfig {
        frames,
        ..SplineNhppConfig::with_seed(seed)
    })
    .unwrap()
}

fn barrier_config(buffer: usize, n: usize) -> NoaConfig {
    let mut cfg = NoaConfig::with_buffer(Depth::Frames(buffer));
    cfg.barrier = Some(BarrierSchedule::for_window(buffer, n));
    cfg
}

#[test]
fn quadratic_stream_takes_one_newton_step_and_matches_stream_ls() {
    let cfg = SyntheticLsConfig::new(3, 7, 15, 0.1);
    let (batches, _) = dominant_ls_stream(&cfg, 21).unwrap();
    let losses = ls_losses(&batches, 0.1).unwrap();
    let mut ls = LsStream::new(3, 0.1, Depth::Full).unwrap().with_history();
    for b in &batches {
        ls.ingest(b).unwrap();
    }
    let ls_hist = ls.history().unwrap();
    for buffer in [Depth::Full, Depth::Frames(6)] {
        let s = run_with_history(NoaConfig::with_buffer(buffer), &losses);
        // The first window is the isolated minimizer of f_1, already optimal.
        assert!(s.steps()[0].iterations <= 1);
        for step in &s.steps()[1..] {
            assert_eq!(step.iterations, 1);
            assert_eq!(step.trace[0].damping, 1.0);
        }
        for (k, win) in s.history().unwrap().iter().enumerate() {
            if win.len() < k + 2 {
                continue;
            }
            assert!(max_rel(win, &ls_hist[k + 1]) < 1e-9, "{buffer:?} step {k}");
        }
    }
}

#[test]
fn single_frame_reaches_target() {
    let n = 2;
    let mut p = Mat::zeros(2 * n, n);
    p.view_mut((0, 0), (n, n)).fill_with_identity();
    let mut c = Mat::zeros(2 * n, n);
    c.view_mut((n, 0), (n, n)).fill_with_identity();
    let y = Vector::from_vec(vec![0.0, 0.0, 0.7, -3.0]);
    let f: SharedLoss = Arc::new(QuadraticFrame::new(p, c, y, 0.0, 0.0).unwrap());
    let mut s = NoaState::new(NoaConfig::with_buffer(Depth::Frames(3))).unwrap();
    assert!(s.advance(f).unwrap().iterations <= 1);
    assert!((&s.window()[1] - Vector::from_vec(vec![0.7, -3.0])).norm() < 1e-12);
}

#[test]
fn newton_step_solves_the_window_system() {
    let losses = softplus_losses(3, 5, 4, 0.5, 1.0, 22).unwrap();
    let mut r = rng(23);
    let boundary = gaussian_vec(&mut r, 3);
    let w = WindowObjective::new(&losses, Some(&boundary), 0.0).unwrap();
    let y: Vec<Vector> = (0..4).map(|_| gaussian_vec(&mut r, 3)).collect();
    let st = w.newton_step(&y).unwrap();
    let sys = w.newton_system(&y).unwrap();
    let fs = sys.multiply(&st.step).unwrap();
    let res: f64 = fs.iter().zip(&st.gradient).map(|(a, g)| (a + g).norm_squared()).sum::<f64>().sqrt();
    let gn = dense::stack(&st.gradient).norm();
    assert!(res < 1e-10 * gn, "{:e}", res / gn);
}

#[test]
fn zero_gradient_gives_zero_step() {
    let f: SharedLoss =
        Arc::new(QuadraticFrame::new(gaussian(&mut rng(1), 4, 2), gaussian(&mut rng(2), 4, 2), Vector::zeros(4), 0.1, 0.1).unwrap());
    let losses = vec![f.clone(), f];
    let w = WindowObjective::new(&losses, None, 0.0).unwrap();
    let st = w.newton_step(&vec![Vector::zeros(2); 3]).unwrap();
    assert!(st.step.iter().all(|s| s.iter().all(|v| *v == 0.0)));
}

#[test]
fn two_scalar_frames_match_dense_solve() {
    // f_j(u, v) = (p_j u + c_j v − d_j)² + r_j v²
    let (p, c, d, rr) = ([0.4, -0.3], [1.2, 0.9], [0.5, -1.0], [0.1, 0.2]);
    let losses: Vec<SharedLoss> = (0..2)
        .map(|j| {
            Arc::new(
                QuadraticFrame::new(
                    Mat::from_element(1, 1, p[j]),
                    Mat::from_element(1, 1, c[j]),
                    Vector::from_element(1, d[j]),
                    0.0,
                    rr[j],
                )
                .unwrap(),
            ) as SharedLoss
        })
        .collect();
    let b = 0.8;
    let (y1, y2) = (0.3, -0.6);
    let boundary = Vector::from_element(1, b);
    let w = WindowObjective::new(&losses, Some(&boundary), 0.0).unwrap();
    let st = w.newton_step(&[Vector::from_element(1, y1), Vector::from_element(1, y2)]).unwrap();

    let r1 = p[0] * b + c[0] * y1 - d[0];
    let r2 = p[1] * y1 + c[1] * y2 - d[1];
    let g = [2.0 * (c[0] * r1 + rr[0] * y1) + 2.0 * p[1] * r2, 2.0 * (c[1] * r2 + rr[1] * y2)];
    let h11 = 2.0 * (c[0] * c[0] + rr[0]) + 2.0 * p[1] * p[1];
    let h12 = 2.0 * p[1] * c[1];
    let h22 = 2.0 * (c[1] * c[1] + rr[1]);
    let det = h11 * h22 - h12 * h12;
    let s1 = -(h22 * g[0] - h12 * g[1]) / det;
    let s2 = -(h11 * g[1] - h12 * g[0]) / det;
    assert!((st.step[0][0] - s1).abs() < 1e-13 && (st.step[1][0] - s2).abs() < 1e-13);
}

#[test]
fn newton_step_cost_is_linear_in_window_length() {
    let losses = softplus_losses(3, 5, 32, 0.5, 1.0, 24).unwrap();
    let mut r = rng(25);
    let boundary = gaussian_vec(&mut r, 3);
    for b in [1, 4, 8, 16, 32] {
        let w = WindowObjective::new(&losses[..b], Some(&boundary), 0.0).unwrap();
        let y: Vec<Vector> = (0..b).map(|_| gaussian_vec(&mut r, 3)).collect();
        let ops = w.newton_step(&y).unwrap().block_ops;
        assert!(ops <= 3 * b, "B = {b}: {ops}");
    }
}

#[test]
fn non_convergence_carries_trace() {
    let losses = softplus_losses(3, 5, 6, 0.1, 1.0, 26).unwrap();
    let mut cfg = NoaConfig::with_buffer(Depth::Frames(4));
    cfg.max_newton_iters = 1;
    cfg.init = FrameInit::TailMin;
    let mut s = NoaState::new(cfg).unwrap();
    let mut err = None;
    for f in &losses {
        if let Err(e) = s.advance(f.clone()) {
            err = Some(e);
            break;
        }
    }
    match err {
        Some(Error::NonConvergence { iterations, trace }) => {
            assert_eq!(iterations, 1);
            assert_eq!(trace.len(), 2);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn window_gradient_is_below_tolerance_after_each_step() {
    let losses = softplus_losses(2, 4, 20, 0.5, 1.0, 27).unwrap();
    let mut s = NoaState::new(NoaConfig::with_buffer(Depth::Frames(5))).unwrap();
    for f in &losses {
        let rec = s.advance(f.clone()).unwrap().clone();
        assert!(rec.final_grad_norm * rec.final_grad_norm < 1e-16);
        assert!(s.window().len() <= 5);
        let start = s.window_start();
        let lo = (start as isize - 1 + usize::from(s.boundary().is_none()) as isize) as usize;
        let w = WindowObjective::new(&losses[lo..s.time()], s.boundary(), 0.0).unwrap();
        let g: f64 = w.gradient(s.window()).unwrap().iter().map(|b| b.norm_squared()).sum();
        assert!(g < 1e-16);
    }
}

#[test]
fn barrier_recovers_interior_optimum() {
    let cfg = SyntheticLsConfig::new(2, 6, 8, 0.1);
    let batches = ls_stream(&cfg, 28).unwrap();
    // Targets chosen so the unconstrained optimum is strictly positive.
    let truth = Vector::from_vec(vec![1.5, 2.0]);
    let batches: Vec<_> = batches
        .into_iter()
        .map(|mut b| {
            b.y = &b.a * &truth + b.b.as_ref().map_or(Vector::zeros(b.rows()), |m| m * &truth);
            b
        })
        .collect();
    let losses = ls_losses(&batches, 0.0).unwrap();
    let (free, _) = run_noa(NoaConfig::with_buffer(Depth::Frames(4)), &losses).unwrap();
    assert!(free.iter().all(|x| x.iter().all(|v| *v > 0.1)));
    let (constrained, _) = run_noa(barrier_config(4, 2), &losses).unwrap();
    assert!(max_block_diff(&constrained, &free) < 1e-5);
}

#[test]
fn barrier_reaches_boundary_optimum() {
    // (x_0 + 1)² + (x_1 + 1)² subject to x ≥ 0.
    let f: SharedLoss = Arc::new(
        QuadraticFrame::new(
            Mat::from_column_slice(2, 1, &[1.0, 0.0]),
            Mat::from_column_slice(2, 1, &[0.0, 1.0]),
            Vector::from_vec(vec![-1.0, -1.0]),
            0.0,
            0.0,
        )
        .unwrap(),
    );
    let (x, _) = run_noa(barrier_config(2, 1), &[f.clone(), f.clone(), f]).unwrap();
    for v in x {
        assert!(v[0] > 0.0 && v[0] < 1e-5, "{}", v[0]);
    }
}

#[test]
fn nhpp_coefficients_stay_positive() {
    let inst = nhpp(30, 20);
    let (x, _) = run_noa(barrier_config(6, 8), &inst.losses).unwrap();
    assert_eq!(x.len(), 21);
    assert!(x.iter().all(|b| b.iter().all(|v| *v > 0.0)));
}

#[test]
fn factorization_reuse_gives_identical_results() {
    let losses = softplus_losses(3, 5, 12, 0.5, 1.0, 31).unwrap();
    let inst = nhpp(31, 10);
    for (ls, cfg) in [
        (&losses, NoaConfig::with_buffer(Depth::Full)),
        (&losses, NoaConfig::with_buffer(Depth::Frames(4))),
        (&inst.losses, barrier_config(6, 8)),
        (&inst.losses, {
            let mut c = barrier_config(6, 8);
            c.buffer = Depth::Full;
            c
        }),
    ] {
        let (off, _) = run_noa(cfg, ls).unwrap();
        let (on, _) = run_noa(
            NoaConfig {
                reuse_factorization: true,
                ..cfg
            },
            ls,
        )
        .unwrap();
        assert_eq!(off, on);
    }
}

#[test]
fn local_quadratic_convergence() {
    // Cold start far from the solution so that several Newton steps are needed.
    let losses = softplus_losses(3, 8, 6, 0.05, 1.0, 32).unwrap();
    let w = WindowObjective::new(&losses, None, 0.0).unwrap();
    let y0 = vec![Vector::from_element(3, 6.0); 7];
    let opts = NewtonOptions {
        tol_sq: 1e-28,
        ..NewtonOptions::default()
    };
    let out = w.minimize(y0, &opts, None, false).unwrap();
    let mut g: Vec<f64> = out.trace.iter().map(|t| t.grad_norm).collect();
    g.push(out.final_grad_norm);
    assert!(g.len() >= 5, "{g:?}");
    let tail = &g[g.len() - 4..];
    let c = tail[1] / (tail[0] * tail[0]);
    for k in 1..3 {
        assert!(tail[k + 1] <= 2.0 * c.max(1.0) * tail[k] * tail[k] + 1e-14, "{g:?}");
    }
    assert!(tail[3] < 1e-10 * tail[0]);
}

#[test]
fn boundary_perturbation_contracts() {
    let mut r = rng(33);
    for seed in 0..10 {
        let losses = softplus_losses(3, 6, 4, 1.0, 0.3, 100 + seed).unwrap();
        let z = gaussian_vec(&mut r, 3);
        let dz = gaussian_vec(&mut r, 3) * 0.1;
        let z2 = &z + &dz;
        let opts = NewtonOptions {
            tol_sq: 1e-28,
            ..NewtonOptions::default()
        };
        let w1 = WindowObjective::new(&losses, Some(&z), 0.0).unwrap();
        let y1 = w1.minimize(vec![Vector::zeros(3); 4], &opts, None, false).unwrap().y;
        let w2 = WindowObjective::new(&losses, Some(&z2), 0.0).unwrap();
        let y2 = w2.minimize(y1.clone(), &opts, None, false).unwrap().y;
        let rep = conditioning_report(&w1.newton_system(&y1).unwrap());
        assert!(rep.dominant);
        let tail = (&y1[3] - &y2[3]).norm();
        assert!(tail <= rep.theta / (1.0 - rep.delta) * dz.norm() + 1e-8, "{tail:e}");
    }
}

#[test]
fn nhpp_newton_iterations_after_warm_start() {
    let mut counts = Vec::new();
    for seed in 0..3 {
        let (_, s) = run_noa(barrier_config(6, 8), &nhpp(seed, 40).losses).unwrap();
        counts.extend(s.steps().iter().skip(1).map(|s| s.iterations));
    }
    let within = counts.iter().filter(|&&k| k <= 8).count();
    let max = counts.iter().max().unwrap();
    println!("NHPP B=6 Newton iterations: {within}/{} steps ≤ 8, max {max}", counts.len());
    assert!(within as f64 >= 0.95 * counts.len() as f64);
}

#[test]
fn nhpp_buffer_sweep_decays() {
    let inst = nhpp(34, 40);
    let schedule = BarrierSchedule::for_window(8, 8);
    let obj = AggregateObjective::with_barrier(inst.losses.clone(), schedule.final_weight()).unwrap();
    let batch = obj.batch_minimize(None, BATCH_TOL_SQ).unwrap().y;
    let iso = obj.isolated_minimizers().unwrap();
    let rep = rate_report(&obj, &iso, std::slice::from_ref(&batch)).unwrap();
    let mut errs = Vec::new();
    for b in [2usize, 4, 6, 8] {
        let mut cfg = NoaConfig::with_buffer(Depth::Frames(b));
        cfg.barrier = Some(schedule);
        let (x, _) = run_noa(cfg, &inst.losses).unwrap();
        errs.push(max_block_diff(&x, &batch));
    }
    let slope = fit::log_slope(&[2.0, 4.0, 6.0, 8.0], &errs).unwrap();
    assert!(slope <= rep.a.ln() + 0.05, "{slope} {errs:?}");
    assert!(errs[2] < 1e-6);
}

#[test]
fn trace_csv_layout() {
    let losses = softplus_losses(2, 4, 5, 0.5, 1.0, 35).unwrap();
    let (_, s) = run_noa(NoaConfig::with_buffer(Depth::Frames(3)), &losses).unwrap();
    let mut buf = Vec::new();
    s.write_trace(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "time_step,newton_iter,grad_norm,step_norm,damping");
    let rows: Vec<&str> = lines.collect();
    let expected: usize = s.steps().iter().map(|st| st.iterations + 1).sum();
    assert_eq!(rows.len(), expected);
    for row in rows {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f.len(), 5);
        assert!(f[2].parse::<f64>().is_ok());
    }
}

#[test]
fn infeasible_and_invalid_inputs() {
    assert!(NoaState::new(NoaConfig {
        eps0: -1.0,
        ..NoaConfig::default()
    })
    .is_err());
    let mut s = NoaState::new(NoaConfig::default()).unwrap();
    s.advance(softplus_losses(2, 4, 1, 0.5, 1.0, 1).unwrap()[0].clone()).unwrap();
    assert!(matches!(
        s.advance(softplus_losses(3, 4, 1, 0.5, 1.0, 1).unwrap()[0].clone()),
        Err(Error::Dimension(_))
    ));
    let f: SharedLoss = Arc::new(QuadraticFrame::new(Mat::zeros(1, 1), Mat::zeros(1, 1), Vector::zeros(1), 1.0, 1.0).unwrap());
    let losses = [f];
    let w = WindowObjective::new(&losses, None, 1e-3).unwrap();
    let bad = vec![Vector::from_element(1, -1.0), Vector::from_element(1, 1.0)];
    assert!(matches!(
        w.minimize(bad, &NewtonOptions::default(), None, false),
        Err(Error::Infeasible(_))
    ));
}
