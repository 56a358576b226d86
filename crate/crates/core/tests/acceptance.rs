//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::f64::consts::TAU;
use std::path::Path;
use std::time::Instant;

use lfr_core::boucwen::{self, BoucWenParams, BoucWenTrajectory, DatasetKind, SimulationOptions};
use lfr_core::init::{init_nllfr_detailed, InitSpec, StateTrajectory};
use lfr_core::lm::{lm_minimize, FitReport, LmOptions, Termination};
use lfr_core::lti::{self, estimate_bla, BlaOptions, LtiStateSpace};
use lfr_core::metrics::{evaluate_model, rmse, EvalMode};
use lfr_core::nllfr::{output_jacobian, Activation, NeuralNet, NlLfrModel, ParamLayout};
use lfr_core::pipeline::{
    run_pipeline, DatasetSource, ExperimentConfig, ExternalRecord, ExternalSource, ExternalTest, MetricsTable,
    ModelSettings, Structure,
};
use lfr_core::signals::{excited_bins, gen_multisine, Excitation, MultisineSpec, SignalRecord};
use lfr_core::{util, Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------- 1

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| scale * rng.random_range(-1.0..1.0))
}

fn random_model(rng: &mut ChaCha8Rng) -> NlLfrModel {
    let n_x = rng.random_range(1..=3);
    let (n_u, n_y, n_z, n_w, n_n) = (
        rng.random_range(1..=2),
        rng.random_range(1..=2),
        rng.random_range(1..=2),
        rng.random_range(1..=2),
        rng.random_range(1..=2),
    );
    let mut a = uniform(rng, n_x, n_x, 1.0);
    let rho = util::spectral_radius(&a);
    if rho > 0.0 {
        a *= rng.random_range(0.3..0.9) / rho;
    }
    let activation = if rng.random_bool(0.5) { Activation::Tanh } else { Activation::RadialBasis };
    NlLfrModel {
        a,
        b_u: uniform(rng, n_x, n_u, 1.0),
        b_w: uniform(rng, n_x, n_w, 0.2),
        c_z: uniform(rng, n_z, n_x, 1.0),
        c_y: uniform(rng, n_y, n_x, 1.0),
        d_zu: uniform(rng, n_z, n_u, 1.0),
        d_yu: uniform(rng, n_y, n_u, 1.0),
        d_yw: uniform(rng, n_y, n_w, 1.0),
        net: NeuralNet {
            w_z: uniform(rng, n_n, n_z, 1.0),
            b_z: DVector::from_fn(n_n, |_, _| rng.random_range(-1.0..1.0)),
            w_w: uniform(rng, n_w, n_n, 1.0),
            b_w: DVector::from_fn(n_w, |_, _| rng.random_range(-1.0..1.0)),
            activation,
        },
    }
}

/// Central differences of the simulated output, sample-major like the
/// exact Jacobian.
fn central_differences(model: &NlLfrModel, u: &DMatrix<f64>, x0: &DVector<f64>) -> DMatrix<f64> {
    let layout = ParamLayout::new(model.dims(), true);
    let theta = layout.pack(model, Some(x0)).unwrap();
    let act = model.net.activation;
    let output = |t: &DVector<f64>| {
        let (m, x) = layout.unpack(t, act).unwrap();
        let y = m.simulate(u, &x.unwrap()).unwrap().y;
        DVector::from_iterator(y.len(), y.transpose().iter().cloned())
    };
    let mut jac = DMatrix::zeros(u.nrows() * model.dims().n_y, theta.len());
    for j in 0..theta.len() {
        let h = 1e-6 * theta[j].abs().max(1.0);
        let (mut tp, mut tm) = (theta.clone(), theta.clone());
        tp[j] += h;
        tm[j] -= h;
        jac.set_column(j, &((output(&tp) - output(&tm)) / (2.0 * h)));
    }
    jac
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let model = random_model(&mut rng);
        let d = model.dims();
        let u = uniform(&mut rng, 50, d.n_u, 1.0);
        let x0 = DVector::from_fn(d.n_x, |_, _| rng.random_range(-0.5..0.5));
        let exact = output_jacobian(&model, &u, &x0, true).unwrap();
        let fd = central_differences(&model, &u, &x0);
        for j in 0..exact.ncols() {
            let (e, f) = (exact.column(j), fd.column(j));
            let scale = e.norm().max(f.norm());
            if scale > 0.0 {
                worst = worst.max((e - f).norm() / scale);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-6 && secs < 60.0,
        format!("max relative column error {worst:.2e} over 50 models, {secs:.1} s"),
    )
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let est = boucwen::make_boucwen_dataset(1, boucwen::MULTISINE_AMPLITUDE_RMS, DatasetKind::Multisine).unwrap();
    let bla = estimate_bla(&est, &BlaOptions { n_x: 3, ..BlaOptions::default() }).unwrap();
    let spec = InitSpec {
        n_z: 2,
        n_w: 1,
        n_n: 15,
        seed: 0,
        trajectory: StateTrajectory::PeriodicSteadyState,
        ..InitSpec::default()
    };
    let u = est.u();
    let init = init_nllfr_detailed(&bla.model, u, &spec).unwrap();
    let x0 = DVector::zeros(3);
    let y = est.y().unwrap();
    let y_init = init.model.simulate(u, &x0).unwrap().y;
    let (y_bla, _) = lti::simulate_lti(&init.normalized_bla, u, &x0).unwrap();
    let r_init = rmse(y, &y_init).unwrap()[0];
    let r_bla = rmse(y, &y_bla).unwrap()[0];
    let rel = (r_init - r_bla).abs() / r_bla;
    outcome(
        rel < 1e-12,
        format!("RMSE initial {r_init:.6e}, normalized BLA {r_bla:.6e}, relative difference {rel:.1e}"),
    )
}

// ---------------------------------------------------------------- 3

fn synthetic_truth() -> NlLfrModel {
    NlLfrModel {
        a: DMatrix::from_row_slice(2, 2, &[0.8, 0.25, -0.25, 0.8]),
        b_u: DMatrix::from_row_slice(2, 1, &[1.0, 0.3]),
        b_w: DMatrix::from_row_slice(2, 1, &[0.4, -0.3]),
        c_z: DMatrix::from_row_slice(1, 2, &[0.8, 0.4]),
        c_y: DMatrix::from_row_slice(1, 2, &[1.0, -0.2]),
        d_zu: DMatrix::from_element(1, 1, 0.1),
        d_yu: DMatrix::zeros(1, 1),
        d_yw: DMatrix::from_element(1, 1, 0.5),
        net: NeuralNet {
            w_z: DMatrix::from_element(1, 1, 1.5),
            b_z: DVector::from_element(1, 0.2),
            w_w: DMatrix::from_element(1, 1, 1.0),
            b_w: DVector::zeros(1),
            activation: Activation::Tanh,
        },
    }
}

/// Steady-state period of the truth's response to a fresh multisine.
fn synthetic_record(truth: &NlLfrModel, seed: u64) -> SignalRecord {
    let n = 4096;
    let force = gen_multisine(&MultisineSpec {
        n_samples_per_period: n,
        fs: 1.0,
        f_min: 0.0,
        f_max: 0.4,
        amplitude_rms: 1.0,
        seed,
    })
    .unwrap();
    let mut u2 = DMatrix::zeros(2 * n, 1);
    u2.rows_mut(0, n).copy_from(force.u());
    u2.rows_mut(n, n).copy_from(force.u());
    let y2 = truth.simulate(&u2, &DVector::zeros(2)).unwrap().y;
    force.with_output(y2.rows(n, n).into_owned()).unwrap()
}

fn criterion_3(dir: &Path) -> (Outcome, Vec<FitReport>) {
    let start = Instant::now();
    let truth = synthetic_truth();
    let est_path = dir.join("synthetic_estimation.csv");
    let test_path = dir.join("synthetic_test.csv");
    synthetic_record(&truth, 11).write_csv(&est_path).unwrap();
    let test = synthetic_record(&truth, 12);
    test.write_csv(&test_path).unwrap();
    let cfg = ExperimentConfig {
        name: "synthetic".into(),
        dataset: DatasetSource::External(ExternalSource {
            n_inputs: 1,
            n_outputs: 1,
            estimation: ExternalRecord { path: est_path, meta: None },
            tests: vec![ExternalTest {
                name: "multisine".into(),
                record: ExternalRecord { path: test_path, meta: None },
                mode: EvalMode::SteadyState,
            }],
        }),
        bla: BlaOptions { n_x: 2, ..BlaOptions::default() },
        model: ModelSettings {
            structures: vec![Structure { n_z: 1, n_w: 1 }],
            n_n: 10,
            restarts: 5,
            ..ModelSettings::default()
        },
        lm: LmOptions { max_iter: 200, ..LmOptions::default() },
        ..ExperimentConfig::default()
    };
    let out = dir.join("synthetic_run");
    let table = match run_pipeline(&cfg, &out) {
        Ok(t) => t,
        Err(e) => return (outcome(false, format!("pipeline failed: {e}")), Vec::new()),
    };
    let col = table.column("multisine").unwrap();
    let best = table
        .rows
        .iter()
        .filter(|r| r.model == "nllfr")
        .map(|r| r.rmse[col])
        .fold(f64::INFINITY, f64::min);
    let selected = table.selected(Structure { n_z: 1, n_w: 1 }).map_or(f64::NAN, |r| r.rmse[col]);
    let y_rms = util::rms(test.y().unwrap().as_slice());
    let secs = start.elapsed().as_secs_f64();
    let reports = read_reports(&out, &cfg);
    (
        outcome(
            best < 0.01 * y_rms && secs < 600.0,
            format!(
                "best test RMSE {best:.3e} = {:.3}% of rms(y) (selected {:.3}%), {secs:.0} s",
                100.0 * best / y_rms,
                100.0 * selected / y_rms
            ),
        ),
        reports,
    )
}

fn read_reports(out: &Path, cfg: &ExperimentConfig) -> Vec<FitReport> {
    let mut reports = Vec::new();
    for s in &cfg.model.structures {
        for seed in cfg.model.seeds() {
            let p = out.join(format!("fits/{}.json", lfr_core::pipeline::tag(*s, seed)));
            if let Ok(r) = util::read_json::<FitReport>(&p) {
                reports.push(r);
            }
        }
    }
    reports
}

// ---------------------------------------------------------------- 4, 5, 6

struct BoucWenRun {
    table: MetricsTable,
    reports: Vec<FitReport>,
    secs: f64,
}

fn boucwen_run(dir: &Path) -> Result<BoucWenRun> {
    let start = Instant::now();
    let cfg = ExperimentConfig {
        model: ModelSettings {
            structures: vec![Structure { n_z: 1, n_w: 1 }, Structure { n_z: 2, n_w: 1 }],
            ..ModelSettings::default()
        },
        ..ExperimentConfig::default()
    };
    let out = dir.join("boucwen_run");
    let table = run_pipeline(&cfg, &out)?;
    Ok(BoucWenRun {
        reports: read_reports(&out, &cfg),
        table,
        secs: start.elapsed().as_secs_f64(),
    })
}

fn rmse_of(table: &MetricsTable, row: &lfr_core::pipeline::MetricsRow, set: &str) -> f64 {
    row.rmse[table.column(set).unwrap()]
}

fn criterion_4(run: &BoucWenRun) -> Outcome {
    let t = &run.table;
    let bla = t.bla().unwrap();
    let (ms, sw) = (rmse_of(t, bla, "multisine"), rmse_of(t, bla, "sweep"));
    let within = |v: f64, target: f64| v <= 2.0 * target && v >= 0.5 * target;
    // Same BLA on a sweep at 40 N rms instead of 40 N peak, for reference.
    let alt = boucwen::make_boucwen_dataset(0, 40.0, DatasetKind::Sweep)
        .and_then(|rec| {
            let est = boucwen::make_boucwen_dataset(1, boucwen::MULTISINE_AMPLITUDE_RMS, DatasetKind::Multisine)?;
            let bla = estimate_bla(&est, &BlaOptions { n_x: 3, ..BlaOptions::default() })?;
            evaluate_model(&bla.model, &rec, EvalMode::Transient { discard_n: 2000 })
        })
        .map_or(f64::NAN, |e| e.rmse[0]);
    outcome(
        within(ms, 15.8e-5) && within(sw, 17.7e-5),
        format!(
            "BLA multisine {ms:.3e} (reference 15.8e-5), sweep {sw:.3e} (reference 17.7e-5); sweep at 40 N rms would give {alt:.3e}"
        ),
    )
}

fn criterion_5(run: &BoucWenRun) -> Outcome {
    let t = &run.table;
    let Some(best) = t.selected(Structure { n_z: 2, n_w: 1 }) else {
        return outcome(false, "no n_z=2 fit available".into());
    };
    let (ms, sw) = (rmse_of(t, best, "multisine"), rmse_of(t, best, "sweep"));
    let bla = t.bla().unwrap();
    let gain = rmse_of(t, bla, "multisine") / ms;
    outcome(
        ms <= 3e-5 && sw <= 2e-5 && run.secs < 7200.0,
        format!(
            "NL-LFR n_z=2 n_w=1 multisine {ms:.3e} (<= 3e-5, reference 0.72e-5), sweep {sw:.3e} (<= 2e-5, reference 0.32e-5), {gain:.1}x over BLA, run {:.0} s",
            run.secs
        ),
    )
}

fn criterion_6(run: &BoucWenRun) -> Outcome {
    let t = &run.table;
    let (Some(one), Some(two)) = (t.selected(Structure { n_z: 1, n_w: 1 }), t.selected(Structure { n_z: 2, n_w: 1 })) else {
        return outcome(false, "missing fits".into());
    };
    let lti = rmse_of(t, t.bla().unwrap(), "multisine");
    let (r1, r2) = (rmse_of(t, one, "multisine"), rmse_of(t, two, "multisine"));
    outcome(
        lti / r1 >= 2.0 && r1 / r2 >= 3.0,
        format!(
            "multisine LTI {lti:.3e} -> n_z=1 {r1:.3e} ({:.1}x) -> n_z=2 {r2:.3e} ({:.1}x); reference 15.8e-5 -> 5.31e-5 -> 0.72e-5",
            lti / r1,
            r1 / r2
        ),
    )
}

// ---------------------------------------------------------------- 7

fn rosenbrock(t: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    Ok((
        DVector::from_vec(vec![1.0 - t[0], 10.0 * (t[1] - t[0] * t[0])]),
        DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, -20.0 * t[0], 10.0]),
    ))
}

fn criterion_7(reports: &[FitReport]) -> Outcome {
    let opts = LmOptions::default();
    let monotone = reports.iter().all(FitReport::is_monotone);

    let (t, rep) = lm_minimize(&rosenbrock, DVector::from_vec(vec![-1.2, 1.0]), &opts).unwrap();
    let rosen = (t[0] - 1.0).abs() < 1e-8 && (t[1] - 1.0).abs() < 1e-8 && rep.final_cost < 1e-16;

    let redundant = |t: &DVector<f64>| -> Result<(DVector<f64>, DMatrix<f64>)> {
        Ok((DVector::from_element(1, t[0] + t[1] - 1.0), DMatrix::from_row_slice(1, 2, &[1.0, 1.0])))
    };
    let (t2, rep2) = lm_minimize(&redundant, DVector::from_vec(vec![3.0, -4.0]), &opts).unwrap();
    let rank = rep2.final_cost < 1e-20 && t2.iter().all(|v| v.is_finite()) && rep2.rank_history().iter().all(|&r| r == 1);

    // Trial points beyond θ = 2 fail like a diverging simulation.
    let fragile = |t: &DVector<f64>| -> Result<(DVector<f64>, DMatrix<f64>)> {
        if t[0] > 2.0 {
            return Err(Error::DivergedAt { k: 7 });
        }
        Ok((DVector::from_element(1, t[0] - 3.0), DMatrix::from_element(1, 1, 1.0)))
    };
    let robust = match lm_minimize(&fragile, DVector::from_element(1, 0.0), &opts) {
        Ok((t3, rep3)) => {
            let rejected = rep3.iterations.iter().filter(|it| it.trial_cost.is_none()).count();
            rejected > 0 && t3[0] <= 2.0 && rep3.final_cost < rep3.initial_cost && rep3.termination != Termination::ZeroCost
        }
        Err(_) => false,
    };
    outcome(
        monotone && rosen && rank && robust,
        format!(
            "monotone traces {}/{}; Rosenbrock {rosen}; rank-deficient {rank}; divergent trials survived {robust}",
            reports.iter().filter(|r| r.is_monotone()).count(),
            reports.len()
        ),
    )
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    let truth = LtiStateSpace::new(
        DMatrix::from_row_slice(2, 2, &[1.5, -0.56, 1.0, 0.0]),
        DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
        DMatrix::from_row_slice(1, 2, &[0.3, -0.1]),
        DMatrix::from_element(1, 1, 0.05),
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let u = DMatrix::from_fn(2000, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
    let (y, _) = lti::simulate_lti(&truth, &u, &DVector::zeros(2)).unwrap();
    let rec = SignalRecord::new(u, Some(y), 1.0, 1, Excitation::External).unwrap();
    let est = estimate_bla(&rec, &BlaOptions { n_x: 2, detrend: false, ..BlaOptions::default() }).unwrap();
    let markov = truth
        .markov_parameters(30)
        .iter()
        .zip(est.model.markov_parameters(30))
        .map(|(p, q)| (p - q).norm() / p.norm().max(1e-12))
        .fold(0.0, f64::max);

    let n = 100_000;
    let u = DMatrix::from_fn(n, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
    let y = u.map(|v| v * v * v);
    let rec = SignalRecord::new(u, Some(y), 1.0, 1, Excitation::External).unwrap();
    let gain = estimate_bla(&rec, &BlaOptions { n_x: 0, ..BlaOptions::default() }).unwrap().model.d[(0, 0)];
    outcome(
        markov < 1e-6 && (gain - 3.0).abs() < 0.15,
        format!("Markov relative error {markov:.1e}; cubic Bussgang gain {gain:.4} (3 +/- 5%)"),
    )
}

// ---------------------------------------------------------------- 9

fn zoh_frf(ss: &LtiStateSpace, f: f64, fs: f64) -> Complex64 {
    let z = Complex64::from_polar(1.0, TAU * f / fs);
    let n = ss.n_x();
    let m = DMatrix::from_fn(n, n, |i, j| if i == j { z } else { Complex64::new(0.0, 0.0) } - ss.a[(i, j)]);
    let b = ss.b.column(0).map(|v| Complex64::new(v, 0.0));
    let x = m.lu().solve(&b).unwrap();
    (0..n).map(|i| x[i] * ss.c[(0, i)]).sum()
}

fn fft(x: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|v| Complex64::new(*v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(x.len()).process(&mut buf);
    buf
}

fn criterion_9() -> Outcome {
    let p = BoucWenParams::default();
    let ms = |n, rms, seed| {
        gen_multisine(&MultisineSpec {
            n_samples_per_period: n,
            fs: p.fs,
            f_min: 5.0,
            f_max: 150.0,
            amplitude_rms: rms,
            seed,
        })
        .unwrap()
    };

    let force = ms(8192, 50.0, 5);
    let y1 = boucwen::simulate_boucwen(&p, &force).unwrap().y().unwrap().clone();
    let fine = BoucWenParams { oversample: 2 * p.oversample, ..p.clone() };
    let y2 = boucwen::simulate_boucwen(&fine, &force).unwrap().y().unwrap().clone();
    let conv = util::rms((&y1 - &y2).as_slice()) / util::rms(y2.as_slice());

    let zero = SignalRecord::new(DMatrix::zeros(1000, 1), None, p.fs, 1, Excitation::External).unwrap();
    let rest = boucwen::simulate_boucwen(&p, &zero).unwrap().y().unwrap().amax() == 0.0;

    let n = 750;
    let min_area = [5.0, 20.0, 50.0, 120.0]
        .iter()
        .map(|amp| {
            let u: Vec<f64> = (0..6 * n).map(|k| amp * (TAU * 10.0 * k as f64 / p.fs).sin()).collect();
            let traj = boucwen::integrate(&p, &u).unwrap();
            // Last full period, closed on the first sample of the next.
            let states = traj.states.rows(4 * n, n + 1).into_owned();
            boucwen::loop_area(&BoucWenTrajectory { states })
        })
        .fold(f64::INFINITY, f64::min);

    let amp = 0.005;
    let force = ms(8192, amp, 17);
    let rec = boucwen::simulate_boucwen_with(&p, &force, &SimulationOptions { settle_periods: 2, ..Default::default() }).unwrap();
    let (uf, yf) = (fft(force.u().as_slice()), fft(rec.y().unwrap().as_slice()));
    let lin = p.linearized_discrete();
    let frf = excited_bins(8192, p.fs, 5.0, 150.0)
        .into_iter()
        .map(|k| {
            let h = zoh_frf(&lin, k as f64 * p.fs / 8192.0, p.fs);
            (yf[k] / uf[k] - h).norm() / h.norm()
        })
        .fold(0.0, f64::max);

    outcome(
        conv < 1e-6 && rest && min_area > 0.0 && frf < 0.01,
        format!(
            "oversampling change {conv:.1e}; zero input at rest {rest}; min loop area {min_area:.3e} J; FRF deviation {:.2}% at {amp} N rms",
            100.0 * frf
        ),
    )
}

fn main() {
    // Respect `cargo test -- --list` and name filters from the default harness.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let dir = tempfile::tempdir().expect("temporary directory");
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();

    results.push((1, "gradient exactness", criterion_1()));
    results.push((2, "init equals BLA", criterion_2()));
    let (c3, mut reports) = criterion_3(dir.path());
    results.push((3, "self-consistency oracle", c3));
    match boucwen_run(dir.path()) {
        Ok(run) => {
            results.push((4, "Bouc-Wen LTI baseline", criterion_4(&run)));
            results.push((5, "Bouc-Wen NL-LFR", criterion_5(&run)));
            results.push((6, "structure sensitivity", criterion_6(&run)));
            reports.extend(run.reports);
        }
        Err(e) => {
            for (i, name) in [(4, "Bouc-Wen LTI baseline"), (5, "Bouc-Wen NL-LFR"), (6, "structure sensitivity")] {
                results.push((i, name, outcome(false, format!("Bouc-Wen pipeline failed: {e}"))));
            }
        }
    }
    results.push((7, "LM properties", criterion_7(&reports)));
    results.push((8, "BLA recovery", criterion_8()));
    results.push((9, "Bouc-Wen simulator", criterion_9()));

    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (i, name, o) in &results {
        println!("criterion {i} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
