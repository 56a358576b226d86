//! Levenberg-Marquardt on a least-squares residual, with steps taken in the
//! data-driven coordinate frame: the Jacobian is factored `J = U Σ Vᵀ`, only
//! directions with `σ_i > svd_rel_tol · σ_max` are kept, and the damped step
//! `Δ = −V_r (Σ_r² + λI)⁻¹ Σ_r U_rᵀ r` is confined to that subspace.
//! Parameter directions the residual cannot see (e.g. similarity transforms
//! of a state-space model) are therefore never moved.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::nllfr::{self, NlLfrModel, ParamLayout};
use crate::signals::SignalRecord;
use crate::util;

/// A least-squares problem `min_θ ‖r(θ)‖² / len(r)`.
pub trait Residual {
    /// Residual vector only; used at trial points.
    fn residual(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        self.residual_and_jacobian(theta).map(|(r, _)| r)
    }

    /// Residual and its Jacobian `∂r/∂θ`.
    fn residual_and_jacobian(&self, theta: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)>;
}

impl<F> Residual for F
where
    F: Fn(&DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)>,
{
    fn residual_and_jacobian(&self, theta: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        self(theta)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmOptions {
    pub max_iter: usize,
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub svd_rel_tol: f64,
    pub cost_rel_tol: f64,
    pub step_tol: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iter: 300,
            lambda_init: 1.0,
            lambda_up: 10.0,
            lambda_down: 0.5,
            svd_rel_tol: 1e-9,
            cost_rel_tol: 1e-12,
            step_tol: 1e-12,
        }
    }
}

impl LmOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.lambda_init,
            self.lambda_up,
            self.lambda_down,
            self.svd_rel_tol,
            self.cost_rel_tol,
            self.step_tol,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidSpec("LM options must all be positive".into()));
        }
        if !(self.lambda_up > 1.0 && self.lambda_down < 1.0) {
            return Err(Error::InvalidSpec("LM needs lambda_up > 1 > lambda_down".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    MaxIter,
    CostTolerance,
    StepTolerance,
    /// Damping grew past any useful value without finding a decrease.
    DampingLimit,
    ZeroCost,
}

/// One LM iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// Cost of the trial point; `None` when the residual could not be
    /// evaluated there (e.g. the simulation diverged).
    pub trial_cost: Option<f64>,
    pub accepted: bool,
    /// Cost of the current iterate after this iteration.
    pub cost: f64,
    pub lambda: f64,
    /// Number of retained singular directions.
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: Vec<IterationRecord>,
    pub termination: Termination,
    pub final_theta: Vec<f64>,
    /// Seeds behind the starting point, filled in by the caller.
    pub seeds: Vec<u64>,
    pub options: LmOptions,
}

impl FitReport {
    /// `initial_cost` followed by the cost after every accepted step.
    pub fn accepted_costs(&self) -> Vec<f64> {
        std::iter::once(self.initial_cost)
            .chain(
                self.iterations
                    .iter()
                    .filter(|it| it.accepted)
                    .map(|it| it.cost),
            )
            .collect()
    }

    pub fn rank_history(&self) -> Vec<usize> {
        self.iterations.iter().map(|it| it.rank).collect()
    }

    pub fn is_monotone(&self) -> bool {
        self.accepted_costs().windows(2).all(|w| w[1] <= w[0])
    }

    /// Cost trace as CSV: `iteration,trial_cost,accepted,cost,lambda,rank`.
    pub fn cost_trace_csv(&self) -> String {
        let mut out = String::from("iteration,trial_cost,accepted,cost,lambda,rank\n");
        out.push_str(&format!("0,{},true,{},,\n", self.initial_cost, self.initial_cost));
        for (i, it) in self.iterations.iter().enumerate() {
            let trial = it.trial_cost.map_or_else(|| "nan".to_string(), |c| c.to_string());
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                i + 1,
                trial,
                it.accepted,
                it.cost,
                it.lambda,
                it.rank
            ));
        }
        out
    }
}

pub fn cost_of(r: &DVector<f64>) -> f64 {
    r.norm_squared() / r.len().max(1) as f64
}

/// Thin SVD pieces needed for the damped step: singular values, right
/// singular vectors, and `Uᵀ r`.
struct StepBasis {
    sigma: Vec<f64>,
    v: DMatrix<f64>,
    utr: Vec<f64>,
}

impl StepBasis {
    fn new(j: &DMatrix<f64>, r: &DVector<f64>, rel_tol: f64) -> Option<Self> {
        let (m, n) = j.shape();
        let (svd, utr_full) = if m > n {
            // J = Q R, then R = U_R Σ Vᵀ, so Uᵀ r = U_Rᵀ (Qᵀ r)[..n].
            let qr = j.clone().qr();
            let mut qtr = r.clone();
            qr.q_tr_mul(&mut qtr);
            let svd = qr.r().svd(true, true);
            let u = svd.u.as_ref()?;
            let utr = u.transpose() * qtr.rows(0, n);
            (svd, utr)
        } else {
            let svd = j.clone().svd(true, true);
            let utr = svd.u.as_ref()?.transpose() * r;
            (svd, utr)
        };
        let v_t = svd.v_t.as_ref()?;
        let s_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
        if !s_max.is_finite() {
            return None;
        }
        let keep: Vec<usize> = (0..svd.singular_values.len())
            .filter(|&i| s_max > 0.0 && svd.singular_values[i] > rel_tol * s_max)
            .collect();
        let mut v = DMatrix::zeros(n, keep.len());
        for (c, &i) in keep.iter().enumerate() {
            v.set_column(c, &v_t.row(i).transpose());
        }
        Some(Self {
            sigma: keep.iter().map(|&i| svd.singular_values[i]).collect(),
            v,
            utr: keep.iter().map(|&i| utr_full[i]).collect(),
        })
    }

    fn rank(&self) -> usize {
        self.sigma.len()
    }

    fn sigma_max(&self) -> f64 {
        self.sigma.iter().cloned().fold(0.0, f64::max)
    }

    fn step(&self, lambda: f64) -> DVector<f64> {
        let coeffs = DVector::from_iterator(
            self.rank(),
            self.sigma
                .iter()
                .zip(&self.utr)
                .map(|(s, b)| -s * b / (s * s + lambda)),
        );
        &self.v * coeffs
    }
}

/// Minimizes the mean squared residual starting from `theta0`.
///
/// Trial points where the residual fails are rejected like any cost
/// increase. Only a failure at `theta0` is an error.
pub fn lm_minimize<R: Residual + ?Sized>(
    problem: &R,
    theta0: DVector<f64>,
    opts: &LmOptions,
) -> Result<(DVector<f64>, FitReport)> {
    opts.validate()?;
    let (mut r, mut j) = problem
        .residual_and_jacobian(&theta0)
        .map_err(|e| Error::InvalidStart(Box::new(e)))?;
    let mut cost = cost_of(&r);
    if !cost.is_finite() {
        return Err(Error::InvalidStart(Box::new(Error::DivergedAt { k: 0 })));
    }
    let initial_cost = cost;
    let mut theta = theta0;
    let mut lambda = opts.lambda_init;
    let mut iterations = Vec::new();
    let mut basis = StepBasis::new(&j, &r, opts.svd_rel_tol);
    let mut termination = Termination::MaxIter;

    for _ in 0..opts.max_iter {
        if cost == 0.0 {
            termination = Termination::ZeroCost;
            break;
        }
        let Some(b) = basis.as_ref() else {
            log::warn!("SVD of the Jacobian failed; stopping");
            termination = Termination::DampingLimit;
            break;
        };
        if b.rank() == 0 {
            termination = Termination::StepTolerance;
            break;
        }
        let delta = b.step(lambda);
        if delta.norm() <= opts.step_tol * (1.0 + theta.norm()) {
            termination = Termination::StepTolerance;
            break;
        }
        let rank = b.rank();
        let sigma_max = b.sigma_max();
        let trial = &theta + &delta;
        let trial_r = problem.residual(&trial).ok();
        let trial_cost = trial_r.as_ref().map(cost_of).filter(|c| c.is_finite());

        let accepted = match trial_cost {
            Some(c) if c < cost => match problem.residual_and_jacobian(&trial) {
                Ok((r_new, j_new)) => {
                    let rel = (cost - c) / cost;
                    theta = trial;
                    cost = c;
                    r = r_new;
                    j = j_new;
                    basis = StepBasis::new(&j, &r, opts.svd_rel_tol);
                    lambda *= opts.lambda_down;
                    iterations.push(IterationRecord {
                        trial_cost,
                        accepted: true,
                        cost,
                        lambda,
                        rank,
                    });
                    if rel < opts.cost_rel_tol {
                        termination = Termination::CostTolerance;
                        break;
                    }
                    true
                }
                Err(_) => false,
            },
            _ => false,
        };
        if !accepted {
            lambda *= opts.lambda_up;
            iterations.push(IterationRecord {
                trial_cost,
                accepted: false,
                cost,
                lambda,
                rank,
            });
            if lambda > 1e16 * (1.0 + sigma_max * sigma_max) {
                termination = Termination::DampingLimit;
                break;
            }
        }
    }

    let report = FitReport {
        initial_cost,
        final_cost: cost,
        iterations,
        termination,
        final_theta: theta.iter().cloned().collect(),
        seeds: Vec::new(),
        options: opts.clone(),
    };
    Ok((theta, report))
}

/// Result of [`fit_nllfr`].
#[derive(Clone, Debug, PartialEq)]
pub struct NllfrFit {
    pub model: NlLfrModel,
    /// Estimated initial state when requested, otherwise the one supplied.
    pub x0: DVector<f64>,
    /// Costs are in physical output units (mean squared simulation error).
    pub report: FitReport,
}

/// Simulation-error fit of an NL-LFR model on the whole record, starting
/// from zero initial state.
pub fn fit_nllfr(
    init: &NlLfrModel,
    data: &SignalRecord,
    opts: &LmOptions,
    estimate_x0: bool,
) -> Result<NllfrFit> {
    let x0 = DVector::zeros(init.dims().n_x);
    fit_nllfr_with(init, &x0, data, opts, estimate_x0, Execution::default())
}

/// [`fit_nllfr`] with an explicit starting state and Jacobian scheduling.
///
/// The optimization runs on unit-variance input and output channels; the
/// returned model acts on the original signals.
pub fn fit_nllfr_with(
    init: &NlLfrModel,
    x0: &DVector<f64>,
    data: &SignalRecord,
    opts: &LmOptions,
    estimate_x0: bool,
    exec: Execution,
) -> Result<NllfrFit> {
    init.check()?;
    let y = data.require_y()?;
    let u = data.u();
    let d = init.dims();
    if u.ncols() != d.n_u || y.ncols() != d.n_y || x0.len() != d.n_x {
        return Err(Error::DimMismatch(format!(
            "record has {} inputs and {} outputs, x0 has {} entries; model expects {}, {} and {}",
            u.ncols(),
            y.ncols(),
            x0.len(),
            d.n_u,
            d.n_y,
            d.n_x
        )));
    }
    let su = unit_if_degenerate(util::column_std(u));
    let sy = unit_if_degenerate(util::column_std(y));
    let u_s = divide_columns(u, &su);
    let y_s = divide_columns(y, &sy);
    let start = init.scale_io(&su, &sy);

    let layout = ParamLayout::new(d, estimate_x0);
    let activation = init.net.activation;
    let fixed_x0 = x0.clone();
    let target = flatten_rows(&y_s);

    let unpack = |theta: &DVector<f64>| -> Result<(NlLfrModel, DVector<f64>)> {
        let (m, x) = layout.unpack(theta, activation)?;
        Ok((m, x.unwrap_or_else(|| fixed_x0.clone())))
    };
    let problem = NllfrSimulationError {
        u: &u_s,
        target: &target,
        exec,
        unpack: &unpack,
        estimate_x0,
    };
    let theta0 = layout.pack(&start, estimate_x0.then_some(x0))?;
    let (theta, mut report) = lm_minimize(&problem, theta0, opts)?;
    let (fitted, x0_hat) = unpack(&theta)?;
    let y_var = sy.iter().map(|s| s * s).sum::<f64>() / sy.len() as f64;
    crate::lti::rescale_report(&mut report, y_var);
    Ok(NllfrFit {
        model: fitted.scale_io(&su.map(|s| 1.0 / s), &sy.map(|s| 1.0 / s)),
        x0: x0_hat,
        report,
    })
}

type Unpacker<'a> = dyn Fn(&DVector<f64>) -> Result<(NlLfrModel, DVector<f64>)> + Sync + 'a;

struct NllfrSimulationError<'a> {
    u: &'a DMatrix<f64>,
    /// Measured outputs, sample-major (`k·n_y + i`).
    target: &'a DVector<f64>,
    exec: Execution,
    unpack: &'a Unpacker<'a>,
    estimate_x0: bool,
}

impl Residual for NllfrSimulationError<'_> {
    fn residual(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        let (m, x0) = (self.unpack)(theta)?;
        let sim = m.simulate(self.u, &x0)?;
        Ok(self.target - flatten_rows(&sim.y))
    }

    fn residual_and_jacobian(&self, theta: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (m, x0) = (self.unpack)(theta)?;
        let (sim, j) = nllfr::output_jacobian_with(&m, self.u, &x0, self.estimate_x0, self.exec)?;
        Ok((self.target - flatten_rows(&sim.y), -j))
    }
}

fn flatten_rows(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.len(), m.row_iter().flat_map(|r| r.iter().cloned().collect::<Vec<_>>()))
}

fn unit_if_degenerate(std: DVector<f64>) -> DVector<f64> {
    std.map(|s| if s > 0.0 && s.is_finite() { s } else { 1.0 })
}

fn divide_columns(m: &DMatrix<f64>, scales: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col /= scales[j];
    }
    out
}
