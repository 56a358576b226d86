//! Discrete-time LTI state-space models and best-linear-approximation
//! estimation.
//!
//! Estimation runs in two stages. A PI-MOESP subspace step (past inputs as
//! instruments) gives an initial `(A, C)` from the column space of the
//! projected future outputs; `(B, D, x0)` then follow from one linear least
//! squares fit over the whole record. The result is refined by minimizing the
//! simulation error with [`crate::lm`], with `x0` as extra nuisance
//! parameters. Both stages run on unit-variance scaled signals and the final
//! model is mapped back to physical units.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{self, FitReport, LmOptions, Residual};
use crate::signals::SignalRecord;
use crate::util::{self, matrix_json};

pub const DEFAULT_STABILITY_MARGIN: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LtiStateSpace {
    #[serde(with = "matrix_json")]
    pub a: DMatrix<f64>,
    #[serde(with = "matrix_json")]
    pub b: DMatrix<f64>,
    #[serde(with = "matrix_json")]
    pub c: DMatrix<f64>,
    #[serde(with = "matrix_json")]
    pub d: DMatrix<f64>,
}

impl LtiStateSpace {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        let ss = Self { a, b, c, d };
        ss.check()?;
        Ok(ss)
    }

    pub fn check(&self) -> Result<()> {
        let nx = self.a.nrows();
        let ok = self.a.ncols() == nx
            && self.b.nrows() == nx
            && self.c.ncols() == nx
            && self.d.nrows() == self.c.nrows()
            && self.d.ncols() == self.b.ncols();
        if ok {
            Ok(())
        } else {
            Err(Error::DimMismatch(format!(
                "inconsistent state-space shapes A {:?}, B {:?}, C {:?}, D {:?}",
                self.a.shape(),
                self.b.shape(),
                self.c.shape(),
                self.d.shape()
            )))
        }
    }

    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_y(&self) -> usize {
        self.c.nrows()
    }

    /// Impulse-response coefficients `D, CB, CAB, CA²B, …` (`count` of them).
    pub fn markov_parameters(&self, count: usize) -> Vec<DMatrix<f64>> {
        let mut out = Vec::with_capacity(count);
        if count == 0 {
            return out;
        }
        out.push(self.d.clone());
        let mut ak_b = self.b.clone();
        for _ in 1..count {
            out.push(&self.c * &ak_b);
            ak_b = &self.a * ak_b;
        }
        out
    }

    /// `(T A T⁻¹, T B, C T⁻¹, D)` for an invertible `T`.
    pub fn similarity(&self, t: &DMatrix<f64>) -> Result<Self> {
        let t_inv = t
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::InvalidSpec("similarity transform is singular".into()))?;
        Self::new(t * &self.a * &t_inv, t * &self.b, &self.c * &t_inv, self.d.clone())
    }

    pub fn spectral_radius(&self) -> f64 {
        util::spectral_radius(&self.a)
    }
}

/// Forward recursion `x(k+1) = A x(k) + B u(k)`, `y(k) = C x(k) + D u(k)`
/// from `x(0) = x0`. Returns `y` (N×n_y) and the state trajectory (N×n_x).
pub fn simulate_lti(
    ss: &LtiStateSpace,
    u: &DMatrix<f64>,
    x0: &DVector<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    ss.check()?;
    if u.ncols() != ss.n_u() || x0.len() != ss.n_x() {
        return Err(Error::DimMismatch(format!(
            "input has {} channels and x0 {} entries; model expects {} and {}",
            u.ncols(),
            x0.len(),
            ss.n_u(),
            ss.n_x()
        )));
    }
    let n = u.nrows();
    let mut y = DMatrix::zeros(n, ss.n_y());
    let mut xs = DMatrix::zeros(n, ss.n_x());
    let mut x = x0.clone();
    let mut next = DVector::zeros(ss.n_x());
    let mut yk = DVector::zeros(ss.n_y());
    for k in 0..n {
        let uk = u.row(k).transpose();
        xs.set_row(k, &x.transpose());
        yk.gemv(1.0, &ss.c, &x, 0.0);
        yk.gemv(1.0, &ss.d, &uk, 1.0);
        y.set_row(k, &yk.transpose());
        next.gemv(1.0, &ss.a, &x, 0.0);
        next.gemv(1.0, &ss.b, &uk, 1.0);
        std::mem::swap(&mut x, &mut next);
    }
    Ok((y, xs))
}

pub fn is_stable(ss: &LtiStateSpace) -> bool {
    is_stable_with(ss, DEFAULT_STABILITY_MARGIN)
}

/// True iff the spectral radius of `A` is below `1 − margin`.
pub fn is_stable_with(ss: &LtiStateSpace, margin: f64) -> bool {
    ss.spectral_radius() < 1.0 - margin
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlaOptions {
    /// Model order; 0 fits a static gain.
    pub n_x: usize,
    /// Iteration cap for the simulation-error refinement (0 skips it).
    pub max_iter: usize,
    pub detrend: bool,
    /// Block rows in each of the past and future Hankel matrices;
    /// defaults to `2 n_x + 5`.
    pub horizon: Option<usize>,
}

impl Default for BlaOptions {
    fn default() -> Self {
        Self {
            n_x: 3,
            max_iter: 100,
            detrend: true,
            horizon: None,
        }
    }
}

impl BlaOptions {
    pub fn horizon(&self) -> usize {
        self.horizon.unwrap_or(2 * self.n_x + 5)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlaEstimate {
    pub model: LtiStateSpace,
    /// Model before refinement.
    pub subspace: LtiStateSpace,
    /// Means removed from the data (zeros when not detrending).
    pub u_mean: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub report: Option<FitReport>,
    /// Set when refinement could not run or stopped abnormally; `model` is
    /// then the best model found.
    pub warning: Option<String>,
}

pub fn estimate_bla(data: &SignalRecord, opts: &BlaOptions) -> Result<BlaEstimate> {
    let y = data.require_y()?;
    let u = data.u();
    let (n, n_u, n_y) = (u.nrows(), u.ncols(), y.ncols());

    let (u_t, y_t, u_mean, y_mean) = if opts.detrend {
        (
            util::detrend(u),
            util::detrend(y),
            util::column_mean(u).iter().cloned().collect(),
            util::column_mean(y).iter().cloned().collect(),
        )
    } else {
        (u.clone(), y.clone(), vec![0.0; n_u], vec![0.0; n_y])
    };

    // Work on unit-variance signals; map back at the end.
    let su = positive_scales(&util::column_std(&u_t));
    let sy = positive_scales(&util::column_std(&y_t));
    let u_s = scale_columns(&u_t, &su.map(|s| 1.0 / s));
    let y_s = scale_columns(&y_t, &sy.map(|s| 1.0 / s));

    if opts.n_x == 0 {
        if n < n_u + 1 {
            return Err(Error::InsufficientData(format!(
                "{n} samples cannot determine a {n_y}x{n_u} static gain"
            )));
        }
        let d = least_squares(&u_s, &y_s)?.transpose();
        let model = unscale(
            &LtiStateSpace::new(
                DMatrix::zeros(0, 0),
                DMatrix::zeros(0, n_u),
                DMatrix::zeros(n_y, 0),
                d,
            )?,
            &su,
            &sy,
        );
        return Ok(BlaEstimate {
            subspace: model.clone(),
            model,
            u_mean,
            y_mean,
            report: None,
            warning: None,
        });
    }

    let (a, c) = moesp_ac(&u_s, &y_s, opts.n_x, opts.horizon())?;
    let (b, d, x0) = fit_bdx0(&a, &c, &u_s, &y_s)?;
    let init = LtiStateSpace::new(a, b, c, d)?;
    let subspace = unscale(&init, &su, &sy);

    if opts.max_iter == 0 {
        return Ok(BlaEstimate {
            model: subspace.clone(),
            subspace,
            u_mean,
            y_mean,
            report: None,
            warning: None,
        });
    }

    let problem = LtiSimulationError {
        u: &u_s,
        y: &y_s,
        n_x: opts.n_x,
    };
    let lm_opts = LmOptions {
        max_iter: opts.max_iter,
        ..LmOptions::default()
    };
    match lm::lm_minimize(&problem, pack_lti(&init, Some(&x0)), &lm_opts) {
        Ok((theta, mut report)) => {
            let (refined, _) = unpack_lti(&theta, opts.n_x, n_u, n_y, true)?;
            let y_var = sy.iter().map(|s| s * s).sum::<f64>() / n_y as f64;
            rescale_report(&mut report, y_var);
            let warning = (report.termination == lm::Termination::DampingLimit)
                .then(|| "refinement stopped at the damping limit".to_string());
            Ok(BlaEstimate {
                model: unscale(&refined, &su, &sy),
                subspace,
                u_mean,
                y_mean,
                report: Some(report),
                warning,
            })
        }
        Err(e) => {
            log::warn!("BLA refinement could not start ({e}); keeping the subspace model");
            Ok(BlaEstimate {
                model: subspace.clone(),
                subspace,
                u_mean,
                y_mean,
                report: None,
                warning: Some(format!("refinement failed to start: {e}")),
            })
        }
    }
}

/// Multiplies the cost fields of a report by `factor` (undoes residual scaling).
pub(crate) fn rescale_report(report: &mut FitReport, factor: f64) {
    report.initial_cost *= factor;
    report.final_cost *= factor;
    for it in &mut report.iterations {
        it.cost *= factor;
        if let Some(c) = it.trial_cost.as_mut() {
            *c *= factor;
        }
    }
}

fn positive_scales(std: &DVector<f64>) -> DVector<f64> {
    std.map(|s| if s > 0.0 && s.is_finite() { s } else { 1.0 })
}

fn scale_columns(m: &DMatrix<f64>, scales: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col *= scales[j];
    }
    out
}

/// Maps a model identified on `u/su`, `y/sy` back to physical units.
fn unscale(ss: &LtiStateSpace, su: &DVector<f64>, sy: &DVector<f64>) -> LtiStateSpace {
    let su_inv = DMatrix::from_diagonal(&su.map(|s| 1.0 / s));
    let sy_d = DMatrix::from_diagonal(sy);
    LtiStateSpace {
        a: ss.a.clone(),
        b: &ss.b * &su_inv,
        c: &sy_d * &ss.c,
        d: &sy_d * &ss.d * &su_inv,
    }
}

/// Solves `min ‖X β − Y‖` column-wise.
fn least_squares(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = x.clone().svd(true, true);
    let tol = svd.singular_values.max() * 1e-12 * x.nrows().max(x.ncols()) as f64;
    svd.solve(y, tol)
        .map_err(|e| Error::InsufficientData(format!("least squares failed: {e}")))
}

/// Block Hankel matrix with `rows` block rows starting at sample `start`:
/// block row `r`, column `c` holds `s(start + r + c)`.
fn block_hankel(s: &DMatrix<f64>, start: usize, rows: usize, cols: usize) -> DMatrix<f64> {
    let m = s.ncols();
    DMatrix::from_fn(rows * m, cols, |i, c| s[(start + i / m + c, i % m)])
}

/// PI-MOESP estimate of `(A, C)`.
fn moesp_ac(
    u: &DMatrix<f64>,
    y: &DMatrix<f64>,
    n_x: usize,
    horizon: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (n, m, l) = (u.nrows(), u.ncols(), y.ncols());
    let i = horizon;
    let rows = (2 * m + l) * i;
    if i == 0 || n + 1 < 2 * i || n + 1 - 2 * i < rows || n_x > l * (i - 1) {
        return Err(Error::InsufficientData(format!(
            "{n} samples are too few for order {n_x} with horizon {i}"
        )));
    }
    let j = n + 1 - 2 * i;
    let mut h = DMatrix::zeros(rows, j);
    h.rows_mut(0, m * i).copy_from(&block_hankel(u, i, i, j));
    h.rows_mut(m * i, m * i).copy_from(&block_hankel(u, 0, i, j));
    h.rows_mut(2 * m * i, l * i).copy_from(&block_hankel(y, i, i, j));

    // H = L Q  <=>  Hᵀ = Q̃ R with L = Rᵀ.
    let l_fac = h.transpose().qr().r().transpose();
    let l32 = l_fac.view((2 * m * i, m * i), (l * i, m * i)).into_owned();
    let svd = l32.svd(true, false);
    let u_svd = svd
        .u
        .ok_or_else(|| Error::InsufficientData("SVD of projected outputs failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&p, &q| svd.singular_values[q].total_cmp(&svd.singular_values[p]));
    if order.len() < n_x {
        return Err(Error::InsufficientData(format!(
            "projected output space has rank {} < {n_x}",
            order.len()
        )));
    }
    let mut gamma = DMatrix::zeros(l * i, n_x);
    for (c, &k) in order.iter().take(n_x).enumerate() {
        gamma.set_column(c, &u_svd.column(k));
    }

    let c = gamma.rows(0, l).into_owned();
    let up = gamma.rows(0, l * (i - 1)).into_owned();
    let down = gamma.rows(l, l * (i - 1)).into_owned();
    let mut a = least_squares(&up, &down)?;
    if util::spectral_radius(&a) >= 1.0 {
        // Zero-padded shift equation; its solution is always stable.
        let mut down_pad = DMatrix::zeros(l * i, n_x);
        down_pad.rows_mut(0, l * (i - 1)).copy_from(&down);
        a = least_squares(&gamma, &down_pad)?;
        log::warn!("subspace A was unstable; using the stabilized shift estimate");
    }
    Ok((a, c))
}

/// Linear least squares for `(B, D, x0)` given `(A, C)`:
/// `y(k) = C Aᵏ x0 + Σ_{t<k} C A^{k−1−t} B u(t) + D u(k)`.
fn fit_bdx0(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    u: &DMatrix<f64>,
    y: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)> {
    let (n, m, l, nx) = (u.nrows(), u.ncols(), y.ncols(), a.nrows());
    let n_par = nx + nx * m + l * m;
    if n * l < n_par {
        return Err(Error::InsufficientData(format!(
            "{n} samples cannot determine {n_par} parameters"
        )));
    }
    let mut reg = DMatrix::zeros(n * l, n_par);
    let zeros_u = DMatrix::zeros(n, m);
    let no_d = DMatrix::zeros(l, m);
    let x0_zero = DVector::zeros(nx);
    for s in 0..nx {
        let ss = LtiStateSpace::new(a.clone(), DMatrix::zeros(nx, m), c.clone(), no_d.clone())?;
        let mut e = DVector::zeros(nx);
        e[s] = 1.0;
        let (yy, _) = simulate_lti(&ss, &zeros_u, &e)?;
        fill_regressor(&mut reg, s, &yy);
    }
    for p in 0..nx {
        for q in 0..m {
            let mut b = DMatrix::zeros(nx, m);
            b[(p, q)] = 1.0;
            let ss = LtiStateSpace::new(a.clone(), b, c.clone(), no_d.clone())?;
            let (yy, _) = simulate_lti(&ss, u, &x0_zero)?;
            fill_regressor(&mut reg, nx + p * m + q, &yy);
        }
    }
    for p in 0..l {
        for q in 0..m {
            let col = nx + nx * m + p * m + q;
            for k in 0..n {
                reg[(k * l + p, col)] = u[(k, q)];
            }
        }
    }
    let target = DMatrix::from_iterator(n * l, 1, (0..n).flat_map(|k| (0..l).map(move |p| y[(k, p)])));
    let beta = least_squares(&reg, &target)?;
    let x0 = DVector::from_iterator(nx, beta.rows(0, nx).iter().cloned());
    let coef: Vec<f64> = beta.iter().cloned().collect();
    let b = DMatrix::from_row_slice(nx, m, &coef[nx..nx + nx * m]);
    let d = DMatrix::from_row_slice(l, m, &coef[nx + nx * m..]);
    Ok((b, d, x0))
}

fn fill_regressor(reg: &mut DMatrix<f64>, col: usize, yy: &DMatrix<f64>) {
    let l = yy.ncols();
    for k in 0..yy.nrows() {
        for p in 0..l {
            reg[(k * l + p, col)] = yy[(k, p)];
        }
    }
}

/// Row-major `[A, B, C, D, x0?]`.
pub fn pack_lti(ss: &LtiStateSpace, x0: Option<&DVector<f64>>) -> DVector<f64> {
    let mut v = Vec::new();
    for m in [&ss.a, &ss.b, &ss.c, &ss.d] {
        v.extend(m.transpose().iter());
    }
    if let Some(x0) = x0 {
        v.extend(x0.iter());
    }
    DVector::from_vec(v)
}

pub fn unpack_lti(
    theta: &DVector<f64>,
    n_x: usize,
    n_u: usize,
    n_y: usize,
    with_x0: bool,
) -> Result<(LtiStateSpace, Option<DVector<f64>>)> {
    let sizes = [n_x * n_x, n_x * n_u, n_y * n_x, n_y * n_u];
    let expected = sizes.iter().sum::<usize>() + if with_x0 { n_x } else { 0 };
    if theta.len() != expected {
        return Err(Error::LayoutError {
            expected,
            got: theta.len(),
        });
    }
    let s = theta.as_slice();
    let mut off = 0;
    let mut take = |r: usize, c: usize| {
        let m = DMatrix::from_row_slice(r, c, &s[off..off + r * c]);
        off += r * c;
        m
    };
    let a = take(n_x, n_x);
    let b = take(n_x, n_u);
    let c = take(n_y, n_x);
    let d = take(n_y, n_u);
    let x0 = with_x0.then(|| DVector::from_column_slice(&s[off..off + n_x]));
    Ok((LtiStateSpace::new(a, b, c, d)?, x0))
}

/// Output sensitivity `∂ŷ(k)/∂θ` of an LTI model for the `[A, B, C, D, x0?]`
/// layout, one parameter at a time. Row `k·n_y + i`, column `j`.
pub fn lti_output_sensitivity(
    ss: &LtiStateSpace,
    u: &DMatrix<f64>,
    x0: &DVector<f64>,
    with_x0: bool,
) -> Result<DMatrix<f64>> {
    let (y, xs) = simulate_lti(ss, u, x0)?;
    let (nx, nu, ny) = (ss.n_x(), ss.n_u(), ss.n_y());
    let n = u.nrows();
    check_finite(&y)?;
    let n_par = nx * nx + nx * nu + ny * nx + ny * nu + if with_x0 { nx } else { 0 };
    let mut jac = DMatrix::zeros(n * ny, n_par);

    for p in 0..n_par {
        let mut s = DVector::<f64>::zeros(nx);
        let mut idx = p;
        // Which block does parameter p perturb?
        let block = if idx < nx * nx {
            0
        } else {
            idx -= nx * nx;
            if idx < nx * nu {
                1
            } else {
                idx -= nx * nu;
                if idx < ny * nx {
                    2
                } else {
                    idx -= ny * nx;
                    if idx < ny * nu {
                        3
                    } else {
                        idx -= ny * nu;
                        4
                    }
                }
            }
        };
        if block == 4 {
            s[idx] = 1.0;
        }
        for k in 0..n {
            let mut dy = &ss.c * &s;
            match block {
                2 => dy[idx / nx] += xs[(k, idx % nx)],
                3 => dy[idx / nu] += u[(k, idx % nu)],
                _ => {}
            }
            for i in 0..ny {
                jac[(k * ny + i, p)] = dy[i];
            }
            let mut next = &ss.a * &s;
            match block {
                0 => next[idx / nx] += xs[(k, idx % nx)],
                1 => next[idx / nu] += u[(k, idx % nu)],
                _ => {}
            }
            s = next;
        }
    }
    Ok(jac)
}

fn check_finite(y: &DMatrix<f64>) -> Result<()> {
    for k in 0..y.nrows() {
        if y.row(k).iter().any(|v| !v.is_finite()) {
            return Err(Error::DivergedAt { k });
        }
    }
    Ok(())
}

/// Simulation-error residual `y − ŷ(θ)` over `[A, B, C, D, x0]`.
struct LtiSimulationError<'a> {
    u: &'a DMatrix<f64>,
    y: &'a DMatrix<f64>,
    n_x: usize,
}

impl LtiSimulationError<'_> {
    fn model(&self, theta: &DVector<f64>) -> Result<(LtiStateSpace, DVector<f64>)> {
        let (ss, x0) = unpack_lti(theta, self.n_x, self.u.ncols(), self.y.ncols(), true)?;
        Ok((ss, x0.expect("x0 packed")))
    }

    fn residual_from(&self, yhat: &DMatrix<f64>) -> DVector<f64> {
        let (n, l) = self.y.shape();
        DVector::from_iterator(
            n * l,
            (0..n).flat_map(|k| (0..l).map(move |p| self.y[(k, p)] - yhat[(k, p)])),
        )
    }
}

impl Residual for LtiSimulationError<'_> {
    fn residual(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        let (ss, x0) = self.model(theta)?;
        let (yhat, _) = simulate_lti(&ss, self.u, &x0)?;
        check_finite(&yhat)?;
        Ok(self.residual_from(&yhat))
    }

    fn residual_and_jacobian(&self, theta: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (ss, x0) = self.model(theta)?;
        let (yhat, _) = simulate_lti(&ss, self.u, &x0)?;
        check_finite(&yhat)?;
        let jac = -lti_output_sensitivity(&ss, self.u, &x0, true)?;
        Ok((self.residual_from(&yhat), jac))
    }
}
