//! Construction of an initial NL-LFR model from a single BLA estimate.
//!
//! The BLA is first put in coordinates where every state has unit sample
//! standard deviation on the estimation input. Its matrices become the
//! linear part of the NL-LFR model; `B_w`, `D_yw` and `b_w` start at zero, so
//! the initial model reproduces the BLA exactly and is stable whenever the BLA
//! is. The network weights and the maps into `z` are drawn uniformly, and the
//! rows of `C_z, D_zu` are rescaled so every `z` channel has unit standard
//! deviation on the estimation data.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lti::{self, LtiStateSpace};
use crate::nllfr::{Activation, NeuralNet, NlLfrModel};
use crate::util::{self, matrix_json};

pub const DEFAULT_STD_FLOOR: f64 = 1e-12;

/// Which state trajectory the normalizations are computed on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateTrajectory {
    /// Simulation from `x(0) = 0`.
    #[default]
    ZeroInitial,
    /// The input is one period of a periodic signal; use the periodic
    /// steady-state trajectory.
    PeriodicSteadyState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitSpec {
    pub n_z: usize,
    pub n_w: usize,
    pub n_n: usize,
    pub activation: Activation,
    pub seed: u64,
    /// Draws are uniform on `[−bound, bound]`.
    pub bound: f64,
    pub trajectory: StateTrajectory,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self {
            n_z: 2,
            n_w: 1,
            n_n: 15,
            activation: Activation::Tanh,
            seed: 0,
            bound: 1.0,
            trajectory: StateTrajectory::ZeroInitial,
        }
    }
}

impl InitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_z == 0 || self.n_w == 0 || self.n_n == 0 {
            return Err(Error::InvalidSpec("n_z, n_w and n_n must all be >= 1".into()));
        }
        if !(self.bound > 0.0) {
            return Err(Error::InvalidSpec("uniform bound must be positive".into()));
        }
        Ok(())
    }
}

/// Diagonal scalings holding inverse sample standard deviations of the
/// BLA states (`t`), the input (`t_u`) and the unscaled `z` draw (`t_z`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizingTransforms {
    #[serde(with = "matrix_json")]
    pub t: DMatrix<f64>,
    #[serde(with = "matrix_json")]
    pub t_u: DMatrix<f64>,
    #[serde(with = "matrix_json")]
    pub t_z: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Initialization {
    pub model: NlLfrModel,
    pub normalized_bla: LtiStateSpace,
    pub transforms: NormalizingTransforms,
    /// Initial state consistent with `spec.trajectory` for the normalized
    /// model (zeros for [`StateTrajectory::ZeroInitial`]).
    pub x0: DVector<f64>,
}

/// Initial state that makes the response to `u` periodic with period `u.nrows()`.
pub fn periodic_initial_state(ss: &LtiStateSpace, u: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n_x = ss.n_x();
    let (_, xs) = lti::simulate_lti(ss, u, &DVector::zeros(n_x))?;
    // x(N) from zero initial state.
    let last = xs.nrows() - 1;
    let x_end = &ss.a * xs.row(last).transpose() + &ss.b * u.row(last).transpose();
    let a_n = ss.a.pow(u.nrows() as u32);
    let lhs = DMatrix::identity(n_x, n_x) - a_n;
    lhs.lu()
        .solve(&x_end)
        .ok_or_else(|| Error::UnstableBla { radius: ss.spectral_radius() })
}

fn state_trajectory(
    ss: &LtiStateSpace,
    u: &DMatrix<f64>,
    mode: StateTrajectory,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let x0 = match mode {
        StateTrajectory::ZeroInitial => DVector::zeros(ss.n_x()),
        StateTrajectory::PeriodicSteadyState => periodic_initial_state(ss, u)?,
    };
    let (_, xs) = lti::simulate_lti(ss, u, &x0)?;
    Ok((x0, xs))
}

/// Similarity transform giving every BLA state unit sample standard
/// deviation over `u` (simulated from zero initial state).
pub fn normalize_bla(bla: &LtiStateSpace, u: &DMatrix<f64>) -> Result<(LtiStateSpace, DMatrix<f64>)> {
    normalize_bla_with(bla, u, StateTrajectory::ZeroInitial)
}

pub fn normalize_bla_with(
    bla: &LtiStateSpace,
    u: &DMatrix<f64>,
    mode: StateTrajectory,
) -> Result<(LtiStateSpace, DMatrix<f64>)> {
    bla.check()?;
    if !lti::is_stable(bla) {
        return Err(Error::UnstableBla {
            radius: bla.spectral_radius(),
        });
    }
    let (_, xs) = state_trajectory(bla, u, mode)?;
    let std = util::column_std(&xs);
    if let Some((index, &s)) = std.iter().enumerate().find(|(_, s)| !(**s >= DEFAULT_STD_FLOOR)) {
        return Err(Error::DegenerateState { index, std: s });
    }
    let t = DMatrix::from_diagonal(&std.map(|s| 1.0 / s));
    Ok((bla.similarity(&t)?, t))
}

pub fn init_nllfr(bla: &LtiStateSpace, u: &DMatrix<f64>, spec: &InitSpec) -> Result<NlLfrModel> {
    init_nllfr_detailed(bla, u, spec).map(|i| i.model)
}

/// Like [`init_nllfr`] but also returns the normalized BLA, the scalings and
/// a consistent initial state.
///
/// Draw order from the seeded ChaCha8 stream (all row-major): `W_w`, `W_z`,
/// `b_z`, `C_*`, `D_+`.
pub fn init_nllfr_detailed(
    bla: &LtiStateSpace,
    u: &DMatrix<f64>,
    spec: &InitSpec,
) -> Result<Initialization> {
    spec.validate()?;
    if u.ncols() != bla.n_u() {
        return Err(Error::DimMismatch(format!(
            "input has {} channels, BLA expects {}",
            u.ncols(),
            bla.n_u()
        )));
    }
    let (norm, t) = normalize_bla_with(bla, u, spec.trajectory)?;
    let (x0, xs) = state_trajectory(&norm, u, spec.trajectory)?;
    let (n_x, n_u, n_y) = (norm.n_x(), norm.n_u(), norm.n_y());
    let (n_z, n_w, n_n) = (spec.n_z, spec.n_w, spec.n_n);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bound = spec.bound;
    let mut draw = |r: usize, c: usize| {
        let v: Vec<f64> = (0..r * c).map(|_| rng.random_range(-bound..=bound)).collect();
        DMatrix::from_row_slice(r, c, &v)
    };
    let w_w = draw(n_w, n_n);
    let w_z = draw(n_n, n_z);
    let b_z = DVector::from_column_slice(draw(n_n, 1).as_slice());
    let c_star = draw(n_z, n_x);
    let d_plus = draw(n_z, n_u);

    let u_std = util::column_std(u);
    if let Some((index, &s)) = u_std.iter().enumerate().find(|(_, s)| !(**s >= DEFAULT_STD_FLOOR)) {
        return Err(Error::InvalidSpec(format!(
            "input channel {index} has degenerate standard deviation {s:e}"
        )));
    }
    let t_u = DMatrix::from_diagonal(&u_std.map(|s| 1.0 / s));
    let d_star = &d_plus * &t_u;
    let z_star = &xs * c_star.transpose() + u * d_star.transpose();
    let z_std = util::column_std(&z_star);
    if let Some((index, &s)) = z_std.iter().enumerate().find(|(_, s)| !(**s >= DEFAULT_STD_FLOOR)) {
        return Err(Error::DegenerateChannel { index, std: s });
    }
    let t_z = DMatrix::from_diagonal(&z_std.map(|s| 1.0 / s));

    let model = NlLfrModel {
        a: norm.a.clone(),
        b_u: norm.b.clone(),
        b_w: DMatrix::zeros(n_x, n_w),
        c_z: &t_z * &c_star,
        c_y: norm.c.clone(),
        d_zu: &t_z * &d_star,
        d_yu: norm.d.clone(),
        d_yw: DMatrix::zeros(n_y, n_w),
        net: NeuralNet {
            w_z,
            b_z,
            w_w,
            b_w: DVector::zeros(n_w),
            activation: spec.activation,
        },
    };
    Ok(Initialization {
        model,
        normalized_bla: norm,
        transforms: NormalizingTransforms { t, t_u, t_z },
        x0,
    })
}
