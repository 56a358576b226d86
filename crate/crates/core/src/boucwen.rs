//! Single-degree-of-freedom Bouc-Wen hysteretic oscillator
//!
//! ```text
//! m ÿ + c ẏ + k y + h = u(t)
//! ḣ = α ẏ − β (γ |ẏ| |h|^(ν−1) h + δ ẏ |h|^ν)
//! ```
//!
//! integrated with fixed-step RK4 at `fs · oversample`, the input held
//! constant over each output sample. Output sample `k` is the displacement
//! at `t = k / fs`, before `u(k)` acts, so the sampled system has no
//! feedthrough.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lti::LtiStateSpace;
use crate::signals::{gen_multisine, gen_sweep, MultisineSpec, SignalRecord, SweepSpec};

const MAX_SPLITS: usize = 4;
const BISECTION_STEPS: usize = 60;

/// Coefficients default to the published benchmark values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoucWenParams {
    pub m_l: f64,
    pub c_l: f64,
    pub k_l: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub nu: f64,
    pub fs: f64,
    pub oversample: usize,
}

impl Default for BoucWenParams {
    fn default() -> Self {
        Self {
            m_l: 2.0,
            c_l: 10.0,
            k_l: 5e4,
            alpha: 5e4,
            beta: 1e3,
            gamma: 0.8,
            delta: -1.1,
            nu: 1.0,
            fs: 750.0,
            oversample: 20,
        }
    }
}

impl BoucWenParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.m_l > 0.0 && self.k_l > 0.0 && self.fs > 0.0) || self.oversample == 0 {
            return Err(Error::InvalidSpec(
                "Bouc-Wen needs m_l, k_l, fs and oversample > 0".into(),
            ));
        }
        if !(self.nu >= 1.0) {
            return Err(Error::InvalidSpec(format!("hysteresis exponent must be >= 1, got {}", self.nu)));
        }
        let finite = [self.c_l, self.alpha, self.beta, self.gamma, self.delta];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec("Bouc-Wen coefficients must be finite".into()));
        }
        Ok(())
    }

    /// State derivative for state `(y, ẏ, h)` under force `u`.
    fn rhs(&self, s: &Vector3<f64>, u: f64) -> Vector3<f64> {
        let (y, v, h) = (s[0], s[1], s[2]);
        let acc = (u - self.c_l * v - self.k_l * y - h) / self.m_l;
        let ha = h.abs();
        let (h_pow_nu_m1, h_pow_nu) = if self.nu == 1.0 {
            (1.0, ha)
        } else {
            (ha.powf(self.nu - 1.0), ha.powf(self.nu))
        };
        let hdot = self.alpha * v - self.beta * (self.gamma * v.abs() * h_pow_nu_m1 * h + self.delta * v * h_pow_nu);
        Vector3::new(v, acc, hdot)
    }

    fn rk4(&self, s: &Vector3<f64>, u: f64, dt: f64) -> Vector3<f64> {
        let k1 = self.rhs(s, u);
        let k2 = self.rhs(&(s + k1 * (0.5 * dt)), u);
        let k3 = self.rhs(&(s + k2 * (0.5 * dt)), u);
        let k4 = self.rhs(&(s + k3 * dt), u);
        s + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
    }

    /// One step of length `dt`, split where `ẏ` or `h` changes sign so that
    /// every RK4 sub-step sees a smooth right-hand side.
    fn advance(&self, s: &Vector3<f64>, u: f64, dt: f64) -> Vector3<f64> {
        let mut s = *s;
        let mut left = dt;
        for _ in 0..MAX_SPLITS {
            let next = self.rk4(&s, u, left);
            let crossing = [1usize, 2]
                .into_iter()
                .filter(|&i| s[i] * next[i] < 0.0)
                .map(|i| self.crossing_time(&s, u, left, i))
                .min_by(f64::total_cmp);
            match crossing {
                Some(tau) if tau < left => {
                    s = self.rk4(&s, u, tau);
                    left -= tau;
                }
                _ => return next,
            }
        }
        self.rk4(&s, u, left)
    }

    /// Bisection for the first sign change of component `i`; returns a time
    /// just past it, so the sub-step lands on the far side.
    fn crossing_time(&self, s: &Vector3<f64>, u: f64, dt: f64, i: usize) -> f64 {
        let sign = s[i].signum();
        let (mut lo, mut hi) = (0.0, dt);
        for _ in 0..BISECTION_STEPS {
            let mid = 0.5 * (lo + hi);
            if self.rk4(s, u, mid)[i] * sign > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    }

    /// Continuous-time linearization about rest, `h ≈ α y`.
    pub fn linearized_continuous(&self) -> (Matrix3<f64>, Vector3<f64>) {
        let m = self.m_l;
        let a = Matrix3::new(
            0.0, 1.0, 0.0,
            -self.k_l / m, -self.c_l / m, -1.0 / m,
            0.0, self.alpha, 0.0,
        );
        (a, Vector3::new(0.0, 1.0 / m, 0.0))
    }

    /// Exact zero-order-hold discretization of the linearization at `fs`,
    /// with displacement as output.
    pub fn linearized_discrete(&self) -> LtiStateSpace {
        let (a, b) = self.linearized_continuous();
        let t = 1.0 / self.fs;
        let mut aug = DMatrix::zeros(4, 4);
        aug.view_mut((0, 0), (3, 3)).copy_from(&(a * t));
        aug.view_mut((0, 3), (3, 1)).copy_from(&(b * t));
        let e = aug.exp();
        LtiStateSpace {
            a: e.view((0, 0), (3, 3)).into_owned(),
            b: e.view((0, 3), (3, 1)).into_owned(),
            c: DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]),
            d: DMatrix::zeros(1, 1),
        }
    }
}

/// Options beyond the physical model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationOptions {
    /// Periods of the (periodic) input simulated and discarded first.
    pub settle_periods: usize,
    /// Standard deviation of additive Gaussian output noise, in metres.
    pub output_noise_std: f64,
    pub noise_seed: u64,
}

/// Sampled states `(y, ẏ, h)`, one row per output sample.
#[derive(Clone, Debug, PartialEq)]
pub struct BoucWenTrajectory {
    pub states: DMatrix<f64>,
}

impl BoucWenTrajectory {
    pub fn displacement(&self) -> DMatrix<f64> {
        self.states.columns(0, 1).into_owned()
    }

    pub fn hysteretic_force(&self) -> DMatrix<f64> {
        self.states.columns(2, 1).into_owned()
    }
}

/// Integrates from rest; row `k` is the state at `t = k / fs`.
pub fn integrate(p: &BoucWenParams, force: &[f64]) -> Result<BoucWenTrajectory> {
    p.validate()?;
    let dt = 1.0 / (p.fs * p.oversample as f64);
    let mut s = Vector3::zeros();
    let mut states = DMatrix::zeros(force.len(), 3);
    for (k, &u) in force.iter().enumerate() {
        states.row_mut(k).copy_from(&s.transpose());
        for _ in 0..p.oversample {
            s = p.advance(&s, u, dt);
        }
        if !s.iter().all(|v| v.is_finite()) {
            return Err(Error::DivergedAt { k });
        }
    }
    Ok(BoucWenTrajectory { states })
}

pub fn simulate_boucwen(p: &BoucWenParams, force: &SignalRecord) -> Result<SignalRecord> {
    simulate_boucwen_with(p, force, &SimulationOptions::default())
}

/// Like [`simulate_boucwen`]; `settle_periods` repeats the record's first
/// period before the recorded part.
pub fn simulate_boucwen_with(
    p: &BoucWenParams,
    force: &SignalRecord,
    opts: &SimulationOptions,
) -> Result<SignalRecord> {
    if force.n_inputs() != 1 {
        return Err(Error::DimMismatch(format!(
            "Bouc-Wen takes one force channel, got {}",
            force.n_inputs()
        )));
    }
    if (force.fs() - p.fs).abs() > 1e-9 * p.fs {
        return Err(Error::InvalidSpec(format!(
            "force sampled at {} Hz but simulator runs at {} Hz",
            force.fs(),
            p.fs
        )));
    }
    if !(opts.output_noise_std >= 0.0) {
        return Err(Error::InvalidSpec("output noise std must be >= 0".into()));
    }
    let u = force.u().as_slice();
    let period = &u[..force.period_len()];
    let lead = period.len() * opts.settle_periods;
    let drive: Vec<f64> = period.iter().cycle().take(lead).chain(u).cloned().collect();
    let traj = integrate(p, &drive).map_err(|e| match e {
        Error::DivergedAt { k } => Error::DivergedAt { k: k.saturating_sub(lead) },
        other => other,
    })?;
    let mut y: Vec<f64> = traj.states.column(0).iter().skip(lead).cloned().collect();
    if opts.output_noise_std > 0.0 {
        let normal = Normal::new(0.0, opts.output_noise_std)
            .map_err(|e| Error::InvalidSpec(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.noise_seed);
        y.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    force.with_output(DMatrix::from_vec(y.len(), 1, y))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Multisine,
    Sweep,
}

pub const MULTISINE_PERIOD: usize = 8192;
pub const MULTISINE_BAND_HZ: (f64, f64) = (5.0, 150.0);
pub const SWEEP_BAND_HZ: (f64, f64) = (20.0, 50.0);
/// Hz per minute.
pub const SWEEP_RATE: f64 = 10.0;
pub const MULTISINE_AMPLITUDE_RMS: f64 = 50.0;
/// A 40 N peak sine. The test-set RMSE figures of the benchmark are only
/// reproduced with this reading of the nominal "40 N" sweep level.
pub const SWEEP_AMPLITUDE_RMS: f64 = 40.0 / std::f64::consts::SQRT_2;

/// Benchmark dataset with default physics: a steady-state multisine period
/// (one settling period discarded) or a sweep from rest.
pub fn make_boucwen_dataset(seed: u64, amplitude_rms: f64, kind: DatasetKind) -> Result<SignalRecord> {
    make_boucwen_dataset_with(&BoucWenParams::default(), seed, amplitude_rms, kind, &SimulationOptions {
        settle_periods: 1,
        ..SimulationOptions::default()
    })
}

pub fn make_boucwen_dataset_with(
    p: &BoucWenParams,
    seed: u64,
    amplitude_rms: f64,
    kind: DatasetKind,
    opts: &SimulationOptions,
) -> Result<SignalRecord> {
    let force = match kind {
        DatasetKind::Multisine => gen_multisine(&MultisineSpec {
            n_samples_per_period: MULTISINE_PERIOD,
            fs: p.fs,
            f_min: MULTISINE_BAND_HZ.0,
            f_max: MULTISINE_BAND_HZ.1,
            amplitude_rms,
            seed,
        })?,
        DatasetKind::Sweep => gen_sweep(&SweepSpec {
            f_start: SWEEP_BAND_HZ.0,
            f_end: SWEEP_BAND_HZ.1,
            sweep_rate: SWEEP_RATE,
            amplitude_rms,
            fs: p.fs,
        })?,
    };
    let opts = match kind {
        DatasetKind::Multisine => opts.clone(),
        DatasetKind::Sweep => SimulationOptions {
            settle_periods: 0,
            ..opts.clone()
        },
    };
    simulate_boucwen_with(p, &force, &opts)
}

/// `∮ h dy` over the trajectory (trapezoidal); positive when the
/// hysteretic force dissipates energy.
pub fn loop_area(traj: &BoucWenTrajectory) -> f64 {
    let s = &traj.states;
    (1..s.nrows())
        .map(|k| 0.5 * (s[(k, 2)] + s[(k - 1, 2)]) * (s[(k, 0)] - s[(k - 1, 0)]))
        .sum()
}
