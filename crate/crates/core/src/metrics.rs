//! Simulation RMSE on test records and residual data for plotting.
//!
//! Steady-state scoring repeats one input period twice from rest and scores
//! the second copy. Transient scoring simulates the record once from rest and
//! drops the first `discard_n` samples.

use nalgebra::{DMatrix, DVector};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lti::{self, LtiStateSpace};
use crate::nllfr::NlLfrModel;
use crate::signals::SignalRecord;

pub const DEFAULT_DISCARD: usize = 2000;

/// Anything that maps an input record to an output record from rest.
pub trait OutputModel {
    fn n_inputs(&self) -> usize;
    fn n_outputs(&self) -> usize;
    /// Output from zero initial state. On divergence returns the finite
    /// prefix and the first failing sample.
    fn simulate_from_rest(&self, u: &DMatrix<f64>) -> Result<(DMatrix<f64>, Option<usize>)>;
}

impl OutputModel for LtiStateSpace {
    fn n_inputs(&self) -> usize {
        self.n_u()
    }

    fn n_outputs(&self) -> usize {
        self.n_y()
    }

    fn simulate_from_rest(&self, u: &DMatrix<f64>) -> Result<(DMatrix<f64>, Option<usize>)> {
        let (y, _) = lti::simulate_lti(self, u, &DVector::zeros(self.n_x()))?;
        match y.row_iter().position(|r| r.iter().any(|v| !v.is_finite())) {
            Some(k) => Ok((y.rows(0, k).into_owned(), Some(k))),
            None => Ok((y, None)),
        }
    }
}

impl OutputModel for NlLfrModel {
    fn n_inputs(&self) -> usize {
        self.dims().n_u
    }

    fn n_outputs(&self) -> usize {
        self.dims().n_y
    }

    fn simulate_from_rest(&self, u: &DMatrix<f64>) -> Result<(DMatrix<f64>, Option<usize>)> {
        let (sim, k) = self.simulate_partial(u, &DVector::zeros(self.dims().n_x))?;
        Ok((sim.y, k))
    }
}

/// A model identified on mean-removed data, applied to raw signals:
/// `ŷ = M(u − ū) + ȳ`.
pub struct WithOffsets<'a, M: ?Sized> {
    pub model: &'a M,
    pub u_mean: &'a [f64],
    pub y_mean: &'a [f64],
}

impl<M: OutputModel + ?Sized> OutputModel for WithOffsets<'_, M> {
    fn n_inputs(&self) -> usize {
        self.model.n_inputs()
    }

    fn n_outputs(&self) -> usize {
        self.model.n_outputs()
    }

    fn simulate_from_rest(&self, u: &DMatrix<f64>) -> Result<(DMatrix<f64>, Option<usize>)> {
        let mut centred = u.clone();
        for (j, mut col) in centred.column_iter_mut().enumerate() {
            col.add_scalar_mut(-self.u_mean.get(j).copied().unwrap_or(0.0));
        }
        let (mut y, k) = self.model.simulate_from_rest(&centred)?;
        for (j, mut col) in y.column_iter_mut().enumerate() {
            col.add_scalar_mut(self.y_mean.get(j).copied().unwrap_or(0.0));
        }
        Ok((y, k))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EvalMode {
    SteadyState,
    Transient { discard_n: usize },
}

impl Default for EvalMode {
    fn default() -> Self {
        EvalMode::SteadyState
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// Per output channel, over the scored samples that were simulated.
    pub rmse: Vec<f64>,
    /// `y − ŷ` over the scored samples (truncated on divergence).
    pub residual: DMatrix<f64>,
    /// Measured output over the same samples.
    pub measured: DMatrix<f64>,
    pub diverged_at: Option<usize>,
}

impl Evaluation {
    pub fn is_valid(&self) -> bool {
        self.diverged_at.is_none()
    }
}

/// Root mean square error per output channel.
pub fn rmse(y: &DMatrix<f64>, y_hat: &DMatrix<f64>) -> Result<Vec<f64>> {
    if y.shape() != y_hat.shape() {
        return Err(Error::DimMismatch(format!(
            "outputs have shapes {:?} and {:?}",
            y.shape(),
            y_hat.shape()
        )));
    }
    let n = y.nrows().max(1) as f64;
    Ok((y - y_hat)
        .column_iter()
        .map(|c| (c.norm_squared() / n).sqrt())
        .collect())
}

pub fn evaluate_model<M: OutputModel + ?Sized>(model: &M, test: &SignalRecord, mode: EvalMode) -> Result<Evaluation> {
    let y = test.require_y()?;
    if test.n_inputs() != model.n_inputs() || test.n_outputs() != model.n_outputs() {
        return Err(Error::DimMismatch(format!(
            "test record has {} inputs and {} outputs; model has {} and {}",
            test.n_inputs(),
            test.n_outputs(),
            model.n_inputs(),
            model.n_outputs()
        )));
    }
    let (drive, measured, start) = match mode {
        EvalMode::SteadyState => {
            let p = test.period_len();
            let offset = test.n_samples() - p;
            let period = test.u().rows(offset, p);
            let mut drive = DMatrix::zeros(2 * p, test.n_inputs());
            drive.rows_mut(0, p).copy_from(&period);
            drive.rows_mut(p, p).copy_from(&period);
            (drive, y.rows(offset, p).into_owned(), p)
        }
        EvalMode::Transient { discard_n } => {
            let n = test.n_samples();
            if discard_n >= n {
                return Err(Error::EmptyEvaluation { discard: discard_n, n });
            }
            (test.u().clone(), y.rows(discard_n, n - discard_n).into_owned(), discard_n)
        }
    };
    let (y_hat, diverged_at) = model.simulate_from_rest(&drive)?;
    let available = y_hat.nrows().saturating_sub(start).min(measured.nrows());
    let measured = measured.rows(0, available).into_owned();
    let predicted = y_hat.rows(start.min(y_hat.nrows()), available).into_owned();
    let rmse = if available == 0 {
        vec![f64::NAN; measured.ncols()]
    } else {
        rmse(&measured, &predicted)?
    };
    Ok(Evaluation {
        rmse,
        residual: &measured - &predicted,
        measured,
        diverged_at,
    })
}

/// One-sided DFT magnitude `|X(k)| / N` per channel, bins `0..=N/2`, with
/// the bin frequencies in Hz.
pub fn magnitude_spectrum(x: &DMatrix<f64>, fs: f64) -> (Vec<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let bins = n / 2 + 1;
    let freqs = (0..bins).map(|k| k as f64 * fs / n.max(1) as f64).collect();
    let mut mags = DMatrix::zeros(bins, x.ncols());
    if n == 0 {
        return (Vec::new(), DMatrix::zeros(0, x.ncols()));
    }
    let fft = FftPlanner::new().plan_fft_forward(n);
    for (j, col) in x.column_iter().enumerate() {
        let mut buf: Vec<Complex64> = col.iter().map(|v| Complex64::new(*v, 0.0)).collect();
        fft.process(&mut buf);
        for k in 0..bins {
            mags[(k, j)] = buf[k].norm() / n as f64;
        }
    }
    (freqs, mags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signals::Excitation;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lowpass() -> LtiStateSpace {
        LtiStateSpace::new(
            DMatrix::from_row_slice(2, 2, &[0.5, 0.2, -0.1, 0.3]),
            DMatrix::from_row_slice(2, 1, &[1.0, 0.5]),
            DMatrix::from_row_slice(1, 2, &[1.0, -1.0]),
            DMatrix::from_element(1, 1, 0.2),
        )
        .unwrap()
    }

    fn noise(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, 1, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn rmse_basic_cases() {
        let y = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        assert_eq!(rmse(&y, &y).unwrap(), vec![0.0, 0.0]);
        let shifted = y.add_scalar(0.25);
        for v in rmse(&y, &shifted).unwrap() {
            assert_relative_eq!(v, 0.25, epsilon = 1e-15);
        }
        let alt = DMatrix::from_fn(4, 1, |k, _| if k % 2 == 0 { 0.3 } else { -0.3 });
        assert_relative_eq!(rmse(&alt, &DMatrix::zeros(4, 1)).unwrap()[0], 0.3, epsilon = 1e-15);
        assert!(rmse(&y, &DMatrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn steady_state_score_forgets_initial_state() {
        let ss = lowpass();
        let u = noise(256, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scores: Vec<f64> = (0..2)
            .map(|_| {
                // Measured data simulated from a random initial state over two periods.
                let x0 = DVector::from_fn(2, |_, _| rng.random_range(-5.0..5.0));
                let mut u2 = DMatrix::zeros(512, 1);
                u2.rows_mut(0, 256).copy_from(&u);
                u2.rows_mut(256, 256).copy_from(&u);
                let (y2, _) = lti::simulate_lti(&ss, &u2, &x0).unwrap();
                let rec = SignalRecord::new(u2, Some(y2), 1.0, 2, Excitation::External).unwrap();
                evaluate_model(&ss, &rec, EvalMode::SteadyState).unwrap().rmse[0]
            })
            .collect();
        assert!(scores[0] < 1e-9 && scores[1] < 1e-9);
        assert!((scores[0] - scores[1]).abs() < 1e-9);
    }

    #[test]
    fn transient_mode_discards_leading_samples() {
        let ss = lowpass();
        let u = noise(100, 2);
        let (y, _) = lti::simulate_lti(&ss, &u, &DVector::zeros(2)).unwrap();
        let mut corrupted = y.clone();
        corrupted.rows_mut(0, 10).add_scalar_mut(3.0);
        let rec = SignalRecord::new(u, Some(corrupted), 1.0, 1, Excitation::External).unwrap();
        let e = evaluate_model(&ss, &rec, EvalMode::Transient { discard_n: 10 }).unwrap();
        assert_eq!(e.residual.nrows(), 90);
        assert!(e.rmse[0] < 1e-12);
        assert!(matches!(
            evaluate_model(&ss, &rec, EvalMode::Transient { discard_n: 100 }),
            Err(Error::EmptyEvaluation { .. })
        ));
    }

    #[test]
    fn divergence_is_flagged() {
        let unstable = LtiStateSpace::new(
            DMatrix::from_element(1, 1, 1e200),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        let u = DMatrix::from_element(20, 1, 1.0);
        let rec = SignalRecord::new(u, Some(DMatrix::zeros(20, 1)), 1.0, 1, Excitation::External).unwrap();
        let e = evaluate_model(&unstable, &rec, EvalMode::Transient { discard_n: 0 }).unwrap();
        assert!(!e.is_valid());
        assert!(e.residual.nrows() < 20);
    }

    #[test]
    fn offsets_are_applied() {
        let ss = lowpass();
        let u = noise(50, 3);
        let (y, _) = lti::simulate_lti(&ss, &u, &DVector::zeros(2)).unwrap();
        let raw_u = u.add_scalar(2.0);
        let raw_y = y.add_scalar(-1.0);
        let wrapped = WithOffsets { model: &ss, u_mean: &[2.0], y_mean: &[-1.0] };
        let (y_hat, _) = wrapped.simulate_from_rest(&raw_u).unwrap();
        assert!((y_hat - raw_y).amax() < 1e-12);
    }

    #[test]
    fn spectrum_of_a_tone() {
        let n = 64;
        let x = DMatrix::from_fn(n, 1, |k, _| (std::f64::consts::TAU * 4.0 * k as f64 / n as f64).cos());
        let (f, m) = magnitude_spectrum(&x, 64.0);
        assert_eq!(f.len(), 33);
        assert_relative_eq!(f[4], 4.0);
        assert_relative_eq!(m[(4, 0)], 0.5, epsilon = 1e-12);
        assert!(m[(5, 0)] < 1e-12);
    }
}
