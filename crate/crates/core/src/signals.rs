//! Excitation signals and the sampled-data record shared by every stage.
//!
//! Random phases come from a ChaCha8 stream seeded with `seed`
//! (`rand_chacha::ChaCha8Rng::seed_from_u64`); one uniform draw on
//! `[0, 2π)` is taken per excited bin, in ascending bin order. The same spec
//! therefore always reproduces the same record.

use std::f64::consts::{PI, TAU};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util;

/// Random-phase multisine with a flat amplitude spectrum over `[f_min, f_max]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultisineSpec {
    pub n_samples_per_period: usize,
    pub fs: f64,
    pub f_min: f64,
    pub f_max: f64,
    pub amplitude_rms: f64,
    pub seed: u64,
}

/// Linear sine sweep; `sweep_rate` is in Hz per minute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub f_start: f64,
    pub f_end: f64,
    pub sweep_rate: f64,
    pub amplitude_rms: f64,
    pub fs: f64,
}

impl SweepSpec {
    /// Sweep duration in seconds.
    pub fn duration(&self) -> f64 {
        (self.f_end - self.f_start) / (self.sweep_rate / 60.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Excitation {
    Multisine(MultisineSpec),
    Sweep(SweepSpec),
    External,
}

impl Excitation {
    pub fn tag(&self) -> &'static str {
        match self {
            Excitation::Multisine(_) => "multisine",
            Excitation::Sweep(_) => "sweep",
            Excitation::External => "external",
        }
    }
}

/// Sampled multichannel input (and optionally output) data.
///
/// Rows are samples, columns are channels. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalRecord {
    u: DMatrix<f64>,
    y: Option<DMatrix<f64>>,
    fs: f64,
    n_periods: usize,
    excitation: Excitation,
}

impl SignalRecord {
    pub fn new(
        u: DMatrix<f64>,
        y: Option<DMatrix<f64>>,
        fs: f64,
        n_periods: usize,
        excitation: Excitation,
    ) -> Result<Self> {
        let n = u.nrows();
        if n == 0 {
            return Err(Error::InvalidSpec("record must contain at least one sample".into()));
        }
        if let Some(y) = &y {
            if y.nrows() != n {
                return Err(Error::DimMismatch(format!(
                    "input has {n} samples but output has {}",
                    y.nrows()
                )));
            }
        }
        if !(fs > 0.0) {
            return Err(Error::InvalidSpec(format!("sample rate must be positive, got {fs}")));
        }
        if n_periods == 0 || n % n_periods != 0 {
            return Err(Error::InvalidSpec(format!(
                "{n} samples cannot hold {n_periods} whole periods"
            )));
        }
        Ok(Self {
            u,
            y,
            fs,
            n_periods,
            excitation,
        })
    }

    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn y(&self) -> Option<&DMatrix<f64>> {
        self.y.as_ref()
    }

    /// Output samples, or `InvalidSpec` when the record is input-only.
    pub fn require_y(&self) -> Result<&DMatrix<f64>> {
        self.y
            .as_ref()
            .ok_or_else(|| Error::InvalidSpec("record has no output samples".into()))
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn n_periods(&self) -> usize {
        self.n_periods
    }

    pub fn excitation(&self) -> &Excitation {
        &self.excitation
    }

    pub fn n_samples(&self) -> usize {
        self.u.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.u.ncols()
    }

    pub fn n_outputs(&self) -> usize {
        self.y.as_ref().map_or(0, |y| y.ncols())
    }

    pub fn period_len(&self) -> usize {
        self.n_samples() / self.n_periods
    }

    /// Same record with its output replaced.
    pub fn with_output(&self, y: DMatrix<f64>) -> Result<Self> {
        Self::new(
            self.u.clone(),
            Some(y),
            self.fs,
            self.n_periods,
            self.excitation.clone(),
        )
    }

    /// Keeps only the last `n_periods` periods.
    pub fn last_periods(&self, n_periods: usize) -> Result<Self> {
        if n_periods == 0 || n_periods > self.n_periods {
            return Err(Error::InvalidSpec(format!(
                "cannot keep {n_periods} of {} periods",
                self.n_periods
            )));
        }
        let len = self.period_len() * n_periods;
        let start = self.n_samples() - len;
        Self::new(
            self.u.rows(start, len).into_owned(),
            self.y.as_ref().map(|y| y.rows(start, len).into_owned()),
            self.fs,
            n_periods,
            self.excitation.clone(),
        )
    }

    /// Writes `path` as CSV and a metadata side-car next to it
    /// (see [`sidecar_path`]).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let inputs: Vec<String> = (1..=self.n_inputs()).map(|i| format!("u{i}")).collect();
        let outputs: Vec<String> = (1..=self.n_outputs()).map(|i| format!("y{i}")).collect();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        w.write_record(inputs.iter().chain(outputs.iter()))?;
        let mut row = Vec::with_capacity(inputs.len() + outputs.len());
        for k in 0..self.n_samples() {
            row.clear();
            row.extend(self.u.row(k).iter().map(|v| v.to_string()));
            if let Some(y) = &self.y {
                row.extend(y.row(k).iter().map(|v| v.to_string()));
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;

        let meta = RecordMeta {
            fs: self.fs,
            n_periods: self.n_periods,
            excitation: self.excitation.clone(),
            inputs,
            outputs,
        };
        util::write_json(&sidecar_path(path), &meta)
    }

    /// Reads a CSV written by [`SignalRecord::write_csv`], using its side-car.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let meta: RecordMeta = util::read_json(&sidecar_path(path))?;
        Self::read_csv_with(path, &meta)
    }

    /// Reads a CSV whose channel layout and timing are given by `meta`.
    /// Columns are matched by header name.
    pub fn read_csv_with(path: &Path, meta: &RecordMeta) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = csv::Reader::from_reader(BufReader::new(file));
        let headers = r.headers()?.clone();
        let find = |name: &str| {
            headers.iter().position(|h| h.trim() == name).ok_or_else(|| {
                Error::Config(format!("column '{name}' not found in {}", path.display()))
            })
        };
        let u_cols = meta.inputs.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
        let y_cols = meta.outputs.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
        if u_cols.is_empty() {
            return Err(Error::Config("at least one input column is required".into()));
        }

        let mut u_data = Vec::new();
        let mut y_data = Vec::new();
        let mut n = 0;
        for rec in r.records() {
            let rec = rec?;
            let parse = |c: usize| -> Result<f64> {
                let field = rec.get(c).unwrap_or("").trim();
                field.parse::<f64>().map_err(|_| {
                    Error::Config(format!("row {}: cannot parse '{field}' as a number", n + 2))
                })
            };
            for &c in &u_cols {
                u_data.push(parse(c)?);
            }
            for &c in &y_cols {
                y_data.push(parse(c)?);
            }
            n += 1;
        }
        let u = DMatrix::from_row_slice(n, u_cols.len(), &u_data);
        let y = (!y_cols.is_empty()).then(|| DMatrix::from_row_slice(n, y_cols.len(), &y_data));
        Self::new(u, y, meta.fs, meta.n_periods, meta.excitation.clone())
    }
}

/// Side-car metadata stored next to a record CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub fs: f64,
    pub n_periods: usize,
    pub excitation: Excitation,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

/// `data.csv` -> `data.json`.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// DFT bins `k` with `f_min <= k fs / n <= f_max`, excluding DC and Nyquist.
pub fn excited_bins(n: usize, fs: f64, f_min: f64, f_max: f64) -> Vec<usize> {
    let df = fs / n as f64;
    (1..n.div_ceil(2))
        .filter(|&k| {
            let f = k as f64 * df;
            f >= f_min && f <= f_max
        })
        .collect()
}

pub fn gen_multisine(spec: &MultisineSpec) -> Result<SignalRecord> {
    let n = spec.n_samples_per_period;
    if n < 2 {
        return Err(Error::InvalidSpec(format!("period length must be >= 2, got {n}")));
    }
    if !(spec.fs > 0.0) || !(spec.amplitude_rms > 0.0) {
        return Err(Error::InvalidSpec("fs and amplitude_rms must be positive".into()));
    }
    if !(spec.f_min >= 0.0 && spec.f_min < spec.f_max && spec.f_max < spec.fs / 2.0) {
        return Err(Error::InvalidSpec(format!(
            "band must satisfy 0 <= f_min < f_max < fs/2, got [{}, {}] at fs {}",
            spec.f_min, spec.f_max, spec.fs
        )));
    }
    let bins = excited_bins(n, spec.fs, spec.f_min, spec.f_max);
    if bins.is_empty() {
        return Err(Error::EmptyBand {
            f_min: spec.f_min,
            f_max: spec.f_max,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut spectrum = vec![Complex64::new(0.0, 0.0); n];
    for &k in &bins {
        let phase = rng.random::<f64>() * TAU;
        let c = Complex64::from_polar(1.0, phase);
        spectrum[k] = c;
        spectrum[n - k] = c.conj();
    }
    FftPlanner::new().plan_fft_inverse(n).process(&mut spectrum);
    let mut u: Vec<f64> = spectrum.iter().map(|c| c.re).collect();
    let scale = spec.amplitude_rms / util::rms(&u);
    u.iter_mut().for_each(|v| *v *= scale);

    SignalRecord::new(
        DMatrix::from_vec(n, 1, u),
        None,
        spec.fs,
        1,
        Excitation::Multisine(spec.clone()),
    )
}

/// Linear sweep `sin(2π ∫ f(t) dt)` starting at zero phase.
pub fn gen_sweep(spec: &SweepSpec) -> Result<SignalRecord> {
    if !(spec.fs > 0.0) || !(spec.amplitude_rms > 0.0) {
        return Err(Error::InvalidSpec("fs and amplitude_rms must be positive".into()));
    }
    if !(spec.sweep_rate > 0.0) {
        return Err(Error::InvalidSpec(format!(
            "sweep rate must be positive, got {}",
            spec.sweep_rate
        )));
    }
    let duration = spec.duration();
    if !(spec.f_start < spec.f_end) || !(duration > 0.0) {
        return Err(Error::InvalidSpec(format!(
            "sweep needs f_start < f_end, got {} -> {}",
            spec.f_start, spec.f_end
        )));
    }
    let n = (duration * spec.fs).round() as usize;
    if n < 2 {
        return Err(Error::InvalidSpec("sweep shorter than two samples".into()));
    }
    // f(t) = f_start + rate_hz_per_s * t, integrated analytically.
    let slope = (spec.f_end - spec.f_start) / duration;
    let mut u: Vec<f64> = (0..n)
        .map(|k| {
            let t = k as f64 / spec.fs;
            (2.0 * PI * (spec.f_start * t + 0.5 * slope * t * t)).sin()
        })
        .collect();
    let scale = spec.amplitude_rms / util::rms(&u);
    u.iter_mut().for_each(|v| *v *= scale);

    SignalRecord::new(
        DMatrix::from_vec(n, 1, u),
        None,
        spec.fs,
        1,
        Excitation::Sweep(spec.clone()),
    )
}
