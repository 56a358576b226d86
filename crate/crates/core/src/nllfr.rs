//! The NL-LFR model: an LTI block with inputs `(u, w)` and outputs `(z, y)`,
//! closed through a static one-hidden-layer network `w = f(z)`.
//!
//! ```text
//! x(k+1) = A x(k) + B_u u(k) + B_w w(k)
//! z(k)   = C_z x(k) + D_zu u(k)
//! w(k)   = W_w σ(W_z z(k) + b_z) + b_w
//! y(k)   = C_y x(k) + D_yu u(k) + D_yw w(k)
//! ```
//!
//! There is no `D_zw` term, so every sample is an explicit update.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::lti::LtiStateSpace;
use crate::util::{matrix_json, vector_json};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    /// `exp(−a²)`
    RadialBasis,
    /// Identity; turns the whole model into an LTI system.
    Linear,
}

impl Activation {
    #[inline]
    pub fn eval(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => a.tanh(),
            Activation::RadialBasis => (-a * a).exp(),
            Activation::Linear => a,
        }
    }

    #[inline]
    pub fn derivative(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = a.tanh();
                1.0 - t * t
            }
            Activation::RadialBasis => -2.0 * a * (-a * a).exp(),
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuralNet {
    /// n_n × n_z
    #[serde(with = "matrix_json")]
    pub w_z: DMatrix<f64>,
    #[serde(with = "vector_json")]
    pub b_z: DVector<f64>,
    /// n_w × n_n
    #[serde(with = "matrix_json")]
    pub w_w: DMatrix<f64>,
    #[serde(with = "vector_json")]
    pub b_w: DVector<f64>,
    pub activation: Activation,
}

impl NeuralNet {
    pub fn n_z(&self) -> usize {
        self.w_z.ncols()
    }

    pub fn n_n(&self) -> usize {
        self.w_z.nrows()
    }

    pub fn n_w(&self) -> usize {
        self.w_w.nrows()
    }

    pub fn check(&self) -> Result<()> {
        let nn = self.n_n();
        if nn == 0 || self.b_z.len() != nn || self.w_w.ncols() != nn || self.b_w.len() != self.n_w() {
            return Err(Error::DimMismatch(format!(
                "network shapes W_z {:?}, b_z {}, W_w {:?}, b_w {}",
                self.w_z.shape(),
                self.b_z.len(),
                self.w_w.shape(),
                self.b_w.len()
            )));
        }
        Ok(())
    }

    /// `w = W_w σ(W_z z + b_z) + b_w` and `∂w/∂z = W_w diag(σ′) W_z`.
    pub fn eval(&self, z: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        if z.len() != self.n_z() {
            return Err(Error::DimMismatch(format!(
                "network expects {} inputs, got {}",
                self.n_z(),
                z.len()
            )));
        }
        let pre = &self.w_z * z + &self.b_z;
        let hidden = pre.map(|a| self.activation.eval(a));
        let slope = pre.map(|a| self.activation.derivative(a));
        let w = &self.w_w * hidden + &self.b_w;
        let mut scaled = self.w_z.clone();
        for (i, mut row) in scaled.row_iter_mut().enumerate() {
            row *= slope[i];
        }
        Ok((w, &self.w_w * scaled))
    }
}

/// Free function form of [`NeuralNet::eval`].
pub fn eval_nn(net: &NeuralNet, z: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    net.eval(z)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n_x: usize,
    pub n_u: usize,
    pub n_y: usize,
    pub n_z: usize,
    pub n_w: usize,
    pub n_n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NlLfrModel {
    #[serde(with = "matrix_json")]
    pub a: DMatrix<f64>,
    #[serde(with = "matrix_json")]
    pub b_u: DMatrix<f64>,
    #[serde(with = "matrix_json")]
    pub b_w: DMatrix<f64>,
    #[serde(with = "matrix_json")]
    pub c_z: DMatrix<f64>,
    #[serde(with = "matrix_json")]
    pub c_y: DMatrix<f64>,
    #[serde(with = "matrix_json")]
    pub d_zu: DMatrix<f64>,
    #[serde(with = "matrix_json")]
    pub d_yu: DMatrix<f64>,
    #[serde(with = "matrix_json")]
    pub d_yw: DMatrix<f64>,
    pub net: NeuralNet,
}

/// Versioned on-disk form of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub dims: Dims,
    pub model: NlLfrModel,
}

impl ModelFile {
    pub fn new(model: NlLfrModel) -> Self {
        Self {
            format_version: MODEL_FORMAT_VERSION,
            dims: model.dims(),
            model,
        }
    }

    pub fn into_model(self) -> Result<NlLfrModel> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported model format version {}",
                self.format_version
            )));
        }
        self.model.check()?;
        if self.model.dims() != self.dims {
            return Err(Error::DimMismatch("model file dims disagree with matrices".into()));
        }
        Ok(self.model)
    }
}

/// Full trajectories of one simulation; rows are samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Simulation {
    pub y: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub x: DMatrix<f64>,
}

impl NlLfrModel {
    pub fn dims(&self) -> Dims {
        Dims {
            n_x: self.a.nrows(),
            n_u: self.b_u.ncols(),
            n_y: self.c_y.nrows(),
            n_z: self.c_z.nrows(),
            n_w: self.b_w.ncols(),
            n_n: self.net.n_n(),
        }
    }

    pub fn check(&self) -> Result<()> {
        self.net.check()?;
        let d = self.dims();
        let shapes = [
            (self.a.shape(), (d.n_x, d.n_x), "A"),
            (self.b_u.shape(), (d.n_x, d.n_u), "B_u"),
            (self.b_w.shape(), (d.n_x, d.n_w), "B_w"),
            (self.c_z.shape(), (d.n_z, d.n_x), "C_z"),
            (self.c_y.shape(), (d.n_y, d.n_x), "C_y"),
            (self.d_zu.shape(), (d.n_z, d.n_u), "D_zu"),
            (self.d_yu.shape(), (d.n_y, d.n_u), "D_yu"),
            (self.d_yw.shape(), (d.n_y, d.n_w), "D_yw"),
            (self.net.w_z.shape(), (d.n_n, d.n_z), "W_z"),
            (self.net.w_w.shape(), (d.n_w, d.n_n), "W_w"),
        ];
        for (got, want, name) in shapes {
            if got != want {
                return Err(Error::DimMismatch(format!("{name} is {got:?}, expected {want:?}")));
            }
        }
        Ok(())
    }

    /// The `(A, B_u, C_y, D_yu)` subsystem.
    pub fn linear_part(&self) -> LtiStateSpace {
        LtiStateSpace {
            a: self.a.clone(),
            b: self.b_u.clone(),
            c: self.c_y.clone(),
            d: self.d_yu.clone(),
        }
    }

    /// Same model for inputs `u / u_scale` and outputs `y / y_scale`
    /// (per channel).
    pub fn scale_io(&self, u_scale: &DVector<f64>, y_scale: &DVector<f64>) -> Self {
        let su = DMatrix::from_diagonal(u_scale);
        let sy_inv = DMatrix::from_diagonal(&y_scale.map(|s| 1.0 / s));
        Self {
            a: self.a.clone(),
            b_u: &self.b_u * &su,
            b_w: self.b_w.clone(),
            c_z: self.c_z.clone(),
            c_y: &sy_inv * &self.c_y,
            d_zu: &self.d_zu * &su,
            d_yu: &sy_inv * &self.d_yu * &su,
            d_yw: &sy_inv * &self.d_yw,
            net: self.net.clone(),
        }
    }

    fn check_io(&self, u: &DMatrix<f64>, x0: &DVector<f64>) -> Result<()> {
        self.check()?;
        let d = self.dims();
        if u.ncols() != d.n_u || x0.len() != d.n_x {
            return Err(Error::DimMismatch(format!(
                "input has {} channels and x0 {} entries; model expects {} and {}",
                u.ncols(),
                x0.len(),
                d.n_u,
                d.n_x
            )));
        }
        Ok(())
    }

    pub fn simulate(&self, u: &DMatrix<f64>, x0: &DVector<f64>) -> Result<Simulation> {
        match self.simulate_partial(u, x0)? {
            (sim, None) => Ok(sim),
            (_, Some(k)) => Err(Error::DivergedAt { k }),
        }
    }

    /// Like [`NlLfrModel::simulate`], but on divergence returns the
    /// trajectory up to (excluding) the first non-finite sample together
    /// with its index.
    pub fn simulate_partial(
        &self,
        u: &DMatrix<f64>,
        x0: &DVector<f64>,
    ) -> Result<(Simulation, Option<usize>)> {
        self.check_io(u, x0)?;
        let d = self.dims();
        let n = u.nrows();
        let mut sim = Simulation {
            y: DMatrix::zeros(n, d.n_y),
            z: DMatrix::zeros(n, d.n_z),
            w: DMatrix::zeros(n, d.n_w),
            x: DMatrix::zeros(n, d.n_x),
        };
        let mut x = x0.clone();
        let mut next = DVector::zeros(d.n_x);
        let mut z = DVector::zeros(d.n_z);
        let mut y = DVector::zeros(d.n_y);
        let mut pre = DVector::zeros(d.n_n);
        let mut w = DVector::zeros(d.n_w);
        let act = self.net.activation;
        for k in 0..n {
            let uk = u.row(k).transpose();
            z.gemv(1.0, &self.c_z, &x, 0.0);
            z.gemv(1.0, &self.d_zu, &uk, 1.0);
            pre.copy_from(&self.net.b_z);
            pre.gemv(1.0, &self.net.w_z, &z, 1.0);
            pre.apply(|a| *a = act.eval(*a));
            w.copy_from(&self.net.b_w);
            w.gemv(1.0, &self.net.w_w, &pre, 1.0);
            y.gemv(1.0, &self.c_y, &x, 0.0);
            y.gemv(1.0, &self.d_yu, &uk, 1.0);
            y.gemv(1.0, &self.d_yw, &w, 1.0);
            let finite = x.iter().chain(z.iter()).chain(w.iter()).chain(y.iter()).all(|v| v.is_finite());
            if !finite {
                let keep = |m: &DMatrix<f64>| m.rows(0, k).into_owned();
                let partial = Simulation {
                    y: keep(&sim.y),
                    z: keep(&sim.z),
                    w: keep(&sim.w),
                    x: keep(&sim.x),
                };
                return Ok((partial, Some(k)));
            }
            sim.x.set_row(k, &x.transpose());
            sim.z.set_row(k, &z.transpose());
            sim.w.set_row(k, &w.transpose());
            sim.y.set_row(k, &y.transpose());
            next.gemv(1.0, &self.a, &x, 0.0);
            next.gemv(1.0, &self.b_u, &uk, 1.0);
            next.gemv(1.0, &self.b_w, &w, 1.0);
            std::mem::swap(&mut x, &mut next);
        }
        Ok((sim, None))
    }
}

/// Free function form of [`NlLfrModel::simulate`].
pub fn simulate(model: &NlLfrModel, u: &DMatrix<f64>, x0: &DVector<f64>) -> Result<Simulation> {
    model.simulate(u, x0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Block {
    A,
    Bu,
    Bw,
    Cz,
    Cy,
    Dzu,
    Dyu,
    Dyw,
    Wz,
    Bz,
    Ww,
    BwBias,
    X0,
}

/// Fixed parameter order: `A, B_u, B_w, C_z, C_y, D_zu, D_yu, D_yw, W_z,
/// b_z, W_w, b_w`, then optionally `x0`. Matrices are stored row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub dims: Dims,
    pub with_x0: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpan {
    pub block: Block,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl BlockSpan {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

impl ParamLayout {
    pub fn new(dims: Dims, with_x0: bool) -> Self {
        Self { dims, with_x0 }
    }

    pub fn spans(&self) -> Vec<BlockSpan> {
        let d = self.dims;
        let mut shapes = vec![
            (Block::A, d.n_x, d.n_x),
            (Block::Bu, d.n_x, d.n_u),
            (Block::Bw, d.n_x, d.n_w),
            (Block::Cz, d.n_z, d.n_x),
            (Block::Cy, d.n_y, d.n_x),
            (Block::Dzu, d.n_z, d.n_u),
            (Block::Dyu, d.n_y, d.n_u),
            (Block::Dyw, d.n_y, d.n_w),
            (Block::Wz, d.n_n, d.n_z),
            (Block::Bz, d.n_n, 1),
            (Block::Ww, d.n_w, d.n_n),
            (Block::BwBias, d.n_w, 1),
        ];
        if self.with_x0 {
            shapes.push((Block::X0, d.n_x, 1));
        }
        let mut offset = 0;
        shapes
            .into_iter()
            .map(|(block, rows, cols)| {
                let span = BlockSpan {
                    block,
                    offset,
                    rows,
                    cols,
                };
                offset += rows * cols;
                span
            })
            .collect()
    }

    pub fn span(&self, block: Block) -> Option<BlockSpan> {
        self.spans().into_iter().find(|s| s.block == block)
    }

    pub fn len(&self) -> usize {
        self.spans().last().map_or(0, |s| s.offset + s.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Block and `(row, col)` of parameter `index`.
    pub fn locate(&self, index: usize) -> Option<(Block, usize, usize)> {
        self.spans().into_iter().find(|s| s.range().contains(&index)).map(|s| {
            let local = index - s.offset;
            (s.block, local / s.cols, local % s.cols)
        })
    }

    pub fn pack(&self, model: &NlLfrModel, x0: Option<&DVector<f64>>) -> Result<DVector<f64>> {
        if model.dims() != self.dims || x0.is_some() != self.with_x0 {
            return Err(Error::DimMismatch("model does not match the parameter layout".into()));
        }
        let mut v = Vec::with_capacity(self.len());
        for m in [
            &model.a,
            &model.b_u,
            &model.b_w,
            &model.c_z,
            &model.c_y,
            &model.d_zu,
            &model.d_yu,
            &model.d_yw,
            &model.net.w_z,
        ] {
            v.extend(m.transpose().iter());
        }
        v.extend(model.net.b_z.iter());
        v.extend(model.net.w_w.transpose().iter());
        v.extend(model.net.b_w.iter());
        if let Some(x0) = x0 {
            if x0.len() != self.dims.n_x {
                return Err(Error::DimMismatch("x0 length".into()));
            }
            v.extend(x0.iter());
        }
        Ok(DVector::from_vec(v))
    }

    pub fn unpack(
        &self,
        theta: &DVector<f64>,
        activation: Activation,
    ) -> Result<(NlLfrModel, Option<DVector<f64>>)> {
        let expected = self.len();
        if theta.len() != expected {
            return Err(Error::LayoutError {
                expected,
                got: theta.len(),
            });
        }
        let s = theta.as_slice();
        let spans = self.spans();
        let mat = |i: usize| {
            let sp = spans[i];
            DMatrix::from_row_slice(sp.rows, sp.cols, &s[sp.range()])
        };
        let vec = |i: usize| DVector::from_column_slice(&s[spans[i].range()]);
        let model = NlLfrModel {
            a: mat(0),
            b_u: mat(1),
            b_w: mat(2),
            c_z: mat(3),
            c_y: mat(4),
            d_zu: mat(5),
            d_yu: mat(6),
            d_yw: mat(7),
            net: NeuralNet {
                w_z: mat(8),
                b_z: vec(9),
                w_w: mat(10),
                b_w: vec(11),
                activation,
            },
        };
        let x0 = self.with_x0.then(|| vec(12));
        Ok((model, x0))
    }
}

/// Flat parameter vector together with its layout and activation tag.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    pub theta: DVector<f64>,
    pub layout: ParamLayout,
    pub activation: Activation,
}

pub fn pack(model: &NlLfrModel, x0: Option<&DVector<f64>>) -> Result<ParamVector> {
    let layout = ParamLayout::new(model.dims(), x0.is_some());
    Ok(ParamVector {
        theta: layout.pack(model, x0)?,
        layout,
        activation: model.net.activation,
    })
}

pub fn unpack(p: &ParamVector) -> Result<(NlLfrModel, Option<DVector<f64>>)> {
    p.layout.unpack(&p.theta, p.activation)
}

/// Exact output Jacobian `J[k·n_y + i, j] = ∂ŷ_i(k)/∂θ_j` by forward
/// sensitivity propagation, for the layout `ParamLayout::new(dims,
/// estimate_x0)`.
pub fn output_jacobian(
    model: &NlLfrModel,
    u: &DMatrix<f64>,
    x0: &DVector<f64>,
    estimate_x0: bool,
) -> Result<DMatrix<f64>> {
    output_jacobian_with(model, u, x0, estimate_x0, Execution::default()).map(|(_, j)| j)
}

/// [`output_jacobian`] that also returns the simulation and lets the caller
/// choose how parameter column blocks are scheduled.
pub fn output_jacobian_with(
    model: &NlLfrModel,
    u: &DMatrix<f64>,
    x0: &DVector<f64>,
    estimate_x0: bool,
    exec: Execution,
) -> Result<(Simulation, DMatrix<f64>)> {
    let sim = model.simulate(u, x0)?;
    let layout = ParamLayout::new(model.dims(), estimate_x0);
    let n_par = layout.len();
    let n = u.nrows();
    let n_y = model.dims().n_y;

    let traj = Trajectory::new(model, &sim);
    let workers = exec::worker_count(exec);
    // Enough blocks to balance load, but not so many that per-block
    // overhead dominates.
    let n_blocks = if workers > 1 { (workers * 2).min(n_par.div_ceil(4)).max(1) } else { 1 };
    let block = n_par.div_ceil(n_blocks).max(1);
    let ranges: Vec<Range<usize>> = (0..n_par)
        .step_by(block)
        .map(|s| s..(s + block).min(n_par))
        .collect();

    let blocks = exec::map_ordered(exec, ranges, |cols| {
        let m = sensitivity_block(model, &layout, u, &sim, &traj, cols.clone());
        (cols, m)
    });
    let mut jac = DMatrix::zeros(n * n_y, n_par);
    for (cols, m) in blocks {
        jac.columns_mut(cols.start, cols.len()).copy_from(&m);
    }
    Ok((sim, jac))
}

/// Per-sample network quantities reused by every sensitivity block.
struct Trajectory {
    hidden: DMatrix<f64>,
    slope: DMatrix<f64>,
    jac_z: Vec<DMatrix<f64>>,
}

impl Trajectory {
    fn new(model: &NlLfrModel, sim: &Simulation) -> Self {
        let n = sim.z.nrows();
        let net = &model.net;
        let nn = net.n_n();
        let mut hidden = DMatrix::zeros(n, nn);
        let mut slope = DMatrix::zeros(n, nn);
        let mut jac_z = Vec::with_capacity(n);
        let mut scaled = net.w_z.clone();
        for k in 0..n {
            let pre = &net.w_z * sim.z.row(k).transpose() + &net.b_z;
            for i in 0..nn {
                hidden[(k, i)] = net.activation.eval(pre[i]);
                slope[(k, i)] = net.activation.derivative(pre[i]);
                for c in 0..net.n_z() {
                    scaled[(i, c)] = net.w_z[(i, c)] * slope[(k, i)];
                }
            }
            jac_z.push(&net.w_w * &scaled);
        }
        Self {
            hidden,
            slope,
            jac_z,
        }
    }
}

fn sensitivity_block(
    model: &NlLfrModel,
    layout: &ParamLayout,
    u: &DMatrix<f64>,
    sim: &Simulation,
    traj: &Trajectory,
    cols: Range<usize>,
) -> DMatrix<f64> {
    let d = model.dims();
    let n = u.nrows();
    let m = cols.len();
    let params: Vec<(Block, usize, usize)> = cols
        .clone()
        .map(|j| layout.locate(j).expect("column inside layout"))
        .collect();

    let mut out = DMatrix::zeros(n * d.n_y, m);
    let mut s_x = DMatrix::<f64>::zeros(d.n_x, m);
    for (c, &(block, r, _)) in params.iter().enumerate() {
        if block == Block::X0 {
            s_x[(r, c)] = 1.0;
        }
    }
    let mut s_z = DMatrix::zeros(d.n_z, m);
    let mut s_w = DMatrix::zeros(d.n_w, m);
    let mut s_y = DMatrix::zeros(d.n_y, m);
    let mut s_next = DMatrix::zeros(d.n_x, m);
    let w_w = &model.net.w_w;

    for k in 0..n {
        s_z.gemm(1.0, &model.c_z, &s_x, 0.0);
        for (c, &(block, r, q)) in params.iter().enumerate() {
            match block {
                Block::Cz => s_z[(r, c)] += sim.x[(k, q)],
                Block::Dzu => s_z[(r, c)] += u[(k, q)],
                _ => {}
            }
        }

        s_w.gemm(1.0, &traj.jac_z[k], &s_z, 0.0);
        for (c, &(block, r, q)) in params.iter().enumerate() {
            match block {
                Block::Wz => {
                    let g = traj.slope[(k, r)] * sim.z[(k, q)];
                    for i in 0..d.n_w {
                        s_w[(i, c)] += w_w[(i, r)] * g;
                    }
                }
                Block::Bz => {
                    let g = traj.slope[(k, r)];
                    for i in 0..d.n_w {
                        s_w[(i, c)] += w_w[(i, r)] * g;
                    }
                }
                Block::Ww => s_w[(r, c)] += traj.hidden[(k, q)],
                Block::BwBias => s_w[(r, c)] += 1.0,
                _ => {}
            }
        }

        s_y.gemm(1.0, &model.c_y, &s_x, 0.0);
        s_y.gemm(1.0, &model.d_yw, &s_w, 1.0);
        for (c, &(block, r, q)) in params.iter().enumerate() {
            match block {
                Block::Cy => s_y[(r, c)] += sim.x[(k, q)],
                Block::Dyu => s_y[(r, c)] += u[(k, q)],
                Block::Dyw => s_y[(r, c)] += sim.w[(k, q)],
                _ => {}
            }
        }
        for i in 0..d.n_y {
            for c in 0..m {
                out[(k * d.n_y + i, c)] = s_y[(i, c)];
            }
        }

        s_next.gemm(1.0, &model.a, &s_x, 0.0);
        s_next.gemm(1.0, &model.b_w, &s_w, 1.0);
        for (c, &(block, r, q)) in params.iter().enumerate() {
            match block {
                Block::A => s_next[(r, c)] += sim.x[(k, q)],
                Block::Bu => s_next[(r, c)] += u[(k, q)],
                Block::Bw => s_next[(r, c)] += sim.w[(k, q)],
                _ => {}
            }
        }
        std::mem::swap(&mut s_x, &mut s_next);
    }
    out
}
