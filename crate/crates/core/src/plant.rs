//! Plant models in lower-triangular form `x_i' = f_i + G_i x_{i+1}`, `x_{r+1} = u`.
//!
//! The mobile robot is written in hand-position coordinates. With chassis heading
//! `theta` and hand offset `L`, the hand sits at `p_c + L (cos theta, sin theta)`.
//! For a chassis moving forward with speed `v` and turning at `omega`, the hand
//! velocity is `x2 = [[cos, -L sin], [sin, L cos]] (v, omega)`. Inverting gives
//! `Upsilon = [[cos, sin], [-sin/L, cos/L]]` and `(v, omega) = Upsilon x2`, so the
//! heading is carried as an auxiliary state with `theta' = omega`.
//! The inertia, Coriolis, damping and disturbance terms transform as
//! `M = U' M_bar U`, `C = U' M_bar U_dot`, `D = U' D_bar U`, `d = U' d_bar`.

use std::f64::consts::PI;
use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};

use crate::error::{Error, Result};

type BlockFn<T> = dyn Fn(f64, &[f64]) -> T + Send + Sync;

/// Generic lower-triangular plant. Every closure receives the full state
/// (blocks followed by auxiliary states).
#[derive(Clone)]
pub struct PlantModel {
    pub n: usize,
    pub r: usize,
    f: Vec<Arc<BlockFn<DVector<f64>>>>,
    g: Vec<Arc<BlockFn<DMatrix<f64>>>>,
    aux_dim: usize,
    aux_names: Vec<String>,
    aux: Option<Arc<BlockFn<DVector<f64>>>>,
}

impl Debug for PlantModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PlantModel")
            .field("n", &self.n)
            .field("r", &self.r)
            .field("aux", &self.aux_names)
            .finish()
    }
}

impl PlantModel {
    pub fn new(
        n: usize,
        f: Vec<Arc<BlockFn<DVector<f64>>>>,
        g: Vec<Arc<BlockFn<DMatrix<f64>>>>,
    ) -> Result<Self> {
        if f.is_empty() || f.len() != g.len() {
            return Err(Error::Contract("plant needs one (f, G) pair per block".into()));
        }
        Ok(PlantModel {
            n,
            r: f.len(),
            f,
            g,
            aux_dim: 0,
            aux_names: Vec::new(),
            aux: None,
        })
    }

    /// Adds auxiliary states integrated alongside the blocks.
    pub fn with_aux(
        mut self,
        names: Vec<String>,
        rhs: impl Fn(f64, &[f64]) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        self.aux_dim = names.len();
        self.aux_names = names;
        self.aux = Some(Arc::new(rhs));
        self
    }

    pub fn state_dim(&self) -> usize {
        self.n * self.r + self.aux_dim
    }

    pub fn aux_names(&self) -> &[String] {
        &self.aux_names
    }

    pub fn block_f(&self, i: usize, t: f64, x: &[f64]) -> DVector<f64> {
        (self.f[i])(t, x)
    }

    pub fn block_g(&self, i: usize, t: f64, x: &[f64]) -> DMatrix<f64> {
        (self.g[i])(t, x)
    }
}

/// `f + G v` for one block.
fn block_rhs(f: &DVector<f64>, g: &DMatrix<f64>, v: &[f64]) -> DVector<f64> {
    f + g * DVector::from_column_slice(v)
}

/// Stacked derivative of the full state.
pub fn plant_rhs(model: &PlantModel, t: f64, x: &[f64], u: &[f64]) -> Result<DVector<f64>> {
    let n = model.n;
    if x.len() != model.state_dim() {
        return Err(Error::dim("plant state", model.state_dim(), x.len()));
    }
    if u.len() != n {
        return Err(Error::dim("control input", n, u.len()));
    }
    let mut out = DVector::zeros(model.state_dim());
    for i in 0..model.r {
        let next = if i + 1 < model.r {
            &x[(i + 1) * n..(i + 2) * n]
        } else {
            u
        };
        let d = block_rhs(&(model.f[i])(t, x), &(model.g[i])(t, x), next);
        out.rows_mut(i * n, n).copy_from(&d);
    }
    if let Some(aux) = &model.aux {
        let d = aux(t, x);
        out.rows_mut(n * model.r, model.aux_dim).copy_from(&d);
    }
    Ok(out)
}

/// `r` stacked integrators in `n` channels.
pub fn integrator_chain(n: usize, r: usize) -> PlantModel {
    let f: Vec<Arc<BlockFn<DVector<f64>>>> = (0..r)
        .map(|_| Arc::new(move |_: f64, _: &[f64]| DVector::zeros(n)) as Arc<BlockFn<DVector<f64>>>)
        .collect();
    let g: Vec<Arc<BlockFn<DMatrix<f64>>>> = (0..r)
        .map(|_| Arc::new(move |_: f64, _: &[f64]| DMatrix::identity(n, n)) as Arc<BlockFn<DMatrix<f64>>>)
        .collect();
    PlantModel::new(n, f, g).expect("r >= 1")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Disturbance {
    None,
    /// Bounded periodic-plus-exponential test signal.
    Standard,
}

impl Disturbance {
    pub fn eval(self, t: f64) -> Vector2<f64> {
        match self {
            Disturbance::None => Vector2::zeros(),
            Disturbance::Standard => Vector2::new(
                0.75 * (3.0 * t + PI / 3.0).sin() + 1.5 * (t + 3.0 * PI / 7.0).cos(),
                -2.4 * ((t + PI / 3.0).cos() + 1.0).exp() * t.sin(),
            ),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RobotParams {
    pub m_r: f64,
    pub i_r: f64,
    pub d1: f64,
    pub d2: f64,
    pub l: f64,
    pub disturbance: Disturbance,
}

impl Default for RobotParams {
    fn default() -> Self {
        RobotParams {
            m_r: 3.6,
            i_r: 0.0405,
            d1: 0.3,
            d2: 0.04,
            l: 0.2,
            disturbance: Disturbance::Standard,
        }
    }
}

impl RobotParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("plant.m_r", self.m_r), ("plant.i_r", self.i_r), ("plant.l", self.l)] {
            if !(v > 0.0) {
                return Err(Error::validation(name, "must be > 0"));
            }
        }
        if !(self.d1 >= 0.0 && self.d2 >= 0.0) {
            return Err(Error::validation("plant.d1", "damping must be >= 0"));
        }
        Ok(())
    }

    /// Inverse of the hand-velocity Jacobian.
    pub fn upsilon(&self, theta: f64) -> Matrix2<f64> {
        let (s, c) = theta.sin_cos();
        Matrix2::new(c, s, -s / self.l, c / self.l)
    }

    fn upsilon_dot(&self, theta: f64, theta_dot: f64) -> Matrix2<f64> {
        let (s, c) = theta.sin_cos();
        Matrix2::new(-s, c, -c / self.l, -s / self.l) * theta_dot
    }

    pub fn inertia(&self, theta: f64) -> Matrix2<f64> {
        let u = self.upsilon(theta);
        u.transpose() * Matrix2::new(self.m_r, 0.0, 0.0, self.i_r) * u
    }

    /// Heading rate for hand velocity `x2`.
    pub fn theta_dot(&self, theta: f64, x2: &Vector2<f64>) -> f64 {
        (self.upsilon(theta) * x2)[1]
    }

    /// Drift and input gain of the velocity block: `x2' = f2 + G2 u`.
    pub fn velocity_block(&self, t: f64, x2: &Vector2<f64>, theta: f64) -> (Vector2<f64>, Matrix2<f64>) {
        let u = self.upsilon(theta);
        let ut = u.transpose();
        let m_bar = Matrix2::new(self.m_r, 0.0, 0.0, self.i_r);
        let d_bar = Matrix2::new(self.d1, 0.0, 0.0, self.d2);
        let m = ut * m_bar * u;
        let c = ut * m_bar * self.upsilon_dot(theta, self.theta_dot(theta, x2));
        let d = ut * d_bar * u;
        let dist = ut * self.disturbance.eval(t);
        let m_inv = m.try_inverse().expect("M is invertible for L > 0");
        (m_inv * (dist - (c + d) * x2), m_inv)
    }
}

/// Drift and input gain of one state block.
type Block = (DVector<f64>, DMatrix<f64>);

fn robot_blocks(p: RobotParams, t: f64, x: &[f64]) -> (Block, Block) {
    let x2 = Vector2::new(x[2], x[3]);
    let (f2, g2) = p.velocity_block(t, &x2, x[4]);
    (
        (DVector::zeros(2), DMatrix::identity(2, 2)),
        (
            DVector::from_column_slice(f2.as_slice()),
            DMatrix::from_column_slice(2, 2, g2.as_slice()),
        ),
    )
}

/// Robot in hand coordinates as a generic plant; state `[x1(2), x2(2), theta]`.
pub fn robot_plant(p: RobotParams) -> PlantModel {
    let f1: Arc<BlockFn<DVector<f64>>> = Arc::new(|_, _| DVector::zeros(2));
    let g1: Arc<BlockFn<DMatrix<f64>>> = Arc::new(|_, _| DMatrix::identity(2, 2));
    let f2: Arc<BlockFn<DVector<f64>>> = Arc::new(move |t, x| robot_blocks(p, t, x).1 .0);
    let g2: Arc<BlockFn<DMatrix<f64>>> = Arc::new(move |t, x| robot_blocks(p, t, x).1 .1);
    PlantModel::new(2, vec![f1, f2], vec![g1, g2])
        .expect("two blocks")
        .with_aux(vec!["theta".into()], move |_, x| {
            DVector::from_element(1, p.theta_dot(x[4], &Vector2::new(x[2], x[3])))
        })
}

/// Direct robot dynamics; identical to [`plant_rhs`] on [`robot_plant`].
pub fn robot_rhs(p: &RobotParams, t: f64, state: &[f64], u: &[f64]) -> Result<DVector<f64>> {
    if state.len() != 5 {
        return Err(Error::dim("robot state", 5, state.len()));
    }
    if u.len() != 2 {
        return Err(Error::dim("control input", 2, u.len()));
    }
    let ((f1, g1), (f2, g2)) = robot_blocks(*p, t, state);
    let mut out = DVector::zeros(5);
    out.rows_mut(0, 2).copy_from(&block_rhs(&f1, &g1, &state[2..4]));
    out.rows_mut(2, 2).copy_from(&block_rhs(&f2, &g2, u));
    out[4] = p.theta_dot(state[4], &Vector2::new(state[2], state[3]));
    Ok(out)
}
