//! System responses, the SLS parametrization, gain recovery and the
//! disturbance-estimate controller realization.

use nalgebra::{DMatrix, DMatrixView, DVector};

use crate::error::{Error, Result};
use crate::linalg::unit_blt_inverse;
use crate::system::StackedDynamics;

/// Closed-loop maps from the stacked disturbance `w = [x0; w0; ...; w_{T-1}]`
/// to stacked states (`phi_x`) and inputs (`phi_u`).
#[derive(Debug, Clone, PartialEq)]
pub struct ResponsePair {
    pub phi_x: DMatrix<f64>,
    pub phi_u: DMatrix<f64>,
    n: usize,
    m: usize,
    horizon: usize,
}

impl ResponsePair {
    pub fn new(phi_x: DMatrix<f64>, phi_u: DMatrix<f64>, n: usize, m: usize, horizon: usize) -> Result<Self> {
        let cols = (horizon + 1) * n;
        if phi_x.shape() != (cols, cols) || phi_u.shape() != (horizon * m, cols) {
            return Err(Error::Dimension(format!(
                "phi_x {:?} / phi_u {:?} do not match n={n}, m={m}, T={horizon}",
                phi_x.shape(),
                phi_u.shape()
            )));
        }
        Ok(Self {
            phi_x,
            phi_u,
            n,
            m,
            horizon,
        })
    }

    /// Builds a pair from the vertically stacked `[phi_x; phi_u]`.
    pub fn from_stacked(stacked: &DMatrix<f64>, n: usize, m: usize, horizon: usize) -> Result<Self> {
        let sx = (horizon + 1) * n;
        if stacked.nrows() != sx + horizon * m {
            return Err(Error::Dimension("stacked response has wrong row count".into()));
        }
        let phi_x = stacked.rows(0, sx).clone_owned();
        let phi_u = stacked.rows(sx, horizon * m).clone_owned();
        Self::new(phi_x, phi_u, n, m, horizon)
    }

    pub fn zeros(n: usize, m: usize, horizon: usize) -> Self {
        let cols = (horizon + 1) * n;
        Self {
            phi_x: DMatrix::zeros(cols, cols),
            phi_u: DMatrix::zeros(horizon * m, cols),
            n,
            m,
            horizon,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn phi_x_block(&self, t: usize, tp: usize) -> DMatrixView<'_, f64> {
        self.phi_x.view((t * self.n, tp * self.n), (self.n, self.n))
    }

    pub fn phi_u_block(&self, t: usize, tp: usize) -> DMatrixView<'_, f64> {
        self.phi_u.view((t * self.m, tp * self.n), (self.m, self.n))
    }

    pub fn stacked(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.phi_x.nrows() + self.phi_u.nrows(), self.phi_x.ncols());
        out.rows_mut(0, self.phi_x.nrows()).copy_from(&self.phi_x);
        out.rows_mut(self.phi_x.nrows(), self.phi_u.nrows()).copy_from(&self.phi_u);
        out
    }

    /// Largest magnitude above the block diagonal of either response.
    pub fn blt_violation(&self) -> f64 {
        let mut worst = 0.0f64;
        for t in 0..=self.horizon {
            for tp in (t + 1)..=self.horizon {
                worst = worst.max(self.phi_x_block(t, tp).amax());
                if t < self.horizon {
                    worst = worst.max(self.phi_u_block(t, tp).amax());
                }
            }
        }
        worst
    }

    /// Largest deviation of the diagonal blocks of `phi_x` from identity.
    pub fn diagonal_identity_error(&self) -> f64 {
        let eye = DMatrix::<f64>::identity(self.n, self.n);
        (0..=self.horizon)
            .map(|t| (self.phi_x_block(t, t) - &eye).amax())
            .fold(0.0, f64::max)
    }
}

/// Causal gain `u = K x`, `Tm x (T+1)n`, blocks `K_{t,t'}` with `t' <= t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackGain {
    pub k: DMatrix<f64>,
}

impl FeedbackGain {
    pub fn block(&self, t: usize, tp: usize, n: usize, m: usize) -> DMatrixView<'_, f64> {
        self.k.view((t * m, tp * n), (m, n))
    }
}

/// `phi_x = (I - Z(A + BK))^{-1}`, `phi_u = K phi_x`.
pub fn responses_from_gain(sd: &StackedDynamics, gain: &FeedbackGain) -> Result<ResponsePair> {
    let (n, m, t_h) = (sd.n, sd.m, sd.horizon);
    if gain.k.shape() != (t_h * m, (t_h + 1) * n) {
        return Err(Error::Dimension(format!("gain has shape {:?}", gain.k.shape())));
    }
    for t in 0..t_h {
        for tp in (t + 1)..=t_h {
            if gain.block(t, tp, n, m).iter().any(|v| *v != 0.0) {
                return Err(Error::Argument(format!("gain block ({t},{tp}) violates causality")));
            }
        }
    }
    let size = (t_h + 1) * n;
    let closed = DMatrix::identity(size, size) - &sd.za - &sd.zb * &gain.k;
    let phi_x = unit_blt_inverse(&closed, n);
    let phi_u = &gain.k * &phi_x;
    ResponsePair::new(phi_x, phi_u, n, m, t_h)
}

/// `K = phi_u phi_x^{-1}`. Requires identity diagonal blocks in `phi_x`.
pub fn gain_from_responses(p: &ResponsePair) -> Result<FeedbackGain> {
    let err = p.diagonal_identity_error();
    if err > 1e-9 {
        return Err(Error::InvalidResponse(format!(
            "phi_x diagonal blocks deviate from identity by {err:.3e}"
        )));
    }
    let inv = unit_blt_inverse(&p.phi_x, p.n);
    Ok(FeedbackGain { k: &p.phi_u * inv })
}

/// `|| Z_AB [phi_x; phi_u] - I ||_F`.
pub fn check_parametrization(sd: &StackedDynamics, p: &ResponsePair) -> Result<f64> {
    if p.n != sd.n || p.m != sd.m || p.horizon != sd.horizon {
        return Err(Error::Argument("response dimensions do not match dynamics".into()));
    }
    let size = sd.state_len();
    let lhs = &p.phi_x - &sd.za * &p.phi_x - &sd.zb * &p.phi_u;
    Ok((lhs - DMatrix::<f64>::identity(size, size)).norm())
}

/// Residual of the parametrization restricted to a set of columns.
pub fn parametrization_residual_cols(sd: &StackedDynamics, p: &ResponsePair, cols: &[usize]) -> f64 {
    let mut acc = 0.0;
    for &c in cols {
        let col_x = p.phi_x.column(c);
        let col_u = p.phi_u.column(c);
        let mut r = col_x - &sd.za * col_x - &sd.zb * col_u;
        r[c] -= 1.0;
        acc += r.norm_squared();
    }
    acc.sqrt()
}

/// Runs the controller `u_t = sum_{tau <= t} phi_u^{t,tau} w_hat_tau` where the
/// disturbance estimates are recovered from observed states.
#[derive(Debug, Clone)]
pub struct RealizationState {
    w_hat: Vec<DVector<f64>>,
    t: usize,
}

impl Default for RealizationState {
    fn default() -> Self {
        Self::new()
    }
}

impl RealizationState {
    pub fn new() -> Self {
        Self {
            w_hat: Vec::new(),
            t: 0,
        }
    }

    pub fn time(&self) -> usize {
        self.t
    }

    pub fn estimates(&self) -> &[DVector<f64>] {
        &self.w_hat
    }

    /// Consumes the state observed at time `t` and returns `u_t`.
    pub fn realize_step(&mut self, p: &ResponsePair, observed_state: &DVector<f64>) -> Result<DVector<f64>> {
        let t = self.t;
        if t >= p.horizon {
            return Err(Error::State(format!("controller already produced {} inputs", p.horizon)));
        }
        if observed_state.len() != p.n {
            return Err(Error::Dimension("observed state length".into()));
        }
        let mut w_hat = observed_state.clone();
        for (tau, w) in self.w_hat.iter().enumerate() {
            w_hat.gemv(-1.0, &p.phi_x_block(t, tau), w, 1.0);
        }
        self.w_hat.push(w_hat);
        let mut u = DVector::zeros(p.m);
        for (tau, w) in self.w_hat.iter().enumerate() {
            u.gemv(1.0, &p.phi_u_block(t, tau), w, 1.0);
        }
        self.t += 1;
        Ok(u)
    }
}
