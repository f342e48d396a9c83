//! Training objectives: the two ELBO-style losses, the social hinge
//! penalties, and their weighted combination.
//!
//! Every builder returns a scalar tape variable so gradients flow back to
//! the model parameters; [`LossBreakdown`] snapshots the plain values for
//! logging.

use crate::nn::gaussian::{gaussian_kl, standard_kl, GaussianParams};
use crate::nn::tape::{Tape, Var};
use crate::nn::tensor::{real, Real, Tensor};
use crate::nn::NnError;

/// Mean squared error between a predicted tape variable and a constant
/// target, averaged over every entry.
pub fn mean_squared_error<F: Real>(
    tape: &mut Tape<F>,
    pred: Var,
    target: &Tensor<F>,
) -> Result<Var, NnError> {
    if tape.value(pred).shape() != target.shape() {
        return Err(NnError::Shape {
            context: "squared-error target",
            expected: format!("{:?}", tape.value(pred).shape()),
            got: format!("{:?}", target.shape()),
        });
    }
    let diff = tape.offset(pred, &target.map(|v| -v));
    let sq = tape.mul(diff, diff);
    Ok(tape.mean(sq))
}

/// Forecasting objective: coordinate-wise MSE against the ground-truth
/// future plus the divergence between the future-conditioned posterior and
/// the past-conditioned prior.
pub fn forecast_loss<F: Real>(
    tape: &mut Tape<F>,
    pred: Var,
    gt: &Tensor<F>,
    q: &GaussianParams,
    p: &GaussianParams,
) -> Result<Var, NnError> {
    let mse = mean_squared_error(tape, pred, gt)?;
    let kl = gaussian_kl(tape, q, p)?;
    Ok(tape.add(mse, kl))
}

/// Reconstruction objective: coordinate-wise MSE against the unmasked
/// observed window plus the divergence from a standard normal prior.
pub fn recon_loss<F: Real>(
    tape: &mut Tape<F>,
    recon: Var,
    past: &Tensor<F>,
    q: &GaussianParams,
) -> Result<Var, NnError> {
    let mse = mean_squared_error(tape, recon, past)?;
    let kl = standard_kl(tape, q)?;
    Ok(tape.add(mse, kl))
}

/// Pairwise proximity hinge over a time-major `(N·T, 2)` trajectory:
/// `(1/m) Σ_t Σ_{i<j} max(0, ε − proximity)` with `m = N(N−1)/2`.
///
/// With `squared` set (the default training configuration) proximity is the
/// squared Euclidean distance, so `epsilon` thresholds squared meters;
/// cleared, it is the plain distance. Returns a constant zero for N < 2.
pub fn social_loss<F: Real>(
    tape: &mut Tape<F>,
    traj: Var,
    n_agents: usize,
    epsilon: f64,
    squared: bool,
) -> Var {
    tape.social_hinge(traj, n_agents, real::<F>(epsilon), squared)
}

/// Weighted sum `w1·l_f + w2·l_r + w3·(l_soc_f + l_soc_r)` on the tape.
pub fn total_loss<F: Real>(
    tape: &mut Tape<F>,
    l_f: Var,
    l_r: Var,
    l_soc_f: Var,
    l_soc_r: Var,
    weights: [f64; 3],
) -> Var {
    let a = tape.scale(l_f, real::<F>(weights[0]));
    let b = tape.scale(l_r, real::<F>(weights[1]));
    let soc = tape.add(l_soc_f, l_soc_r);
    let c = tape.scale(soc, real::<F>(weights[2]));
    let ab = tape.add(a, b);
    tape.add(ab, c)
}

/// Scalar loss values for one step or one epoch, in logging precision.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub l_f: f64,
    pub l_r: f64,
    pub l_soc_f: f64,
    pub l_soc_r: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn zero() -> Self {
        Self {
            l_f: 0.0,
            l_r: 0.0,
            l_soc_f: 0.0,
            l_soc_r: 0.0,
            total: 0.0,
        }
    }

    /// Reads the five scalars back off the tape.
    pub fn from_tape<F: Real>(
        tape: &Tape<F>,
        l_f: Var,
        l_r: Var,
        l_soc_f: Var,
        l_soc_r: Var,
        total: Var,
    ) -> Self {
        Self {
            l_f: tape.scalar(l_f).to_f64_lossy(),
            l_r: tape.scalar(l_r).to_f64_lossy(),
            l_soc_f: tape.scalar(l_soc_f).to_f64_lossy(),
            l_soc_r: tape.scalar(l_soc_r).to_f64_lossy(),
            total: tape.scalar(total).to_f64_lossy(),
        }
    }

    /// Whether the stored total re-sums from the parts under the given
    /// weights.
    pub fn is_consistent(&self, weights: [f64; 3], tol: f64) -> bool {
        let expect =
            weights[0] * self.l_f + weights[1] * self.l_r + weights[2] * (self.l_soc_f + self.l_soc_r);
        (self.total - expect).abs() <= tol
    }

    /// Elementwise running-mean update, for per-epoch averages.
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.l_f += other.l_f;
        self.l_r += other.l_r;
        self.l_soc_f += other.l_soc_f;
        self.l_soc_r += other.l_soc_r;
        self.total += other.total;
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            l_f: self.l_f * factor,
            l_r: self.l_r * factor,
            l_soc_f: self.l_soc_f * factor,
            l_soc_r: self.l_soc_r * factor,
            total: self.total * factor,
        }
    }

    pub fn csv_header() -> &'static str {
        "epoch,l_f,l_r,l_soc_f,l_soc_r,total"
    }

    pub fn csv_row(&self, epoch: usize) -> String {
        format!(
            "{epoch},{},{},{},{},{}",
            self.l_f, self.l_r, self.l_soc_f, self.l_soc_r, self.total
        )
    }
}
