//! Diagonal Gaussian latent heads: sampling and closed-form divergence.

use super::tape::{Tape, Var};
use super::tensor::{real, Real, Tensor};
use super::NnError;

/// A diagonal Gaussian per row, parameterized by mean and log-variance.
///
/// Keeping the log-variance rather than sigma itself makes the standard
/// deviation positive by construction (`sigma = exp(logvar / 2)`). Rows are
/// agents, columns latent dimensions.
#[derive(Clone, Copy, Debug)]
pub struct GaussianParams {
    pub mu: Var,
    pub logvar: Var,
}

impl GaussianParams {
    /// Standard normal of the given shape, as constant-zero leaves.
    pub fn standard<F: Real>(tape: &mut Tape<F>, rows: usize, dims: usize) -> Self {
        let mu = tape.leaf(Tensor::zeros(rows, dims));
        let logvar = tape.leaf(Tensor::zeros(rows, dims));
        Self { mu, logvar }
    }

    /// Elementwise standard deviation, `exp(logvar / 2)`.
    pub fn sigma<F: Real>(&self, tape: &mut Tape<F>) -> Var {
        let half = tape.scale(self.logvar, real::<F>(0.5));
        tape.exp(half)
    }

    pub fn shape<F: Real>(&self, tape: &Tape<F>) -> (usize, usize) {
        tape.value(self.mu).shape()
    }
}

/// Draws `mu + sigma * noise` with externally supplied standard-normal
/// noise, keeping the sample differentiable in `mu` and `logvar`.
pub fn reparameterize<F: Real>(
    tape: &mut Tape<F>,
    params: &GaussianParams,
    noise: &Tensor<F>,
) -> Result<Var, NnError> {
    let shape = params.shape(tape);
    if tape.value(params.logvar).shape() != shape || noise.shape() != shape {
        return Err(NnError::Shape {
            context: "reparameterized sample",
            expected: format!("{}x{}", shape.0, shape.1),
            got: format!("{}x{}", noise.shape().0, noise.shape().1),
        });
    }
    let sigma = params.sigma(tape);
    let scaled = tape.mul_const(sigma, noise);
    Ok(tape.add(params.mu, scaled))
}

/// Closed-form KL divergence `KL(q || p)` between diagonal Gaussians,
/// summed over latent dimensions and averaged over rows.
pub fn gaussian_kl<F: Real>(
    tape: &mut Tape<F>,
    q: &GaussianParams,
    p: &GaussianParams,
) -> Result<Var, NnError> {
    let shape = q.shape(tape);
    for var in [q.logvar, p.mu, p.logvar] {
        if tape.value(var).shape() != shape {
            return Err(NnError::Shape {
                context: "divergence operands",
                expected: format!("{}x{}", shape.0, shape.1),
                got: format!(
                    "{}x{}",
                    tape.value(var).shape().0,
                    tape.value(var).shape().1
                ),
            });
        }
    }
    // 1/2 * [ (lv_p - lv_q) + exp(lv_q - lv_p) + (mu_q - mu_p)^2 * exp(-lv_p) - 1 ]
    let lv_diff = tape.sub(p.logvar, q.logvar);
    let neg_diff = tape.sub(q.logvar, p.logvar);
    let var_ratio = tape.exp(neg_diff);
    let mu_diff = tape.sub(q.mu, p.mu);
    let mu_diff_sq = tape.mul(mu_diff, mu_diff);
    let neg_lv_p = tape.scale(p.logvar, -F::one());
    let inv_var_p = tape.exp(neg_lv_p);
    let mahalanobis = tape.mul(mu_diff_sq, inv_var_p);

    let a = tape.add(lv_diff, var_ratio);
    let b = tape.add(a, mahalanobis);
    let c = tape.add_scalar(b, -F::one());
    let total = tape.sum(c);
    Ok(tape.scale(total, real::<F>(0.5 / shape.0 as f64)))
}

/// `KL(q || N(0, I))`, the divergence against a standard normal.
pub fn standard_kl<F: Real>(tape: &mut Tape<F>, q: &GaussianParams) -> Result<Var, NnError> {
    let (rows, dims) = q.shape(tape);
    let p = GaussianParams::standard(tape, rows, dims);
    gaussian_kl(tape, q, &p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn unit_mean_shift_diverges_by_half() {
        // KL(N(1,1) || N(0,1)) = 1/2
        let mut tape = Tape::<f64>::new();
        let q = GaussianParams {
            mu: tape.leaf(Tensor::scalar(1.0)),
            logvar: tape.leaf(Tensor::scalar(0.0)),
        };
        let kl = standard_kl(&mut tape, &q).unwrap();
        assert_relative_eq!(tape.scalar(kl), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn identical_distributions_diverge_by_zero() {
        let mut tape = Tape::<f64>::new();
        let mu = Tensor::from_vec(2, 3, vec![0.3, -1.0, 2.0, 0.0, 0.5, -0.2]);
        let lv = Tensor::from_vec(2, 3, vec![0.1, -0.4, 0.0, 1.0, -1.0, 0.2]);
        let q = GaussianParams {
            mu: tape.leaf(mu.clone()),
            logvar: tape.leaf(lv.clone()),
        };
        let p = GaussianParams {
            mu: tape.leaf(mu),
            logvar: tape.leaf(lv),
        };
        let kl = gaussian_kl(&mut tape, &q, &p).unwrap();
        assert_relative_eq!(tape.scalar(kl), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn divergence_averages_over_rows() {
        // row 1: KL = 1/2, row 2: identical -> 0; average = 1/4
        let mut tape = Tape::<f64>::new();
        let q = GaussianParams {
            mu: tape.leaf(Tensor::from_vec(2, 1, vec![1.0, 0.0])),
            logvar: tape.leaf(Tensor::zeros(2, 1)),
        };
        let kl = standard_kl(&mut tape, &q).unwrap();
        assert_relative_eq!(tape.scalar(kl), 0.25, epsilon = 1e-12);
    }

    #[test]
    fn reparameterized_sample_is_mu_plus_sigma_noise() {
        // mu = (1, 2), sigma = (1, 3), noise = (0.5, -1) -> (1.5, -1)
        let mut tape = Tape::<f64>::new();
        let q = GaussianParams {
            mu: tape.leaf(Tensor::from_vec(1, 2, vec![1.0, 2.0])),
            logvar: tape.leaf(Tensor::from_vec(1, 2, vec![0.0, 2.0 * 3.0f64.ln()])),
        };
        let noise = Tensor::from_vec(1, 2, vec![0.5, -1.0]);
        let z = reparameterize(&mut tape, &q, &noise).unwrap();
        let got = tape.value(z);
        assert_relative_eq!(got.at(0, 0), 1.5, epsilon = 1e-12);
        assert_relative_eq!(got.at(0, 1), -1.0, epsilon = 1e-9);
    }

    #[test]
    fn sigma_is_positive_for_any_logvar() {
        let mut tape = Tape::<f64>::new();
        let q = GaussianParams {
            mu: tape.leaf(Tensor::zeros(1, 3)),
            logvar: tape.leaf(Tensor::from_vec(1, 3, vec![-20.0, 0.0, 8.0])),
        };
        let sigma = q.sigma(&mut tape);
        for v in tape.value(sigma).data() {
            assert!(*v > 0.0);
        }
    }

    #[test]
    fn mismatched_noise_shape_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let q = GaussianParams {
            mu: tape.leaf(Tensor::zeros(2, 4)),
            logvar: tape.leaf(Tensor::zeros(2, 4)),
        };
        let noise = Tensor::zeros(2, 3);
        assert!(reparameterize(&mut tape, &q, &noise).is_err());
    }
}
