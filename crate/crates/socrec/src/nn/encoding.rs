//! Sinusoidal temporal encodings for time-major token layouts.

use super::tensor::{real, Real, Tensor};

/// Builds the additive temporal encoding for `t_seq` timesteps of
/// `n_agents` agents, `(t_seq * n_agents, d_m)`.
///
/// Row `r` encodes absolute timestep `t_offset + r / n_agents` with the
/// usual interleaved sine/cosine bands, so all agents at one timestep share
/// one encoding and a decoder can be offset to continue the observed
/// window's clock.
pub fn temporal_encoding<F: Real>(
    n_agents: usize,
    t_seq: usize,
    d_m: usize,
    t_offset: usize,
) -> Tensor<F> {
    let rows = t_seq * n_agents;
    let mut enc = Tensor::zeros(rows, d_m);
    for r in 0..rows {
        let t = (t_offset + r / n_agents) as f64;
        for c in 0..d_m {
            let band = (c / 2) as f64;
            let rate = 10000f64.powf(2.0 * band / d_m as f64);
            let angle = t / rate;
            let v = if c % 2 == 0 { angle.sin() } else { angle.cos() };
            *enc.at_mut(r, c) = real::<F>(v);
        }
    }
    enc
}
