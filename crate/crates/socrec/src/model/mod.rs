//! The shared-encoder forecasting model.
//!
//! One transformer encoder (agent-aware attention) serves two heads: a
//! conditional-VAE forecaster whose latent prior is conditioned on the
//! observed past, and a masked-sequence VAE reconstructor whose posterior
//! comes from the masked past. Decoders are transformer decoders that
//! cross-attend to encoder features; the forecasting decoder is causally
//! masked and emits per-step displacements, the reconstruction decoder
//! emits absolute positions for all 8 observed timesteps.

mod forward;
mod params;

pub use forward::{
    decode_future_autoregressive, decode_future_teacher, decode_reconstruction, encode,
    future_positions, last_observed, past_input, past_positions, posterior_params_forecast,
    posterior_params_recon, prior_params, sample_predictions, sample_predictions_tempered,
    teacher_inputs, PredictionSet,
};
pub use params::{xavier, Bound, Checkpoint, NamedTensor, ParamSet, CHECKPOINT_VERSION};

use crate::nn::tensor::{Real, Tensor};
use crate::nn::NnError;
use params::init_rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{0} contains non-finite values")]
    NonFinite(&'static str),
    #[error("{0} is only available in training mode")]
    TrainingOnly(&'static str),
    #[error("invalid hyperparameters: {0}")]
    Invalid(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Architecture and training hyperparameters.
///
/// `r_mask` is the past-masking percentage, `epsilon` the social-loss
/// threshold, `d_threshold` the difficulty threshold in `[0, 1]`, `n_t`
/// the warm-up epoch before the first augmentation refresh, and `n_int`
/// the refresh interval thereafter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub d_m: usize,
    pub d_ff: usize,
    pub d_z: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_recon_dec_layers: usize,
    pub n_atthead: usize,
    pub dropout: f64,
    pub r_mask: f64,
    pub epsilon: f64,
    pub d_threshold: f64,
    pub n_t: usize,
    pub n_int: usize,
    pub lr: f64,
    pub gamma: f64,
    pub stepsize: usize,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
}

impl HyperParams {
    /// Full-scale defaults for the first benchmark subset.
    pub fn eth() -> Self {
        Self {
            d_m: 128,
            d_ff: 512,
            d_z: 32,
            n_enc_layers: 1,
            n_dec_layers: 1,
            n_recon_dec_layers: 1,
            n_atthead: 8,
            dropout: 0.1,
            r_mask: 30.0,
            epsilon: 0.1,
            d_threshold: 0.5,
            n_t: 10,
            n_int: 10,
            lr: 1e-4,
            gamma: 0.8,
            stepsize: 10,
            w1: 1.0,
            w2: 1.0,
            w3: 1.0,
        }
    }

    pub fn hotel() -> Self {
        Self {
            d_m: 64,
            d_ff: 256,
            n_enc_layers: 2,
            r_mask: 10.0,
            n_t: 20,
            stepsize: 20,
            ..Self::eth()
        }
    }

    pub fn univ() -> Self {
        Self {
            d_m: 64,
            d_ff: 128,
            n_enc_layers: 2,
            epsilon: 0.05,
            r_mask: 10.0,
            n_t: 20,
            stepsize: 20,
            ..Self::eth()
        }
    }

    pub fn zara1() -> Self {
        Self {
            d_m: 256,
            d_ff: 512,
            r_mask: 30.0,
            n_t: 20,
            gamma: 0.5,
            stepsize: 10,
            ..Self::eth()
        }
    }

    pub fn zara2() -> Self {
        Self {
            d_m: 128,
            d_ff: 512,
            n_enc_layers: 2,
            r_mask: 20.0,
            n_t: 20,
            stepsize: 40,
            ..Self::eth()
        }
    }

    pub fn sdd() -> Self {
        Self {
            d_m: 128,
            d_ff: 256,
            r_mask: 10.0,
            n_t: 10,
            stepsize: 10,
            ..Self::eth()
        }
    }

    /// Small configuration for CPU-scale experiments on synthetic data.
    pub fn desk() -> Self {
        Self {
            d_m: 32,
            d_ff: 64,
            d_z: 8,
            n_enc_layers: 1,
            n_dec_layers: 1,
            n_recon_dec_layers: 1,
            n_atthead: 4,
            dropout: 0.0,
            r_mask: 30.0,
            epsilon: 0.1,
            d_threshold: 0.5,
            n_t: 10,
            n_int: 10,
            lr: 1e-3,
            gamma: 0.9,
            stepsize: 20,
            w1: 1.0,
            w2: 1.0,
            w3: 1.0,
        }
    }

    /// Look up a named preset.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "eth" => Some(Self::eth()),
            "hotel" => Some(Self::hotel()),
            "univ" => Some(Self::univ()),
            "zara1" => Some(Self::zara1()),
            "zara2" => Some(Self::zara2()),
            "sdd" => Some(Self::sdd()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("d_m", self.d_m),
            ("d_ff", self.d_ff),
            ("d_z", self.d_z),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("n_recon_dec_layers", self.n_recon_dec_layers),
            ("n_atthead", self.n_atthead),
            ("n_t", self.n_t),
            ("n_int", self.n_int),
            ("stepsize", self.stepsize),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Invalid(format!("{name} must be positive")));
            }
        }
        if self.d_m % self.n_atthead != 0 {
            return Err(ModelError::Invalid(format!(
                "d_m {} not divisible by {} heads",
                self.d_m, self.n_atthead
            )));
        }
        if !(0.0..=1.0).contains(&self.d_threshold) {
            return Err(ModelError::Invalid("d_threshold outside [0, 1]".into()));
        }
        if !(0.0..=100.0).contains(&self.r_mask) {
            return Err(ModelError::Invalid("r_mask outside [0, 100]".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Invalid("dropout outside [0, 1)".into()));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("gamma", self.gamma),
            ("epsilon", self.epsilon),
            ("w1", self.w1),
            ("w2", self.w2),
            ("w3", self.w3),
        ] {
            if !v.is_finite() {
                return Err(ModelError::Invalid(format!("{name} must be finite")));
            }
        }
        if self.lr <= 0.0 {
            return Err(ModelError::Invalid("lr must be positive".into()));
        }
        if self.gamma <= 0.0 || self.gamma > 1.0 {
            return Err(ModelError::Invalid("gamma outside (0, 1]".into()));
        }
        Ok(())
    }
}

/// All learned weights plus the epoch counter.
#[derive(Clone, Debug)]
pub struct ModelState<F: Real> {
    pub hyper: HyperParams,
    pub params: ParamSet<F>,
    pub epoch: usize,
}

impl<F: Real> ModelState<F> {
    /// Fresh model with deterministic per-parameter initialization.
    pub fn init(hyper: HyperParams, seed: u64) -> Result<Self, ModelError> {
        hyper.validate()?;
        let mut params = ParamSet::new();
        let d_m = hyper.d_m;
        let d_h = d_m / hyper.n_atthead;
        let d_z = hyper.d_z;
        let d_ff = hyper.d_ff;

        let weight = |params: &mut ParamSet<F>, name: String, rows, cols, scale| {
            let t = xavier(rows, cols, scale, &mut init_rng(seed, &name));
            params.add(name, t);
        };
        let zeros = |params: &mut ParamSet<F>, name: String, rows, cols| {
            params.add(name, Tensor::zeros(rows, cols));
        };
        let attn_block = |params: &mut ParamSet<F>, prefix: &str, n_heads: usize| {
            for h in 0..n_heads {
                for (suffix, rows, cols) in [
                    ("qs", d_m, d_h),
                    ("ks", d_m, d_h),
                    ("qo", d_m, d_h),
                    ("ko", d_m, d_h),
                    ("v", d_m, d_h),
                    ("o", d_h, d_m),
                ] {
                    let name = format!("{prefix}{h}.{suffix}");
                    let t = xavier(rows, cols, 1.0, &mut init_rng(seed, &name));
                    params.add(name, t);
                }
            }
        };
        let layer_norm = |params: &mut ParamSet<F>, prefix: &str| {
            let mut g = Tensor::zeros(1, d_m);
            for v in g.data_mut() {
                *v = F::one();
            }
            params.add(format!("{prefix}.g"), g);
            params.add(format!("{prefix}.b"), Tensor::zeros(1, d_m));
        };

        // shared input embedding over (x, y, masked-indicator)
        weight(&mut params, "embed_past.w".into(), 3, d_m, 1.0);
        zeros(&mut params, "embed_past.b".into(), 1, d_m);
        // future embedding for the forecast posterior
        weight(&mut params, "embed_future.w".into(), 2, d_m, 1.0);
        zeros(&mut params, "embed_future.b".into(), 1, d_m);
        // decoder token embedding (previous position)
        weight(&mut params, "dec_in.w".into(), 2, d_m, 1.0);
        zeros(&mut params, "dec_in.b".into(), 1, d_m);

        for j in 0..hyper.n_enc_layers {
            attn_block(&mut params, &format!("enc{j}.attn"), hyper.n_atthead);
            layer_norm(&mut params, &format!("enc{j}.ln1"));
            weight(&mut params, format!("enc{j}.ff1.w"), d_m, d_ff, 1.0);
            zeros(&mut params, format!("enc{j}.ff1.b"), 1, d_ff);
            weight(&mut params, format!("enc{j}.ff2.w"), d_ff, d_m, 1.0);
            zeros(&mut params, format!("enc{j}.ff2.b"), 1, d_m);
            layer_norm(&mut params, &format!("enc{j}.ln2"));
        }

        // latent heads: small weights so early latents stay near-standard
        for head in ["cpn", "ppdn", "rpdn"] {
            for part in ["mu", "lv"] {
                let name = format!("{head}.{part}.w");
                weight(&mut params, name, d_m, d_z, 0.1);
                zeros(&mut params, format!("{head}.{part}.b"), 1, d_z);
            }
        }
        // forecast-posterior cross-attention over (future -> past)
        attn_block(&mut params, "ppdn.attn", hyper.n_atthead);
        layer_norm(&mut params, "ppdn.ln");

        // latent conditioning projections
        weight(&mut params, "zproj_f.w".into(), d_z, d_m, 1.0);
        zeros(&mut params, "zproj_f.b".into(), 1, d_m);
        weight(&mut params, "zproj_r.w".into(), d_z, d_m, 1.0);
        zeros(&mut params, "zproj_r.b".into(), 1, d_m);

        for j in 0..hyper.n_dec_layers {
            attn_block(&mut params, &format!("dec{j}.self"), hyper.n_atthead);
            layer_norm(&mut params, &format!("dec{j}.ln1"));
            attn_block(&mut params, &format!("dec{j}.cross"), hyper.n_atthead);
            layer_norm(&mut params, &format!("dec{j}.ln2"));
            weight(&mut params, format!("dec{j}.ff1.w"), d_m, d_ff, 1.0);
            zeros(&mut params, format!("dec{j}.ff1.b"), 1, d_ff);
            weight(&mut params, format!("dec{j}.ff2.w"), d_ff, d_m, 1.0);
            zeros(&mut params, format!("dec{j}.ff2.b"), 1, d_m);
            layer_norm(&mut params, &format!("dec{j}.ln3"));
        }
        weight(&mut params, "dec_out.w".into(), d_m, 2, 1.0);
        zeros(&mut params, "dec_out.b".into(), 1, 2);

        for j in 0..hyper.n_recon_dec_layers {
            attn_block(&mut params, &format!("rec{j}.self"), hyper.n_atthead);
            layer_norm(&mut params, &format!("rec{j}.ln1"));
            attn_block(&mut params, &format!("rec{j}.cross"), hyper.n_atthead);
            layer_norm(&mut params, &format!("rec{j}.ln2"));
            weight(&mut params, format!("rec{j}.ff1.w"), d_m, d_ff, 1.0);
            zeros(&mut params, format!("rec{j}.ff1.b"), 1, d_ff);
            weight(&mut params, format!("rec{j}.ff2.w"), d_ff, d_m, 1.0);
            zeros(&mut params, format!("rec{j}.ff2.b"), 1, d_m);
            layer_norm(&mut params, &format!("rec{j}.ln3"));
        }
        weight(&mut params, "rec_out.w".into(), d_m, 2, 1.0);
        zeros(&mut params, "rec_out.b".into(), 1, 2);

        Ok(Self { hyper, params, epoch: 0 })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            epoch: self.epoch,
            hyper: self.hyper,
            params: self
                .params
                .iter()
                .map(|(n, t)| NamedTensor::from_tensor(n, t))
                .collect(),
            trainer: None,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        ck.hyper.validate()?;
        let mut fresh = Self::init(ck.hyper, 0)?;
        if ck.params.len() != fresh.params.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} tensors, found {}",
                fresh.params.len(),
                ck.params.len()
            )));
        }
        for named in &ck.params {
            let slot = fresh
                .params
                .get_mut(&named.name)
                .ok_or_else(|| ModelError::Checkpoint(format!("unknown tensor {}", named.name)))?;
            let loaded: Tensor<F> = named.to_tensor()?;
            if loaded.shape() != slot.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {}: shape {:?} does not match model {:?}",
                    named.name,
                    loaded.shape(),
                    slot.shape()
                )));
            }
            *slot = loaded;
        }
        fresh.epoch = ck.epoch;
        Ok(fresh)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_internally_consistent() {
        for name in ["eth", "hotel", "univ", "zara1", "zara2", "sdd", "desk"] {
            let hp = HyperParams::preset(name).unwrap();
            hp.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        assert!(HyperParams::preset("nope").is_none());
    }

    #[test]
    fn head_count_must_divide_model_width() {
        let hp = HyperParams { n_atthead: 5, ..HyperParams::desk() };
        assert!(hp.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = ModelState::<f64>::init(HyperParams::desk(), 1).unwrap();
        let b = ModelState::<f64>::init(HyperParams::desk(), 1).unwrap();
        let c = ModelState::<f64>::init(HyperParams::desk(), 2).unwrap();
        for i in 0..a.params.len() {
            assert_eq!(a.params.tensor(i), b.params.tensor(i));
        }
        assert_ne!(a.params.tensor(0), c.params.tensor(0));
        assert!(a.params.all_finite());
    }

    #[test]
    fn checkpoint_json_round_trips_byte_identically() {
        let state = ModelState::<f64>::init(HyperParams::desk(), 3).unwrap();
        let json = state.to_checkpoint().to_json();
        let reloaded = ModelState::<f64>::from_checkpoint(&Checkpoint::from_json(&json).unwrap()).unwrap();
        let rejson = reloaded.to_checkpoint().to_json();
        assert_eq!(json, rejson);
        for i in 0..state.params.len() {
            assert_eq!(state.params.tensor(i), reloaded.params.tensor(i));
        }
    }

    #[test]
    fn checkpoint_shape_mismatch_is_rejected() {
        let state = ModelState::<f64>::init(HyperParams::desk(), 3).unwrap();
        let mut ck = state.to_checkpoint();
        ck.params[0].bits.pop();
        assert!(ModelState::<f64>::from_checkpoint(&ck).is_err());
    }
}
