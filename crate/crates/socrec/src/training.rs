//! The end-to-end training loop: per-scene forward/backward passes, Adam,
//! the step-decay schedule, augmentation refreshes, and exact-resume
//! checkpointing.
//!
//! Every random draw — shuffling, scene rotation, masking, latent noise,
//! dropout — comes from a stream derived from the run seed and the epoch
//! number, so a run is reproducible end-to-end and a resumed run continues
//! bit-for-bit where it left off.

use crate::curriculum::{
    difficulty_flags, inverse_flags, linear_extrapolate, random_flags, refresh_pool,
    AugmentationPool, CurriculumError, DifficultyLedger, ExtrapolationMode,
};
use crate::data::{
    generate_synthetic_dataset, mask_past, normalize_scene, MaskedPast, Scene, SourceTag,
    SynthConfig,
};
use crate::losses::{
    forecast_loss, recon_loss, social_loss, total_loss, LossBreakdown,
};
use crate::model::{
    decode_future_teacher, decode_reconstruction, encode, future_positions, last_observed,
    past_input, past_positions, posterior_params_forecast, posterior_params_recon, prior_params,
    teacher_inputs, Bound, Checkpoint, HyperParams, ModelError, ModelState, NamedTensor, ParamSet,
};
use crate::nn::gaussian::reparameterize;
use crate::nn::tape::Tape;
use crate::nn::tensor::{real, Real, Tensor};
use crate::rng::derive;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config line {line}: {detail}")]
    Config { line: usize, detail: String },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch} on scene {scene}")]
    NonFiniteLoss { epoch: usize, scene: String },
    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGrad { param: String },
    #[error("checkpoint is missing trainer state; it cannot resume training")]
    NoTrainerState,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Curriculum(#[from] CurriculumError),
}

/// How the training set is augmented at refresh epochs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Pseudo-trajectories for samples flagged by the loss-trend rule.
    Difficulty,
    /// Pseudo-trajectories for uniformly chosen samples (same count).
    Random,
    /// Pseudo-trajectories for the *easy* samples (flipped indicator).
    Inverse,
    /// No augmentation at all.
    None,
    /// Linear extrapolation from the first two observed steps.
    Linear1,
    /// Linear extrapolation from the last two observed steps.
    Linear2,
    /// Fresh social-force synthetic scenes (same count).
    SocialForce,
    /// Reconstructor trained alone first, then frozen; difficulty
    /// augmentation during the main phase.
    PretrainedRecon,
    /// Difficulty pool generated once at the warm-up epoch, never
    /// refreshed.
    InitialAug,
}

impl Strategy {
    pub const ALL: [Strategy; 9] = [
        Strategy::Difficulty,
        Strategy::Random,
        Strategy::Inverse,
        Strategy::None,
        Strategy::Linear1,
        Strategy::Linear2,
        Strategy::SocialForce,
        Strategy::PretrainedRecon,
        Strategy::InitialAug,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Difficulty => "difficulty",
            Strategy::Random => "random",
            Strategy::Inverse => "inverse",
            Strategy::None => "none",
            Strategy::Linear1 => "linear1",
            Strategy::Linear2 => "linear2",
            Strategy::SocialForce => "social-force",
            Strategy::PretrainedRecon => "pretrained-recon",
            Strategy::InitialAug => "initial-aug",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s)
    }
}

/// Everything a run needs beyond the dataset itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hyper: HyperParams,
    pub n_epochs: usize,
    /// Scenes per optimizer step (gradients averaged within a batch).
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
    pub social_loss: bool,
    /// Hinge thresholds squared distance when set, plain distance cleared.
    pub social_loss_squared: bool,
    pub reconstructor: bool,
    pub strategy: Strategy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hyper: HyperParams::eth(),
            n_epochs: 100,
            batch_size: 1,
            seed: 1,
            shuffle: true,
            social_loss: true,
            social_loss_squared: true,
            reconstructor: true,
            strategy: Strategy::Difficulty,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.hyper.validate().map_err(TrainError::Model)?;
        let fail = |detail: String| TrainError::Config { line: 0, detail };
        if self.n_epochs == 0 {
            return Err(fail("n_epochs must be positive".into()));
        }
        if self.hyper.n_t >= self.n_epochs && self.strategy != Strategy::None {
            return Err(fail(format!(
                "warm-up n_t = {} must be below n_epochs = {}",
                self.hyper.n_t, self.n_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(fail("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Parses a line-oriented `key = value` config. `#` starts a comment;
    /// unknown keys are errors. `preset = <name>` loads a hyperparameter
    /// preset and later keys override individual fields.
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut cfg = TrainConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or_else(|| TrainError::Config {
                line,
                detail: format!("expected `key = value`, got `{body}`"),
            })?;
            let key = key.trim();
            let value = value.trim();
            cfg.apply(key, value, line)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key = value` assignment.
    pub fn apply(&mut self, key: &str, value: &str, line: usize) -> Result<(), TrainError> {
        fn num<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T, TrainError> {
            value.parse().map_err(|_| TrainError::Config {
                line,
                detail: format!("invalid value `{value}` for `{key}`"),
            })
        }
        let h = &mut self.hyper;
        match key {
            "preset" => {
                self.hyper = HyperParams::preset(value).ok_or_else(|| TrainError::Config {
                    line,
                    detail: format!("unknown preset `{value}`"),
                })?
            }
            "d_m" => h.d_m = num(key, value, line)?,
            "d_ff" => h.d_ff = num(key, value, line)?,
            "d_z" => h.d_z = num(key, value, line)?,
            "n_enc_layers" => h.n_enc_layers = num(key, value, line)?,
            "n_dec_layers" => h.n_dec_layers = num(key, value, line)?,
            "n_recon_dec_layers" => h.n_recon_dec_layers = num(key, value, line)?,
            "n_atthead" => h.n_atthead = num(key, value, line)?,
            "dropout" => h.dropout = num(key, value, line)?,
            "r_mask" => h.r_mask = num(key, value, line)?,
            "epsilon" => h.epsilon = num(key, value, line)?,
            "d_threshold" => h.d_threshold = num(key, value, line)?,
            "n_t" => h.n_t = num(key, value, line)?,
            "n_int" => h.n_int = num(key, value, line)?,
            "lr" => h.lr = num(key, value, line)?,
            "gamma" => h.gamma = num(key, value, line)?,
            "stepsize" => h.stepsize = num(key, value, line)?,
            "w1" => h.w1 = num(key, value, line)?,
            "w2" => h.w2 = num(key, value, line)?,
            "w3" => h.w3 = num(key, value, line)?,
            "n_epochs" => self.n_epochs = num(key, value, line)?,
            "batch_size" => self.batch_size = num(key, value, line)?,
            "seed" => self.seed = num(key, value, line)?,
            "shuffle" => self.shuffle = num(key, value, line)?,
            "social_loss" => self.social_loss = num(key, value, line)?,
            "social_loss_squared" => self.social_loss_squared = num(key, value, line)?,
            "reconstructor" => self.reconstructor = num(key, value, line)?,
            "strategy" => {
                self.strategy = Strategy::parse(value).ok_or_else(|| TrainError::Config {
                    line,
                    detail: format!("unknown strategy `{value}`"),
                })?
            }
            _ => {
                return Err(TrainError::Config {
                    line,
                    detail: format!("unknown key `{key}`"),
                })
            }
        }
        Ok(())
    }

    /// Stable textual form; also the input to [`TrainConfig::config_hash`].
    pub fn canonical_string(&self) -> String {
        let h = &self.hyper;
        let mut s = String::new();
        for (k, v) in [
            ("d_m", h.d_m as f64),
            ("d_ff", h.d_ff as f64),
            ("d_z", h.d_z as f64),
            ("n_enc_layers", h.n_enc_layers as f64),
            ("n_dec_layers", h.n_dec_layers as f64),
            ("n_recon_dec_layers", h.n_recon_dec_layers as f64),
            ("n_atthead", h.n_atthead as f64),
            ("dropout", h.dropout),
            ("r_mask", h.r_mask),
            ("epsilon", h.epsilon),
            ("d_threshold", h.d_threshold),
            ("n_t", h.n_t as f64),
            ("n_int", h.n_int as f64),
            ("lr", h.lr),
            ("gamma", h.gamma),
            ("stepsize", h.stepsize as f64),
            ("w1", h.w1),
            ("w2", h.w2),
            ("w3", h.w3),
            ("n_epochs", self.n_epochs as f64),
            ("batch_size", self.batch_size as f64),
            ("seed", self.seed as f64),
            ("shuffle", self.shuffle as u8 as f64),
            ("social_loss", self.social_loss as u8 as f64),
            ("social_loss_squared", self.social_loss_squared as u8 as f64),
            ("reconstructor", self.reconstructor as u8 as f64),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "strategy = {}", self.strategy.as_str());
        s
    }

    /// FNV-1a of the canonical string: stable across platforms and runs.
    pub fn config_hash(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for b in self.canonical_string().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

/// Step-decay schedule: `lr₀ · gamma^⌊epoch/stepsize⌋` with 1-indexed
/// epochs.
pub fn scheduler_step(lr0: f64, epoch: usize, gamma: f64, stepsize: usize) -> f64 {
    lr0 * gamma.powi((epoch / stepsize) as i32)
}

/// Adam with bias correction; moments live in the training precision.
#[derive(Clone, Debug)]
pub struct Adam<F: Real> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(params: &ParamSet<F>) -> Self {
        let zeros: Vec<Tensor<F>> = (0..params.len())
            .map(|i| {
                let t = params.tensor(i);
                Tensor::zeros(t.rows(), t.cols())
            })
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update over every non-frozen parameter. Gradients must align
    /// with the registry order; non-finite gradients abort.
    pub fn step(
        &mut self,
        params: &mut ParamSet<F>,
        grads: &[Tensor<F>],
        lr: f64,
        frozen: &[bool],
    ) -> Result<(), TrainError> {
        assert_eq!(grads.len(), params.len(), "gradient list out of sync");
        for i in 0..params.len() {
            if !grads[i].is_finite() {
                return Err(TrainError::NonFiniteGrad {
                    param: params.name(i).to_string(),
                });
            }
        }
        self.t += 1;
        let b1 = real::<F>(self.beta1);
        let b2 = real::<F>(self.beta2);
        let one = F::one();
        let corr1 = real::<F>(1.0 - self.beta1.powi(self.t as i32));
        let corr2 = real::<F>(1.0 - self.beta2.powi(self.t as i32));
        let lr = real::<F>(lr);
        let eps = real::<F>(self.eps);
        for i in 0..params.len() {
            if frozen.get(i).copied().unwrap_or(false) {
                continue;
            }
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.tensor_mut(i).data_mut();
            for j in 0..g.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let m_hat = m[j] / corr1;
                let v_hat = v[j] / corr2;
                p[j] = p[j] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    fn snapshot(&self, params: &ParamSet<F>) -> (Vec<NamedTensor>, Vec<NamedTensor>, u64) {
        let named = |ts: &[Tensor<F>]| {
            ts.iter()
                .enumerate()
                .map(|(i, t)| NamedTensor::from_tensor(params.name(i), t))
                .collect()
        };
        (named(&self.m), named(&self.v), self.t)
    }

    fn restore(
        params: &ParamSet<F>,
        m: &[NamedTensor],
        v: &[NamedTensor],
        t: u64,
    ) -> Result<Self, TrainError> {
        let load = |named: &[NamedTensor]| -> Result<Vec<Tensor<F>>, TrainError> {
            if named.len() != params.len() {
                return Err(TrainError::Model(ModelError::Checkpoint(
                    "optimizer state does not match the parameter registry".into(),
                )));
            }
            named
                .iter()
                .enumerate()
                .map(|(i, nt)| {
                    if nt.name != params.name(i) {
                        return Err(TrainError::Model(ModelError::Checkpoint(format!(
                            "optimizer slot {i} holds {}, expected {}",
                            nt.name,
                            params.name(i)
                        ))));
                    }
                    nt.to_tensor().map_err(TrainError::Model)
                })
                .collect()
        };
        let mut adam = Self::new(params);
        adam.m = load(m)?;
        adam.v = load(v)?;
        adam.t = t;
        Ok(adam)
    }
}

/// One finished epoch in the report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub lr: f64,
    pub n_scenes: usize,
    pub wall_secs: f64,
}

/// One pool refresh in the report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefreshRecord {
    pub epoch: usize,
    pub flagged: usize,
    pub pool_size: usize,
    pub rejected: usize,
}

/// Everything a run produced besides the weights.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub refreshes: Vec<RefreshRecord>,
    pub checkpoint_path: Option<String>,
}

impl TrainReport {
    /// Epochs must run 1, 2, 3, … without gaps.
    pub fn epochs_contiguous(&self) -> bool {
        self.epochs
            .iter()
            .enumerate()
            .all(|(i, r)| r.epoch == i + 1)
    }

    /// The per-epoch loss log in CSV form.
    pub fn csv_log(&self) -> String {
        let mut out = String::from(LossBreakdown::csv_header());
        out.push('\n');
        for r in &self.epochs {
            out.push_str(&r.losses.csv_row(r.epoch));
            out.push('\n');
        }
        out
    }

    /// JSON run summary: config hash, final losses, refresh schedule.
    pub fn summary_json(&self, cfg: &TrainConfig) -> String {
        let value = serde_json::json!({
            "config_hash": format!("{:016x}", cfg.config_hash()),
            "seed": cfg.seed,
            "strategy": cfg.strategy.as_str(),
            "epochs_run": self.epochs.len(),
            "final_losses": self.epochs.last().map(|r| r.losses),
            "refresh_epochs": self.refreshes.iter().map(|r| r.epoch).collect::<Vec<_>>(),
            "pool_sizes": self.refreshes.iter().map(|r| r.pool_size).collect::<Vec<_>>(),
            "checkpoint": self.checkpoint_path,
        });
        value.to_string()
    }
}

/// Serialized trainer internals, carried in the checkpoint's trainer slot
/// so a resumed run continues exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainerState {
    pub adam_m: Vec<NamedTensor>,
    pub adam_v: Vec<NamedTensor>,
    pub adam_t: u64,
    pub ledger: Vec<(u64, usize, f64)>,
    pub pool: Vec<Scene>,
    pub pool_epoch: usize,
    pub pool_rejected: usize,
    pub phase1_done: bool,
}

fn randn<F: Real, R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor<F> {
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data_mut() {
        let x: f64 = StandardNormal.sample(rng);
        *v = real::<F>(x);
    }
    t
}

/// Forward, losses, and backward for a single scene. Returns the loss
/// breakdown, per-parameter gradients, and the forecast term for the
/// difficulty ledger.
fn scene_step<F: Real>(
    state: &ModelState<F>,
    cfg: &TrainConfig,
    scene: &Scene,
    rng: &mut ChaCha8Rng,
    recon_only: bool,
) -> Result<(LossBreakdown, Vec<Tensor<F>>, f64), ModelError> {
    let (norm, _) = normalize_scene(scene, rng);
    let n = norm.n_agents();
    let hp = &state.hyper;

    let mut tape = Tape::new();
    let bound = Bound::new(&state.params, &mut tape);

    let (l_f, l_soc_f) = if recon_only {
        (tape.scalar_leaf(F::zero()), tape.scalar_leaf(F::zero()))
    } else {
        let past = past_input::<F>(&MaskedPast::unmasked(&norm));
        let future = future_positions::<F>(&norm);
        let teacher = teacher_inputs::<F>(&norm);
        let obs = last_observed::<F>(&norm);
        let noise = randn::<F, _>(rng, n, hp.d_z);

        let feats = encode(&mut tape, &bound, hp, &past, true, rng)?;
        let prior = prior_params(&mut tape, &bound, feats, n);
        let post = posterior_params_forecast(&mut tape, &bound, hp, feats, &future, n, true, rng)?;
        let z = reparameterize(&mut tape, &post, &noise)?;
        let pred = decode_future_teacher(
            &mut tape, &bound, hp, feats, z, &teacher, &obs, true, rng,
        )?;
        let l_f = forecast_loss(&mut tape, pred, &future, &post, &prior)?;
        let l_soc_f = if cfg.social_loss {
            social_loss(&mut tape, pred, n, hp.epsilon, cfg.social_loss_squared)
        } else {
            tape.scalar_leaf(F::zero())
        };
        (l_f, l_soc_f)
    };

    let (l_r, l_soc_r) = if cfg.reconstructor {
        let masked = mask_past(&norm, hp.r_mask, rng);
        let past_gt = past_positions::<F>(&norm);
        let noise = randn::<F, _>(rng, n, hp.d_z);
        let feats = encode(&mut tape, &bound, hp, &past_input::<F>(&masked), true, rng)?;
        let post = posterior_params_recon(&mut tape, &bound, feats, n);
        let z = reparameterize(&mut tape, &post, &noise)?;
        let recon = decode_reconstruction(&mut tape, &bound, hp, feats, z, n, true, rng)?;
        let l_r = recon_loss(&mut tape, recon, &past_gt, &post)?;
        let l_soc_r = if cfg.social_loss {
            social_loss(&mut tape, recon, n, hp.epsilon, cfg.social_loss_squared)
        } else {
            tape.scalar_leaf(F::zero())
        };
        (l_r, l_soc_r)
    } else {
        (tape.scalar_leaf(F::zero()), tape.scalar_leaf(F::zero()))
    };

    let total = total_loss(&mut tape, l_f, l_r, l_soc_f, l_soc_r, [hp.w1, hp.w2, hp.w3]);
    let grads = tape.backward(total);
    let per_param = bound.gradients(&grads);
    let breakdown = LossBreakdown::from_tape(&tape, l_f, l_r, l_soc_f, l_soc_r, total);
    Ok((breakdown, per_param, breakdown.l_f))
}

/// Owns the model, optimizer, ledger, and pool across epochs.
pub struct Trainer<F: Real> {
    pub cfg: TrainConfig,
    pub state: ModelState<F>,
    pub report: TrainReport,
    adam: Adam<F>,
    ledger: DifficultyLedger,
    pool: AugmentationPool,
    phase1_done: bool,
    frozen: Vec<bool>,
}

impl<F: Real> Trainer<F> {
    pub fn new(cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let state = ModelState::init(cfg.hyper, cfg.seed)?;
        let adam = Adam::new(&state.params);
        let phase1_done = cfg.strategy != Strategy::PretrainedRecon;
        let frozen = vec![false; state.params.len()];
        Ok(Self {
            cfg,
            state,
            report: TrainReport::default(),
            adam,
            ledger: DifficultyLedger::new(),
            pool: AugmentationPool::empty(0),
            phase1_done,
            frozen,
        })
    }

    /// Rebuilds a trainer mid-run from a checkpoint produced by
    /// [`Trainer::checkpoint`].
    pub fn resume(cfg: TrainConfig, ck: &Checkpoint) -> Result<Self, TrainError> {
        cfg.validate()?;
        if ck.hyper != cfg.hyper {
            return Err(TrainError::Model(ModelError::Checkpoint(
                "checkpoint hyperparameters differ from the config".into(),
            )));
        }
        let state: ModelState<F> = ModelState::from_checkpoint(ck)?;
        let slot = ck.trainer.as_ref().ok_or(TrainError::NoTrainerState)?;
        let ts: TrainerState = serde_json::from_value(slot.clone())
            .map_err(|e| TrainError::Model(ModelError::Checkpoint(e.to_string())))?;
        let adam = Adam::restore(&state.params, &ts.adam_m, &ts.adam_v, ts.adam_t)?;
        let mut trainer = Self::new(cfg)?;
        trainer.state = state;
        trainer.adam = adam;
        trainer.ledger = DifficultyLedger::from_snapshot(&ts.ledger);
        trainer.pool = AugmentationPool {
            scenes: ts.pool.clone(),
            generated_at_epoch: ts.pool_epoch,
            rejected: ts.pool_rejected,
        };
        trainer.phase1_done = ts.phase1_done;
        if trainer.phase1_done {
            trainer.apply_phase2_freeze();
        }
        Ok(trainer)
    }

    /// Full checkpoint including optimizer, ledger, and pool.
    pub fn checkpoint(&self) -> Checkpoint {
        let (adam_m, adam_v, adam_t) = self.adam.snapshot(&self.state.params);
        let ts = TrainerState {
            adam_m,
            adam_v,
            adam_t,
            ledger: self.ledger.snapshot(),
            pool: self.pool.scenes.clone(),
            pool_epoch: self.pool.generated_at_epoch,
            pool_rejected: self.pool.rejected,
            phase1_done: self.phase1_done,
        };
        let mut ck = self.state.to_checkpoint();
        ck.trainer = Some(serde_json::to_value(ts).expect("trainer state serializes"));
        ck
    }

    pub fn pool_len(&self) -> usize {
        self.pool.len()
    }

    fn apply_phase2_freeze(&mut self) {
        if self.cfg.strategy != Strategy::PretrainedRecon {
            return;
        }
        for i in 0..self.state.params.len() {
            let name = self.state.params.name(i);
            self.frozen[i] =
                name.starts_with("rpdn.") || name.starts_with("zproj_r.") || name.starts_with("rec");
        }
    }

    /// Runs the reconstruction-only pretraining phase if the strategy
    /// requires it and it has not been done yet.
    pub fn ensure_pretrained(&mut self, dataset: &[Scene]) -> Result<(), TrainError> {
        if self.phase1_done {
            return Ok(());
        }
        if dataset.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        for e in 1..=self.cfg.n_epochs {
            let mut rng = derive(self.cfg.seed, "pretrain-epoch", e as u64);
            let lr = scheduler_step(self.cfg.hyper.lr, e, self.cfg.hyper.gamma, self.cfg.hyper.stepsize);
            let mut order: Vec<usize> = (0..dataset.len()).collect();
            if self.cfg.shuffle {
                order.shuffle(&mut rng);
            }
            for idx in order {
                let (bd, grads, _) =
                    scene_step(&self.state, &self.cfg, &dataset[idx], &mut rng, true)?;
                if !bd.total.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        epoch: e,
                        scene: idx.to_string(),
                    });
                }
                let none = vec![false; grads.len()];
                self.adam.step(&mut self.state.params, &grads, lr, &none)?;
            }
        }
        self.phase1_done = true;
        self.apply_phase2_freeze();
        // fresh optimizer for the main phase: frozen weights stay put
        self.adam = Adam::new(&self.state.params);
        Ok(())
    }

    /// Trains one epoch (number `state.epoch + 1`) over the dataset plus
    /// the current augmentation pool, then refreshes the pool if the
    /// schedule says so. Returns the epoch's mean loss breakdown.
    pub fn run_epoch(&mut self, dataset: &[Scene]) -> Result<LossBreakdown, TrainError> {
        if dataset.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        self.ensure_pretrained(dataset)?;
        let started = Instant::now();
        let e = self.state.epoch + 1;
        let cfg = self.cfg.clone();
        let mut rng = derive(cfg.seed, "epoch", e as u64);
        let lr = scheduler_step(cfg.hyper.lr, e, cfg.hyper.gamma, cfg.hyper.stepsize);

        // real scenes keep their dataset index for the ledger; pool scenes
        // are anonymous extras
        let mut items: Vec<(Option<u64>, usize, bool)> = (0..dataset.len())
            .map(|i| (Some(i as u64), i, false))
            .collect();
        items.extend((0..self.pool.len()).map(|i| (None, i, true)));
        if cfg.shuffle {
            items.shuffle(&mut rng);
        }

        let mut sum = LossBreakdown::zero();
        let mut seen = 0usize;
        let mut batch: Option<Vec<Tensor<F>>> = None;
        let mut batch_n = 0usize;
        for (tag, idx, from_pool) in items {
            let scene = if from_pool {
                &self.pool.scenes[idx]
            } else {
                &dataset[idx]
            };
            let (bd, grads, l_f) = scene_step(&self.state, &cfg, scene, &mut rng, false)?;
            if !bd.total.is_finite() {
                let label = if from_pool {
                    format!("pool-{idx}")
                } else {
                    idx.to_string()
                };
                return Err(TrainError::NonFiniteLoss {
                    epoch: e,
                    scene: label,
                });
            }
            match &mut batch {
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        a.add_assign(g);
                    }
                }
                None => batch = Some(grads),
            }
            batch_n += 1;
            if batch_n == cfg.batch_size {
                let mut acc = batch.take().expect("batch present");
                if batch_n > 1 {
                    let inv = real::<F>(1.0 / batch_n as f64);
                    for t in &mut acc {
                        t.scale_assign(inv);
                    }
                }
                self.adam.step(&mut self.state.params, &acc, lr, &self.frozen)?;
                batch_n = 0;
            }
            if let Some(id) = tag {
                self.ledger.record(id, e, l_f);
            }
            sum.accumulate(&bd);
            seen += 1;
        }
        if let Some(mut acc) = batch.take() {
            let inv = real::<F>(1.0 / batch_n as f64);
            for t in &mut acc {
                t.scale_assign(inv);
            }
            self.adam.step(&mut self.state.params, &acc, lr, &self.frozen)?;
        }

        self.maybe_refresh(dataset, e)?;
        self.state.epoch = e;
        let mean = sum.scaled(1.0 / seen as f64);
        self.report.epochs.push(EpochRecord {
            epoch: e,
            losses: mean,
            lr,
            n_scenes: seen,
            wall_secs: started.elapsed().as_secs_f64(),
        });
        Ok(mean)
    }

    fn refresh_due(&self, epoch: usize) -> bool {
        let n_t = self.cfg.hyper.n_t;
        let n_int = self.cfg.hyper.n_int;
        match self.cfg.strategy {
            Strategy::None => false,
            Strategy::InitialAug => epoch == n_t,
            _ => epoch >= n_t && (epoch - n_t) % n_int == 0,
        }
    }

    fn maybe_refresh(&mut self, dataset: &[Scene], epoch: usize) -> Result<(), TrainError> {
        if !self.refresh_due(epoch) {
            return Ok(());
        }
        // the observation window is whatever history accumulated since the
        // last refresh: records − 1 transitions
        let n_c = self
            .ledger
            .tracked()
            .map(|id| self.ledger.history_len(id))
            .min()
            .unwrap_or(0)
            .saturating_sub(1);
        if n_c == 0 {
            return Ok(());
        }
        let hp = self.cfg.hyper;
        let hard = difficulty_flags(&self.ledger, hp.d_threshold, n_c)?;
        let count = hard.len();
        let mut gen_rng = derive(self.cfg.seed, "refresh", epoch as u64);
        let pool_seed: u64 = gen_rng.gen();
        let pool = match self.cfg.strategy {
            Strategy::None => unreachable!("refresh never due for strategy none"),
            Strategy::Difficulty | Strategy::PretrainedRecon | Strategy::InitialAug => refresh_pool(
                dataset,
                &hard,
                &self.state,
                hp.r_mask,
                pool_seed,
                epoch,
                &mut self.ledger,
            ),
            Strategy::Inverse => {
                let easy = inverse_flags(&self.ledger, hp.d_threshold, n_c)?;
                refresh_pool(
                    dataset,
                    &easy,
                    &self.state,
                    hp.r_mask,
                    pool_seed,
                    epoch,
                    &mut self.ledger,
                )
            }
            Strategy::Random => {
                let ids: Vec<u64> = (0..dataset.len() as u64).collect();
                let chosen = random_flags(&ids, count.min(ids.len()), &mut gen_rng)?;
                refresh_pool(
                    dataset,
                    &chosen,
                    &self.state,
                    hp.r_mask,
                    pool_seed,
                    epoch,
                    &mut self.ledger,
                )
            }
            Strategy::Linear1 | Strategy::Linear2 => {
                let mode = if self.cfg.strategy == Strategy::Linear1 {
                    ExtrapolationMode::FirstTwo
                } else {
                    ExtrapolationMode::LastTwo
                };
                let scenes = hard
                    .iter()
                    .filter_map(|id| dataset.get(*id as usize))
                    .map(|s| linear_extrapolate(s, mode))
                    .collect();
                self.ledger.clear();
                AugmentationPool {
                    scenes,
                    generated_at_epoch: epoch,
                    rejected: 0,
                }
            }
            Strategy::SocialForce => {
                let synth_seed: u64 = gen_rng.gen();
                let cfg = SynthConfig {
                    n_scenes: count,
                    ..SynthConfig::default()
                };
                let mut scenes = generate_synthetic_dataset(&cfg, synth_seed);
                for s in &mut scenes {
                    s.source_tag = SourceTag::BaselineAug;
                }
                self.ledger.clear();
                AugmentationPool {
                    scenes,
                    generated_at_epoch: epoch,
                    rejected: 0,
                }
            }
        };
        self.report.refreshes.push(RefreshRecord {
            epoch,
            flagged: count,
            pool_size: pool.len(),
            rejected: pool.rejected,
        });
        self.pool = pool;
        Ok(())
    }

    /// Runs until `n_epochs` total epochs are complete.
    pub fn fit(&mut self, dataset: &[Scene]) -> Result<(), TrainError> {
        if dataset.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        self.ensure_pretrained(dataset)?;
        while self.state.epoch < self.cfg.n_epochs {
            self.run_epoch(dataset)?;
        }
        Ok(())
    }
}

/// Convenience wrapper: fresh model, full run.
pub fn train<F: Real>(
    cfg: &TrainConfig,
    dataset: &[Scene],
) -> Result<(ModelState<F>, TrainReport), TrainError> {
    let mut trainer = Trainer::new(cfg.clone())?;
    trainer.fit(dataset)?;
    let Trainer { state, report, .. } = trainer;
    Ok((state, report))
}
