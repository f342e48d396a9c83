//! Forward passes: shared encoder, latent heads, and both decoders.
//!
//! All token sequences are time-major: row `t * n_agents + i` holds agent
//! `i` at timestep `t`, which is the layout the agent-aware attention mask
//! expects. Training-mode passes build on a gradient tape through the
//! [`Bound`] parameter view; sampling runs the same graph without ever
//! calling backward.

use super::{Bound, HyperParams, ModelError, ModelState};
use crate::data::{normalize_scene_with_rotation, MaskedPast, Scene, T_FUTURE, T_PAST};
use crate::nn::attention::{agent_aware_attention, causal_additive_mask, AgentMask, AttentionHead};
use crate::nn::encoding::temporal_encoding;
use crate::nn::gaussian::GaussianParams;
use crate::nn::tape::{Tape, Var};
use crate::nn::tensor::{real, Real, Tensor};
use crate::nn::NnError;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

const LN_EPS: f64 = 1e-5;
/// Log-variance heads are clamped to keep `exp` well-conditioned.
const LOGVAR_LIMIT: f64 = 10.0;

// ---------------------------------------------------------------------------
// token builders

/// Encoder input `(8N, 3)`: position plus a 0/1 masked-cell indicator.
pub fn past_input<F: Real>(masked: &MaskedPast) -> Tensor<F> {
    let n = masked.n_agents();
    let mut out = Tensor::zeros(n * T_PAST, 3);
    for t in 0..T_PAST {
        for i in 0..n {
            let r = t * n + i;
            let p = masked.positions[i][t];
            *out.at_mut(r, 0) = real::<F>(p[0]);
            *out.at_mut(r, 1) = real::<F>(p[1]);
            if masked.indicator[i][t] {
                *out.at_mut(r, 2) = F::one();
            }
        }
    }
    out
}

/// Ground-truth observed positions `(8N, 2)`, without the indicator
/// channel — the reconstruction target.
pub fn past_positions<F: Real>(scene: &Scene) -> Tensor<F> {
    let n = scene.n_agents();
    let mut out = Tensor::zeros(n * T_PAST, 2);
    for t in 0..T_PAST {
        for i in 0..n {
            let p = scene.positions[i][t];
            *out.at_mut(t * n + i, 0) = real::<F>(p[0]);
            *out.at_mut(t * n + i, 1) = real::<F>(p[1]);
        }
    }
    out
}

/// Ground-truth future `(12N, 2)`.
pub fn future_positions<F: Real>(scene: &Scene) -> Tensor<F> {
    let n = scene.n_agents();
    let mut out = Tensor::zeros(n * T_FUTURE, 2);
    for t in 0..T_FUTURE {
        for i in 0..n {
            let p = scene.positions[i][T_PAST + t];
            *out.at_mut(t * n + i, 0) = real::<F>(p[0]);
            *out.at_mut(t * n + i, 1) = real::<F>(p[1]);
        }
    }
    out
}

/// Teacher-forcing decoder tokens `(12N, 2)`: the token for prediction
/// step `tau` is the ground-truth position one step earlier, starting from
/// the last observed position.
pub fn teacher_inputs<F: Real>(scene: &Scene) -> Tensor<F> {
    let n = scene.n_agents();
    let mut out = Tensor::zeros(n * T_FUTURE, 2);
    for tau in 0..T_FUTURE {
        for i in 0..n {
            let p = scene.positions[i][T_PAST - 1 + tau];
            *out.at_mut(tau * n + i, 0) = real::<F>(p[0]);
            *out.at_mut(tau * n + i, 1) = real::<F>(p[1]);
        }
    }
    out
}

/// Positions at the final observed timestep, `(N, 2)`.
pub fn last_observed<F: Real>(scene: &Scene) -> Tensor<F> {
    let n = scene.n_agents();
    let mut out = Tensor::zeros(n, 2);
    for i in 0..n {
        let p = scene.positions[i][T_PAST - 1];
        *out.at_mut(i, 0) = real::<F>(p[0]);
        *out.at_mut(i, 1) = real::<F>(p[1]);
    }
    out
}

// ---------------------------------------------------------------------------
// building blocks

fn head_bank<F: Real>(bound: &Bound<'_, F>, prefix: &str, n_heads: usize) -> Vec<AttentionHead> {
    (0..n_heads)
        .map(|h| AttentionHead {
            q_self: bound.var(&format!("{prefix}{h}.qs")),
            k_self: bound.var(&format!("{prefix}{h}.ks")),
            q_other: bound.var(&format!("{prefix}{h}.qo")),
            k_other: bound.var(&format!("{prefix}{h}.ko")),
            value: bound.var(&format!("{prefix}{h}.v")),
            out: bound.var(&format!("{prefix}{h}.o")),
        })
        .collect()
}

fn linear<F: Real>(tape: &mut Tape<F>, bound: &Bound<'_, F>, x: Var, name: &str) -> Var {
    let xw = tape.matmul(x, bound.var(&format!("{name}.w")));
    tape.add_row_bias(xw, bound.var(&format!("{name}.b")))
}

fn layer_norm<F: Real>(tape: &mut Tape<F>, bound: &Bound<'_, F>, x: Var, prefix: &str) -> Var {
    let gain = bound.var(&format!("{prefix}.g"));
    let bias = bound.var(&format!("{prefix}.b"));
    tape.layer_norm_rows(x, gain, bias, real::<F>(LN_EPS))
}

/// Post-norm residual: `LayerNorm(x + Dropout(delta))`.
#[allow(clippy::too_many_arguments)]
fn residual_norm<F: Real, R: Rng>(
    tape: &mut Tape<F>,
    bound: &Bound<'_, F>,
    x: Var,
    delta: Var,
    ln_prefix: &str,
    dropout: f64,
    training: bool,
    rng: &mut R,
) -> Var {
    let delta = tape.dropout(delta, dropout, training, rng);
    let sum = tape.add(x, delta);
    layer_norm(tape, bound, sum, ln_prefix)
}

fn feed_forward<F: Real>(tape: &mut Tape<F>, bound: &Bound<'_, F>, x: Var, prefix: &str) -> Var {
    let h = linear(tape, bound, x, &format!("{prefix}.ff1"));
    let h = tape.relu(h);
    linear(tape, bound, h, &format!("{prefix}.ff2"))
}

/// Mean and clamped log-variance from pooled features.
fn latent_head<F: Real>(
    tape: &mut Tape<F>,
    bound: &Bound<'_, F>,
    pooled: Var,
    name: &str,
) -> GaussianParams {
    let mu = linear(tape, bound, pooled, &format!("{name}.mu"));
    let raw = linear(tape, bound, pooled, &format!("{name}.lv"));
    let logvar = tape.clamp(raw, real::<F>(-LOGVAR_LIMIT), real::<F>(LOGVAR_LIMIT));
    GaussianParams { mu, logvar }
}

/// Transformer decoder stack shared by forecasting (`dec`, causal) and
/// reconstruction (`rec`, bidirectional).
#[allow(clippy::too_many_arguments)]
fn decoder_stack<F: Real, R: Rng>(
    tape: &mut Tape<F>,
    bound: &Bound<'_, F>,
    hyper: &HyperParams,
    prefix: &str,
    n_layers: usize,
    mut x: Var,
    memory: Var,
    self_mask: &AgentMask<F>,
    causal: Option<&Tensor<F>>,
    cross_mask: &AgentMask<F>,
    training: bool,
    rng: &mut R,
) -> Result<Var, ModelError> {
    for j in 0..n_layers {
        let self_heads = head_bank(bound, &format!("{prefix}{j}.self"), hyper.n_atthead);
        let sa = agent_aware_attention(tape, x, x, &self_heads, self_mask, causal)?;
        x = residual_norm(
            tape,
            bound,
            x,
            sa,
            &format!("{prefix}{j}.ln1"),
            hyper.dropout,
            training,
            rng,
        );
        let cross_heads = head_bank(bound, &format!("{prefix}{j}.cross"), hyper.n_atthead);
        let ca = agent_aware_attention(tape, x, memory, &cross_heads, cross_mask, None)?;
        x = residual_norm(
            tape,
            bound,
            x,
            ca,
            &format!("{prefix}{j}.ln2"),
            hyper.dropout,
            training,
            rng,
        );
        let ff = feed_forward(tape, bound, x, &format!("{prefix}{j}"));
        x = residual_norm(
            tape,
            bound,
            x,
            ff,
            &format!("{prefix}{j}.ln3"),
            hyper.dropout,
            training,
            rng,
        );
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// encoder and latent heads

/// Runs the shared encoder over `(8N, 3)` observed tokens and returns
/// per-token features `(8N, d_m)`.
pub fn encode<F: Real, R: Rng>(
    tape: &mut Tape<F>,
    bound: &Bound<'_, F>,
    hyper: &HyperParams,
    past: &Tensor<F>,
    training: bool,
    rng: &mut R,
) -> Result<Var, ModelError> {
    if past.cols() != 3 || past.rows() == 0 || past.rows() % T_PAST != 0 {
        return Err(NnError::Shape {
            context: "encoder input",
            expected: format!("({T_PAST}*N, 3)"),
            got: format!("{:?}", past.shape()),
        }
        .into());
    }
    let n = past.rows() / T_PAST;
    let tokens = tape.leaf(past.clone());
    let mut x = linear(tape, bound, tokens, "embed_past");
    x = tape.offset(x, &temporal_encoding(n, T_PAST, hyper.d_m, 0));
    let mask = AgentMask::rect(n, T_PAST, T_PAST)?;
    for j in 0..hyper.n_enc_layers {
        let heads = head_bank(bound, &format!("enc{j}.attn"), hyper.n_atthead);
        let attn = agent_aware_attention(tape, x, x, &heads, &mask, None)?;
        x = residual_norm(
            tape,
            bound,
            x,
            attn,
            &format!("enc{j}.ln1"),
            hyper.dropout,
            training,
            rng,
        );
        let ff = feed_forward(tape, bound, x, &format!("enc{j}"));
        x = residual_norm(
            tape,
            bound,
            x,
            ff,
            &format!("enc{j}.ln2"),
            hyper.dropout,
            training,
            rng,
        );
    }
    Ok(x)
}

/// Past-conditioned latent prior, pooled from each agent's final encoder
/// token. Returns per-agent `(N, d_z)` Gaussian parameters.
pub fn prior_params<F: Real>(
    tape: &mut Tape<F>,
    bound: &Bound<'_, F>,
    features: Var,
    n_agents: usize,
) -> GaussianParams {
    let pooled = tape.slice_rows(features, (T_PAST - 1) * n_agents, n_agents);
    latent_head(tape, bound, pooled, "cpn")
}

/// Forecast posterior: embeds the ground-truth future, cross-attends to
/// the past features, pools each agent's final token.
#[allow(clippy::too_many_arguments)]
pub fn posterior_params_forecast<F: Real, R: Rng>(
    tape: &mut Tape<F>,
    bound: &Bound<'_, F>,
    hyper: &HyperParams,
    past_features: Var,
    future: &Tensor<F>,
    n_agents: usize,
    training: bool,
    rng: &mut R,
) -> Result<GaussianParams, ModelError> {
    if future.shape() != (n_agents * T_FUTURE, 2) {
        return Err(NnError::Shape {
            context: "future tokens",
            expected: format!("({}, 2)", n_agents * T_FUTURE),
            got: format!("{:?}", future.shape()),
        }
        .into());
    }
    let tokens = tape.leaf(future.clone());
    let mut x = linear(tape, bound, tokens, "embed_future");
    x = tape.offset(x, &temporal_encoding(n_agents, T_FUTURE, hyper.d_m, T_PAST));
    let mask = AgentMask::rect(n_agents, T_FUTURE, T_PAST)?;
    let heads = head_bank(bound, "ppdn.attn", hyper.n_atthead);
    let attn = agent_aware_attention(tape, x, past_features, &heads, &mask, None)?;
    let x = residual_norm(
        tape, bound, x, attn, "ppdn.ln", hyper.dropout, training, rng,
    );
    let pooled = tape.slice_rows(x, (T_FUTURE - 1) * n_agents, n_agents);
    Ok(latent_head(tape, bound, pooled, "ppdn"))
}

/// Reconstruction posterior from the masked-past encoding.
pub fn posterior_params_recon<F: Real>(
    tape: &mut Tape<F>,
    bound: &Bound<'_, F>,
    masked_features: Var,
    n_agents: usize,
) -> GaussianParams {
    let pooled = tape.slice_rows(masked_features, (T_PAST - 1) * n_agents, n_agents);
    latent_head(tape, bound, pooled, "rpdn")
}

// ---------------------------------------------------------------------------
// decoders

/// Teacher-forced forecast: ground-truth previous positions as decoder
/// tokens, causal self-attention, cross-attention to the past features.
/// The head emits per-step displacements; the returned `(12N, 2)` value
/// holds absolute positions (running displacement sum plus the last
/// observed position).
#[allow(clippy::too_many_arguments)]
pub fn decode_future_teacher<F: Real, R: Rng>(
    tape: &mut Tape<F>,
    bound: &Bound<'_, F>,
    hyper: &HyperParams,
    past_features: Var,
    z: Var,
    teacher: &Tensor<F>,
    last_obs: &Tensor<F>,
    training: bool,
    rng: &mut R,
) -> Result<Var, ModelError> {
    let n = last_obs.rows();
    if last_obs.cols() != 2 || n == 0 {
        return Err(NnError::Shape {
            context: "last observed positions",
            expected: "(N, 2)".into(),
            got: format!("{:?}", last_obs.shape()),
        }
        .into());
    }
    if teacher.shape() != (n * T_FUTURE, 2) {
        return Err(NnError::Shape {
            context: "teacher tokens",
            expected: format!("({}, 2)", n * T_FUTURE),
            got: format!("{:?}", teacher.shape()),
        }
        .into());
    }
    let tokens = tape.leaf(teacher.clone());
    let mut x = linear(tape, bound, tokens, "dec_in");
    x = tape.offset(x, &temporal_encoding(n, T_FUTURE, hyper.d_m, T_PAST));
    let cond = linear(tape, bound, z, "zproj_f");
    x = tape.add_per_agent(x, cond, n);
    let self_mask = AgentMask::rect(n, T_FUTURE, T_FUTURE)?;
    let causal = causal_additive_mask::<F>(n, T_FUTURE, T_FUTURE);
    let cross_mask = AgentMask::rect(n, T_FUTURE, T_PAST)?;
    let x = decoder_stack(
        tape,
        bound,
        hyper,
        "dec",
        hyper.n_dec_layers,
        x,
        past_features,
        &self_mask,
        Some(&causal),
        &cross_mask,
        training,
        rng,
    )?;
    let disp = linear(tape, bound, x, "dec_out");
    let cum = tape.cumsum_time(disp, n);
    let mut anchor = Tensor::zeros(n * T_FUTURE, 2);
    for t in 0..T_FUTURE {
        for i in 0..n {
            for c in 0..2 {
                *anchor.at_mut(t * n + i, c) = last_obs.at(i, c);
            }
        }
    }
    Ok(tape.offset(cum, &anchor))
}

/// Closed-loop forecast: each predicted position becomes the next decoder
/// token. Evaluation-only (no dropout, no gradients); returns absolute
/// positions `(12N, 2)`.
pub fn decode_future_autoregressive<F: Real>(
    tape: &mut Tape<F>,
    bound: &Bound<'_, F>,
    hyper: &HyperParams,
    past_features: Var,
    z: Var,
    last_obs: &Tensor<F>,
) -> Result<Tensor<F>, ModelError> {
    let n = last_obs.rows();
    if last_obs.cols() != 2 || n == 0 {
        return Err(NnError::Shape {
            context: "last observed positions",
            expected: "(N, 2)".into(),
            got: format!("{:?}", last_obs.shape()),
        }
        .into());
    }
    let cond = linear(tape, bound, z, "zproj_f");
    let mut token_data: Vec<F> = Vec::with_capacity(n * (T_FUTURE + 1) * 2);
    token_data.extend_from_slice(last_obs.data());
    let mut out = Tensor::zeros(n * T_FUTURE, 2);
    let mut dummy = crate::rng::derive(0, "inference-dropout", 0);
    for tau in 0..T_FUTURE {
        let steps = tau + 1;
        let tokens = Tensor::from_vec(n * steps, 2, token_data.clone());
        let tvar = tape.leaf(tokens);
        let mut x = linear(tape, bound, tvar, "dec_in");
        x = tape.offset(x, &temporal_encoding(n, steps, hyper.d_m, T_PAST));
        x = tape.add_per_agent(x, cond, n);
        let self_mask = AgentMask::rect(n, steps, steps)?;
        let causal = causal_additive_mask::<F>(n, steps, steps);
        let cross = AgentMask::rect(n, steps, T_PAST)?;
        let x = decoder_stack(
            tape,
            bound,
            hyper,
            "dec",
            hyper.n_dec_layers,
            x,
            past_features,
            &self_mask,
            Some(&causal),
            &cross,
            false,
            &mut dummy,
        )?;
        let disp = linear(tape, bound, x, "dec_out");
        let step_disp = tape.slice_rows(disp, tau * n, n);
        let dv = tape.value(step_disp).clone();
        for i in 0..n {
            for c in 0..2 {
                let prev = token_data[(tau * n + i) * 2 + c];
                *out.at_mut(tau * n + i, c) = prev + dv.at(i, c);
            }
        }
        if tau + 1 < T_FUTURE {
            token_data.extend_from_slice(&out.data()[tau * n * 2..(tau + 1) * n * 2]);
        }
    }
    Ok(out)
}

/// Reconstructs all 8 observed positions from the masked-past features and
/// a latent draw. Query tokens carry only the timestep encoding plus the
/// per-agent latent conditioning; output is absolute positions `(8N, 2)`.
#[allow(clippy::too_many_arguments)]
pub fn decode_reconstruction<F: Real, R: Rng>(
    tape: &mut Tape<F>,
    bound: &Bound<'_, F>,
    hyper: &HyperParams,
    masked_features: Var,
    z: Var,
    n_agents: usize,
    training: bool,
    rng: &mut R,
) -> Result<Var, ModelError> {
    let base = tape.leaf(temporal_encoding(n_agents, T_PAST, hyper.d_m, 0));
    let cond = linear(tape, bound, z, "zproj_r");
    let x = tape.add_per_agent(base, cond, n_agents);
    let mask = AgentMask::rect(n_agents, T_PAST, T_PAST)?;
    let x = decoder_stack(
        tape,
        bound,
        hyper,
        "rec",
        hyper.n_recon_dec_layers,
        x,
        masked_features,
        &mask,
        None,
        &mask,
        training,
        rng,
    )?;
    Ok(linear(tape, bound, x, "rec_out"))
}

// ---------------------------------------------------------------------------
// sampling

/// A batch of sampled futures in world coordinates:
/// `samples[k][agent][t]`.
#[derive(Clone, Debug)]
pub struct PredictionSet {
    pub samples: Vec<Vec<[[f64; 2]; T_FUTURE]>>,
}

impl PredictionSet {
    pub fn k(&self) -> usize {
        self.samples.len()
    }

    pub fn n_agents(&self) -> usize {
        self.samples.first().map_or(0, |s| s.len())
    }
}

/// Draws `k` futures for a scene. The first sample is the prior mode
/// (`z = mu`); the rest are reparameterized draws from the prior.
pub fn sample_predictions<F: Real, R: Rng>(
    state: &ModelState<F>,
    scene: &Scene,
    k: usize,
    rng: &mut R,
) -> Result<PredictionSet, ModelError> {
    sample_predictions_tempered(state, scene, k, 1.0, rng)
}

/// [`sample_predictions`] with the prior standard deviation scaled by
/// `temperature`; zero collapses every sample onto the prior mode.
pub fn sample_predictions_tempered<F: Real, R: Rng>(
    state: &ModelState<F>,
    scene: &Scene,
    k: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<PredictionSet, ModelError> {
    if !scene.is_finite() {
        return Err(ModelError::NonFinite("scene positions"));
    }
    let (norm, transform) = normalize_scene_with_rotation(scene, 0.0);
    let n = norm.n_agents();
    let last_obs = last_observed::<F>(&norm);

    // One encoder pass; its features and the prior are constants for all k.
    let (feat_t, mu_t, sigma_t) = {
        let mut tape = Tape::new();
        let bound = Bound::new(&state.params, &mut tape);
        let past = past_input::<F>(&MaskedPast::unmasked(&norm));
        let mut dummy = crate::rng::derive(0, "inference-dropout", 0);
        let features = encode(&mut tape, &bound, &state.hyper, &past, false, &mut dummy)?;
        let prior = prior_params(&mut tape, &bound, features, n);
        let sigma = prior.sigma(&mut tape);
        (
            tape.value(features).clone(),
            tape.value(prior.mu).clone(),
            tape.value(sigma).clone(),
        )
    };

    let temp = real::<F>(temperature);
    let mut samples = Vec::with_capacity(k);
    for s in 0..k {
        let mut z_t = mu_t.clone();
        if s > 0 {
            for r in 0..n {
                for c in 0..state.hyper.d_z {
                    let eps: f64 = StandardNormal.sample(rng);
                    let delta = sigma_t.at(r, c) * temp * real::<F>(eps);
                    *z_t.at_mut(r, c) += delta;
                }
            }
        }
        // Fresh tape per sample keeps peak memory at one decode.
        let mut tape = Tape::new();
        let bound = Bound::new(&state.params, &mut tape);
        let features = tape.leaf(feat_t.clone());
        let z = tape.leaf(z_t);
        let traj =
            decode_future_autoregressive(&mut tape, &bound, &state.hyper, features, z, &last_obs)?;
        if !traj.is_finite() {
            return Err(ModelError::NonFinite("sampled trajectory"));
        }
        let mut per_agent = vec![[[0.0f64; 2]; T_FUTURE]; n];
        for t in 0..T_FUTURE {
            for i in 0..n {
                let p = [
                    traj.at(t * n + i, 0).to_f64_lossy(),
                    traj.at(t * n + i, 1).to_f64_lossy(),
                ];
                per_agent[i][t] = transform.invert_point(p);
            }
        }
        samples.push(per_agent);
    }
    Ok(PredictionSet { samples })
}
