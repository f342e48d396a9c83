//! Agent-aware multi-head attention over time-major token sequences.
//!
//! Tokens for a scene with `n` agents over `t` timesteps are laid out as
//! `t * n` rows: row `r` holds agent `r % n` at timestep `r / n`. Attention
//! scores between two tokens are computed with one query/key projection pair
//! when they belong to the same agent and a second pair when they do not,
//! and the two score matrices are blended through a binary same-agent mask
//! before the softmax. This keeps an agent's own history and the behaviour
//! of its neighbours in separate subspaces while attending over everything
//! at once.

use super::tape::{Tape, Var};
use super::tensor::{Real, Tensor};
use super::NnError;

/// Binary blend masks for one (query sequence, key sequence) pair.
///
/// `same` holds 1 where the query and key rows belong to the same agent and
/// 0 elsewhere; `other` is its complement.
#[derive(Clone, Debug)]
pub struct AgentMask<F: Real> {
    n_agents: usize,
    same: Tensor<F>,
    other: Tensor<F>,
}

impl<F: Real> AgentMask<F> {
    /// Mask for cross-attention between a `t_q`-step query sequence and a
    /// `t_k`-step key sequence over the same `n_agents` agents.
    pub fn rect(n_agents: usize, t_q: usize, t_k: usize) -> Result<Self, NnError> {
        if n_agents == 0 {
            return Err(NnError::Empty("agent count"));
        }
        if t_q == 0 || t_k == 0 {
            return Err(NnError::Empty("sequence length"));
        }
        let (rows, cols) = (t_q * n_agents, t_k * n_agents);
        let mut same = Tensor::zeros(rows, cols);
        let mut other = Tensor::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                if r % n_agents == c % n_agents {
                    *same.at_mut(r, c) = F::one();
                } else {
                    *other.at_mut(r, c) = F::one();
                }
            }
        }
        Ok(Self {
            n_agents,
            same,
            other,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn same(&self) -> &Tensor<F> {
        &self.same
    }

    pub fn other(&self) -> &Tensor<F> {
        &self.other
    }

    pub fn shape(&self) -> (usize, usize) {
        self.same.shape()
    }
}

/// Square self-attention mask over `t_seq` timesteps of `n_agents` agents.
pub fn build_agent_mask<F: Real>(n_agents: usize, t_seq: usize) -> Result<AgentMask<F>, NnError> {
    AgentMask::rect(n_agents, t_seq, t_seq)
}

/// Additive causal mask: zero where the key's timestep is at or before the
/// query's timestep (any agent), negative infinity elsewhere.
pub fn causal_additive_mask<F: Real>(n_agents: usize, t_q: usize, t_k: usize) -> Tensor<F> {
    let (rows, cols) = (t_q * n_agents, t_k * n_agents);
    let mut mask = Tensor::zeros(rows, cols);
    for r in 0..rows {
        let tq = r / n_agents;
        for c in 0..cols {
            if c / n_agents > tq {
                *mask.at_mut(r, c) = F::neg_infinity();
            }
        }
    }
    mask
}

/// Projection weights for one attention head.
///
/// Query/key projections come in same-agent and other-agent pairs of shape
/// `(d_m, d_h)`; `value` is `(d_m, d_h)` and `out` maps the head's context
/// back up as `(d_h, d_m)`. Per-head outputs are summed, which is identical
/// to concatenating heads and applying one joint output projection.
#[derive(Clone, Copy, Debug)]
pub struct AttentionHead {
    pub q_self: Var,
    pub k_self: Var,
    pub q_other: Var,
    pub k_other: Var,
    pub value: Var,
    pub out: Var,
}

/// Computes agent-aware multi-head attention.
///
/// `queries_src` provides the query-side tokens `(L_q, d_m)` and `keys_src`
/// the key/value-side tokens `(L_k, d_m)`; self-attention passes the same
/// variable for both. Scores are scaled by the reciprocal square root of
/// the full model width. `causal`, when present, is added to the blended
/// scores before the softmax.
pub fn agent_aware_attention<F: Real>(
    tape: &mut Tape<F>,
    queries_src: Var,
    keys_src: Var,
    heads: &[AttentionHead],
    mask: &AgentMask<F>,
    causal: Option<&Tensor<F>>,
) -> Result<Var, NnError> {
    let (l_q, d_m) = tape.value(queries_src).shape();
    let (l_k, d_k) = tape.value(keys_src).shape();
    if d_k != d_m {
        return Err(NnError::Shape {
            context: "attention key width",
            expected: format!("{d_m}"),
            got: format!("{d_k}"),
        });
    }
    if heads.is_empty() {
        return Err(NnError::Empty("attention heads"));
    }
    if d_m % heads.len() != 0 {
        return Err(NnError::Heads {
            dim: d_m,
            heads: heads.len(),
        });
    }
    if mask.shape() != (l_q, l_k) {
        return Err(NnError::Shape {
            context: "agent mask",
            expected: format!("{l_q}x{l_k}"),
            got: format!("{}x{}", mask.shape().0, mask.shape().1),
        });
    }
    if let Some(c) = causal {
        if c.shape() != (l_q, l_k) {
            return Err(NnError::Shape {
                context: "causal mask",
                expected: format!("{l_q}x{l_k}"),
                got: format!("{}x{}", c.shape().0, c.shape().1),
            });
        }
    }
    let d_h = d_m / heads.len();
    for head in heads {
        for (var, want, what) in [
            (head.q_self, (d_m, d_h), "query projection"),
            (head.k_self, (d_m, d_h), "key projection"),
            (head.q_other, (d_m, d_h), "query projection"),
            (head.k_other, (d_m, d_h), "key projection"),
            (head.value, (d_m, d_h), "value projection"),
            (head.out, (d_h, d_m), "output projection"),
        ] {
            let got = tape.value(var).shape();
            if got != want {
                return Err(NnError::Shape {
                    context: what,
                    expected: format!("{}x{}", want.0, want.1),
                    got: format!("{}x{}", got.0, got.1),
                });
            }
        }
    }

    let scale = F::one() / super::tensor::real::<F>(d_m as f64).sqrt();
    let mut combined: Option<Var> = None;
    for head in heads {
        let q_s = tape.matmul(queries_src, head.q_self);
        let k_s = tape.matmul(keys_src, head.k_self);
        let q_o = tape.matmul(queries_src, head.q_other);
        let k_o = tape.matmul(keys_src, head.k_other);

        let scores_self = tape.matmul_nt(q_s, k_s);
        let scores_other = tape.matmul_nt(q_o, k_o);
        let masked_self = tape.mul_const(scores_self, mask.same());
        let masked_other = tape.mul_const(scores_other, mask.other());
        let blended = tape.add(masked_self, masked_other);
        let mut scaled = tape.scale(blended, scale);
        if let Some(c) = causal {
            scaled = tape.offset(scaled, c);
        }
        let probs = tape.softmax_rows(scaled);

        let values = tape.matmul(keys_src, head.value);
        let context = tape.matmul(probs, values);
        let projected = tape.matmul(context, head.out);
        combined = Some(match combined {
            Some(acc) => tape.add(acc, projected),
            None => projected,
        });
    }
    Ok(combined.expect("at least one head"))
}
