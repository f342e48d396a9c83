//! Finite-difference verification of reverse-mode gradients.
//!
//! [`check_gradients`] rebuilds a computation from scratch for every
//! perturbed coordinate and compares central differences against the
//! tape's analytic gradients. [`primitive_suite`] bundles checks for every
//! differentiable primitive (plus the composite attention block and the
//! latent-head math) across randomly drawn shapes, so unit tests and the
//! repository-level verification target run the same battery at different
//! sizes.

use super::attention::{agent_aware_attention, build_agent_mask, causal_additive_mask, AttentionHead};
use super::gaussian::{gaussian_kl, reparameterize, GaussianParams};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::rng::derive;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Accumulated outcome of the finite-difference checks for one primitive.
#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    /// Total coordinates compared across all inputs and shape variants.
    pub coords: usize,
    /// Coordinates whose relative error stayed under the tolerance.
    pub within: usize,
    /// Largest relative error observed.
    pub worst: f64,
    /// Number of shape variants checked.
    pub variants: usize,
}

impl CheckOutcome {
    pub fn pass_fraction(&self) -> f64 {
        if self.coords == 0 {
            1.0
        } else {
            self.within as f64 / self.coords as f64
        }
    }

    /// True when at least `required` of the coordinates were within
    /// tolerance (e.g. `0.99`).
    pub fn passes(&self, required: f64) -> bool {
        self.pass_fraction() >= required
    }
}

/// Compares analytic gradients against central finite differences.
///
/// `build` must deterministically reconstruct the same scalar computation
/// from the leaves it is handed; it runs `2 * coords + 1` times. Relative
/// error is normalized by `max(|analytic|, |numeric|, 0.01)`, which turns
/// the comparison into an absolute one for gradients below 0.01.
pub fn check_gradients<B>(
    name: &str,
    inputs: &[Tensor<f64>],
    step: f64,
    tol: f64,
    build: B,
) -> CheckOutcome
where
    B: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let run = |tensors: &[Tensor<f64>]| -> (Tape<f64>, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars);
        (tape, vars, out)
    };

    let (tape, vars, out) = run(inputs);
    assert_eq!(
        tape.value(out).shape(),
        (1, 1),
        "{name}: check target must be scalar"
    );
    let grads = tape.backward(out);

    let mut outcome = CheckOutcome {
        name: name.to_string(),
        coords: 0,
        within: 0,
        worst: 0.0,
        variants: 1,
    };
    for (i, input) in inputs.iter().enumerate() {
        let zero = Tensor::zeros(input.rows(), input.cols());
        let analytic = grads.wrt(vars[i]).unwrap_or(&zero).clone();
        for c in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[c] += step;
            let (tp, _, op) = run(&plus);
            let f_plus = tp.scalar(op);

            let mut minus = inputs.to_vec();
            minus[i].data_mut()[c] -= step;
            let (tm, _, om) = run(&minus);
            let f_minus = tm.scalar(om);

            let numeric = (f_plus - f_minus) / (2.0 * step);
            let a = analytic.data()[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(0.01);
            outcome.coords += 1;
            if rel < tol {
                outcome.within += 1;
            }
            if rel > outcome.worst {
                outcome.worst = rel;
            }
        }
    }
    outcome
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

fn randn_from(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data_mut() {
        *v = StandardNormal.sample(rng);
    }
    t
}

fn merge(list: &mut Vec<CheckOutcome>, o: CheckOutcome) {
    if let Some(e) = list.iter_mut().find(|e| e.name == o.name) {
        e.coords += o.coords;
        e.within += o.within;
        e.worst = e.worst.max(o.worst);
        e.variants += o.variants;
    } else {
        list.push(o);
    }
}

/// Runs finite-difference checks for every differentiable primitive and
/// for the load-bearing composites, drawing `variants` random shapes per
/// primitive at the given step and relative tolerance. Outcomes with the
/// same name are aggregated across variants.
pub fn primitive_suite(step: f64, tol: f64, variants: u64) -> Vec<CheckOutcome> {
    let mut out: Vec<CheckOutcome> = Vec::new();

    for k in 0..variants {
        let mut rng = derive(173, "gradcheck-shapes", k);

        // -- elementwise and broadcast ops on one random (r, c) ----------
        let (r, c) = (dim(&mut rng, 1, 5), dim(&mut rng, 1, 5));
        let w = randn_from(&mut rng, r, c);
        let reduce = move |t: &mut Tape<f64>, v: Var| -> Var {
            let weighted = t.mul_const(v, &w);
            t.sum(weighted)
        };
        let pair = [randn_from(&mut rng, r, c), randn_from(&mut rng, r, c)];
        merge(
            &mut out,
            check_gradients("add", &pair, step, tol, |t, v| {
                let s = t.add(v[0], v[1]);
                reduce(t, s)
            }),
        );
        merge(
            &mut out,
            check_gradients("sub", &pair, step, tol, |t, v| {
                let s = t.sub(v[0], v[1]);
                reduce(t, s)
            }),
        );
        merge(
            &mut out,
            check_gradients("mul", &pair, step, tol, |t, v| {
                let s = t.mul(v[0], v[1]);
                reduce(t, s)
            }),
        );
        let bias_in = [randn_from(&mut rng, r, c), randn_from(&mut rng, 1, c)];
        merge(
            &mut out,
            check_gradients("add_row_bias", &bias_in, step, tol, |t, v| {
                let s = t.add_row_bias(v[0], v[1]);
                reduce(t, s)
            }),
        );
        let factor = rng.gen_range(-2.0..2.0);
        merge(
            &mut out,
            check_gradients("scale", &pair[..1], step, tol, |t, v| {
                let s = t.scale(v[0], factor);
                reduce(t, s)
            }),
        );
        let shift = rng.gen_range(-1.0..1.0);
        merge(
            &mut out,
            check_gradients("add_scalar", &pair[..1], step, tol, |t, v| {
                let s = t.add_scalar(v[0], shift);
                reduce(t, s)
            }),
        );
        let offset_const = randn_from(&mut rng, r, c);
        merge(
            &mut out,
            check_gradients("offset", &pair[..1], step, tol, |t, v| {
                let s = t.offset(v[0], &offset_const);
                reduce(t, s)
            }),
        );
        let mul_mask = randn_from(&mut rng, r, c);
        merge(
            &mut out,
            check_gradients("mul_const", &pair[..1], step, tol, |t, v| {
                let s = t.mul_const(v[0], &mul_mask);
                reduce(t, s)
            }),
        );
        merge(
            &mut out,
            check_gradients("relu", &pair[..1], step, tol, |t, v| {
                let s = t.relu(v[0]);
                reduce(t, s)
            }),
        );
        let mut exp_in = pair[0].clone();
        exp_in.scale_assign(0.5);
        merge(
            &mut out,
            check_gradients("exp", &[exp_in], step, tol, |t, v| {
                let s = t.exp(v[0]);
                reduce(t, s)
            }),
        );
        let mut clamp_in = pair[0].clone();
        clamp_in.scale_assign(2.0);
        merge(
            &mut out,
            check_gradients("clamp", &[clamp_in], step, tol, |t, v| {
                let s = t.clamp(v[0], -1.0, 1.0);
                reduce(t, s)
            }),
        );
        merge(
            &mut out,
            check_gradients("sum", &pair[..1], step, tol, |t, v| t.sum(v[0])),
        );
        merge(
            &mut out,
            check_gradients("mean", &pair[..1], step, tol, |t, v| t.mean(v[0])),
        );
        merge(
            &mut out,
            check_gradients("mean_squared_error", &pair, step, tol, |t, v| {
                let d = t.sub(v[0], v[1]);
                let sq = t.mul(d, d);
                t.mean(sq)
            }),
        );

        // -- matrix products --------------------------------------------
        let (m, kk, n) = (dim(&mut rng, 1, 5), dim(&mut rng, 1, 5), dim(&mut rng, 1, 5));
        let wmn = randn_from(&mut rng, m, n);
        let mm_in = [randn_from(&mut rng, m, kk), randn_from(&mut rng, kk, n)];
        merge(
            &mut out,
            check_gradients("matmul", &mm_in, step, tol, |t, v| {
                let s = t.matmul(v[0], v[1]);
                let weighted = t.mul_const(s, &wmn);
                t.sum(weighted)
            }),
        );
        let nt_in = [randn_from(&mut rng, m, kk), randn_from(&mut rng, n, kk)];
        merge(
            &mut out,
            check_gradients("matmul_nt", &nt_in, step, tol, |t, v| {
                let s = t.matmul_nt(v[0], v[1]);
                let weighted = t.mul_const(s, &wmn);
                t.sum(weighted)
            }),
        );

        // -- row-structured ops -----------------------------------------
        let (sr, sc) = (dim(&mut rng, 1, 5), dim(&mut rng, 2, 6));
        let wsm = randn_from(&mut rng, sr, sc);
        merge(
            &mut out,
            check_gradients(
                "softmax_rows",
                &[randn_from(&mut rng, sr, sc)],
                step,
                tol,
                |t, v| {
                    let s = t.softmax_rows(v[0]);
                    let weighted = t.mul_const(s, &wsm);
                    t.sum(weighted)
                },
            ),
        );
        let mut gain = randn_from(&mut rng, 1, sc);
        for g in gain.data_mut() {
            *g = 1.0 + 0.2 * *g;
        }
        let ln_in = [
            randn_from(&mut rng, sr, sc),
            gain,
            randn_from(&mut rng, 1, sc),
        ];
        merge(
            &mut out,
            check_gradients("layer_norm_rows", &ln_in, step, tol, |t, v| {
                let s = t.layer_norm_rows(v[0], v[1], v[2], 1e-5);
                let weighted = t.mul_const(s, &wsm);
                t.sum(weighted)
            }),
        );
        let rows = dim(&mut rng, 2, 6);
        let start = rng.gen_range(0..rows);
        let len = rng.gen_range(1..=(rows - start));
        let wsl = randn_from(&mut rng, len, sc);
        merge(
            &mut out,
            check_gradients(
                "slice_rows",
                &[randn_from(&mut rng, rows, sc)],
                step,
                tol,
                |t, v| {
                    let s = t.slice_rows(v[0], start, len);
                    let weighted = t.mul_const(s, &wsl);
                    t.sum(weighted)
                },
            ),
        );

        // -- time-major structured ops ----------------------------------
        let (agents, steps, tc) = (dim(&mut rng, 1, 3), dim(&mut rng, 1, 4), dim(&mut rng, 1, 3));
        let wtm = randn_from(&mut rng, agents * steps, tc);
        merge(
            &mut out,
            check_gradients(
                "cumsum_time",
                &[randn_from(&mut rng, agents * steps, tc)],
                step,
                tol,
                |t, v| {
                    let s = t.cumsum_time(v[0], agents);
                    let weighted = t.mul_const(s, &wtm);
                    t.sum(weighted)
                },
            ),
        );
        let pa_in = [
            randn_from(&mut rng, agents * steps, tc),
            randn_from(&mut rng, agents, tc),
        ];
        merge(
            &mut out,
            check_gradients("add_per_agent", &pa_in, step, tol, |t, v| {
                let s = t.add_per_agent(v[0], v[1], agents);
                let weighted = t.mul_const(s, &wtm);
                t.sum(weighted)
            }),
        );
        let hinge_agents = dim(&mut rng, 2, 4);
        let hinge_steps = dim(&mut rng, 1, 4);
        let mut pos = randn_from(&mut rng, hinge_agents * hinge_steps, 2);
        pos.scale_assign(0.5);
        merge(
            &mut out,
            check_gradients("social_hinge_squared", &[pos.clone()], step, tol, |t, v| {
                t.social_hinge(v[0], hinge_agents, 0.8, true)
            }),
        );
        merge(
            &mut out,
            check_gradients("social_hinge_distance", &[pos], step, tol, |t, v| {
                t.social_hinge(v[0], hinge_agents, 1.0, false)
            }),
        );

        // -- latent-head math -------------------------------------------
        let (gr, gd) = (dim(&mut rng, 1, 4), dim(&mut rng, 1, 5));
        let kl_in = [
            randn_from(&mut rng, gr, gd),
            randn_from(&mut rng, gr, gd),
            randn_from(&mut rng, gr, gd),
            randn_from(&mut rng, gr, gd),
        ];
        merge(
            &mut out,
            check_gradients("gaussian_kl", &kl_in, step, tol, |t, v| {
                let q = GaussianParams { mu: v[0], logvar: v[1] };
                let p = GaussianParams { mu: v[2], logvar: v[3] };
                gaussian_kl(t, &q, &p).expect("shapes verified")
            }),
        );
        let rp_noise = randn_from(&mut rng, gr, gd);
        merge(
            &mut out,
            check_gradients("reparameterize", &kl_in[..2], step, tol, |t, v| {
                let q = GaussianParams { mu: v[0], logvar: v[1] };
                let z = reparameterize(t, &q, &rp_noise).expect("shapes verified");
                let sq = t.mul(z, z);
                t.mean(sq)
            }),
        );

        // -- attention block, with and without the causal restriction ----
        let a_agents = dim(&mut rng, 1, 3);
        let a_steps = dim(&mut rng, 1, 3);
        let heads = dim(&mut rng, 1, 2);
        let d_m = 4 * heads;
        let d_h = d_m / heads;
        let seq = a_agents * a_steps;
        let mut attn_inputs = vec![randn_from(&mut rng, seq, d_m)];
        for _ in 0..heads {
            for _ in 0..5 {
                let mut wmat = randn_from(&mut rng, d_m, d_h);
                wmat.scale_assign(0.5);
                attn_inputs.push(wmat);
            }
            let mut wout = randn_from(&mut rng, d_h, d_m);
            wout.scale_assign(0.5);
            attn_inputs.push(wout);
        }
        let wa = randn_from(&mut rng, seq, d_m);
        let attn_build = |causal: bool| {
            let wa = wa.clone();
            move |t: &mut Tape<f64>, v: &[Var]| -> Var {
                let heads_vars: Vec<AttentionHead> = (0..heads)
                    .map(|h| AttentionHead {
                        q_self: v[1 + 6 * h],
                        k_self: v[2 + 6 * h],
                        q_other: v[3 + 6 * h],
                        k_other: v[4 + 6 * h],
                        value: v[5 + 6 * h],
                        out: v[6 + 6 * h],
                    })
                    .collect();
                let mask = build_agent_mask(a_agents, a_steps).expect("valid dims");
                let causal_mask = causal.then(|| causal_additive_mask(a_agents, a_steps, a_steps));
                let attn =
                    agent_aware_attention(t, v[0], v[0], &heads_vars, &mask, causal_mask.as_ref())
                        .expect("shapes verified");
                let weighted = t.mul_const(attn, &wa);
                t.sum(weighted)
            }
        };
        merge(
            &mut out,
            check_gradients("agent_aware_attention", &attn_inputs, step, tol, attn_build(false)),
        );
        merge(
            &mut out,
            check_gradients(
                "agent_aware_attention_causal",
                &attn_inputs,
                step,
                tol,
                attn_build(true),
            ),
        );
    }
    out
}

/// Convenience wrapper: runs [`primitive_suite`] and verifies every entry
/// meets the pass-fraction bar, returning the outcomes for reporting.
pub fn verify_primitives(step: f64, tol: f64, variants: u64, required: f64) -> (bool, Vec<CheckOutcome>) {
    let outcomes = primitive_suite(step, tol, variants);
    let all = outcomes.iter().all(|o| o.passes(required));
    (all, outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_matches_finite_differences() {
        let (all, outcomes) = verify_primitives(1e-4, 1e-4, 3, 0.99);
        for o in &outcomes {
            assert!(
                o.passes(0.99),
                "{}: {}/{} coords within tolerance, worst {:.3e}",
                o.name,
                o.within,
                o.coords,
                o.worst
            );
            assert_eq!(o.variants, 3, "{}: variant lost", o.name);
        }
        assert!(all);
        assert!(outcomes.len() >= 20, "suite lost coverage");
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // a forward of |x| whose recorded gradient pretends to be identity
        let mut rng = derive(173, "negative-control", 0);
        let x = randn_from(&mut rng, 4, 4);
        let outcome = check_gradients("broken", &[x], 1e-4, 1e-4, |t, v| {
            let abs = t.value(v[0]).clone().map(f64::abs);
            let fake = t.offset(v[0], &{
                let mut d = abs.clone();
                for (dv, xv) in d.data_mut().iter_mut().zip(t.value(v[0]).data()) {
                    *dv -= *xv;
                }
                d
            });
            t.sum(fake)
        });
        assert!(!outcome.passes(0.99), "negative control failed to fail");
    }

    #[test]
    fn dropout_masks_check_out_when_frozen() {
        // a fixed dropout mask is just mul_const, so gradients must track it
        let mut rng = derive(5, "drop", 0);
        let mut mask = Tensor::zeros(4, 4);
        for v in mask.data_mut() {
            if rng.gen::<f64>() < 0.8 {
                *v = 1.0 / 0.8;
            }
        }
        let x = randn_from(&mut rng, 4, 4);
        let outcome = check_gradients("frozen_dropout", &[x], 1e-4, 1e-4, |t, v| {
            let d = t.mul_const(v[0], &mask);
            t.sum(d)
        });
        assert!(outcome.passes(0.99));
    }
}
