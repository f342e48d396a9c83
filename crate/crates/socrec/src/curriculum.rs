//! Difficulty tracking and training-set augmentation.
//!
//! Each real training sample's forecast loss is recorded every epoch; over
//! a window of `N_c` epochs the per-epoch decrease/increase magnitudes `d`
//! and `a` are compared, and samples whose loss rose more often than a
//! threshold fraction are flagged as difficult. Flagged samples are masked,
//! reconstructed, and re-forecast into pseudo-trajectories that replace the
//! previous augmentation pool. Baseline strategies (random flagging, linear
//! extrapolation) live here too so every augmentation path shares one
//! interface.

use crate::data::{
    mask_past, normalize_scene_with_rotation, write_dataset, MaskedPast, Scene, SourceTag,
    T_FUTURE, T_PAST,
};
use crate::model::{
    decode_future_autoregressive, decode_reconstruction, encode, last_observed, past_input,
    posterior_params_recon, prior_params, Bound, ModelError, ModelState,
};
use crate::nn::tape::Tape;
use crate::nn::tensor::Real;
use crate::rng::derive;
use rand::Rng;
use rayon::prelude::*;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use thiserror::Error;

/// Loss values below this floor are clamped before any ratio is taken.
const LOSS_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum CurriculumError {
    #[error("sample {sample}: {have} recorded losses, need {need}")]
    History {
        sample: u64,
        have: usize,
        need: usize,
    },
    #[error("requested {want} samples from a population of {have}")]
    Count { want: usize, have: usize },
}

/// Per-epoch loss decrease and increase magnitudes.
///
/// With `delta = l_curr − l_prev` (after flooring both losses):
/// `d = min(delta, 0)·ln(l_curr/l_prev)` and
/// `a = max(delta, 0)·ln(l_curr/l_prev)`. Both are non-negative and at
/// most one is nonzero: a falling loss yields `d > 0`, a rising loss
/// `a > 0`, an unchanged loss neither.
pub fn loss_deltas(l_prev: f64, l_curr: f64) -> (f64, f64) {
    let prev = l_prev.max(LOSS_FLOOR);
    let curr = l_curr.max(LOSS_FLOOR);
    let delta = curr - prev;
    let ratio = (curr / prev).ln();
    (delta.min(0.0) * ratio, delta.max(0.0) * ratio)
}

/// Forecast-loss history per real training sample.
#[derive(Clone, Debug, Default)]
pub struct DifficultyLedger {
    histories: BTreeMap<u64, Vec<(usize, f64)>>,
}

impl DifficultyLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends one epoch's forecast loss for a sample.
    pub fn record(&mut self, sample_id: u64, epoch: usize, l_f: f64) {
        self.histories.entry(sample_id).or_default().push((epoch, l_f));
    }

    /// Drops all recorded history (each pool refresh starts a new window).
    pub fn clear(&mut self) {
        self.histories.clear();
    }

    pub fn tracked(&self) -> impl Iterator<Item = u64> + '_ {
        self.histories.keys().copied()
    }

    pub fn history_len(&self, sample_id: u64) -> usize {
        self.histories.get(&sample_id).map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.histories.is_empty()
    }

    /// The recorded `(epoch, loss)` pairs for one sample.
    pub fn history(&self, sample_id: u64) -> &[(usize, f64)] {
        self.histories.get(&sample_id).map_or(&[], Vec::as_slice)
    }

    /// Serializable snapshot: `(sample_id, epoch, loss)` triples.
    pub fn snapshot(&self) -> Vec<(u64, usize, f64)> {
        self.histories
            .iter()
            .flat_map(|(id, h)| h.iter().map(|(e, l)| (*id, *e, *l)))
            .collect()
    }

    pub fn from_snapshot(rows: &[(u64, usize, f64)]) -> Self {
        let mut ledger = Self::new();
        for (id, epoch, loss) in rows {
            ledger.record(*id, *epoch, *loss);
        }
        ledger
    }

    /// How many of the last `n_c` epoch-to-epoch transitions decreased the
    /// loss (`d > a`).
    pub fn count(&self, sample_id: u64, n_c: usize) -> Result<usize, CurriculumError> {
        self.count_with(sample_id, n_c, |d, a| d > a)
    }

    /// The flipped indicator (`d < a`): transitions that increased the loss.
    pub fn count_inverse(&self, sample_id: u64, n_c: usize) -> Result<usize, CurriculumError> {
        self.count_with(sample_id, n_c, |d, a| d < a)
    }

    fn count_with(
        &self,
        sample_id: u64,
        n_c: usize,
        indicator: impl Fn(f64, f64) -> bool,
    ) -> Result<usize, CurriculumError> {
        let history = self.histories.get(&sample_id).map_or(&[][..], Vec::as_slice);
        if history.len() < n_c + 1 {
            return Err(CurriculumError::History {
                sample: sample_id,
                have: history.len(),
                need: n_c + 1,
            });
        }
        let tail = &history[history.len() - (n_c + 1)..];
        Ok(tail
            .windows(2)
            .filter(|w| {
                let (d, a) = loss_deltas(w[0].1, w[1].1);
                indicator(d, a)
            })
            .count())
    }
}

fn flags_by(
    ledger: &DifficultyLedger,
    d_threshold: f64,
    n_c: usize,
    count: impl Fn(&DifficultyLedger, u64) -> Result<usize, CurriculumError>,
) -> Result<BTreeSet<u64>, CurriculumError> {
    let mut flagged = BTreeSet::new();
    for id in ledger.tracked() {
        if (count(ledger, id)? as f64) < d_threshold * n_c as f64 {
            flagged.insert(id);
        }
    }
    Ok(flagged)
}

/// Samples whose loss decreased in fewer than `D·N_c` of the last `N_c`
/// transitions — the "still hard" set. Strict inequality: exactly meeting
/// the threshold is not difficult.
pub fn difficulty_flags(
    ledger: &DifficultyLedger,
    d_threshold: f64,
    n_c: usize,
) -> Result<BTreeSet<u64>, CurriculumError> {
    flags_by(ledger, d_threshold, n_c, |l, id| l.count(id, n_c))
}

/// The ablation variant: flags samples whose loss *increased* in fewer
/// than `D·N_c` transitions, i.e. the easy ones.
pub fn inverse_flags(
    ledger: &DifficultyLedger,
    d_threshold: f64,
    n_c: usize,
) -> Result<BTreeSet<u64>, CurriculumError> {
    flags_by(ledger, d_threshold, n_c, |l, id| l.count_inverse(id, n_c))
}

/// Uniform draw of `count` ids without replacement.
pub fn random_flags<R: Rng>(
    sample_ids: &[u64],
    count: usize,
    rng: &mut R,
) -> Result<BTreeSet<u64>, CurriculumError> {
    if count > sample_ids.len() {
        return Err(CurriculumError::Count {
            want: count,
            have: sample_ids.len(),
        });
    }
    let mut order: Vec<u64> = sample_ids.to_vec();
    for i in 0..count {
        let j = rng.gen_range(i..order.len());
        order.swap(i, j);
    }
    Ok(order[..count].iter().copied().collect())
}

/// Which timestep pair defines the constant velocity for
/// [`linear_extrapolate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExtrapolationMode {
    FirstTwo,
    LastTwo,
}

/// Continues every agent at a constant velocity read off either the first
/// or the last pair of observed timesteps; the past is copied unchanged.
pub fn linear_extrapolate(scene: &Scene, mode: ExtrapolationMode) -> Scene {
    let mut out = scene.clone();
    out.source_tag = SourceTag::BaselineAug;
    for traj in &mut out.positions {
        let (a, b) = match mode {
            ExtrapolationMode::FirstTwo => (traj[0], traj[1]),
            ExtrapolationMode::LastTwo => (traj[T_PAST - 2], traj[T_PAST - 1]),
        };
        let v = [b[0] - a[0], b[1] - a[1]];
        let anchor = traj[T_PAST - 1];
        for (step, p) in traj[T_PAST..].iter_mut().enumerate() {
            let k = (step + 1) as f64;
            *p = [anchor[0] + k * v[0], anchor[1] + k * v[1]];
        }
    }
    out
}

/// Masks a scene's past, reconstructs it, forecasts from the
/// reconstruction, and splices both into a new pseudo-tagged scene.
///
/// Both latent draws are posterior/prior modes (`z = mu`), so the output
/// is deterministic given the model weights and the masking rng.
pub fn make_pseudo_trajectory<F: Real, R: Rng>(
    scene: &Scene,
    state: &ModelState<F>,
    r_percent: f64,
    rng: &mut R,
) -> Result<Scene, ModelError> {
    let (norm, transform) = normalize_scene_with_rotation(scene, 0.0);
    let n = norm.n_agents();
    let masked = mask_past(&norm, r_percent, rng);
    let mut dummy = derive(0, "inference-dropout", 0);

    let recon_t = {
        let mut tape = Tape::new();
        let bound = Bound::new(&state.params, &mut tape);
        let past = past_input::<F>(&masked);
        let feats = encode(&mut tape, &bound, &state.hyper, &past, false, &mut dummy)?;
        let post = posterior_params_recon(&mut tape, &bound, feats, n);
        let recon =
            decode_reconstruction(&mut tape, &bound, &state.hyper, feats, post.mu, n, false, &mut dummy)?;
        tape.value(recon).clone()
    };
    if !recon_t.is_finite() {
        return Err(ModelError::NonFinite("reconstructed past"));
    }

    let mut pseudo = norm.clone();
    for t in 0..T_PAST {
        for i in 0..n {
            for c in 0..2 {
                pseudo.positions[i][t][c] = recon_t.at(t * n + i, c).to_f64_lossy();
            }
        }
    }

    let future_t = {
        let mut tape = Tape::new();
        let bound = Bound::new(&state.params, &mut tape);
        let past = past_input::<F>(&MaskedPast::unmasked(&pseudo));
        let feats = encode(&mut tape, &bound, &state.hyper, &past, false, &mut dummy)?;
        let prior = prior_params(&mut tape, &bound, feats, n);
        let obs = last_observed::<F>(&pseudo);
        decode_future_autoregressive(&mut tape, &bound, &state.hyper, feats, prior.mu, &obs)?
    };
    if !future_t.is_finite() {
        return Err(ModelError::NonFinite("forecast continuation"));
    }
    for t in 0..T_FUTURE {
        for i in 0..n {
            for c in 0..2 {
                pseudo.positions[i][T_PAST + t][c] = future_t.at(t * n + i, c).to_f64_lossy();
            }
        }
    }

    let mut out = transform.invert_scene(&pseudo);
    out.source_tag = SourceTag::Pseudo;
    Ok(out)
}

/// The current set of pseudo-trajectories, replaced wholesale at every
/// refresh.
#[derive(Clone, Debug, Default)]
pub struct AugmentationPool {
    pub scenes: Vec<Scene>,
    pub generated_at_epoch: usize,
    /// Flagged samples whose generation produced non-finite output.
    pub rejected: usize,
}

impl AugmentationPool {
    pub fn empty(epoch: usize) -> Self {
        Self {
            scenes: Vec::new(),
            generated_at_epoch: epoch,
            rejected: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// Dataset-format dump of the pool plus the flagged ids, for
    /// inspection. Parses back through the normal dataset loader.
    pub fn dump(&self, flagged: &BTreeSet<u64>) -> String {
        let mut out = String::new();
        let ids: Vec<String> = flagged.iter().map(u64::to_string).collect();
        let _ = writeln!(
            out,
            "# refresh epoch={} flagged=[{}] rejected={}",
            self.generated_at_epoch,
            ids.join(" "),
            self.rejected
        );
        out.push_str(&write_dataset(&self.scenes));
        out
    }
}

/// Replaces the previous pool: one pseudo-trajectory per flagged real
/// sample, generated in parallel from the frozen model, with per-sample
/// masking streams so the result is independent of thread scheduling.
/// Clears the ledger so the next observation window starts fresh.
pub fn refresh_pool<F: Real>(
    trainset: &[Scene],
    flagged: &BTreeSet<u64>,
    state: &ModelState<F>,
    r_percent: f64,
    seed: u64,
    epoch: usize,
    ledger: &mut DifficultyLedger,
) -> AugmentationPool {
    let ids: Vec<u64> = flagged
        .iter()
        .copied()
        .filter(|id| {
            (*id as usize) < trainset.len() && trainset[*id as usize].source_tag == SourceTag::Real
        })
        .collect();
    let results: Vec<Result<Scene, ModelError>> = ids
        .par_iter()
        .map(|id| {
            let mut rng = derive(seed, "pseudo-mask", *id);
            make_pseudo_trajectory(&trainset[*id as usize], state, r_percent, &mut rng)
        })
        .collect();
    let mut pool = AugmentationPool::empty(epoch);
    for r in results {
        match r {
            Ok(scene) => pool.scenes.push(scene),
            Err(_) => pool.rejected += 1,
        }
    }
    ledger.clear();
    pool
}
