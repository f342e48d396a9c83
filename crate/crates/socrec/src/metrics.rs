//! Forecast evaluation: displacement errors over a sample set, a
//! kernel-density log-likelihood, inter-pedestrian overlap rates, and a
//! parallel whole-dataset harness.
//!
//! All aggregate numbers are pedestrian-weighted: per-pedestrian values
//! are pooled across scenes before averaging, so a crowded scene counts
//! proportionally to its crowd.

use crate::data::{Scene, T_FUTURE};
use crate::model::{sample_predictions, ModelError, ModelState, PredictionSet};
use crate::nn::tensor::Real;
use crate::rng::derive;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Densities below this floor are clamped before taking the log, which
/// caps the per-point negative log likelihood at `-ln(1e-9) ≈ 20.72`.
pub const DENSITY_FLOOR: f64 = 1e-9;
/// Per-dimension sample variances are floored here before the bandwidth
/// rule, so degenerate (collapsed) sample clouds still yield a density.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("prediction set is empty")]
    NoSamples,
    #[error("{have} samples cannot support a density estimate; need at least 2")]
    TooFewSamples { have: usize },
    #[error("prediction set covers {preds} pedestrians but ground truth has {gt}")]
    AgentMismatch { preds: usize, gt: usize },
    #[error("evaluation dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// How per-pedestrian errors are reduced over the sample set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceMode {
    /// Best sample per pedestrian.
    Min,
    /// Average over samples per pedestrian.
    Mean,
}

/// Per-pedestrian displacement errors, one entry per sample.
struct PedErrors {
    /// Average over the 12 forecast steps of the Euclidean distance.
    ade: Vec<f64>,
    /// Euclidean distance at the final step.
    fde: Vec<f64>,
}

fn per_ped_errors(
    preds: &PredictionSet,
    gt: &[[[f64; 2]; T_FUTURE]],
) -> Result<Vec<PedErrors>, MetricError> {
    let k = preds.k();
    if k == 0 {
        return Err(MetricError::NoSamples);
    }
    let n = preds.n_agents();
    if n != gt.len() {
        return Err(MetricError::AgentMismatch {
            preds: n,
            gt: gt.len(),
        });
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut ped = PedErrors {
            ade: Vec::with_capacity(k),
            fde: Vec::with_capacity(k),
        };
        for sample in &preds.samples {
            let mut acc = 0.0;
            for t in 0..T_FUTURE {
                let dx = sample[i][t][0] - gt[i][t][0];
                let dy = sample[i][t][1] - gt[i][t][1];
                acc += dx.hypot(dy);
            }
            ped.ade.push(acc / T_FUTURE as f64);
            let last = T_FUTURE - 1;
            let dx = sample[i][last][0] - gt[i][last][0];
            let dy = sample[i][last][1] - gt[i][last][1];
            ped.fde.push(dx.hypot(dy));
        }
        out.push(ped);
    }
    Ok(out)
}

fn reduce(values: &[f64], mode: ReduceMode) -> f64 {
    match mode {
        ReduceMode::Min => values.iter().copied().fold(f64::INFINITY, f64::min),
        ReduceMode::Mean => values.iter().sum::<f64>() / values.len() as f64,
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Average displacement error in meters: per pedestrian, each sample's
/// mean step-wise Euclidean distance to the ground truth, reduced over
/// samples by `mode`, then averaged over pedestrians.
pub fn ade(
    preds: &PredictionSet,
    gt: &[[[f64; 2]; T_FUTURE]],
    mode: ReduceMode,
) -> Result<f64, MetricError> {
    let errs = per_ped_errors(preds, gt)?;
    let per_ped: Vec<f64> = errs.iter().map(|p| reduce(&p.ade, mode)).collect();
    Ok(mean(&per_ped))
}

/// Final displacement error in meters: as [`ade`] but judged only on the
/// last forecast step.
pub fn fde(
    preds: &PredictionSet,
    gt: &[[[f64; 2]; T_FUTURE]],
    mode: ReduceMode,
) -> Result<f64, MetricError> {
    let errs = per_ped_errors(preds, gt)?;
    let per_ped: Vec<f64> = errs.iter().map(|p| reduce(&p.fde, mode)).collect();
    Ok(mean(&per_ped))
}

/// Log density of `point` under a 2D product-Gaussian KDE with the given
/// per-dimension bandwidths, via log-sum-exp over kernels.
fn kde_log_density(samples: &[[f64; 2]], h: [f64; 2], point: [f64; 2]) -> f64 {
    let k = samples.len() as f64;
    let log_norm = -(std::f64::consts::TAU * h[0] * h[1]).ln() - k.ln();
    let mut exponents = Vec::with_capacity(samples.len());
    let mut max_e = f64::NEG_INFINITY;
    for s in samples {
        let dx = (point[0] - s[0]) / h[0];
        let dy = (point[1] - s[1]) / h[1];
        let e = -0.5 * (dx * dx + dy * dy);
        max_e = max_e.max(e);
        exponents.push(e);
    }
    let sum: f64 = exponents.iter().map(|e| (e - max_e).exp()).sum();
    log_norm + max_e + sum.ln()
}

/// Scott's-rule bandwidth for one dimension of a 2D KDE: the sample
/// standard deviation (variance floored at [`VARIANCE_FLOOR`]) scaled by
/// `K^(-1/6)`.
fn scott_bandwidth(values: &[f64]) -> f64 {
    let k = values.len() as f64;
    let mu = values.iter().sum::<f64>() / k;
    let var = values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (k - 1.0);
    var.max(VARIANCE_FLOOR).sqrt() * k.powf(-1.0 / 6.0)
}

/// Mean negative log likelihood of the ground truth under per-pedestrian,
/// per-timestep 2D Gaussian KDEs fitted to the sample positions. The log
/// density is floored at `ln(`[`DENSITY_FLOOR`]`)`; values can be negative
/// when the samples concentrate tightly around the truth.
pub fn kde_nll(preds: &PredictionSet, gt: &[[[f64; 2]; T_FUTURE]]) -> Result<f64, MetricError> {
    let k = preds.k();
    if k < 2 {
        return Err(MetricError::TooFewSamples { have: k });
    }
    let n = preds.n_agents();
    if n != gt.len() {
        return Err(MetricError::AgentMismatch {
            preds: n,
            gt: gt.len(),
        });
    }
    let mut total = 0.0;
    let mut terms = 0usize;
    for i in 0..n {
        for t in 0..T_FUTURE {
            let points: Vec<[f64; 2]> = preds.samples.iter().map(|s| s[i][t]).collect();
            let xs: Vec<f64> = points.iter().map(|p| p[0]).collect();
            let ys: Vec<f64> = points.iter().map(|p| p[1]).collect();
            let h = [scott_bandwidth(&xs), scott_bandwidth(&ys)];
            let logp = kde_log_density(&points, h, gt[i][t]).max(DENSITY_FLOOR.ln());
            total += -logp;
            terms += 1;
        }
    }
    Ok(total / terms as f64)
}

/// Counts overlap events — a (sample, pair i<j, timestep) whose Euclidean
/// distance falls strictly below `epsilon_m` — and the percentage against
/// all `K·C(N,2)·12` possible events. Scenes with one pedestrian have no
/// pairs and contribute nothing to either side.
pub fn overlap_stats(preds: &PredictionSet, epsilon_m: f64) -> (u64, f64) {
    assert!(epsilon_m >= 0.0, "overlap threshold must be non-negative");
    let (count, events) = overlap_raw(preds, epsilon_m);
    let pct = if events == 0 {
        0.0
    } else {
        100.0 * count as f64 / events as f64
    };
    (count, pct)
}

/// The raw (event count, possible events) pair, for aggregation across
/// scenes.
fn overlap_raw(preds: &PredictionSet, epsilon_m: f64) -> (u64, u64) {
    let n = preds.n_agents();
    if n < 2 {
        return (0, 0);
    }
    let mut count = 0u64;
    for sample in &preds.samples {
        for i in 0..n {
            for j in (i + 1)..n {
                for t in 0..T_FUTURE {
                    let dx = sample[i][t][0] - sample[j][t][0];
                    let dy = sample[i][t][1] - sample[j][t][1];
                    if dx.hypot(dy) < epsilon_m {
                        count += 1;
                    }
                }
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as u64;
    let events = preds.k() as u64 * pairs * T_FUTURE as u64;
    (count, events)
}

/// One aggregated block of metric values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    /// Samples per scene this block was computed from.
    pub k: usize,
    pub ade_min: f64,
    pub ade_mean: f64,
    pub fde_min: f64,
    pub fde_mean: f64,
    /// Absent when `k < 2` (a single sample has no spread to fit).
    pub kde_nll: Option<f64>,
    pub overlap_count: u64,
    /// All possible overlap events, the denominator behind
    /// `overlap_pct`.
    pub overlap_events: u64,
    pub overlap_pct: f64,
}

impl MetricSummary {
    /// The structural invariants every well-formed block satisfies.
    pub fn is_internally_consistent(&self) -> bool {
        let tol = 1e-9;
        let pct_ok = if self.overlap_events == 0 {
            self.overlap_count == 0 && self.overlap_pct == 0.0
        } else {
            let expect = 100.0 * self.overlap_count as f64 / self.overlap_events as f64;
            (self.overlap_pct - expect).abs() <= tol
        };
        self.ade_min <= self.ade_mean + tol
            && self.fde_min <= self.fde_mean + tol
            && self.ade_min >= 0.0
            && self.fde_min >= 0.0
            && pct_ok
    }
}

/// The full evaluation result for one dataset: the K-sample block and the
/// single-mode-sample block side by side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub epsilon_m: f64,
    pub n_scenes: usize,
    pub n_pedestrians: usize,
    pub sampled: MetricSummary,
    pub mode_only: MetricSummary,
}

impl MetricReport {
    pub fn csv_header() -> &'static str {
        "dataset,ade_min,fde_min,ade_mean,fde_mean,kde_nll,overlap_count,overlap_pct"
    }

    /// The K-sample block as one CSV row.
    pub fn csv_row(&self) -> String {
        let s = &self.sampled;
        let nll = s
            .kde_nll
            .map(|v| format!("{v}"))
            .unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.dataset,
            s.ade_min,
            s.fde_min,
            s.ade_mean,
            s.fde_mean,
            nll,
            s.overlap_count,
            s.overlap_pct
        )
    }

    pub fn is_internally_consistent(&self) -> bool {
        self.sampled.is_internally_consistent() && self.mode_only.is_internally_consistent()
    }
}

struct SceneAccum {
    /// (ade_min, ade_mean, fde_min, fde_mean) per pedestrian.
    per_ped: Vec<(f64, f64, f64, f64)>,
    nll_sum: f64,
    nll_terms: usize,
    overlap: (u64, u64),
    /// Mode-sample-only (ade, fde) per pedestrian.
    mode_per_ped: Vec<(f64, f64)>,
    mode_overlap: (u64, u64),
}

fn accum_scene(preds: &PredictionSet, scene: &Scene) -> Result<SceneAccum, MetricError> {
    let gt = scene.future();
    let errs = per_ped_errors(preds, &gt)?;
    let per_ped = errs
        .iter()
        .map(|p| {
            (
                reduce(&p.ade, ReduceMode::Min),
                reduce(&p.ade, ReduceMode::Mean),
                reduce(&p.fde, ReduceMode::Min),
                reduce(&p.fde, ReduceMode::Mean),
            )
        })
        .collect();
    let (nll_sum, nll_terms) = if preds.k() >= 2 {
        let terms = preds.n_agents() * T_FUTURE;
        (kde_nll(preds, &gt)? * terms as f64, terms)
    } else {
        (0.0, 0)
    };
    let mode_per_ped = errs.iter().map(|p| (p.ade[0], p.fde[0])).collect();
    Ok(SceneAccum {
        per_ped,
        nll_sum,
        nll_terms,
        overlap: (0, 0),
        mode_per_ped,
        mode_overlap: (0, 0),
    })
}

/// Evaluates a dataset with an arbitrary per-scene sampler. The sampler
/// receives the scene index and the scene and must return at least one
/// sample per scene; sample 0 is treated as the distribution mode for the
/// single-sample block.
pub fn evaluate_with<S>(
    sampler: S,
    dataset_label: &str,
    scenes: &[Scene],
    epsilon_m: f64,
) -> Result<MetricReport, MetricError>
where
    S: Fn(usize, &Scene) -> Result<PredictionSet, MetricError> + Sync,
{
    if scenes.is_empty() {
        return Err(MetricError::EmptyDataset);
    }
    assert!(epsilon_m >= 0.0, "overlap threshold must be non-negative");
    let accums: Vec<(usize, SceneAccum)> = scenes
        .par_iter()
        .enumerate()
        .map(|(idx, scene)| {
            let preds = sampler(idx, scene)?;
            let mut acc = accum_scene(&preds, scene)?;
            acc.overlap = overlap_raw(&preds, epsilon_m);
            let mode = PredictionSet {
                samples: vec![preds.samples[0].clone()],
            };
            acc.mode_overlap = overlap_raw(&mode, epsilon_m);
            Ok((preds.k(), acc))
        })
        .collect::<Result<_, MetricError>>()?;

    let k = accums[0].0;
    let mut ade_min = Vec::new();
    let mut ade_mean = Vec::new();
    let mut fde_min = Vec::new();
    let mut fde_mean = Vec::new();
    let mut mode_ade = Vec::new();
    let mut mode_fde = Vec::new();
    let mut nll_sum = 0.0;
    let mut nll_terms = 0usize;
    let mut overlap = (0u64, 0u64);
    let mut mode_overlap = (0u64, 0u64);
    for (_, acc) in &accums {
        for &(am, aa, fm, fa) in &acc.per_ped {
            ade_min.push(am);
            ade_mean.push(aa);
            fde_min.push(fm);
            fde_mean.push(fa);
        }
        for &(a, f) in &acc.mode_per_ped {
            mode_ade.push(a);
            mode_fde.push(f);
        }
        nll_sum += acc.nll_sum;
        nll_terms += acc.nll_terms;
        overlap.0 += acc.overlap.0;
        overlap.1 += acc.overlap.1;
        mode_overlap.0 += acc.mode_overlap.0;
        mode_overlap.1 += acc.mode_overlap.1;
    }
    let pct = |(c, e): (u64, u64)| {
        if e == 0 {
            0.0
        } else {
            100.0 * c as f64 / e as f64
        }
    };
    let sampled = MetricSummary {
        k,
        ade_min: mean(&ade_min),
        ade_mean: mean(&ade_mean),
        fde_min: mean(&fde_min),
        fde_mean: mean(&fde_mean),
        kde_nll: (nll_terms > 0).then(|| nll_sum / nll_terms as f64),
        overlap_count: overlap.0,
        overlap_events: overlap.1,
        overlap_pct: pct(overlap),
    };
    let mode_only = MetricSummary {
        k: 1,
        ade_min: mean(&mode_ade),
        ade_mean: mean(&mode_ade),
        fde_min: mean(&mode_fde),
        fde_mean: mean(&mode_fde),
        kde_nll: None,
        overlap_count: mode_overlap.0,
        overlap_events: mode_overlap.1,
        overlap_pct: pct(mode_overlap),
    };
    Ok(MetricReport {
        dataset: dataset_label.to_string(),
        epsilon_m,
        n_scenes: scenes.len(),
        n_pedestrians: ade_min.len(),
        sampled,
        mode_only,
    })
}

/// Evaluates a frozen model: draws `k` seeded forecast samples per scene
/// (sample 0 is the latent mode) and computes all metrics plus the
/// mode-sample-only variant.
pub fn evaluate<F: Real>(
    state: &ModelState<F>,
    dataset_label: &str,
    scenes: &[Scene],
    k: usize,
    epsilon_m: f64,
    seed: u64,
) -> Result<MetricReport, MetricError> {
    if k == 0 {
        return Err(MetricError::NoSamples);
    }
    evaluate_with(
        |idx, scene| {
            let mut rng = derive(seed, "eval-scene", idx as u64);
            sample_predictions(state, scene, k, &mut rng).map_err(MetricError::Model)
        },
        dataset_label,
        scenes,
        epsilon_m,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, SynthConfig, T_PAST};
    use crate::model::HyperParams;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    /// A straight-line ground truth: agent i walks from (i, -i) with
    /// velocity (0.5, 0.25·i).
    fn line_gt(n: usize) -> Vec<[[f64; 2]; T_FUTURE]> {
        (0..n)
            .map(|i| {
                let mut traj = [[0.0; 2]; T_FUTURE];
                for (t, p) in traj.iter_mut().enumerate() {
                    p[0] = i as f64 + 0.5 * (t + 1) as f64;
                    p[1] = -(i as f64) + 0.25 * i as f64 * (t + 1) as f64;
                }
                traj
            })
            .collect()
    }

    fn offset_preds(gt: &[[[f64; 2]; T_FUTURE]], offsets: &[[f64; 2]]) -> PredictionSet {
        let samples = offsets
            .iter()
            .map(|off| {
                gt.iter()
                    .map(|traj| {
                        let mut s = *traj;
                        for p in &mut s {
                            p[0] += off[0];
                            p[1] += off[1];
                        }
                        s
                    })
                    .collect()
            })
            .collect();
        PredictionSet { samples }
    }

    #[test]
    fn displacement_errors_match_hand_values() {
        let gt = line_gt(3);
        let exact = offset_preds(&gt, &[[0.0, 0.0]]);
        assert_abs_diff_eq!(ade(&exact, &gt, ReduceMode::Min).unwrap(), 0.0);
        assert_abs_diff_eq!(ade(&exact, &gt, ReduceMode::Mean).unwrap(), 0.0);
        assert_abs_diff_eq!(fde(&exact, &gt, ReduceMode::Min).unwrap(), 0.0);

        // a constant (3,4) offset is 5 meters at every step
        let off = offset_preds(&gt, &[[3.0, 4.0]]);
        assert_abs_diff_eq!(ade(&off, &gt, ReduceMode::Mean).unwrap(), 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fde(&off, &gt, ReduceMode::Mean).unwrap(), 5.0, epsilon = 1e-12);

        // two samples: perfect and 5 m off -> min 0, mean 2.5
        let two = offset_preds(&gt, &[[0.0, 0.0], [3.0, 4.0]]);
        assert_abs_diff_eq!(ade(&two, &gt, ReduceMode::Min).unwrap(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ade(&two, &gt, ReduceMode::Mean).unwrap(), 2.5, epsilon = 1e-12);

        // final point 2 m off in y only
        let mut fin = offset_preds(&gt, &[[0.0, 0.0]]);
        for ped in &mut fin.samples[0] {
            ped[T_FUTURE - 1][1] += 2.0;
        }
        assert_abs_diff_eq!(fde(&fin, &gt, ReduceMode::Mean).unwrap(), 2.0, epsilon = 1e-12);
        // two samples with finals {0, 2} -> min 0, mean 1
        let mut pair = offset_preds(&gt, &[[0.0, 0.0], [0.0, 0.0]]);
        for ped in &mut pair.samples[1] {
            ped[T_FUTURE - 1][1] += 2.0;
        }
        assert_abs_diff_eq!(fde(&pair, &gt, ReduceMode::Min).unwrap(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fde(&pair, &gt, ReduceMode::Mean).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        let gt = line_gt(2);
        let empty = PredictionSet { samples: vec![] };
        assert!(matches!(
            ade(&empty, &gt, ReduceMode::Min),
            Err(MetricError::NoSamples)
        ));
        let one = offset_preds(&gt, &[[0.0, 0.0]]);
        assert!(matches!(
            kde_nll(&one, &gt),
            Err(MetricError::TooFewSamples { have: 1 })
        ));
        let wrong = offset_preds(&line_gt(3), &[[0.0, 0.0]]);
        assert!(matches!(
            ade(&wrong, &gt, ReduceMode::Min),
            Err(MetricError::AgentMismatch { preds: 3, gt: 2 })
        ));
    }

    #[test]
    fn kde_clamp_engages_far_from_the_samples() {
        let gt = line_gt(1);
        let far = offset_preds(&gt, &[[1000.0, 0.0], [1000.1, 0.0], [1000.0, 0.1]]);
        let nll = kde_nll(&far, &gt).unwrap();
        // every term hits the density floor exactly
        assert_abs_diff_eq!(nll, -(DENSITY_FLOOR.ln()), epsilon = 1e-12);
        assert_abs_diff_eq!(nll, 9.0 * 10.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn kde_identical_samples_fall_back_to_the_floored_bandwidth() {
        let gt = line_gt(1);
        let same = offset_preds(&gt, &[[0.0, 0.0]; 20]);
        let nll = kde_nll(&same, &gt).unwrap();
        // 20 kernels piled on the truth with a 1e-3 bandwidth: strongly
        // negative, nowhere near the clamp
        assert!(nll < -5.0, "nll = {nll}");
    }

    #[test]
    fn kde_matches_a_directly_coded_density_sum() {
        // one pedestrian, samples from a seeded unit normal around the gt
        let gt = line_gt(1);
        let mut rng = derive(33, "kde-oracle", 0);
        let k = 20;
        let mut preds = PredictionSet {
            samples: Vec::new(),
        };
        for _ in 0..k {
            let mut ped = gt.clone();
            for p in &mut ped[0] {
                p[0] += rng.gen::<f64>() * 2.0 - 1.0;
                p[1] += rng.gen::<f64>() * 2.0 - 1.0;
            }
            preds.samples.push(ped);
        }
        let got = kde_nll(&preds, &gt).unwrap();

        // independent reference: direct (unstabilized) kernel sum
        let mut total = 0.0;
        for t in 0..T_FUTURE {
            let xs: Vec<f64> = preds.samples.iter().map(|s| s[0][t][0]).collect();
            let ys: Vec<f64> = preds.samples.iter().map(|s| s[0][t][1]).collect();
            let band = |v: &[f64]| {
                let m = v.iter().sum::<f64>() / v.len() as f64;
                let var =
                    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0);
                var.max(1e-6).sqrt() * (v.len() as f64).powf(-1.0 / 6.0)
            };
            let (hx, hy) = (band(&xs), band(&ys));
            let mut density = 0.0;
            for i in 0..xs.len() {
                let dx = (gt[0][t][0] - xs[i]) / hx;
                let dy = (gt[0][t][1] - ys[i]) / hy;
                density += (-0.5 * (dx * dx + dy * dy)).exp()
                    / (2.0 * std::f64::consts::PI * hx * hy);
            }
            density /= xs.len() as f64;
            total += -density.max(1e-9).ln();
        }
        let reference = total / T_FUTURE as f64;
        assert_abs_diff_eq!(got, reference, epsilon = 1e-6);
    }

    #[test]
    fn kde_improves_as_the_cloud_tightens() {
        let gt = line_gt(2);
        let mut rng = derive(7, "kde-spread", 0);
        let draws: Vec<Vec<[f64; 2]>> = (0..20)
            .map(|_| {
                (0..2 * T_FUTURE)
                    .map(|_| [rng.gen::<f64>() * 2.0 - 1.0, rng.gen::<f64>() * 2.0 - 1.0])
                    .collect()
            })
            .collect();
        let cloud = |scale: f64| {
            let samples = draws
                .iter()
                .map(|noise| {
                    gt.iter()
                        .enumerate()
                        .map(|(i, traj)| {
                            let mut s = *traj;
                            for (t, p) in s.iter_mut().enumerate() {
                                p[0] += scale * noise[i * T_FUTURE + t][0];
                                p[1] += scale * noise[i * T_FUTURE + t][1];
                            }
                            s
                        })
                        .collect()
                })
                .collect();
            PredictionSet { samples }
        };
        let wide = kde_nll(&cloud(1.0), &gt).unwrap();
        let tight = kde_nll(&cloud(0.1), &gt).unwrap();
        assert!(
            tight < wide,
            "tighter cloud should score better: {tight} vs {wide}"
        );
    }

    #[test]
    fn overlap_counts_match_hand_values() {
        // two agents 10 m apart, never overlapping
        let gt = line_gt(2);
        let mut apart = offset_preds(&gt, &[[0.0, 0.0]]);
        for p in &mut apart.samples[0][1] {
            p[1] += 10.0;
        }
        assert_eq!(overlap_stats(&apart, 0.1), (0, 0.0));

        // coincident at exactly 3 of 12 timesteps, 50 m apart otherwise
        let mut sample = vec![[[0.0; 2]; T_FUTURE]; 2];
        for t in 0..T_FUTURE {
            if matches!(t, 0 | 4 | 9) {
                sample[0][t] = [0.0, 0.0];
                sample[1][t] = [0.0, 0.0];
            } else {
                sample[0][t] = [t as f64 * 10.0, 0.0];
                sample[1][t] = [t as f64 * 10.0, 50.0];
            }
        }
        let touch = PredictionSet {
            samples: vec![sample],
        };
        let (count, pct) = overlap_stats(&touch, 0.1);
        assert_eq!(count, 3);
        assert_abs_diff_eq!(pct, 25.0, epsilon = 1e-12);

        // strict inequality: epsilon 0 never fires, even when coincident
        assert_eq!(overlap_stats(&touch, 0.0), (0, 0.0));

        // a lone agent has no pairs
        let lone = offset_preds(&line_gt(1), &[[0.0, 0.0]]);
        assert_eq!(overlap_stats(&lone, 5.0), (0, 0.0));
    }

    proptest! {
        #[test]
        fn overlap_agrees_with_a_brute_force_recount(
            n in 1usize..=4,
            k in 1usize..=3,
            eps in 0.0f64..2.0,
            seed in 0u64..500,
        ) {
            let mut rng = derive(seed, "overlap-prop", 0);
            let samples: Vec<Vec<[[f64; 2]; T_FUTURE]>> = (0..k)
                .map(|_| {
                    (0..n)
                        .map(|_| {
                            let mut traj = [[0.0; 2]; T_FUTURE];
                            for p in &mut traj {
                                p[0] = rng.gen::<f64>() * 3.0;
                                p[1] = rng.gen::<f64>() * 3.0;
                            }
                            traj
                        })
                        .collect()
                })
                .collect();
            let preds = PredictionSet { samples };
            let (count, pct) = overlap_stats(&preds, eps);

            let mut expect = 0u64;
            for s in &preds.samples {
                for i in 0..n {
                    for j in 0..n {
                        if i < j {
                            for t in 0..T_FUTURE {
                                let d = ((s[i][t][0] - s[j][t][0]).powi(2)
                                    + (s[i][t][1] - s[j][t][1]).powi(2))
                                .sqrt();
                                if d < eps {
                                    expect += 1;
                                }
                            }
                        }
                    }
                }
            }
            prop_assert_eq!(count, expect);
            if n >= 2 {
                let events = (k * n * (n - 1) / 2 * T_FUTURE) as f64;
                prop_assert!((pct - 100.0 * expect as f64 / events).abs() < 1e-9);
            } else {
                prop_assert_eq!(pct, 0.0);
            }
        }

        #[test]
        fn min_never_exceeds_mean(
            n in 1usize..=3,
            k in 1usize..=5,
            seed in 0u64..500,
        ) {
            let mut rng = derive(seed, "minmean-prop", 0);
            let gt = line_gt(n);
            let samples: Vec<Vec<[[f64; 2]; T_FUTURE]>> = (0..k)
                .map(|_| {
                    gt.iter()
                        .map(|traj| {
                            let mut s = *traj;
                            for p in &mut s {
                                p[0] += rng.gen::<f64>() * 4.0 - 2.0;
                                p[1] += rng.gen::<f64>() * 4.0 - 2.0;
                            }
                            s
                        })
                        .collect()
                })
                .collect();
            let preds = PredictionSet { samples };
            let a_min = ade(&preds, &gt, ReduceMode::Min).unwrap();
            let a_mean = ade(&preds, &gt, ReduceMode::Mean).unwrap();
            let f_min = fde(&preds, &gt, ReduceMode::Min).unwrap();
            let f_mean = fde(&preds, &gt, ReduceMode::Mean).unwrap();
            prop_assert!(a_min <= a_mean + 1e-12);
            prop_assert!(f_min <= f_mean + 1e-12);
        }

        #[test]
        fn rigid_motion_leaves_errors_unchanged(
            angle in 0.0f64..std::f64::consts::TAU,
            tx in -50.0f64..50.0,
            ty in -50.0f64..50.0,
            seed in 0u64..200,
        ) {
            let mut rng = derive(seed, "rigid-prop", 0);
            let gt = line_gt(2);
            let preds = offset_preds(&gt, &[
                [rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5],
                [rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5],
            ]);
            let before = ade(&preds, &gt, ReduceMode::Mean).unwrap();
            let before_f = fde(&preds, &gt, ReduceMode::Min).unwrap();

            let (s, c) = angle.sin_cos();
            let rot = |p: [f64; 2]| [c * p[0] - s * p[1] + tx, s * p[0] + c * p[1] + ty];
            let gt2: Vec<[[f64; 2]; T_FUTURE]> = gt
                .iter()
                .map(|traj| {
                    let mut o = *traj;
                    for p in &mut o {
                        *p = rot(*p);
                    }
                    o
                })
                .collect();
            let preds2 = PredictionSet {
                samples: preds
                    .samples
                    .iter()
                    .map(|sample| {
                        sample
                            .iter()
                            .map(|traj| {
                                let mut o = *traj;
                                for p in &mut o {
                                    *p = rot(*p);
                                }
                                o
                            })
                            .collect()
                    })
                    .collect(),
            };
            let after = ade(&preds2, &gt2, ReduceMode::Mean).unwrap();
            let after_f = fde(&preds2, &gt2, ReduceMode::Min).unwrap();
            prop_assert!((before - after).abs() < 1e-9);
            prop_assert!((before_f - after_f).abs() < 1e-9);
        }
    }

    #[test]
    fn min_equals_mean_when_all_samples_agree() {
        let gt = line_gt(2);
        let preds = offset_preds(&gt, &[[1.0, 1.0]; 4]);
        let a_min = ade(&preds, &gt, ReduceMode::Min).unwrap();
        let a_mean = ade(&preds, &gt, ReduceMode::Mean).unwrap();
        assert_abs_diff_eq!(a_min, a_mean, epsilon = 0.0);
    }

    fn synth_scenes(n: usize, seed: u64, interaction: f64) -> Vec<Scene> {
        generate_synthetic_dataset(
            &SynthConfig {
                n_scenes: n,
                interaction,
                ..SynthConfig::default()
            },
            seed,
        )
    }

    #[test]
    fn perfect_oracle_evaluates_to_zero_error() {
        let scenes = synth_scenes(5, 4, 1.0);
        let report = evaluate_with(
            |_, scene| {
                Ok(PredictionSet {
                    samples: vec![scene.future(); 3],
                })
            },
            "oracle",
            &scenes,
            0.1,
        )
        .unwrap();
        assert_abs_diff_eq!(report.sampled.ade_min, 0.0);
        assert_abs_diff_eq!(report.sampled.ade_mean, 0.0);
        assert_abs_diff_eq!(report.sampled.fde_mean, 0.0);
        assert_abs_diff_eq!(report.mode_only.ade_mean, 0.0);
        assert!(report.is_internally_consistent());

        // overlap equals the ground truth's own overlap, K-fold
        let mut gt_events = 0u64;
        for scene in &scenes {
            let gt_preds = PredictionSet {
                samples: vec![scene.future()],
            };
            gt_events += overlap_stats(&gt_preds, 0.1).0;
        }
        assert_eq!(report.sampled.overlap_count, 3 * gt_events);
        assert_eq!(report.mode_only.overlap_count, gt_events);
    }

    #[test]
    fn constant_velocity_is_exact_on_interaction_free_scenes() {
        let scenes = synth_scenes(8, 6, 0.0);
        let report = evaluate_with(
            |_, scene| {
                let past = scene.past();
                let sample: Vec<[[f64; 2]; T_FUTURE]> = past
                    .iter()
                    .map(|p| {
                        let v = [
                            p[T_PAST - 1][0] - p[T_PAST - 2][0],
                            p[T_PAST - 1][1] - p[T_PAST - 2][1],
                        ];
                        let mut traj = [[0.0; 2]; T_FUTURE];
                        for (step, q) in traj.iter_mut().enumerate() {
                            q[0] = p[T_PAST - 1][0] + (step + 1) as f64 * v[0];
                            q[1] = p[T_PAST - 1][1] + (step + 1) as f64 * v[1];
                        }
                        traj
                    })
                    .collect();
                Ok(PredictionSet {
                    samples: vec![sample; 2],
                })
            },
            "cv",
            &scenes,
            0.1,
        )
        .unwrap();
        assert!(report.sampled.ade_mean < 1e-9, "{}", report.sampled.ade_mean);
        assert!(report.sampled.fde_mean < 1e-9, "{}", report.sampled.fde_mean);
    }

    #[test]
    fn model_evaluation_is_deterministic_and_consistent() {
        let state = crate::model::ModelState::<f64>::init(HyperParams::desk(), 5).unwrap();
        let scenes = synth_scenes(3, 12, 1.0);
        let a = evaluate(&state, "desk", &scenes, 4, 0.1, 99).unwrap();
        let b = evaluate(&state, "desk", &scenes, 4, 0.1, 99).unwrap();
        assert_eq!(a, b);
        assert!(a.is_internally_consistent());
        assert!(a.sampled.kde_nll.unwrap().is_finite());
        assert_eq!(a.sampled.k, 4);
        assert_eq!(a.mode_only.k, 1);
        assert_eq!(a.n_scenes, 3);

        let json = serde_json::to_string(&a).unwrap();
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(a, back);

        let row = a.csv_row();
        assert!(row.starts_with("desk,"));
        assert_eq!(row.split(',').count(), 8);
        assert_eq!(MetricReport::csv_header().split(',').count(), 8);
    }

    #[test]
    fn empty_dataset_is_refused() {
        let state = crate::model::ModelState::<f64>::init(HyperParams::desk(), 5).unwrap();
        assert!(matches!(
            evaluate(&state, "none", &[], 4, 0.1, 1),
            Err(MetricError::EmptyDataset)
        ));
    }
}
