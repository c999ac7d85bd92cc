//! Per-step summaries of a run and the scores computed from them.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{AssimError, Result};
use crate::prob::Gaussian;

/// Marginal mean, variance and central credible band of each coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalSummary {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

/// Summary of the one-step predictive sample for the next state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveSummary {
    pub mean: Vec<f64>,
    /// Average of `‖x̂ − mean‖²` over the samples.
    pub spread: f64,
    pub samples: usize,
    /// Samples dropped because propagation produced non-finite values.
    pub diverged: usize,
}

impl PredictiveSummary {
    /// Columns of `x` are predicted states.
    pub fn from_samples(x: &DMatrix<f64>, diverged: usize) -> Self {
        let s = x.ncols();
        let mean = shifted_mean(x);
        let spread = if s == 0 {
            0.0
        } else {
            x.column_iter().map(|c| (c - &mean).norm_squared()).sum::<f64>() / s as f64
        };
        Self {
            mean: mean.iter().cloned().collect(),
            spread,
            samples: s,
            diverged,
        }
    }

    /// Average of `‖x̂ − truth‖²` over the predictive sample.
    pub fn mean_squared_error(&self, truth: &[f64]) -> f64 {
        let bias: f64 = self.mean.iter().zip(truth).map(|(m, t)| (m - t).powi(2)).sum();
        bias + self.spread
    }
}

/// One step of a run: parameter and state marginals after assimilating
/// `y_step` (step 0 is the prior), and the prediction for `x_{step+1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub theta_mean: Vec<f64>,
    /// Row-major.
    pub theta_cov: Vec<Vec<f64>>,
    pub state: MarginalSummary,
    #[serde(default)]
    pub prediction: Option<PredictiveSummary>,
    #[serde(default)]
    pub diagnostics: serde_json::Value,
}

/// All step records of one realization with its reference trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RealizationResult {
    pub records: Vec<StepRecord>,
    /// `reference_states[k − 1]` is the true `x_k`.
    pub reference_states: Vec<Vec<f64>>,
    pub true_params: Option<Vec<f64>>,
}

impl RealizationResult {
    pub fn record(&self, step: usize) -> Option<&StepRecord> {
        self.records.iter().find(|r| r.step == step)
    }
}

pub fn z_for_level(level: f64) -> f64 {
    Normal::standard().inverse_cdf(0.5 + level / 2.0)
}

/// `mean ± z·σ` per coordinate.
pub fn credible_band_gaussian(g: &Gaussian, level: f64) -> (Vec<f64>, Vec<f64>) {
    let z = z_for_level(level);
    g.mean()
        .iter()
        .zip(g.variances().iter())
        .map(|(m, v)| (m - z * v.sqrt(), m + z * v.sqrt()))
        .unzip()
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Empirical central band; `samples` has one column per sample.
pub fn credible_band_samples(samples: &DMatrix<f64>, level: f64) -> (Vec<f64>, Vec<f64>) {
    let a = (1.0 - level) / 2.0;
    (0..samples.nrows())
        .map(|i| {
            let mut row: Vec<f64> = samples.row(i).iter().cloned().collect();
            row.sort_by(f64::total_cmp);
            (quantile_sorted(&row, a), quantile_sorted(&row, 1.0 - a))
        })
        .unzip()
}

/// Weighted quantile: smallest value whose cumulative weight reaches `p`.
pub fn weighted_quantile(values: &[f64], weights: &[f64], p: f64) -> f64 {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    for &i in &idx {
        acc += weights[i] / total;
        if acc >= p {
            return values[i];
        }
    }
    idx.last().map(|&i| values[i]).unwrap_or(f64::NAN)
}

impl MarginalSummary {
    pub fn from_gaussian(g: &Gaussian, level: f64) -> Self {
        let (lo, hi) = credible_band_gaussian(g, level);
        Self {
            mean: g.mean().iter().cloned().collect(),
            var: g.variances().iter().cloned().collect(),
            lo,
            hi,
        }
    }

    pub fn from_samples(samples: &DMatrix<f64>, level: f64) -> Self {
        let s = samples.ncols().max(2) as f64;
        let mean = shifted_mean(samples);
        let var = (0..samples.nrows())
            .map(|i| samples.row(i).iter().map(|v| (v - mean[i]).powi(2)).sum::<f64>() / (s - 1.0))
            .collect();
        let (lo, hi) = credible_band_samples(samples, level);
        Self {
            mean: mean.iter().cloned().collect(),
            var,
            lo,
            hi,
        }
    }

    /// Weighted sample with weights summing to one.
    pub fn from_weighted(samples: &DMatrix<f64>, weights: &[f64], level: f64) -> Self {
        let w = DVector::from_column_slice(weights);
        let mean = samples * &w;
        let a = (1.0 - level) / 2.0;
        let mut var = Vec::with_capacity(samples.nrows());
        let mut lo = Vec::with_capacity(samples.nrows());
        let mut hi = Vec::with_capacity(samples.nrows());
        for i in 0..samples.nrows() {
            let row: Vec<f64> = samples.row(i).iter().cloned().collect();
            var.push(row.iter().zip(weights).map(|(v, w)| w * (v - mean[i]).powi(2)).sum());
            lo.push(weighted_quantile(&row, weights, a));
            hi.push(weighted_quantile(&row, weights, 1.0 - a));
        }
        Self {
            mean: mean.iter().cloned().collect(),
            var,
            lo,
            hi,
        }
    }
}

/// Column mean computed relative to the first column, so identical columns
/// reproduce their value exactly.
fn shifted_mean(x: &DMatrix<f64>) -> DVector<f64> {
    if x.ncols() == 0 {
        return DVector::zeros(x.nrows());
    }
    let base = x.column(0).into_owned();
    let mut acc = DVector::zeros(x.nrows());
    for c in x.column_iter() {
        acc += c - &base;
    }
    base + acc / x.ncols() as f64
}

pub fn cov_rows(c: &DMatrix<f64>) -> Vec<Vec<f64>> {
    c.row_iter().map(|r| r.iter().cloned().collect()).collect()
}

fn rms(values: impl Iterator<Item = f64>) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        return Err(AssimError::InvalidArgument("no realizations to score".into()));
    }
    Ok((sum / n as f64).sqrt())
}

fn step_record(r: &RealizationResult, k: usize) -> Result<&StepRecord> {
    r.record(k)
        .ok_or_else(|| AssimError::InvalidArgument(format!("realization has no record for step {k}")))
}

/// Root mean square error of the posterior-mean estimate of `θ_i` at step
/// `k` across realizations.
pub fn rmse_theta(results: &[RealizationResult], true_theta: &[f64], i: usize, k: usize) -> Result<f64> {
    let t = *true_theta
        .get(i)
        .ok_or_else(|| AssimError::InvalidArgument(format!("no true value for θ component {i}")))?;
    rms(results
        .iter()
        .map(|r| step_record(r, k).map(|rec| (rec.theta_mean[i] - t).powi(2)))
        .collect::<Result<Vec<_>>>()?
        .into_iter())
}

/// Root mean square error of the posterior-mean estimate of `x_i` at step
/// `k ≥ 1` against each realization's reference.
pub fn rmse_state(results: &[RealizationResult], i: usize, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(AssimError::InvalidArgument("no reference state at step 0".into()));
    }
    rms(results
        .iter()
        .map(|r| {
            let rec = step_record(r, k)?;
            let truth = r
                .reference_states
                .get(k - 1)
                .ok_or_else(|| AssimError::InvalidArgument(format!("no reference state for step {k}")))?;
            Ok((rec.state.mean[i] - truth[i]).powi(2))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter())
}

/// Prediction RMSE at step `k ≥ 1`: the predictive sample stored at step
/// `k − 1` scored against the reference `x_k`.
pub fn rmse_pred(results: &[RealizationResult], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(AssimError::InvalidArgument("prediction starts at step 1".into()));
    }
    rms(results
        .iter()
        .map(|r| {
            let pred = step_record(r, k - 1)?
                .prediction
                .as_ref()
                .filter(|p| p.samples > 0)
                .ok_or_else(|| AssimError::InvalidArgument(format!("no predictive samples at step {}", k - 1)))?;
            let truth = r
                .reference_states
                .get(k - 1)
                .ok_or_else(|| AssimError::InvalidArgument(format!("no reference state for step {k}")))?;
            Ok(pred.mean_squared_error(truth))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter())
}

/// Fraction of reference state coordinates inside the stored credible bands
/// over `steps`.
pub fn band_coverage(result: &RealizationResult, steps: impl IntoIterator<Item = usize>) -> Result<f64> {
    let (mut inside, mut total) = (0usize, 0usize);
    for k in steps {
        let rec = step_record(result, k)?;
        let truth = result
            .reference_states
            .get(k.wrapping_sub(1))
            .ok_or_else(|| AssimError::InvalidArgument(format!("no reference state for step {k}")))?;
        for (i, t) in truth.iter().enumerate() {
            total += 1;
            if rec.state.lo[i] <= *t && *t <= rec.state.hi[i] {
                inside += 1;
            }
        }
    }
    if total == 0 {
        return Err(AssimError::InvalidArgument("no steps to score".into()));
    }
    Ok(inside as f64 / total as f64)
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    /// Component label, e.g. `theta1`, `x3` or `all`.
    pub component: String,
    pub step: usize,
    pub value: f64,
    pub n_realizations: usize,
}

/// Estimation and prediction RMSE rows for every step present in all
/// realizations.
pub fn metric_rows(results: &[RealizationResult], true_theta: Option<&[f64]>) -> Result<Vec<MetricRow>> {
    let Some(first) = results.first() else {
        return Ok(Vec::new());
    };
    let n_real = results.len();
    let last = results
        .iter()
        .map(|r| r.records.iter().map(|x| x.step).max().unwrap_or(0))
        .min()
        .unwrap_or(0);
    let d = first.records.first().map_or(0, |r| r.theta_mean.len());
    let n = first.reference_states.first().map_or(0, |x| x.len());
    let mut rows = Vec::new();
    let mut push = |metric: &str, component: String, step: usize, value: f64| {
        rows.push(MetricRow {
            metric: metric.into(),
            component,
            step,
            value,
            n_realizations: n_real,
        })
    };
    for k in 0..=last {
        if let Some(t) = true_theta {
            for i in 0..d.min(t.len()) {
                push("rmse_theta", format!("theta{}", i + 1), k, rmse_theta(results, t, i, k)?);
            }
        }
        if k == 0 {
            continue;
        }
        for i in 0..n {
            push("rmse_state", format!("x{}", i + 1), k, rmse_state(results, i, k)?);
        }
        if results
            .iter()
            .all(|r| r.record(k - 1).and_then(|x| x.prediction.as_ref()).is_some())
        {
            push("rmse_pred", "all".into(), k, rmse_pred(results, k)?);
        }
        let cov: f64 = results
            .iter()
            .map(|r| band_coverage(r, [k]))
            .collect::<Result<Vec<_>>>()?
            .iter()
            .sum::<f64>()
            / n_real as f64;
        push("coverage95", "all".into(), k, cov);
    }
    Ok(rows)
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "metric,component,step,value,n_realizations")?;
    for r in rows {
        writeln!(f, "{},{},{},{:.16e},{}", r.metric, r.component, r.step, r.value, r.n_realizations)?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prob::SeededRng;

    fn record(step: usize, theta: Vec<f64>, x: Vec<f64>) -> StepRecord {
        let d = theta.len();
        StepRecord {
            step,
            theta_mean: theta,
            theta_cov: vec![vec![0.0; d]; d],
            state: MarginalSummary {
                lo: x.iter().map(|v| v - 1.0).collect(),
                hi: x.iter().map(|v| v + 1.0).collect(),
                var: vec![0.0; x.len()],
                mean: x,
            },
            prediction: None,
            diagnostics: serde_json::Value::Null,
        }
    }

    fn realization(theta: Vec<f64>, x: Vec<f64>, truth: Vec<f64>) -> RealizationResult {
        RealizationResult {
            records: vec![record(0, theta.clone(), x.clone()), record(1, theta, x)],
            reference_states: vec![truth],
            true_params: None,
        }
    }

    #[test]
    fn perfect_estimates_score_zero() {
        let r = realization(vec![0.5, 0.1], vec![1.0, 2.0], vec![1.0, 2.0]);
        assert_eq!(rmse_theta(&[r.clone()], &[0.5, 0.1], 1, 1).unwrap(), 0.0);
        assert_eq!(rmse_state(&[r], 0, 1).unwrap(), 0.0);
    }

    #[test]
    fn single_offset() {
        let r = realization(vec![0.6], vec![1.0], vec![1.0]);
        assert!((rmse_theta(&[r], &[0.5], 0, 0).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn rmse_matches_loop_over_fifty_realizations() {
        let mut rng = SeededRng::new(1, 0);
        let mut results = Vec::new();
        let mut sum_t = 0.0;
        let mut sum_x = 0.0;
        for _ in 0..50 {
            let dt = 0.3 * rng.standard_normal();
            let dx = rng.standard_normal();
            sum_t += dt * dt;
            sum_x += dx * dx;
            results.push(realization(vec![1.0 + dt], vec![2.0 + dx], vec![2.0]));
        }
        assert!((rmse_theta(&results, &[1.0], 0, 1).unwrap() - (sum_t / 50.0).sqrt()).abs() < 1e-12);
        assert!((rmse_state(&results, 0, 1).unwrap() - (sum_x / 50.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn aggregation_is_permutation_invariant() {
        let mut rng = SeededRng::new(2, 0);
        let mut results: Vec<_> = (0..7)
            .map(|_| realization(vec![rng.standard_normal()], vec![rng.standard_normal()], vec![0.0]))
            .collect();
        let a = rmse_state(&results, 0, 1).unwrap();
        results.reverse();
        results.swap(1, 4);
        let b = rmse_state(&results, 0, 1).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    fn with_prediction(pred: DMatrix<f64>, truth: Vec<f64>) -> RealizationResult {
        let mut r = realization(vec![0.0], truth.clone(), truth);
        r.records[0].prediction = Some(PredictiveSummary::from_samples(&pred, 0));
        r
    }

    #[test]
    fn point_mass_predictions() {
        let truth = vec![1.0, -2.0, 0.5];
        let exact = DMatrix::from_fn(3, 10, |i, _| truth[i]);
        assert_eq!(rmse_pred(&[with_prediction(exact.clone(), truth.clone())], 1).unwrap(), 0.0);
        let mut off = exact;
        off.row_mut(1).add_scalar_mut(0.3);
        assert!((rmse_pred(&[with_prediction(off, truth)], 1).unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn gaussian_prediction_rmse() {
        let n = 4;
        let sigma = 0.7;
        let mut rng = SeededRng::new(3, 0);
        let s = 20_000;
        let samples = DMatrix::from_fn(n, s, |_, _| sigma * rng.standard_normal());
        // direct per-sample average and its standard error
        let per: Vec<f64> = samples.column_iter().map(|c| c.norm_squared()).collect();
        let m = per.iter().sum::<f64>() / s as f64;
        let se = (per.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (s as f64 - 1.0) / s as f64).sqrt();
        let v = rmse_pred(&[with_prediction(samples, vec![0.0; n])], 1).unwrap();
        assert!((v * v - m).abs() < 1e-9);
        assert!((v * v - n as f64 * sigma * sigma).abs() < 3.0 * se);
    }

    #[test]
    fn standard_normal_band() {
        let g = Gaussian::standard(1);
        let (lo, hi) = credible_band_gaussian(&g, 0.95);
        assert!((lo[0] + 1.959964).abs() < 1e-4 && (hi[0] - 1.959964).abs() < 1e-4);
        let mut rng = SeededRng::new(4, 0);
        let samples = DMatrix::from_fn(1, 100_000, |_, _| rng.standard_normal());
        let (lo, hi) = credible_band_samples(&samples, 0.95);
        assert!((lo[0] + 1.96).abs() < 0.02 && (hi[0] - 1.96).abs() < 0.02);
    }

    #[test]
    fn constant_samples_give_zero_width() {
        let samples = DMatrix::from_element(2, 50, 3.25);
        let (lo, hi) = credible_band_samples(&samples, 0.95);
        assert_eq!(lo, hi);
        assert_eq!(lo, vec![3.25, 3.25]);
    }

    #[test]
    fn gaussian_band_coverage_is_calibrated() {
        let mut rng = SeededRng::new(5, 0);
        let g = Gaussian::isotropic(DVector::from_element(1, 0.3), 2.0).unwrap();
        let (lo, hi) = credible_band_gaussian(&g, 0.95);
        let inside = (0..1000)
            .filter(|_| {
                let x = g.sample_one(&mut rng)[0];
                lo[0] <= x && x <= hi[0]
            })
            .count();
        assert!((930..=970).contains(&inside), "{inside}");
    }

    #[test]
    fn weighted_summary_matches_replicated_samples() {
        let samples = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 4.0]);
        let w = [0.25, 0.5, 0.25];
        let s = MarginalSummary::from_weighted(&samples, &w, 0.5);
        assert!((s.mean[0] - 2.25).abs() < 1e-15);
        assert!((s.var[0] - (0.25 * 1.5625 + 0.5 * 0.0625 + 0.25 * 3.0625)).abs() < 1e-15);
        assert_eq!((s.lo[0], s.hi[0]), (1.0, 2.0));
    }

    #[test]
    fn csv_has_header_and_rows() {
        let results = vec![realization(vec![0.6], vec![1.0], vec![1.1])];
        let rows = metric_rows(&results, Some(&[0.5])).unwrap();
        assert!(rows.iter().any(|r| r.metric == "rmse_state" && r.step == 1));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("metrics.csv");
        write_metrics_csv(&p, &rows).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert!(text.starts_with("metric,component,step,value,n_realizations\n"));
        assert_eq!(text.lines().count(), rows.len() + 1);
    }

    proptest::proptest! {
        #[test]
        fn rmse_is_nonnegative(offsets in proptest::collection::vec(-5.0f64..5.0, 1..20)) {
            let results: Vec<_> = offsets.iter().map(|o| realization(vec![*o], vec![*o], vec![0.0])).collect();
            let v = rmse_state(&results, 0, 1).unwrap();
            proptest::prop_assert!(v >= 0.0);
            let t = rmse_theta(&results, &[0.0], 0, 1).unwrap();
            proptest::prop_assert!((t - v).abs() < 1e-12);
        }
    }
}
