//! Counting metrics, exemplar-scale strata, evaluation runs and throughput.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::geometry::ExemplarSet;
use crate::model::TasselModel;
use crate::raster::Raster;

pub const MPE_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub m: usize,
    pub mae: f64,
    pub rmse: f64,
    /// Absent when the ground-truth total is zero.
    pub wca: Option<f64>,
    /// Absent when all ground truths are equal.
    pub r2: Option<f64>,
    /// Signed mean percentage error.
    pub mpe: f64,
    pub abs_mpe: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_category: Option<BTreeMap<String, MetricsReport>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stratum: Option<String>,
}

pub fn compute_metrics(preds: &[f64], gts: &[f64], eps: f64) -> Result<MetricsReport> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "need equal non-zero lengths, got {} predictions and {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    if preds.iter().chain(gts).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("metric inputs".into()));
    }
    let m = preds.len() as f64;
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut pct_sum = 0.0;
    for (&p, &c) in preds.iter().zip(gts) {
        abs_sum += (p - c).abs();
        sq_sum += (p - c) * (p - c);
        pct_sum += (p - c) / (c + eps);
    }
    let gt_sum: f64 = gts.iter().sum();
    let mean = gt_sum / m;
    let var_sum: f64 = gts.iter().map(|c| (c - mean) * (c - mean)).sum();
    let mpe = pct_sum / m;
    Ok(MetricsReport {
        m: preds.len(),
        mae: abs_sum / m,
        rmse: (sq_sum / m).sqrt(),
        wca: (gt_sum != 0.0).then(|| 1.0 - abs_sum / gt_sum),
        r2: (var_sum != 0.0).then(|| 1.0 - sq_sum / var_sum),
        mpe,
        abs_mpe: mpe.abs(),
        per_category: None,
        stratum: None,
    })
}

/// Per-image result of an evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub category: String,
    pub gt: f64,
    pub pred: f64,
    pub scale_prior: f64,
}

/// Aggregate report with a per-category breakdown.
pub fn report(records: &[EvalRecord]) -> Result<MetricsReport> {
    let preds: Vec<f64> = records.iter().map(|r| r.pred).collect();
    let gts: Vec<f64> = records.iter().map(|r| r.gt).collect();
    let mut rep = compute_metrics(&preds, &gts, MPE_EPS)?;
    let mut cats: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in records {
        let e = cats.entry(r.category.clone()).or_default();
        e.0.push(r.pred);
        e.1.push(r.gt);
    }
    let mut per = BTreeMap::new();
    for (cat, (p, g)) in cats {
        per.insert(cat, compute_metrics(&p, &g, MPE_EPS)?);
    }
    rep.per_category = Some(per);
    Ok(rep)
}

/// Metrics and prediction/ground-truth ratios of one exemplar-scale stratum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub report: MetricsReport,
    /// `pred / gt` per sample with a non-zero ground truth.
    pub ratios: Vec<f64>,
}

/// Splits records into `s < small_max` and `s > large_min`; empty strata are `None`.
pub fn stratify_by_exemplar_scale(
    records: &[EvalRecord],
    small_max: f64,
    large_min: f64,
) -> Result<(Option<Stratum>, Option<Stratum>)> {
    let build = |label: &str, keep: &dyn Fn(f64) -> bool| -> Result<Option<Stratum>> {
        let sel: Vec<&EvalRecord> = records.iter().filter(|r| keep(r.scale_prior)).collect();
        if sel.is_empty() {
            return Ok(None);
        }
        let preds: Vec<f64> = sel.iter().map(|r| r.pred).collect();
        let gts: Vec<f64> = sel.iter().map(|r| r.gt).collect();
        let mut report = compute_metrics(&preds, &gts, MPE_EPS)?;
        report.stratum = Some(label.to_owned());
        let ratios = sel.iter().filter(|r| r.gt != 0.0).map(|r| r.pred / r.gt).collect();
        Ok(Some(Stratum { report, ratios }))
    };
    Ok((
        build("small-exemplar", &|s| s < small_max)?,
        build("large-exemplar", &|s| s > large_min)?,
    ))
}

/// Anything that maps an image and its exemplars to a count.
pub trait CountPredictor {
    fn predict_count(&self, sample: &Sample, exemplars: &ExemplarSet) -> Result<f64>;
}

impl CountPredictor for TasselModel {
    fn predict_count(&self, sample: &Sample, exemplars: &ExemplarSet) -> Result<f64> {
        Ok(self.predict(&sample.raster, exemplars)?.count)
    }
}

/// Returns the annotated count; exercises evaluation plumbing.
pub struct OracleCounter;

impl CountPredictor for OracleCounter {
    fn predict_count(&self, sample: &Sample, _: &ExemplarSet) -> Result<f64> {
        Ok(sample.ann.count() as f64)
    }
}

/// Which exemplars each image is evaluated with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shots {
    /// All annotated exemplars (up to three).
    All,
    /// Only exemplar `i`; images with fewer exemplars use their last one.
    One(usize),
}

pub fn evaluate<P: CountPredictor + ?Sized>(
    predictor: &P,
    samples: &[Sample],
    exemplars: &[ExemplarSet],
    shots: Shots,
) -> Result<Vec<EvalRecord>> {
    if samples.len() != exemplars.len() {
        return Err(Error::InvalidArgument("one exemplar set per sample is required".into()));
    }
    samples
        .iter()
        .zip(exemplars)
        .map(|(s, ex)| {
            let ex = match shots {
                Shots::All => ex.clone(),
                Shots::One(i) => ex.single(i.min(ex.len() - 1))?,
            };
            Ok(EvalRecord {
                id: s.ann.id.clone(),
                category: s.ann.category.clone(),
                gt: s.ann.count() as f64,
                pred: predictor.predict_count(s, &ex)?,
                scale_prior: ex.scale_prior,
            })
        })
        .collect()
}

/// Mean and sample standard deviation of one metric over one-shot runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneShotSummary {
    pub runs: Vec<MetricsReport>,
    pub mae: MeanStd,
    pub rmse: MeanStd,
}

/// Evaluates once per exemplar index and aggregates MAE and RMSE.
pub fn evaluate_one_shot<P: CountPredictor + ?Sized>(
    predictor: &P,
    samples: &[Sample],
    exemplars: &[ExemplarSet],
) -> Result<OneShotSummary> {
    let max = exemplars.iter().map(ExemplarSet::len).max().unwrap_or(0);
    let runs = (0..max)
        .map(|i| report(&evaluate(predictor, samples, exemplars, Shots::One(i))?))
        .collect::<Result<Vec<_>>>()?;
    let mae: Vec<f64> = runs.iter().map(|r| r.mae).collect();
    let rmse: Vec<f64> = runs.iter().map(|r| r.rmse).collect();
    Ok(OneShotSummary {
        mae: mean_std(&mae),
        rmse: mean_std(&rmse),
        runs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub width: usize,
    pub height: usize,
    pub iters: usize,
    pub median_ms: f64,
    pub fps: f64,
    pub samples_ms: Vec<f64>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median single-image inference time on a synthetic input of the given size.
pub fn throughput(model: &TasselModel, width: usize, height: usize, warmup: usize, iters: usize) -> Result<Throughput> {
    if iters < 10 {
        return Err(Error::InvalidArgument(format!("throughput needs at least 10 iterations, got {iters}")));
    }
    let cfg = model.config();
    let image = Raster::filled(width, height, [0.4, 0.35, 0.3]);
    let side = (cfg.exemplar_size as f64).min(width as f64 / 2.0).min(height as f64 / 2.0);
    let boxes = [crate::geometry::ExemplarBox::new(0.0, 0.0, side, side)?];
    let ex = ExemplarSet::build(&image, &boxes, cfg.exemplar_size)?;
    for _ in 0..warmup {
        model.predict(&image, &ex)?;
    }
    let mut samples_ms = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        model.predict(&image, &ex)?;
        samples_ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let median_ms = median(&samples_ms);
    Ok(Throughput {
        width,
        height,
        iters,
        median_ms,
        fps: 1000.0 / median_ms,
        samples_ms,
    })
}
