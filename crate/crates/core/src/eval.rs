//! Evaluation metrics and the meta-test protocol.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::episodes::{EpisodeStream, MetaTask, RatingDataset, Shots};
use crate::error::{Error, Result};
use crate::meta::{feature_table, finetune_predictor, inner_adapt};
use crate::models::{effective_predictor, predict, Conditioning, Method, ModelBundle};
use crate::numerics::Tensor;

/// Pearson correlation with a flag for the zero-variance case.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub value: f64,
    /// Either side had zero variance; `value` is then 0.
    pub degenerate: bool,
}

fn check_pair(pred: &[f64], target: &[f64], min: usize) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::shape("metric", &[pred.len()], &[target.len()]));
    }
    if pred.len() < min {
        return Err(Error::Validation(format!(
            "metric needs at least {min} values, got {}",
            pred.len()
        )));
    }
    Ok(())
}

/// Sample Pearson correlation.
pub fn pearson(pred: &[f64], target: &[f64]) -> Result<Correlation> {
    check_pair(pred, target, 2)?;
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mt = target.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(target) {
        let (dp, dt) = (p - mp, t - mt);
        sxy += dp * dt;
        sxx += dp * dp;
        syy += dt * dt;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Correlation {
            value: 0.0,
            degenerate: true,
        });
    }
    let value = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    Ok(Correlation {
        value,
        degenerate: false,
    })
}

pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target, 1)?;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target, 1)?;
    Ok((pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / pred.len() as f64)
        .sqrt())
}

/// Meta-test protocol settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub num_tasks: usize,
    pub shots: Shots,
    /// Inner step size used for adaptation.
    pub alpha: f64,
    /// Inner steps used for adaptation.
    pub k: usize,
    pub seed: u64,
    /// Threads evaluating episodes; results are merged by task index.
    pub workers: usize,
    /// Fine-tune the common baseline on each support set (otherwise zero-shot).
    pub common_finetune: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            num_tasks: 400,
            shots: Shots {
                support: 5,
                query: 15,
            },
            alpha: 0.01,
            k: 10,
            seed: 1,
            workers: 1,
            common_finetune: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task: usize,
    pub user: String,
    pub pc: f64,
    pub pc_degenerate: bool,
    pub mae: f64,
    pub rmse: f64,
    pub k: usize,
    pub num_query: usize,
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                mean: 0.0,
                std: 0.0,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub pc: Stat,
    pub mae: Stat,
    pub rmse: Stat,
    pub evaluated: usize,
    /// Evaluated tasks whose PC was degenerate (counted as 0 in the mean).
    pub degenerate: usize,
}

impl Summary {
    pub fn from_records(records: &[TaskRecord]) -> Self {
        let col = |f: fn(&TaskRecord) -> f64| records.iter().map(f).collect::<Vec<_>>();
        Self {
            pc: Stat::of(&col(|r| r.pc)),
            mae: Stat::of(&col(|r| r.mae)),
            rmse: Stat::of(&col(|r| r.rmse)),
            evaluated: records.len(),
            degenerate: records.iter().filter(|r| r.pc_degenerate).count(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub model_hash: String,
    pub settings: EvalSettings,
    /// Shots the model was trained with, when known.
    pub train_shots: Option<Shots>,
    pub records: Vec<TaskRecord>,
    /// Tasks without enough query items to score.
    pub skipped_tasks: Vec<usize>,
    pub summary: Summary,
    /// PC over all query predictions pooled across tasks.
    pub pooled_pc: Correlation,
    pub timestamp: Option<String>,
}

impl EvalReport {
    /// Per-task records as CSV text.
    pub fn records_csv(&self) -> String {
        let mut out = String::from("task,user,pc,pc_degenerate,mae,rmse,k,num_query\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{:.17e},{},{:.17e},{:.17e},{},{}\n",
                r.task, r.user, r.pc, r.pc_degenerate, r.mae, r.rmse, r.k, r.num_query
            ));
        }
        out
    }
}

/// Adapts `bundle` on the task's support set and predicts its query set.
///
/// Returns `None` when the query set has fewer than two items.
pub fn predict_task(
    bundle: &ModelBundle,
    task: &MetaTask,
    feats: &Tensor,
    settings: &EvalSettings,
) -> Result<Option<Vec<f64>>> {
    if task.query.len() < 2 {
        return Ok(None);
    }
    let (xs, ys) = task.support_batch(feats)?;
    let (xq, _) = task.query_batch(feats)?;
    let (alpha, k) = (settings.alpha, settings.k);
    let preds = match bundle.method {
        Method::Metafbp => {
            let generator = bundle
                .generator
                .as_ref()
                .ok_or_else(|| Error::Validation("meta-learned bundle has no generator".into()))?;
            let adapted = inner_adapt(
                &bundle.predictor,
                generator,
                &xs,
                &ys,
                &bundle.high_order,
                alpha,
                k,
            )?;
            let cond = match bundle.high_order.conditioning {
                Conditioning::BatchPooled => &xq,
                Conditioning::SupportPooled => &xs,
            };
            let eff = effective_predictor(
                &bundle.predictor,
                &adapted.theta_g_prime,
                cond,
                &bundle.high_order,
            )?;
            predict(&eff, &xq)?
        }
        Method::Maml => predict(
            &finetune_predictor(&bundle.predictor, &xs, &ys, alpha, k)?.0,
            &xq,
        )?,
        Method::Common => {
            let steps = if settings.common_finetune { k } else { 0 };
            predict(
                &finetune_predictor(&bundle.predictor, &xs, &ys, alpha, steps)?.0,
                &xq,
            )?
        }
    };
    Ok(Some(preds.into_data()))
}

/// Episodic evaluation: `num_tasks` tasks from the dataset's users, each
/// adapted on its support set and scored on its query set.
pub fn meta_test(
    bundle: &ModelBundle,
    dataset: &RatingDataset,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    if settings.num_tasks == 0 {
        return Err(Error::Validation(
            "eval.num_tasks must be at least 1".into(),
        ));
    }
    let feats = feature_table(&bundle.extractor, dataset)?;
    let stream = EpisodeStream::new(dataset, settings.shots, settings.seed)?;
    let run = |i: usize| -> Result<Option<(TaskRecord, Vec<f64>, Vec<f64>)>> {
        let task = stream.task(i)?;
        let Some(pred) = predict_task(bundle, &task, &feats, settings).map_err(|e| e.at_task(i))?
        else {
            return Ok(None);
        };
        let target: Vec<f64> = task.query.iter().map(|q| q.score as f64).collect();
        let pc = pearson(&pred, &target)?;
        let record = TaskRecord {
            task: i,
            user: dataset.user_ids()[task.user].clone(),
            pc: pc.value,
            pc_degenerate: pc.degenerate,
            mae: mae(&pred, &target)?,
            rmse: rmse(&pred, &target)?,
            k: settings.k,
            num_query: target.len(),
        };
        Ok(Some((record, pred, target)))
    };
    let results: Vec<Result<Option<(TaskRecord, Vec<f64>, Vec<f64>)>>> = if settings.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(settings.workers)
            .build()
            .map_err(|e| {
                Error::Validation(format!("cannot start {} workers: {e}", settings.workers))
            })?;
        pool.install(|| (0..settings.num_tasks).into_par_iter().map(run).collect())
    } else {
        (0..settings.num_tasks).map(run).collect()
    };
    let mut records = Vec::new();
    let mut skipped_tasks = Vec::new();
    let (mut all_pred, mut all_target) = (Vec::new(), Vec::new());
    for (i, r) in results.into_iter().enumerate() {
        match r? {
            Some((rec, p, t)) => {
                records.push(rec);
                all_pred.extend(p);
                all_target.extend(t);
            }
            None => skipped_tasks.push(i),
        }
    }
    let pooled_pc = if all_pred.len() >= 2 {
        pearson(&all_pred, &all_target)?
    } else {
        Correlation {
            value: 0.0,
            degenerate: true,
        }
    };
    Ok(EvalReport {
        method: bundle.method,
        model_hash: bundle.content_hash(),
        settings: settings.clone(),
        train_shots: None,
        summary: Summary::from_records(&records),
        records,
        skipped_tasks,
        pooled_pc,
        timestamp: None,
    })
}
