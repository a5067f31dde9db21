//! One function per subcommand. Every file written embeds the resolved
//! config, so any output can be fed back through `--config`.

use std::path::{Path, PathBuf};

use metafbp::episodes::{
    remap_scores, split_users, EpisodeStream, RatingDataset, ScoreMapping, Shots, Split,
};
use metafbp::eval::{meta_test, EvalReport, EvalSettings};
use metafbp::meta::{
    common_baseline, feature_table, finetune_predictor, inner_adapt, maml_baseline_train,
    meta_train, stage1_train, TrainingLog,
};
use metafbp::models::{Extractor, Method, ModelBundle};
use metafbp::synth::{generate, GroundTruth};
use serde::{Deserialize, Serialize};

use crate::config::{comment_block, RunConfig};
use crate::data::{
    features_text, ratings_text, read_dataset, FEATURES_FILE, RATINGS_FILE, TRUTH_FILE,
};
use crate::error::{CliError, CliResult};
use crate::gradcheck::{render, run_suite, Fault};
use crate::model_io::{self, ModelFile, Stored};

pub const EXTRACTOR_FILE: &str = "extractor.model";

/// A resolved config plus where outputs go.
pub struct Context {
    pub cfg: RunConfig,
    pub config_text: String,
    pub out: PathBuf,
}

impl Context {
    pub fn new(cfg: RunConfig, out: impl Into<PathBuf>) -> Self {
        Self {
            config_text: cfg.to_toml(),
            cfg,
            out: out.into(),
        }
    }

    fn write(&self, name: &str, contents: &str) -> CliResult<PathBuf> {
        std::fs::create_dir_all(&self.out).map_err(|e| CliError::io(&self.out, e))?;
        let path = self.out.join(name);
        std::fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    /// CSV text preceded by the embedded config.
    fn write_csv(&self, name: &str, body: &str) -> CliResult<PathBuf> {
        self.write(name, &format!("{}{body}", comment_block(&self.config_text)))
    }

    fn write_model(
        &self,
        name: &str,
        stored: Stored,
        train_shots: Option<Shots>,
    ) -> CliResult<PathBuf> {
        let file = ModelFile {
            stored,
            train_shots,
            config: self.config_text.clone(),
        };
        self.write(name, &model_io::encode(&file))
    }

    fn write_report(&self, stem: &str, report: &EvalReport) -> CliResult<Vec<PathBuf>> {
        let file = ReportFile {
            config: self.config_text.clone(),
            report: report.clone(),
        };
        let json =
            serde_json::to_string_pretty(&file).map_err(|e| CliError::Data(e.to_string()))? + "\n";
        Ok(vec![
            self.write(&format!("{stem}.json"), &json)?,
            self.write_csv(&format!("{stem}_tasks.csv"), &report.records_csv())?,
        ])
    }
}

/// Files written and a human-readable summary for stdout.
#[derive(Debug, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub summary: String,
}

/// JSON report layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub config: String,
    pub report: EvalReport,
}

#[derive(Serialize)]
struct TruthFile<'a> {
    config: &'a str,
    truth: &'a GroundTruth,
}

/// `SOURCE_DATE_EPOCH` when set; otherwise reports carry no timestamp so
/// reruns stay byte-identical.
fn timestamp() -> Option<String> {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .filter(|s| !s.is_empty())
}

// ---- data --------------------------------------------------------------------

pub fn gen_data(ctx: &Context) -> CliResult<Outcome> {
    let (ds, truth) = generate(&ctx.cfg.synth).map_err(|e| CliError::Config(e.to_string()))?;
    let truth_json = serde_json::to_string_pretty(&TruthFile {
        config: &ctx.config_text,
        truth: &truth,
    })
    .map_err(|e| CliError::Data(e.to_string()))?;
    let files = vec![
        ctx.write(FEATURES_FILE, &features_text(&ds, &ctx.config_text))?,
        ctx.write(RATINGS_FILE, &ratings_text(&ds, &ctx.config_text))?,
        ctx.write(TRUTH_FILE, &(truth_json + "\n"))?,
    ];
    Ok(Outcome {
        files,
        summary: format!(
            "{} users, {} images, {} ratings, mixing condition number {:.3}",
            ds.num_users(),
            ds.num_images(),
            ds.num_ratings(),
            truth.mixing_condition_number
        ),
    })
}

/// Dataset after remapping, exclusion of incomplete users, and splitting.
pub struct Prepared {
    pub split: Split,
    pub excluded: Vec<String>,
}

pub fn prepare(cfg: &RunConfig) -> CliResult<Prepared> {
    let raw = read_dataset(&cfg.data.dir, cfg.data.categories)?;
    prepare_dataset(raw, cfg)
}

pub fn prepare_dataset(raw: RatingDataset, cfg: &RunConfig) -> CliResult<Prepared> {
    let mapped = if cfg.data.remap.is_empty() {
        raw
    } else {
        remap_scores(&raw, &ScoreMapping::new(cfg.data.remap.clone())?)?
    };
    let (kept, excluded) = mapped.exclude_incomplete_users()?;
    let split = split_users(
        &kept,
        cfg.data.split,
        cfg.data.split_seed,
        cfg.data.disjoint_images,
    )?;
    Ok(Prepared { split, excluded })
}

fn load_extractor(ctx: &Context, path: Option<&Path>) -> CliResult<Extractor> {
    let path = path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ctx.out.join(EXTRACTOR_FILE));
    if !path.exists() {
        return Err(CliError::Data(format!(
            "no extractor at {}; run `metafbp stage1` first or pass --extractor",
            path.display()
        )));
    }
    Ok(model_io::read(&path)?.extractor().clone())
}

fn load_bundle(path: &Path) -> CliResult<(ModelBundle, Option<Shots>)> {
    let file = model_io::read(path)?;
    match file.stored {
        Stored::Bundle(b) => Ok((b, file.train_shots)),
        Stored::Extractor(_) => Err(CliError::Data(format!(
            "{} holds an extractor, not a trained model",
            path.display()
        ))),
    }
}

// ---- training ----------------------------------------------------------------

pub fn stage1(ctx: &Context) -> CliResult<Outcome> {
    let prep = prepare(&ctx.cfg)?;
    let train = &prep.split.train;
    let (extractor, log, summary) = if ctx.cfg.data.precomputed_features {
        let e = Extractor::pass_through(train.input_dim());
        (
            e,
            String::from("epoch,loss\n"),
            "pass-through extractor".to_string(),
        )
    } else {
        let outcome = stage1_train(train, &ctx.cfg.stage1)?;
        let mut log = String::from("epoch,loss\n");
        for (i, l) in outcome.epoch_losses.iter().enumerate() {
            log.push_str(&format!("{},{l:.17e}\n", i + 1));
        }
        let s = format!(
            "stage 1: {} epochs, final loss {:.4}, train accuracy {:.3}",
            outcome.epoch_losses.len(),
            outcome.epoch_losses.last().copied().unwrap_or(f64::NAN),
            outcome.train_accuracy
        );
        (outcome.extractor, log, s)
    };
    let mut audit = String::from("user\n");
    for u in &prep.excluded {
        audit.push_str(u);
        audit.push('\n');
    }
    let files = vec![
        ctx.write_model(EXTRACTOR_FILE, Stored::Extractor(extractor), None)?,
        ctx.write_csv("stage1_log.csv", &log)?,
        ctx.write_csv("excluded_users.csv", &audit)?,
    ];
    Ok(Outcome {
        files,
        summary: format!(
            "{summary}; {} users excluded; split {}/{}/{} users",
            prep.excluded.len(),
            prep.split.train.num_users(),
            prep.split.val.num_users(),
            prep.split.test.num_users()
        ),
    })
}

fn curve_csv(log: &TrainingLog) -> String {
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.17e}")).unwrap_or_default();
    let mut out = String::from("task,support_loss,query_loss,validation_pc\n");
    for p in &log.curve {
        out.push_str(&format!(
            "{},{:.17e},{},{}\n",
            p.task_index,
            p.support_loss,
            opt(p.query_loss),
            opt(p.validation_pc)
        ));
    }
    out
}

fn selection(log: &TrainingLog) -> String {
    match log.selected {
        Some((t, pc)) => format!("checkpoint after {t} tasks (validation PC {pc:.4})"),
        None => format!("final parameters after {} tasks", log.tasks),
    }
}

pub fn meta_train_cmd(ctx: &Context, extractor: Option<&Path>) -> CliResult<Outcome> {
    let extractor = load_extractor(ctx, extractor)?;
    let prep = prepare(&ctx.cfg)?;
    let trained = meta_train(
        &prep.split.train,
        Some(&prep.split.val),
        &extractor,
        &ctx.cfg.meta,
    )?;
    let files = vec![
        ctx.write_model(
            "metafbp.model",
            Stored::Bundle(trained.bundle),
            Some(ctx.cfg.meta.shots),
        )?,
        ctx.write_csv("metafbp_curve.csv", &curve_csv(&trained.log))?,
    ];
    Ok(Outcome {
        files,
        summary: format!("meta-trained: {}", selection(&trained.log)),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum BaselineKind {
    Maml,
    Common,
}

pub fn baseline(ctx: &Context, kind: BaselineKind, extractor: Option<&Path>) -> CliResult<Outcome> {
    let extractor = load_extractor(ctx, extractor)?;
    let prep = prepare(&ctx.cfg)?;
    match kind {
        BaselineKind::Maml => {
            let trained = maml_baseline_train(
                &prep.split.train,
                Some(&prep.split.val),
                &extractor,
                &ctx.cfg.meta,
            )?;
            let files = vec![
                ctx.write_model(
                    "maml.model",
                    Stored::Bundle(trained.bundle),
                    Some(ctx.cfg.meta.shots),
                )?,
                ctx.write_csv("maml_curve.csv", &curve_csv(&trained.log))?,
            ];
            Ok(Outcome {
                files,
                summary: format!("MAML baseline: {}", selection(&trained.log)),
            })
        }
        BaselineKind::Common => {
            let bundle = common_baseline(&prep.split.train, &extractor, &ctx.cfg.common)?;
            let files = vec![ctx.write_model("common.model", Stored::Bundle(bundle), None)?];
            Ok(Outcome {
                files,
                summary: "common baseline fit to mode labels".into(),
            })
        }
    }
}

// ---- evaluation ----------------------------------------------------------------

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Metafbp => "metafbp",
        Method::Maml => "maml",
        Method::Common => "common",
    }
}

fn evaluate(
    bundle: &ModelBundle,
    train_shots: Option<Shots>,
    test: &RatingDataset,
    settings: &EvalSettings,
) -> CliResult<EvalReport> {
    let mut report = meta_test(bundle, test, settings)?;
    report.train_shots = train_shots;
    report.timestamp = timestamp();
    Ok(report)
}

fn describe(report: &EvalReport) -> String {
    let s = &report.summary;
    format!(
        "PC {:.4} +- {:.4}, MAE {:.4}, RMSE {:.4} over {} tasks ({} skipped)",
        s.pc.mean,
        s.pc.std,
        s.mae.mean,
        s.rmse.mean,
        s.evaluated,
        report.skipped_tasks.len()
    )
}

pub fn eval_cmd(ctx: &Context, model: &Path) -> CliResult<Outcome> {
    let (bundle, shots) = load_bundle(model)?;
    let prep = prepare(&ctx.cfg)?;
    let report = evaluate(&bundle, shots, &prep.split.test, &ctx.cfg.eval)?;
    let files = ctx.write_report(&format!("eval_{}", method_name(bundle.method)), &report)?;
    Ok(Outcome {
        files,
        summary: format!("{}: {}", method_name(bundle.method), describe(&report)),
    })
}

pub fn cross_shot(ctx: &Context, model: &Path) -> CliResult<Outcome> {
    let (bundle, shots) = load_bundle(model)?;
    let prep = prepare(&ctx.cfg)?;
    let mut files = Vec::new();
    let mut table = String::from("support,pc_mean,pc_std,mae_mean,rmse_mean,evaluated\n");
    let mut summary = Vec::new();
    for &support in &ctx.cfg.ablation.cross_shots {
        let settings = EvalSettings {
            shots: Shots {
                support,
                ..ctx.cfg.eval.shots
            },
            ..ctx.cfg.eval.clone()
        };
        let report = evaluate(&bundle, shots, &prep.split.test, &settings)?;
        files.extend(ctx.write_report(&format!("cross_shot_{support}"), &report)?);
        let s = &report.summary;
        table.push_str(&format!(
            "{support},{:.17e},{:.17e},{:.17e},{:.17e},{}\n",
            s.pc.mean, s.pc.std, s.mae.mean, s.rmse.mean, s.evaluated
        ));
        summary.push(format!("{support}-shot: {}", describe(&report)));
    }
    files.push(ctx.write_csv("cross_shot.csv", &table)?);
    Ok(Outcome {
        files,
        summary: summary.join("\n"),
    })
}

pub fn ablate_lambda(ctx: &Context, extractor: Option<&Path>) -> CliResult<Outcome> {
    let extractor = load_extractor(ctx, extractor)?;
    let prep = prepare(&ctx.cfg)?;
    let mut table =
        String::from("lambda,pc_mean,pc_std,mae_mean,rmse_mean,selected_after,validation_pc\n");
    let mut summary = Vec::new();
    for &lambda in &ctx.cfg.ablation.lambdas {
        let mut meta = ctx.cfg.meta.clone();
        meta.high_order.lambda = lambda;
        let trained = meta_train(&prep.split.train, Some(&prep.split.val), &extractor, &meta)?;
        let report = evaluate(
            &trained.bundle,
            Some(meta.shots),
            &prep.split.test,
            &ctx.cfg.eval,
        )?;
        let s = &report.summary;
        let (after, vpc) = match trained.log.selected {
            Some((t, pc)) => (t.to_string(), format!("{pc:.17e}")),
            None => (trained.log.tasks.to_string(), String::new()),
        };
        table.push_str(&format!(
            "{lambda:e},{:.17e},{:.17e},{:.17e},{:.17e},{after},{vpc}\n",
            s.pc.mean, s.pc.std, s.mae.mean, s.rmse.mean
        ));
        summary.push(format!("lambda {lambda:e}: {}", describe(&report)));
    }
    Ok(Outcome {
        files: vec![ctx.write_csv("ablate_lambda.csv", &table)?],
        summary: summary.join("\n"),
    })
}

/// Mean support loss after `0..=k_max` inner steps over the test tasks.
pub fn support_loss_curve(
    bundle: &ModelBundle,
    test: &RatingDataset,
    settings: &EvalSettings,
    k_max: usize,
) -> CliResult<Vec<f64>> {
    let feats = feature_table(&bundle.extractor, test)?;
    let stream = EpisodeStream::new(test, settings.shots, settings.seed)?;
    let mut sums = vec![0.0; k_max + 1];
    for i in 0..settings.num_tasks {
        let task = stream.task(i)?;
        let (xs, ys) = task.support_batch(&feats)?;
        let losses = match (&bundle.method, &bundle.generator) {
            (Method::Metafbp, Some(g)) => {
                inner_adapt(
                    &bundle.predictor,
                    g,
                    &xs,
                    &ys,
                    &bundle.high_order,
                    settings.alpha,
                    k_max,
                )?
                .support_losses
            }
            (Method::Common, _) if !settings.common_finetune => {
                vec![
                    finetune_predictor(&bundle.predictor, &xs, &ys, settings.alpha, 0)?.1[0];
                    k_max + 1
                ]
            }
            _ => finetune_predictor(&bundle.predictor, &xs, &ys, settings.alpha, k_max)?.1,
        };
        for (s, l) in sums.iter_mut().zip(losses) {
            *s += l;
        }
    }
    Ok(sums
        .into_iter()
        .map(|s| s / settings.num_tasks as f64)
        .collect())
}

pub fn ablate_k(ctx: &Context, model: &Path) -> CliResult<Outcome> {
    let (bundle, shots) = load_bundle(model)?;
    let prep = prepare(&ctx.cfg)?;
    let k_max = ctx.cfg.ablation.k_max;
    let support = support_loss_curve(&bundle, &prep.split.test, &ctx.cfg.eval, k_max)?;
    let mut table = String::from("k,pc_mean,pc_std,mae_mean,rmse_mean,support_loss\n");
    for (k, sl) in support.iter().enumerate() {
        let settings = EvalSettings {
            k,
            ..ctx.cfg.eval.clone()
        };
        let s = evaluate(&bundle, shots, &prep.split.test, &settings)?.summary;
        table.push_str(&format!(
            "{k},{:.17e},{:.17e},{:.17e},{:.17e},{sl:.17e}\n",
            s.pc.mean, s.pc.std, s.mae.mean, s.rmse.mean
        ));
    }
    Ok(Outcome {
        files: vec![ctx.write_csv("ablate_k.csv", &table)?],
        summary: format!(
            "k curve over 0..={k_max} for {}",
            method_name(bundle.method)
        ),
    })
}

// ---- diagnostics -----------------------------------------------------------------

pub fn gradcheck(fault: Fault) -> CliResult<Outcome> {
    let checks = run_suite(0, fault)?;
    let table = render(&checks);
    let failed: Vec<&str> = checks
        .iter()
        .filter(|c| !c.passed())
        .map(|c| c.name.as_str())
        .collect();
    if !failed.is_empty() {
        return Err(CliError::Oracle(format!(
            "{table}gradient checks failed: {}",
            failed.join(", ")
        )));
    }
    let worst = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(Outcome {
        files: vec![],
        summary: format!(
            "{table}all {} checks passed (max relative error {worst:.3e})",
            checks.len()
        ),
    })
}
