//! Stage-1 extractor training, learning-to-learn of the high-order
//! predictor, and the MAML / common-model baselines.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::episodes::{EpisodeStream, MetaTask, RatingDataset, Shots};
use crate::error::{Error, Result};
use crate::eval::{meta_test, EvalSettings};
use crate::models::{
    effective_predictor_graph, predict_graph, Extractor, ExtractorParams, ExtractorSpec,
    GeneratorParams, HighOrderConfig, Method, ModelBundle, PredictorParams, PREDICTOR_BIAS,
    PREDICTOR_WEIGHT,
};
use crate::numerics::{
    sgd_step, unroll_sgd, GradMode, Graph, InnerSteps, ParamVars, ParamVector, Tensor, Var,
};

/// Stream id for parameter initialization; episode streams use the task index.
const INIT_STREAM: u64 = u64::MAX;
const SHUFFLE_STREAM: u64 = u64::MAX - 1;

// ---- configuration ----------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub feature_dim: usize,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// The learning rate is multiplied by `decay_factor` every `decay_every` epochs.
    pub decay_every: usize,
    pub decay_factor: f64,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            hidden: vec![32, 32],
            epochs: 100,
            lr: 0.05,
            batch_size: 64,
            decay_every: 20,
            decay_factor: 0.5,
            seed: 0,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Validation(
                "stage1: layer widths must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Validation(format!(
                "stage1.lr must be > 0, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 || self.decay_every == 0 {
            return Err(Error::Validation(
                "stage1: batch_size and decay_every must be positive".into(),
            ));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Validation(
                "stage1.decay_factor must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Inner step size.
    pub alpha: f64,
    /// Outer step size.
    pub beta: f64,
    pub k_steps: usize,
    /// Number of meta-training tasks.
    pub iterations: usize,
    pub high_order: HighOrderConfig,
    pub grad_mode: GradMode,
    pub generator_hidden: usize,
    pub shots: Shots,
    pub seed: u64,
    /// Validate every this many tasks; 0 disables validation.
    pub validation_every: usize,
    pub validation_tasks: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 0.001,
            k_steps: 10,
            iterations: 40_000,
            high_order: HighOrderConfig::default(),
            grad_mode: GradMode::Exact,
            generator_hidden: 32,
            shots: Shots {
                support: 5,
                query: 15,
            },
            seed: 0,
            validation_every: 1000,
            validation_tasks: 100,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Validation(format!(
                "meta.alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::Validation(format!(
                "meta.beta must be > 0, got {}",
                self.beta
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Validation(
                "meta.iterations must be at least 1".into(),
            ));
        }
        if self.generator_hidden == 0 {
            return Err(Error::Validation(
                "meta.generator_hidden must be positive".into(),
            ));
        }
        if self.shots.support == 0 {
            return Err(Error::Validation(
                "meta.shots.support must be at least 1".into(),
            ));
        }
        self.high_order.validate()
    }

    pub fn step(&self) -> MetaStep {
        MetaStep {
            alpha: self.alpha,
            beta: self.beta,
            k: self.k_steps,
            mode: self.grad_mode,
            high_order: self.high_order,
        }
    }

    fn inner(&self) -> InnerSteps {
        self.step().inner()
    }
}

/// Hyper-parameters of a single inner/outer cycle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetaStep {
    pub alpha: f64,
    pub beta: f64,
    pub k: usize,
    pub mode: GradMode,
    pub high_order: HighOrderConfig,
}

impl MetaStep {
    fn inner(&self) -> InnerSteps {
        InnerSteps {
            alpha: self.alpha,
            steps: self.k,
            mode: self.mode,
        }
    }
}

// ---- stage 1 ---------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Stage1Outcome {
    pub extractor: Extractor,
    /// Mean cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
    /// Mode-label accuracy of the trained classifier on the training images.
    pub train_accuracy: f64,
}

fn rows_of(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let d = x.cols();
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(x.row(i));
    }
    Tensor::new(vec![idx.len(), d], data)
}

fn accuracy(
    params: &ExtractorParams,
    all: &ParamVector,
    x: &Tensor,
    labels: &[usize],
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = g.bind_constant(all);
    let xv = g.constant(x.clone());
    let logits = params.logits_graph(&mut g, &vars, xv)?;
    let logits = g.value(logits);
    let hits = (0..logits.rows())
        .filter(|&i| {
            let row = logits.row(i);
            // First maximum wins, matching the smallest-label tie-break.
            let best = (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            best + 1 == labels[i]
        })
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Trains the extractor to classify mode labels with minibatch SGD and a
/// step-decayed learning rate, then drops the classification head.
pub fn stage1_train(dataset: &RatingDataset, cfg: &Stage1Config) -> Result<Stage1Outcome> {
    cfg.validate()?;
    let labels: Vec<usize> = dataset
        .mode_labels()?
        .into_iter()
        .map(usize::from)
        .collect();
    let spec = ExtractorSpec {
        input_dim: dataset.input_dim(),
        feature_dim: cfg.feature_dim,
        hidden: cfg.hidden.clone(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(INIT_STREAM);
    let mut params = ExtractorParams::init(spec, dataset.categories() as usize, &mut rng)?;
    let mut all = params.all()?;
    let x = dataset.features();
    let mut order: Vec<usize> = (0..dataset.num_images()).collect();
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle.set_stream(SHUFFLE_STREAM);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let lr = cfg.lr_at(epoch);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let xb = rows_of(x, batch)?;
            let yb: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let vars = g.bind(&all);
            let xv = g.constant(xb);
            let logits = params.logits_graph(&mut g, &vars, xv)?;
            let loss = g.cross_entropy(logits, &yb)?;
            total += g.value(loss).item() * batch.len() as f64;
            let grads = g.grad(loss, &vars)?;
            all = sgd_step(&all, &grads, lr)?;
        }
        let mean = total / order.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite(format!("stage-1 loss at epoch {epoch}")));
        }
        epoch_losses.push(mean);
    }
    let train_accuracy = accuracy(&params, &all, x, &labels)?;
    params.body = all.subset("extractor.");
    params.head = all.subset("head.");
    Ok(Stage1Outcome {
        extractor: params.freeze(),
        epoch_losses,
        train_accuracy,
    })
}

// ---- high-order predictor: inner and outer loops ----------------------------

/// Where an adapted generator came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub task_id: Option<usize>,
    pub k: usize,
    pub support_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedState {
    pub theta_g_prime: GeneratorParams,
    /// Support loss before each inner step and after the last one (`k + 1` values).
    pub support_losses: Vec<f64>,
    pub provenance: Provenance,
}

fn batch_hash(x: &Tensor, y: &Tensor) -> String {
    let mut h = Sha256::new();
    for v in x.data().iter().chain(y.data()) {
        h.update(v.to_bits().to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

fn check_batch(x: &Tensor, y: &Tensor, what: &str) -> Result<()> {
    if x.shape().len() != 2 || x.rows() == 0 {
        return Err(Error::Validation(format!("{what} set is empty")));
    }
    if y.shape() != [x.rows()] {
        return Err(Error::shape("batch", x.shape(), y.shape()));
    }
    Ok(())
}

/// Support MSE of the high-order predictor with `predictor` held fixed.
fn support_loss_graph(
    g: &mut Graph,
    predictor: &ParamVars,
    generator: &ParamVars,
    xs: Var,
    ys: Var,
    cfg: &HighOrderConfig,
) -> Result<Var> {
    let (w, b) = effective_predictor_graph(g, predictor, generator, xs, cfg)?;
    let pred = predict_graph(g, w, b, xs)?;
    g.mse(pred, ys)
}

/// `k` SGD steps on the generator minimizing support MSE; inputs untouched.
pub fn inner_adapt(
    predictor: &PredictorParams,
    generator: &GeneratorParams,
    xs: &Tensor,
    ys: &Tensor,
    cfg: &HighOrderConfig,
    alpha: f64,
    k: usize,
) -> Result<AdaptedState> {
    check_batch(xs, ys, "support")?;
    cfg.validate()?;
    let mut current = generator.params().clone();
    let mut losses = Vec::with_capacity(k + 1);
    for step in 0..=k {
        let mut g = Graph::new();
        let f = g.bind_constant(predictor.params());
        let gen = g.bind(&current);
        let x = g.constant(xs.clone());
        let y = g.constant(ys.clone());
        let loss = support_loss_graph(&mut g, &f, &gen, x, y, cfg)?;
        losses.push(g.value(loss).item());
        if step == k {
            break;
        }
        let grads = g.grad(loss, &gen)?;
        current = sgd_step(&current, &grads, alpha)?;
    }
    Ok(AdaptedState {
        theta_g_prime: GeneratorParams::from_params(current)?,
        support_losses: losses,
        provenance: Provenance {
            task_id: None,
            k,
            support_hash: batch_hash(xs, ys),
        },
    })
}

/// Gradients of the query loss after adaptation.
#[derive(Clone, Debug)]
pub struct MetaGradients {
    /// Direct gradient for the predictor at the adapted generator.
    pub predictor: ParamVector,
    /// Gradient for the generator through the inner loop.
    pub generator: ParamVector,
    /// Support loss after adaptation.
    pub support_loss: f64,
    pub query_loss: f64,
}

/// A recorded episode: inner loop on the support set followed by the query loss.
struct Episode {
    graph: Graph,
    predictor: ParamVars,
    generator: ParamVars,
    support_loss: Var,
    query_loss: Var,
}

fn record_episode(
    predictor: &PredictorParams,
    generator: &GeneratorParams,
    support: (&Tensor, &Tensor),
    query: (&Tensor, &Tensor),
    step: &MetaStep,
) -> Result<Episode> {
    check_batch(support.0, support.1, "support")?;
    check_batch(query.0, query.1, "query")?;
    let mut g = Graph::new();
    let f = g.bind(predictor.params());
    let gen = g.bind(generator.params());
    let f_fixed = ParamVars::new(
        f.names().to_vec(),
        f.vars()
            .iter()
            .map(|&v| g.detach(v))
            .collect::<Result<_>>()?,
    )?;
    let xs = g.constant(support.0.clone());
    let ys = g.constant(support.1.clone());
    let xq = g.constant(query.0.clone());
    let yq = g.constant(query.1.clone());
    let cfg = step.high_order;
    let inner = |g: &mut Graph, p: &ParamVars| support_loss_graph(g, &f_fixed, p, xs, ys, &cfg);
    let adapted = unroll_sgd(&mut g, &gen, &inner, step.inner())?;
    let support_loss = inner(&mut g, &adapted)?;
    let cond = match cfg.conditioning {
        crate::models::Conditioning::BatchPooled => xq,
        crate::models::Conditioning::SupportPooled => xs,
    };
    let (w, b) = effective_predictor_graph(&mut g, &f, &adapted, cond, &cfg)?;
    let pred = predict_graph(&mut g, w, b, xq)?;
    let query_loss = g.mse(pred, yq)?;
    Ok(Episode {
        graph: g,
        predictor: f,
        generator: gen,
        support_loss,
        query_loss,
    })
}

/// Query loss `L(theta_f, theta_g')` with `theta_g'` from the inner loop.
pub fn meta_objective(
    predictor: &PredictorParams,
    generator: &GeneratorParams,
    support: (&Tensor, &Tensor),
    query: (&Tensor, &Tensor),
    step: &MetaStep,
) -> Result<f64> {
    let ep = record_episode(predictor, generator, support, query, step)?;
    Ok(ep.graph.value(ep.query_loss).item())
}

pub fn meta_gradients(
    predictor: &PredictorParams,
    generator: &GeneratorParams,
    support: (&Tensor, &Tensor),
    query: (&Tensor, &Tensor),
    step: &MetaStep,
) -> Result<MetaGradients> {
    let mut ep = record_episode(predictor, generator, support, query, step)?;
    let both = ep.predictor.concat(&ep.generator);
    let grads = ep.graph.grad(ep.query_loss, &both)?;
    Ok(MetaGradients {
        predictor: grads.subset("predictor."),
        generator: grads.subset("generator."),
        support_loss: ep.graph.value(ep.support_loss).item(),
        query_loss: ep.graph.value(ep.query_loss).item(),
    })
}

/// Result of one outer update.
#[derive(Clone, Debug)]
pub struct OuterStep {
    pub predictor: PredictorParams,
    pub generator: GeneratorParams,
    pub support_loss: f64,
    /// `None` when the query set was empty and the update was skipped.
    pub query_loss: Option<f64>,
}

/// One inner/outer cycle; an empty query leaves the parameters unchanged.
pub fn outer_update(
    predictor: &PredictorParams,
    generator: &GeneratorParams,
    support: (&Tensor, &Tensor),
    query: Option<(&Tensor, &Tensor)>,
    step: &MetaStep,
) -> Result<OuterStep> {
    let Some(query) = query else {
        let adapted = inner_adapt(
            predictor,
            generator,
            support.0,
            support.1,
            &step.high_order,
            step.alpha,
            step.k,
        )?;
        return Ok(OuterStep {
            predictor: predictor.clone(),
            generator: generator.clone(),
            support_loss: *adapted.support_losses.last().unwrap(),
            query_loss: None,
        });
    };
    let grads = meta_gradients(predictor, generator, support, query, step)?;
    Ok(OuterStep {
        predictor: PredictorParams::from_params(sgd_step(
            predictor.params(),
            &grads.predictor,
            step.beta,
        )?)?,
        generator: GeneratorParams::from_params(sgd_step(
            generator.params(),
            &grads.generator,
            step.beta,
        )?)?,
        support_loss: grads.support_loss,
        query_loss: Some(grads.query_loss),
    })
}

// ---- plain linear predictor (MAML and common baselines) ---------------------

fn linear_loss(g: &mut Graph, p: &ParamVars, x: Var, y: Var) -> Result<Var> {
    let pred = predict_graph(g, p.get(PREDICTOR_WEIGHT)?, p.get(PREDICTOR_BIAS)?, x)?;
    g.mse(pred, y)
}

/// `k` SGD steps on the predictor's support MSE; returns the adapted
/// predictor and the support loss before each step and after the last.
pub fn finetune_predictor(
    predictor: &PredictorParams,
    xs: &Tensor,
    ys: &Tensor,
    alpha: f64,
    k: usize,
) -> Result<(PredictorParams, Vec<f64>)> {
    check_batch(xs, ys, "support")?;
    let mut current = predictor.params().clone();
    let mut losses = Vec::with_capacity(k + 1);
    for step in 0..=k {
        let mut g = Graph::new();
        let p = g.bind(&current);
        let x = g.constant(xs.clone());
        let y = g.constant(ys.clone());
        let loss = linear_loss(&mut g, &p, x, y)?;
        losses.push(g.value(loss).item());
        if step == k {
            break;
        }
        let grads = g.grad(loss, &p)?;
        current = sgd_step(&current, &grads, alpha)?;
    }
    Ok((PredictorParams::from_params(current)?, losses))
}

/// MAML meta-gradient for the plain predictor.
pub fn maml_gradients(
    predictor: &PredictorParams,
    support: (&Tensor, &Tensor),
    query: (&Tensor, &Tensor),
    inner: InnerSteps,
) -> Result<(ParamVector, f64, f64)> {
    check_batch(support.0, support.1, "support")?;
    check_batch(query.0, query.1, "query")?;
    let mut g = Graph::new();
    let p = g.bind(predictor.params());
    let xs = g.constant(support.0.clone());
    let ys = g.constant(support.1.clone());
    let xq = g.constant(query.0.clone());
    let yq = g.constant(query.1.clone());
    let loss = |g: &mut Graph, v: &ParamVars| linear_loss(g, v, xs, ys);
    let adapted = unroll_sgd(&mut g, &p, &loss, inner)?;
    let support_loss = loss(&mut g, &adapted)?;
    let query_loss = linear_loss(&mut g, &adapted, xq, yq)?;
    let grads = g.grad(query_loss, &p)?;
    Ok((
        grads,
        g.value(support_loss).item(),
        g.value(query_loss).item(),
    ))
}

// ---- training loops -----------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub task_index: usize,
    pub support_loss: f64,
    /// Missing when the task had no query items.
    pub query_loss: Option<f64>,
    pub validation_pc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub curve: Vec<CurvePoint>,
    pub tasks: usize,
    /// Tasks whose query set was empty.
    pub skipped: usize,
    /// `(tasks consumed, validation PC)` of the returned checkpoint.
    pub selected: Option<(usize, f64)>,
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub bundle: ModelBundle,
    pub log: TrainingLog,
}

/// Extracted features for every image of `dataset`.
pub fn feature_table(extractor: &Extractor, dataset: &RatingDataset) -> Result<Tensor> {
    extractor.extract(dataset.features())
}

fn task_batches(
    task: &MetaTask,
    feats: &Tensor,
) -> Result<((Tensor, Tensor), Option<(Tensor, Tensor)>)> {
    let support = task.support_batch(feats)?;
    let query = if task.query.is_empty() {
        None
    } else {
        Some(task.query_batch(feats)?)
    };
    Ok((support, query))
}

/// Shared driver: consumes exactly `cfg.iterations` tasks, validates
/// periodically and keeps the best checkpoint.
fn train_loop<S, F, B>(
    train: &RatingDataset,
    val: Option<&RatingDataset>,
    cfg: &TrainingConfig,
    mut state: S,
    mut step: F,
    to_bundle: B,
) -> Result<Trained>
where
    F: FnMut(&S, &(Tensor, Tensor), Option<&(Tensor, Tensor)>) -> Result<(S, f64, Option<f64>)>,
    B: Fn(&S) -> ModelBundle,
{
    let probe = to_bundle(&state);
    let feats = feature_table(&probe.extractor, train)?;
    let stream = EpisodeStream::new(train, cfg.shots, cfg.seed)?;
    let validation = match val {
        Some(v) if cfg.validation_every > 0 && cfg.validation_tasks > 0 => Some(EvalSettings {
            num_tasks: cfg.validation_tasks,
            shots: cfg.shots,
            alpha: cfg.alpha,
            k: cfg.k_steps,
            seed: cfg.seed.wrapping_add(1),
            workers: 1,
            common_finetune: true,
        })
        .map(|s| (v, s)),
        _ => None,
    };
    let mut log = TrainingLog {
        curve: Vec::with_capacity(cfg.iterations),
        tasks: 0,
        skipped: 0,
        selected: None,
    };
    let mut best: Option<(f64, ModelBundle)> = None;
    for i in 0..cfg.iterations {
        let task = stream.task(i)?;
        let (support, query) = task_batches(&task, &feats).map_err(|e| e.at_task(i))?;
        let (next, support_loss, query_loss) =
            step(&state, &support, query.as_ref()).map_err(|e| e.at_task(i))?;
        state = next;
        if query_loss.is_none() {
            log.skipped += 1;
        }
        if let Some(q) = query_loss {
            if !q.is_finite() {
                return Err(Error::NonFinite(format!("query loss diverged")).at_task(i));
            }
        }
        log.tasks += 1;
        let mut point = CurvePoint {
            task_index: i,
            support_loss,
            query_loss,
            validation_pc: None,
        };
        if let Some((v, settings)) = &validation {
            if (i + 1) % cfg.validation_every == 0 || i + 1 == cfg.iterations {
                let bundle = to_bundle(&state);
                let pc = meta_test(&bundle, v, settings)?.summary.pc.mean;
                point.validation_pc = Some(pc);
                if best.as_ref().is_none_or(|(b, _)| pc > *b) {
                    log.selected = Some((i + 1, pc));
                    best = Some((pc, bundle));
                }
            }
        }
        log.curve.push(point);
    }
    let bundle = match best {
        Some((_, b)) => b,
        None => to_bundle(&state),
    };
    Ok(Trained { bundle, log })
}

fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    rng
}

/// Learning-to-learn of the high-order predictor over training users.
pub fn meta_train(
    train: &RatingDataset,
    val: Option<&RatingDataset>,
    extractor: &Extractor,
    cfg: &TrainingConfig,
) -> Result<Trained> {
    cfg.validate()?;
    let d = extractor.feature_dim();
    let mut rng = init_rng(cfg.seed);
    let predictor = PredictorParams::init(d, &mut rng)?;
    let generator = GeneratorParams::init(d, cfg.generator_hidden, &mut rng)?;
    let step = cfg.step();
    let extractor = extractor.clone();
    train_loop(
        train,
        val,
        cfg,
        (predictor, generator),
        |(f, g), support, query| {
            let out = outer_update(
                f,
                g,
                (&support.0, &support.1),
                query.map(|q| (&q.0, &q.1)),
                &step,
            )?;
            Ok((
                (out.predictor, out.generator),
                out.support_loss,
                out.query_loss,
            ))
        },
        |(f, g)| ModelBundle {
            method: Method::Metafbp,
            extractor: extractor.clone(),
            predictor: f.clone(),
            generator: Some(g.clone()),
            high_order: cfg.high_order,
        },
    )
}

/// MAML over the plain predictor with the same task stream and step sizes.
pub fn maml_baseline_train(
    train: &RatingDataset,
    val: Option<&RatingDataset>,
    extractor: &Extractor,
    cfg: &TrainingConfig,
) -> Result<Trained> {
    cfg.validate()?;
    let mut rng = init_rng(cfg.seed);
    let predictor = PredictorParams::init(extractor.feature_dim(), &mut rng)?;
    let inner = cfg.inner();
    let beta = cfg.beta;
    let extractor = extractor.clone();
    train_loop(
        train,
        val,
        cfg,
        predictor,
        |f, support, query| match query {
            None => {
                let (_, losses) =
                    finetune_predictor(f, &support.0, &support.1, inner.alpha, inner.steps)?;
                Ok((f.clone(), *losses.last().unwrap(), None))
            }
            Some(q) => {
                let (grads, sl, ql) =
                    maml_gradients(f, (&support.0, &support.1), (&q.0, &q.1), inner)?;
                let next = PredictorParams::from_params(sgd_step(f.params(), &grads, beta)?)?;
                Ok((next, sl, Some(ql)))
            }
        },
        |f| ModelBundle {
            method: Method::Maml,
            extractor: extractor.clone(),
            predictor: f.clone(),
            generator: None,
            high_order: cfg.high_order,
        },
    )
}

/// Settings for fitting the common predictor to mode labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CommonConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for CommonConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.01,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Linear predictor fit to per-image mode labels by minibatch SGD on MSE.
pub fn common_baseline(
    train: &RatingDataset,
    extractor: &Extractor,
    cfg: &CommonConfig,
) -> Result<ModelBundle> {
    if !(cfg.lr > 0.0) || cfg.batch_size == 0 {
        return Err(Error::Validation(
            "common: lr must be > 0 and batch_size positive".into(),
        ));
    }
    let labels = train.mode_labels()?;
    let feats = feature_table(extractor, train)?;
    let mut rng = init_rng(cfg.seed);
    let mut params = PredictorParams::init(extractor.feature_dim(), &mut rng)?
        .params()
        .clone();
    let mut order: Vec<usize> = (0..train.num_images()).collect();
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle.set_stream(SHUFFLE_STREAM);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        for batch in order.chunks(cfg.batch_size) {
            let x = rows_of(&feats, batch)?;
            let y = Tensor::vector(batch.iter().map(|&i| labels[i] as f64).collect())?;
            let mut g = Graph::new();
            let p = g.bind(&params);
            let xv = g.constant(x);
            let yv = g.constant(y);
            let loss = linear_loss(&mut g, &p, xv, yv)?;
            if !g.value(loss).item().is_finite() {
                return Err(Error::NonFinite("common baseline loss".into()));
            }
            let grads = g.grad(loss, &p)?;
            params = sgd_step(&params, &grads, cfg.lr)?;
        }
    }
    Ok(ModelBundle {
        method: Method::Common,
        extractor: extractor.clone(),
        predictor: PredictorParams::from_params(params)?,
        generator: None,
        high_order: HighOrderConfig::default(),
    })
}
