//! Feature extractor, linear predictor and parameter generator, and their
//! composition into the high-order predictor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamVars, ParamVector, Tensor, Var};

pub const PREDICTOR_WEIGHT: &str = "predictor.weight";
pub const PREDICTOR_BIAS: &str = "predictor.bias";
pub const GEN_FC1_WEIGHT: &str = "generator.fc1.weight";
pub const GEN_FC1_BIAS: &str = "generator.fc1.bias";
pub const GEN_FC2_WEIGHT: &str = "generator.fc2.weight";
pub const GEN_FC2_BIAS: &str = "generator.fc2.bias";
const HEAD_WEIGHT: &str = "head.weight";
const HEAD_BIAS: &str = "head.bias";

/// How generated parameters are combined with the base predictor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// `theta_f + lambda * G(X)`
    Tuning,
    /// `G(X)`; the base predictor is ignored.
    Rebirth,
}

/// Which features the generator is conditioned on when predicting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Conditioning {
    /// Pooled support features of the current task.
    SupportPooled,
    /// Pooled features of the batch being predicted.
    BatchPooled,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HighOrderConfig {
    pub lambda: f64,
    pub variant: Variant,
    pub conditioning: Conditioning,
}

impl Default for HighOrderConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            variant: Variant::Tuning,
            conditioning: Conditioning::BatchPooled,
        }
    }
}

impl HighOrderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Validation(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for a dense layer.
fn init_layer<R: Rng>(
    rng: &mut R,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) -> Vec<(String, Tensor)> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut draw = |n: usize| {
        (0..n)
            .map(|_| rng.random_range(-bound..=bound))
            .collect::<Vec<_>>()
    };
    let w = Tensor::raw(vec![fan_in, fan_out], draw(fan_in * fan_out));
    let b = Tensor::raw(vec![fan_out], draw(fan_out));
    vec![
        (format!("{prefix}.weight"), w),
        (format!("{prefix}.bias"), b),
    ]
}

// ---- extractor ----------------------------------------------------------

/// Architecture of the feature extractor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorSpec {
    pub input_dim: usize,
    pub feature_dim: usize,
    /// Hidden layer widths; ReLU follows each hidden layer.
    pub hidden: Vec<usize>,
}

impl ExtractorSpec {
    fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden);
        dims.push(self.feature_dim);
        dims
    }

    fn num_layers(&self) -> usize {
        self.hidden.len() + 1
    }
}

/// Trainable extractor plus its classification head (stage 1 only).
#[derive(Clone, Debug)]
pub struct ExtractorParams {
    pub spec: ExtractorSpec,
    pub body: ParamVector,
    pub head: ParamVector,
}

impl ExtractorParams {
    pub fn init<R: Rng>(spec: ExtractorSpec, num_classes: usize, rng: &mut R) -> Result<Self> {
        if spec.input_dim == 0 || spec.feature_dim == 0 || spec.hidden.contains(&0) {
            return Err(Error::Validation(
                "extractor dimensions must be positive".into(),
            ));
        }
        let dims = spec.layer_dims();
        let mut body = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            body.extend(init_layer(
                rng,
                &format!("extractor.fc{}", i + 1),
                w[0],
                w[1],
            ));
        }
        let head = init_layer(rng, "head", spec.feature_dim, num_classes);
        Ok(Self {
            spec,
            body: ParamVector::new(body)?,
            head: ParamVector::new(head)?,
        })
    }

    pub fn all(&self) -> Result<ParamVector> {
        self.body.concat(&self.head)
    }

    /// Records `logits = head(body(x))`.
    pub fn logits_graph(&self, g: &mut Graph, vars: &ParamVars, x: Var) -> Result<Var> {
        let feats = body_graph(&self.spec, g, vars, x)?;
        g.linear(feats, vars.get(HEAD_WEIGHT)?, vars.get(HEAD_BIAS)?)
    }

    /// Drops the head and returns the immutable extractor.
    pub fn freeze(self) -> Extractor {
        Extractor {
            spec: self.spec,
            body: Some(self.body),
        }
    }
}

fn body_graph(spec: &ExtractorSpec, g: &mut Graph, vars: &ParamVars, x: Var) -> Result<Var> {
    let mut h = x;
    for i in 1..=spec.num_layers() {
        h = g.linear(
            h,
            vars.get(&format!("extractor.fc{i}.weight"))?,
            vars.get(&format!("extractor.fc{i}.bias"))?,
        )?;
        if i < spec.num_layers() {
            h = g.relu(h)?;
        }
    }
    Ok(h)
}

/// Frozen feature extractor. Either a trained MLP or a pass-through for
/// precomputed features.
#[derive(Clone, Debug, PartialEq)]
pub struct Extractor {
    spec: ExtractorSpec,
    body: Option<ParamVector>,
}

impl Extractor {
    pub fn pass_through(dim: usize) -> Self {
        Self {
            spec: ExtractorSpec {
                input_dim: dim,
                feature_dim: dim,
                hidden: vec![],
            },
            body: None,
        }
    }

    /// Rebuilds a frozen extractor from stored parameters.
    pub fn from_params(spec: ExtractorSpec, body: ParamVector) -> Result<Self> {
        let expected: Vec<(String, Vec<usize>)> = spec
            .layer_dims()
            .windows(2)
            .enumerate()
            .flat_map(|(i, w)| {
                [
                    (format!("extractor.fc{}.weight", i + 1), vec![w[0], w[1]]),
                    (format!("extractor.fc{}.bias", i + 1), vec![w[1]]),
                ]
            })
            .collect();
        if body.layout() != expected {
            return Err(Error::Validation(format!(
                "extractor parameters {:?} do not match architecture {:?}",
                body.layout(),
                expected
            )));
        }
        Ok(Self {
            spec,
            body: Some(body),
        })
    }

    pub fn spec(&self) -> &ExtractorSpec {
        &self.spec
    }

    pub fn params(&self) -> Option<&ParamVector> {
        self.body.as_ref()
    }

    pub fn is_pass_through(&self) -> bool {
        self.body.is_none()
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    pub fn content_hash(&self) -> String {
        match &self.body {
            Some(p) => p.content_hash(),
            None => format!("pass-through:{}", self.spec.input_dim),
        }
    }

    /// Maps raw inputs `[n, input_dim]` to features `[n, feature_dim]`.
    pub fn extract(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.cols() != self.spec.input_dim {
            return Err(Error::Validation(format!(
                "extractor expects inputs with {} columns, got shape {:?}",
                self.spec.input_dim,
                x.shape()
            )));
        }
        let Some(body) = &self.body else {
            return Ok(x.clone());
        };
        let mut g = Graph::new();
        let vars = g.bind_constant(body);
        let xv = g.constant(x.clone());
        let out = body_graph(&self.spec, &mut g, &vars, xv)?;
        Ok(g.value(out).clone())
    }
}

// ---- predictor and generator ---------------------------------------------

/// Single fully connected layer `features -> score`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorParams(ParamVector);

impl PredictorParams {
    pub fn new(weight: Vec<f64>, bias: f64) -> Result<Self> {
        let d = weight.len();
        Ok(Self(ParamVector::new(vec![
            (PREDICTOR_WEIGHT.into(), Tensor::new(vec![d, 1], weight)?),
            (PREDICTOR_BIAS.into(), Tensor::new(vec![1], vec![bias])?),
        ])?))
    }

    pub fn init<R: Rng>(dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self(ParamVector::new(init_layer(
            rng,
            "predictor",
            dim,
            1,
        ))?))
    }

    pub fn from_params(params: ParamVector) -> Result<Self> {
        let w = params.require(PREDICTOR_WEIGHT)?;
        let b = params.require(PREDICTOR_BIAS)?;
        if params.num_segments() != 2 || w.shape().len() != 2 || w.cols() != 1 || b.shape() != [1] {
            return Err(Error::Validation(format!(
                "bad predictor layout {:?}",
                params.layout()
            )));
        }
        Ok(Self(params))
    }

    pub fn dim(&self) -> usize {
        self.weight().len()
    }

    pub fn weight(&self) -> &[f64] {
        self.0
            .get(PREDICTOR_WEIGHT)
            .expect("predictor weight")
            .data()
    }

    pub fn bias(&self) -> f64 {
        self.0.get(PREDICTOR_BIAS).expect("predictor bias").item()
    }

    pub fn params(&self) -> &ParamVector {
        &self.0
    }
}

/// FC-ReLU-FC network mapping pooled features `[d]` to `d + 1` predictor deltas.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams(ParamVector);

impl GeneratorParams {
    pub fn init<R: Rng>(dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(Error::Validation(
                "generator dimensions must be positive".into(),
            ));
        }
        let mut segs = init_layer(rng, "generator.fc1", dim, hidden);
        segs.extend(init_layer(rng, "generator.fc2", hidden, dim + 1));
        Ok(Self(ParamVector::new(segs)?))
    }

    pub fn from_params(params: ParamVector) -> Result<Self> {
        let w1 = params.require(GEN_FC1_WEIGHT)?;
        let b1 = params.require(GEN_FC1_BIAS)?;
        let w2 = params.require(GEN_FC2_WEIGHT)?;
        let b2 = params.require(GEN_FC2_BIAS)?;
        let ok = params.num_segments() == 4
            && w1.shape().len() == 2
            && b1.shape() == [w1.cols()]
            && w2.shape() == [w1.cols(), w1.rows() + 1]
            && b2.shape() == [w1.rows() + 1];
        if !ok {
            return Err(Error::Validation(format!(
                "bad generator layout {:?}",
                params.layout()
            )));
        }
        Ok(Self(params))
    }

    /// Same network with the output layer zeroed, so it generates a zero delta.
    pub fn with_zero_output(&self) -> Self {
        let segs = self
            .0
            .segments()
            .iter()
            .map(|(n, t)| {
                let t = if n.starts_with("generator.fc2") {
                    Tensor::zeros(t.shape())
                } else {
                    t.clone()
                };
                (n.clone(), t)
            })
            .collect();
        Self(ParamVector::new(segs).expect("same names"))
    }

    pub fn dim(&self) -> usize {
        self.0.get(GEN_FC1_WEIGHT).expect("fc1").rows()
    }

    pub fn hidden(&self) -> usize {
        self.0.get(GEN_FC1_WEIGHT).expect("fc1").cols()
    }

    pub fn params(&self) -> &ParamVector {
        &self.0
    }
}

/// Generated `(weight delta [d, 1], bias delta [1])` for a pooled feature vector.
pub fn generator_graph(g: &mut Graph, gen: &ParamVars, pooled: Var) -> Result<(Var, Var)> {
    let d = g.value(pooled).len();
    let w1 = gen.get(GEN_FC1_WEIGHT)?;
    if g.value(w1).rows() != d {
        return Err(Error::Validation(format!(
            "generator expects {}-dimensional input, got {d}",
            g.value(w1).rows()
        )));
    }
    let x = g.reshape(pooled, &[1, d])?;
    let h = g.linear(x, w1, gen.get(GEN_FC1_BIAS)?)?;
    let h = g.relu(h)?;
    let out = g.linear(h, gen.get(GEN_FC2_WEIGHT)?, gen.get(GEN_FC2_BIAS)?)?;
    let dw = g.slice(out, 0, &[d, 1])?;
    let db = g.slice(out, d, &[1])?;
    Ok((dw, db))
}

/// Effective predictor `(weight, bias)` for the high-order model conditioned on `cond`.
pub fn effective_predictor_graph(
    g: &mut Graph,
    predictor: &ParamVars,
    generator: &ParamVars,
    cond: Var,
    cfg: &HighOrderConfig,
) -> Result<(Var, Var)> {
    if g.value(cond).rows() == 0 {
        return Err(Error::EmptyBatch("pool"));
    }
    let pooled = g.mean_rows(cond)?;
    let (dw, db) = generator_graph(g, generator, pooled)?;
    match cfg.variant {
        Variant::Rebirth => Ok((dw, db)),
        Variant::Tuning => {
            let w = predictor.get(PREDICTOR_WEIGHT)?;
            let b = predictor.get(PREDICTOR_BIAS)?;
            if g.value(w).shape() != g.value(dw).shape() {
                return Err(Error::shape(
                    "effective_predictor",
                    g.value(w).shape(),
                    g.value(dw).shape(),
                ));
            }
            let sw = g.scale(dw, cfg.lambda)?;
            let sb = g.scale(db, cfg.lambda)?;
            Ok((g.add(w, sw)?, g.add(b, sb)?))
        }
    }
}

/// Scores `[n]` for features `[n, d]`.
pub fn predict_graph(g: &mut Graph, weight: Var, bias: Var, x: Var) -> Result<Var> {
    let n = g.value(x).rows();
    let y = g.linear(x, weight, bias)?;
    g.reshape(y, &[n])
}

// ---- value-level API ------------------------------------------------------

/// Row mean of a feature batch.
pub fn pool(features: &Tensor) -> Result<Tensor> {
    if features.shape().len() != 2 || features.rows() == 0 {
        return Err(Error::EmptyBatch("pool"));
    }
    let mut g = Graph::new();
    let x = g.constant(features.clone());
    let m = g.mean_rows(x)?;
    Ok(g.value(m).clone())
}

/// Delta produced by the generator, shaped like a predictor.
pub fn generate_delta(generator: &GeneratorParams, pooled: &Tensor) -> Result<PredictorParams> {
    if pooled.shape().len() != 1 || pooled.len() != generator.dim() {
        return Err(Error::Validation(format!(
            "generator expects a pooled vector of length {}, got shape {:?}",
            generator.dim(),
            pooled.shape()
        )));
    }
    let mut g = Graph::new();
    let gen = g.bind_constant(generator.params());
    let p = g.constant(pooled.clone());
    let (dw, db) = generator_graph(&mut g, &gen, p)?;
    PredictorParams::new(g.value(dw).data().to_vec(), g.value(db).item())
}

pub fn effective_predictor(
    predictor: &PredictorParams,
    generator: &GeneratorParams,
    features: &Tensor,
    cfg: &HighOrderConfig,
) -> Result<PredictorParams> {
    cfg.validate()?;
    if features.shape().len() != 2 || features.cols() != predictor.dim() {
        return Err(Error::Validation(format!(
            "features {:?} do not match predictor dimension {}",
            features.shape(),
            predictor.dim()
        )));
    }
    let mut g = Graph::new();
    let pred = g.bind_constant(predictor.params());
    let gen = g.bind_constant(generator.params());
    let x = g.constant(features.clone());
    let (w, b) = effective_predictor_graph(&mut g, &pred, &gen, x, cfg)?;
    PredictorParams::new(g.value(w).data().to_vec(), g.value(b).item())
}

/// Continuous scores `features @ weight + bias`.
pub fn predict(predictor: &PredictorParams, features: &Tensor) -> Result<Tensor> {
    if features.shape().len() != 2 || features.cols() != predictor.dim() {
        return Err(Error::Validation(format!(
            "features {:?} do not match predictor dimension {}",
            features.shape(),
            predictor.dim()
        )));
    }
    let w = predictor.weight();
    let b = predictor.bias();
    let scores = (0..features.rows())
        .map(|i| {
            features
                .row(i)
                .iter()
                .zip(w)
                .map(|(x, w)| x * w)
                .sum::<f64>()
                + b
        })
        .collect();
    Tensor::vector(scores)
}

/// Which training procedure produced a bundle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Meta-learned generator over a linear predictor.
    Metafbp,
    /// MAML over the plain predictor.
    Maml,
    /// Predictor fit to mode labels, no meta-learning.
    Common,
}

/// Everything needed to adapt and predict for a new user.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub method: Method,
    pub extractor: Extractor,
    pub predictor: PredictorParams,
    pub generator: Option<GeneratorParams>,
    pub high_order: HighOrderConfig,
}

impl ModelBundle {
    /// Hash over every parameter in the bundle.
    pub fn content_hash(&self) -> String {
        let mut parts = vec![
            self.extractor.content_hash(),
            self.predictor.params().content_hash(),
        ];
        if let Some(g) = &self.generator {
            parts.push(g.params().content_hash());
        }
        parts.join(":")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rows(r: &[&[f64]]) -> Tensor {
        Tensor::from_rows(r).unwrap()
    }

    fn random_features(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        Tensor::new(
            vec![n, d],
            (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn pass_through_extractor_is_identity() {
        let x = rows(&[&[1.0, -2.0], &[0.5, 3.0]]);
        assert_eq!(Extractor::pass_through(2).extract(&x).unwrap(), x);
        assert!(Extractor::pass_through(3).extract(&x).is_err());
    }

    #[test]
    fn zero_mlp_gives_zero_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = ExtractorSpec {
            input_dim: 3,
            feature_dim: 2,
            hidden: vec![4, 4],
        };
        let p = ExtractorParams::init(spec, 3, &mut rng).unwrap();
        let zeroed = p.body.zeros_like();
        let e = Extractor::from_params(p.spec.clone(), zeroed).unwrap();
        let f = e.extract(&Tensor::zeros(&[5, 3])).unwrap();
        assert_eq!(f.shape(), &[5, 2]);
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn seeded_extractor_is_deterministic() {
        let spec = ExtractorSpec {
            input_dim: 4,
            feature_dim: 3,
            hidden: vec![5, 5],
        };
        let make = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            ExtractorParams::init(spec.clone(), 2, &mut rng)
                .unwrap()
                .freeze()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_features(&mut rng, 6, 4);
        let (a, b) = (make().extract(&x).unwrap(), make().extract(&x).unwrap());
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn pool_examples() {
        assert_eq!(pool(&rows(&[&[1.0, 2.0]])).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(
            pool(&rows(&[&[1.0, 3.0], &[3.0, 1.0]])).unwrap().data(),
            &[2.0, 2.0]
        );
        assert!(matches!(
            pool(&Tensor::zeros(&[0, 2])),
            Err(Error::EmptyBatch(_))
        ));
    }

    #[test]
    fn pool_is_permutation_invariant() {
        let a = rows(&[&[1.0, 0.5], &[2.0, -1.0], &[0.25, 4.0]]);
        let b = rows(&[&[0.25, 4.0], &[1.0, 0.5], &[2.0, -1.0]]);
        let (pa, pb) = (pool(&a).unwrap(), pool(&b).unwrap());
        for (x, y) in pa.data().iter().zip(pb.data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn generator_delta_shapes_and_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gen = GeneratorParams::init(4, 8, &mut rng).unwrap();
        for n in [1, 3, 10] {
            let pooled = pool(&random_features(&mut rng, n, 4)).unwrap();
            let delta = generate_delta(&gen, &pooled).unwrap();
            assert_eq!(delta.dim(), 4);
            let zero = generate_delta(&gen.with_zero_output(), &pooled).unwrap();
            assert!(zero.weight().iter().all(|&v| v == 0.0) && zero.bias() == 0.0);
        }
        assert!(generate_delta(&gen, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn generator_output_is_finite_over_many_seeds() {
        for seed in 0..1000 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gen = GeneratorParams::init(4, 8, &mut rng).unwrap();
            let pooled =
                Tensor::vector((0..4).map(|_| rng.random_range(-10.0..10.0)).collect()).unwrap();
            let delta = generate_delta(&gen, &pooled).unwrap();
            assert!(delta.params().flatten().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn tuning_with_zero_lambda_is_base_predictor() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pred = PredictorParams::init(4, &mut rng).unwrap();
        let gen = GeneratorParams::init(4, 8, &mut rng).unwrap();
        let x = random_features(&mut rng, 9, 4);
        let cfg = HighOrderConfig {
            lambda: 0.0,
            ..Default::default()
        };
        let eff = effective_predictor(&pred, &gen, &x, &cfg).unwrap();
        assert_eq!(eff, pred);
        let bits = |t: Tensor| {
            t.into_data()
                .into_iter()
                .map(f64::to_bits)
                .collect::<Vec<_>>()
        };
        assert_eq!(
            bits(predict(&eff, &x).unwrap()),
            bits(predict(&pred, &x).unwrap())
        );
    }

    #[test]
    fn tuning_adds_scaled_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pred = PredictorParams::init(4, &mut rng).unwrap();
        let gen = GeneratorParams::init(4, 8, &mut rng).unwrap();
        let x = random_features(&mut rng, 5, 4);
        let cfg = HighOrderConfig {
            lambda: 0.01,
            ..Default::default()
        };
        let eff = effective_predictor(&pred, &gen, &x, &cfg).unwrap();
        let delta = generate_delta(&gen, &pool(&x).unwrap()).unwrap();
        for i in 0..4 {
            assert!(
                (eff.weight()[i] - (pred.weight()[i] + 0.01 * delta.weight()[i])).abs() < 1e-15
            );
        }
        assert!((eff.bias() - (pred.bias() + 0.01 * delta.bias())).abs() < 1e-15);
    }

    #[test]
    fn rebirth_ignores_base_predictor() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gen = GeneratorParams::init(4, 8, &mut rng).unwrap();
        let x = random_features(&mut rng, 5, 4);
        let cfg = HighOrderConfig {
            variant: Variant::Rebirth,
            ..Default::default()
        };
        for _ in 0..10 {
            let a = PredictorParams::init(4, &mut rng).unwrap();
            let b = PredictorParams::init(4, &mut rng).unwrap();
            let ea = effective_predictor(&a, &gen, &x, &cfg).unwrap();
            let eb = effective_predictor(&b, &gen, &x, &cfg).unwrap();
            assert_eq!(predict(&ea, &x).unwrap(), predict(&eb, &x).unwrap());
        }
    }

    #[test]
    fn effective_predictor_is_row_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pred = PredictorParams::init(3, &mut rng).unwrap();
        let gen = GeneratorParams::init(3, 5, &mut rng).unwrap();
        let x = rows(&[&[0.1, 0.2, 0.3], &[1.0, -1.0, 0.5], &[-0.3, 0.8, 2.0]]);
        let y = rows(&[&[-0.3, 0.8, 2.0], &[0.1, 0.2, 0.3], &[1.0, -1.0, 0.5]]);
        let cfg = HighOrderConfig {
            lambda: 1.0,
            ..Default::default()
        };
        let a = effective_predictor(&pred, &gen, &x, &cfg)
            .unwrap()
            .params()
            .flatten();
        let b = effective_predictor(&pred, &gen, &y, &cfg)
            .unwrap()
            .params()
            .flatten();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-14);
        }
    }

    #[test]
    fn predict_examples() {
        let x = rows(&[&[1.0, 2.0], &[3.0, 4.0], &[-1.0, 0.0]]);
        let constant = PredictorParams::new(vec![0.0, 0.0], 3.0).unwrap();
        assert_eq!(predict(&constant, &x).unwrap().data(), &[3.0, 3.0, 3.0]);
        let onehot = PredictorParams::new(vec![0.0, 1.0], 0.5).unwrap();
        assert_eq!(predict(&onehot, &x).unwrap().data(), &[2.5, 4.5, 0.5]);
    }

    #[test]
    fn negative_lambda_rejected() {
        let cfg = HighOrderConfig {
            lambda: -0.1,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
