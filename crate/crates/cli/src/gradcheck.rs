//! Finite-difference audit of every analytic gradient: single ops, models
//! end to end, and meta-gradients through unrolled inner loops.

use metafbp::meta::{inner_adapt, maml_gradients, meta_gradients, meta_objective, MetaStep};
use metafbp::models::{
    effective_predictor, effective_predictor_graph, predict, predict_graph, ExtractorParams,
    ExtractorSpec, GeneratorParams, HighOrderConfig, PredictorParams, Variant, PREDICTOR_BIAS,
    PREDICTOR_WEIGHT,
};
use metafbp::numerics::{
    finite_diff_grad, mse_loss, relative_error, GradMode, Graph, InnerSteps, ParamVars,
    ParamVector, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::CliResult;

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const META_TOLERANCE: f64 = 1e-3;

/// Deliberate corruption of an analytic gradient, used to prove the suite
/// can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    None,
    /// Negates every gradient flowing into generator parameters.
    GeneratorSignFlip,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub params: usize,
    pub rel_error: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.rel_error < self.tolerance
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn params(rng: &mut ChaCha8Rng, segs: &[(&str, &[usize])]) -> ParamVector {
    ParamVector::new(
        segs.iter()
            .map(|(n, s)| (n.to_string(), random(rng, s)))
            .collect(),
    )
    .unwrap()
}

fn flip_generator(grads: &ParamVector, fault: Fault) -> CliResult<ParamVector> {
    if fault != Fault::GeneratorSignFlip {
        return Ok(grads.clone());
    }
    let segs = grads
        .segments()
        .iter()
        .map(|(n, t)| {
            let t = if n.starts_with("generator.") {
                Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| -v).collect())?
            } else {
                t.clone()
            };
            Ok((n.clone(), t))
        })
        .collect::<metafbp::Result<Vec<_>>>()?;
    Ok(ParamVector::new(segs)?)
}

/// Compares `grad` of a recorded scalar against central differences of the
/// same recording.
fn graph_check<F>(
    name: &str,
    theta: &ParamVector,
    tol: f64,
    fault: Fault,
    build: F,
) -> CliResult<Check>
where
    F: Fn(&mut Graph, &ParamVars) -> metafbp::Result<Var>,
{
    let mut g = Graph::new();
    let vars = g.bind(theta);
    let out = build(&mut g, &vars)?;
    let analytic = flip_generator(&g.grad(out, &vars)?, fault)?;
    let numeric = finite_diff_grad(
        |p| {
            let mut g = Graph::new();
            let vars = g.bind(p);
            let out = build(&mut g, &vars)?;
            Ok(g.value(out).item())
        },
        theta,
        EPS,
    )?;
    Ok(Check {
        name: name.into(),
        params: theta.num_values(),
        rel_error: relative_error(&analytic, &numeric),
        tolerance: tol,
    })
}

fn op_checks(rng: &mut ChaCha8Rng, fault: Fault) -> CliResult<Vec<Check>> {
    let x = random(rng, &[6, 4]);
    let c = random(rng, &[6, 3]);
    let y = random(rng, &[6]);
    let theta = params(rng, &[("w", &[4, 3]), ("b", &[3]), ("m", &[6, 4])]);
    let mut out = Vec::new();

    let (xc, cc) = (x.clone(), c.clone());
    out.push(graph_check(
        "op.linear",
        &theta,
        TOLERANCE,
        fault,
        move |g, p| {
            let xv = g.constant(xc.clone());
            let cv = g.constant(cc.clone());
            let h = g.linear(xv, p.get("w")?, p.get("b")?)?;
            let h = g.mul(h, cv)?;
            g.sum(h)
        },
    )?);

    let (xc, cc) = (x.clone(), c.clone());
    out.push(graph_check(
        "op.relu",
        &theta,
        TOLERANCE,
        fault,
        move |g, p| {
            let xv = g.constant(xc.clone());
            let cv = g.constant(cc.clone());
            let h = g.linear(xv, p.get("w")?, p.get("b")?)?;
            let h = g.relu(h)?;
            let h = g.mul(h, cv)?;
            g.sum(h)
        },
    )?);

    let (xc, yc) = (x.clone(), y.clone());
    out.push(graph_check(
        "op.mse",
        &theta,
        TOLERANCE,
        fault,
        move |g, p| {
            let xv = g.constant(xc.clone());
            let yv = g.constant(yc.clone());
            let h = g.matmul(xv, p.get("w")?)?;
            let col = g.slice(h, 0, &[6, 1])?;
            let pred = g.reshape(col, &[6])?;
            g.mse(pred, yv)
        },
    )?);

    let xc = x.clone();
    out.push(graph_check(
        "op.cross_entropy",
        &theta,
        TOLERANCE,
        fault,
        move |g, p| {
            let xv = g.constant(xc.clone());
            let logits = g.linear(xv, p.get("w")?, p.get("b")?)?;
            g.cross_entropy(logits, &[1, 3, 2, 2, 1, 3])
        },
    )?);

    let cc = c.clone();
    out.push(graph_check(
        "op.structural",
        &theta,
        TOLERANCE,
        fault,
        move |g, p| {
            let m = p.get("m")?;
            let cv = g.constant(cc.clone());
            let pooled = g.mean_rows(m)?;
            let spread = g.broadcast_rows(pooled, 6)?;
            let centred = g.sub(m, spread)?;
            let sq = g.mul(centred, centred)?;
            let t = g.transpose(sq)?;
            let tw = g.matmul(t, cv)?;
            let rows = g.sum_rows(tw)?;
            let a = g.scale(rows, 0.5)?;
            let b = g.sum(a)?;
            let bias_sum = g.sum(p.get("b")?)?;
            let filled = g.fill(bias_sum, &[2])?;
            let f = g.mean(filled)?;
            let w = g.mean(p.get("w")?)?;
            let s = g.add(b, f)?;
            let s = g.mul(s, w)?;
            g.add(s, b)
        },
    )?);
    Ok(out)
}

fn model_checks(rng: &mut ChaCha8Rng, fault: Fault) -> CliResult<Vec<Check>> {
    let mut out = Vec::new();
    let spec = ExtractorSpec {
        input_dim: 5,
        feature_dim: 4,
        hidden: vec![6, 5],
    };
    let ext = ExtractorParams::init(spec, 3, rng)?;
    let x = random(rng, &[7, 5]);
    let labels = [1, 2, 3, 3, 2, 1, 2];
    let theta = ext.all()?;
    out.push(graph_check(
        "model.extractor",
        &theta,
        TOLERANCE,
        fault,
        |g, p| {
            let xv = g.constant(x.clone());
            let logits = ext.logits_graph(g, p, xv)?;
            g.cross_entropy(logits, &labels)
        },
    )?);

    let d = 4;
    let feats = random(rng, &[8, d]);
    let target = random(rng, &[8]);
    let f = PredictorParams::init(d, rng)?;
    out.push(graph_check(
        "model.predictor",
        f.params(),
        TOLERANCE,
        fault,
        |g, p| {
            let xv = g.constant(feats.clone());
            let yv = g.constant(target.clone());
            let pred = predict_graph(g, p.get(PREDICTOR_WEIGHT)?, p.get(PREDICTOR_BIAS)?, xv)?;
            g.mse(pred, yv)
        },
    )?);

    let gen = GeneratorParams::init(d, 8, rng)?;
    for (name, variant) in [
        ("model.high_order.tuning", Variant::Tuning),
        ("model.high_order.rebirth", Variant::Rebirth),
    ] {
        let cfg = HighOrderConfig {
            lambda: 0.5,
            variant,
            ..HighOrderConfig::default()
        };
        let theta = f.params().concat(gen.params())?;
        out.push(graph_check(name, &theta, TOLERANCE, fault, |g, p| {
            let xv = g.constant(feats.clone());
            let yv = g.constant(target.clone());
            let (w, b) = effective_predictor_graph(
                g,
                &p.subset("predictor."),
                &p.subset("generator."),
                xv,
                &cfg,
            )?;
            let pred = predict_graph(g, w, b, xv)?;
            g.mse(pred, yv)
        })?);
    }
    Ok(out)
}

fn meta_checks(rng: &mut ChaCha8Rng, fault: Fault) -> CliResult<Vec<Check>> {
    let (d, h) = (4, 8);
    let xs = random(rng, &[6, d]);
    let ys = random(rng, &[6]);
    let xq = random(rng, &[9, d]);
    let yq = random(rng, &[9]);
    let f = PredictorParams::init(d, rng)?;
    let gen = GeneratorParams::init(d, h, rng)?;
    let mut out = Vec::new();
    for (name, variant) in [
        ("meta.metafbp.tuning", Variant::Tuning),
        ("meta.metafbp.rebirth", Variant::Rebirth),
    ] {
        let step = MetaStep {
            alpha: 0.1,
            beta: 0.0,
            k: 3,
            mode: GradMode::Exact,
            high_order: HighOrderConfig {
                lambda: 0.5,
                variant,
                ..HighOrderConfig::default()
            },
        };
        let grads = meta_gradients(&f, &gen, (&xs, &ys), (&xq, &yq), &step)?;
        // Generator: total derivative of the query loss through the unroll.
        let analytic = flip_generator(&grads.generator, fault)?;
        let numeric = finite_diff_grad(
            |p| {
                let pg = GeneratorParams::from_params(p.clone())?;
                meta_objective(&f, &pg, (&xs, &ys), (&xq, &yq), &step)
            },
            gen.params(),
            EPS,
        )?;
        out.push(Check {
            name: format!("{name}.generator"),
            params: gen.params().num_values(),
            rel_error: relative_error(&analytic, &numeric),
            tolerance: META_TOLERANCE,
        });
        // Predictor: held fixed inside the inner loop, so its gradient is the
        // direct one at the adapted generator.
        let adapted =
            inner_adapt(&f, &gen, &xs, &ys, &step.high_order, step.alpha, step.k)?.theta_g_prime;
        let numeric = finite_diff_grad(
            |p| {
                let pf = PredictorParams::from_params(p.clone())?;
                let eff = effective_predictor(&pf, &adapted, &xq, &step.high_order)?;
                mse_loss(&predict(&eff, &xq)?, &yq)
            },
            f.params(),
            EPS,
        )?;
        out.push(Check {
            name: format!("{name}.predictor"),
            params: f.params().num_values(),
            rel_error: relative_error(&grads.predictor, &numeric),
            tolerance: META_TOLERANCE,
        });
    }

    let inner = InnerSteps {
        alpha: 0.1,
        steps: 3,
        mode: GradMode::Exact,
    };
    let (analytic, _, _) = maml_gradients(&f, (&xs, &ys), (&xq, &yq), inner)?;
    let numeric = finite_diff_grad(
        |p| {
            let pf = PredictorParams::from_params(p.clone())?;
            Ok(maml_gradients(&pf, (&xs, &ys), (&xq, &yq), inner)?.2)
        },
        f.params(),
        EPS,
    )?;
    out.push(Check {
        name: "meta.maml".into(),
        params: f.params().num_values(),
        rel_error: relative_error(&analytic, &numeric),
        tolerance: META_TOLERANCE,
    });
    Ok(out)
}

/// Runs every check; `seed` fixes the random instances.
pub fn run_suite(seed: u64, fault: Fault) -> CliResult<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = op_checks(&mut rng, fault)?;
    checks.extend(model_checks(&mut rng, fault)?);
    checks.extend(meta_checks(&mut rng, fault)?);
    Ok(checks)
}

pub fn render(checks: &[Check]) -> String {
    let mut out = String::from("check,params,rel_error,tolerance,status\n");
    for c in checks {
        out.push_str(&format!(
            "{},{},{:.3e},{:.0e},{}\n",
            c.name,
            c.params,
            c.rel_error,
            c.tolerance,
            if c.passed() { "pass" } else { "FAIL" }
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_suite_passes() {
        let checks = run_suite(0, Fault::None).unwrap();
        assert!(checks.len() >= 10);
        for c in &checks {
            assert!(c.passed(), "{c:?}");
        }
    }

    #[test]
    fn generator_sign_flip_is_caught() {
        let checks = run_suite(0, Fault::GeneratorSignFlip).unwrap();
        let failed: Vec<&str> = checks
            .iter()
            .filter(|c| !c.passed())
            .map(|c| c.name.as_str())
            .collect();
        assert!(
            failed.contains(&"meta.metafbp.tuning.generator"),
            "{failed:?}"
        );
        assert!(
            !failed.contains(&"meta.metafbp.tuning.predictor"),
            "{failed:?}"
        );
        assert!(failed.contains(&"model.high_order.rebirth"), "{failed:?}");
        assert!(!failed.contains(&"meta.maml"));
    }
}
