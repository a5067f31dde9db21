//! Versioned text format for extractors and trained bundles.
//!
//! ```text
//! metafbp-model 1
//! kind metafbp                 # extractor | metafbp | maml | common
//! extractor mlp 16 16 32,32    # or: extractor pass-through 16
//! lambda 1.0000000000000000e-2
//! variant tuning
//! conditioning batch-pooled
//! train_shots 5 15             # or: train_shots none
//! segment predictor.weight 16 1
//! <one row per line, values as {:.16e}>
//! ...
//! # config-begin
//! # <embedded run config>
//! # config-end
//! sha256 <hex digest of every byte above this line>
//! ```
//!
//! Values carry 17 significant digits, which round-trips every `f64`.

use metafbp::episodes::Shots;
use metafbp::models::{
    Conditioning, Extractor, ExtractorSpec, GeneratorParams, HighOrderConfig, Method, ModelBundle,
    PredictorParams, Variant,
};
use metafbp::numerics::{ParamVector, Tensor};
use sha2::{Digest, Sha256};

use crate::config::{comment_block, embedded_config};
use crate::error::{CliError, CliResult};

const MAGIC: &str = "metafbp-model";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Stored {
    Extractor(Extractor),
    Bundle(ModelBundle),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub stored: Stored,
    pub train_shots: Option<Shots>,
    pub config: String,
}

impl ModelFile {
    pub fn extractor(&self) -> &Extractor {
        match &self.stored {
            Stored::Extractor(e) => e,
            Stored::Bundle(b) => &b.extractor,
        }
    }
}

fn corrupt(msg: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("corrupt model file: {msg}"))
}

fn digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn kebab<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}

fn from_kebab<T: serde::de::DeserializeOwned>(s: &str, what: &str) -> CliResult<T> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| corrupt(format!("unknown {what} `{s}`")))
}

fn write_segments(out: &mut String, params: &ParamVector) {
    for (name, t) in params.segments() {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        out.push_str(&format!("segment {name} {}\n", dims.join(" ")));
        let cols = *t.shape().last().unwrap_or(&1);
        for row in t.data().chunks(cols.max(1)) {
            let vals: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            out.push_str(&vals.join(" "));
            out.push('\n');
        }
    }
}

pub fn encode(file: &ModelFile) -> String {
    let mut out = format!("{MAGIC} {VERSION}\n");
    let (kind, extractor, bundle) = match &file.stored {
        Stored::Extractor(e) => ("extractor".to_string(), e, None),
        Stored::Bundle(b) => (kebab(&b.method), &b.extractor, Some(b)),
    };
    out.push_str(&format!("kind {kind}\n"));
    let spec = extractor.spec();
    if extractor.is_pass_through() {
        out.push_str(&format!("extractor pass-through {}\n", spec.input_dim));
    } else {
        let hidden: Vec<String> = spec.hidden.iter().map(|h| h.to_string()).collect();
        let hidden = if hidden.is_empty() {
            "-".to_string()
        } else {
            hidden.join(",")
        };
        out.push_str(&format!(
            "extractor mlp {} {} {hidden}\n",
            spec.input_dim, spec.feature_dim
        ));
    }
    if let Some(b) = bundle {
        out.push_str(&format!("lambda {:.16e}\n", b.high_order.lambda));
        out.push_str(&format!("variant {}\n", kebab(&b.high_order.variant)));
        out.push_str(&format!(
            "conditioning {}\n",
            kebab(&b.high_order.conditioning)
        ));
    }
    match file.train_shots {
        Some(s) => out.push_str(&format!("train_shots {} {}\n", s.support, s.query)),
        None => out.push_str("train_shots none\n"),
    }
    if let Some(p) = extractor.params() {
        write_segments(&mut out, p);
    }
    if let Some(b) = bundle {
        write_segments(&mut out, b.predictor.params());
        if let Some(g) = &b.generator {
            write_segments(&mut out, g.params());
        }
    }
    out.push_str(&comment_block(&file.config));
    let sum = digest(&out);
    out.push_str(&format!("sha256 {sum}\n"));
    out
}

struct Lines<'a> {
    inner: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> CliResult<(usize, &'a str)> {
        self.inner
            .next()
            .map(|(i, l)| (i + 1, l))
            .ok_or_else(|| corrupt("unexpected end of file"))
    }

    fn peek(&mut self) -> Option<&'a str> {
        self.inner.peek().map(|(_, l)| *l)
    }

    fn field(&mut self, key: &str) -> CliResult<Vec<&'a str>> {
        let (n, line) = self.next()?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(key) {
            return Err(corrupt(format!("line {n}: expected `{key}`")));
        }
        Ok(parts.collect())
    }
}

fn number<T: std::str::FromStr>(s: &str, line: &str) -> CliResult<T> {
    s.parse()
        .map_err(|_| corrupt(format!("bad number `{s}` in `{line}`")))
}

fn one<'a>(v: &[&'a str], what: &str) -> CliResult<&'a str> {
    v.first()
        .copied()
        .ok_or_else(|| corrupt(format!("empty {what}")))
}

fn read_segments(lines: &mut Lines) -> CliResult<Vec<(String, Tensor)>> {
    let mut out = Vec::new();
    while lines.peek().is_some_and(|l| l.starts_with("segment ")) {
        let (n, header) = lines.next()?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() < 3 {
            return Err(corrupt(format!(
                "line {n}: segment header needs a name and a shape"
            )));
        }
        let shape: Vec<usize> = parts[2..]
            .iter()
            .map(|d| number(d, header))
            .collect::<CliResult<_>>()?;
        let total: usize = shape.iter().product();
        let cols = (*shape.last().unwrap()).max(1);
        let mut data = Vec::with_capacity(total);
        while data.len() < total {
            let (n, row) = lines.next()?;
            let vals: Vec<f64> = row
                .split_whitespace()
                .map(|v| number(v, row))
                .collect::<CliResult<_>>()?;
            if vals.len() != cols {
                return Err(corrupt(format!(
                    "line {n}: expected {cols} values, found {}",
                    vals.len()
                )));
            }
            data.extend(vals);
        }
        out.push((parts[1].to_string(), Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn decode(text: &str) -> CliResult<ModelFile> {
    let body_end = text
        .rfind("sha256 ")
        .filter(|&i| i == 0 || text.as_bytes()[i - 1] == b'\n')
        .ok_or_else(|| corrupt("missing checksum line"))?;
    let (body, tail) = text.split_at(body_end);
    let stored_sum = tail.trim_end().strip_prefix("sha256 ").unwrap_or_default();
    if stored_sum != digest(body) {
        return Err(corrupt("checksum mismatch"));
    }
    let mut lines = Lines {
        inner: body.lines().enumerate().peekable(),
    };
    let header = lines
        .field(MAGIC)
        .map_err(|_| corrupt("not a metafbp model file"))?;
    if header != [VERSION.to_string()] {
        return Err(corrupt(format!("unsupported format version {header:?}")));
    }
    let kind = lines.field("kind")?;
    let kind = kind.first().copied().ok_or_else(|| corrupt("empty kind"))?;
    let ext = lines.field("extractor")?;
    let ext_line = ext.join(" ");
    let pass_through = match ext.as_slice() {
        ["pass-through", dim] => Some(number::<usize>(dim, &ext_line)?),
        ["mlp", _, _, _] => None,
        _ => return Err(corrupt(format!("bad extractor line `{ext_line}`"))),
    };
    let high_order = if kind == "extractor" {
        None
    } else {
        let lambda = lines.field("lambda")?;
        let variant = lines.field("variant")?;
        let cond = lines.field("conditioning")?;
        Some(HighOrderConfig {
            lambda: number(one(&lambda, "lambda")?, "lambda")?,
            variant: from_kebab::<Variant>(one(&variant, "variant")?, "variant")?,
            conditioning: from_kebab::<Conditioning>(one(&cond, "conditioning")?, "conditioning")?,
        })
    };
    let shots = lines.field("train_shots")?;
    let train_shots = match shots.as_slice() {
        ["none"] => None,
        [s, q] => Some(Shots {
            support: number(s, "train_shots")?,
            query: number(q, "train_shots")?,
        }),
        _ => return Err(corrupt("bad train_shots line")),
    };
    let segments = read_segments(&mut lines)?;
    let config = embedded_config(body)
        .map_err(|e| corrupt(e.to_string()))?
        .ok_or_else(|| corrupt("missing embedded config"))?;

    let take = |prefix: &str| {
        segments
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .cloned()
            .collect::<Vec<_>>()
    };
    let extractor = match pass_through {
        Some(dim) => Extractor::pass_through(dim),
        None => {
            let [_, input, feature, hidden] = ext.as_slice() else {
                unreachable!()
            };
            let hidden = if *hidden == "-" {
                vec![]
            } else {
                hidden
                    .split(',')
                    .map(|h| number(h, &ext_line))
                    .collect::<CliResult<_>>()?
            };
            let spec = ExtractorSpec {
                input_dim: number(input, &ext_line)?,
                feature_dim: number(feature, &ext_line)?,
                hidden,
            };
            Extractor::from_params(spec, ParamVector::new(take("extractor."))?).map_err(corrupt)?
        }
    };
    let stored = match high_order {
        None => Stored::Extractor(extractor),
        Some(high_order) => {
            let method: Method = from_kebab(kind, "kind")?;
            let predictor = PredictorParams::from_params(ParamVector::new(take("predictor."))?)
                .map_err(corrupt)?;
            let gen = take("generator.");
            let generator = if gen.is_empty() {
                None
            } else {
                Some(GeneratorParams::from_params(ParamVector::new(gen)?).map_err(corrupt)?)
            };
            if (method == Method::Metafbp) != generator.is_some() {
                return Err(corrupt(format!(
                    "kind `{kind}` does not match the stored generator"
                )));
            }
            Stored::Bundle(ModelBundle {
                method,
                extractor,
                predictor,
                generator,
                high_order,
            })
        }
    };
    Ok(ModelFile {
        stored,
        train_shots,
        config,
    })
}

pub fn read(path: &std::path::Path) -> CliResult<ModelFile> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    decode(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use metafbp::models::ExtractorParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bundle() -> ModelBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = ExtractorSpec {
            input_dim: 5,
            feature_dim: 4,
            hidden: vec![6],
        };
        ModelBundle {
            method: Method::Metafbp,
            extractor: ExtractorParams::init(spec, 3, &mut rng).unwrap().freeze(),
            predictor: PredictorParams::init(4, &mut rng).unwrap(),
            generator: Some(GeneratorParams::init(4, 7, &mut rng).unwrap()),
            high_order: HighOrderConfig {
                lambda: 0.1 + 0.2,
                ..HighOrderConfig::default()
            },
        }
    }

    fn file(stored: Stored) -> ModelFile {
        ModelFile {
            stored,
            train_shots: Some(Shots {
                support: 1,
                query: 15,
            }),
            config: "[meta]\nk_steps = 3\n".into(),
        }
    }

    #[test]
    fn bundle_round_trips_bit_exactly() {
        let f = file(Stored::Bundle(bundle()));
        let text = encode(&f);
        let back = decode(&text).unwrap();
        assert_eq!(back, f);
        let Stored::Bundle(b) = &back.stored else {
            panic!()
        };
        assert_eq!(b.content_hash(), bundle().content_hash());
        assert_eq!(encode(&back), text);
    }

    #[test]
    fn extractors_round_trip() {
        for e in [bundle().extractor, Extractor::pass_through(9)] {
            let f = file(Stored::Extractor(e));
            assert_eq!(decode(&encode(&f)).unwrap(), f);
        }
    }

    #[test]
    fn baselines_round_trip_without_generator() {
        let mut b = bundle();
        b.method = Method::Maml;
        b.generator = None;
        let f = file(Stored::Bundle(b));
        assert_eq!(decode(&encode(&f)).unwrap(), f);
    }

    #[test]
    fn any_edit_is_detected() {
        let text = encode(&file(Stored::Bundle(bundle())));
        let pos = text.find("segment predictor.weight").unwrap() + 40;
        let mut bytes = text.into_bytes();
        bytes[pos] = if bytes[pos] == b'1' { b'2' } else { b'1' };
        let err = decode(&String::from_utf8(bytes).unwrap()).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn truncation_and_garbage_are_errors() {
        let text = encode(&file(Stored::Bundle(bundle())));
        assert!(decode(&text[..text.len() / 2]).is_err());
        assert!(decode("hello\nsha256 00\n").is_err());
    }
}
