use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Ordered collection of named tensors that can be viewed as one flat vector.
///
/// Segment names and shapes are fixed once constructed; every transformation
/// returns a fresh vector with the same layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    segments: Vec<(String, Tensor)>,
}

impl ParamVector {
    pub fn new(segments: Vec<(String, Tensor)>) -> Result<Self> {
        for (i, (name, _)) in segments.iter().enumerate() {
            if segments[..i].iter().any(|(n, _)| n == name) {
                return Err(Error::Validation(format!(
                    "duplicate parameter segment `{name}`"
                )));
            }
        }
        Ok(Self { segments })
    }

    pub fn segments(&self) -> &[(String, Tensor)] {
        &self.segments
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.segments
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Looks up a segment, failing with [`Error::UnknownParameter`].
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    /// Total number of scalar values across all segments.
    pub fn num_values(&self) -> usize {
        self.segments.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        self.segments
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        for (_, t) in &self.segments {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Rebuilds a vector with this layout from flat values.
    pub fn unflatten(&self, values: &[f64]) -> Result<Self> {
        if values.len() != self.num_values() {
            return Err(Error::shape(
                "unflatten",
                &[self.num_values()],
                &[values.len()],
            ));
        }
        let mut offset = 0;
        let mut segments = Vec::with_capacity(self.segments.len());
        for (name, t) in &self.segments {
            let n = t.len();
            let seg = Tensor::new(t.shape().to_vec(), values[offset..offset + n].to_vec())?;
            segments.push((name.clone(), seg));
            offset += n;
        }
        Ok(Self { segments })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            segments: self
                .segments
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.segments.len() == other.segments.len()
            && self
                .segments
                .iter()
                .zip(&other.segments)
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }

    /// `self + scale * other`, returned as a fresh vector.
    pub fn axpy(&self, scale: f64, other: &Self) -> Result<Self> {
        if !self.same_layout(other) {
            return Err(Error::Validation(format!(
                "parameter layouts differ: {:?} vs {:?}",
                self.layout(),
                other.layout()
            )));
        }
        let segments = self
            .segments
            .iter()
            .zip(&other.segments)
            .map(|((n, a), (_, b))| {
                let t = a.zip_with(b, "axpy", |x, y| x + scale * y)?;
                Ok((n.clone(), t))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { segments })
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            segments: self
                .segments
                .iter()
                .map(|(n, t)| (n.clone(), t.map(|v| v * factor)))
                .collect(),
        }
    }

    /// Keeps only segments whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> Self {
        Self {
            segments: self
                .segments
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .cloned()
                .collect(),
        }
    }

    /// Concatenates two vectors with disjoint segment names.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        let mut segments = self.segments.clone();
        segments.extend(other.segments.iter().cloned());
        Self::new(segments)
    }

    pub fn l2_norm(&self) -> f64 {
        self.segments
            .iter()
            .flat_map(|(_, t)| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.segments
            .iter()
            .flat_map(|(_, t)| t.data())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.segments {
            h.update(name.as_bytes());
            h.update([0u8]);
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Plain gradient-descent step `params - lr * grads`.
pub fn sgd_step(params: &ParamVector, grads: &ParamVector, lr: f64) -> Result<ParamVector> {
    params.axpy(-lr, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(values: &[(&str, Vec<usize>, Vec<f64>)]) -> ParamVector {
        ParamVector::new(
            values
                .iter()
                .map(|(n, s, d)| (n.to_string(), Tensor::new(s.clone(), d.clone()).unwrap()))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn sgd_zero_lr_is_identity() {
        let p = pv(&[("w", vec![2], vec![1.0, -2.0])]);
        let g = pv(&[("w", vec![2], vec![3.0, 4.0])]);
        assert_eq!(sgd_step(&p, &g, 0.0).unwrap(), p);
    }

    #[test]
    fn sgd_single_value() {
        let p = pv(&[("w", vec![1], vec![1.0])]);
        let g = pv(&[("w", vec![1], vec![2.0])]);
        let next = sgd_step(&p, &g, 0.5).unwrap();
        assert_eq!(next.flatten(), vec![0.0]);
    }

    #[test]
    fn sgd_rejects_layout_mismatch() {
        let p = pv(&[("w", vec![2], vec![1.0, 2.0])]);
        let g = pv(&[("v", vec![2], vec![1.0, 2.0])]);
        assert!(matches!(sgd_step(&p, &g, 0.1), Err(Error::Validation(_))));
    }

    #[test]
    fn sgd_leaves_inputs_untouched() {
        let p = pv(&[
            ("w", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]),
            ("b", vec![2], vec![0.5, 0.5]),
        ]);
        let g = p.scale(0.3);
        let (hp, hg) = (p.content_hash(), g.content_hash());
        let _ = sgd_step(&p, &g, 0.7).unwrap();
        assert_eq!(hp, p.content_hash());
        assert_eq!(hg, g.content_hash());
    }

    #[test]
    fn duplicate_names_rejected() {
        let t = Tensor::scalar(1.0);
        assert!(ParamVector::new(vec![("a".into(), t.clone()), ("a".into(), t)]).is_err());
    }

    #[test]
    fn hash_tracks_bit_changes() {
        let p = pv(&[("w", vec![1], vec![1.0])]);
        let q = pv(&[("w", vec![1], vec![1.0 + f64::EPSILON])]);
        assert_ne!(p.content_hash(), q.content_hash());
    }

    proptest! {
        #[test]
        fn flatten_unflatten_roundtrip(
            shapes in prop::collection::vec((1usize..4, 1usize..4, any::<bool>()), 1..5),
            seed in any::<u64>(),
        ) {
            let mut k = seed;
            let segments = shapes
                .iter()
                .enumerate()
                .map(|(i, &(r, c, mat))| {
                    let shape = if mat { vec![r, c] } else { vec![r] };
                    let n: usize = shape.iter().product();
                    let data = (0..n)
                        .map(|_| {
                            k = k.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                            (k >> 11) as f64 / (1u64 << 53) as f64 - 0.5
                        })
                        .collect();
                    (format!("s{i}"), Tensor::new(shape, data).unwrap())
                })
                .collect();
            let p = ParamVector::new(segments).unwrap();
            let back = p.unflatten(&p.flatten()).unwrap();
            prop_assert_eq!(back.content_hash(), p.content_hash());
        }
    }
}
