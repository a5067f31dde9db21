//! Planted-preference benchmark: shared commonality plus per-user deviation.
//!
//! Each image has a latent `z ~ N(0, I)`. User `m` scores it with
//! `s_m(z) = (w_bar + u_m) . z`, which is rescaled onto the rating range,
//! perturbed with Gaussian noise and rounded. Observed features are a fixed
//! invertible linear mix of `z`.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::episodes::{MetaTask, RatingDataset, RatingRecord};
use crate::error::{Error, Result};
use crate::eval::{pearson, Correlation};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_images: usize,
    pub input_dim: usize,
    /// Leading latent coordinates that carry preference; the rest are nuisance.
    pub feature_dim_latent: usize,
    /// Norm of the common weight vector.
    pub commonality_scale: f64,
    /// Per-coordinate std of user deviations, relative to `commonality_scale`.
    pub personality: f64,
    /// Std of the rating noise, in rating units.
    pub noise: f64,
    pub categories: u8,
    pub seed: u64,
    pub missing_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_users: 30,
            num_images: 600,
            input_dim: 16,
            feature_dim_latent: 8,
            commonality_scale: 1.0,
            personality: 0.3,
            noise: 0.3,
            categories: 5,
            seed: 0,
            missing_rate: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, why: &str| Err(Error::Validation(format!("synth.{field}: {why}")));
        if self.num_users == 0 {
            return fail("num_users", "must be at least 1");
        }
        if self.num_images == 0 {
            return fail("num_images", "must be at least 1");
        }
        if self.input_dim == 0 {
            return fail("input_dim", "must be at least 1");
        }
        if self.feature_dim_latent == 0 || self.feature_dim_latent > self.input_dim {
            return fail("feature_dim_latent", "must lie in 1..=input_dim");
        }
        if !(self.commonality_scale >= 0.0) || !self.commonality_scale.is_finite() {
            return fail("commonality_scale", "must be >= 0");
        }
        if !(self.personality >= 0.0) || !self.personality.is_finite() {
            return fail("personality", "must be >= 0");
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return fail("noise", "must be >= 0");
        }
        if self.categories < 2 {
            return fail("categories", "must be at least 2");
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return fail("missing_rate", "must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Planted parameters; kept out of every training path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub common_weight: Vec<f64>,
    pub user_ids: Vec<String>,
    pub user_deviations: Vec<Vec<f64>>,
    pub image_ids: Vec<String>,
    /// Latent vector per image, same order as `image_ids`.
    pub latents: Vec<Vec<f64>>,
    /// Rating-unit rescale `a * s + b`.
    pub rescale: (f64, f64),
    /// Observed features are `A z`, `A` stored row-major.
    pub mixing: Vec<Vec<f64>>,
    pub mixing_condition_number: f64,
}

impl GroundTruth {
    /// `s_m(z)` for every image id, or `None` for an unknown user.
    fn user_weight(&self, user: &str) -> Option<Vec<f64>> {
        let m = self.user_ids.iter().position(|u| u == user)?;
        Some(
            self.common_weight
                .iter()
                .zip(&self.user_deviations[m])
                .map(|(a, b)| a + b)
                .collect(),
        )
    }

    /// Continuous preference score of `user` for `image`.
    pub fn score(&self, user: &str, image: &str) -> Result<f64> {
        let w = self
            .user_weight(user)
            .ok_or_else(|| Error::Validation(format!("unknown user `{user}` in ground truth")))?;
        let i = self
            .image_ids
            .iter()
            .position(|id| id == image)
            .ok_or_else(|| Error::Validation(format!("unknown image `{image}` in ground truth")))?;
        Ok(dot(&w, &self.latents[i]))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const COMMON_STREAM: u64 = 0;
const LATENT_STREAM: u64 = 1;
const USER_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;
const MASK_STREAM: u64 = 4;
const MIX_STREAM: u64 = 5;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn normals<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Random orthogonal matrix by Gram-Schmidt on Gaussian rows.
fn random_orthogonal<R: Rng>(rng: &mut R, n: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v = normals(rng, n);
        for r in &rows {
            let p = dot(&v, r);
            v.iter_mut().zip(r).for_each(|(x, y)| *x -= p * y);
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            rows.push(v);
        }
    }
    rows
}

pub fn generate(cfg: &SynthConfig) -> Result<(RatingDataset, GroundTruth)> {
    cfg.validate()?;
    let n = cfg.input_dim;
    let l = cfg.feature_dim_latent;

    let mut rng = stream(cfg.seed, COMMON_STREAM);
    let mut common = normals(&mut rng, l);
    let norm = dot(&common, &common).sqrt();
    common
        .iter_mut()
        .for_each(|w| *w *= cfg.commonality_scale / norm);
    common.resize(n, 0.0);

    // A = Q diag(s) with s log-uniform in [0.5, 2]; its condition number is max(s) / min(s).
    let mut rng = stream(cfg.seed, MIX_STREAM);
    let q = random_orthogonal(&mut rng, n);
    let s: Vec<f64> = (0..n)
        .map(|_| 2f64.powf(rng.random_range(-1.0..=1.0)))
        .collect();
    let mixing: Vec<Vec<f64>> = q
        .iter()
        .map(|row| row.iter().zip(&s).map(|(a, b)| a * b).collect())
        .collect();
    let cond =
        s.iter().cloned().fold(f64::MIN, f64::max) / s.iter().cloned().fold(f64::MAX, f64::min);

    let mut rng = stream(cfg.seed, LATENT_STREAM);
    let latents: Vec<Vec<f64>> = (0..cfg.num_images).map(|_| normals(&mut rng, n)).collect();
    let features: Vec<f64> = latents
        .iter()
        .flat_map(|z| mixing.iter().map(move |row| dot(row, z)))
        .collect();

    let mut rng = stream(cfg.seed, USER_STREAM);
    let dev_std = cfg.personality * cfg.commonality_scale;
    let deviations: Vec<Vec<f64>> = (0..cfg.num_users)
        .map(|_| {
            let mut u: Vec<f64> = normals(&mut rng, l)
                .into_iter()
                .map(|x| x * dev_std)
                .collect();
            u.resize(n, 0.0);
            u
        })
        .collect();

    // Map the range of the common score onto [1, C].
    let common_scores: Vec<f64> = latents.iter().map(|z| dot(&common, z)).collect();
    let lo = common_scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = common_scores
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let c = cfg.categories as f64;
    let (a, b) = if hi > lo {
        let a = (c - 1.0) / (hi - lo);
        (a, 1.0 - a * lo)
    } else {
        (0.0, (1.0 + c) / 2.0)
    };

    let width = |count: usize| count.saturating_sub(1).to_string().len().max(3);
    let (iw, uw) = (width(cfg.num_images), width(cfg.num_users));
    let image_ids: Vec<String> = (0..cfg.num_images)
        .map(|i| format!("img{i:0iw$}"))
        .collect();
    let user_ids: Vec<String> = (0..cfg.num_users)
        .map(|u| format!("user{u:0uw$}"))
        .collect();

    let mut noise_rng = stream(cfg.seed, NOISE_STREAM);
    let mut mask_rng = stream(cfg.seed, MASK_STREAM);
    let mut records = Vec::with_capacity(cfg.num_users * cfg.num_images);
    for (m, dev) in deviations.iter().enumerate() {
        let w: Vec<f64> = common.iter().zip(dev).map(|(x, y)| x + y).collect();
        for (i, z) in latents.iter().enumerate() {
            // Draw both regardless of the outcome so streams stay aligned across configs.
            let eps: f64 = noise_rng.sample::<f64, _>(StandardNormal) * cfg.noise;
            let skip = mask_rng.random::<f64>() < cfg.missing_rate;
            if skip {
                continue;
            }
            let score = (a * dot(&w, z) + b + eps).round().clamp(1.0, c) as u8;
            records.push(RatingRecord {
                user: user_ids[m].clone(),
                image: image_ids[i].clone(),
                score,
            });
        }
    }
    let dataset = RatingDataset::new(
        image_ids.clone(),
        Tensor::new(vec![cfg.num_images, n], features)?,
        &records,
        cfg.categories,
    )?;
    let truth = GroundTruth {
        common_weight: common,
        user_ids,
        user_deviations: deviations,
        image_ids,
        latents,
        rescale: (a, b),
        mixing,
        mixing_condition_number: cond,
    };
    Ok((dataset, truth))
}

/// Correlation between the planted continuous scores and the query labels.
pub fn oracle_best_pc(
    task: &MetaTask,
    dataset: &RatingDataset,
    truth: &GroundTruth,
) -> Result<Correlation> {
    let user = &dataset.user_ids()[task.user];
    let w = truth
        .user_weight(user)
        .ok_or_else(|| Error::Validation(format!("unknown user `{user}` in ground truth")))?;
    let index: HashMap<&str, usize> = truth
        .image_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut scores = Vec::with_capacity(task.query.len());
    let mut labels = Vec::with_capacity(task.query.len());
    for it in &task.query {
        let id = dataset.image_ids()[it.image].as_str();
        let &i = index
            .get(id)
            .ok_or_else(|| Error::Validation(format!("unknown image `{id}` in ground truth")))?;
        scores.push(dot(&w, &truth.latents[i]));
        labels.push(it.score as f64);
    }
    pearson(&scores, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{sample_task, Item, Shots};

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            num_users: 12,
            num_images: 200,
            seed,
            ..SynthConfig::default()
        }
    }

    fn per_image_variance(ds: &RatingDataset) -> Vec<f64> {
        ds.image_scores()
            .iter()
            .filter(|s| s.len() >= 2)
            .map(|s| {
                let n = s.len() as f64;
                let m = s.iter().map(|&v| v as f64).sum::<f64>() / n;
                s.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / (n - 1.0)
            })
            .collect()
    }

    #[test]
    fn zero_personality_zero_noise_is_unanimous() {
        let cfg = SynthConfig {
            personality: 0.0,
            noise: 0.0,
            ..small(1)
        };
        let (ds, _) = generate(&cfg).unwrap();
        assert!(per_image_variance(&ds).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn noise_variance_matches_generative_model() {
        // Rounding a Gaussian with std sigma adds roughly 1/12 (Sheppard); a wide
        // rating range keeps mid-range images away from clamping.
        let sigma = 1.0;
        let cfg = SynthConfig {
            num_users: 80,
            num_images: 300,
            personality: 0.0,
            noise: sigma,
            categories: 21,
            missing_rate: 0.0,
            ..small(2)
        };
        let (ds, truth) = generate(&cfg).unwrap();
        let (a, b) = truth.rescale;
        let scores = ds.image_scores();
        let mut vars = Vec::new();
        for (i, z) in truth.latents.iter().enumerate() {
            let t = a * dot(&truth.common_weight, z) + b;
            if t < 6.0 || t > 16.0 {
                continue;
            }
            let s = &scores[i];
            let n = s.len() as f64;
            let m = s.iter().map(|&v| v as f64).sum::<f64>() / n;
            vars.push(s.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / (n - 1.0));
            // Unimodal histogram: counts rise to a single peak then fall.
            let mut hist = vec![0usize; 22];
            s.iter().for_each(|&v| hist[v as usize] += 1);
            let peak = (0..22)
                .max_by_key(|&k| (hist[k], std::cmp::Reverse(k)))
                .unwrap();
            let below = hist[..=peak].windows(2).filter(|w| w[0] > w[1]).count();
            let above = hist[peak..].windows(2).filter(|w| w[0] < w[1]).count();
            assert!(below + above <= 3, "histogram far from unimodal: {hist:?}");
        }
        assert!(vars.len() > 50);
        let mean = vars.iter().sum::<f64>() / vars.len() as f64;
        let expected = sigma * sigma + 1.0 / 12.0;
        assert!(
            (mean - expected).abs() / expected < 0.2,
            "mean {mean} vs {expected}"
        );
        assert!((mean - sigma * sigma).abs() / (sigma * sigma) < 0.2);
    }

    #[test]
    fn same_seed_same_data() {
        let (a, ta) = generate(&small(3)).unwrap();
        let (b, tb) = generate(&small(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = generate(&small(4)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn ratings_in_range_and_complete_without_missing() {
        let cfg = SynthConfig {
            missing_rate: 0.0,
            ..small(5)
        };
        let (ds, _) = generate(&cfg).unwrap();
        assert_eq!(ds.num_ratings(), cfg.num_users * cfg.num_images);
        assert!(ds
            .records()
            .iter()
            .all(|r| (1..=cfg.categories).contains(&r.score)));
    }

    #[test]
    fn missing_rate_thins_ratings() {
        let (ds, _) = generate(&small(6)).unwrap();
        let frac = ds.num_ratings() as f64 / (12.0 * 200.0);
        assert!((frac - 0.9).abs() < 0.03, "{frac}");
    }

    #[test]
    fn variance_grows_with_personality() {
        let mean_var = |rho: f64| {
            let cfg = SynthConfig {
                personality: rho,
                missing_rate: 0.0,
                num_users: 40,
                ..small(7)
            };
            let v = per_image_variance(&generate(&cfg).unwrap().0);
            v.iter().sum::<f64>() / v.len() as f64
        };
        let v = [mean_var(0.0), mean_var(0.3), mean_var(0.8)];
        assert!(v[0] <= v[1] && v[1] <= v[2], "{v:?}");
    }

    #[test]
    fn mixing_is_well_conditioned_and_invertible() {
        let (ds, truth) = generate(&small(8)).unwrap();
        assert!(truth.mixing_condition_number.is_finite());
        assert!(truth.mixing_condition_number <= 4.0 + 1e-12);
        // A^T A is diagonal with entries s^2 for A = Q diag(s).
        let n = truth.mixing.len();
        for i in 0..n {
            for j in 0..n {
                let v: f64 = (0..n)
                    .map(|k| truth.mixing[k][i] * truth.mixing[k][j])
                    .sum();
                if i != j {
                    assert!(v.abs() < 1e-10);
                } else {
                    assert!((0.25 - 1e-12..=4.0 + 1e-12).contains(&v));
                }
            }
        }
        let x = ds.features().row(0);
        let recomputed: Vec<f64> = truth
            .mixing
            .iter()
            .map(|r| dot(r, &truth.latents[0]))
            .collect();
        assert_eq!(x, recomputed.as_slice());
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let err = generate(&SynthConfig {
            missing_rate: 1.0,
            ..small(0)
        })
        .unwrap_err();
        assert!(err.to_string().contains("missing_rate"));
        assert!(generate(&SynthConfig {
            categories: 1,
            ..small(0)
        })
        .is_err());
        assert!(generate(&SynthConfig {
            personality: -0.1,
            ..small(0)
        })
        .is_err());
        assert!(generate(&SynthConfig {
            feature_dim_latent: 17,
            ..small(0)
        })
        .is_err());
    }

    #[test]
    fn oracle_is_perfect_without_noise_or_collisions() {
        // Noise-free labels equal the rescaled score up to rounding; keep the
        // images where rounding is negligible so labels are affine in the score.
        let cfg = SynthConfig {
            noise: 0.0,
            missing_rate: 0.0,
            ..small(9)
        };
        let (ds, truth) = generate(&cfg).unwrap();
        let user = 0;
        let (a, b) = truth.rescale;
        let w = truth.user_weight(&ds.user_ids()[user]).unwrap();
        let query: Vec<Item> = ds
            .user_ratings(user)
            .iter()
            .filter(|&&(i, s)| {
                let t = a * dot(&w, &truth.latents[i]) + b;
                (t - s as f64).abs() < 0.05
            })
            .map(|&(image, score)| Item { image, score })
            .collect();
        let labels: Vec<f64> = query.iter().map(|q| q.score as f64).collect();
        assert!(labels.iter().any(|&l| l != labels[0]));
        let task = MetaTask {
            user,
            support: vec![],
            query,
            trace: vec![],
        };
        let pc = oracle_best_pc(&task, &ds, &truth).unwrap();
        assert!(pc.value > 0.99, "{pc:?}");
    }

    #[test]
    fn oracle_flags_constant_labels() {
        let (ds, truth) = generate(&small(10)).unwrap();
        let imgs: Vec<Item> = ds
            .user_ratings(0)
            .iter()
            .filter(|r| r.1 == 3)
            .take(4)
            .map(|&(image, score)| Item { image, score })
            .collect();
        let task = MetaTask {
            user: 0,
            support: vec![],
            query: imgs,
            trace: vec![],
        };
        let pc = oracle_best_pc(&task, &ds, &truth).unwrap();
        assert!(pc.degenerate);
        assert_eq!(pc.value, 0.0);
    }

    #[test]
    fn oracle_beats_common_direction_on_sampled_tasks() {
        let (ds, truth) = generate(&small(11)).unwrap();
        let (ds, _) = ds.exclude_incomplete_users().unwrap();
        let ds =
            crate::episodes::remap_scores(&ds, &crate::episodes::ScoreMapping::five_to_three())
                .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let shots = Shots {
            support: 5,
            query: 15,
        };
        let mut sum = 0.0;
        for t in 0..40 {
            let task = sample_task(&ds, t % ds.num_users(), shots, &mut rng).unwrap();
            sum += oracle_best_pc(&task, &ds, &truth).unwrap().value;
        }
        assert!(sum / 40.0 > 0.7, "{}", sum / 40.0);
    }
}
