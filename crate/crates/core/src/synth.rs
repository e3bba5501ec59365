//! Seeded synthetic benchmark: random unit class means, noisy unit-norm
//! samples, prototypes that are (optionally perturbed) class means, and a
//! target domain rotated away from the prototype space in a random 2-plane.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datamodel::EmbeddingCache;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, normalized, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub d: usize,
    /// Total number of classes, ID and OOD alike.
    pub n_classes: usize,
    /// Training samples per class.
    pub per_class: usize,
    /// Test samples per class; defaults to `per_class`.
    pub test_per_class: Option<usize>,
    /// Per-coordinate standard deviation of within-class noise.
    pub noise_sigma: f64,
    /// Per-coordinate noise added to class means to form the prototypes.
    pub proto_noise: f64,
    /// Rotation angle (radians) of the sample domain relative to the prototypes.
    pub shift_angle: f64,
    /// Extra per-coordinate noise on test samples only.
    pub test_extra_noise: f64,
    /// Norm of a constant offset added to every sample before normalization.
    pub domain_bias: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            d: 64,
            n_classes: 10,
            per_class: 50,
            test_per_class: None,
            noise_sigma: 0.05,
            proto_noise: 0.0,
            shift_angle: 0.0,
            test_extra_noise: 0.0,
            domain_bias: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid("synth config", m));
        if self.d < 2 {
            return bad(format!("d = {} must be at least 2", self.d));
        }
        if self.n_classes < 1 || self.per_class < 1 || self.test_per_class == Some(0) {
            return bad("class and sample counts must be positive".into());
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("proto_noise", self.proto_noise),
            ("test_extra_noise", self.test_extra_noise),
            ("domain_bias", self.domain_bias),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be finite and >= 0"));
            }
        }
        if !(0.0..std::f64::consts::PI).contains(&self.shift_angle) {
            return bad(format!(
                "shift_angle = {} must lie in [0, pi)",
                self.shift_angle
            ));
        }
        Ok(())
    }
}

/// Rotation by `angle` inside the plane spanned by orthonormal `a`, `b`.
#[derive(Clone, Debug)]
pub struct PlaneRotation {
    a: Vec<f64>,
    b: Vec<f64>,
    cos: f64,
    sin: f64,
}

impl PlaneRotation {
    /// Random plane drawn from `rng`.
    pub fn random(d: usize, angle: f64, rng: &mut ChaCha8Rng) -> Self {
        let a = random_unit(d, rng);
        let b = loop {
            let mut v = gaussian(d, 1.0, rng);
            let c = dot(&a, &v);
            axpy(-c, &a, &mut v);
            if let Some((u, n)) = normalized(&v) {
                if n > 1e-6 {
                    break u;
                }
            }
        };
        PlaneRotation {
            a,
            b,
            cos: angle.cos(),
            sin: angle.sin(),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let xa = dot(&self.a, x);
        let xb = dot(&self.b, x);
        let mut out = x.to_vec();
        // new in-plane coordinates minus the old ones
        let na = self.cos * xa - self.sin * xb - xa;
        let nb = self.sin * xa + self.cos * xb - xb;
        axpy(na, &self.a, &mut out);
        axpy(nb, &self.b, &mut out);
        out
    }

    pub fn plane(&self) -> (&[f64], &[f64]) {
        (&self.a, &self.b)
    }
}

fn gaussian(d: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut *rng);
            sigma * z
        })
        .collect()
}

fn random_unit(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        if let Some((u, _)) = normalized(&gaussian(d, 1.0, rng)) {
            return u;
        }
    }
}

/// Generated train, test and prototype caches.
#[derive(Clone, Debug)]
pub struct SynthData {
    pub train: EmbeddingCache,
    pub test: EmbeddingCache,
    pub prototypes: EmbeddingCache,
}

fn sample_cache(
    means: &[Vec<f64>],
    per_class: usize,
    sigma: f64,
    rotation: &PlaneRotation,
    bias: &[f64],
    names: &[String],
    rng: &mut ChaCha8Rng,
    source: &str,
) -> Result<EmbeddingCache> {
    let d = bias.len();
    let mut rows = Vec::with_capacity(means.len() * per_class);
    let mut labels = Vec::with_capacity(means.len() * per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            let noise = gaussian(d, sigma, rng);
            let mut v = rotation.apply(mean);
            axpy(1.0, &noise, &mut v);
            axpy(1.0, bias, &mut v);
            let row = match normalized(&v) {
                Some((u, _)) => u,
                None => rotation.apply(mean),
            };
            rows.push(row);
            labels.push(c as u32);
        }
    }
    Ok(
        EmbeddingCache::from_rows(&Matrix::from_rows(&rows)?, labels, names.to_vec())?
            .with_source(source)
            .with_normalized(true),
    )
}

/// Deterministic in `config.seed`.
pub fn generate(config: &SynthConfig) -> Result<SynthData> {
    config.validate()?;
    let d = config.d;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let means: Vec<Vec<f64>> = (0..config.n_classes)
        .map(|_| random_unit(d, &mut rng))
        .collect();
    let protos: Vec<Vec<f64>> = means
        .iter()
        .map(|m| {
            let mut v = m.clone();
            axpy(1.0, &gaussian(d, config.proto_noise, &mut rng), &mut v);
            normalized(&v).map_or_else(|| m.clone(), |(u, _)| u)
        })
        .collect();
    let rotation = PlaneRotation::random(d, config.shift_angle, &mut rng);
    let bias: Vec<f64> = random_unit(d, &mut rng)
        .into_iter()
        .map(|v| v * config.domain_bias)
        .collect();
    let names: Vec<String> = (0..config.n_classes)
        .map(|c| format!("class_{c:03}"))
        .collect();

    let train = sample_cache(
        &means,
        config.per_class,
        config.noise_sigma,
        &rotation,
        &bias,
        &names,
        &mut rng,
        "synth:train",
    )?;
    let test_sigma = (config.noise_sigma.powi(2) + config.test_extra_noise.powi(2)).sqrt();
    let test = sample_cache(
        &means,
        config.test_per_class.unwrap_or(config.per_class),
        test_sigma,
        &rotation,
        &bias,
        &names,
        &mut rng,
        "synth:test",
    )?;
    let prototypes = EmbeddingCache::from_rows(
        &Matrix::from_rows(&protos)?,
        (0..config.n_classes as u32).collect(),
        names,
    )?
    .with_source("synth:prototypes")
    .with_normalized(true);
    Ok(SynthData {
        train,
        test,
        prototypes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::norm;
    use proptest::prelude::*;

    #[test]
    fn zero_noise_samples_equal_means() {
        let cfg = SynthConfig {
            d: 8,
            n_classes: 3,
            per_class: 4,
            noise_sigma: 0.0,
            ..SynthConfig::default()
        };
        let data = generate(&cfg).unwrap();
        for i in 0..data.train.n() {
            let l = data.train.labels()[i] as usize;
            assert_eq!(data.train.row(i), data.prototypes.row(l));
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let cfg = SynthConfig {
            shift_angle: 0.4,
            proto_noise: 0.02,
            ..SynthConfig::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_eq!(a.prototypes, b.prototypes);
        let c = generate(&SynthConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn shapes_follow_config() {
        let cfg = SynthConfig {
            d: 16,
            n_classes: 5,
            per_class: 7,
            test_per_class: Some(3),
            ..SynthConfig::default()
        };
        let data = generate(&cfg).unwrap();
        assert_eq!((data.train.n(), data.train.d()), (35, 16));
        assert_eq!(data.test.n(), 15);
        assert_eq!(data.prototypes.n(), 5);
        assert_eq!(data.prototypes.labels(), &[0, 1, 2, 3, 4]);
    }

    #[test]
    fn rows_are_unit_norm() {
        let cfg = SynthConfig {
            noise_sigma: 0.3,
            shift_angle: 1.0,
            domain_bias: 0.5,
            proto_noise: 0.1,
            ..SynthConfig::default()
        };
        let data = generate(&cfg).unwrap();
        for cache in [&data.train, &data.test, &data.prototypes] {
            let f = cache.features();
            for r in f.iter_rows() {
                assert!((norm(r) - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn invalid_configs() {
        let base = SynthConfig::default();
        for bad in [
            SynthConfig {
                d: 1,
                ..base.clone()
            },
            SynthConfig {
                noise_sigma: -0.1,
                ..base.clone()
            },
            SynthConfig {
                shift_angle: std::f64::consts::PI,
                ..base.clone()
            },
            SynthConfig {
                n_classes: 0,
                ..base.clone()
            },
        ] {
            assert!(generate(&bad).is_err());
        }
    }

    proptest! {
        #[test]
        fn rotation_is_an_isometry(
            seed in any::<u64>(),
            angle in 0.0f64..3.1,
            x in prop::collection::vec(-1.0f64..1.0, 6),
            y in prop::collection::vec(-1.0f64..1.0, 6),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = PlaneRotation::random(6, angle, &mut rng);
            let (rx, ry) = (r.apply(&x), r.apply(&y));
            prop_assert!((norm(&rx) - norm(&x)).abs() < 1e-12);
            prop_assert!((dot(&rx, &ry) - dot(&x, &y)).abs() < 1e-12);
            // components orthogonal to the plane are untouched
            let (a, b) = r.plane();
            let strip = |v: &[f64]| {
                let mut out = v.to_vec();
                axpy(-dot(a, v), a, &mut out);
                axpy(-dot(b, v), b, &mut out);
                out
            };
            for (u, v) in strip(&rx).iter().zip(strip(&x)) {
                prop_assert!((u - v).abs() < 1e-12);
            }
        }
    }
}
