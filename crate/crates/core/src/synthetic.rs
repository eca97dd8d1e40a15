//! Two-domain Gaussian benchmark.
//!
//! Source classes are isotropic blobs. The target domain is the image of the
//! source space under a fixed affine map (rotation in consecutive coordinate
//! planes plus a translation); some target classes are mapped copies of
//! source classes, the rest are fresh blobs placed directly in the mapped
//! space. Target instances are split into an unlabeled pool and a labeled
//! test set. The pool's true classes are returned separately as `gold` and
//! never attached to the pool itself.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::sampling::{Dataset, Domain, Instance};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub d_in: usize,
    pub source_classes: usize,
    pub target_classes: usize,
    /// Fraction of target classes that are transformed source classes.
    pub shared_fraction: f64,
    pub samples_per_class: usize,
    /// Typical distance between two class centroids.
    pub class_separation: f64,
    pub noise_sigma: f64,
    /// Rotation angle (radians) applied in every coordinate plane (0,1), (2,3), ...
    pub rotation: f64,
    /// Length of the translation between domains.
    pub translation: f64,
    /// Share of each target class placed in the labeled test set.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            d_in: 16,
            source_classes: 8,
            target_classes: 6,
            shared_fraction: 0.5,
            samples_per_class: 60,
            class_separation: 1.5,
            noise_sigma: 0.25,
            rotation: std::f64::consts::FRAC_PI_4,
            translation: 3.0,
            test_fraction: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn shared_count(&self) -> usize {
        (self.shared_fraction * self.target_classes as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 {
            return Err(Error::invalid("d_in must be positive"));
        }
        if self.source_classes < 2 || self.target_classes < 2 {
            return Err(Error::invalid("class counts must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.shared_fraction) {
            return Err(Error::invalid(format!(
                "shared_fraction {} outside [0, 1]",
                self.shared_fraction
            )));
        }
        if self.shared_count() > self.source_classes {
            return Err(Error::invalid(format!(
                "{} shared target classes need at least that many source classes, got {}",
                self.shared_count(),
                self.source_classes
            )));
        }
        if !(self.noise_sigma > 0.0) {
            return Err(Error::invalid("noise_sigma must be > 0"));
        }
        if !(self.class_separation >= 0.0) || !self.rotation.is_finite() || !(self.translation >= 0.0) {
            return Err(Error::invalid("separation, rotation and translation must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.test_fraction) || self.test_fraction == 0.0 {
            return Err(Error::invalid("test_fraction must be in (0, 1)"));
        }
        let n_test = self.test_count();
        if n_test == 0 || n_test >= self.samples_per_class {
            return Err(Error::invalid(
                "samples_per_class too small to split into pool and test set",
            ));
        }
        Ok(())
    }

    fn test_count(&self) -> usize {
        (self.test_fraction * self.samples_per_class as f64).round() as usize
    }
}

/// The domain shift `x ↦ R x + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainShift {
    pub angle: f64,
    pub translation: Vec<f64>,
}

impl DomainShift {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (s, c) = self.angle.sin_cos();
        let mut y = x.to_vec();
        for pair in y.chunks_exact_mut(2) {
            let (a, b) = (pair[0], pair[1]);
            pair[0] = c * a - s * b;
            pair[1] = s * a + c * b;
        }
        for (v, t) in y.iter_mut().zip(&self.translation) {
            *v += t;
        }
        y
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub source: Dataset,
    pub target_unlabeled: Dataset,
    pub target_test: Dataset,
    /// `(pool id, true class)` for every unlabeled target instance.
    pub gold: Vec<(String, String)>,
    pub source_centroids: Vec<Vec<f64>>,
    /// Target centroids in the mapped space, with the source class each
    /// shared one was copied from.
    pub target_centroids: Vec<(Vec<f64>, Option<usize>)>,
    pub shift: DomainShift,
}

fn gaussian(rng: &mut Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn random_direction(rng: &mut Rng, d: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, d);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Centroid at radius `separation / √2`, so two independent centroids are
/// about `separation` apart in high dimension.
fn random_centroid(rng: &mut Rng, d: usize, separation: f64) -> Vec<f64> {
    let r = separation / std::f64::consts::SQRT_2;
    random_direction(rng, d).into_iter().map(|x| x * r).collect()
}

fn blob(rng: &mut Rng, centroid: &[f64], sigma: f64, n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            gaussian(rng, centroid.len())
                .into_iter()
                .zip(centroid)
                .map(|(z, c)| c + sigma * z)
                .collect()
        })
        .collect()
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let d = spec.d_in;
    let mut geo = rng_from_seed(derive_seed(spec.seed, "synthetic-geometry"));
    let mut noise = rng_from_seed(derive_seed(spec.seed, "synthetic-samples"));

    let source_centroids: Vec<Vec<f64>> = (0..spec.source_classes)
        .map(|_| random_centroid(&mut geo, d, spec.class_separation))
        .collect();
    let shift = DomainShift {
        angle: spec.rotation,
        translation: random_direction(&mut geo, d)
            .into_iter()
            .map(|x| x * spec.translation)
            .collect(),
    };
    let mut shared: Vec<usize> = (0..spec.source_classes).collect();
    shared.shuffle(&mut geo);
    shared.truncate(spec.shared_count());
    shared.sort_unstable();

    let mut target_centroids: Vec<(Vec<f64>, Option<usize>)> =
        shared.iter().map(|&s| (shift.apply(&source_centroids[s]), Some(s))).collect();
    while target_centroids.len() < spec.target_classes {
        let fresh = random_centroid(&mut geo, d, spec.class_separation);
        target_centroids.push((shift.apply(&fresh), None));
    }

    let mut source = Vec::with_capacity(spec.source_classes * spec.samples_per_class);
    for (c, centroid) in source_centroids.iter().enumerate() {
        for (i, x) in blob(&mut noise, centroid, spec.noise_sigma, spec.samples_per_class)
            .into_iter()
            .enumerate()
        {
            source.push(Instance {
                id: format!("s{c}-{i}"),
                domain: Domain::Source,
                label: Some(format!("s{c}")),
                features: x,
            });
        }
    }

    let n_test = spec.test_count();
    let mut test = Vec::new();
    let mut pool: Vec<(String, Vec<f64>)> = Vec::new();
    for (c, (centroid, _)) in target_centroids.iter().enumerate() {
        let samples = blob(&mut noise, centroid, spec.noise_sigma, spec.samples_per_class);
        for (i, x) in samples.into_iter().enumerate() {
            if i < n_test {
                test.push(Instance {
                    id: format!("t{c}-{i}"),
                    domain: Domain::Target,
                    label: Some(format!("t{c}")),
                    features: x,
                });
            } else {
                pool.push((format!("t{c}"), x));
            }
        }
    }
    // Pool ids carry no class information.
    pool.shuffle(&mut noise);
    let width = pool.len().to_string().len();
    let mut gold = Vec::with_capacity(pool.len());
    let mut unlabeled = Vec::with_capacity(pool.len());
    for (i, (class, x)) in pool.into_iter().enumerate() {
        let id = format!("u{i:0width$}");
        gold.push((id.clone(), class));
        unlabeled.push(Instance {
            id,
            domain: Domain::Target,
            label: None,
            features: x,
        });
    }

    Ok(SyntheticData {
        source: Dataset::new(source)?,
        target_unlabeled: Dataset::new(unlabeled)?,
        target_test: Dataset::new(test)?,
        gold,
        source_centroids,
        target_centroids,
        shift,
    })
}
