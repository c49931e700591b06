//! Procedural open-set point-cloud datasets.
//!
//! Sample ids are assigned cohort by cohort in the order L, U, W, S, O, T and
//! every sample is generated from its own `(seed, id)` stream, so any sample can
//! be regenerated in isolation.

pub mod io;
pub mod ood;
pub mod shapes;

use std::collections::HashMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{keyed, Domain};
use ood::StrongOodSpec;
pub use shapes::{Point, ShapeJitter, NUM_SHAPES, SHAPE_NAMES};

/// Sample pools.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Cohort {
    /// Labeled in-distribution.
    L,
    /// Unlabeled in-distribution.
    U,
    /// Weak OOD scene blocks.
    W,
    /// Strong OOD (rotated, heavily jittered blocks).
    S,
    /// Crops from perturbed object boxes.
    O,
    /// Held-out labeled test set.
    T,
}

impl Cohort {
    pub const ALL: [Cohort; 6] = [Cohort::L, Cohort::U, Cohort::W, Cohort::S, Cohort::O, Cohort::T];
    /// Cohorts that may appear in the unlabeled training pool.
    pub const UNLABELED: [Cohort; 4] = [Cohort::U, Cohort::W, Cohort::S, Cohort::O];

    pub fn as_char(self) -> char {
        match self {
            Cohort::L => 'L',
            Cohort::U => 'U',
            Cohort::W => 'W',
            Cohort::S => 'S',
            Cohort::O => 'O',
            Cohort::T => 'T',
        }
    }

    pub fn from_char(c: char) -> Result<Self> {
        Ok(match c {
            'L' => Cohort::L,
            'U' => Cohort::U,
            'W' => Cohort::W,
            'S' => Cohort::S,
            'O' => Cohort::O,
            'T' => Cohort::T,
            other => return Err(Error::Format(format!("unknown cohort tag {other:?}"))),
        })
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_labeled(self) -> bool {
        matches!(self, Cohort::L | Cohort::T)
    }
}

impl fmt::Display for Cohort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

/// One point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    /// `[N, 3]`.
    pub points: Tensor,
    pub label: Option<usize>,
    pub cohort: Cohort,
}

impl Sample {
    pub fn from_points(id: u64, points: &[Point], label: Option<usize>, cohort: Cohort) -> Result<Self> {
        let data = points.iter().flat_map(|p| p.iter().copied()).collect();
        Ok(Self {
            id,
            points: Tensor::new(vec![points.len(), 3], data)?,
            label,
            cohort,
        })
    }

    pub fn num_points(&self) -> usize {
        self.points.shape()[0]
    }

    pub fn point_rows(&self) -> Vec<Point> {
        self.points
            .data()
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect()
    }
}

/// Number of samples per cohort.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortCounts {
    pub labeled: usize,
    pub unlabeled: usize,
    pub weak: usize,
    pub strong: usize,
    pub boxed: usize,
    pub test: usize,
}

impl CohortCounts {
    pub fn get(&self, c: Cohort) -> usize {
        match c {
            Cohort::L => self.labeled,
            Cohort::U => self.unlabeled,
            Cohort::W => self.weak,
            Cohort::S => self.strong,
            Cohort::O => self.boxed,
            Cohort::T => self.test,
        }
    }

    pub fn set(&mut self, c: Cohort, n: usize) {
        match c {
            Cohort::L => self.labeled = n,
            Cohort::U => self.unlabeled = n,
            Cohort::W => self.weak = n,
            Cohort::S => self.strong = n,
            Cohort::O => self.boxed = n,
            Cohort::T => self.test = n,
        }
    }

    pub fn total(&self) -> usize {
        Cohort::ALL.iter().map(|&c| self.get(c)).sum()
    }
}

/// Full recipe for a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub classes: usize,
    pub points: usize,
    pub counts: CohortCounts,
    pub seed: u64,
    pub jitter: ShapeJitter,
    pub strong: StrongOodSpec,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            classes: 8,
            points: 256,
            counts: CohortCounts {
                labeled: 40,
                unlabeled: 400,
                weak: 200,
                strong: 200,
                boxed: 0,
                test: 200,
            },
            seed: 0,
            jitter: ShapeJitter::default(),
            strong: StrongOodSpec::default(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > NUM_SHAPES {
            return Err(Error::InvalidArgument(format!(
                "class count must be in [2, {NUM_SHAPES}], got {}",
                self.classes
            )));
        }
        if self.points == 0 {
            return Err(Error::InvalidArgument("points per cloud must be > 0".into()));
        }
        Ok(())
    }

    /// First id of each cohort's contiguous range.
    pub fn first_id(&self, cohort: Cohort) -> u64 {
        Cohort::ALL
            .iter()
            .take_while(|&&c| c != cohort)
            .map(|&c| self.counts.get(c) as u64)
            .sum()
    }

    /// Cohort and within-cohort index of `id`.
    pub fn locate(&self, id: u64) -> Result<(Cohort, usize)> {
        let mut start = 0u64;
        for c in Cohort::ALL {
            let n = self.counts.get(c) as u64;
            if id < start + n {
                return Ok((c, (id - start) as usize));
            }
            start += n;
        }
        Err(Error::InvalidArgument(format!("sample id {id} out of range (total {start})")))
    }
}

fn shape_sample<R: Rng + ?Sized>(spec: &DatasetSpec, id: u64, class: usize, cohort: Cohort, rng: &mut R) -> Result<Sample> {
    let pts = shapes::generate_shape(class, spec.points, &spec.jitter, rng)?;
    let label = cohort.is_labeled().then_some(class);
    Sample::from_points(id, &pts, label, cohort)
}

/// Sample `id` of the dataset described by `spec`. Returns `None` only for a
/// box-OOD sample whose every perturbed crop came out empty.
pub fn generate_sample(spec: &DatasetSpec, id: u64) -> Result<Option<Sample>> {
    spec.validate()?;
    let (cohort, k) = spec.locate(id)?;
    let mut rng = keyed(spec.seed, Domain::Sample, id);
    let n = spec.points;
    let sample = match cohort {
        Cohort::L | Cohort::U | Cohort::T => {
            // classes cycle so every pool is balanced
            shape_sample(spec, id, k % spec.classes, cohort, &mut rng)?
        }
        Cohort::W => {
            let (pts, _) = ood::weak_ood_cloud(n, &spec.jitter, &mut rng)?;
            Sample::from_points(id, &pts, None, cohort)?
        }
        Cohort::S => {
            let (mut pts, _) = ood::weak_ood_cloud(n, &spec.jitter, &mut rng)?;
            ood::corrupt_strong(&mut pts, &spec.strong, &mut rng);
            Sample::from_points(id, &pts, None, cohort)?
        }
        Cohort::O => {
            let scene = ood::random_box_scene(n, &spec.jitter, &mut rng)?;
            match ood::box_ood_cloud(&scene, n, &mut rng) {
                Some(pts) => Sample::from_points(id, &pts, None, cohort)?,
                None => {
                    log::warn!("box crop for sample {id} empty after {} tries; skipped", ood::BOX_CROP_TRIES);
                    return Ok(None);
                }
            }
        }
    };
    Ok(Some(sample))
}

fn generate_cohort(spec: &DatasetSpec, cohort: Cohort) -> Result<Vec<Sample>> {
    let first = spec.first_id(cohort);
    let mut out = Vec::with_capacity(spec.counts.get(cohort));
    for id in first..first + spec.counts.get(cohort) as u64 {
        if let Some(s) = generate_sample(spec, id)? {
            out.push(s);
        }
    }
    Ok(out)
}

/// In-distribution cohorts L and U.
pub fn generate_shapes(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    let mut out = generate_cohort(spec, Cohort::L)?;
    out.extend(generate_cohort(spec, Cohort::U)?);
    Ok(out)
}

/// Weak-OOD cohort W.
pub fn make_weak_ood(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    generate_cohort(spec, Cohort::W)
}

/// Turns weak-OOD style blocks into strong-OOD samples (cohort S).
pub fn make_strong_ood<R: Rng + ?Sized>(samples: &[Sample], spec: &StrongOodSpec, rng: &mut R) -> Result<Vec<Sample>> {
    samples
        .iter()
        .map(|s| {
            let mut pts = s.point_rows();
            ood::corrupt_strong(&mut pts, spec, rng);
            Sample::from_points(s.id, &pts, None, Cohort::S)
        })
        .collect()
}

/// Box-OOD cohort O; samples whose crops stay empty are skipped.
pub fn make_box_ood(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    generate_cohort(spec, Cohort::O)
}

/// A materialized dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub points: usize,
    samples: Vec<Sample>,
    index: HashMap<u64, usize>,
}

impl Dataset {
    pub fn new(classes: usize, points: usize, samples: Vec<Sample>) -> Result<Self> {
        let mut index = HashMap::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            if s.points.shape() != [points, 3] {
                return Err(Error::ShapeMismatch {
                    op: "dataset sample",
                    lhs: s.points.shape().to_vec(),
                    rhs: vec![points, 3],
                });
            }
            match (s.cohort.is_labeled(), s.label) {
                (true, Some(y)) if y < classes => {}
                (false, None) => {}
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "sample {} in cohort {} has label {:?}",
                        s.id, s.cohort, s.label
                    )))
                }
            }
            if index.insert(s.id, i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(Self {
            classes,
            points,
            samples,
            index,
        })
    }

    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let mut samples = Vec::with_capacity(spec.counts.total());
        for c in Cohort::ALL {
            samples.extend(generate_cohort(spec, c)?);
        }
        Self::new(spec.classes, spec.points, samples)
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn get(&self, id: u64) -> Result<&Sample> {
        self.index
            .get(&id)
            .map(|&i| &self.samples[i])
            .ok_or_else(|| Error::InvalidArgument(format!("unknown sample id {id}")))
    }

    pub fn cohort(&self, c: Cohort) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.cohort == c)
    }

    pub fn ids(&self, cohorts: &[Cohort]) -> Vec<u64> {
        self.samples
            .iter()
            .filter(|s| cohorts.contains(&s.cohort))
            .map(|s| s.id)
            .collect()
    }

    pub fn counts(&self) -> CohortCounts {
        let mut c = CohortCounts::default();
        for s in &self.samples {
            c.set(s.cohort, c.get(s.cohort) + 1);
        }
        c
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Copy keeping only samples accepted by `keep`.
    pub fn filter(&self, keep: impl Fn(&Sample) -> bool) -> Result<Self> {
        let samples = self.samples.iter().filter(|s| keep(s)).cloned().collect();
        Self::new(self.classes, self.points, samples)
    }
}

/// Shuffles the labeled pool into a training half (`ceil(n/2)`) and a
/// validation half (`floor(n/2)`).
pub fn epoch_split<R: Rng + ?Sized>(pool: &[u64], rng: &mut R) -> Result<(Vec<u64>, Vec<u64>)> {
    if pool.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "labeled pool needs at least 2 samples to split, got {}",
            pool.len()
        )));
    }
    let mut ids = pool.to_vec();
    ids.shuffle(rng);
    let val = ids.split_off(pool.len().div_ceil(2));
    Ok((ids, val))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            points: 64,
            counts: CohortCounts {
                labeled: 4,
                unlabeled: 6,
                weak: 3,
                strong: 3,
                boxed: 3,
                test: 2,
            },
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn split_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (t, v) = epoch_split(&[1, 2, 3], &mut rng).unwrap();
        assert_eq!((t.len(), v.len()), (2, 1));
        assert!(epoch_split(&[1], &mut rng).is_err());
    }

    #[test]
    fn ids_follow_cohort_order() {
        let spec = small_spec();
        assert_eq!(spec.first_id(Cohort::U), 4);
        assert_eq!(spec.locate(10).unwrap(), (Cohort::W, 0));
        assert!(spec.locate(21).is_err());
        let ds = Dataset::generate(&spec).unwrap();
        assert_eq!(ds.counts().labeled, 4);
        assert!(ds.cohort(Cohort::S).all(|s| s.label.is_none()));
        assert!(ds.cohort(Cohort::T).all(|s| s.label.is_some()));
    }

    #[test]
    fn isolated_regeneration_matches() {
        let spec = small_spec();
        let ds = Dataset::generate(&spec).unwrap();
        for s in ds.samples() {
            assert_eq!(&generate_sample(&spec, s.id).unwrap().unwrap(), s);
        }
    }

    #[test]
    fn cohort_chars_round_trip() {
        for c in Cohort::ALL {
            assert_eq!(Cohort::from_char(c.as_char()).unwrap(), c);
        }
        assert!(Cohort::from_char('X').is_err());
    }
}
