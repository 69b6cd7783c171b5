//! Synthetic factor images and the anomaly-detection protocols built on them.
//!
//! Every image shows one filled shape of some color, position and size on a
//! neutral background. Classes are (shape, color) pairs; pairs that use one
//! of the held-out colors, plus any pairs beyond the requested class count,
//! are reserved and only ever appear in exposure corpora.

mod io;
mod protocols;
mod render;

pub use io::{load_dataset, read_dataset, save_dataset, write_dataset, DATASET_MAGIC};
pub use protocols::{
    build_corpus, build_hold_one_out, build_one_vs_rest, build_small_mode, small_mode_test_sets,
    Corpus, Protocol, TaskSpec, TestSet,
};
pub use render::{PALETTE, SHAPE_COUNT};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use render::{render, Geometry};

pub const FACTOR_NAMES: [&str; 5] = ["shape", "color", "position-x", "position-y", "size"];

/// Cardinalities of the generative factors and the rendering parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorSpec {
    pub shapes: usize,
    pub colors: usize,
    pub positions_x: usize,
    pub positions_y: usize,
    pub sizes: usize,
    pub image_size: usize,
    pub noise_std: f32,
}

impl Default for FactorSpec {
    fn default() -> Self {
        FactorSpec {
            shapes: 4,
            colors: 5,
            positions_x: 4,
            positions_y: 4,
            sizes: 3,
            image_size: 32,
            noise_std: 0.02,
        }
    }
}

impl FactorSpec {
    /// `(name, cardinality)` in the column order of factor tables.
    pub fn factors(&self) -> [(&'static str, usize); 5] {
        let c = [
            self.shapes,
            self.colors,
            self.positions_x,
            self.positions_y,
            self.sizes,
        ];
        std::array::from_fn(|i| (FACTOR_NAMES[i], c[i]))
    }

    pub fn combinations(&self) -> usize {
        self.factors().iter().map(|(_, c)| c).product()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((name, c)) = self.factors().into_iter().find(|(_, c)| *c < 2) {
            return Err(Error::Config(format!(
                "factor {name} needs at least 2 values, got {c}"
            )));
        }
        if self.shapes > SHAPE_COUNT || self.colors > PALETTE.len() {
            return Err(Error::Config(format!(
                "at most {SHAPE_COUNT} shapes and {} colors are available",
                PALETTE.len()
            )));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::Config(format!(
                "invalid noise level {}",
                self.noise_std
            )));
        }
        Geometry::new(self).map(|_| ())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

/// Images with class labels and, optionally, their generating factors.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    /// `[n, channels, h, w]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    /// Row-major `n × FACTOR_NAMES.len()` factor codes.
    pub factors: Option<Vec<[u32; 5]>>,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(
        images: Tensor<f32>,
        labels: Vec<usize>,
        class_count: usize,
        split: Split,
    ) -> Result<Self> {
        let n = images.shape().first().copied().unwrap_or(0);
        if n != labels.len() {
            return Err(Error::Dimension {
                op: "dataset labels",
                lhs: images.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Contract(format!(
                "label {bad} outside {class_count} classes"
            )));
        }
        Ok(LabeledDataset {
            images,
            labels,
            class_count,
            factors: None,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Indices of samples with label `class`, in dataset order.
    pub fn indices_of(&self, class: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.labels[i] == class)
            .collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Samples at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            factors: self
                .factors
                .as_ref()
                .map(|f| indices.iter().map(|&i| f[i]).collect()),
            split: self.split,
        }
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.class_count || !self.labels.contains(&class) {
            return Err(Error::Contract(format!("class {class} has no samples")));
        }
        Ok(())
    }
}

/// Size and class layout of the default synthetic benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub factors: FactorSpec,
    pub classes: usize,
    /// Trailing palette colors that never occur in task classes.
    pub held_out_colors: usize,
    /// Keep only pairs with even `shape + color` as task candidates, so that
    /// every shape and color also occurs among the reserved pairs.
    pub checkerboard: bool,
    /// Width of the uniform offset added to each view's center and radius,
    /// in grid steps; 1 fills the gaps between neighbouring grid values.
    /// Factor rows record the grid cell. The exhaustive grid is never jittered.
    pub jitter: f32,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            factors: FactorSpec::default(),
            classes: 10,
            held_out_colors: 0,
            checkerboard: true,
            jitter: 1.0,
            train_per_class: 200,
            test_per_class: 100,
        }
    }
}

impl SyntheticSpec {
    /// `(shape, color)` of every task class, by label.
    pub fn task_pairs(&self) -> Vec<(u32, u32)> {
        let mut pairs = self.candidate_pairs();
        pairs.truncate(self.classes);
        pairs
    }

    fn candidate_pairs(&self) -> Vec<(u32, u32)> {
        let task_colors = self.factors.colors.saturating_sub(self.held_out_colors);
        let mut pairs = Vec::new();
        for s in 0..self.factors.shapes {
            for c in 0..task_colors {
                if !self.checkerboard || (s + c) % 2 == 0 {
                    pairs.push((s as u32, c as u32));
                }
            }
        }
        pairs
    }

    /// Every `(shape, color)` pair that is not a task class.
    pub fn reserve_pairs(&self) -> Vec<(u32, u32)> {
        let task = self.task_pairs();
        let mut pairs = Vec::new();
        for s in 0..self.factors.shapes {
            for c in 0..self.factors.colors {
                let p = (s as u32, c as u32);
                if !task.contains(&p) {
                    pairs.push(p);
                }
            }
        }
        pairs
    }

    pub fn validate(&self) -> Result<()> {
        self.factors.validate()?;
        let available = self.candidate_pairs().len();
        if self.classes < 2 || self.classes > available {
            return Err(Error::Config(format!(
                "{} classes requested but only {available} shape/color pairs are available",
                self.classes
            )));
        }
        if self.reserve_pairs().is_empty() {
            return Err(Error::Config(
                "no shape/color pairs left for the exposure corpus".into(),
            ));
        }
        if !(0.0..=2.0).contains(&self.jitter) {
            return Err(Error::Config(format!(
                "jitter {} outside [0, 2]",
                self.jitter
            )));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config("empty split requested".into()));
        }
        Ok(())
    }
}

/// Output of [`generate`].
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    /// Training-split samples of the reserved pairs, labeled by reserve index.
    pub reserve: LabeledDataset,
}

struct Renderer {
    spec: FactorSpec,
    geo: Geometry,
    noise: Option<Normal<f32>>,
}

impl Renderer {
    fn new(spec: &FactorSpec) -> Result<Self> {
        spec.validate()?;
        let noise = (spec.noise_std > 0.0)
            .then(|| Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string())))
            .transpose()?;
        Ok(Renderer {
            spec: spec.clone(),
            geo: Geometry::new(spec)?,
            noise,
        })
    }

    /// Render `rows`, shifted by `offsets` (one per row) when given.
    fn images(
        &self,
        rows: &[[u32; 5]],
        offsets: Option<&[[f32; 3]]>,
        rng: &mut ChaCha8Rng,
    ) -> Tensor<f32> {
        let s = self.spec.image_size;
        let per = 3 * s * s;
        let mut data = vec![0.0f32; rows.len() * per];
        for (i, (row, out)) in rows.iter().zip(data.chunks_mut(per)).enumerate() {
            let offset = offsets.map_or([0.0; 3], |o| o[i]);
            render(&self.geo, s, row, offset, out);
            if let Some(noise) = &self.noise {
                for v in out.iter_mut() {
                    *v += noise.sample(rng);
                }
            }
        }
        Tensor::new(vec![rows.len(), 3, s, s], data).expect("sizes agree")
    }

    fn sample_views(
        &self,
        pairs: &[(u32, u32)],
        per_class: usize,
        jitter: f32,
        rng: &mut ChaCha8Rng,
    ) -> Views {
        let mut views = Views::default();
        let half = jitter / 2.0;
        for (label, &(shape, color)) in pairs.iter().enumerate() {
            for _ in 0..per_class {
                views.rows.push([
                    shape,
                    color,
                    rng.random_range(0..self.spec.positions_x as u32),
                    rng.random_range(0..self.spec.positions_y as u32),
                    rng.random_range(0..self.spec.sizes as u32),
                ]);
                views.labels.push(label);
                if half > 0.0 {
                    let steps = self.geo.steps;
                    views
                        .offsets
                        .push(steps.map(|st| st * rng.random_range(-half..half)));
                }
            }
        }
        views
    }

    fn dataset(
        &self,
        pairs: &[(u32, u32)],
        per_class: usize,
        jitter: f32,
        split: Split,
        rng: &mut ChaCha8Rng,
    ) -> LabeledDataset {
        let views = self.sample_views(pairs, per_class, jitter, rng);
        let offsets = (!views.offsets.is_empty()).then_some(views.offsets.as_slice());
        let images = self.images(&views.rows, offsets, rng);
        LabeledDataset {
            images,
            labels: views.labels,
            class_count: pairs.len(),
            factors: Some(views.rows),
            split,
        }
    }
}

#[derive(Default)]
struct Views {
    rows: Vec<[u32; 5]>,
    labels: Vec<usize>,
    offsets: Vec<[f32; 3]>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Train, test and reserve splits of the synthetic benchmark. Views
/// (position, size) are drawn uniformly per sample and jittered within
/// their grid cell; each split uses its own
/// random stream, so the result is a pure function of `(spec, seed)`.
pub fn generate(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticData> {
    spec.validate()?;
    let r = Renderer::new(&spec.factors)?;
    let task = spec.task_pairs();
    let reserve = spec.reserve_pairs();
    Ok(SyntheticData {
        train: r.dataset(
            &task,
            spec.train_per_class,
            spec.jitter,
            Split::Train,
            &mut stream(seed, 1),
        ),
        test: r.dataset(
            &task,
            spec.test_per_class,
            spec.jitter,
            Split::Test,
            &mut stream(seed, 2),
        ),
        reserve: r.dataset(
            &reserve,
            spec.train_per_class,
            spec.jitter,
            Split::Train,
            &mut stream(seed, 3),
        ),
    })
}

/// One image per factor combination, labeled by `shape · colors + color`.
pub fn generate_grid(spec: &FactorSpec, seed: u64) -> Result<LabeledDataset> {
    let r = Renderer::new(spec)?;
    let mut rows = Vec::with_capacity(spec.combinations());
    for s in 0..spec.shapes as u32 {
        for c in 0..spec.colors as u32 {
            for x in 0..spec.positions_x as u32 {
                for y in 0..spec.positions_y as u32 {
                    for z in 0..spec.sizes as u32 {
                        rows.push([s, c, x, y, z]);
                    }
                }
            }
        }
    }
    let labels = rows
        .iter()
        .map(|f| (f[0] as usize) * spec.colors + f[1] as usize)
        .collect();
    let images = r.images(&rows, None, &mut stream(seed, 4));
    Ok(LabeledDataset {
        images,
        labels,
        class_count: spec.shapes * spec.colors,
        factors: Some(rows),
        split: Split::Train,
    })
}

/// Noise-free rendering of explicit factor rows.
pub fn render_factors(spec: &FactorSpec, rows: &[[u32; 5]]) -> Result<Tensor<f32>> {
    let clean = FactorSpec {
        noise_std: 0.0,
        ..spec.clone()
    };
    let r = Renderer::new(&clean)?;
    for row in rows {
        let limits = clean.factors();
        if let Some(i) = (0..5).find(|&i| row[i] as usize >= limits[i].1) {
            return Err(Error::Contract(format!(
                "factor {} value {} out of range",
                FACTOR_NAMES[i], row[i]
            )));
        }
    }
    Ok(r.images(rows, None, &mut stream(0, 0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout() {
        let spec = SyntheticSpec::default();
        let task = spec.task_pairs();
        assert_eq!(task.len(), 10);
        assert!(task.iter().all(|&(s, c)| (s + c) % 2 == 0));
        assert_eq!(spec.reserve_pairs().len(), 10);
        assert_eq!(spec.factors.combinations(), 960);
    }

    #[test]
    fn too_small_images_are_rejected() {
        let spec = FactorSpec {
            image_size: 8,
            ..FactorSpec::default()
        };
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
        let ok = FactorSpec {
            image_size: 16,
            ..FactorSpec::default()
        };
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn shapes_differ_pixelwise() {
        let spec = FactorSpec::default();
        let rows: Vec<[u32; 5]> = (0..SHAPE_COUNT as u32).map(|s| [s, 0, 1, 1, 2]).collect();
        let imgs = render_factors(
            &FactorSpec {
                shapes: SHAPE_COUNT,
                ..spec
            },
            &rows,
        )
        .unwrap();
        for a in 0..SHAPE_COUNT {
            for b in a + 1..SHAPE_COUNT {
                assert_ne!(imgs.row(a), imgs.row(b), "shapes {a} and {b}");
            }
        }
    }
}
