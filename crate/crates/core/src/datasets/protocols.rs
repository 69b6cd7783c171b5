use std::collections::BTreeSet;
use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::LabeledDataset;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Protocol {
    OneVsRest,
    HoldOneOut,
    SmallMode,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::OneVsRest => "one-vs-rest",
            Protocol::HoldOneOut => "hold-one-out",
            Protocol::SmallMode => "small-mode",
        })
    }
}

/// Description of one anomaly task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub protocol: Protocol,
    pub nominal_classes: BTreeSet<usize>,
    /// Classes of the corpus source that may be drawn into the corpus.
    pub corpus_classes: BTreeSet<usize>,
    /// Secondary-class fraction, small-mode tasks only.
    pub r: Option<f64>,
    pub seed: u64,
}

/// Labeled evaluation set; `anomalous[i]` is the positive class.
#[derive(Clone, Debug, PartialEq)]
pub struct TestSet {
    pub images: Tensor<f32>,
    pub anomalous: Vec<bool>,
    pub classes: Vec<usize>,
}

impl TestSet {
    fn from(test: &LabeledDataset, indices: &[usize], is_anomaly: impl Fn(usize) -> bool) -> Self {
        TestSet {
            images: test.images.select_rows(indices),
            anomalous: indices
                .iter()
                .map(|&i| is_anomaly(test.labels[i]))
                .collect(),
            classes: indices.iter().map(|&i| test.labels[i]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.anomalous.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anomalous.is_empty()
    }
}

/// Unlabeled exposure samples and where they came from in the source.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub images: Tensor<f32>,
    pub source_indices: Vec<usize>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.source_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_indices.is_empty()
    }
}

/// `S_n` = training samples of `class`; every other test class is anomalous.
pub fn build_one_vs_rest(
    train: &LabeledDataset,
    test: &LabeledDataset,
    class: usize,
) -> Result<(LabeledDataset, TestSet)> {
    train.check_class(class)?;
    test.check_class(class)?;
    let nominal = train.subset(&train.indices_of(class));
    let all: Vec<usize> = (0..test.len()).collect();
    Ok((nominal, TestSet::from(test, &all, |l| l != class)))
}

/// `S_n` = training samples of every class but `class`, which is the anomaly.
pub fn build_hold_one_out(
    train: &LabeledDataset,
    test: &LabeledDataset,
    class: usize,
) -> Result<(LabeledDataset, TestSet)> {
    train.check_class(class)?;
    test.check_class(class)?;
    let keep: Vec<usize> = (0..train.len())
        .filter(|&i| train.labels[i] != class)
        .collect();
    let all: Vec<usize> = (0..test.len()).collect();
    Ok((
        train.subset(&keep),
        TestSet::from(test, &all, |l| l == class),
    ))
}

/// All training samples of `primary` plus `round(r · n_b)` (half-up) samples of
/// `secondary`, chosen by `seed`.
pub fn build_small_mode(
    train: &LabeledDataset,
    primary: usize,
    secondary: usize,
    r: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Config(format!(
            "mixture fraction {r} outside [0, 1]"
        )));
    }
    if primary == secondary {
        return Err(Error::Config(
            "primary and secondary class must differ".into(),
        ));
    }
    train.check_class(primary)?;
    train.check_class(secondary)?;
    let mut keep = train.indices_of(primary);
    let pool = train.indices_of(secondary);
    let take = (r * pool.len() as f64 + 0.5).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = sample(&mut rng, pool.len(), take.min(pool.len()))
        .into_iter()
        .map(|i| pool[i])
        .collect();
    chosen.sort_unstable();
    keep.extend(chosen);
    Ok(train.subset(&keep))
}

/// Evaluation sets of a small-mode task: nominal `primary` (resp.
/// `secondary`) test samples against every class outside the pair.
pub fn small_mode_test_sets(
    test: &LabeledDataset,
    primary: usize,
    secondary: usize,
) -> Result<(TestSet, TestSet)> {
    test.check_class(primary)?;
    test.check_class(secondary)?;
    let build = |nominal: usize| {
        let idx: Vec<usize> = (0..test.len())
            .filter(|&i| {
                test.labels[i] == nominal
                    || (test.labels[i] != primary && test.labels[i] != secondary)
            })
            .collect();
        TestSet::from(test, &idx, |l| l != nominal)
    };
    Ok((build(primary), build(secondary)))
}

/// `m` samples of `source` whose class is not in `excluded`, drawn without
/// replacement when enough exist, otherwise with replacement if allowed.
pub fn build_corpus(
    source: &LabeledDataset,
    excluded: &BTreeSet<usize>,
    m: usize,
    seed: u64,
    allow_replacement: bool,
) -> Result<Corpus> {
    let pool: Vec<usize> = (0..source.len())
        .filter(|&i| !excluded.contains(&source.labels[i]))
        .collect();
    if m > 0 && pool.is_empty() {
        return Err(Error::Contract("every corpus class is excluded".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source_indices: Vec<usize> = if m <= pool.len() {
        sample(&mut rng, pool.len(), m)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    } else if allow_replacement {
        (0..m)
            .map(|_| pool[rng.random_range(0..pool.len())])
            .collect()
    } else {
        return Err(Error::Contract(format!(
            "corpus of {m} requested but only {} samples are eligible",
            pool.len()
        )));
    };
    Ok(Corpus {
        images: source.images.select_rows(&source_indices),
        source_indices,
    })
}
