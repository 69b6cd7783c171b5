//! The method table: ADRA, its unsupervised variant and the comparison methods.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{ParamStore, Tensor};
use crate::datasets::TestSet;
use crate::error::{Error, Result};
use crate::metrics::ScoredTestSet;
use crate::model::{Backbone, BackboneConfig, Model, ParamRole, PartitionMode};
use crate::objectives::radial;
use crate::trainer::{train_task, LossCurve, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Adra,
    Uadra,
    Tf,
    L2sp,
    Scratch,
    Sad,
    Svdd,
    KnnAd,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Adra,
        Method::Uadra,
        Method::Tf,
        Method::L2sp,
        Method::Scratch,
        Method::Sad,
        Method::Svdd,
        Method::KnnAd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Adra => "adra",
            Method::Uadra => "uadra",
            Method::Tf => "tf",
            Method::L2sp => "l2sp",
            Method::Scratch => "scratch",
            Method::Sad => "sad",
            Method::Svdd => "svdd",
            Method::KnnAd => "knn-ad",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// Where backbone weights come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Init {
    Pretrained,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Loss {
    /// HSC with outlier exposure.
    Hsc,
    /// Radial loss on nominal samples only; any corpus is ignored.
    OneClass,
    /// No training.
    None,
}

/// Complete wiring of one method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MethodSpec {
    pub method: Method,
    pub init: Init,
    /// Insert gated adapter banks into every block.
    pub adapters: bool,
    pub mode: PartitionMode,
    pub loss: Loss,
    /// Neighbours averaged by kNN-AD.
    pub k: usize,
}

impl MethodSpec {
    pub fn of(method: Method) -> Self {
        use Init::*;
        use PartitionMode as P;
        let (init, adapters, mode, loss) = match method {
            Method::Adra => (Pretrained, true, P::Adra, Loss::Hsc),
            Method::Uadra => (Pretrained, true, P::Adra, Loss::OneClass),
            Method::Tf => (Pretrained, false, P::Finetune, Loss::Hsc),
            Method::L2sp => (Pretrained, false, P::L2sp, Loss::Hsc),
            // The adapter network itself, trained end to end from random weights.
            Method::Scratch => (Random, true, P::Scratch, Loss::Hsc),
            Method::Sad => (Random, false, P::Scratch, Loss::Hsc),
            Method::Svdd => (Random, false, P::Scratch, Loss::OneClass),
            Method::KnnAd => (Pretrained, false, P::FeatureExtract, Loss::None),
        };
        MethodSpec {
            method,
            init,
            adapters,
            mode,
            loss,
            k: 2,
        }
    }
}

/// Mean Euclidean distance from `query` to its `k` nearest rows of
/// `train` (row-major, `query.len()` columns).
pub fn knn_score(train: &[f32], query: &[f32], k: usize) -> Result<f64> {
    let d = query.len();
    if d == 0 || train.is_empty() || !train.len().is_multiple_of(d) {
        return Err(Error::Contract(
            "kNN needs a nonempty training set of matching width".into(),
        ));
    }
    let n = train.len() / d;
    if k == 0 || k > n {
        return Err(Error::Config(format!("k = {k} with {n} training points")));
    }
    let mut dist: Vec<f64> = train
        .chunks(d)
        .map(|row| {
            row.iter()
                .zip(query)
                .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    dist.select_nth_unstable_by(k - 1, f64::total_cmp);
    let nearest = &mut dist[..k];
    nearest.sort_by(f64::total_cmp);
    Ok(nearest.iter().sum::<f64>() / k as f64)
}

/// A fitted method, ready to score samples.
#[derive(Clone, Debug)]
pub struct Trained {
    pub spec: MethodSpec,
    pub model: Model,
    /// Pooled backbone features of the nominal set (kNN-AD only).
    pub memory: Option<Tensor<f32>>,
    pub curve: LossCurve,
}

impl Trained {
    /// Anomaly scores; larger is more anomalous.
    pub fn score(&self, x: &Tensor<f32>) -> Result<Vec<f64>> {
        match &self.memory {
            Some(mem) => {
                let q = self.model.features_tensor(x)?;
                q.data()
                    .chunks(q.row_len())
                    .map(|row| knn_score(mem.data(), row, self.spec.k))
                    .collect()
            }
            None => {
                let z = self.model.embed_tensor(x)?;
                Ok(z.data()
                    .chunks(z.row_len())
                    .map(|r| radial(r) as f64)
                    .collect())
            }
        }
    }

    /// The representation scores are computed from: embeddings, or pooled
    /// backbone features for kNN-AD.
    pub fn representation(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        if self.memory.is_some() {
            self.model.features_tensor(x)
        } else {
            self.model.embed_tensor(x)
        }
    }

    pub fn evaluate(&self, test: &TestSet) -> Result<ScoredTestSet> {
        ScoredTestSet::new(self.score(&test.images)?, test.anomalous.clone())
    }

    /// Adapter, gate and head parameters.
    pub fn task_parameters(&self) -> ParamStore<f32> {
        let mut out = ParamStore::new();
        for p in self
            .model
            .params
            .iter()
            .filter(|p| ParamRole::of(&p.id).is_task_specific())
        {
            out.insert(&p.id, p.value.clone(), p.trainable)
                .expect("ids are unique");
        }
        out
    }
}

/// Build and train `spec` on a nominal set and optional exposure corpus.
///
/// `seed` fixes the head (and, for random-init methods, backbone)
/// initialization as well as batch order.
pub fn fit_method(
    spec: &MethodSpec,
    config: &BackboneConfig,
    backbone: Option<&Backbone>,
    nominal: &Tensor<f32>,
    corpus: Option<&Tensor<f32>>,
    train: &TrainConfig,
    seed: u64,
) -> Result<Trained> {
    let random;
    let source = match spec.init {
        Init::Pretrained => backbone.ok_or_else(|| {
            Error::Contract(format!(
                "method {} needs a pretrained backbone",
                spec.method
            ))
        })?,
        Init::Random => {
            random = Backbone::random(
                config.clone(),
                seed.wrapping_mul(0x9E37_79B9).wrapping_add(17),
            )?;
            &random
        }
    };
    let experts = spec.adapters.then_some(train.experts);
    let mut model = Model::from_backbone(source, experts, seed)?;
    if spec.loss == Loss::None {
        let memory = model.features_tensor(nominal)?;
        return Ok(Trained {
            spec: *spec,
            model,
            memory: Some(memory),
            curve: LossCurve::default(),
        });
    }
    let corpus = match spec.loss {
        Loss::Hsc => corpus,
        _ => None,
    };
    let cfg = TrainConfig {
        mode: spec.mode,
        ..train.clone()
    };
    let anchor = (spec.mode == PartitionMode::L2sp).then(|| source.params.clone());
    let curve = train_task(
        &mut model,
        nominal,
        corpus,
        &cfg,
        anchor.as_ref(),
        seed ^ 0x5EED,
    )?;
    Ok(Trained {
        spec: *spec,
        model,
        memory: None,
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("gt".parse::<Method>().is_err());
    }

    #[test]
    fn knn_closed_forms() {
        let train = [0.0, 0.0, 1.0, 0.0];
        assert_eq!(knn_score(&train, &[0.0, 1.0], 1).unwrap(), 1.0);
        let two = knn_score(&train, &[0.0, 1.0], 2).unwrap();
        assert!((two - (1.0 + 2f64.sqrt()) / 2.0).abs() < 1e-12);
        assert!(knn_score(&[], &[0.0, 1.0], 1).is_err());
        assert!(knn_score(&train, &[0.0, 1.0], 3).is_err());
    }
}
