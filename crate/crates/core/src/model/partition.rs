use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use super::{Model, ParamRole};
use crate::autodiff::ParamStore;
use crate::error::{Error, Result};

/// Which parameters an optimizer may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PartitionMode {
    /// θ frozen, adapters, gates and embedding head trainable.
    Adra,
    Finetune,
    L2sp,
    Scratch,
    /// Nothing trainable.
    FeatureExtract,
}

impl PartitionMode {
    pub const ALL: [PartitionMode; 5] = [
        PartitionMode::Adra,
        PartitionMode::Finetune,
        PartitionMode::L2sp,
        PartitionMode::Scratch,
        PartitionMode::FeatureExtract,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PartitionMode::Adra => "adra",
            PartitionMode::Finetune => "finetune",
            PartitionMode::L2sp => "l2sp",
            PartitionMode::Scratch => "scratch",
            PartitionMode::FeatureExtract => "feature-extract",
        }
    }

    fn trains(self, role: ParamRole) -> bool {
        match self {
            PartitionMode::Adra => role.is_task_specific(),
            PartitionMode::Finetune | PartitionMode::L2sp | PartitionMode::Scratch => true,
            PartitionMode::FeatureExtract => false,
        }
    }
}

impl fmt::Display for PartitionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PartitionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PartitionMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown partition mode `{s}`")))
    }
}

/// Frozen (`theta`) and trainable (`alpha`) parameter ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParameterPartition {
    pub mode: PartitionMode,
    pub theta: BTreeSet<String>,
    pub alpha: BTreeSet<String>,
}

impl ParameterPartition {
    /// Set the trainable flag of every parameter in `store`.
    pub fn apply(&self, store: &mut ParamStore<f32>) -> Result<()> {
        for p in store.iter_mut() {
            p.trainable = if self.alpha.contains(&p.id) {
                true
            } else if self.theta.contains(&p.id) {
                false
            } else {
                return Err(Error::Contract(format!(
                    "parameter `{}` is outside the partition",
                    p.id
                )));
            };
        }
        Ok(())
    }
}

pub fn make_partition(model: &Model, mode: PartitionMode) -> ParameterPartition {
    let (alpha, theta) = model
        .params
        .iter()
        .map(|p| p.id.clone())
        .partition(|id| mode.trains(ParamRole::of(id)));
    ParameterPartition { mode, theta, alpha }
}
