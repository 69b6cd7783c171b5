use super::{Architecture, BackboneConfig};
use crate::error::{Error, Result};

/// Storage needed to serve `tasks` anomaly detectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub theta: usize,
    /// Adapters, gates and embedding head of one task.
    pub alpha_per_task: usize,
    /// One shared backbone plus one adapter set per task.
    pub adra_total: usize,
    /// One full backbone copy per task.
    pub naive_total: usize,
}

fn numel(shapes: &[(String, Vec<usize>)]) -> usize {
    shapes
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// Count parameters of a backbone with `experts` corrections per block.
pub fn count_params(
    config: &BackboneConfig,
    experts: Option<usize>,
    tasks: usize,
) -> Result<ParamCount> {
    let arch = Architecture::new(config.clone(), experts)?;
    let theta = numel(&arch.backbone_shapes());
    let alpha_per_task = if experts.is_some() {
        numel(&arch.adapter_shapes()) + numel(&arch.head_shapes())
    } else {
        0
    };
    Ok(ParamCount {
        theta,
        alpha_per_task,
        adra_total: theta + tasks * alpha_per_task,
        naive_total: tasks * theta,
    })
}

/// Back out `(|θ|, |α| per task)` from two reported totals: `naive_total`
/// for `tasks` full copies and `adra_total` for one shared backbone plus
/// `tasks` adapter sets.
pub fn implied_budget(naive_total: f64, adra_total: f64, tasks: usize) -> Result<(f64, f64)> {
    if tasks == 0
        || !naive_total.is_finite()
        || naive_total <= 0.0
        || !adra_total.is_finite()
        || adra_total <= 0.0
    {
        return Err(Error::Config(
            "need positive totals and at least one task".into(),
        ));
    }
    let theta = naive_total / tasks as f64;
    let alpha = (adra_total - theta) / tasks as f64;
    if alpha < 0.0 {
        return Err(Error::Config(format!(
            "adra total {adra_total} is below one backbone ({theta})"
        )));
    }
    Ok((theta, alpha))
}
