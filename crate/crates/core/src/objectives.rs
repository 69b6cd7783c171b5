//! Radial scoring and the training objectives built on it.

use crate::autodiff::{ParamStore, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::Model;

/// Lower clamp on `h` inside the corpus term.
pub const H_FLOOR: f64 = 1e-9;

/// Where a training sample came from; fixes its pseudo-label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Origin {
    Nominal,
    Corpus,
}

/// `sqrt(‖z‖² + 1) − 1`.
pub fn radial(z: &[f32]) -> f32 {
    let s: f32 = z.iter().map(|v| v * v).sum();
    s / ((s + 1.0).sqrt() + 1.0)
}

/// Per-sample term for a corpus sample: `−ln(1 − exp(−h))`.
pub fn corpus_term(h: f64) -> f64 {
    -(-(-h.max(H_FLOOR)).exp_m1()).ln()
}

/// Mean of `h` over nominal samples and `−ln(1 − exp(−h))` over corpus
/// samples, for embeddings `[n, d]`.
pub fn hsc_loss<F: Real>(tape: &mut Tape<F>, embeddings: Var, origins: &[Origin]) -> Result<Var> {
    let n = tape.shape(embeddings).first().copied().unwrap_or(0);
    if origins.is_empty() || n == 0 {
        return Err(Error::Contract("hsc loss of an empty batch".into()));
    }
    if origins.len() != n {
        return Err(Error::Dimension {
            op: "hsc_loss",
            lhs: tape.shape(embeddings).to_vec(),
            rhs: vec![origins.len()],
        });
    }
    let h = tape.radial(embeddings)?;
    if origins.iter().all(|&o| o == Origin::Nominal) {
        return tape.mean(h);
    }
    let pushed = tape.neg_log1m_exp(h, F::of(H_FLOOR));
    let mask: Vec<bool> = origins.iter().map(|&o| o == Origin::Nominal).collect();
    let per_sample = tape.select(&mask, h, pushed)?;
    tape.mean(per_sample)
}

/// Mean radial distance of nominal-only embeddings `[n, d]`.
pub fn one_class_loss<F: Real>(
    tape: &mut Tape<F>,
    embeddings: Var,
    origins: &[Origin],
) -> Result<Var> {
    if origins.contains(&Origin::Corpus) {
        return Err(Error::Contract(
            "one-class loss received corpus samples".into(),
        ));
    }
    hsc_loss(tape, embeddings, origins)
}

/// `strength · Σ ‖p − anchor‖²` over every parameter id in `anchor`.
pub fn l2sp_penalty<F: Real>(
    tape: &mut Tape<F>,
    current: &ParamStore<F>,
    anchor: &ParamStore<F>,
    strength: F,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for a in anchor.iter() {
        let p = current.by_name(&a.id).map_err(|_| {
            Error::Contract(format!("anchor parameter `{}` missing from model", a.id))
        })?;
        if p.value.shape() != a.value.shape() {
            return Err(Error::Contract(format!(
                "anchor `{}` has shape {:?}, model has {:?}",
                a.id,
                a.value.shape(),
                p.value.shape()
            )));
        }
        let pv = tape.param_by_name(current, &a.id)?;
        let av = tape.input(a.value.clone());
        let d = tape.sub(pv, av)?;
        let sq = tape.square(d);
        let s = tape.sum(sq);
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    match total {
        Some(t) => Ok(tape.scale(t, strength)),
        None => Ok(tape.input(Tensor::scalar(F::zero()))),
    }
}

/// Anomaly score `h(f(x))` of every sample in `x`; larger is more anomalous.
pub fn score(model: &Model, x: &Tensor<f32>) -> Result<Vec<f32>> {
    let emb = model.embed_tensor(x)?;
    let d = emb.row_len();
    Ok(emb.data().chunks(d).map(radial).collect())
}
