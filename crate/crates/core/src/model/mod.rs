//! Residual backbone with per-block gated adapter banks.
//!
//! Every residual block computes
//!
//! ```text
//! x_{l+1} = x_l + f_θ(x_l) + Σ_k g_k(x_l) · h_{α_k}(x_l)
//! ```
//!
//! where `f_θ` is a 3×3 convolution followed by a per-channel affine map and a
//! ReLU, each `h_{α_k}` is a 1×1 convolution and `g` is a softmax gate over
//! the globally pooled block input. With `K = 1` the gate is identically one
//! and the block reduces to a single residual correction.

mod count;
mod partition;

pub use count::{count_params, implied_budget, ParamCount};
pub use partition::{make_partition, ParameterPartition, PartitionMode};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stage {
    pub channels: usize,
    pub blocks: usize,
}

/// Shape of the residual backbone.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub stages: Vec<Stage>,
    pub input_channels: usize,
    pub input_resolution: usize,
    /// Halve the resolution with a 2×2 mean pool right after the stem.
    pub stem_pool: bool,
    pub embedding_dim: usize,
    /// Output width of the classifier used only during pretraining.
    pub class_count: usize,
}

impl BackboneConfig {
    /// Three stages of two blocks at 16/32/64 channels on 32×32 RGB input.
    pub fn desk() -> Self {
        BackboneConfig {
            stages: vec![
                Stage {
                    channels: 16,
                    blocks: 2,
                },
                Stage {
                    channels: 32,
                    blocks: 2,
                },
                Stage {
                    channels: 64,
                    blocks: 2,
                },
            ],
            input_channels: 3,
            input_resolution: 32,
            stem_pool: true,
            embedding_dim: 64,
            class_count: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        if let Some(s) = self
            .stages
            .iter()
            .find(|s| s.blocks == 0 || s.channels == 0)
        {
            return Err(Error::Config(format!("empty stage {s:?}")));
        }
        if self.embedding_dim < 2 {
            return Err(Error::Config(
                "embedding dimension must be at least 2".into(),
            ));
        }
        if self.input_channels == 0 || self.class_count < 2 {
            return Err(Error::Config(
                "need input channels and at least two classes".into(),
            ));
        }
        let pools = self.stages.len() - 1 + usize::from(self.stem_pool);
        if self.input_resolution == 0 || !self.input_resolution.is_multiple_of(1 << pools) {
            return Err(Error::Config(format!(
                "input resolution {} is not divisible by 2^{pools}",
                self.input_resolution
            )));
        }
        Ok(())
    }

    pub fn last_channels(&self) -> usize {
        self.stages.last().map_or(0, |s| s.channels)
    }

    /// Stable textual fingerprint, folded into bundle headers.
    pub fn fingerprint(&self) -> String {
        let stages: Vec<String> = self
            .stages
            .iter()
            .map(|s| format!("{}x{}", s.channels, s.blocks))
            .collect();
        format!(
            "stages={};in={};res={};pool={};emb={};classes={}",
            stages.join(","),
            self.input_channels,
            self.input_resolution,
            self.stem_pool,
            self.embedding_dim,
            self.class_count
        )
    }
}

/// What a parameter belongs to, derived from its id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamRole {
    /// Pretrained body (θ).
    Backbone,
    /// 1×1 expert correction (α).
    Adapter,
    /// Gate of an adapter bank (α).
    Gate,
    /// Task-specific embedding projection (α).
    Head,
    /// Pretraining classifier, discarded after pretraining.
    Classifier,
}

impl ParamRole {
    pub fn of(id: &str) -> ParamRole {
        if id.starts_with("head.") {
            ParamRole::Head
        } else if id.starts_with("cls.") {
            ParamRole::Classifier
        } else if id.contains(".adapter") {
            ParamRole::Adapter
        } else if id.contains(".gate.") {
            ParamRole::Gate
        } else {
            ParamRole::Backbone
        }
    }

    /// Parameters stored per task in an adapter bundle.
    pub fn is_task_specific(self) -> bool {
        matches!(self, ParamRole::Adapter | ParamRole::Gate | ParamRole::Head)
    }
}

/// Parameter ids of one adapter bank.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdapterBank {
    pub corrections: Vec<String>,
    pub gate_weight: String,
    pub gate_bias: String,
}

impl AdapterBank {
    pub fn experts(&self) -> usize {
        self.corrections.len()
    }
}

/// Parameter ids of one residual block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResidualBlock {
    pub conv: String,
    pub scale: String,
    pub shift: String,
    pub adapters: Option<AdapterBank>,
}

impl ResidualBlock {
    fn named(prefix: &str, experts: Option<usize>) -> Self {
        ResidualBlock {
            conv: format!("{prefix}.conv"),
            scale: format!("{prefix}.scale"),
            shift: format!("{prefix}.shift"),
            adapters: experts.map(|k| AdapterBank {
                corrections: (0..k).map(|e| format!("{prefix}.adapter{e}")).collect(),
                gate_weight: format!("{prefix}.gate.w"),
                gate_bias: format!("{prefix}.gate.b"),
            }),
        }
    }
}

/// Conv + affine + ReLU layer with an optional 2×2 pool in front.
#[derive(Clone, Debug, PartialEq, Eq)]
struct Transition {
    conv: String,
    scale: String,
    shift: String,
    pool_before: bool,
    pool_after: bool,
}

/// Parameter layout and forward pass; holds no values.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub config: BackboneConfig,
    pub experts: Option<usize>,
    stem: Transition,
    stages: Vec<(Option<Transition>, Vec<ResidualBlock>)>,
}

impl Architecture {
    pub fn new(config: BackboneConfig, experts: Option<usize>) -> Result<Self> {
        config.validate()?;
        if experts == Some(0) {
            return Err(Error::Config(
                "an adapter bank needs at least one expert".into(),
            ));
        }
        let stem = Transition {
            conv: "stem.conv".into(),
            scale: "stem.scale".into(),
            shift: "stem.shift".into(),
            pool_before: false,
            pool_after: config.stem_pool,
        };
        let stages = config
            .stages
            .iter()
            .enumerate()
            .map(|(i, st)| {
                let down = (i > 0).then(|| Transition {
                    conv: format!("s{i}.down.conv"),
                    scale: format!("s{i}.down.scale"),
                    shift: format!("s{i}.down.shift"),
                    pool_before: true,
                    pool_after: false,
                });
                let blocks = (0..st.blocks)
                    .map(|j| ResidualBlock::named(&format!("s{i}.b{j}"), experts))
                    .collect();
                (down, blocks)
            })
            .collect();
        Ok(Architecture {
            config,
            experts,
            stem,
            stages,
        })
    }

    pub fn blocks(&self) -> impl Iterator<Item = &ResidualBlock> {
        self.stages.iter().flat_map(|(_, b)| b.iter())
    }

    /// `(id, shape)` of every backbone parameter, in forward order.
    pub fn backbone_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let cfg = &self.config;
        let mut push_layer = |t: &Transition, cin: usize, cout: usize| {
            out.push((t.conv.clone(), vec![cout, cin, 3, 3]));
            out.push((t.scale.clone(), vec![cout]));
            out.push((t.shift.clone(), vec![cout]));
        };
        push_layer(&self.stem, cfg.input_channels, cfg.stages[0].channels);
        let mut block_shapes = Vec::new();
        for (i, (down, blocks)) in self.stages.iter().enumerate() {
            let c = cfg.stages[i].channels;
            if let Some(d) = down {
                push_layer(d, cfg.stages[i - 1].channels, c);
            }
            for b in blocks {
                block_shapes.push((b.conv.clone(), vec![c, c, 3, 3]));
                block_shapes.push((b.scale.clone(), vec![c]));
                block_shapes.push((b.shift.clone(), vec![c]));
            }
        }
        out.extend(block_shapes);
        out
    }

    /// `(id, shape)` of every adapter and gate parameter.
    pub fn adapter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, (_, blocks)) in self.stages.iter().enumerate() {
            let c = self.config.stages[i].channels;
            for b in blocks {
                if let Some(bank) = &b.adapters {
                    for id in &bank.corrections {
                        out.push((id.clone(), vec![c, c, 1, 1]));
                    }
                    out.push((bank.gate_weight.clone(), vec![bank.experts(), c]));
                    out.push((bank.gate_bias.clone(), vec![bank.experts()]));
                }
            }
        }
        out
    }

    pub fn head_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, c) = (self.config.embedding_dim, self.config.last_channels());
        vec![("head.w".into(), vec![d, c]), ("head.b".into(), vec![d])]
    }

    pub fn classifier_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (k, c) = (self.config.class_count, self.config.last_channels());
        vec![("cls.w".into(), vec![k, c]), ("cls.b".into(), vec![k])]
    }

    fn transition<F: Real>(
        &self,
        tape: &mut Tape<F>,
        p: &ParamStore<F>,
        t: &Transition,
        x: Var,
    ) -> Result<Var> {
        let x = if t.pool_before { tape.avg_pool2(x)? } else { x };
        let k = tape.param_by_name(p, &t.conv)?;
        let (sc, sh) = (
            tape.param_by_name(p, &t.scale)?,
            tape.param_by_name(p, &t.shift)?,
        );
        let y = tape.conv2d(x, k, 1, 1)?;
        let y = tape.channel_affine(y, sc, sh)?;
        let y = tape.relu(y);
        if t.pool_after {
            tape.avg_pool2(y)
        } else {
            Ok(y)
        }
    }

    /// Globally pooled output of the last stage, `[n, last_channels]`.
    pub fn features<F: Real>(&self, tape: &mut Tape<F>, p: &ParamStore<F>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let cfg = &self.config;
        if s.len() != 4
            || s[1] != cfg.input_channels
            || s[2] != cfg.input_resolution
            || s[3] != cfg.input_resolution
        {
            return Err(Error::Config(format!(
                "input {:?} does not match backbone [n,{},{},{}]",
                s, cfg.input_channels, cfg.input_resolution, cfg.input_resolution
            )));
        }
        let mut h = self.transition(tape, p, &self.stem, x)?;
        for (down, blocks) in &self.stages {
            if let Some(d) = down {
                h = self.transition(tape, p, d, h)?;
            }
            for b in blocks {
                h = block_forward(tape, p, h, b)?;
            }
        }
        tape.global_avg_pool(h)
    }

    /// Task embedding `f(x)`, `[n, embedding_dim]`.
    pub fn embed<F: Real>(&self, tape: &mut Tape<F>, p: &ParamStore<F>, x: Var) -> Result<Var> {
        let f = self.features(tape, p, x)?;
        let (w, b) = (
            tape.param_by_name(p, "head.w")?,
            tape.param_by_name(p, "head.b")?,
        );
        tape.linear(f, w, b)
    }

    /// Pretraining class logits, `[n, class_count]`.
    pub fn logits<F: Real>(&self, tape: &mut Tape<F>, p: &ParamStore<F>, x: Var) -> Result<Var> {
        let f = self.features(tape, p, x)?;
        let (w, b) = (
            tape.param_by_name(p, "cls.w")?,
            tape.param_by_name(p, "cls.b")?,
        );
        tape.linear(f, w, b)
    }
}

/// Convex expert weights `softmax(W·pool(x) + b)`, `[n, K]`.
pub fn gate<F: Real>(
    tape: &mut Tape<F>,
    p: &ParamStore<F>,
    x: Var,
    bank: &AdapterBank,
) -> Result<Var> {
    let pooled = tape.global_avg_pool(x)?;
    let (w, b) = (
        tape.param_by_name(p, &bank.gate_weight)?,
        tape.param_by_name(p, &bank.gate_bias)?,
    );
    let logits = tape.linear(pooled, w, b)?;
    tape.softmax(logits)
}

/// `x + f_θ(x) + Σ_k g_k(x)·h_{α_k}(x)`.
pub fn block_forward<F: Real>(
    tape: &mut Tape<F>,
    p: &ParamStore<F>,
    x: Var,
    block: &ResidualBlock,
) -> Result<Var> {
    let k = tape.param_by_name(p, &block.conv)?;
    let (sc, sh) = (
        tape.param_by_name(p, &block.scale)?,
        tape.param_by_name(p, &block.shift)?,
    );
    let f = tape.conv2d(x, k, 1, 1)?;
    let f = tape.channel_affine(f, sc, sh)?;
    let f = tape.relu(f);
    let y = tape.add(x, f)?;
    let Some(bank) = &block.adapters else {
        return Ok(y);
    };
    let g = gate(tape, p, x, bank)?;
    let mut correction = None;
    for (e, id) in bank.corrections.iter().enumerate() {
        let a = tape.param_by_name(p, id)?;
        let h = tape.conv2d(x, a, 1, 0)?;
        let w = tape.column(g, e)?;
        let term = tape.scale_rows(h, w)?;
        correction = Some(match correction {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    match correction {
        Some(c) => tape.add(y, c),
        None => Ok(y),
    }
}

/// Fan-based uniform draw: fan-in (He) scaling for convolution kernels,
/// which feed ReLUs, and Xavier/Glorot scaling for linear maps.
fn fan_scaled(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    let receptive: usize = shape[2..].iter().product();
    let fan_in = shape[1] * receptive;
    let fan_out = shape[0] * receptive;
    let limit = if shape.len() == 4 {
        (6.0 / fan_in as f64).sqrt()
    } else {
        (6.0 / (fan_in + fan_out) as f64).sqrt()
    };
    Tensor::from_fn(shape, |_| rng.random_range(-limit..limit) as f32)
}

fn init_layer(
    store: &mut ParamStore<f32>,
    rng: &mut ChaCha8Rng,
    shapes: &[(String, Vec<usize>)],
    trainable: bool,
) -> Result<()> {
    for (id, shape) in shapes {
        let value = if id.ends_with(".scale") {
            Tensor::full(shape, 1.0)
        } else if shape.len() == 1 {
            Tensor::zeros(shape)
        } else {
            fan_scaled(rng, shape)
        };
        store.insert(id, value, trainable)?;
    }
    Ok(())
}

/// Pretrained θ snapshot together with its content hash.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub params: ParamStore<f32>,
}

impl Backbone {
    pub fn hash(&self) -> [u8; 32] {
        self.params
            .content_hash(|p| ParamRole::of(&p.id) == ParamRole::Backbone)
    }

    /// Freshly initialized backbone, for from-scratch baselines.
    pub fn random(config: BackboneConfig, seed: u64) -> Result<Self> {
        let arch = Architecture::new(config.clone(), None)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_layer(&mut params, &mut rng, &arch.backbone_shapes(), false)?;
        Ok(Backbone { config, params })
    }
}

/// An architecture together with parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    pub params: ParamStore<f32>,
}

impl Model {
    /// Randomly initialized backbone with a classifier head, all trainable.
    pub fn for_pretraining(config: BackboneConfig, seed: u64) -> Result<Self> {
        let arch = Architecture::new(config, None)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_layer(&mut params, &mut rng, &arch.backbone_shapes(), true)?;
        init_layer(&mut params, &mut rng, &arch.classifier_shapes(), true)?;
        Ok(Model { arch, params })
    }

    /// θ copied from `backbone` (frozen), plus zero-initialized adapter banks
    /// with `experts` corrections per block (if any) and a fresh embedding head.
    pub fn from_backbone(backbone: &Backbone, experts: Option<usize>, seed: u64) -> Result<Self> {
        let arch = Architecture::new(backbone.config.clone(), experts)?;
        let mut params = ParamStore::new();
        for (id, shape) in arch.backbone_shapes() {
            let p = backbone.params.by_name(&id)?;
            if p.value.shape() != shape.as_slice() {
                return Err(Error::Dimension {
                    op: "from_backbone",
                    lhs: shape,
                    rhs: p.value.shape().to_vec(),
                });
            }
            params.insert(&id, p.value.clone(), false)?;
        }
        for (id, shape) in arch.adapter_shapes() {
            params.insert(&id, Tensor::zeros(&shape), true)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_layer(&mut params, &mut rng, &arch.head_shapes(), true)?;
        Ok(Model { arch, params })
    }

    pub fn has_adapters(&self) -> bool {
        self.arch.experts.is_some()
    }

    /// Hash of the θ parameters only.
    pub fn theta_hash(&self) -> [u8; 32] {
        self.params
            .content_hash(|p| ParamRole::of(&p.id) == ParamRole::Backbone)
    }

    /// θ snapshot of this model.
    pub fn backbone(&self) -> Result<Backbone> {
        let mut params = ParamStore::new();
        for p in self
            .params
            .iter()
            .filter(|p| ParamRole::of(&p.id) == ParamRole::Backbone)
        {
            params.insert(&p.id, p.value.clone(), false)?;
        }
        Ok(Backbone {
            config: self.arch.config.clone(),
            params,
        })
    }

    /// Embeddings of a batch, evaluated in chunks without recording gradients.
    pub fn embed_tensor(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.eval_chunked(x, |arch, tape, p, v| arch.embed(tape, p, v))
    }

    /// Pooled backbone features of a batch.
    pub fn features_tensor(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.eval_chunked(x, |arch, tape, p, v| arch.features(tape, p, v))
    }

    pub fn logits_tensor(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.eval_chunked(x, |arch, tape, p, v| arch.logits(tape, p, v))
    }

    fn eval_chunked(
        &self,
        x: &Tensor<f32>,
        f: impl Fn(&Architecture, &mut Tape<f32>, &ParamStore<f32>, Var) -> Result<Var>,
    ) -> Result<Tensor<f32>> {
        const CHUNK: usize = 128;
        let n = x.shape().first().copied().unwrap_or(0);
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            let mut tape = Tape::trainable_only();
            let v = tape.input(x.slice_rows(start, end));
            let out = f(&self.arch, &mut tape, &self.params, v)?;
            parts.push(tape.value(out).clone());
            start = end;
        }
        if parts.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let refs: Vec<&Tensor<f32>> = parts.iter().collect();
        Tensor::concat_rows(&refs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            stages: vec![
                Stage {
                    channels: 4,
                    blocks: 1,
                },
                Stage {
                    channels: 6,
                    blocks: 2,
                },
            ],
            input_channels: 3,
            input_resolution: 8,
            stem_pool: true,
            embedding_dim: 5,
            class_count: 3,
        }
    }

    #[test]
    fn roles_follow_ids() {
        assert_eq!(ParamRole::of("s0.b1.conv"), ParamRole::Backbone);
        assert_eq!(ParamRole::of("s1.down.scale"), ParamRole::Backbone);
        assert_eq!(ParamRole::of("s0.b1.adapter3"), ParamRole::Adapter);
        assert_eq!(ParamRole::of("s0.b1.gate.w"), ParamRole::Gate);
        assert_eq!(ParamRole::of("head.b"), ParamRole::Head);
        assert_eq!(ParamRole::of("cls.w"), ParamRole::Classifier);
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        assert!(c.validate().is_ok());
        c.embedding_dim = 1;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.input_resolution = 6;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.stages.clear();
        assert!(c.validate().is_err());
        assert!(BackboneConfig::desk().validate().is_ok());
    }

    #[test]
    fn embedding_shape_and_resolution_check() {
        let pre = Model::for_pretraining(tiny(), 1).unwrap();
        let m = Model::from_backbone(&pre.backbone().unwrap(), Some(2), 2).unwrap();
        let x = Tensor::<f32>::from_fn(&[3, 3, 8, 8], |i| (i % 7) as f32 * 0.1);
        assert_eq!(m.embed_tensor(&x).unwrap().shape(), &[3, 5]);
        let bad = Tensor::<f32>::zeros(&[1, 3, 16, 16]);
        assert!(matches!(m.embed_tensor(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn zero_experts_rejected() {
        assert!(Architecture::new(tiny(), Some(0)).is_err());
    }
}
