use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, Tensor};

pub const TOKEN_EMBEDDING: &str = "token_embedding";
pub const LM_HEAD: &str = "lm_head";
pub const FINAL_NORM: &str = "final_norm";

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    TokenEmbedding,
    LmHead,
    AttentionProjection,
    FeedForwardProjection,
    Norm,
    LoraA,
    LoraB,
}

/// The seven weight matrices of one decoder block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Projection {
    pub const ALL: [Projection; 7] = [
        Projection::Q,
        Projection::K,
        Projection::V,
        Projection::O,
        Projection::Gate,
        Projection::Up,
        Projection::Down,
    ];

    pub fn suffix(self) -> &'static str {
        match self {
            Projection::Q => "q_proj",
            Projection::K => "k_proj",
            Projection::V => "v_proj",
            Projection::O => "o_proj",
            Projection::Gate => "gate_proj",
            Projection::Up => "up_proj",
            Projection::Down => "down_proj",
        }
    }

    /// `(d_out, d_in)` of the weight matrix.
    pub fn shape(self, cfg: &ModelConfig) -> (usize, usize) {
        let d = cfg.d_model;
        match self {
            Projection::Q | Projection::K | Projection::V | Projection::O => (d, d),
            Projection::Gate | Projection::Up => (cfg.d_ffn, d),
            Projection::Down => (d, cfg.d_ffn),
        }
    }

    pub fn role(self) -> Role {
        match self {
            Projection::Q | Projection::K | Projection::V | Projection::O => Role::AttentionProjection,
            _ => Role::FeedForwardProjection,
        }
    }
}

pub fn projection_name(layer: usize, p: Projection) -> String {
    format!("layers.{layer}.{}", p.suffix())
}

pub fn attn_norm_name(layer: usize) -> String {
    format!("layers.{layer}.attn_norm")
}

pub fn ffn_norm_name(layer: usize) -> String {
    format!("layers.{layer}.ffn_norm")
}

/// Canonical `(name, role, shape)` listing of every base parameter.
pub fn parameter_layout(cfg: &ModelConfig) -> Vec<(String, Role, Vec<usize>)> {
    let (v, d) = (cfg.vocab_size, cfg.d_model);
    let mut out = vec![(TOKEN_EMBEDDING.to_string(), Role::TokenEmbedding, vec![v, d])];
    for l in 0..cfg.n_layers {
        out.push((attn_norm_name(l), Role::Norm, vec![d]));
        for p in [Projection::Q, Projection::K, Projection::V, Projection::O] {
            let (o, i) = p.shape(cfg);
            out.push((projection_name(l, p), p.role(), vec![o, i]));
        }
        out.push((ffn_norm_name(l), Role::Norm, vec![d]));
        for p in [Projection::Gate, Projection::Up, Projection::Down] {
            let (o, i) = p.shape(cfg);
            out.push((projection_name(l, p), p.role(), vec![o, i]));
        }
    }
    out.push((FINAL_NORM.to_string(), Role::Norm, vec![d]));
    out.push((LM_HEAD.to_string(), Role::LmHead, vec![v, d]));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub role: Role,
    pub tensor: Tensor,
}

/// Named, role-tagged tensors of a decoder, in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    config: ModelConfig,
    params: IndexMap<String, Parameter>,
}

impl ParameterStore {
    /// Assembles a store from loaded tensors, checking names, roles and shapes
    /// against the layout implied by `config`.
    pub fn from_parts(config: ModelConfig, params: IndexMap<String, Parameter>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = parameter_layout(&config);
        if layout.len() != params.len() {
            return Err(ModelError::Shape(format!(
                "expected {} tensors, found {}",
                layout.len(),
                params.len()
            )));
        }
        let mut ordered = IndexMap::with_capacity(layout.len());
        for (name, role, shape) in layout {
            let p = params
                .get(&name)
                .ok_or_else(|| ModelError::UnknownParameter(name.clone()))?;
            if p.role != role || p.tensor.shape() != shape.as_slice() {
                return Err(ModelError::Shape(format!(
                    "{name}: expected {role:?} {shape:?}, found {:?} {:?}",
                    p.role,
                    p.tensor.shape()
                )));
            }
            ordered.insert(name, p.clone());
        }
        Ok(ParameterStore { config, params: ordered })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor, ModelError> {
        self.params
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| ModelError::UnknownParameter(name.to_string()))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.tensor)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn num_parameters(&self) -> u64 {
        self.params.values().map(|p| p.tensor.numel() as u64).sum()
    }

    pub fn bit_eq(&self, other: &ParameterStore) -> bool {
        self.config == other.config
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((na, a), (nb, b))| na == nb && a.role == b.role && a.tensor.bit_eq(&b.tensor))
    }
}

/// Deterministically initializes a decoder: Gaussian weights with std 0.02
/// (output projections scaled by `1/sqrt(2·n_layers)`), unit norm gains.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<ParameterStore, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let residual_scale = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
    let mut params = IndexMap::new();
    for (name, role, shape) in parameter_layout(cfg) {
        let mut t = Tensor::zeros(&shape);
        match role {
            Role::Norm => t.data_mut().fill(1.0),
            _ => {
                let std = if name.ends_with("o_proj") || name.ends_with("down_proj") {
                    INIT_STD * residual_scale
                } else {
                    INIT_STD
                };
                let dist = Normal::new(0.0, std).expect("positive std");
                for v in t.data_mut() {
                    *v = dist.sample(&mut rng) as f32;
                }
            }
        }
        params.insert(name, Parameter { role, tensor: t });
    }
    Ok(ParameterStore { config: cfg.clone(), params })
}

/// How rows for newly added tokens are filled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitPolicy {
    Zero,
    /// Column mean of the existing rows plus Gaussian noise.
    Mean { noise_std: f64 },
    Random { std: f64 },
}

impl Default for InitPolicy {
    fn default() -> Self {
        InitPolicy::Mean { noise_std: 0.02 }
    }
}

/// Grows the token embedding and output head from `old_v` to `new_v` rows.
/// Existing rows are copied bit-for-bit.
pub fn expand_embeddings(
    store: &ParameterStore,
    old_v: usize,
    new_v: usize,
    policy: InitPolicy,
    seed: u64,
) -> Result<ParameterStore, ModelError> {
    if store.config.vocab_size != old_v {
        return Err(ModelError::Config(format!(
            "store has vocab_size {}, caller claims {old_v}",
            store.config.vocab_size
        )));
    }
    if new_v <= old_v {
        return Err(ModelError::Config(format!(
            "new vocabulary size {new_v} must exceed the current {old_v}"
        )));
    }
    let d = store.config.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = store.clone();
    out.config.vocab_size = new_v;
    for name in [TOKEN_EMBEDDING, LM_HEAD] {
        let old = store.tensor(name)?;
        let mut data = Vec::with_capacity(new_v * d);
        data.extend_from_slice(old.data());
        let mean: Vec<f64> = (0..d)
            .map(|j| (0..old_v).map(|i| old.row(i)[j] as f64).sum::<f64>() / old_v as f64)
            .collect();
        for _ in old_v..new_v {
            for m in &mean {
                let v = match policy {
                    InitPolicy::Zero => 0.0,
                    InitPolicy::Mean { noise_std } => m + gaussian(&mut rng, noise_std),
                    InitPolicy::Random { std } => gaussian(&mut rng, std),
                };
                data.push(v as f32);
            }
        }
        out.params.get_mut(name).expect("layout").tensor = Tensor::from_vec(&[new_v, d], data)?;
    }
    Ok(out)
}

fn gaussian(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    if std == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, std).expect("finite std").sample(rng)
}
