use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::store::{projection_name, Role};
use super::{ModelConfig, ModelError, ParameterStore, Projection, Tensor};

/// Which projections receive adapters, and with what rank and scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
    #[serde(default = "all_projections")]
    pub projections: Vec<Projection>,
}

fn all_projections() -> Vec<Projection> {
    Projection::ALL.to_vec()
}

impl Default for LoraSpec {
    fn default() -> Self {
        LoraSpec { rank: 8, alpha: 32.0, projections: all_projections() }
    }
}

impl LoraSpec {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Parameter names of every targeted projection in every layer.
    pub fn targets(&self, cfg: &ModelConfig) -> Vec<String> {
        (0..cfg.n_layers)
            .flat_map(|l| self.projections.iter().map(move |&p| projection_name(l, p)))
            .collect()
    }

    /// Adapter element count: `r · (d_in + d_out)` per targeted matrix.
    pub fn num_parameters(&self, cfg: &ModelConfig) -> u64 {
        let per_layer: u64 = self
            .projections
            .iter()
            .map(|p| {
                let (o, i) = p.shape(cfg);
                (self.rank * (o + i)) as u64
            })
            .sum();
        per_layer * cfg.n_layers as u64
    }
}

/// Low-rank update `(alpha / r) · B A` attached to one weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub target: String,
    pub rank: usize,
    pub alpha: f64,
    /// `r × d_in`
    pub a: Tensor,
    /// `d_out × r`
    pub b: Tensor,
}

impl LoraAdapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn a_name(&self) -> String {
        format!("{}.lora_a", self.target)
    }

    pub fn b_name(&self) -> String {
        format!("{}.lora_b", self.target)
    }

    pub fn num_parameters(&self) -> u64 {
        (self.a.numel() + self.b.numel()) as u64
    }
}

/// The adapters attached to one store. Once merged into the base weights the
/// set is consumed and refuses further use.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdapterSet {
    adapters: Vec<LoraAdapter>,
    consumed: bool,
}

impl AdapterSet {
    pub fn empty() -> Self {
        AdapterSet::default()
    }

    pub fn from_adapters(adapters: Vec<LoraAdapter>) -> Self {
        AdapterSet { adapters, consumed: false }
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.adapters.iter()
    }

    pub fn for_target(&self, target: &str) -> Option<&LoraAdapter> {
        self.adapters.iter().find(|a| a.target == target)
    }

    /// Names of all A and B tensors.
    pub fn parameter_names(&self) -> Vec<String> {
        self.adapters.iter().flat_map(|a| [a.a_name(), a.b_name()]).collect()
    }

    pub fn num_parameters(&self) -> u64 {
        self.adapters.iter().map(LoraAdapter::num_parameters).sum()
    }

    pub fn tensor(&self, name: &str) -> Option<(&Tensor, Role)> {
        self.adapters.iter().find_map(|a| {
            if name == a.a_name() {
                Some((&a.a, Role::LoraA))
            } else if name == a.b_name() {
                Some((&a.b, Role::LoraB))
            } else {
                None
            }
        })
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.adapters.iter_mut().find_map(|a| {
            if name == a.a_name() {
                Some(&mut a.a)
            } else if name == a.b_name() {
                Some(&mut a.b)
            } else {
                None
            }
        })
    }

    pub(crate) fn ensure_live(&self) -> Result<(), ModelError> {
        if self.consumed {
            Err(ModelError::AdaptersConsumed)
        } else {
            Ok(())
        }
    }

    pub fn bit_eq(&self, other: &AdapterSet) -> bool {
        self.consumed == other.consumed
            && self.adapters.len() == other.adapters.len()
            && self.adapters.iter().zip(&other.adapters).all(|(x, y)| {
                x.target == y.target
                    && x.rank == y.rank
                    && x.alpha.to_bits() == y.alpha.to_bits()
                    && x.a.bit_eq(&y.a)
                    && x.b.bit_eq(&y.b)
            })
    }
}

/// Attaches one adapter per target. A is drawn uniformly from
/// `±1/sqrt(d_in)`, B starts at zero so the adapted model initially equals
/// the base model.
pub fn attach_lora(
    store: &ParameterStore,
    targets: &[String],
    rank: usize,
    alpha: f64,
    seed: u64,
) -> Result<AdapterSet, ModelError> {
    if rank == 0 {
        return Err(ModelError::Config("LoRA rank must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adapters = Vec::with_capacity(targets.len());
    for target in targets {
        let param = store
            .get(target)
            .ok_or_else(|| ModelError::UnknownParameter(target.clone()))?;
        if !matches!(param.role, Role::AttentionProjection | Role::FeedForwardProjection) {
            return Err(ModelError::Config(format!("{target} is not a block projection")));
        }
        if adapters.iter().any(|a: &LoraAdapter| &a.target == target) {
            return Err(ModelError::Config(format!("{target} targeted twice")));
        }
        let (d_out, d_in) = (param.tensor.rows(), param.tensor.cols());
        if rank > d_in.min(d_out) {
            return Err(ModelError::Config(format!(
                "rank {rank} exceeds min(d_in, d_out) = {} for {target}",
                d_in.min(d_out)
            )));
        }
        let bound = 1.0 / (d_in as f64).sqrt();
        let mut a = Tensor::zeros(&[rank, d_in]);
        for v in a.data_mut() {
            *v = rng.random_range(-bound..bound) as f32;
        }
        adapters.push(LoraAdapter {
            target: target.clone(),
            rank,
            alpha,
            a,
            b: Tensor::zeros(&[d_out, rank]),
        });
    }
    Ok(AdapterSet::from_adapters(adapters))
}

/// Folds every adapter into its base weight (`W += scale · B A`) and marks
/// the set consumed.
pub fn merge_lora(store: &ParameterStore, adapters: &mut AdapterSet) -> Result<ParameterStore, ModelError> {
    adapters.ensure_live()?;
    let mut out = store.clone();
    for ad in &adapters.adapters {
        let w = out
            .tensor_mut(&ad.target)
            .ok_or_else(|| ModelError::UnknownParameter(ad.target.clone()))?;
        let (d_out, d_in) = (w.rows(), w.cols());
        if ad.a.shape() != [ad.rank, d_in] || ad.b.shape() != [d_out, ad.rank] {
            return Err(ModelError::Shape(format!(
                "adapter on {} has A {:?}, B {:?} for weight [{d_out}, {d_in}]",
                ad.target,
                ad.a.shape(),
                ad.b.shape()
            )));
        }
        let s = ad.scale();
        let (a, b) = (ad.a.data(), ad.b.data());
        let wd = w.data_mut();
        for o in 0..d_out {
            for i in 0..d_in {
                let mut acc = 0.0f64;
                for k in 0..ad.rank {
                    acc += b[o * ad.rank + k] as f64 * a[k * d_in + i] as f64;
                }
                let cell = &mut wd[o * d_in + i];
                *cell = (*cell as f64 + s * acc) as f32;
            }
        }
    }
    adapters.consumed = true;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ffn: 12,
            vocab_size: 11,
            max_seq_len: 16,
            rotary_base: 10_000.0,
            norm_eps: 1e-5,
        }
    }

    #[test]
    fn scale_is_alpha_over_rank() {
        let spec = LoraSpec::default();
        assert_eq!(spec.rank, 8);
        assert_eq!(spec.alpha, 32.0);
        assert_eq!(spec.scale(), 4.0);
    }

    #[test]
    fn llama_sized_adapter_total() {
        let spec = LoraSpec::default();
        let n = spec.num_parameters(&ModelConfig::llama2_7b(49_817));
        assert_eq!(n, 32 * (4 * 8 * (4096 + 4096) + 3 * 8 * (4096 + 11008)));
        assert_eq!(n, 19_988_480);
    }

    #[test]
    fn attach_errors() {
        let store = build_model(&cfg(), 0).unwrap();
        let err = attach_lora(&store, &["layers.9.q_proj".into()], 2, 4.0, 0).unwrap_err();
        assert!(err.to_string().contains("layers.9.q_proj"));
        assert!(attach_lora(&store, &["lm_head".into()], 2, 4.0, 0).is_err());
        assert!(attach_lora(&store, &["layers.0.q_proj".into()], 9, 4.0, 0).is_err());
    }

    #[test]
    fn attach_counts_and_zero_b() {
        let store = build_model(&cfg(), 0).unwrap();
        let spec = LoraSpec { rank: 2, alpha: 8.0, projections: all_projections() };
        let set = attach_lora(&store, &spec.targets(&cfg()), 2, 8.0, 1).unwrap();
        assert_eq!(set.len(), 14);
        assert_eq!(set.num_parameters(), spec.num_parameters(&cfg()));
        assert!(set.iter().all(|a| a.b.data().iter().all(|&v| v == 0.0)));
        assert!(set.iter().all(|a| a.a.data().iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn zero_b_merge_is_identity_and_second_merge_fails() {
        let store = build_model(&cfg(), 0).unwrap();
        let mut set = attach_lora(&store, &LoraSpec::default().targets(&cfg())[..3], 2, 8.0, 1).unwrap();
        let merged = merge_lora(&store, &mut set).unwrap();
        assert!(merged.bit_eq(&store));
        assert!(matches!(merge_lora(&store, &mut set), Err(ModelError::AdaptersConsumed)));
    }
}
