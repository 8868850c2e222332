//! On-disk checkpoints: a directory with `manifest.json`, one raw
//! little-endian `f32` blob per tensor and optionally `vocab.tsv`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{AdapterSet, LoraAdapter, ModelConfig, ModelError, Parameter, ParameterStore, Role, Tensor};
use crate::tokenizer::{TokenizerError, Vocabulary};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Manifest { path: String, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error("model configs differ: {0}")]
    ConfigMismatch(String),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.display().to_string(), source }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of any serializable value through its canonical JSON form.
pub fn json_hash<T: Serialize>(value: &T) -> String {
    sha256_hex(serde_json::to_string(value).expect("serializable").as_bytes())
}

/// One completed stage. `chain` commits to every earlier entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub stage: String,
    pub config_hash: String,
    pub data_hash: String,
    pub seed: u64,
    pub chain: String,
}

fn chain_hash(prev: &str, stage: &str, config_hash: &str, data_hash: &str, seed: u64) -> String {
    sha256_hex(format!("{prev}\n{stage}\n{config_hash}\n{data_hash}\n{seed}").as_bytes())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub entries: Vec<LineageEntry>,
}

impl Lineage {
    pub fn head(&self) -> &str {
        self.entries.last().map_or("", |e| e.chain.as_str())
    }

    pub fn push(&mut self, stage: &str, config_hash: &str, data_hash: &str, seed: u64) -> &LineageEntry {
        let chain = chain_hash(self.head(), stage, config_hash, data_hash, seed);
        self.entries.push(LineageEntry {
            stage: stage.into(),
            config_hash: config_hash.into(),
            data_hash: data_hash.into(),
            seed,
            chain,
        });
        self.entries.last().expect("just pushed")
    }

    pub fn stages(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.stage.as_str()).collect()
    }

    pub fn verify(&self) -> Result<(), CheckpointError> {
        let mut prev = String::new();
        for (i, e) in self.entries.iter().enumerate() {
            let want = chain_hash(&prev, &e.stage, &e.config_hash, &e.data_hash, e.seed);
            if want != e.chain {
                return Err(CheckpointError::Integrity(format!("lineage entry {i} ({}) does not chain", e.stage)));
            }
            prev = want;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub role: Role,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterEntry {
    pub target: String,
    pub rank: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub stage: Option<String>,
    pub lineage: Lineage,
    pub vocab_hash: Option<String>,
    pub tensors: Vec<TensorEntry>,
    pub adapters: Vec<AdapterEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub store: ParameterStore,
    pub adapters: AdapterSet,
    pub vocab: Option<Vocabulary>,
    pub stage: Option<String>,
    pub lineage: Lineage,
}

fn tensor_file(name: &str) -> String {
    format!("tensors/{name}.bin")
}

impl Checkpoint {
    pub fn new(store: ParameterStore, adapters: AdapterSet, vocab: Option<Vocabulary>) -> Self {
        Checkpoint { store, adapters, vocab, stage: None, lineage: Lineage::default() }
    }

    /// Name, role and tensor of every base and adapter parameter.
    pub fn tensors(&self) -> Vec<(String, Role, &Tensor)> {
        let mut out: Vec<(String, Role, &Tensor)> =
            self.store.iter().map(|(n, p)| (n.to_string(), p.role, &p.tensor)).collect();
        for a in self.adapters.iter() {
            out.push((a.a_name(), Role::LoraA, &a.a));
            out.push((a.b_name(), Role::LoraB, &a.b));
        }
        out
    }

    pub fn manifest(&self) -> CheckpointManifest {
        CheckpointManifest {
            format_version: FORMAT_VERSION,
            config: self.store.config().clone(),
            stage: self.stage.clone(),
            lineage: self.lineage.clone(),
            vocab_hash: self.vocab.as_ref().map(Vocabulary::content_hash),
            tensors: self
                .tensors()
                .into_iter()
                .map(|(name, role, t)| TensorEntry {
                    file: tensor_file(&name),
                    sha256: sha256_hex(&t.to_le_bytes()),
                    name,
                    shape: t.shape().to_vec(),
                    dtype: "f32".into(),
                    role,
                })
                .collect(),
            adapters: self
                .adapters
                .iter()
                .map(|a| AdapterEntry { target: a.target.clone(), rank: a.rank, alpha: a.alpha })
                .collect(),
        }
    }

    /// Writes into a sibling temporary directory and renames it into place,
    /// replacing any existing checkpoint at `dir`.
    pub fn save(&self, dir: &Path) -> Result<CheckpointManifest, CheckpointError> {
        if self.adapters.is_consumed() {
            return Err(CheckpointError::Integrity("adapters were merged and cannot be saved".into()));
        }
        let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(io(parent))?;
        let file_name = dir.file_name().ok_or_else(|| CheckpointError::Manifest {
            path: dir.display().to_string(),
            msg: "checkpoint path has no final component".into(),
        })?;
        let tmp: PathBuf = parent.join(format!(".{}.tmp", file_name.to_string_lossy()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(io(&tmp))?;
        }
        let tdir = tmp.join("tensors");
        fs::create_dir_all(&tdir).map_err(io(&tdir))?;
        let manifest = self.manifest();
        for (name, _, t) in self.tensors() {
            let p = tmp.join(tensor_file(&name));
            fs::write(&p, t.to_le_bytes()).map_err(io(&p))?;
        }
        if let Some(v) = &self.vocab {
            let p = tmp.join("vocab.tsv");
            fs::write(&p, v.to_tsv()).map_err(io(&p))?;
        }
        let p = tmp.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        fs::write(&p, json).map_err(io(&p))?;
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(io(dir))?;
        }
        fs::rename(&tmp, dir).map_err(io(dir))?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self, CheckpointError> {
        let manifest = read_manifest(dir)?;
        manifest.lineage.verify()?;
        let mut blobs: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut params = IndexMap::new();
        for e in &manifest.tensors {
            if e.dtype != "f32" {
                return Err(CheckpointError::Integrity(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            let p = dir.join(&e.file);
            let bytes = fs::read(&p).map_err(io(&p))?;
            if sha256_hex(&bytes) != e.sha256 {
                return Err(CheckpointError::Integrity(format!("{}: content hash differs from manifest", e.name)));
            }
            let t = Tensor::from_le_bytes(&e.shape, &bytes)?;
            match e.role {
                Role::LoraA | Role::LoraB => {
                    blobs.insert(e.name.clone(), t);
                }
                role => {
                    params.insert(e.name.clone(), Parameter { role, tensor: t });
                }
            }
        }
        let store = ParameterStore::from_parts(manifest.config.clone(), params)?;
        let mut adapters = Vec::new();
        for a in &manifest.adapters {
            let take = |suffix: &str, blobs: &mut BTreeMap<String, Tensor>| {
                blobs
                    .remove(&format!("{}.{suffix}", a.target))
                    .ok_or_else(|| CheckpointError::Integrity(format!("adapter {} lacks {suffix}", a.target)))
            };
            let la = take("lora_a", &mut blobs)?;
            let lb = take("lora_b", &mut blobs)?;
            let w = store.tensor(&a.target)?;
            let (d_out, d_in) = (w.rows(), w.cols());
            if la.shape() != [a.rank, d_in] || lb.shape() != [d_out, a.rank] {
                return Err(CheckpointError::Integrity(format!("adapter {} has inconsistent shapes", a.target)));
            }
            adapters.push(LoraAdapter { target: a.target.clone(), rank: a.rank, alpha: a.alpha, a: la, b: lb });
        }
        if let Some(extra) = blobs.keys().next() {
            return Err(CheckpointError::Integrity(format!("adapter tensor {extra} has no adapter entry")));
        }
        let vocab_path = dir.join("vocab.tsv");
        let vocab = if vocab_path.exists() {
            let v = Vocabulary::from_tsv(&fs::read_to_string(&vocab_path).map_err(io(&vocab_path))?)?;
            if manifest.vocab_hash.as_deref() != Some(v.content_hash().as_str()) {
                return Err(CheckpointError::Integrity("vocabulary hash differs from manifest".into()));
            }
            Some(v)
        } else {
            if manifest.vocab_hash.is_some() {
                return Err(CheckpointError::Integrity("manifest names a vocabulary but vocab.tsv is missing".into()));
            }
            None
        };
        Ok(Checkpoint {
            store,
            adapters: AdapterSet::from_adapters(adapters),
            vocab,
            stage: manifest.stage,
            lineage: manifest.lineage,
        })
    }
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest, CheckpointError> {
    let p = dir.join("manifest.json");
    let text = fs::read_to_string(&p).map_err(io(&p))?;
    let m: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| CheckpointError::Manifest { path: p.display().to_string(), msg: e.to_string() })?;
    if m.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Manifest {
            path: p.display().to_string(),
            msg: format!("unsupported format version {}", m.format_version),
        });
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorStatus {
    Equal,
    Changed,
    OnlyInA,
    OnlyInB,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorDiff {
    pub name: String,
    pub status: TensorStatus,
    /// Largest absolute element difference when both sides exist.
    pub max_abs_diff: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointDiff {
    pub tensors: Vec<TensorDiff>,
}

impl CheckpointDiff {
    /// Names whose status is anything but bitwise equal.
    pub fn changed(&self) -> Vec<&str> {
        self.tensors.iter().filter(|t| t.status != TensorStatus::Equal).map(|t| t.name.as_str()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.iter().all(|t| t.status == TensorStatus::Equal)
    }
}

/// Per-tensor bitwise comparison of two checkpoints sharing a model config.
pub fn verify_checkpoint(a: &Checkpoint, b: &Checkpoint) -> Result<CheckpointDiff, CheckpointError> {
    if a.store.config() != b.store.config() {
        return Err(CheckpointError::ConfigMismatch(format!("{:?} vs {:?}", a.store.config(), b.store.config())));
    }
    let ta = a.tensors();
    let tb: BTreeMap<String, &Tensor> = b.tensors().into_iter().map(|(n, _, t)| (n, t)).collect();
    let mut out = Vec::new();
    for (name, _, t) in &ta {
        let entry = match tb.get(name) {
            None => TensorDiff { name: name.clone(), status: TensorStatus::OnlyInA, max_abs_diff: None },
            Some(u) => {
                let equal = t.bit_eq(u);
                let max = t.data().iter().zip(u.data()).map(|(x, y)| (*x as f64 - *y as f64).abs()).fold(0.0, f64::max);
                TensorDiff {
                    name: name.clone(),
                    status: if equal { TensorStatus::Equal } else { TensorStatus::Changed },
                    max_abs_diff: Some(max),
                }
            }
        };
        out.push(entry);
    }
    let in_a: std::collections::BTreeSet<&String> = ta.iter().map(|(n, _, _)| n).collect();
    for name in tb.keys().filter(|n| !in_a.contains(n)) {
        out.push(TensorDiff { name: name.clone(), status: TensorStatus::OnlyInB, max_abs_diff: None });
    }
    Ok(CheckpointDiff { tensors: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{attach_lora, build_model, LoraSpec};

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ffn: 12,
            vocab_size: 11,
            max_seq_len: 16,
            rotary_base: 10000.0,
            norm_eps: 1e-5,
        }
    }

    fn ckpt() -> Checkpoint {
        let store = build_model(&tiny(), 1).unwrap();
        let targets = LoraSpec::default().targets(store.config());
        let adapters = attach_lora(&store, &targets, 2, 4.0, 2).unwrap();
        let mut c = Checkpoint::new(store, adapters, None);
        c.lineage.push("embed_align_mono", "abc", "def", 7);
        c.stage = Some("embed_align_mono".into());
        c
    }

    #[test]
    fn roundtrip_and_self_diff() {
        let dir = tempfile::tempdir().unwrap();
        let c = ckpt();
        c.save(&dir.path().join("ck")).unwrap();
        let back = Checkpoint::load(&dir.path().join("ck")).unwrap();
        assert!(back.store.bit_eq(&c.store));
        assert!(back.adapters.bit_eq(&c.adapters));
        assert_eq!(back.lineage, c.lineage);
        assert!(verify_checkpoint(&back, &c).unwrap().is_empty());
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let m1 = ckpt().save(&dir.path().join("a")).unwrap();
        let m2 = ckpt().save(&dir.path().join("b")).unwrap();
        assert_eq!(m1, m2);
        let read = |d: &str| fs::read(dir.path().join(d).join("manifest.json")).unwrap();
        assert_eq!(read("a"), read("b"));
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck");
        ckpt().save(&p).unwrap();
        let blob = p.join("tensors/lm_head.bin");
        let mut bytes = fs::read(&blob).unwrap();
        bytes[0] ^= 1;
        fs::write(&blob, bytes).unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(CheckpointError::Integrity(_))));
    }

    #[test]
    fn lineage_chain() {
        let mut l = Lineage::default();
        l.push("a", "h1", "d1", 1);
        l.push("b", "h2", "d2", 2);
        l.verify().unwrap();
        let mut bad = l.clone();
        bad.entries[0].seed = 3;
        assert!(bad.verify().is_err());
        assert_eq!(l.stages(), vec!["a", "b"]);
    }

    #[test]
    fn diff_reports_changes_and_config_mismatch() {
        let a = ckpt();
        let mut b = a.clone();
        b.store.tensor_mut("lm_head").unwrap().data_mut()[0] += 1.0;
        let d = verify_checkpoint(&a, &b).unwrap();
        assert_eq!(d.changed(), vec!["lm_head"]);
        let other = Checkpoint::new(build_model(&ModelConfig { vocab_size: 12, ..tiny() }, 1).unwrap(), AdapterSet::empty(), None);
        assert!(matches!(verify_checkpoint(&a, &other), Err(CheckpointError::ConfigMismatch(_))));
        let plain = Checkpoint::new(a.store.clone(), AdapterSet::empty(), None);
        let d = verify_checkpoint(&plain, &a).unwrap();
        assert!(d.tensors.iter().filter(|t| t.status == TensorStatus::OnlyInB).count() == 14);
    }
}
