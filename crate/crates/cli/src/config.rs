//! Run configuration: one TOML file, every section defaulted.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use golden_layer::attribution::{CmaOptions, CmaSite, LgaOptions};
use golden_layer::editors::{CovarianceSite, EditorKind, EditorSpec, ValueOptions};
use golden_layer::eval::{MetricWeights, SelectionMetric, SweepOptions};
use golden_layer::model::{ModelConfig, TrainOptions};
use golden_layer::par::Exec;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds world generation, the edit set, model init and training.
    pub seed: u64,
    pub out: PathBuf,
    pub world: WorldConfig,
    pub edits: EditsConfig,
    pub model: ModelShape,
    pub train: TrainConfig,
    pub editor: EditorConfig,
    pub attribution: AttributionConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_facts: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditsConfig {
    pub n_edits: usize,
    pub proxy_fraction: f64,
    pub split_seed: u64,
}

/// Model shape; the vocabulary size comes from the generated world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelShape {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub context_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub stop_accuracy: f64,
    /// 0 = once per epoch.
    pub eval_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditorConfig {
    pub kind: EditorKind,
    pub value: ValueOptions,
    pub covariance_reg: f64,
    pub covariance_site: CovarianceSite,
    /// Defaults to 8 for r-rome and 0 otherwise.
    pub context_prefixes: Option<usize>,
    pub prefix_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttributionConfig {
    pub tukey_k: f64,
    pub cma_noise_seeds: usize,
    pub cma_noise_multiplier: f64,
    pub cma_seed: u64,
    pub cma_site: CmaSite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub metric: SelectionMetric,
    pub weights: MetricWeights,
    /// Batch size for EMMET in the comparison table.
    pub emmet_batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("run"),
            world: WorldConfig::default(),
            edits: EditsConfig::default(),
            model: ModelShape::default(),
            train: TrainConfig::default(),
            editor: EditorConfig::default(),
            attribution: AttributionConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_entities: 48,
            n_relations: 5,
            n_facts: 110,
        }
    }
}

impl Default for EditsConfig {
    fn default() -> Self {
        Self {
            n_edits: 100,
            proxy_fraction: 0.1,
            split_seed: 0,
        }
    }
}

impl Default for ModelShape {
    fn default() -> Self {
        let c = ModelConfig::with_vocab(0);
        Self {
            n_layers: c.n_layers,
            d_model: c.d_model,
            n_heads: c.n_heads,
            d_mlp: c.d_mlp,
            context_len: c.context_len,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        let t = TrainOptions::default();
        Self {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            max_steps: t.max_steps,
            stop_accuracy: t.stop_accuracy,
            eval_every: t.eval_every,
        }
    }
}

impl Default for EditorConfig {
    fn default() -> Self {
        let s = EditorSpec::new(EditorKind::RRome, 0);
        Self {
            kind: s.kind,
            value: s.value,
            covariance_reg: s.covariance_reg,
            covariance_site: s.covariance_site,
            context_prefixes: None,
            prefix_seed: s.prefix_seed,
        }
    }
}

impl Default for AttributionConfig {
    fn default() -> Self {
        let c = CmaOptions::default();
        Self {
            tukey_k: LgaOptions::default().tukey_k,
            cma_noise_seeds: c.noise_seeds,
            cma_noise_multiplier: c.noise_multiplier,
            cma_seed: c.seed,
            cma_site: c.site,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metric: SelectionMetric::Rewrite,
            weights: MetricWeights::default(),
            emmet_batch: 4,
        }
    }
}

/// First 16 hex digits of the SHA-256 of a value's JSON encoding.
pub fn hash_of<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    let digest = Sha256::digest(&bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::MissingInput(path.to_path_buf()),
            _ => CliError::io(path, e),
        })?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::InvalidConfig(e.message().replace('\n', " ")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Every violated constraint, in a fixed order.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        let w = &self.world;
        if w.n_entities == 0 || w.n_relations == 0 || w.n_facts == 0 {
            p.push("world counts must be positive".to_string());
        }
        if w.n_facts > w.n_entities * w.n_relations {
            p.push(format!("world.n_facts {} exceeds n_entities × n_relations", w.n_facts));
        }
        if self.edits.n_edits == 0 || self.edits.n_edits > w.n_facts {
            p.push(format!("edits.n_edits must be in 1..={}", w.n_facts));
        }
        if !(self.edits.proxy_fraction > 0.0 && self.edits.proxy_fraction < 1.0) {
            p.push("edits.proxy_fraction must be in (0, 1)".to_string());
        }
        let m = &self.model;
        if m.n_layers == 0 || m.d_model == 0 || m.n_heads == 0 || m.d_mlp == 0 || m.context_len == 0 {
            p.push("model dimensions must be positive".to_string());
        } else if m.d_model % m.n_heads != 0 {
            p.push("model.d_model must be divisible by model.n_heads".to_string());
        }
        let t = &self.train;
        if !(t.learning_rate > 0.0) || t.batch_size == 0 || t.max_steps == 0 {
            p.push("train.learning_rate, batch_size and max_steps must be positive".to_string());
        }
        if !(0.0..=1.0).contains(&t.stop_accuracy) {
            p.push("train.stop_accuracy must be in [0, 1]".to_string());
        }
        if let Err(e) = self.editor_spec(0).validate() {
            p.push(format!("editor: {e}"));
        }
        let a = &self.attribution;
        if !(a.tukey_k >= 0.0) {
            p.push("attribution.tukey_k must be non-negative".to_string());
        }
        if a.cma_noise_seeds == 0 || !(a.cma_noise_multiplier >= 0.0) {
            p.push("attribution.cma_noise_seeds must be positive and the multiplier non-negative".to_string());
        }
        if self.eval.emmet_batch == 0 {
            p.push("eval.emmet_batch must be positive".to_string());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(CliError::InvalidConfig(p.join("; ")))
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            n_layers: m.n_layers,
            d_model: m.d_model,
            n_heads: m.n_heads,
            d_mlp: m.d_mlp,
            context_len: m.context_len,
            vocab_size,
        }
    }

    pub fn train_options(&self, exec: Exec) -> TrainOptions {
        let t = &self.train;
        TrainOptions {
            stop_accuracy: t.stop_accuracy,
            max_steps: t.max_steps,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            eval_every: t.eval_every,
            seed: self.seed,
            exec,
        }
    }

    pub fn editor_spec(&self, layer: usize) -> EditorSpec {
        let e = &self.editor;
        let mut spec = EditorSpec::new(e.kind, layer);
        spec.value = e.value;
        spec.covariance_reg = e.covariance_reg;
        spec.covariance_site = e.covariance_site;
        if let Some(n) = e.context_prefixes {
            spec.context_prefixes = n;
        }
        spec.prefix_seed = e.prefix_seed;
        spec
    }

    pub fn lga_options(&self, exec: Exec) -> LgaOptions {
        LgaOptions {
            tukey_k: self.attribution.tukey_k,
            exec,
        }
    }

    pub fn cma_options(&self, exec: Exec) -> CmaOptions {
        let a = &self.attribution;
        CmaOptions {
            noise_seeds: a.cma_noise_seeds,
            noise_multiplier: a.cma_noise_multiplier,
            seed: a.cma_seed,
            site: a.cma_site,
            exec,
        }
    }

    pub fn sweep_options(&self, exec: Exec) -> SweepOptions {
        SweepOptions {
            metric: self.eval.metric,
            weights: self.eval.weights,
            exec,
        }
    }

    /// World and edit set.
    pub fn gen_hash(&self) -> String {
        hash_of(&("gen", self.seed, &self.world, &self.edits.n_edits))
    }

    /// Trained checkpoint.
    pub fn train_hash(&self) -> String {
        hash_of(&("train", self.gen_hash(), &self.model, &self.train))
    }

    /// Layer score tables (computed on the proxy split).
    pub fn attr_hash(&self) -> String {
        hash_of(&("attr", self.train_hash(), self.split(), &self.attribution))
    }

    /// Editing runs: single edits and sweeps.
    pub fn edit_hash(&self) -> String {
        hash_of(&("edit", self.train_hash(), self.split(), self.editor_spec(0), &self.eval))
    }

    /// Comparison table and runtime record.
    pub fn compare_hash(&self) -> String {
        hash_of(&("compare", self.edit_hash(), self.attr_hash()))
    }

    fn split(&self) -> (u64, f64, u64) {
        let e = &self.edits;
        (e.n_edits as u64, e.proxy_fraction, e.split_seed)
    }
}

/// The leading 64 bits of a hash string, stored as the checkpoint tag.
pub fn hash_tag(hash: &str) -> u64 {
    u64::from_str_radix(hash, 16).expect("hash is 16 hex digits")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(RunConfig::from_toml("").unwrap(), c);
        assert!(c.problems().is_empty(), "{:?}", c.problems());
    }

    #[test]
    fn hashes_track_their_sections() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out = PathBuf::from("elsewhere");
        assert_eq!(a.compare_hash(), b.compare_hash());
        b.eval.metric = SelectionMetric::Overall;
        assert_eq!(a.train_hash(), b.train_hash());
        assert_ne!(a.edit_hash(), b.edit_hash());
        b.seed = 1;
        assert_ne!(a.gen_hash(), b.gen_hash());
        assert_eq!(a.gen_hash().len(), 16);
        assert_eq!(format!("{:016x}", hash_tag(&a.gen_hash())), a.gen_hash());
    }

    #[test]
    fn problems_are_enumerated() {
        let c = RunConfig::from_toml("[world]\nn_facts = 1000\n[eval]\nemmet_batch = 0\n").unwrap();
        assert_eq!(c.problems().len(), 2);
        assert!(RunConfig::from_toml("[world]\nbogus = 1\n").is_err());
    }
}
