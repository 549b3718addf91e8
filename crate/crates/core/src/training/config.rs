use std::fmt;
use std::path::Path;

use crate::error::{Result, SencaError};
use crate::ingestion::PreprocessConfig;

/// Every knob of a training run.
///
/// Read from flat `key = value` files whose keys are the field names below;
/// `#` starts a comment. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lambda: f64,
    pub temperature: f64,
    pub window_factor: f64,
    pub pool_factor: f64,
    pub dropout: f64,
    pub seed: u64,
    pub k_neighbors: usize,
    pub n_hvg: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub use_cross_attention: bool,
    pub use_hierarchical: bool,
    pub steps_per_epoch: usize,
    /// Key/query/value width of the cross-attention; 0 means `embed_dim`.
    pub attn_dim: usize,
    pub image_hidden: usize,
    pub min_gene_total: f64,
    pub target_sum: f64,
    pub hvg_bins: usize,
    /// Patch half-width in spot spacings, raster inputs only.
    pub patch_degree: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            lr: 5e-4,
            lambda: 40.0,
            temperature: 0.5,
            window_factor: 2.0,
            pool_factor: 4.0,
            dropout: 0.2,
            seed: 0,
            k_neighbors: 4,
            n_hvg: 500,
            embed_dim: 128,
            hidden_dim: 256,
            latent_dim: 64,
            use_cross_attention: true,
            use_hierarchical: true,
            steps_per_epoch: 1,
            attn_dim: 0,
            image_hidden: 256,
            min_gene_total: 10.0,
            target_sum: 1e4,
            hvg_bins: 20,
            patch_degree: 3,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| SencaError::Config(format!("bad value {raw:?} for {key}")))
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(SencaError::Config(format!("bad value {raw:?} for {key}, expected true/false"))),
    }
}

impl TrainConfig {
    pub fn attention_width(&self) -> usize {
        if self.attn_dim == 0 {
            self.embed_dim
        } else {
            self.attn_dim
        }
    }

    pub fn preprocess(&self) -> PreprocessConfig {
        PreprocessConfig {
            min_total: self.min_gene_total,
            target_sum: self.target_sum,
            n_hvg: self.n_hvg,
            n_bins: self.hvg_bins,
        }
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse_value(key, raw)?,
            "lr" => self.lr = parse_value(key, raw)?,
            "lambda" => self.lambda = parse_value(key, raw)?,
            "temperature" => self.temperature = parse_value(key, raw)?,
            "window_factor" => self.window_factor = parse_value(key, raw)?,
            "pool_factor" => self.pool_factor = parse_value(key, raw)?,
            "dropout" => self.dropout = parse_value(key, raw)?,
            "seed" => self.seed = parse_value(key, raw)?,
            "k_neighbors" => self.k_neighbors = parse_value(key, raw)?,
            "n_hvg" => self.n_hvg = parse_value(key, raw)?,
            "embed_dim" => self.embed_dim = parse_value(key, raw)?,
            "hidden_dim" => self.hidden_dim = parse_value(key, raw)?,
            "latent_dim" => self.latent_dim = parse_value(key, raw)?,
            "use_cross_attention" => self.use_cross_attention = parse_bool(key, raw)?,
            "use_hierarchical" => self.use_hierarchical = parse_bool(key, raw)?,
            "steps_per_epoch" => self.steps_per_epoch = parse_value(key, raw)?,
            "attn_dim" => self.attn_dim = parse_value(key, raw)?,
            "image_hidden" => self.image_hidden = parse_value(key, raw)?,
            "min_gene_total" => self.min_gene_total = parse_value(key, raw)?,
            "target_sum" => self.target_sum = parse_value(key, raw)?,
            "hvg_bins" => self.hvg_bins = parse_value(key, raw)?,
            "patch_degree" => self.patch_degree = parse_value(key, raw)?,
            other => return Err(SencaError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of the defaults and validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                SencaError::Config(format!("line {}: expected key = value", n + 1))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| SencaError::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SencaError::io(path, e))?;
        Self::parse(&text).map_err(|e| SencaError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SencaError::Config(msg));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        if !(self.window_factor >= 1.0 && self.pool_factor > self.window_factor) {
            return bad(format!(
                "need pool_factor > window_factor >= 1, got {} and {}",
                self.pool_factor, self.window_factor
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        for (name, v) in [
            ("k_neighbors", self.k_neighbors),
            ("n_hvg", self.n_hvg),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("latent_dim", self.latent_dim),
            ("steps_per_epoch", self.steps_per_epoch),
            ("image_hidden", self.image_hidden),
            ("hvg_bins", self.hvg_bins),
            ("patch_degree", self.patch_degree),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        Ok(())
    }

    /// `(key, value)` pairs in declaration order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("epochs", self.epochs.to_string()),
            ("lr", self.lr.to_string()),
            ("lambda", self.lambda.to_string()),
            ("temperature", self.temperature.to_string()),
            ("window_factor", self.window_factor.to_string()),
            ("pool_factor", self.pool_factor.to_string()),
            ("dropout", self.dropout.to_string()),
            ("seed", self.seed.to_string()),
            ("k_neighbors", self.k_neighbors.to_string()),
            ("n_hvg", self.n_hvg.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("latent_dim", self.latent_dim.to_string()),
            ("use_cross_attention", self.use_cross_attention.to_string()),
            ("use_hierarchical", self.use_hierarchical.to_string()),
            ("steps_per_epoch", self.steps_per_epoch.to_string()),
            ("attn_dim", self.attn_dim.to_string()),
            ("image_hidden", self.image_hidden.to_string()),
            ("min_gene_total", self.min_gene_total.to_string()),
            ("target_sum", self.target_sum.to_string()),
            ("hvg_bins", self.hvg_bins.to_string()),
            ("patch_degree", self.patch_degree.to_string()),
        ]
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.entries() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}
