//! Seeded synthetic tissues with known regions, for end-to-end checks.
//!
//! Each region owns a disjoint block of signature genes whose Poisson rate is
//! `base_mean · e^δ_f` (every other gene sits at `base_mean`). Structural
//! features are Gaussian around a per-class mean that equals `δ_s` on the
//! class's block of dimensions; regions sharing a structure class are
//! indistinguishable in that channel.

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::error::{Result, SencaError};
use crate::ingestion::{
    write_expression, write_labels, write_matrix, write_spots, ExpressionMatrix, LabelTable,
    SpotTable, Stage,
};
use crate::numerics::Tensor;
use crate::training::{ImageInput, TrainingData};

/// Half-open rectangle of grid cells `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    pub structure: usize,
}

impl Region {
    fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub width: usize,
    pub height: usize,
    pub n_genes: usize,
    pub signature_genes: usize,
    pub base_mean: f64,
    pub delta_f: f64,
    pub delta_s: f64,
    pub sigma: f64,
    pub feature_dim: usize,
    pub regions: Vec<Region>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// 24×24 grid. The left half splits into two tall regions, the right half
    /// into three bands; the lower two bands (regions 3 and 4) share a
    /// structure class.
    fn default() -> Self {
        let r = |x0, x1, y0, y1, structure| Region {
            x0,
            x1,
            y0,
            y1,
            structure,
        };
        SyntheticSpec {
            width: 24,
            height: 24,
            n_genes: 120,
            signature_genes: 10,
            base_mean: 5.0,
            delta_f: 2.0,
            delta_s: 1.5,
            sigma: 0.5,
            feature_dim: 32,
            regions: vec![
                r(0, 12, 0, 12, 0),
                r(0, 12, 12, 24, 1),
                r(12, 24, 0, 8, 2),
                r(12, 24, 8, 16, 3),
                r(12, 24, 16, 24, 3),
            ],
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    fn structure_classes(&self) -> usize {
        self.regions.iter().map(|r| r.structure + 1).max().unwrap_or(0)
    }

    /// Region index of every grid cell, row-major.
    pub fn region_map(&self) -> Result<Vec<usize>> {
        let mut map = Vec::with_capacity(self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let mut hits = self.regions.iter().enumerate().filter(|(_, r)| r.contains(x, y));
                let Some((first, _)) = hits.next() else {
                    return Err(SencaError::Spec(format!("cell ({x}, {y}) is in no region")));
                };
                if let Some((second, _)) = hits.next() {
                    return Err(SencaError::Spec(format!(
                        "cell ({x}, {y}) is in regions {first} and {second}"
                    )));
                }
                map.push(first);
            }
        }
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SencaError::Spec(msg));
        if self.width == 0 || self.height == 0 {
            return bad("grid must be non-empty".into());
        }
        if self.regions.len() < 4 {
            return bad(format!("need at least 4 regions, got {}", self.regions.len()));
        }
        for (i, r) in self.regions.iter().enumerate() {
            if r.x0 >= r.x1 || r.y0 >= r.y1 || r.x1 > self.width || r.y1 > self.height {
                return bad(format!("region {i} is empty or leaves the grid"));
            }
        }
        let classes = self.structure_classes();
        if classes == self.regions.len() {
            return bad("no two regions share a structure class".into());
        }
        if self.feature_dim < classes {
            return bad(format!(
                "feature_dim {} cannot hold {classes} structure classes",
                self.feature_dim
            ));
        }
        if self.signature_genes == 0 || self.regions.len() * self.signature_genes > self.n_genes {
            return bad(format!(
                "{} regions × {} signature genes exceed {} genes",
                self.regions.len(),
                self.signature_genes,
                self.n_genes
            ));
        }
        for (name, v) in [
            ("base_mean", self.base_mean),
            ("delta_f", self.delta_f),
            ("delta_s", self.delta_s),
            ("sigma", self.sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.base_mean == 0.0 {
            return bad("base_mean must be positive".into());
        }
        self.region_map().map(|_| ())
    }

    /// Poisson rate of `gene` inside region `region`.
    pub fn gene_mean(&self, region: usize, gene: usize) -> f64 {
        let block = region * self.signature_genes..(region + 1) * self.signature_genes;
        if block.contains(&gene) {
            self.base_mean * self.delta_f.exp()
        } else {
            self.base_mean
        }
    }

    /// Mean of structural feature `dim` for a region.
    pub fn feature_mean(&self, region: usize, dim: usize) -> f64 {
        let classes = self.structure_classes();
        let block = self.feature_dim / classes;
        let class = self.regions[region].structure;
        if (class * block..(class + 1) * block).contains(&dim) {
            self.delta_s
        } else {
            0.0
        }
    }

    fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
            raw.parse()
                .map_err(|_| SencaError::Spec(format!("bad value {raw:?} for {key}")))
        }
        match key {
            "width" => self.width = num(key, raw)?,
            "height" => self.height = num(key, raw)?,
            "n_genes" => self.n_genes = num(key, raw)?,
            "signature_genes" => self.signature_genes = num(key, raw)?,
            "base_mean" => self.base_mean = num(key, raw)?,
            "delta_f" => self.delta_f = num(key, raw)?,
            "delta_s" => self.delta_s = num(key, raw)?,
            "sigma" => self.sigma = num(key, raw)?,
            "feature_dim" => self.feature_dim = num(key, raw)?,
            "seed" => self.seed = num(key, raw)?,
            "region" => {
                let v: Vec<usize> = raw
                    .split_whitespace()
                    .map(|f| num(key, f))
                    .collect::<Result<_>>()?;
                let [x0, x1, y0, y1, structure] = v[..] else {
                    return Err(SencaError::Spec(format!(
                        "region needs `x0 x1 y0 y1 structure`, got {raw:?}"
                    )));
                };
                self.regions.push(Region {
                    x0,
                    x1,
                    y0,
                    y1,
                    structure,
                });
            }
            other => return Err(SencaError::Spec(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// `key = value` lines over the defaults. Any `region = x0 x1 y0 y1 s`
    /// line replaces the default layout.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = SyntheticSpec::default();
        let mut custom_layout = false;
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| SencaError::Spec(format!("line {}: expected key = value", n + 1)))?;
            let key = key.trim();
            if key == "region" && !custom_layout {
                spec.regions.clear();
                custom_layout = true;
            }
            spec.set(key, value.trim())
                .map_err(|e| SencaError::Spec(format!("line {}: {e}", n + 1)))?;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SencaError::io(path, e))?;
        Self::parse(&text)
    }
}

impl fmt::Display for SyntheticSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "width = {}", self.width)?;
        writeln!(f, "height = {}", self.height)?;
        writeln!(f, "n_genes = {}", self.n_genes)?;
        writeln!(f, "signature_genes = {}", self.signature_genes)?;
        writeln!(f, "base_mean = {}", self.base_mean)?;
        writeln!(f, "delta_f = {}", self.delta_f)?;
        writeln!(f, "delta_s = {}", self.delta_s)?;
        writeln!(f, "sigma = {}", self.sigma)?;
        writeln!(f, "feature_dim = {}", self.feature_dim)?;
        writeln!(f, "seed = {}", self.seed)?;
        for r in &self.regions {
            writeln!(f, "region = {} {} {} {} {}", r.x0, r.x1, r.y0, r.y1, r.structure)?;
        }
        Ok(())
    }
}

/// One generated sample held in memory.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub spots: SpotTable,
    /// Raw counts.
    pub expression: ExpressionMatrix,
    /// Structural features, written as precomputed patch embeddings.
    pub embeddings: Tensor,
    /// Region index per spot.
    pub labels: Vec<usize>,
}

impl SyntheticSample {
    pub fn training_data(&self) -> TrainingData {
        TrainingData {
            spots: self.spots.clone(),
            expression: self.expression.clone(),
            image: ImageInput::Precomputed(self.embeddings.clone()),
        }
    }

    pub fn label_table(&self) -> LabelTable {
        LabelTable::from_indices(self.spots.ids(), &self.labels)
    }

    /// Writes `spots.tsv`, `expression.tsv`, `embeddings.f32` and
    /// `labels.tsv` into `dir`, creating it if needed.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| SencaError::io(dir, e))?;
        write_spots(&dir.join("spots.tsv"), &self.spots)?;
        write_expression(&dir.join("expression.tsv"), &self.expression)?;
        write_matrix(&dir.join("embeddings.f32"), &self.embeddings)?;
        write_labels(&dir.join("labels.tsv"), &self.label_table())
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticSample> {
    spec.validate()?;
    let map = spec.region_map()?;
    let n = map.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.sigma).map_err(|e| SencaError::Spec(e.to_string()))?;
    let rates: Vec<Vec<Poisson<f64>>> = (0..spec.regions.len())
        .map(|r| {
            (0..spec.n_genes)
                .map(|g| Poisson::new(spec.gene_mean(r, g)).expect("positive finite rate"))
                .collect()
        })
        .collect();

    let mut ids = Vec::with_capacity(n);
    let mut coords = Vec::with_capacity(n);
    let mut counts = Vec::with_capacity(n * spec.n_genes);
    let mut features = Vec::with_capacity(n * spec.feature_dim);
    for (cell, &region) in map.iter().enumerate() {
        let (x, y) = (cell % spec.width, cell / spec.width);
        ids.push(format!("spot_{y}_{x}"));
        coords.push([x as f64, y as f64]);
        for poisson in &rates[region] {
            counts.push(poisson.sample(&mut rng));
        }
        for d in 0..spec.feature_dim {
            features.push(spec.feature_mean(region, d) + noise.sample(&mut rng));
        }
    }
    let genes = (0..spec.n_genes).map(|g| format!("gene{g:03}")).collect();
    Ok(SyntheticSample {
        spots: SpotTable::new(ids.clone(), coords)?,
        expression: ExpressionMatrix::new(
            ids,
            genes,
            Tensor::matrix(n, spec.n_genes, counts)?,
            Stage::Raw,
        )?,
        embeddings: Tensor::matrix(n, spec.feature_dim, features)?,
        labels: map,
    })
}
