use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;

use senca::cluster_eval::{agglomerative, ari_partial, marker_table, MarkerOptions};
use senca::ingestion::{
    load_expression, load_labels, load_matrix, load_spots, normalize_log, write_atomic,
    write_labels, write_matrix, write_spots, ExpressionMatrix, LabelTable, Stage,
};
use senca::synthetic::{generate, SyntheticSpec};
use senca::training::{format_train_log, train as run_training, TrainConfig, TrainingData};
use senca::{Result, SencaError};

use crate::manifest::RunManifest;

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| SencaError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

/// Manifest path for a command whose `--out` is a single file.
fn sidecar_manifest(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

pub fn synth(spec_path: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut manifest = RunManifest::start("synth");
    let mut spec = match spec_path {
        Some(p) => {
            manifest.input("spec", p);
            SyntheticSpec::load(p)?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    manifest.seed = Some(spec.seed);
    manifest.config(
        spec.to_string()
            .lines()
            .filter_map(|l| l.split_once(" = "))
            .filter(|(k, _)| *k != "region"),
    );
    for (i, r) in spec.regions.iter().enumerate() {
        manifest.config([(
            format!("region{i}"),
            format!("{} {} {} {} {}", r.x0, r.x1, r.y0, r.y1, r.structure),
        )]);
    }
    let sample = generate(&spec)?;
    sample.write(out)?;
    for f in ["spots.tsv", "expression.tsv", "embeddings.f32", "labels.tsv"] {
        manifest.output(&out.join(f));
    }
    info!("wrote {} spots to {}", sample.labels.len(), out.display());
    manifest.finish(&out.join("manifest.json"))
}

pub fn train(config: Option<&Path>, data: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut manifest = RunManifest::start("train");
    let mut cfg = match config {
        Some(p) => {
            manifest.input("config", p);
            TrainConfig::load(p)?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    manifest.input("data", data);
    manifest.seed = Some(cfg.seed);
    manifest.config(cfg.entries());

    let input = TrainingData::load(data)?;
    let outcome = run_training(&input, &cfg)?;
    create_dir(out)?;
    let files = [
        ("shared_latent.f32", &outcome.latent),
        ("rna_embeddings.f32", &outcome.rna_embeddings),
        ("image_embeddings.f32", &outcome.image_embeddings),
    ];
    for (name, m) in files {
        write_matrix(&out.join(name), m)?;
        manifest.output(&out.join(name));
    }
    write_atomic(&out.join("train_log.tsv"), format_train_log(&outcome.log).as_bytes())?;
    manifest.output(&out.join("train_log.tsv"));
    write_spots(&out.join("spots.tsv"), &input.spots)?;
    manifest.output(&out.join("spots.tsv"));
    manifest.finish(&out.join("manifest.json"))
}

pub fn segment(latent: &Path, k: usize, spots: Option<&Path>, out: &Path) -> Result<()> {
    let mut manifest = RunManifest::start("segment");
    let spots_path = match spots {
        Some(p) => p.to_path_buf(),
        None => latent.with_file_name("spots.tsv"),
    };
    manifest.input("latent", latent);
    manifest.input("spots", &spots_path);
    manifest.config([("k", k)]);
    let s = load_matrix(latent)?;
    let table = load_spots(&spots_path)?;
    if table.len() != s.rows() {
        return Err(SencaError::Consistency(format!(
            "{} latent rows but {} spots in {}",
            s.rows(),
            table.len(),
            spots_path.display()
        )));
    }
    let assignment = agglomerative(&s, k)?;
    create_dir(out)?;
    let clusters = out.join("clusters.tsv");
    write_labels(&clusters, &LabelTable::from_indices(table.ids(), &assignment.labels))?;
    let dendrogram = out.join("dendrogram.tsv");
    write_atomic(&dendrogram, assignment.dendrogram.to_tsv().as_bytes())?;
    manifest.output(&clusters);
    manifest.output(&dendrogram);
    manifest.finish(&out.join("manifest.json"))
}

pub fn evaluate(pred: &Path, truth: &Path, out: &Path) -> Result<()> {
    let mut manifest = RunManifest::start("evaluate");
    manifest.input("pred", pred);
    manifest.input("truth", truth);
    let p = load_labels(pred)?;
    let t = load_labels(truth)?;
    let truth_of: HashMap<&str, Option<&str>> = t
        .entries
        .iter()
        .map(|(id, l)| (id.as_str(), l.as_deref()))
        .collect();
    if truth_of.len() != p.entries.len() {
        return Err(SencaError::Consistency(format!(
            "{} predicted spots but {} truth spots",
            p.entries.len(),
            truth_of.len()
        )));
    }
    let mut pred_labels = Vec::with_capacity(p.entries.len());
    let mut truth_labels = Vec::with_capacity(p.entries.len());
    for (id, label) in &p.entries {
        let label = label.as_deref().ok_or_else(|| {
            SencaError::Consistency(format!("predicted label missing for spot {id}"))
        })?;
        let truth = truth_of.get(id.as_str()).ok_or_else(|| {
            SencaError::Consistency(format!("spot {id} absent from {}", truth.display()))
        })?;
        pred_labels.push(label);
        truth_labels.push(*truth);
    }
    let score = ari_partial(&pred_labels, &truth_labels)?;
    write_atomic(out, format!("ari={score:?}\n").as_bytes())?;
    manifest.output(out);
    manifest.finish(&sidecar_manifest(out))
}

/// Cluster names in output order: numeric when every label is an integer.
fn cluster_names(labels: &[&str]) -> Vec<String> {
    let mut names: Vec<String> = labels.iter().map(|s| s.to_string()).collect();
    names.sort_unstable();
    names.dedup();
    if names.iter().all(|n| n.parse::<u64>().is_ok()) {
        names.sort_by_key(|n| n.parse::<u64>().expect("checked above"));
    }
    names
}

pub fn markers(
    expression: &Path,
    labels: &Path,
    top: usize,
    out: &Path,
    normalize: bool,
    bh: bool,
) -> Result<()> {
    let mut manifest = RunManifest::start("markers");
    manifest.input("expression", expression);
    manifest.input("labels", labels);
    manifest.config([
        ("top", top.to_string()),
        ("normalize", normalize.to_string()),
        ("bh", bh.to_string()),
    ]);
    let raw = load_expression(expression)?;
    let table = load_labels(labels)?;
    let label_of: HashMap<&str, Option<&str>> = table
        .entries
        .iter()
        .map(|(id, l)| (id.as_str(), l.as_deref()))
        .collect();
    let per_spot: Vec<&str> = raw
        .spot_ids()
        .iter()
        .map(|id| match label_of.get(id.as_str()) {
            Some(Some(l)) => Ok(*l),
            Some(None) => Err(SencaError::Consistency(format!("spot {id} has no label"))),
            None => Err(SencaError::Consistency(format!(
                "spot {id} absent from {}",
                labels.display()
            ))),
        })
        .collect::<Result<_>>()?;
    let names = cluster_names(&per_spot);
    let index: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let assignment: Vec<usize> = per_spot.iter().map(|l| index[l]).collect();

    let expr = if normalize {
        normalize_log(&raw, 1e4)?
    } else {
        ExpressionMatrix::new(
            raw.spot_ids().to_vec(),
            raw.genes().to_vec(),
            raw.values().clone(),
            Stage::Log,
        )?
    };
    let results = marker_table(&expr, &assignment, MarkerOptions { top_m: top, adjust_bh: bh })?;
    let mut text = String::from("gene\tcluster\tU\tp\n");
    for m in &results {
        writeln!(text, "{}\t{}\t{}\t{:e}", m.gene, names[m.cluster], m.u, m.p)
            .expect("write to String");
    }
    write_atomic(out, text.as_bytes())?;
    manifest.output(out);
    manifest.finish(&sidecar_manifest(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_cluster_names_sort_numerically() {
        assert_eq!(cluster_names(&["10", "2", "2", "0"]), vec!["0", "2", "10"]);
        assert_eq!(cluster_names(&["b", "a", "10"]), vec!["10", "a", "b"]);
    }

    #[test]
    fn sidecar_sits_beside_output() {
        assert_eq!(
            sidecar_manifest(Path::new("/tmp/x/metrics.txt")),
            PathBuf::from("/tmp/x/metrics.txt.manifest.json")
        );
    }
}
