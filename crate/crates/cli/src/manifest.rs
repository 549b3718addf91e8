use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use senca::ingestion::write_atomic;
use senca::Result;

/// Record of one command invocation, written as JSON when it finishes.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: &'static str,
    pub version: &'static str,
    pub seed: Option<u64>,
    pub config: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub duration_secs: f64,
    #[serde(skip)]
    started: Option<Instant>,
}

impl RunManifest {
    pub fn start(command: &'static str) -> Self {
        RunManifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed: None,
            config: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            duration_secs: 0.0,
            started: Some(Instant::now()),
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.to_string(), path.display().to_string());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn config<K: ToString, V: ToString>(&mut self, entries: impl IntoIterator<Item = (K, V)>) {
        for (k, v) in entries {
            self.config.insert(k.to_string(), v.to_string());
        }
    }

    pub fn finish(mut self, path: &Path) -> Result<()> {
        if let Some(t) = self.started {
            self.duration_secs = t.elapsed().as_secs_f64();
        }
        let json = serde_json::to_vec_pretty(&self).expect("manifest serialises");
        write_atomic(path, &json)
    }
}
