use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use smc_mune::io::write_json;
use smc_mune::Result;

/// Everything needed to rerun a command and reproduce its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest<T: Serialize> {
    pub command: &'static str,
    pub argv: Vec<String>,
    pub version: &'static str,
    pub threads: usize,
    pub seed: Option<u64>,
    pub config: T,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub runtime_ms: f64,
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

pub struct Recorder {
    command: &'static str,
    start: Instant,
}

impl Recorder {
    pub fn start(command: &'static str) -> Self {
        Recorder { command, start: Instant::now() }
    }

    pub fn finish<T: Serialize>(
        self,
        seed: Option<u64>,
        config: T,
        inputs: Vec<PathBuf>,
        outputs: Vec<PathBuf>,
    ) -> Result<()> {
        let manifest = RunManifest {
            command: self.command,
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION"),
            threads: rayon::current_num_threads(),
            seed,
            config,
            runtime_ms: self.start.elapsed().as_secs_f64() * 1e3,
            inputs,
            outputs: outputs.clone(),
        };
        write_json(&manifest_path(&outputs[0]), &manifest)
    }
}
