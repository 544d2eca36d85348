//! Reproducibility sidecars written next to every stage output as
//! `<output>.meta.json`. Nothing run-dependent (time, threads, host) goes in,
//! so repeated runs produce identical sidecars.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use conv2query::lexindex::Bm25Params;
use conv2query::records::{file_checksum, write_text};
use conv2query::Result;
use serde::Serialize;
use serde_json::Value;

#[derive(Debug, Serialize)]
pub struct StageMeta {
    tool: &'static str,
    version: &'static str,
    stage: &'static str,
    inputs: BTreeMap<String, String>,
    seeds: BTreeMap<String, u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    profile: Option<ProfileMeta>,
    settings: BTreeMap<String, Value>,
}

#[derive(Debug, Serialize)]
struct ProfileMeta {
    name: String,
    k1: f64,
    b: f64,
}

impl StageMeta {
    pub fn new(stage: &'static str) -> Self {
        StageMeta {
            tool: "conv2query",
            version: env!("CARGO_PKG_VERSION"),
            stage,
            inputs: BTreeMap::new(),
            seeds: BTreeMap::new(),
            profile: None,
            settings: BTreeMap::new(),
        }
    }

    /// Records the sha256 of an input file under `name`.
    pub fn input(&mut self, name: &str, path: &Path) -> Result<&mut Self> {
        self.inputs.insert(name.to_string(), file_checksum(path)?);
        Ok(self)
    }

    pub fn seed(&mut self, name: &str, seed: u64) -> &mut Self {
        self.seeds.insert(name.to_string(), seed);
        self
    }

    pub fn profile(&mut self, name: &str, params: &Bm25Params) -> &mut Self {
        self.profile = Some(ProfileMeta {
            name: name.to_string(),
            k1: params.k1,
            b: params.b,
        });
        self
    }

    pub fn setting(&mut self, name: &str, value: impl Serialize) -> &mut Self {
        self.settings
            .insert(name.to_string(), serde_json::to_value(value).unwrap_or(Value::Null));
        self
    }

    pub fn header_line(&self) -> String {
        serde_json::to_string(self).expect("meta serializes")
    }

    pub fn write_for(&self, output: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("meta serializes") + "\n";
        write_text(&sidecar_path(output), &text)
    }
}

pub fn sidecar_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    output.with_file_name(name)
}
