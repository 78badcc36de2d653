//! Config loading, artifact writing and the run manifest.

use std::cell::RefCell;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

/// A failed run: exit code 2 for config or schema problems, 1 otherwise.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    pub fn config(msg: impl Display) -> Self {
        Failure::Config(msg.to_string())
    }

    pub fn runtime(msg: impl Display) -> Self {
        Failure::Runtime(msg.to_string())
    }

    pub fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Config(m) => m,
            Failure::Runtime(m) => m,
        }
    }
}

impl From<imc_core::ImcError> for Failure {
    fn from(e: imc_core::ImcError) -> Self {
        Failure::runtime(e)
    }
}

pub trait OrRuntime<T> {
    fn runtime(self, what: &str) -> Result<T, Failure>;
}

impl<T, E: Display> OrRuntime<T> for Result<T, E> {
    fn runtime(self, what: &str) -> Result<T, Failure> {
        self.map_err(|e| Failure::runtime(format!("{what}: {e}")))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub struct ConfigInput {
    pub path: PathBuf,
    pub sha256: String,
    pub value: Value,
}

impl ConfigInput {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let bytes = fs::read(path).map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
        let value: Value = serde_json::from_slice(&bytes)
            .map_err(|e| Failure::config(format!("{} is not valid JSON: {e}", path.display())))?;
        if !value.is_object() {
            return Err(Failure::config(format!("{} must hold a JSON object", path.display())));
        }
        Ok(ConfigInput { path: path.to_path_buf(), sha256: sha256_hex(&bytes), value })
    }
}

pub struct RunContext {
    pub subcommand: &'static str,
    pub input: ConfigInput,
    pub output_dir: PathBuf,
    pub seed_override: Option<u64>,
}

/// Artifacts written so far plus the files read, for the manifest.
#[derive(Default)]
pub struct Outputs {
    dir: PathBuf,
    inputs: RefCell<Vec<(PathBuf, String)>>,
    artifacts: RefCell<Vec<String>>,
}

impl RunContext {
    /// Deserialize the config against `T`'s schema.
    pub fn parse<T: DeserializeOwned>(&self) -> Result<T, Failure> {
        parse_value(self.input.value.clone())
    }

    pub fn seed(&self, from_config: u64) -> u64 {
        self.seed_override.unwrap_or(from_config)
    }

    pub fn outputs(&self) -> Result<Outputs, Failure> {
        fs::create_dir_all(&self.output_dir)
            .runtime(&format!("cannot create output directory {}", self.output_dir.display()))?;
        Ok(Outputs { dir: self.output_dir.clone(), ..Default::default() })
    }

    /// `manifest.json`: everything needed to rerun the command.
    pub fn finish(&self, out: &Outputs, effective: &impl Serialize, seed: u64) -> Result<(), Failure> {
        let inputs: Vec<Value> = out
            .inputs
            .borrow()
            .iter()
            .map(|(p, h)| json!({ "path": p.display().to_string(), "sha256": h }))
            .collect();
        let manifest = json!({
            "tool": "imc",
            "subcommand": self.subcommand,
            "versions": { "imc-cli": env!("CARGO_PKG_VERSION"), "imc-core": imc_core::VERSION },
            "config_path": self.input.path.display().to_string(),
            "config_sha256": self.input.sha256,
            "seed": seed,
            "config": serde_json::to_value(effective).runtime("cannot serialise config")?,
            "inputs": inputs,
            "artifacts": *out.artifacts.borrow(),
        });
        out.write_json("manifest.json", &manifest)
    }
}

pub fn parse_value<T: DeserializeOwned>(value: Value) -> Result<T, Failure> {
    serde_json::from_value(value).map_err(|e| Failure::config(format!("invalid config: {e}")))
}

impl Outputs {
    /// Record an input file and refuse to write over it later.
    pub fn read_input(&self, path: &Path) -> Result<(), Failure> {
        let bytes = fs::read(path).runtime(&format!("cannot read {}", path.display()))?;
        let canon = fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf());
        self.inputs.borrow_mut().push((canon, sha256_hex(&bytes)));
        Ok(())
    }

    pub fn path(&self, name: &str) -> Result<PathBuf, Failure> {
        let p = self.dir.join(name);
        if let Ok(canon) = fs::canonicalize(&p) {
            if self.inputs.borrow().iter().any(|(q, _)| *q == canon) {
                return Err(Failure::runtime(format!("refusing to overwrite input file {}", p.display())));
            }
        }
        self.artifacts.borrow_mut().push(name.to_string());
        Ok(p)
    }

    pub fn write_json(&self, name: &str, v: &impl Serialize) -> Result<(), Failure> {
        let p = self.path(name)?;
        let text = serde_json::to_string_pretty(v).runtime("cannot serialise output")?;
        fs::write(&p, text + "\n").runtime(&format!("cannot write {}", p.display()))
    }

    pub fn write_matrix(&self, name: &str, m: &imc_core::DMatrix<f64>) -> Result<(), Failure> {
        let p = self.path(name)?;
        imc_core::io::write_matrix_csv(&p, m).runtime(&format!("cannot write {}", p.display()))
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<(), Failure> {
        let p = self.path(name)?;
        fs::write(&p, text).runtime(&format!("cannot write {}", p.display()))
    }
}
