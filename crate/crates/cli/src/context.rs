use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use reachkit::fixtures;
use reachkit::sysdef::{parse_system, serialize_system, SystemDef};

pub const OK: u8 = 0;
pub const OTHER: u8 = 1;
pub const PARSE: u8 = 2;
pub const EXTREMALITY: u8 = 3;
pub const ORACLE_GAP: u8 = 4;
pub const CERTIFICATE: u8 = 5;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

impl From<reachkit::Error> for Failure {
    fn from(e: reachkit::Error) -> Self {
        Self { code: e.exit_code().clamp(0, 255) as u8, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::new(OTHER, e.to_string())
    }
}

/// `builtin:<name>` selects a bundled fixture; anything else is a file path.
pub fn load_system(spec: &str) -> Result<SystemDef, Failure> {
    if let Some(name) = spec.strip_prefix("builtin:") {
        return fixtures::named(name).ok_or_else(|| {
            Failure::new(PARSE, format!("unknown builtin `{name}`; known: {}", fixtures::NAMES.join(", ")))
        });
    }
    let text = fs::read_to_string(spec).map_err(|e| Failure::new(PARSE, format!("{spec}: {e}")))?;
    Ok(parse_system(&text)?)
}

/// Everything that determines a run's output.
pub struct RunContext {
    pub command: &'static str,
    pub seed: u64,
    pub out: Option<PathBuf>,
    config: Value,
    hash: String,
}

impl RunContext {
    pub fn new(command: &'static str, system: Option<&SystemDef>, params: Value, seed: u64, out: Option<PathBuf>) -> Self {
        let config = json!({
            "command": command,
            "system": system.map(serialize_system),
            "params": params,
            "seed": seed,
        });
        let hash = hex::encode(Sha256::digest(config.to_string().as_bytes()));
        Self { command, seed, out, config, hash }
    }

    pub fn header_line(&self) -> String {
        format!("# reachkit {} {} config={} seed={}", env!("CARGO_PKG_VERSION"), self.command, self.hash, self.seed)
    }

    pub fn header_json(&self) -> Value {
        json!({
            "tool": "reachkit",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "config_hash": self.hash,
            "seed": self.seed,
            "params": self.config["params"],
        })
    }

    /// Writes `body` behind the header line to `--out`, or to stdout.
    pub fn emit_text(&self, body: &str) -> Result<(), Failure> {
        self.emit(&format!("{}\n{body}", self.header_line()))
    }

    /// Writes `body` with a `header` key to `--out`, or to stdout.
    pub fn emit_json(&self, mut body: Value) -> Result<(), Failure> {
        if let Value::Object(map) = &mut body {
            map.insert("header".into(), self.header_json());
        }
        let text = serde_json::to_string_pretty(&body).map_err(|e| Failure::new(OTHER, e.to_string()))?;
        self.emit(&(text + "\n"))
    }

    fn emit(&self, text: &str) -> Result<(), Failure> {
        match &self.out {
            Some(path) => write_file(path, text),
            None => {
                print!("{text}");
                Ok(())
            }
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).map_err(|e| Failure::new(OTHER, format!("{}: {e}", path.display())))
}

/// Reads query points: one per line, comma or whitespace separated, `#`
/// comments and blank lines skipped.
pub fn read_points(path: &Path) -> Result<Vec<Vec<f64>>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::new(PARSE, format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| parse_point(l).map_err(|m| Failure::new(PARSE, format!("{}:{}: {m}", path.display(), i + 1))))
        .collect()
}

pub fn parse_point(text: &str) -> Result<Vec<f64>, String> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| format!("not a number: `{t}`")))
        .collect()
}

/// Non-finite values print as `inf`, `-inf` or `nan`.
pub fn fmt_num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:e}")
    } else if x > 0.0 {
        "inf".into()
    } else if x < 0.0 {
        "-inf".into()
    } else {
        "nan".into()
    }
}
