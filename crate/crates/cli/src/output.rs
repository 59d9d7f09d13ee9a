use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::Failure;

/// Reproducibility record written next to every output.
#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config: Option<String>,
    seed: Option<u64>,
    outputs: &'a [String],
    tool_version: &'static str,
    wall_clock_s: f64,
}

/// Output directory of one command invocation.
pub struct Outputs {
    dir: PathBuf,
    command: &'static str,
    config: Option<PathBuf>,
    seed: Option<u64>,
    started: Instant,
    files: Vec<String>,
}

impl Outputs {
    pub fn create(
        dir: &Path,
        command: &'static str,
        config: Option<&Path>,
        seed: Option<u64>,
        started: Instant,
    ) -> Result<Self, Failure> {
        fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            command,
            config: config.map(Path::to_path_buf),
            seed,
            started,
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<(), Failure> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| Failure::Io(format!("cannot write {}: {e}", path.display())))?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// CSV whose first line is a `# schema:` comment.
    pub fn csv(&mut self, name: &str, schema: &str, header: &str, rows: &[String]) -> Result<(), Failure> {
        let mut s = format!("# schema: {schema}\n{header}\n");
        for r in rows {
            let _ = writeln!(s, "{r}");
        }
        self.write(name, &s)
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), Failure> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| Failure::Io(e.to_string()))?;
        s.push('\n');
        self.write(name, &s)
    }

    /// One compact JSON object per line.
    pub fn json_lines<T: Serialize>(&mut self, name: &str, values: &[T]) -> Result<(), Failure> {
        let mut s = String::new();
        for v in values {
            s.push_str(&serde_json::to_string(v).map_err(|e| Failure::Io(e.to_string()))?);
            s.push('\n');
        }
        self.write(name, &s)
    }

    pub fn finish(self) -> Result<(), Failure> {
        let manifest = RunManifest {
            command: self.command,
            config: self.config.as_ref().map(|p| p.display().to_string()),
            seed: self.seed,
            outputs: &self.files,
            tool_version: env!("CARGO_PKG_VERSION"),
            wall_clock_s: self.started.elapsed().as_secs_f64(),
        };
        let s = serde_json::to_string_pretty(&manifest).map_err(|e| Failure::Io(e.to_string()))? + "\n";
        let path = self.dir.join("manifest.json");
        fs::write(&path, s).map_err(|e| Failure::Io(format!("cannot write {}: {e}", path.display())))?;
        for f in &self.files {
            println!("wrote {}", self.dir.join(f).display());
        }
        Ok(())
    }
}
