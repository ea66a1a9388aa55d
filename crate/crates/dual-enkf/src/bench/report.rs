//! Report bundles: data files with checksums, a manifest, and timings.
//!
//! Every numeric output is written through this module so manifests stay
//! consistent with what is on disk. Wall-clock timings go to a separate
//! `timings.json` that is deliberately excluded from the manifest: manifest
//! and data files are byte-reproducible for a fixed config and seed, timings
//! are not.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::{ExperimentKind, ExperimentSpec, SCHEMA_VERSION};
use super::BenchError;

#[derive(Debug, Clone, Serialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct PhaseTimings {
    pub oracle_ms: u128,
    pub ensemble_ms: u128,
    pub metrics_ms: u128,
    pub io_ms: u128,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Partial,
}

/// Everything one experiment run produced.
#[derive(Debug)]
pub struct ReportBundle {
    pub kind: ExperimentKind,
    pub out_dir: PathBuf,
    pub files: Vec<FileRecord>,
    pub summary: serde_json::Value,
    pub timings: PhaseTimings,
    pub status: RunStatus,
    pub errors: Vec<String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    schema_version: u32,
    kind: &'static str,
    code_version: &'static str,
    status: RunStatus,
    errors: &'a [String],
    config_echo: &'a str,
    files: &'a [FileRecord],
}

/// Serial writer that owns all file output for one bundle.
pub(crate) struct BundleWriter {
    out_dir: PathBuf,
    files: Vec<FileRecord>,
}

impl BundleWriter {
    pub fn new(out_dir: &Path) -> Result<Self, BenchError> {
        std::fs::create_dir_all(out_dir)?;
        Ok(Self {
            out_dir: out_dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    /// Write one file and record its checksum.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), BenchError> {
        let path = self.out_dir.join(name);
        std::fs::write(&path, bytes)?;
        let mut hasher = Sha256::new();
        hasher.update(bytes);
        let digest = hasher.finalize();
        let mut sha256 = String::with_capacity(64);
        for b in digest.as_slice() {
            use std::fmt::Write as _;
            write!(sha256, "{b:02x}").expect("hex formatting");
        }
        self.files.push(FileRecord {
            path: name.to_string(),
            sha256,
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    /// Write the summary, config echo, manifest and timings, and finish.
    pub fn finish(
        mut self,
        kind: ExperimentKind,
        spec: &ExperimentSpec,
        summary: serde_json::Value,
        timings: PhaseTimings,
        errors: Vec<String>,
    ) -> Result<ReportBundle, BenchError> {
        let status = if errors.is_empty() {
            RunStatus::Complete
        } else {
            RunStatus::Partial
        };
        let config_echo = spec.to_toml_string();
        self.write("config_echo.toml", config_echo.as_bytes())?;

        let summary_doc = serde_json::json!({
            "schema_version": SCHEMA_VERSION,
            "kind": kind.name(),
            "summary": summary,
        });
        let summary_bytes = serde_json::to_vec_pretty(&summary_doc).expect("summary serializes");
        self.write("summary.json", &summary_bytes)?;

        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            kind: kind.name(),
            code_version: env!("CARGO_PKG_VERSION"),
            status,
            errors: &errors,
            config_echo: &config_echo,
            files: &self.files,
        };
        let manifest_bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        std::fs::write(self.out_dir.join("manifest.json"), &manifest_bytes)?;

        let timing_bytes = serde_json::to_vec_pretty(&timings).expect("timings serialize");
        std::fs::write(self.out_dir.join("timings.json"), &timing_bytes)?;

        Ok(ReportBundle {
            kind,
            out_dir: self.out_dir,
            files: self.files,
            summary: summary_doc,
            timings,
            status,
            errors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writer_records_checksums_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = BundleWriter::new(dir.path()).unwrap();
        w.write("data.csv", b"a,b\n1,2\n").unwrap();
        let spec = ExperimentSpec::from_toml_str(
            r#"
            [problem]
            generator = "spring_mass_damper"
            masses = 1
            "#,
        )
        .unwrap();
        let bundle = w
            .finish(
                ExperimentKind::ScalingSweep,
                &spec,
                serde_json::json!({"ok": true}),
                PhaseTimings::default(),
                vec![],
            )
            .unwrap();
        assert_eq!(bundle.status, RunStatus::Complete);
        // Every manifest-listed file exists.
        for f in &bundle.files {
            assert!(dir.path().join(&f.path).exists(), "{} missing", f.path);
            assert_eq!(f.sha256.len(), 64);
        }
        assert!(dir.path().join("manifest.json").exists());
        assert!(dir.path().join("timings.json").exists());
    }
}
