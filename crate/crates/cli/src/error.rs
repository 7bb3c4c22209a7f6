//! Exit-code policy: 0 ok, 2 missing file or artifact, 3 bad configuration,
//! 4 training divergence, 1 anything else. Every failure prints one JSON
//! line to stderr as its final line, so scripts can parse the outcome.

use std::path::{Path, PathBuf};

use tether_core::Error;

#[derive(Debug)]
pub enum CliError {
    /// A required input file or pipeline artifact does not exist.
    Missing { path: PathBuf, hint: String },
    Core(Error),
}

pub type CResult<T> = Result<T, CliError>;

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Missing { .. } => 2,
            CliError::Core(Error::Io { source, .. })
                if source.kind() == std::io::ErrorKind::NotFound =>
            {
                2
            }
            CliError::Core(Error::Config(_)) => 3,
            CliError::Core(Error::Divergence { .. }) => 4,
            CliError::Core(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            2 => "missing-artifact",
            3 => "bad-config",
            4 => "divergence",
            _ => "error",
        }
    }

    pub fn detail(&self) -> String {
        match self {
            CliError::Missing { path, hint } => format!("{}: {hint}", path.display()),
            CliError::Core(e) => e.to_string(),
        }
    }

    /// The single-line machine-parseable form, e.g.
    /// `{"error":"missing-artifact","exit":2,"detail":"workdir/..."}`.
    pub fn machine_line(&self) -> String {
        serde_json::json!({
            "error": self.kind(),
            "exit": self.exit_code(),
            "detail": self.detail(),
        })
        .to_string()
    }
}

/// Input files named by the config must exist before a command starts.
pub fn require_input(path: &Path, what: &str) -> CResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing {
            path: path.to_path_buf(),
            hint: format!("{what} not found; fix the config path or create the file"),
        })
    }
}

/// Artifacts are produced by earlier pipeline commands.
pub fn require_artifact(path: &Path, producer: &str) -> CResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing {
            path: path.to_path_buf(),
            hint: format!("artifact not found; run `tether {producer}` first"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_contract() {
        let missing = CliError::Missing { path: "x/y.json".into(), hint: "run `tether index` first".into() };
        assert_eq!(missing.exit_code(), 2);
        assert_eq!(CliError::Core(Error::Config("k too big".into())).exit_code(), 3);
        assert_eq!(
            CliError::Core(Error::Divergence { round: "epoch 0".into(), step: 3 }).exit_code(),
            4
        );
        assert_eq!(
            CliError::Core(Error::Checkpoint("bad kind".into())).exit_code(),
            1
        );
        let gone = CliError::Core(Error::io(
            Path::new("nope.json"),
            std::io::Error::new(std::io::ErrorKind::NotFound, "gone"),
        ));
        assert_eq!(gone.exit_code(), 2);
    }

    #[test]
    fn machine_line_is_single_line_json() {
        let e = CliError::Missing { path: "a/b".into(), hint: "run `tether retrieve` first".into() };
        let line = e.machine_line();
        assert!(!line.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["exit"], 2);
        assert_eq!(v["error"], "missing-artifact");
        assert!(v["detail"].as_str().unwrap().contains("a/b"));
    }
}
