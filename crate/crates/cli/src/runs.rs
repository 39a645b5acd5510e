//! Run directories: `<runs>/<stage>-<seed>-<digest8>`, one per stage and config.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

pub fn file_sha256(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Io(format!("{}: {}", path.display(), e)))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn run_dir(rc: &RunConfig, stage: &str) -> PathBuf {
    Path::new(&rc.runs_dir).join(format!("{}-{}-{}", stage, rc.seed(), &rc.digest()[..8]))
}

/// An artifact of an earlier stage, or `MissingPrerequisite` naming that stage.
pub fn require(rc: &RunConfig, stage: &str, needed: &str, file: &str) -> Result<PathBuf, CliError> {
    let path = run_dir(rc, needed).join(file);
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::MissingPrerequisite {
            stage: stage.to_string(),
            needed: needed.to_string(),
            path: path.display().to_string(),
        })
    }
}

/// Output directory of one stage, recording its config and the hashes of its inputs.
pub struct Run {
    pub dir: PathBuf,
    inputs: Vec<(PathBuf, String)>,
}

impl Run {
    pub fn start(rc: &RunConfig, stage: &str) -> Result<Self, CliError> {
        let dir = run_dir(rc, stage);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("config.txt"), rc.render())?;
        Ok(Self { dir, inputs: Vec::new() })
    }

    /// Records `path` as consumed by this run.
    pub fn input(&mut self, path: PathBuf) -> Result<PathBuf, CliError> {
        let hash = file_sha256(&path)?;
        self.inputs.push((path.clone(), hash));
        Ok(path)
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    pub fn write(&self, file: &str, text: &str) -> Result<PathBuf, CliError> {
        let path = self.path(file);
        fs::write(&path, text)?;
        Ok(path)
    }

    /// Writes `inputs.txt`; call once every artifact is on disk.
    pub fn finish(self) -> Result<PathBuf, CliError> {
        let mut s = String::from("# sha256\tpath\n");
        for (p, h) in &self.inputs {
            s.push_str(&format!("{}\t{}\n", h, p.display()));
        }
        fs::write(self.dir.join("inputs.txt"), s)?;
        Ok(self.dir)
    }
}
