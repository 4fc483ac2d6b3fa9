//! Run manifests: every command writes one `manifest.tsv` into its output
//! directory recording the resolved configuration, input digests, seed, and
//! tool version, so a rerun with identical inputs is verifiably identical.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

use crate::data::DataError;

fn sha256_hex(path: &Path) -> Result<String, DataError> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Write `manifest.tsv` into `dir`.
pub fn write_manifest(
    dir: &Path,
    command: &str,
    seed: u64,
    args: &[(String, String)],
    inputs: &[&Path],
) -> Result<(), DataError> {
    let path = dir.join("manifest.tsv");
    let mut f = fs::File::create(&path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let now = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut write = || -> std::io::Result<()> {
        writeln!(f, "key\tvalue")?;
        writeln!(f, "command\t{command}")?;
        writeln!(f, "tool_version\t{}", env!("CARGO_PKG_VERSION"))?;
        writeln!(f, "seed\t{seed}")?;
        writeln!(f, "timestamp_unix\t{now}")?;
        for (k, v) in args {
            writeln!(f, "arg.{k}\t{v}")?;
        }
        for input in inputs {
            writeln!(f, "input.{}\t{}", input.display(), sha256_of(input)?)?;
        }
        Ok(())
    };
    write().map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn sha256_of(path: &Path) -> std::io::Result<String> {
    sha256_hex(path).map_err(|e| std::io::Error::other(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_records_inputs_and_args() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.txt");
        fs::write(&input, "hello").unwrap();
        write_manifest(
            dir.path(),
            "train",
            42,
            &[("n".to_string(), "10".to_string())],
            &[&input],
        )
        .unwrap();
        let text = fs::read_to_string(dir.path().join("manifest.tsv")).unwrap();
        assert!(text.contains("command\ttrain"));
        assert!(text.contains("seed\t42"));
        assert!(text.contains("arg.n\t10"));
        // sha256("hello")
        assert!(text.contains("2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824"));
    }
}
