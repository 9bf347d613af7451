//! Artifact files: atomic writes and a versioned JSON envelope shared by
//! checkpoints, sample banks, knowledge bases and metrics.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Write `bytes` to a temporary sibling and rename it over `path`, so an
/// interrupted write never leaves a partial file under the final name.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = tmp_sibling(path);
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(file);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn tmp_sibling(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "artifact".into());
    path.with_file_name(format!(".{name}.tmp-{}", std::process::id()))
}

#[derive(Serialize)]
struct EnvelopeRef<'a, T> {
    format: &'a str,
    format_version: u32,
    #[serde(flatten)]
    body: &'a T,
}

/// Serialize `body` under a `{format, format_version}` header.
pub fn save_versioned<T: Serialize>(path: &Path, format: &str, version: u32, body: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(&EnvelopeRef {
        format,
        format_version: version,
        body,
    })
    .map_err(|e| Error::Numeric(format!("cannot serialize {format}: {e}")))?;
    write_atomic(path, text.as_bytes())
}

/// Inverse of [`save_versioned`]; rejects files with another format tag or version.
pub fn load_versioned<T: DeserializeOwned>(path: &Path, format: &str, version: u32) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::corrupt(path, e))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::corrupt(path, "top-level value is not an object"))?;
    let found_format = obj
        .remove("format")
        .and_then(|v| v.as_str().map(str::to_owned))
        .ok_or_else(|| Error::corrupt(path, "missing `format` header"))?;
    if found_format != format {
        return Err(Error::VersionMismatch {
            path: path.into(),
            expected: format!("format `{format}`"),
            found: format!("format `{found_format}`"),
        });
    }
    let found_version = obj
        .remove("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::corrupt(path, "missing `format_version` header"))?;
    if found_version != u64::from(version) {
        return Err(Error::VersionMismatch {
            path: path.into(),
            expected: format!("{format} v{version}"),
            found: format!("{format} v{found_version}"),
        });
    }
    serde_json::from_value(value).map_err(|e| Error::corrupt(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Thing {
        xs: Vec<f64>,
        name: String,
    }

    #[test]
    fn envelope_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/thing.json");
        let thing = Thing {
            xs: vec![0.1, 1.0 / 3.0, -2.5e-300, f64::MAX, 5e-324],
            name: "t".into(),
        };
        save_versioned(&path, "thing", 3, &thing).unwrap();
        let back: Thing = load_versioned(&path, "thing", 3).unwrap();
        assert_eq!(thing, back);
        for (a, b) in thing.xs.iter().zip(&back.xs) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn version_and_format_are_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("thing.json");
        let thing = Thing {
            xs: vec![],
            name: String::new(),
        };
        save_versioned(&path, "thing", 1, &thing).unwrap();
        assert!(matches!(
            load_versioned::<Thing>(&path, "thing", 2),
            Err(Error::VersionMismatch { .. })
        ));
        assert!(matches!(
            load_versioned::<Thing>(&path, "other", 1),
            Err(Error::VersionMismatch { .. })
        ));
        fs::write(&path, "{not json").unwrap();
        assert!(matches!(
            load_versioned::<Thing>(&path, "thing", 1),
            Err(Error::Corrupt { .. })
        ));
    }

    #[test]
    fn atomic_write_leaves_no_temp_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.txt");
        write_atomic(&path, b"hello").unwrap();
        write_atomic(&path, b"again").unwrap();
        let names: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names.len(), 1);
        assert_eq!(fs::read_to_string(&path).unwrap(), "again");
    }
}
