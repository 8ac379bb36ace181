//! Checkpoint container: a plain uncompressed tar archive holding
//! `manifest.json` plus one `params/<name>.npy` entry per parameter tensor.
//!
//! Arrays are NPY v1.0, f64 little-endian, C order. Entries are written in
//! caller order with zeroed timestamps and ownership so the same contents
//! always produce byte-identical files.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const NPY_MAGIC: &[u8; 6] = b"\x93NUMPY";

/// Serialize one tensor as NPY v1.0.
pub fn npy_bytes(t: &Tensor) -> Vec<u8> {
    let shape = t
        .shape()
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join(", ");
    let shape = if t.shape().len() == 1 {
        format!("({shape},)")
    } else {
        format!("({shape})")
    };
    let mut header = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': {shape}, }}");
    // total header block (magic + version + len + text) padded to 64 bytes
    let unpadded = NPY_MAGIC.len() + 2 + 2 + header.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    header.extend(std::iter::repeat(' ').take(pad));
    header.push('\n');

    let mut out = Vec::with_capacity(unpadded + pad + t.len() * 8);
    out.extend_from_slice(NPY_MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parse NPY v1.0 f64 little-endian data. `what` names the array in errors.
pub fn parse_npy(bytes: &[u8], what: &str) -> Result<Tensor> {
    let fail = |reason: String| Error::checkpoint(what, reason);
    if bytes.len() < 10 || &bytes[..6] != NPY_MAGIC {
        return Err(fail("not an NPY array".into()));
    }
    if bytes[6] != 1 || bytes[7] != 0 {
        return Err(fail(format!("unsupported NPY version {}.{}", bytes[6], bytes[7])));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let data_start = 10 + header_len;
    if bytes.len() < data_start {
        return Err(fail("truncated NPY header".into()));
    }
    let header = std::str::from_utf8(&bytes[10..data_start])
        .map_err(|_| fail("NPY header is not UTF-8".into()))?;
    if !header.contains("'descr': '<f8'") {
        return Err(fail("expected dtype '<f8'".into()));
    }
    if !header.contains("'fortran_order': False") {
        return Err(fail("expected C-order array".into()));
    }
    let open = header.find('(').ok_or_else(|| fail("missing shape".into()))?;
    let close = header[open..]
        .find(')')
        .ok_or_else(|| fail("missing shape".into()))?
        + open;
    let shape: Vec<usize> = header[open + 1..close]
        .split(',')
        .map(|t| t.trim())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| fail(format!("bad shape component {t:?}")))
        })
        .collect::<Result<_>>()?;
    let n: usize = shape.iter().product();
    let data_bytes = &bytes[data_start..];
    if data_bytes.len() != n * 8 {
        return Err(fail(format!(
            "shape {:?} wants {} bytes, file has {}",
            shape,
            n * 8,
            data_bytes.len()
        )));
    }
    let data = data_bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::new(shape, data))
}

fn append_entry(
    builder: &mut tar::Builder<std::fs::File>,
    name: &str,
    bytes: &[u8],
) -> std::io::Result<()> {
    let mut header = tar::Header::new_gnu();
    header.set_size(bytes.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_uid(0);
    header.set_gid(0);
    builder.append_data(&mut header, name, bytes)
}

/// Write a container archive. Parameter order is preserved, so identical
/// inputs produce identical files.
pub fn write_archive(
    path: &Path,
    manifest: &serde_json::Value,
    params: &[(String, Tensor)],
) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::checkpoint(path, format!("create failed: {e}")))?;
    let mut builder = tar::Builder::new(file);
    let manifest_bytes =
        serde_json::to_vec_pretty(manifest).expect("manifest is plain JSON data");
    append_entry(&mut builder, "manifest.json", &manifest_bytes)
        .map_err(|e| Error::checkpoint(path, format!("write manifest: {e}")))?;
    for (name, tensor) in params {
        append_entry(
            &mut builder,
            &format!("params/{name}.npy"),
            &npy_bytes(tensor),
        )
        .map_err(|e| Error::checkpoint(path, format!("write {name}: {e}")))?;
    }
    builder
        .into_inner()
        .and_then(|mut f| {
            use std::io::Write;
            f.flush()
        })
        .map_err(|e| Error::checkpoint(path, format!("finalize: {e}")))?;
    Ok(())
}

/// Read a container archive back: the manifest plus parameters in archive
/// order (names without the `params/` prefix or `.npy` suffix).
pub fn read_archive(path: &Path) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::checkpoint(path, format!("open failed: {e}")))?;
    let mut archive = tar::Archive::new(file);
    let mut manifest: Option<serde_json::Value> = None;
    let mut params = Vec::new();
    let entries = archive
        .entries()
        .map_err(|e| Error::checkpoint(path, format!("not a tar archive: {e}")))?;
    for entry in entries {
        let mut entry = entry.map_err(|e| Error::checkpoint(path, format!("corrupt entry: {e}")))?;
        let name = entry
            .path()
            .map_err(|e| Error::checkpoint(path, format!("bad entry path: {e}")))?
            .to_string_lossy()
            .into_owned();
        let mut bytes = Vec::with_capacity(entry.size() as usize);
        entry
            .read_to_end(&mut bytes)
            .map_err(|e| Error::checkpoint(path, format!("truncated entry {name}: {e}")))?;
        if name == "manifest.json" {
            manifest = Some(serde_json::from_slice(&bytes).map_err(|e| {
                Error::checkpoint(path, format!("manifest is not valid JSON: {e}"))
            })?);
        } else if let Some(stem) = name
            .strip_prefix("params/")
            .and_then(|s| s.strip_suffix(".npy"))
        {
            params.push((stem.to_string(), parse_npy(&bytes, &name)?));
        } else {
            return Err(Error::checkpoint(path, format!("unexpected entry {name}")));
        }
    }
    let manifest = manifest.ok_or_else(|| Error::checkpoint(path, "missing manifest.json"))?;
    Ok((manifest, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn npy_round_trip_multiple_ranks() {
        for shape in [vec![5], vec![2, 3], vec![2, 3, 1, 4]] {
            let n: usize = shape.iter().product();
            let t = Tensor::new(shape, (0..n).map(|i| i as f64 * 0.37 - 1.0).collect());
            let back = parse_npy(&npy_bytes(&t), "t").unwrap();
            assert_eq!(back, t);
        }
    }

    #[test]
    fn npy_rejects_corruption() {
        let t = Tensor::from_slice(&[1.0, 2.0, 3.0]);
        let good = npy_bytes(&t);
        assert!(parse_npy(&good[..good.len() - 4], "t").is_err(), "truncated data");
        assert!(parse_npy(&good[..8], "t").is_err(), "truncated header");
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(parse_npy(&bad_magic, "t").is_err());
    }

    #[test]
    fn archive_round_trip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let manifest = json!({"iteration": 3, "config_hash": "abc"});
        let params = vec![
            ("w0".to_string(), Tensor::from_slice(&[1.0, -2.0])),
            (
                "block.weight".to_string(),
                Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]),
            ),
        ];
        write_archive(&a, &manifest, &params).unwrap();
        write_archive(&b, &manifest, &params).unwrap();
        assert_eq!(
            std::fs::read(&a).unwrap(),
            std::fs::read(&b).unwrap(),
            "identical contents, identical bytes"
        );

        let (m, p) = read_archive(&a).unwrap();
        assert_eq!(m, manifest);
        assert_eq!(p, params);
    }

    #[test]
    fn archive_rejects_truncation_and_strangers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        write_archive(
            &path,
            &json!({}),
            &[("x".to_string(), Tensor::from_slice(&[9.0; 100]))],
        )
        .unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(read_archive(&path).is_err());
    }
}
