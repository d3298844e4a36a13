//! Checkpoint container: one JSON header line (names, shapes, offsets,
//! payload checksum) followed by the little-endian f64 payload.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use mal_core::digest::fnv64;
use mal_core::optim::ParamStore;
use mal_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Serialize, Deserialize)]
struct Header {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    /// Element offset of each tensor within the payload.
    offsets: Vec<usize>,
    total_elems: usize,
    /// FNV-1a 64 over the payload bytes, hex.
    checksum: String,
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    let mut names = Vec::new();
    let mut shapes = Vec::new();
    let mut offsets = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for (name, param) in store.iter() {
        names.push(name.to_string());
        shapes.push(param.value.shape().to_vec());
        offsets.push(offset);
        offset += param.value.len();
        for v in param.value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        names,
        shapes,
        offsets,
        total_elems: offset,
        checksum: format!("{:016x}", fnv64(&payload)),
    };
    let mut file = File::create(path).map_err(|e| LabError::io(path, e))?;
    serde_json::to_writer(&mut file, &header)
        .map_err(|e| LabError::Parse(format!("{}: {e}", path.display())))?;
    file.write_all(b"\n").map_err(|e| LabError::io(path, e))?;
    file.write_all(&payload).map_err(|e| LabError::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let mut file = File::open(path).map_err(|e| LabError::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|e| LabError::io(path, e))?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| LabError::Corrupt(format!("{}: missing header", path.display())))?;
    let header: Header = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| LabError::Corrupt(format!("{}: bad header: {e}", path.display())))?;
    let payload = &bytes[newline + 1..];
    if payload.len() != header.total_elems * 8 {
        return Err(LabError::Corrupt(format!(
            "{}: payload is {} bytes, header declares {}",
            path.display(),
            payload.len(),
            header.total_elems * 8
        )));
    }
    let checksum = format!("{:016x}", fnv64(payload));
    if checksum != header.checksum {
        return Err(LabError::Corrupt(format!(
            "{}: checksum mismatch ({} vs {})",
            path.display(),
            checksum,
            header.checksum
        )));
    }
    let mut store = ParamStore::new();
    for ((name, shape), &offset) in header
        .names
        .iter()
        .zip(&header.shapes)
        .zip(&header.offsets)
    {
        let count: usize = shape.iter().product();
        let start = offset * 8;
        let data: Vec<f64> = payload[start..start + count * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(name, Tensor::from_vec(shape, data)?)?;
    }
    Ok(store)
}

/// Copy checkpoint values into a freshly built store, insisting that
/// names and shapes line up exactly.
pub fn restore_into(target: &mut ParamStore, loaded: &ParamStore) -> Result<()> {
    let target_names: Vec<String> = target.names().map(|s| s.to_string()).collect();
    let loaded_names: Vec<String> = loaded.names().map(|s| s.to_string()).collect();
    if target_names != loaded_names {
        let missing: Vec<&String> = target_names
            .iter()
            .filter(|n| !loaded_names.contains(n))
            .collect();
        let extra: Vec<&String> = loaded_names
            .iter()
            .filter(|n| !target_names.contains(n))
            .collect();
        return Err(LabError::Corrupt(format!(
            "checkpoint/architecture mismatch; missing {missing:?}, unexpected {extra:?}"
        )));
    }
    for name in &target_names {
        let src = loaded.value(name)?;
        let dst = target.value_mut(name)?;
        if src.shape() != dst.shape() {
            return Err(LabError::Corrupt(format!(
                "shape mismatch for {name}: checkpoint {:?}, architecture {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        dst.data_mut().copy_from_slice(src.data());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a/w", Tensor::from_vec(&[2, 3], vec![1.5, -2.0, 0.25, 3.0, -0.125, 9.0]).unwrap())
            .unwrap();
        s.insert("b", Tensor::from_vec(&[2], vec![f64::MIN_POSITIVE, -0.0]).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let s = store();
        save_checkpoint(&s, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        for name in ["a/w", "b"] {
            assert_eq!(s.value(name).unwrap(), back.value(name).unwrap());
        }
    }

    #[test]
    fn truncation_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&store(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(LabError::Corrupt(_))
        ));
    }

    #[test]
    fn corruption_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&store(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn shape_mismatch_names_offender() {
        let loaded = store();
        let mut target = ParamStore::new();
        target
            .insert("a/w", Tensor::zeros(&[3, 2]))
            .unwrap();
        target.insert("b", Tensor::zeros(&[2])).unwrap();
        let err = restore_into(&mut target, &loaded).unwrap_err();
        assert!(err.to_string().contains("a/w"), "{err}");
    }
}
