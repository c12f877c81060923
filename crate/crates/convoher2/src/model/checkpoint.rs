//! Head checkpoint persistence: a binary weight blob plus a portable text
//! sidecar with training metadata.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use super::head::Head;
use super::HeadSpec;
use crate::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 4] = b"CVH2";
const CHECKPOINT_VERSION: u32 = 1;

/// Metadata written alongside every checkpoint.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CheckpointSidecar {
    pub epoch: usize,
    pub monitored_loss: f64,
    pub config_hash: String,
    pub modality: String,
    pub created_at: String,
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Persist all head parameters and running statistics bit-exactly, with the
/// sidecar record next to the blob.
pub fn save_checkpoint(head: &Head, path: &Path, sidecar: &CheckpointSidecar) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CHECKPOINT_MAGIC)?;
    f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let widths = head.spec.widths();
    f.write_all(&(widths.len() as u32).to_le_bytes())?;
    for w in &widths {
        f.write_all(&(*w as u64).to_le_bytes())?;
    }
    for arr in head.export_weights() {
        f.write_all(&(arr.data.len() as u64).to_le_bytes())?;
        for v in arr.data {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    drop(f);
    let meta = serde_json::to_string_pretty(sidecar)
        .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    std::fs::write(sidecar_path(path), meta)?;
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`] into a head with the
/// given topology.
pub fn load_checkpoint(path: &Path, spec: &HeadSpec) -> Result<(Head, Option<CheckpointSidecar>)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut f, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let mut u32buf = [0u8; 4];
    read_exact(&mut f, &mut u32buf)?;
    if u32::from_le_bytes(u32buf) != CHECKPOINT_VERSION {
        return Err(Error::CorruptCheckpoint("unsupported version".into()));
    }
    read_exact(&mut f, &mut u32buf)?;
    let n_widths = u32::from_le_bytes(u32buf) as usize;
    let mut widths = Vec::with_capacity(n_widths);
    let mut u64buf = [0u8; 8];
    for _ in 0..n_widths {
        read_exact(&mut f, &mut u64buf)?;
        widths.push(u64::from_le_bytes(u64buf) as usize);
    }
    let expected = spec.widths();
    if widths != expected {
        return Err(Error::TopologyMismatch { expected, found: widths });
    }
    let mut head = Head::init(spec.clone(), 0);
    let mut loaded = Vec::new();
    for arr in head.export_weights() {
        read_exact(&mut f, &mut u64buf)?;
        let len = u64::from_le_bytes(u64buf) as usize;
        if len != arr.data.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "array {} has {} values, expected {}",
                arr.name,
                len,
                arr.data.len()
            )));
        }
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            read_exact(&mut f, &mut u64buf)?;
            data.push(f64::from_le_bytes(u64buf));
        }
        loaded.push((arr.name, data));
    }
    for (name, data) in loaded {
        apply_array(&mut head, &name, &data)?;
    }
    let sidecar = std::fs::read_to_string(sidecar_path(path))
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok());
    Ok((head, sidecar))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::CorruptCheckpoint("truncated file".into()))
}

fn apply_array(head: &mut Head, name: &str, data: &[f64]) -> Result<()> {
    // Trainable blocks go through set_block; running stats are assigned here.
    if name.ends_with(".running_mean") || name.ends_with(".running_var") {
        let idx: usize = name
            .trim_start_matches("stage")
            .split('.')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("bad array name {name:?}")))?;
        let stage = &mut head.stages[idx];
        let target = if name.ends_with("mean") {
            &mut stage.bn.running_mean
        } else {
            &mut stage.bn.running_var
        };
        target
            .as_slice_mut()
            .unwrap()
            .copy_from_slice(data);
        Ok(())
    } else {
        head.set_block(name, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_head;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sidecar() -> CheckpointSidecar {
        CheckpointSidecar {
            epoch: 3,
            monitored_loss: 0.75,
            config_hash: "abc".into(),
            modality: "IHC".into(),
            created_at: "2026-08-23T00:00:00Z".into(),
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let spec = build_head(8).unwrap();
        let mut head = Head::init(spec.clone(), 42);
        // Move running stats off their defaults so they are exercised.
        let x = {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            Array2::from_shape_fn((6, 8), |_| rng.gen_range(-1.0..1.0))
        };
        let (_, cache) = head.train_forward(&x).unwrap();
        head.update_running_stats(&cache);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ckpt.bin");
        save_checkpoint(&head, &p, &sidecar()).unwrap();
        let (back, meta) = load_checkpoint(&p, &spec).unwrap();
        assert_eq!(head.checksum(), back.checksum());
        assert_eq!(meta.unwrap(), sidecar());
        // forward outputs identical on a fixed batch
        let a = head.infer(&x).unwrap();
        let b = back.infer(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let spec = build_head(8).unwrap();
        let head = Head::init(spec.clone(), 1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ckpt.bin");
        save_checkpoint(&head, &p, &sidecar()).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_checkpoint(&p, &spec),
            Err(Error::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn topology_mismatch_is_rejected() {
        let small = build_head(8).unwrap();
        let head = Head::init(small, 1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ckpt.bin");
        save_checkpoint(&head, &p, &sidecar()).unwrap();
        let wide = build_head(16).unwrap();
        assert!(matches!(
            load_checkpoint(&p, &wide),
            Err(Error::TopologyMismatch { .. })
        ));
    }
}
