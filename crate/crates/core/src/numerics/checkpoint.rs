//! Parameter checkpoints: a binary container of `(name, shape, f32 LE values)`
//! records plus a plain-text manifest next to it.
//!
//! Binary layout (all integers little-endian):
//! `b"DIRLABCK"`, `u32` version, `u32` entry count, then per entry
//! `u32` name length, UTF-8 name, `u8` trainable, `u8` decay, `u32` rank,
//! `u64` per dimension, and `prod(shape)` `f32` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{DenseArray, ParameterStore, Real};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DIRLABCK";
const VERSION: u32 = 1;

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".manifest");
    PathBuf::from(p)
}

fn manifest_text<F: Real>(store: &ParameterStore<F>) -> String {
    let mut out = format!("# dirlab checkpoint v{VERSION}: name\tshape\ttrainable\tdecay\tcount\n");
    for (name, p) in store.iter() {
        let shape: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        out.push_str(&format!(
            "{name}\t{}\t{}\t{}\t{}\n",
            shape.join("x"),
            p.trainable,
            p.decay,
            p.value.len()
        ));
    }
    out
}

pub fn write_checkpoint<F: Real, W: Write>(store: &ParameterStore<F>, w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, p) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[p.trainable as u8, p.decay as u8])?;
        w.write_all(&(p.value.shape().len() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in p.value.data() {
            w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint<F: Real, R: Read>(r: R) -> Result<ParameterStore<F>> {
    let mut r = BufReader::new(r);
    let bad = |msg: String| Error::Decode(format!("checkpoint: {msg}"));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| bad(e.to_string()))?;
        let mut flags = [0u8; 2];
        r.read_exact(&mut flags)?;
        let rank = read_u32(&mut r)? as usize;
        let shape: Vec<usize> = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<std::io::Result<_>>()?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 4];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(F::from_f64(f32::from_le_bytes(buf) as f64));
        }
        store.insert(name, DenseArray::from_vec(&shape, data)?, flags[0] != 0, flags[1] != 0)?;
    }
    Ok(store)
}

pub fn save_checkpoint<F: Real>(store: &ParameterStore<F>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_checkpoint(store, File::create(path)?)?;
    std::fs::write(manifest_path(path), manifest_text(store))?;
    Ok(())
}

/// Loads a checkpoint and, when its manifest is present, checks that both agree.
pub fn load_checkpoint<F: Real>(path: &Path) -> Result<ParameterStore<F>> {
    let store: ParameterStore<F> = read_checkpoint(File::open(path)?).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mpath = manifest_path(path);
    if mpath.exists() {
        let on_disk = std::fs::read_to_string(&mpath)?;
        if on_disk != manifest_text(&store) {
            return Err(Error::Load {
                path: mpath,
                reason: "manifest does not match the binary container".into(),
            });
        }
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut s = ParameterStore::<f32>::new();
        let vals: Vec<f32> = (0..24).map(|i| (i as f32 * 0.123).sin() * 1e-3 + f32::EPSILON * i as f32).collect();
        s.insert("h.0.w", DenseArray::from_vec(&[4, 6], vals).unwrap(), true, true).unwrap();
        s.insert("lora.h.0.A", DenseArray::from_vec(&[2], vec![f32::MIN_POSITIVE, -0.0]).unwrap(), false, false)
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&s, &path).unwrap();
        let back: ParameterStore<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(back.len(), 2);
        for ((n1, p1), (n2, p2)) in s.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(p1.value.shape(), p2.value.shape());
            assert_eq!((p1.trainable, p1.decay), (p2.trainable, p2.decay));
            let b1: Vec<u32> = p1.value.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u32> = p2.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
        let manifest = std::fs::read_to_string(manifest_path(&path)).unwrap();
        assert!(manifest.contains("h.0.w\t4x6\ttrue\ttrue\t24"));
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        assert!(read_checkpoint::<f32, _>(&b"NOTACKPT"[..]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let mut s = ParameterStore::<f32>::new();
        s.insert("w", DenseArray::zeros(&[3]), true, true).unwrap();
        save_checkpoint(&s, &path).unwrap();
        std::fs::write(manifest_path(&path), "tampered").unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Load { .. })));
    }
}
