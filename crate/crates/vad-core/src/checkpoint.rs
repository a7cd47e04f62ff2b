//! Tensor container used for checkpoints and all `.vadt` artifacts.
//!
//! Layout: magic `VADT`, version u16 LE, then one record per tensor:
//! name length u16 LE, UTF-8 name, rank u8, dims u32 LE each, payload f32 LE.
//! Records run to end of file. Round-trips are bit-exact at f32.

use crate::error::{Result, VadError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"VADT";
const VERSION: u16 = 1;

pub fn save<S: Scalar>(path: &Path, tensors: &[(&str, &Tensor<S>)]) -> Result<()> {
    let file = File::create(path).map_err(|e| VadError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| VadError::io(path.display().to_string(), e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    for (name, t) in tensors {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(VadError::Other(format!("tensor name too long: {name}")));
        }
        if t.shape().len() > u8::MAX as usize {
            return Err(VadError::Other(format!("tensor rank too large: {name}")));
        }
        w.write_all(&(name_bytes.len() as u16).to_le_bytes()).map_err(io_err)?;
        w.write_all(name_bytes).map_err(io_err)?;
        w.write_all(&[t.shape().len() as u8]).map_err(io_err)?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes()).map_err(io_err)?;
        }
        for v in t.data() {
            w.write_all(&v.to_f32().to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

pub fn load<S: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<S>)>> {
    let file = File::open(path).map_err(|e| VadError::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let corrupt = |reason: &str| VadError::CorruptCheckpoint {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| corrupt("missing magic"))?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let mut ver = [0u8; 2];
    r.read_exact(&mut ver).map_err(|_| corrupt("missing version"))?;
    if u16::from_le_bytes(ver) != VERSION {
        return Err(corrupt("unsupported version"));
    }
    let mut out = Vec::new();
    loop {
        let mut len_buf = [0u8; 2];
        match r.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(_) => return Err(corrupt("truncated record header")),
        }
        let name_len = u16::from_le_bytes(len_buf) as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf).map_err(|_| corrupt("truncated name"))?;
        let name = String::from_utf8(name_buf).map_err(|_| corrupt("non-utf8 name"))?;
        let mut rank_buf = [0u8; 1];
        r.read_exact(&mut rank_buf).map_err(|_| corrupt("truncated rank"))?;
        let mut shape = Vec::with_capacity(rank_buf[0] as usize);
        for _ in 0..rank_buf[0] {
            let mut dim = [0u8; 4];
            r.read_exact(&mut dim).map_err(|_| corrupt("truncated dims"))?;
            shape.push(u32::from_le_bytes(dim) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * 4];
        r.read_exact(&mut payload).map_err(|_| corrupt("truncated payload"))?;
        let data: Vec<S> = payload
            .chunks_exact(4)
            .map(|c| S::from_f32(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        out.push((
            name,
            Tensor::from_vec(shape, data).map_err(VadError::Tensor)?,
        ));
    }
    Ok(out)
}

/// Convenience for single-tensor `.vadt` stacks (frames, flows, masks, maps).
pub fn save_single<S: Scalar>(path: &Path, name: &str, t: &Tensor<S>) -> Result<()> {
    save(path, &[(name, t)])
}

pub fn load_single<S: Scalar>(path: &Path, name: &str) -> Result<Tensor<S>> {
    let all = load::<S>(path)?;
    all.into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| VadError::CorruptCheckpoint {
            path: path.display().to_string(),
            reason: format!("tensor {name} not found"),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.vadt");
        let a = Tensor::<f32>::rand_uniform(&[3, 4, 5], 10.0, &mut rng);
        let b = Tensor::<f32>::rand_normal(&[7], 0.0, 2.0, &mut rng);
        save(&path, &[("enc.w", &a), ("enc.b", &b)]).unwrap();
        let loaded = load::<f32>(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].0, "enc.w");
        assert_eq!(loaded[0].1.data(), a.data());
        assert_eq!(loaded[1].1.shape(), &[7]);
        assert_eq!(loaded[1].1.data(), b.data());

        // The file on disk is byte-stable across saves.
        let path2 = dir.path().join("ckpt2.vadt");
        save(&path2, &[("enc.w", &a), ("enc.b", &b)]).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.vadt");
        std::fs::write(&path, b"NOPE\x01\x00").unwrap();
        assert!(load::<f32>(&path).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn roundtrip_random_shapes(dims in proptest::collection::vec(1usize..6, 1..4), seed in 0u64..1000) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-1e6f32..1e6f32)).collect();
            let t = Tensor::from_vec(dims.clone(), data).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("t.vadt");
            save_single(&path, "t", &t).unwrap();
            let back = load_single::<f32>(&path, "t").unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert_eq!(back.data(), t.data());
        }
    }
}
