//! Binary parameter checkpoints.
//!
//! Layout: magic `SFQN`, little-endian `u16` version, then records until end
//! of file. Each record is `[u16 name length][UTF-8 name][u8 rank]
//! [u32 extent × rank][f32 × product(extents)]`, all little-endian, values
//! row-major.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::DenseArray;

pub const MAGIC: &[u8; 4] = b"SFQN";
pub const VERSION: u16 = 1;

pub fn write_to(store: &ParamStore, mut w: impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, value) in store.iter() {
        let len =
            u16::try_from(name.len()).map_err(|_| Error::Format(format!("parameter name `{name}` is too long")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[value.rank() as u8])?;
        for &d in value.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} of `{name}` exceeds u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * value.len());
        for &v in value.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn to_bytes(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    write_to(store, &mut out).expect("writing to a Vec cannot fail");
    out
}

pub fn save(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, to_bytes(store))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn truncated(what: &str) -> Error {
    Error::Format(format!("checkpoint truncated while reading {what}"))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => truncated(what),
        _ => Error::Io(e),
    })
}

pub fn read_from(mut r: impl Read) -> Result<ParamStore> {
    let mut head = [0u8; 6];
    read_exact(&mut r, &mut head, "header")?;
    if &head[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u16::from_le_bytes([head[4], head[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut store = ParamStore::new();
    loop {
        let mut len = [0u8; 2];
        match r.read(&mut len[..1])? {
            0 => break,
            _ => read_exact(&mut r, &mut len[1..], "record name length")?,
        }
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        read_exact(&mut r, &mut name, "record name")?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("record name is not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        read_exact(&mut r, &mut rank, "rank")?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            let mut d = [0u8; 4];
            read_exact(&mut r, &mut d, "extent")?;
            shape.push(u32::from_le_bytes(d) as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; 4 * n];
        read_exact(&mut r, &mut raw, &format!("values of `{name}`"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let value = DenseArray::new(&shape, data).map_err(|e| Error::Format(format!("record `{name}`: {e}")))?;
        if store.get(&name).is_some() {
            return Err(Error::Format(format!("duplicate record `{name}`")));
        }
        store.insert(name, value);
    }
    Ok(store)
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamStore> {
    read_from(io::BufReader::new(fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(
            "a.w",
            DenseArray::new(&[2, 3], vec![0.5, -1.25, 3.0, 0.0, 1e-3, 7.0]).unwrap(),
        );
        s.insert("b", DenseArray::from_vec(vec![1.0]));
        s
    }

    #[test]
    fn layout_of_a_single_record() {
        let mut s = ParamStore::new();
        s.insert("x", DenseArray::from_vec(vec![1.0, -2.0]));
        let bytes = to_bytes(&s);
        let mut want = b"SFQN".to_vec();
        want.extend([1, 0]);
        want.extend([1, 0, b'x', 1, 2, 0, 0, 0]);
        want.extend(1.0f32.to_le_bytes());
        want.extend((-2.0f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn round_trip_preserves_order_and_f32_values() {
        let s = sample();
        let back = read_from(&to_bytes(&s)[..]).unwrap();
        assert_eq!(back.names(), s.names());
        for (name, v) in s.iter() {
            let r = back.get(name).unwrap();
            assert_eq!(r.shape(), v.shape());
            for (a, b) in r.data().iter().zip(v.data()) {
                assert_eq!(*a, *b as f32 as f64);
            }
        }
    }

    #[test]
    fn rejects_corruption() {
        let bytes = to_bytes(&sample());
        assert!(matches!(read_from(&b"NOPE\x01\x00"[..]), Err(Error::Format(_))));
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(read_from(&bad_version[..]), Err(Error::Format(_))));
        for cut in [3, 7, 10, bytes.len() - 1] {
            assert!(matches!(read_from(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        save(&sample(), &path).unwrap();
        assert_eq!(load(&path).unwrap().names(), sample().names());
        assert!(load(dir.path().join("missing")).is_err());
    }
}
