//! Binary checkpoint container.
//!
//! ```text
//! "CAJS" | version u32 | count u32 | entry*          parameters
//!                        count u32 | entry*          Adam first moments
//!                        count u32 | entry*          Adam second moments
//!                        count u32 | u64*            Adam step counts
//!                        count u32 | entry*          non-trainable buffers
//!                        config hash u64
//! entry = name_len u16 | utf-8 name | rank u8 | dim u32 * rank | f32 * numel
//! ```
//! All integers and floats are little-endian.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CAJS";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Everything persisted for a model, at 32-bit precision.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub params: Vec<NamedArray>,
    pub adam_m: Vec<NamedArray>,
    pub adam_v: Vec<NamedArray>,
    pub adam_steps: Vec<u64>,
    pub buffers: Vec<NamedArray>,
    pub config_hash: u64,
}

fn write_entries<W: Write>(w: &mut W, entries: &[NamedArray]) -> Result<()> {
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for e in entries {
        let name = e.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("parameter name too long: {}", e.name)))?;
        let rank = u8::try_from(e.shape.len())
            .map_err(|_| Error::Checkpoint(format!("rank too large for {}", e.name)))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[rank])?;
        for &d in &e.shape {
            let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("dimension too large for {}", e.name)))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for &v in &e.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn write_checkpoint<W: Write>(mut w: W, ckpt: &Checkpoint) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    write_entries(&mut w, &ckpt.params)?;
    write_entries(&mut w, &ckpt.adam_m)?;
    write_entries(&mut w, &ckpt.adam_v)?;
    w.write_all(&(ckpt.adam_steps.len() as u32).to_le_bytes())?;
    for s in &ckpt.adam_steps {
        w.write_all(&s.to_le_bytes())?;
    }
    write_entries(&mut w, &ckpt.buffers)?;
    w.write_all(&ckpt.config_hash.to_le_bytes())?;
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| Error::Format {
            offset: self.offset,
            message: format!("truncated checkpoint: {e}"),
        })?;
        self.offset += N as u64;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn entries(&mut self) -> Result<Vec<NamedArray>> {
        let count = self.u32()?;
        let mut out = Vec::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(self.bytes()?) as usize;
            let mut name = vec![0u8; name_len];
            self.inner.read_exact(&mut name).map_err(|e| Error::Format {
                offset: self.offset,
                message: format!("truncated name: {e}"),
            })?;
            let at = self.offset;
            self.offset += name_len as u64;
            let name = String::from_utf8(name).map_err(|_| Error::Format {
                offset: at,
                message: "parameter name is not UTF-8".into(),
            })?;
            let [rank] = self.bytes::<1>()?;
            let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = (0..numel)
                .map(|_| self.bytes::<4>().map(f32::from_le_bytes))
                .collect::<Result<Vec<_>>>()?;
            out.push(NamedArray { name, shape, data });
        }
        Ok(out)
    }
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<Checkpoint> {
    let mut rd = Reader { inner: r, offset: 0 };
    let magic = rd.bytes::<4>()?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {magic:?}"),
        });
    }
    let version = rd.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let params = rd.entries()?;
    let adam_m = rd.entries()?;
    let adam_v = rd.entries()?;
    let steps = rd.u32()?;
    let adam_steps = (0..steps)
        .map(|_| rd.bytes::<8>().map(u64::from_le_bytes))
        .collect::<Result<Vec<_>>>()?;
    let buffers = rd.entries()?;
    let config_hash = u64::from_le_bytes(rd.bytes()?);
    Ok(Checkpoint {
        params,
        adam_m,
        adam_v,
        adam_steps,
        buffers,
        config_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn array(name: &str, shape: Vec<usize>, seed: f32) -> NamedArray {
        let n = shape.iter().product();
        NamedArray {
            name: name.into(),
            shape,
            data: (0..n).map(|i| seed + i as f32 * 0.37).collect(),
        }
    }

    #[test]
    fn header_layout() {
        let ckpt = Checkpoint {
            params: vec![array("w", vec![2], 1.5)],
            ..Default::default()
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ckpt).unwrap();
        assert_eq!(&buf[0..4], b"CAJS");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
        assert_eq!(u16::from_le_bytes(buf[12..14].try_into().unwrap()), 1);
        assert_eq!(buf[14], b'w');
        assert_eq!(buf[15], 1);
        assert_eq!(u32::from_le_bytes(buf[16..20].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(buf[20..24].try_into().unwrap()), 1.5);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let ckpt = Checkpoint {
            params: vec![array("w", vec![3], 0.0)],
            ..Default::default()
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ckpt).unwrap();
        buf.truncate(22);
        assert!(matches!(read_checkpoint(&buf[..]), Err(Error::Format { .. })));
        assert!(matches!(read_checkpoint(&b"NOPE\x01\0\0\0"[..]), Err(Error::Format { offset: 0, .. })));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            values in prop::collection::vec(any::<f32>(), 1..40),
            steps in prop::collection::vec(any::<u64>(), 0..4),
            hash in any::<u64>(),
        ) {
            let n = values.len();
            let entry = NamedArray { name: "enc.fl1.conv.w".into(), shape: vec![n], data: values.clone() };
            let ckpt = Checkpoint {
                params: vec![entry.clone(), array("b", vec![2, 1, 3], -1.0)],
                adam_m: vec![entry.clone()],
                adam_v: vec![entry],
                adam_steps: steps,
                buffers: vec![array("bn.mean", vec![4], 2.0)],
                config_hash: hash,
            };
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &ckpt).unwrap();
            let back = read_checkpoint(&buf[..]).unwrap();
            let bits = |c: &Checkpoint| c.params[0].data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back), bits(&ckpt));
            prop_assert_eq!(back.adam_steps, ckpt.adam_steps);
            prop_assert_eq!(back.config_hash, hash);
            prop_assert_eq!(back.buffers, ckpt.buffers);
        }
    }
}
