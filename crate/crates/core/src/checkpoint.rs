//! Binary checkpoint: magic, version, then named `f64` matrices.
//!
//! ```text
//! "DALCKPT\0" | u32 version | u32 groups | { u32 len, name, u64 rows, u64 cols, f64 × rows·cols }*
//! ```
//! All integers and floats little-endian.

use std::path::Path;

use crate::bcca::CmmParams;
use crate::error::{Error, Result};
use crate::math::{Matrix, Rng};
use crate::model::{Architecture, DalModel};

pub const MAGIC: &[u8; 8] = b"DALCKPT\0";
pub const VERSION: u32 = 1;
const FLAGS: &str = "meta.flags";

pub fn encode(model: &DalModel, cmm: &CmmParams) -> Vec<u8> {
    let flags = Matrix::filled(1, 1, if model.net.rfm.output_relu { 1.0 } else { 0.0 });
    let mut groups = model.named_params();
    groups.push(("cmm.w_id".into(), &cmm.w_id));
    groups.push(("cmm.w_age".into(), &cmm.w_age));
    groups.push((FLAGS.into(), &flags));

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(groups.len() as u32).to_le_bytes());
    for (name, m) in groups {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

fn decode_groups(bytes: &[u8]) -> Result<Vec<(String, Matrix)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut groups = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("group name is not UTF-8".into()))?;
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?;
        let data = r
            .take(n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        groups.push((name, Matrix::from_vec(rows, cols, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(groups)
}

fn shape_of(groups: &[(String, Matrix)], name: &str) -> Result<(usize, usize)> {
    groups
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, m)| m.shape())
        .ok_or_else(|| Error::Checkpoint(format!("missing group {name}")))
}

pub fn decode(bytes: &[u8]) -> Result<(DalModel, CmmParams)> {
    let groups = decode_groups(bytes)?;
    let (d_in, hidden) = shape_of(&groups, "backbone.0.weight")?;
    let (d_feat, n_id) = shape_of(&groups, "id_classifier.weight")?;
    let flags = groups
        .iter()
        .find(|(n, _)| n == FLAGS)
        .map(|(_, m)| m.as_slice().first().copied().unwrap_or(0.0))
        .unwrap_or(0.0);
    let arch = Architecture {
        d_in,
        hidden,
        d_feat,
        n_id,
        rfm_output_relu: flags != 0.0,
    };
    let mut model = DalModel::new(&arch, &Rng::new(0));
    let mut cmm = CmmParams::new(d_feat, &mut Rng::new(0));
    let mut expected: Vec<(String, &mut Matrix)> = model.named_params_mut();
    expected.push(("cmm.w_id".into(), &mut cmm.w_id));
    expected.push(("cmm.w_age".into(), &mut cmm.w_age));
    let mut seen = 0;
    for (name, m) in &groups {
        if name == FLAGS {
            continue;
        }
        let slot = expected
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected group {name}")))?;
        if slot.1.shape() != m.shape() {
            return Err(Error::Checkpoint(format!(
                "group {name} has shape {:?}, architecture needs {:?}",
                m.shape(),
                slot.1.shape()
            )));
        }
        *slot.1 = m.clone();
        seen += 1;
    }
    if seen != expected.len() {
        let missing: Vec<&str> = expected
            .iter()
            .map(|(n, _)| n.as_str())
            .filter(|n| !groups.iter().any(|(g, _)| g == n))
            .collect();
        return Err(Error::Checkpoint(format!(
            "missing groups {}",
            missing.join(", ")
        )));
    }
    Ok((model, cmm))
}

pub fn save(path: &Path, model: &DalModel, cmm: &CmmParams) -> Result<()> {
    std::fs::write(path, encode(model, cmm))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(DalModel, CmmParams)> {
    decode(&std::fs::read(path)?)
}

/// Checks that a loaded model accepts inputs of width `d_in`.
pub fn check_input_dim(model: &DalModel, d_in: usize) -> Result<()> {
    let have = model.net.backbone.input_dim();
    if have != d_in {
        return Err(Error::Checkpoint(format!(
            "group backbone.0.weight expects {have} inputs but the dataset has {d_in}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (DalModel, CmmParams) {
        let arch = Architecture {
            hidden: 10,
            d_feat: 4,
            rfm_output_relu: true,
            ..Architecture::new(7, 5)
        };
        (
            DalModel::new(&arch, &Rng::new(1)),
            CmmParams::new(4, &mut Rng::new(2)),
        )
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (model, cmm) = sample();
        let (m2, c2) = decode(&encode(&model, &cmm)).unwrap();
        assert_eq!(m2, model);
        assert_eq!(c2, cmm);
        for ((_, a), (_, b)) in model.named_params().iter().zip(m2.named_params()) {
            assert!(a.bitwise_eq(b));
        }
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let (model, cmm) = sample();
        let mut bytes = encode(&model, &cmm);
        bytes[0] ^= 0xff;
        assert_eq!(
            decode(&bytes).unwrap_err(),
            Error::Checkpoint("bad magic: not a checkpoint file".into())
        );
        assert!(decode(b"").is_err());
    }

    #[test]
    fn truncation_and_trailing_bytes_are_rejected() {
        let (model, cmm) = sample();
        let bytes = encode(&model, &cmm);
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(decode(&longer).is_err());
    }

    #[test]
    fn mismatched_group_is_named() {
        let (mut model, cmm) = sample();
        model.net.rfm.layers[1].bias = Matrix::zeros(1, 3);
        match decode(&encode(&model, &cmm)).unwrap_err() {
            Error::Checkpoint(msg) => assert!(msg.contains("rfm.1.bias"), "{msg}"),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn input_dim_check_names_the_group() {
        let (model, _) = sample();
        assert!(check_input_dim(&model, 7).is_ok());
        let err = check_input_dim(&model, 64).unwrap_err().to_string();
        assert!(err.contains("backbone.0.weight"));
    }
}
