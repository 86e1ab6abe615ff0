//! Little-endian `f64` array plus a JSON sidecar describing its lattice.
//!
//! `foo.raw` is accompanied by `foo.json`:
//! `{"dims": [..], "spacing": [..], "origin": [..], "channels": c}`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, Volume3, WarpField};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawSidecar {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawArray {
    pub meta: RawSidecar,
    pub data: Vec<f64>,
}

impl RawArray {
    pub fn into_volume(self) -> Result<Volume3> {
        if self.meta.channels != 1 {
            return Err(Error::invalid(format!(
                "raw array has {} channels, expected 1",
                self.meta.channels
            )));
        }
        let d = self.meta.dims;
        Ok(Volume3::from_vec(Dims::new(d[0], d[1], d[2])?, self.data)?
            .with_spacing(self.meta.spacing)?
            .with_origin(self.meta.origin))
    }

    pub fn into_warp(self) -> Result<WarpField> {
        if self.meta.channels != 3 {
            return Err(Error::invalid(format!(
                "raw array has {} channels, expected 3",
                self.meta.channels
            )));
        }
        let d = self.meta.dims;
        WarpField::from_vec(Dims::new(d[0], d[1], d[2])?, self.data)
    }
}

pub fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("json")
}

fn write_raw(path: &Path, meta: &RawSidecar, data: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for &x in data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    let mut json = serde_json::to_string_pretty(meta)?;
    json.push('\n');
    std::fs::write(sidecar_path(path), json)?;
    Ok(())
}

pub fn write_raw_volume(v: &Volume3, path: &Path) -> Result<()> {
    let meta = RawSidecar {
        dims: v.dims().0,
        spacing: v.spacing,
        origin: v.origin,
        channels: 1,
    };
    write_raw(path, &meta, v.data())
}

/// Warps carry no physical metadata of their own; the caller supplies the
/// geometry of the lattice they live on.
pub fn write_raw_warp(u: &WarpField, spacing: [f64; 3], origin: [f64; 3], path: &Path) -> Result<()> {
    let meta = RawSidecar {
        dims: u.dims().0,
        spacing,
        origin,
        channels: 3,
    };
    write_raw(path, &meta, u.data())
}

pub fn read_raw(path: &Path) -> Result<RawArray> {
    let meta: RawSidecar = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
    let bytes = std::fs::read(path)?;
    let expect = meta.dims.iter().product::<usize>() * meta.channels * 8;
    if bytes.len() != expect {
        return Err(Error::format(
            bytes.len().min(expect),
            format!("raw payload has {} bytes, sidecar implies {expect}", bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(RawArray { meta, data })
}
