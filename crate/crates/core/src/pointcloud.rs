//! Point clouds and their on-disk format.
//!
//! File layout: magic "PCF1", u32 n, u32 d, then n·d little-endian f32
//! values row-major. d is always 6: (x, y, z, r, g, b), xyz normalized,
//! rgb in [0, 1] (colorless clouds carry rgb = 0).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const POINT_DIM: usize = 6;
const MAGIC: &[u8; 4] = b"PCF1";

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    /// n×6 row-major.
    pub data: Vec<f32>,
}

impl PointCloud {
    pub fn new(data: Vec<f32>) -> Result<PointCloud> {
        if !data.len().is_multiple_of(POINT_DIM) {
            return Err(Error::dim(
                "point_cloud",
                format!("{} values is not a multiple of {POINT_DIM}", data.len()),
            ));
        }
        Ok(PointCloud { data })
    }

    pub fn len(&self) -> usize {
        self.data.len() / POINT_DIM
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f32] {
        &self.data[i * POINT_DIM..(i + 1) * POINT_DIM]
    }

    pub fn xyz(&self, i: usize) -> [f32; 3] {
        let p = self.point(i);
        [p[0], p[1], p[2]]
    }

    /// Copy with rows reordered to the canonical lexicographic order over
    /// all six fields. Grouping always runs on this ordering, which makes
    /// the encoder a set function of the input points.
    pub fn canonicalized(&self) -> PointCloud {
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|a, b| {
            let pa = self.point(*a);
            let pb = self.point(*b);
            for d in 0..POINT_DIM {
                match pa[d].total_cmp(&pb[d]) {
                    std::cmp::Ordering::Equal => continue,
                    other => return other,
                }
            }
            std::cmp::Ordering::Equal
        });
        let mut data = Vec::with_capacity(self.data.len());
        for i in order {
            data.extend_from_slice(self.point(i));
        }
        PointCloud { data }
    }

    pub fn write_pcf(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(MAGIC)?;
        f.write_all(&(self.len() as u32).to_le_bytes())?;
        f.write_all(&(POINT_DIM as u32).to_le_bytes())?;
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_pcf(path: &Path) -> Result<PointCloud> {
        let mut f = std::fs::File::open(path)?;
        let mut header = [0u8; 12];
        f.read_exact(&mut header).map_err(|_| Error::Format {
            offset: 0,
            detail: "truncated header".into(),
        })?;
        if &header[0..4] != MAGIC {
            return Err(Error::Format {
                offset: 0,
                detail: format!("bad magic {:?}", &header[0..4]),
            });
        }
        let n = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        if d != POINT_DIM {
            return Err(Error::Format {
                offset: 8,
                detail: format!("d = {d}, expected {POINT_DIM}"),
            });
        }
        let mut payload = vec![0u8; n * d * 4];
        f.read_exact(&mut payload).map_err(|_| Error::Format {
            offset: 12,
            detail: format!("truncated payload, expected {} bytes", n * d * 4),
        })?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(PointCloud { data })
    }
}
