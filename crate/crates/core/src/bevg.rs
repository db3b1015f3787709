//! BEVG on-disk frame format.
//!
//! Little-endian throughout:
//!
//! ```text
//! "BEVG" | u16 version (=1) | u16 reserved (=0)
//! u32 height | u32 width | f32 cell_size_m | f32 ego_row | f32 ego_col
//! u16 num_future_steps | f32 step_seconds
//! u16 len + frame_id UTF-8 | u16 len + episode_id UTF-8
//! for t in 0..=num_future_steps:
//!     height*width f32 probabilities (row-major)
//!     height*width u8 occupancy (0/1)
//!     u32 instance count
//!     per instance: u32 id | f32 center_row | f32 center_col | u32 pixel count | (u16 row, u16 col)*
//! ```
//!
//! Floats are stored as `f32`; records with `f64` scalars round-trip exactly
//! when their values are representable in `f32`. Annotation centers are
//! recomputed from the pixel list on read and checked against the stored value.

use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};

use crate::error::{Error, Result};
use crate::grid::{AnnotatedObject, AnnotationMask, FrameRecord, GridMeta, ProbGrid};
use crate::scalar::Real;

pub const MAGIC: &[u8; 4] = b"BEVG";
pub const FORMAT_VERSION: u16 = 1;
pub const FILE_EXTENSION: &str = "bevg";

/// Exact encoded size of `record` in bytes.
pub fn encoded_len<T: Real>(record: &FrameRecord<T>) -> usize {
    let meta = record.meta();
    let header = 8 + 4 + 4 + 4 + 4 + 4 + 2 + 4 + 2 + record.frame_id.len() + 2 + record.episode_id.len();
    let per_step_fixed = meta.num_cells() * (4 + 1) + 4;
    let instances: usize = record
        .annotations
        .iter()
        .flat_map(|a| a.instances())
        .map(|o| 4 + 4 + 4 + 4 + 4 * o.pixels().len())
        .sum();
    header + per_step_fixed * meta.num_timesteps() + instances
}

pub fn encode<T: Real>(record: &FrameRecord<T>) -> Result<Vec<u8>> {
    record.validate()?;
    let meta = record.meta();
    let mut out = Vec::with_capacity(encoded_len(record));
    out.extend_from_slice(MAGIC);
    // Writes into a Vec cannot fail.
    out.write_u16::<LittleEndian>(FORMAT_VERSION).unwrap();
    out.write_u16::<LittleEndian>(0).unwrap();
    out.write_u32::<LittleEndian>(meta.height_cells as u32).unwrap();
    out.write_u32::<LittleEndian>(meta.width_cells as u32).unwrap();
    for v in [meta.cell_size_m, meta.ego_row, meta.ego_col] {
        out.write_f32::<LittleEndian>(to_f32(v)).unwrap();
    }
    out.write_u16::<LittleEndian>(meta.num_future_steps).unwrap();
    out.write_f32::<LittleEndian>(to_f32(meta.step_seconds)).unwrap();
    write_str(&mut out, "frame_id", &record.frame_id)?;
    write_str(&mut out, "episode_id", &record.episode_id)?;

    for (grid, ann) in record.grids.iter().zip(&record.annotations) {
        for &p in grid.cells() {
            out.write_f32::<LittleEndian>(to_f32(p)).unwrap();
        }
        out.extend(ann.occupied().iter().map(|&o| o as u8));
        out.write_u32::<LittleEndian>(ann.instances().len() as u32).unwrap();
        for obj in ann.instances() {
            let (cr, cc) = obj.center();
            out.write_u32::<LittleEndian>(obj.object_id).unwrap();
            out.write_f32::<LittleEndian>(to_f32(cr)).unwrap();
            out.write_f32::<LittleEndian>(to_f32(cc)).unwrap();
            out.write_u32::<LittleEndian>(obj.pixels().len() as u32).unwrap();
            for &(r, c) in obj.pixels() {
                out.write_u16::<LittleEndian>(r).unwrap();
                out.write_u16::<LittleEndian>(c).unwrap();
            }
        }
    }
    debug_assert_eq!(out.len(), encoded_len(record));
    Ok(out)
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<FrameRecord<T>> {
    let mut rd = Reader { buf: bytes, pos: 0 };
    let magic = rd.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic bytes {magic:?}, expected \"BEVG\"")));
    }
    let version = rd.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let _reserved = rd.u16()?;
    let height = rd.u32()? as usize;
    let width = rd.u32()? as usize;
    let cell_size = rd.f32()?;
    let ego_row = rd.f32()?;
    let ego_col = rd.f32()?;
    let steps = rd.u16()?;
    let step_seconds = rd.f32()?;
    let meta = GridMeta::new(
        height,
        width,
        from_f32(cell_size),
        from_f32(ego_row),
        from_f32(ego_col),
        steps,
        from_f32(step_seconds),
    )
    .map_err(|e| Error::Format(format!("bad dimensions: {e}")))?;
    let frame_id = rd.string("frame_id")?;
    let episode_id = rd.string("episode_id")?;

    let n = meta.num_cells();
    let mut grids = Vec::with_capacity(meta.num_timesteps());
    let mut annotations = Vec::with_capacity(meta.num_timesteps());
    for t in 0..=steps {
        let raw = rd.take(4 * n)?;
        let cells: Vec<T> = raw.chunks_exact(4).map(|c| from_f32(LittleEndian::read_f32(c))).collect();
        grids.push(ProbGrid::new(meta, t, cells)?);

        let occ = rd.take(n)?;
        let mut occupied = Vec::with_capacity(n);
        for &b in occ {
            match b {
                0 => occupied.push(false),
                1 => occupied.push(true),
                other => return Err(Error::Format(format!("occupancy byte {other} is not 0/1"))),
            }
        }
        let count = rd.u32()? as usize;
        let mut instances = Vec::with_capacity(count.min(n));
        for _ in 0..count {
            let id = rd.u32()?;
            let cr = rd.f32()?;
            let cc = rd.f32()?;
            let npix = rd.u32()? as usize;
            let raw = rd.take(4 * npix)?;
            let pixels = raw
                .chunks_exact(4)
                .map(|c| (LittleEndian::read_u16(&c[..2]), LittleEndian::read_u16(&c[2..])))
                .collect::<Vec<_>>();
            let obj = AnnotatedObject::<T>::from_pixels(id, pixels)?;
            let (mr, mc) = obj.center();
            let tol = |m: T| 4.0 * f32::EPSILON as f64 * m.f64().abs().max(1.0);
            if (cr as f64 - mr.f64()).abs() > tol(mr) || (cc as f64 - mc.f64()).abs() > tol(mc) {
                return Err(Error::validation(
                    "center",
                    format!("object {id}: stored center ({cr}, {cc}) differs from pixel mean"),
                ));
            }
            instances.push(obj);
        }
        annotations.push(AnnotationMask::new(meta, t, occupied, instances)?);
    }
    if rd.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last timestep",
            bytes.len() - rd.pos
        )));
    }
    FrameRecord::new(frame_id, episode_id, grids, annotations)
}

pub fn write_grid_file<T: Real>(record: &FrameRecord<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(record)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_grid_file<T: Real>(path: impl AsRef<Path>) -> Result<FrameRecord<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Canonical file name for a frame: `<episode_id>_<frame_id>.bevg`.
pub fn file_name(episode_id: &str, frame_id: &str) -> String {
    format!("{episode_id}_{frame_id}.{FILE_EXTENSION}")
}

fn to_f32<T: Real>(v: T) -> f32 {
    v.to_f32().expect("finite value")
}

fn from_f32<T: Real>(v: f32) -> T {
    T::from_f32(v).expect("f32 representable")
}

fn write_str(out: &mut Vec<u8>, field: &str, s: &str) -> Result<()> {
    let len = u16::try_from(s.len())
        .map_err(|_| Error::validation(field, "longer than 65535 bytes"))?;
    out.write_u16::<LittleEndian>(len).unwrap();
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(Error::Length {
            offset: self.pos,
            needed: n - (self.buf.len() - self.pos).min(n),
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(LittleEndian::read_u16(self.take(2)?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4)?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(LittleEndian::read_f32(self.take(4)?))
    }

    fn string(&mut self, field: &str) -> Result<String> {
        let len = self.u16()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format(format!("{field} is not valid UTF-8")))
    }
}
