//! Binary sample files.
//!
//! Layout (little-endian): magic `EXCV`, version u16, sample count u64, then
//! per record episode id u32, trial index u16, 16384 bytes of bit-packed
//! occupancy, six f64 trajectory parameters, volume f64 (cm³), valid u8,
//! label u8.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{GridSpec, VoxelGrid};
use crate::kinematics::TaskTrajectory;
use crate::learning::ExcavationSample;
use crate::simulator::SUCCESS_THRESHOLD_CM3;

pub const DATASET_MAGIC: &[u8; 4] = b"EXCV";
pub const DATASET_VERSION: u16 = 1;
pub const VOXEL_BYTES: usize = 16384;
const HEADER_BYTES: usize = 4 + 2 + 8;
pub const RECORD_BYTES: usize = 4 + 2 + VOXEL_BYTES + 48 + 8 + 1 + 1;

/// The labelling rule the file must be consistent with.
pub fn expected_label(volume: f64, valid: bool) -> bool {
    valid && volume > SUCCESS_THRESHOLD_CM3
}

pub fn write_dataset(w: &mut impl Write, samples: &[ExcavationSample]) -> Result<()> {
    let io = |e| Error::io("<dataset>", e);
    w.write_all(DATASET_MAGIC).map_err(io)?;
    w.write_all(&DATASET_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(samples.len() as u64).to_le_bytes()).map_err(io)?;
    let mut rec = Vec::with_capacity(RECORD_BYTES);
    for s in samples {
        if s.voxels.packed().len() != VOXEL_BYTES {
            return Err(Error::Data(format!(
                "sample {}/{} has a {}-byte grid, expected {VOXEL_BYTES}",
                s.episode_id,
                s.trial_index,
                s.voxels.packed().len()
            )));
        }
        rec.clear();
        rec.extend_from_slice(&s.episode_id.to_le_bytes());
        rec.extend_from_slice(&s.trial_index.to_le_bytes());
        rec.extend_from_slice(s.voxels.packed());
        rec.extend_from_slice(&s.traj.to_le_bytes());
        rec.extend_from_slice(&s.volume.to_le_bytes());
        rec.push(s.valid as u8);
        rec.push(s.label as u8);
        w.write_all(&rec).map_err(io)?;
    }
    Ok(())
}

fn flag(b: u8, what: &str, index: u64) -> Result<bool> {
    match b {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(Error::Data(format!("record {index}: {what} byte is {b}"))),
    }
}

/// Reads every record. With `with_voxels` false the occupancy payload is
/// skipped and each sample carries an empty grid.
pub fn read_dataset(r: &mut impl Read, grid: &GridSpec, with_voxels: bool) -> Result<Vec<ExcavationSample>> {
    let io = |e| Error::io("<dataset>", e);
    let mut header = [0u8; HEADER_BYTES];
    r.read_exact(&mut header)
        .map_err(|_| Error::Data("file too short for a dataset header".into()))?;
    if &header[..4] != DATASET_MAGIC {
        return Err(Error::Data("bad dataset magic".into()));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != DATASET_VERSION {
        return Err(Error::Data(format!("unsupported dataset version {version}")));
    }
    let count = u64::from_le_bytes(header[6..14].try_into().unwrap());
    let mut out = Vec::with_capacity(count.min(1 << 20) as usize);
    let mut rec = vec![0u8; RECORD_BYTES];
    for index in 0..count {
        r.read_exact(&mut rec)
            .map_err(|_| Error::Data(format!("header promises {count} records, file ends at {index}")))?;
        let v = &rec[6..6 + VOXEL_BYTES];
        let tail = &rec[6 + VOXEL_BYTES..];
        let voxels = if with_voxels {
            VoxelGrid::from_packed(*grid, v.to_vec())?
        } else {
            VoxelGrid::empty(GridSpec {
                dims: [1, 1, 1],
                ..*grid
            })
        };
        out.push(ExcavationSample {
            episode_id: u32::from_le_bytes(rec[..4].try_into().unwrap()),
            trial_index: u16::from_le_bytes(rec[4..6].try_into().unwrap()),
            voxels,
            traj: TaskTrajectory::from_le_bytes(tail[..48].try_into().unwrap()),
            volume: f64::from_le_bytes(tail[48..56].try_into().unwrap()),
            valid: flag(tail[56], "valid", index)?,
            label: flag(tail[57], "label", index)?,
        });
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(io)? != 0 {
        return Err(Error::Data(format!("trailing bytes after {count} records")));
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, samples: &[ExcavationSample]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_dataset(&mut w, samples)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path, grid: &GridSpec, with_voxels: bool) -> Result<Vec<ExcavationSample>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(&mut std::io::BufReader::new(f), grid, with_voxels)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSummary {
    pub records: usize,
    pub positives: usize,
    pub valid: usize,
    pub episodes: usize,
    /// Indices of records whose label disagrees with the labelling rule.
    pub inconsistent: Vec<usize>,
}

/// Re-derives every label from (volume, valid).
pub fn verify_samples(samples: &[ExcavationSample]) -> DatasetSummary {
    let mut episodes: Vec<u32> = samples.iter().map(|s| s.episode_id).collect();
    episodes.sort_unstable();
    episodes.dedup();
    DatasetSummary {
        records: samples.len(),
        positives: samples.iter().filter(|s| s.label).count(),
        valid: samples.iter().filter(|s| s.valid).count(),
        episodes: episodes.len(),
        inconsistent: samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label != expected_label(s.volume, s.valid))
            .map(|(i, _)| i)
            .collect(),
    }
}
