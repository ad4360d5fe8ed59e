//! `.ddnf` field files and the on-disk dataset layout.
//!
//! A field file holds one time step of named `f32` channels:
//!
//! ```text
//! "DDNF" | version u16 | time_index u32 | height u32 | width u32
//! channel count u16, then per channel u16 name length + name
//! values: channel-major, row-major, f32 little-endian
//! mask flag u8, then ceil(h·w / 8) bytes of packed bits (LSB first)
//! CRC32 of everything before it, u32
//! ```
//!
//! A dataset directory holds `manifest.toml`, `world.toml`, `static.ddnf`
//! (geopotential), `frames/{t:06}.ddnf` (the eight per-step channels) and
//! `obs/{t:06}.ddnf` (AOD observations with their mask).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use ddnet_core::assimilator::{preprocess_observations, DAPair, OutlierPolicy};
use ddnet_core::synthworld::{
    Channel, Dataset, DatasetInfo, GridField, ObservationSet, TimeGrid, Units, WorldConfig, WorldError,
};

pub const MAGIC: &[u8; 4] = b"DDNF";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum FieldIoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("{path}: {reason}")]
    Inconsistent { path: String, reason: String },
    #[error(transparent)]
    World(#[from] WorldError),
}

pub type Result<T> = std::result::Result<T, FieldIoError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FieldIoError + '_ {
    move |source| FieldIoError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One decoded field file.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldFrame {
    pub time_index: u32,
    pub height: u32,
    pub width: u32,
    pub names: Vec<String>,
    /// All channels back to back.
    pub values: Vec<f32>,
    pub mask: Option<Vec<bool>>,
}

impl FieldFrame {
    pub fn cells(&self) -> usize {
        self.height as usize * self.width as usize
    }

    pub fn channel(&self, i: usize) -> &[f32] {
        let n = self.cells();
        &self.values[i * n..(i + 1) * n]
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 4 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [self.time_index, self.height, self.width] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.names.len() as u16).to_le_bytes());
        for name in &self.names {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        match &self.mask {
            None => out.push(0),
            Some(mask) => {
                out.push(1);
                let mut packed = vec![0u8; mask.len().div_ceil(8)];
                for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                    packed[i / 8] |= 1 << (i % 8);
                }
                out.extend_from_slice(&packed);
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err("bad magic".into());
        }
        if bytes.len() < 24 {
            return Err(format!("truncated ({} bytes)", bytes.len()));
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(format!("CRC mismatch (stored {stored:08x}, computed {computed:08x})"));
        }
        let mut pos = 4;
        let mut take = |n: usize| -> std::result::Result<&[u8], String> {
            let s = body.get(pos..pos + n).ok_or_else(|| format!("truncated at byte {pos}"))?;
            pos += n;
            Ok(s)
        };
        let version = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes"));
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let mut u32s = [0u32; 3];
        for v in &mut u32s {
            *v = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        }
        let [time_index, height, width] = u32s;
        let count = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes"));
        let mut names = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let n = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(take(n)?).map_err(|_| "channel name is not UTF-8".to_string())?;
            names.push(name.to_string());
        }
        let cells = height as usize * width as usize;
        let values = take(4 * cells * names.len())?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let mask = match take(1)?[0] {
            0 => None,
            1 => {
                let packed = take(cells.div_ceil(8))?;
                Some((0..cells).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect())
            }
            f => return Err(format!("bad mask flag {f}")),
        };
        if pos != body.len() {
            return Err(format!("{} trailing bytes", body.len() - pos));
        }
        Ok(Self {
            time_index,
            height,
            width,
            names,
            values,
            mask,
        })
    }
}

pub fn write_frame(path: &Path, frame: &FieldFrame) -> Result<()> {
    fs::write(path, frame.encode()).map_err(io_err(path))
}

pub fn read_frame(path: &Path) -> Result<FieldFrame> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    FieldFrame::decode(&bytes).map_err(|reason| FieldIoError::Corrupt {
        path: path.display().to_string(),
        reason,
    })
}

/// `manifest.toml` of a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u16,
    pub height: usize,
    pub width: usize,
    pub dt_hours: u32,
    pub t0: usize,
    pub t1: usize,
    pub t2: usize,
    pub t_end: usize,
    pub k: usize,
    pub seed: u64,
    pub world_hash: String,
    pub frames: usize,
    pub observation_times: Vec<usize>,
    /// Content digest of the whole dataset.
    pub digest: String,
}

impl Manifest {
    pub fn grid(&self) -> TimeGrid {
        TimeGrid {
            dt_hours: self.dt_hours,
            t0: self.t0,
            t1: self.t1,
            t2: self.t2,
            t_end: self.t_end,
            k: self.k,
        }
    }
}

fn frame_name(t: usize) -> String {
    format!("{t:06}.ddnf")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

/// Writes `ds` (generated from `world`) into `dir`.
pub fn write_dataset(ds: &Dataset, world: &WorldConfig, dir: &Path) -> Result<Manifest> {
    let (h, w) = ds.dims();
    let grid = *ds.grid();
    create_dir(&dir.join("frames"))?;
    create_dir(&dir.join("obs"))?;
    let field = |t: usize, names: Vec<String>, values: Vec<f32>, mask: Option<Vec<bool>>| FieldFrame {
        time_index: t as u32,
        height: h as u32,
        width: w as u32,
        names,
        values,
        mask,
    };
    let stat = field(
        ds.t_start(),
        vec![Channel::Geopotential.name().into()],
        ds.geopotential_raw().to_vec(),
        None,
    );
    write_frame(&dir.join("static.ddnf"), &stat)?;
    let names: Vec<String> = Channel::DYNAMIC.iter().map(|c| c.name().to_string()).collect();
    for t in ds.t_start()..ds.t_stop() {
        let f = field(t, names.clone(), ds.raw_frame(t)?.to_vec(), None);
        write_frame(&dir.join("frames").join(frame_name(t)), &f)?;
    }
    let observation_times: Vec<usize> = ds.observation_times().collect();
    for &t in &observation_times {
        let (v, m) = ds.raw_observation(t).expect("listed time");
        let f = field(t, vec!["aod550_obs".into()], v.to_vec(), Some(m.to_vec()));
        write_frame(&dir.join("obs").join(frame_name(t)), &f)?;
    }
    let info = ds.info();
    let manifest = Manifest {
        format_version: VERSION,
        height: h,
        width: w,
        dt_hours: grid.dt_hours,
        t0: grid.t0,
        t1: grid.t1,
        t2: grid.t2,
        t_end: grid.t_end,
        k: grid.k,
        seed: info.seed,
        world_hash: info.world_hash.clone(),
        frames: ds.t_stop() - ds.t_start(),
        observation_times,
        digest: ds.digest(),
    };
    write_text(
        &dir.join("world.toml"),
        &toml::to_string(world).expect("world config serialises"),
    )?;
    write_text(
        &dir.join("manifest.toml"),
        &toml::to_string(&manifest).expect("manifest serialises"),
    )?;
    Ok(manifest)
}

fn inconsistent(path: &Path, reason: impl Into<String>) -> FieldIoError {
    FieldIoError::Inconsistent {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn check_shape(path: &Path, f: &FieldFrame, m: &Manifest, t: usize, names: &[&str], masked: bool) -> Result<()> {
    if (f.height as usize, f.width as usize) != (m.height, m.width) {
        return Err(inconsistent(
            path,
            format!("grid {}x{} differs from manifest {}x{}", f.height, f.width, m.height, m.width),
        ));
    }
    if f.time_index as usize != t {
        return Err(inconsistent(path, format!("time index {} where {t} expected", f.time_index)));
    }
    if f.names.iter().map(String::as_str).ne(names.iter().copied()) {
        return Err(inconsistent(path, format!("channels {:?}, expected {names:?}", f.names)));
    }
    if f.mask.is_some() != masked {
        return Err(inconsistent(path, "mask presence does not match file role"));
    }
    Ok(())
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    toml::from_str(&text).map_err(|e| FieldIoError::Corrupt {
        path: path.display().to_string(),
        reason: e.message().to_string(),
    })
}

/// Opens a dataset directory, checking every file against the manifest
/// and the reassembled data against the recorded digest.
pub fn read_dataset(dir: &Path) -> Result<(Dataset, Manifest)> {
    let mpath = dir.join("manifest.toml");
    let m: Manifest = read_toml(&mpath)?;
    if m.format_version != VERSION {
        return Err(inconsistent(&mpath, format!("unsupported format version {}", m.format_version)));
    }
    let grid = m.grid();
    grid.validate()?;
    let info = DatasetInfo {
        height: m.height,
        width: m.width,
        grid,
        seed: m.seed,
        world_hash: m.world_hash.clone(),
    };
    let spath = dir.join("static.ddnf");
    let stat = read_frame(&spath)?;
    check_shape(&spath, &stat, &m, m.t0, &[Channel::Geopotential.name()], false)?;
    let mut ds = Dataset::new(info, &stat.values)?;
    let names: Vec<&str> = Channel::DYNAMIC.iter().map(|c| c.name()).collect();
    for t in m.t0..m.t0 + m.frames {
        let path = dir.join("frames").join(frame_name(t));
        let f = read_frame(&path)?;
        check_shape(&path, &f, &m, t, &names, false)?;
        ds.push_raw_frame(f.values)?;
    }
    for &t in &m.observation_times {
        let path = dir.join("obs").join(frame_name(t));
        let f = read_frame(&path)?;
        check_shape(&path, &f, &m, t, &["aod550_obs"], true)?;
        let mask = f.mask.expect("checked above");
        ds.insert_raw_observation(t, f.values, mask)?;
    }
    let digest = ds.digest();
    if digest != m.digest {
        return Err(inconsistent(&mpath, format!("content digest {digest} differs from recorded {}", m.digest)));
    }
    Ok((ds, m))
}

/// Reads the world config stored next to a dataset.
pub fn read_world(dir: &Path) -> Result<WorldConfig> {
    read_toml(&dir.join("world.toml"))
}

/// `pairs.toml` of a DA-pair archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairIndex {
    pub format_version: u16,
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub segment_start: usize,
    pub segment_end: usize,
    pub times: Vec<usize>,
}

const PAIR_CHANNELS: [&str; 3] = ["aod_forecast", "aod550_obs", "aod550_truth"];

/// Writes DA training pairs, one field file each, plus an index. A pair is
/// stored as its exact inputs (forecast, preprocessed observations with
/// their mask, truth) and rebuilt on read, so the round trip is exact.
pub fn write_pairs(
    pairs: &[DAPair],
    index: &PairIndex,
    ds: &Dataset,
    policy: &OutlierPolicy,
    dir: &Path,
) -> Result<PathBuf> {
    create_dir(dir)?;
    for p in pairs {
        let t = p.time_index;
        let raw = ds.observation(t).ok_or_else(|| {
            inconsistent(dir, format!("no observations at DA time {t} in the dataset"))
        })?;
        let obs = preprocess_observations(&raw, policy);
        let mut values = p.aod_forecast.to_f32();
        values.extend(obs.values.to_f32());
        values.extend(ds.channel(t, Channel::Aod550)?);
        let f = FieldFrame {
            time_index: t as u32,
            height: index.height as u32,
            width: index.width as u32,
            names: PAIR_CHANNELS.iter().map(|s| s.to_string()).collect(),
            values,
            mask: Some(obs.mask),
        };
        write_frame(&dir.join(frame_name(t)), &f)?;
    }
    let path = dir.join("pairs.toml");
    write_text(&path, &toml::to_string(index).expect("index serialises"))?;
    Ok(path)
}

pub fn read_pairs(dir: &Path) -> Result<(Vec<DAPair>, PairIndex)> {
    let ipath = dir.join("pairs.toml");
    let index: PairIndex = read_toml(&ipath)?;
    if index.format_version != VERSION {
        return Err(inconsistent(&ipath, format!("unsupported format version {}", index.format_version)));
    }
    let m = Manifest {
        format_version: VERSION,
        height: index.height,
        width: index.width,
        dt_hours: 0,
        t0: 0,
        t1: 0,
        t2: 0,
        t_end: 0,
        k: index.k,
        seed: 0,
        world_hash: String::new(),
        frames: 0,
        observation_times: Vec::new(),
        digest: String::new(),
    };
    let mut pairs = Vec::with_capacity(index.times.len());
    for &t in &index.times {
        let path = dir.join(frame_name(t));
        let f = read_frame(&path)?;
        check_shape(&path, &f, &m, t, &PAIR_CHANNELS, true)?;
        let field = |i: usize| GridField::from_f32(index.height, index.width, f.channel(i), Units::Dimensionless);
        let obs = ObservationSet {
            time_index: t,
            values: field(1)?,
            mask: f.mask.clone().expect("checked above"),
        };
        let pair = DAPair::new(field(0)?, &obs, &field(2)?).map_err(|e| inconsistent(&path, e.to_string()))?;
        pairs.push(pair);
    }
    Ok((pairs, index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_round_trip_with_mask() {
        let f = FieldFrame {
            time_index: 12,
            height: 3,
            width: 5,
            names: vec!["a".into(), "bb".into()],
            values: (0..30).map(|i| i as f32 * 0.5 - 3.0).collect(),
            mask: Some((0..15).map(|i| i % 3 == 0).collect()),
        };
        assert_eq!(FieldFrame::decode(&f.encode()).unwrap(), f);
        let plain = FieldFrame { mask: None, ..f };
        assert_eq!(FieldFrame::decode(&plain.encode()).unwrap(), plain);
    }

    #[test]
    fn corruption_is_detected() {
        let f = FieldFrame {
            time_index: 0,
            height: 2,
            width: 2,
            names: vec!["x".into()],
            values: vec![1.0, 2.0, 3.0, 4.0],
            mask: None,
        };
        let mut b = f.encode();
        b[20] ^= 0x40;
        assert!(FieldFrame::decode(&b).unwrap_err().contains("CRC"));
        assert!(FieldFrame::decode(&b[..10]).is_err());
    }
}
