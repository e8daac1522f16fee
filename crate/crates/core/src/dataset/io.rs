//! Binary dataset files.
//!
//! Little-endian layout:
//!
//! ```text
//! magic        4 bytes  "MSDS"
//! version      u8       1
//! state_dim    u32      2
//! action_dim   u32      2
//! trajectories u64
//! per trajectory:
//!   num_states u64      >= 1
//!   goal       state_dim x f64
//!   states     num_states x state_dim x f64
//!   actions    (num_states - 1) x action_dim x f64
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};

use super::{OfflineDataset, Trajectory};
use crate::error::{Error, Result};
use crate::maze::{MazeAction, MazeState};

pub const FILE_MAGIC: &[u8; 4] = b"MSDS";
pub const FILE_VERSION: u8 = 1;
const STATE_DIM: u32 = 2;
const ACTION_DIM: u32 = 2;

pub fn encode(dataset: &OfflineDataset) -> Vec<u8> {
    let mut buf = Vec::with_capacity(21 + dataset.num_states() * 32);
    buf.extend_from_slice(FILE_MAGIC);
    buf.push(FILE_VERSION);
    buf.write_u32::<LittleEndian>(STATE_DIM).unwrap();
    buf.write_u32::<LittleEndian>(ACTION_DIM).unwrap();
    buf.write_u64::<LittleEndian>(dataset.trajectories().len() as u64)
        .unwrap();
    for traj in dataset.trajectories() {
        buf.write_u64::<LittleEndian>(traj.states.len() as u64).unwrap();
        for v in traj.goal {
            buf.write_f64::<LittleEndian>(v).unwrap();
        }
        for s in &traj.states {
            for v in s.position {
                buf.write_f64::<LittleEndian>(v).unwrap();
            }
        }
        for a in &traj.actions {
            for v in a.displacement {
                buf.write_f64::<LittleEndian>(v).unwrap();
            }
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos as u64,
                msg: format!("unexpected end of file reading {what}"),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4, what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(LittleEndian::read_u64(self.take(8, what)?))
    }

    fn pair(&mut self, what: &str) -> Result<[f64; 2]> {
        let b = self.take(16, what)?;
        Ok([LittleEndian::read_f64(&b[..8]), LittleEndian::read_f64(&b[8..])])
    }

    fn fail<T>(&self, at: usize, msg: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            offset: at as u64,
            msg: msg.into(),
        })
    }
}

pub fn decode(bytes: &[u8]) -> Result<OfflineDataset> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != FILE_MAGIC {
        return r.fail(0, "bad magic, not a dataset file");
    }
    let version = r.u8("version")?;
    if version != FILE_VERSION {
        return r.fail(4, format!("unsupported version {version}"));
    }
    let at = r.pos;
    let (sd, ad) = (r.u32("state_dim")?, r.u32("action_dim")?);
    if sd != STATE_DIM || ad != ACTION_DIM {
        return r.fail(at, format!("expected 2-D states and actions, got {sd}/{ad}"));
    }
    let count = r.u64("trajectory count")?;
    let mut trajectories = Vec::new();
    for _ in 0..count {
        let at = r.pos;
        let n = r.u64("trajectory length")? as usize;
        if n == 0 {
            return r.fail(at, "trajectory with zero states");
        }
        // Reject impossible lengths before allocating.
        let needed = 16usize
            .checked_add(n.checked_mul(32).unwrap_or(usize::MAX))
            .unwrap_or(usize::MAX);
        if needed > bytes.len() - r.pos + 16 {
            return r.fail(at, format!("trajectory length {n} exceeds remaining file"));
        }
        let goal = r.pair("goal")?;
        let states = (0..n)
            .map(|_| r.pair("state").map(|position| MazeState { position }))
            .collect::<Result<Vec<_>>>()?;
        let actions = (0..n - 1)
            .map(|_| r.pair("action").map(|displacement| MazeAction { displacement }))
            .collect::<Result<Vec<_>>>()?;
        trajectories.push(Trajectory::new(states, actions, goal)?);
    }
    if r.pos != bytes.len() {
        return r.fail(r.pos, "trailing bytes after last trajectory");
    }
    Ok(OfflineDataset::new(trajectories))
}

pub fn save(dataset: &OfflineDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(dataset))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<OfflineDataset> {
    decode(&fs::read(path)?)
}
