//! VXSC scene files.
//!
//! Little-endian layout:
//!
//! | offset | size | field                        |
//! |--------|------|------------------------------|
//! | 0      | 4    | magic `VXSC`                 |
//! | 4      | 2    | version (u16) = 1            |
//! | 6      | 2    | reserved (u16) = 0           |
//! | 8      | 12   | depth, height, width (u32)   |
//! | 20     | 1    | room class (u8)              |
//! | 21     | 1    | padding (u8) = 0             |
//! | 22     | dhw  | class ids, depth-major       |

use std::fs;
use std::path::Path;

use super::{VoxelScene, NUM_CLASSES, NUM_ROOM_CLASSES};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VXSC";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 22;

pub fn encode_scene(scene: &VoxelScene) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + scene.volume());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    for extent in scene.dims() {
        out.extend_from_slice(&(extent as u32).to_le_bytes());
    }
    out.push(scene.room_class());
    out.push(0);
    out.extend_from_slice(scene.labels());
    out
}

fn read_u16(bytes: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([bytes[at], bytes[at + 1]])
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub fn decode_scene(bytes: &[u8]) -> Result<VoxelScene> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(bytes.len(), format!("truncated header ({} of {HEADER_LEN} bytes)", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(0, "bad magic, expected VXSC"));
    }
    let version = read_u16(bytes, 4);
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let dims = [read_u32(bytes, 8) as usize, read_u32(bytes, 12) as usize, read_u32(bytes, 16) as usize];
    if let Some(a) = dims.iter().position(|&e| e == 0) {
        return Err(Error::format(8 + 4 * a, "zero extent"));
    }
    let room = bytes[20];
    if room as usize >= NUM_ROOM_CLASSES {
        return Err(Error::format(20, format!("room class {room} out of range")));
    }
    let volume = dims
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::format(8, "extents overflow"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < volume {
        return Err(Error::format(bytes.len(), format!("truncated payload ({} of {volume} bytes)", payload.len())));
    }
    if payload.len() > volume {
        return Err(Error::format(HEADER_LEN + volume, "trailing bytes after payload"));
    }
    if let Some(pos) = payload.iter().position(|&c| c as usize >= NUM_CLASSES) {
        return Err(Error::format(HEADER_LEN + pos, format!("class id {} out of range", payload[pos])));
    }
    VoxelScene::new(dims, payload.to_vec(), room)
}

pub fn save_scene(scene: &VoxelScene, path: &Path) -> Result<()> {
    fs::write(path, encode_scene(scene))?;
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<VoxelScene> {
    decode_scene(&fs::read(path)?)
}
