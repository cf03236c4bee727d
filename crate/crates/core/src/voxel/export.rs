//! Point exports for external viewers. Coordinates are `x = width`,
//! `y = height` (up), `z = depth`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde_json::json;

use super::{VoxelScene, CLASS_NAMES};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    /// `{"dims": [d, h, w], "palette": [...], "voxels": [[x, y, z, class], ...]}`
    VoxJson,
    /// One `x,y,z,class` line per non-empty voxel.
    CsvPoints,
}

impl FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vox-json" => Ok(ExportFormat::VoxJson),
            "csv-points" => Ok(ExportFormat::CsvPoints),
            other => Err(Error::Usage(format!("unknown export format {other:?} (vox-json | csv-points)"))),
        }
    }
}

impl ExportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ExportFormat::VoxJson => "json",
            ExportFormat::CsvPoints => "csv",
        }
    }
}

fn points(scene: &VoxelScene) -> impl Iterator<Item = [usize; 4]> + '_ {
    let [depth, height, width] = scene.dims();
    (0..depth).flat_map(move |z| {
        (0..height).flat_map(move |y| {
            (0..width).filter_map(move |x| {
                let c = scene.get(z, y, x);
                (c != 0).then_some([x, y, z, c as usize])
            })
        })
    })
}

pub fn render_export(scene: &VoxelScene, format: ExportFormat) -> String {
    match format {
        ExportFormat::VoxJson => {
            let voxels: Vec<[usize; 4]> = points(scene).collect();
            json!({
                "dims": scene.dims(),
                "palette": CLASS_NAMES,
                "voxels": voxels,
            })
            .to_string()
        }
        ExportFormat::CsvPoints => {
            let mut out = String::new();
            for [x, y, z, c] in points(scene) {
                writeln!(out, "{x},{y},{z},{c}").expect("writing to a String");
            }
            out
        }
    }
}

pub fn export_scene(scene: &VoxelScene, format: ExportFormat, path: &Path) -> Result<()> {
    fs::write(path, render_export(scene, format))?;
    Ok(())
}
