//! Synthetic rooms: floor and ceiling slabs, four walls with windows, and
//! non-overlapping furniture boxes standing on the floor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ObjectClass, VoxelScene, NUM_ROOM_CLASSES};
use crate::error::{Error, Result};

/// Smallest supported `(depth, height, width)`.
pub const MIN_DIMS: [usize; 3] = [8, 6, 8];

const PLACEMENT_ATTEMPTS: usize = 64;

/// Axis-aligned box covering `min..max` (exclusive) in `(d, h, w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlacedBox {
    pub class: ObjectClass,
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl PlacedBox {
    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] < self.max[a])
    }
}

#[derive(Clone, Debug)]
pub struct ToyLayout {
    pub scene: VoxelScene,
    pub furniture: Vec<PlacedBox>,
    pub windows: usize,
    /// Interior region between floor, ceiling and walls.
    pub interior: ([usize; 3], [usize; 3]),
}

pub fn generate_toy_scene(seed: u64, dims: [usize; 3]) -> Result<VoxelScene> {
    Ok(generate_toy_layout(seed, dims)?.scene)
}

pub fn generate_toy_layout(seed: u64, dims: [usize; 3]) -> Result<ToyLayout> {
    if (0..3).any(|a| dims[a] < MIN_DIMS[a]) {
        return Err(Error::Usage(format!("toy scenes need dims >= {MIN_DIMS:?}, got {dims:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [depth, height, width] = dims;
    let slab = (height / 8).max(1);
    let wall = (depth.min(width) / 10).max(1);
    let room = rng.random_range(0..NUM_ROOM_CLASSES as u8);
    let mut scene = VoxelScene::empty(dims, room)?;

    for d in 0..depth {
        for w in 0..width {
            for h in 0..slab {
                scene.set(d, h, w, ObjectClass::Floor);
                scene.set(d, height - 1 - h, w, ObjectClass::Ceiling);
            }
            let on_wall = d < wall || d >= depth - wall || w < wall || w >= width - wall;
            if on_wall {
                for h in slab..height - slab {
                    scene.set(d, h, w, ObjectClass::Wall);
                }
            }
        }
    }

    let lo = [wall, slab, wall];
    let hi = [depth - wall, height - slab, width - wall];
    let inner = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];

    let windows = rng.random_range(0..=2);
    for _ in 0..windows {
        // Sill and lintel at a quarter of the wall height from each slab.
        let y0 = lo[1] + inner[1] / 4;
        let y1 = (hi[1] - inner[1] / 4).max(y0 + 1);
        let side = rng.random_range(0..4);
        let along = if side < 2 { 2 } else { 0 };
        let span = rng.random_range(1..=(inner[along] / 3).max(1));
        let start = lo[along] + rng.random_range(0..=inner[along] - span);
        for t in 0..wall {
            for y in y0..y1 {
                for s in start..start + span {
                    let (d, w) = match side {
                        0 => (t, s),
                        1 => (depth - 1 - t, s),
                        2 => (s, t),
                        _ => (s, width - 1 - t),
                    };
                    scene.set(d, y, w, ObjectClass::Window);
                }
            }
        }
    }

    let wanted = rng.random_range(1..=6);
    let mut furniture: Vec<PlacedBox> = Vec::new();
    for _ in 0..wanted {
        let class = ObjectClass::FURNISHINGS[rng.random_range(0..ObjectClass::FURNISHINGS.len())];
        for _ in 0..PLACEMENT_ATTEMPTS {
            let size = [
                rng.random_range(1..=(inner[0] / 3).max(1)),
                rng.random_range(1..=(inner[1] / 2).max(1)),
                rng.random_range(1..=(inner[2] / 3).max(1)),
            ];
            let min = [
                lo[0] + rng.random_range(0..=inner[0] - size[0]),
                lo[1],
                lo[2] + rng.random_range(0..=inner[2] - size[2]),
            ];
            let max = [min[0] + size[0], min[1] + size[1], min[2] + size[2]];
            let overlaps = furniture
                .iter()
                .any(|b| (0..3).all(|a| min[a] < b.max[a] && b.min[a] < max[a]));
            if overlaps {
                continue;
            }
            for d in min[0]..max[0] {
                for h in min[1]..max[1] {
                    for w in min[2]..max[2] {
                        scene.set(d, h, w, class);
                    }
                }
            }
            furniture.push(PlacedBox { class, min, max });
            break;
        }
    }

    Ok(ToyLayout { scene, furniture, windows, interior: (lo, hi) })
}
