//! Voxel scenes: labelled occupancy grids over 12 object classes.

mod export;
mod io;
mod synth;

pub use export::{export_scene, render_export, ExportFormat};
pub use io::{decode_scene, encode_scene, load_scene, save_scene, HEADER_LEN, MAGIC};
pub use synth::{generate_toy_layout, generate_toy_scene, PlacedBox, ToyLayout, MIN_DIMS};

use voxgrad::Tensor;

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 12;
pub const NUM_ROOM_CLASSES: usize = 10;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "empty",
    "ceiling",
    "floor",
    "wall",
    "window",
    "chair",
    "bed",
    "sofa",
    "table",
    "television",
    "furniture",
    "misc",
];

pub const ROOM_NAMES: [&str; NUM_ROOM_CLASSES] = [
    "bedroom",
    "living_room",
    "kitchen",
    "room",
    "dining_room",
    "office",
    "hall",
    "child_room",
    "storage",
    "guest_room",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum ObjectClass {
    Empty = 0,
    Ceiling = 1,
    Floor = 2,
    Wall = 3,
    Window = 4,
    Chair = 5,
    Bed = 6,
    Sofa = 7,
    Table = 8,
    Television = 9,
    Furniture = 10,
    Misc = 11,
}

impl ObjectClass {
    pub const FURNISHINGS: [ObjectClass; 7] = [
        ObjectClass::Chair,
        ObjectClass::Bed,
        ObjectClass::Sofa,
        ObjectClass::Table,
        ObjectClass::Television,
        ObjectClass::Furniture,
        ObjectClass::Misc,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        CLASS_NAMES[self as usize]
    }
}

/// A labelled voxel grid with extents `(depth, height, width)`.
///
/// Labels are stored depth-major: `index = (d * height + h) * width + w`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoxelScene {
    dims: [usize; 3],
    labels: Vec<u8>,
    room_class: u8,
}

impl VoxelScene {
    pub fn new(dims: [usize; 3], labels: Vec<u8>, room_class: u8) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Data(format!("scene extents must be positive, got {dims:?}")));
        }
        let volume: usize = dims.iter().product();
        if labels.len() != volume {
            return Err(Error::Data(format!(
                "scene {dims:?} needs {volume} labels, got {}",
                labels.len()
            )));
        }
        if let Some(pos) = labels.iter().position(|&c| c as usize >= NUM_CLASSES) {
            return Err(Error::Data(format!("class id {} at voxel {pos} is not below {NUM_CLASSES}", labels[pos])));
        }
        if room_class as usize >= NUM_ROOM_CLASSES {
            return Err(Error::Data(format!("room class {room_class} is not below {NUM_ROOM_CLASSES}")));
        }
        Ok(VoxelScene { dims, labels, room_class })
    }

    pub fn empty(dims: [usize; 3], room_class: u8) -> Result<Self> {
        Self::new(dims, vec![0; dims.iter().product()], room_class)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn room_class(&self) -> u8 {
        self.room_class
    }

    pub fn volume(&self) -> usize {
        self.labels.len()
    }

    #[inline]
    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.dims[1] + h) * self.dims[2] + w
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> u8 {
        self.labels[self.index(d, h, w)]
    }

    pub(crate) fn set(&mut self, d: usize, h: usize, w: usize, class: ObjectClass) {
        let i = self.index(d, h, w);
        self.labels[i] = class.id();
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for &c in &self.labels {
            counts[c as usize] += 1;
        }
        counts
    }

    pub fn non_empty_count(&self) -> usize {
        self.labels.iter().filter(|&&c| c != 0).count()
    }

    /// `[1, d, h, w, 12]` one-hot encoding.
    pub fn one_hot(&self) -> Tensor {
        one_hot_batch(std::slice::from_ref(self)).expect("a single scene is a uniform batch")
    }

    /// Majority-class pooling over `factor`-sized blocks; ties go to the
    /// lower class id.
    pub fn downsample(&self, factor: [usize; 3]) -> Result<VoxelScene> {
        if factor == [1, 1, 1] {
            return Ok(self.clone());
        }
        let mut out = [0; 3];
        for a in 0..3 {
            if factor[a] == 0 || !self.dims[a].is_multiple_of(factor[a]) {
                return Err(Error::Mismatch(format!(
                    "scene {:?} cannot be pooled by {factor:?}",
                    self.dims
                )));
            }
            out[a] = self.dims[a] / factor[a];
        }
        let mut labels = Vec::with_capacity(out.iter().product());
        for od in 0..out[0] {
            for oh in 0..out[1] {
                for ow in 0..out[2] {
                    let mut counts = [0usize; NUM_CLASSES];
                    for d in od * factor[0]..(od + 1) * factor[0] {
                        for h in oh * factor[1]..(oh + 1) * factor[1] {
                            for w in ow * factor[2]..(ow + 1) * factor[2] {
                                counts[self.get(d, h, w) as usize] += 1;
                            }
                        }
                    }
                    let best = (0..NUM_CLASSES).fold(0, |b, c| if counts[c] > counts[b] { c } else { b });
                    labels.push(best as u8);
                }
            }
        }
        VoxelScene::new(out, labels, self.room_class)
    }
}

/// Stack scenes of identical extents into a `[b, d, h, w, 12]` one-hot tensor.
pub fn one_hot_batch(scenes: &[VoxelScene]) -> Result<Tensor> {
    let first = scenes.first().ok_or_else(|| Error::Usage("empty scene batch".into()))?;
    let dims = first.dims;
    let mut data = vec![0.0; scenes.len() * first.volume() * NUM_CLASSES];
    let mut offset = 0;
    for scene in scenes {
        if scene.dims != dims {
            return Err(Error::Mismatch(format!("batch mixes extents {dims:?} and {:?}", scene.dims)));
        }
        for &c in &scene.labels {
            data[offset + c as usize] = 1.0;
            offset += NUM_CLASSES;
        }
    }
    let [d, h, w] = dims;
    Ok(Tensor::new(&[scenes.len(), d, h, w, NUM_CLASSES], data)?)
}

/// Per-voxel argmax of a `[b, d, h, w, 12]` tensor, one scene per batch item.
/// Ties resolve to the lower class id.
pub fn argmax_scenes(probs: &Tensor, room_class: u8) -> Result<Vec<VoxelScene>> {
    let s = probs.shape();
    if s.len() != 5 || s[4] != NUM_CLASSES {
        return Err(Error::Mismatch(format!("expected [b, d, h, w, {NUM_CLASSES}], got {s:?}")));
    }
    let volume = s[1] * s[2] * s[3];
    probs
        .data()
        .chunks_exact(volume * NUM_CLASSES)
        .map(|item| {
            let labels = item
                .chunks_exact(NUM_CLASSES)
                .map(|row| (0..NUM_CLASSES).fold(0, |b, c| if row[c] > row[b] { c } else { b }) as u8)
                .collect();
            VoxelScene::new([s[1], s[2], s[3]], labels, room_class)
        })
        .collect()
}

/// Fraction of voxels whose labels agree.
pub fn class_accuracy(a: &VoxelScene, b: &VoxelScene) -> Result<f64> {
    if a.dims != b.dims {
        return Err(Error::Mismatch(format!("cannot compare {:?} with {:?}", a.dims, b.dims)));
    }
    let same = a.labels.iter().zip(&b.labels).filter(|(x, y)| x == y).count();
    Ok(same as f64 / a.volume() as f64)
}

/// One weight per class, normalized to mean 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights(pub [f64; NUM_CLASSES]);

impl ClassWeights {
    pub fn uniform() -> Self {
        ClassWeights([1.0; NUM_CLASSES])
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::new(&[NUM_CLASSES], self.0.to_vec()).expect("fixed length")
    }
}

/// Inverse-frequency class weights over one batch.
///
/// `w_n = T / (12 * max(c_n, 1))`, rescaled to mean 1, where `T` is the
/// number of voxels in the batch and `c_n` the count of class `n`. Absent
/// classes get the floor count and therefore the largest weight.
pub fn occupancy_weights(batch: &[VoxelScene]) -> Result<ClassWeights> {
    if batch.is_empty() {
        return Err(Error::Usage("occupancy weights need at least one scene".into()));
    }
    let mut counts = [0usize; NUM_CLASSES];
    for scene in batch {
        for (acc, c) in counts.iter_mut().zip(scene.class_counts()) {
            *acc += c;
        }
    }
    let total: usize = counts.iter().sum();
    let mut w = [0.0; NUM_CLASSES];
    for (wn, &cn) in w.iter_mut().zip(&counts) {
        *wn = total as f64 / (NUM_CLASSES as f64 * cn.max(1) as f64);
    }
    let mean = w.iter().sum::<f64>() / NUM_CLASSES as f64;
    for wn in &mut w {
        *wn /= mean;
    }
    Ok(ClassWeights(w))
}
