//! Label maps, synthetic scenes, label corruption and the dataset file format.

mod format;
mod noise;
mod remap;
mod synth;

pub use format::{read_dataset, write_dataset, Dataset, DatasetError, DatasetHeader};
pub use noise::perturb_labels;
pub use remap::{rellis_groups, remap_labels, rugd_groups, LabelMapping, RemapError};
pub use synth::{generate_dataset, generate_scene, SceneConfig};

use std::fmt;

pub const NUM_CLASSES: usize = 6;

/// The six terrain groups, in label order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum TerrainClass {
    Smooth = 0,
    Rough = 1,
    Bumpy = 2,
    Forbidden = 3,
    Obstacle = 4,
    Background = 5,
}

impl TerrainClass {
    pub const ALL: [TerrainClass; NUM_CLASSES] = [
        Self::Smooth,
        Self::Rough,
        Self::Bumpy,
        Self::Forbidden,
        Self::Obstacle,
        Self::Background,
    ];

    pub fn label(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        crate::metrics::CLASS_NAMES[self as usize]
    }
}

impl fmt::Display for TerrainClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Row-major class map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), height * width, "label map size");
        Self {
            height,
            width,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }
}

/// 8-bit RGB image, channel-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), Self::CHANNELS * height * width, "image size");
        Self {
            height,
            width,
            data,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub image: Image,
    pub labels: LabelMap,
}
