//! Mapping fine-grained dataset labels onto the six terrain groups.

use std::collections::BTreeMap;

use thiserror::Error;

use super::TerrainClass;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RemapError {
    #[error("fine label {value} at pixel {index} has no mapping")]
    Unmapped { index: usize, value: u16 },
    #[error("class name {0:?} has no terrain group")]
    UnknownName(String),
}

/// Lookup table from fine label ids to group labels.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelMapping {
    table: BTreeMap<u16, u8>,
}

impl LabelMapping {
    pub fn new(pairs: impl IntoIterator<Item = (u16, u8)>) -> Self {
        Self {
            table: pairs.into_iter().collect(),
        }
    }

    /// Maps `0..n` onto itself.
    pub fn identity(n: u16) -> Self {
        Self::new((0..n).map(|v| (v, v as u8)))
    }

    /// Builds a mapping for a dataset whose label `i` is named `names[i]`,
    /// using a name-to-group table such as [`rugd_groups`].
    pub fn from_names(names: &[&str], groups: &[(&str, TerrainClass)]) -> Result<Self, RemapError> {
        let mut table = BTreeMap::new();
        for (id, name) in names.iter().enumerate() {
            let key = name.trim().to_ascii_lowercase();
            let group = groups
                .iter()
                .find(|(n, _)| *n == key)
                .ok_or_else(|| RemapError::UnknownName(name.to_string()))?
                .1;
            table.insert(id as u16, group.label());
        }
        Ok(Self { table })
    }

    pub fn get(&self, fine: u16) -> Option<u8> {
        self.table.get(&fine).copied()
    }
}

/// Pointwise table lookup.
pub fn remap_labels(fine: &[u16], mapping: &LabelMapping) -> Result<Vec<u8>, RemapError> {
    fine.iter()
        .enumerate()
        .map(|(index, &value)| {
            mapping
                .get(value)
                .ok_or(RemapError::Unmapped { index, value })
        })
        .collect()
}

use TerrainClass::*;

const RUGD: &[(&str, TerrainClass)] = &[
    ("concrete", Smooth),
    ("asphalt", Smooth),
    ("gravel", Rough),
    ("grass", Rough),
    ("dirt", Rough),
    ("sand", Rough),
    ("mulch", Rough),
    ("rock", Bumpy),
    ("rock-bed", Bumpy),
    ("rock bed", Bumpy),
    ("water", Forbidden),
    ("bush", Forbidden),
    ("bushes", Forbidden),
    ("tall vegetation", Forbidden),
    ("tree", Obstacle),
    ("trees", Obstacle),
    ("pole", Obstacle),
    ("poles", Obstacle),
    ("log", Obstacle),
    ("logs", Obstacle),
    ("vehicle", Obstacle),
    ("container/generic-object", Obstacle),
    ("building", Obstacle),
    ("bicycle", Obstacle),
    ("person", Obstacle),
    ("fence", Obstacle),
    ("bridge", Obstacle),
    ("picnic-table", Obstacle),
    ("void", Background),
    ("sky", Background),
    ("sign", Background),
    ("signs", Background),
];

const RELLIS: &[(&str, TerrainClass)] = &[
    ("concrete", Smooth),
    ("asphalt", Smooth),
    ("dirt", Rough),
    ("grass", Rough),
    ("mud", Bumpy),
    ("rubble", Bumpy),
    ("water", Forbidden),
    ("puddle", Forbidden),
    ("bush", Forbidden),
    ("tree", Obstacle),
    ("pole", Obstacle),
    ("vehicle", Obstacle),
    ("object", Obstacle),
    ("building", Obstacle),
    ("log", Obstacle),
    ("person", Obstacle),
    ("fence", Obstacle),
    ("barrier", Obstacle),
    ("void", Background),
    ("sky", Background),
];

/// Name-to-group table for RUGD class names.
pub fn rugd_groups() -> &'static [(&'static str, TerrainClass)] {
    RUGD
}

/// Name-to-group table for RELLIS-3D class names.
pub fn rellis_groups() -> &'static [(&'static str, TerrainClass)] {
    RELLIS
}
