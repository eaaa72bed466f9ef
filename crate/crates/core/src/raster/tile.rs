//! Tile file reader and writer.
//!
//! `"CSTK"` + u32 LE header length + JSON header line + planar little-endian
//! f32 layers, row-major, in the order listed by the header.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CityStack, Grid, LayerId, Normalization};
use crate::container::{self, FORMAT_VERSION};
use crate::error::{Error, Result};

pub const TILE_MAGIC: &[u8; 4] = b"CSTK";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileHeader {
    pub version: u32,
    pub width: usize,
    pub height: usize,
    pub km_per_px: f64,
    pub city_id: String,
    pub layers: Vec<TileLayerEntry>,
    pub normalized: BTreeMap<LayerId, bool>,
    #[serde(default)]
    pub normalization: Option<Normalization>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileLayerEntry {
    pub id: LayerId,
    pub dtype: String,
}

impl TileHeader {
    fn for_stack(stack: &CityStack) -> Self {
        TileHeader {
            version: FORMAT_VERSION,
            width: stack.width(),
            height: stack.height(),
            km_per_px: stack.km_per_px(),
            city_id: stack.city_id().to_string(),
            layers: stack
                .layer_ids()
                .into_iter()
                .map(|id| TileLayerEntry { id, dtype: "f32".into() })
                .collect(),
            normalized: stack.normalized_flags().clone(),
            normalization: stack.normalization(),
        }
    }
}

/// Encode a stack into tile bytes without touching the filesystem.
pub fn tile_bytes(stack: &CityStack) -> Result<Vec<u8>> {
    stack.validate()?;
    let header = TileHeader::for_stack(stack);
    let planes: Vec<&[f32]> = stack.layers().map(|(_, g)| g.data()).collect();
    container::encode(TILE_MAGIC, &header, &planes)
}

pub fn save_tile(stack: &CityStack, path: impl AsRef<Path>) -> Result<()> {
    let bytes = tile_bytes(stack)?;
    container::write_file(path.as_ref(), &bytes)
}

pub fn load_tile(path: impl AsRef<Path>) -> Result<CityStack> {
    let bytes = container::read_file(path.as_ref())?;
    decode_tile(&bytes)
}

pub(crate) fn decode_tile(bytes: &[u8]) -> Result<CityStack> {
    let (header, payload): (TileHeader, _) = container::decode(TILE_MAGIC, bytes)?;
    if header.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported tile version {} (expected {FORMAT_VERSION})",
            header.version
        )));
    }
    if header.layers.is_empty() {
        return Err(Error::Validation("tile declares no layers".into()));
    }
    let plane = header
        .width
        .checked_mul(header.height)
        .ok_or_else(|| Error::Format("tile dimensions overflow".into()))?;
    let values = container::read_f32s(payload, plane * header.layers.len())?;

    let mut layers = BTreeMap::new();
    for (i, entry) in header.layers.iter().enumerate() {
        if entry.dtype != "f32" {
            return Err(Error::Format(format!("layer {} has unsupported dtype {:?}", entry.id, entry.dtype)));
        }
        let grid = Grid::new(header.width, header.height, values[i * plane..(i + 1) * plane].to_vec())?;
        if layers.insert(entry.id, grid).is_some() {
            return Err(Error::Format(format!("duplicate layer {}", entry.id)));
        }
    }
    CityStack::from_parts(header.city_id, header.km_per_px, layers, header.normalized, header.normalization)
}
