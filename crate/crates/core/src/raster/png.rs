use std::path::Path;

use image::{Rgb, RgbImage};

use super::{CityStack, Grid, LayerId};
use crate::error::{Error, Result};

/// Which layer feeds each RGB channel. Values are taken as [0,1] and scaled
/// linearly to bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelMap {
    pub red: Option<LayerId>,
    pub green: Option<LayerId>,
    pub blue: Option<LayerId>,
    /// Darken pixels outside the city boundary when a boundary layer exists.
    pub shade_outside_boundary: bool,
}

impl Default for ChannelMap {
    /// Population in green, built density in blue.
    fn default() -> Self {
        ChannelMap { red: None, green: Some(LayerId::Pop), blue: Some(LayerId::Bld), shade_outside_boundary: false }
    }
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) as f64 * 255.0 + 0.5).floor() as u8
}

pub(crate) fn render(stack: &CityStack, map: &ChannelMap) -> Result<RgbImage> {
    let lookup = |id: Option<LayerId>| -> Result<Option<&Grid>> {
        id.map(|id| {
            stack
                .layer(id)
                .ok_or_else(|| Error::Validation(format!("channel map references missing layer {id}")))
        })
        .transpose()
    };
    let channels = [lookup(map.red)?, lookup(map.green)?, lookup(map.blue)?];
    let water = stack.layer(LayerId::Water);
    let boundary = if map.shade_outside_boundary { stack.layer(LayerId::Boundary) } else { None };

    let mut img = RgbImage::new(stack.width() as u32, stack.height() as u32);
    for r in 0..stack.height() {
        for c in 0..stack.width() {
            let px = if water.is_some_and(|w| w.get(r, c) > 0.0) {
                [255, 255, 255]
            } else {
                let mut px = channels.map(|g| g.map_or(0, |g| to_byte(g.get(r, c))));
                if boundary.is_some_and(|b| b.get(r, c) == 0.0) {
                    px = px.map(|v| ((v as u16 + 128) / 2) as u8);
                }
                px
            };
            img.put_pixel(c as u32, r as u32, Rgb(px));
        }
    }
    Ok(img)
}

/// Write an 8-bit RGB rendering of `stack`; water pixels are white.
pub fn export_png(stack: &CityStack, path: impl AsRef<Path>, map: &ChannelMap) -> Result<()> {
    let path = path.as_ref();
    render(stack, map)?
        .save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

/// Grayscale rendering of |grid| scaled by its maximum magnitude.
pub fn export_heatmap_png(grid: &Grid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let max = grid.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let img = image::GrayImage::from_fn(grid.width() as u32, grid.height() as u32, |c, r| {
        image::Luma([to_byte(grid.get(r as usize, c as usize).abs() * scale)])
    });
    img.save(path).map_err(|e| Error::io(path, std::io::Error::other(e)))
}
