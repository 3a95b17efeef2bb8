use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::SacaError;
use crate::image::layout::Layout;
use crate::image::locate::by_z_order;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharacterMask {
    pub character_id: String,
    /// One byte per latent cell, 1 where the character owns the cell.
    pub cells: Vec<u8>,
}

/// Binary partition of a latent grid into character regions and background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionMaskSet {
    pub height: usize,
    pub width: usize,
    /// In layout order.
    pub characters: Vec<CharacterMask>,
    pub background: Vec<u8>,
}

impl RegionMaskSet {
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn character(&self, id: &str) -> Option<&CharacterMask> {
        self.characters.iter().find(|c| c.character_id == id)
    }

    /// Owner index per cell: `None` for background, else the character slot.
    pub fn owners(&self) -> Vec<Option<usize>> {
        (0..self.cells())
            .map(|i| self.characters.iter().position(|c| c.cells[i] == 1))
            .collect()
    }

    /// True when every cell belongs to exactly one region.
    pub fn is_partition(&self) -> bool {
        (0..self.cells()).all(|i| {
            let owners = self.characters.iter().filter(|c| c.cells[i] == 1).count() + self.background[i] as usize;
            owners == 1
        })
    }

    /// Reduces the grid by `factor`, keeping the owner of each block's
    /// top-left cell. The result is still a partition.
    pub fn downsample(&self, factor: usize) -> Result<RegionMaskSet, SacaError> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(SacaError::DimensionMismatch(alloc::format!(
                "{}x{} grid is not divisible by {factor}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let owners = self.owners();
        let mut characters: Vec<CharacterMask> = self
            .characters
            .iter()
            .map(|c| CharacterMask { character_id: c.character_id.clone(), cells: vec![0; h * w] })
            .collect();
        let mut background = vec![0; h * w];
        for y in 0..h {
            for x in 0..w {
                match owners[(y * factor) * self.width + x * factor] {
                    Some(k) => characters[k].cells[y * w + x] = 1,
                    None => background[y * w + x] = 1,
                }
            }
        }
        Ok(RegionMaskSet { height: h, width: w, characters, background })
    }
}

/// Rasterizes normalized boxes onto an `height x width` grid.
///
/// A box covers cells `[floor(x_min·W), ceil(x_max·W)) x [floor(y_min·H),
/// ceil(y_max·H))`. Where boxes overlap the higher z-order owns the cell; the
/// background is everything left over.
pub fn rasterize_masks(layouts: &[Layout], height: usize, width: usize) -> Result<RegionMaskSet, SacaError> {
    if height == 0 || width == 0 {
        return Err(SacaError::DimensionMismatch("latent grid must be non-empty".into()));
    }
    let n = height * width;
    let mut owner: Vec<Option<usize>> = vec![None; n];
    // Paint bottom to top so the topmost layer wins.
    for layout in by_z_order(layouts) {
        let slot = layouts.iter().position(|l| core::ptr::eq(l, layout)).expect("same slice");
        let r = layout.bbox.cells(width as u32, height as u32);
        if r.is_empty() {
            return Err(SacaError::DegenerateRegion(layout.character_id.clone()));
        }
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                owner[y as usize * width + x as usize] = Some(slot);
            }
        }
    }
    let mut characters: Vec<CharacterMask> = layouts
        .iter()
        .map(|l| CharacterMask { character_id: l.character_id.clone(), cells: vec![0; n] })
        .collect();
    let mut background = vec![0; n];
    for (i, o) in owner.iter().enumerate() {
        match o {
            Some(k) => characters[*k].cells[i] = 1,
            None => background[i] = 1,
        }
    }
    Ok(RegionMaskSet { height, width, characters, background })
}
