//! Texture-space backward pass.
//!
//! Only the texture lookup is differentiated: visibility and geometry are
//! constants, so a pixel's color is linear in the four texels its bilinear
//! footprint reads.

use super::raster::{bilinear_footprint, RasterBuffers};
use crate::error::{Error, Result};
use crate::worldgen::{FaceId, ObjectId, Scene, TextureAtlas};

/// Per-face gate: `true` for faces whose texture receives gradient.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaceMask {
    bits: Vec<bool>,
}

impl FaceMask {
    pub fn none(face_count: usize) -> Self {
        Self {
            bits: vec![false; face_count],
        }
    }

    pub fn all(face_count: usize) -> Self {
        Self {
            bits: vec![true; face_count],
        }
    }

    pub fn for_object(scene: &Scene, object: ObjectId) -> Result<Self> {
        let obj = scene.object(object)?;
        let mut m = Self::none(scene.faces.len());
        for &f in &obj.faces {
            m.bits[f] = true;
        }
        Ok(m)
    }

    pub fn contains(&self, face: FaceId) -> bool {
        self.bits.get(face).copied().unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Flat texel indices (`y * width + x`) any masked face can sample:
    /// the bilinear footprint of each masked face's UV bounding box.
    pub fn texels(&self, scene: &Scene) -> Vec<usize> {
        let (w, h) = (scene.atlas.width(), scene.atlas.height());
        let mut hit = vec![false; w * h];
        for (f, uvs) in scene.face_uvs.iter().enumerate() {
            if !self.contains(f) {
                continue;
            }
            let umin = uvs.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
            let umax = uvs.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
            let vmin = uvs.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
            let vmax = uvs.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
            let lo = bilinear_footprint(w, h, [umin, vmin])[0];
            let hi = bilinear_footprint(w, h, [umax, vmax])[3];
            for y in lo.1..=hi.1 {
                for x in lo.0..=hi.0 {
                    hit[y * w + x] = true;
                }
            }
        }
        hit.iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Gradient with the atlas' shape (`width * height * 3`, interleaved RGB).
#[derive(Debug, Clone, PartialEq)]
pub struct TexelGradient {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl TexelGradient {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height * 3],
        }
    }

    pub fn like(atlas: &TextureAtlas) -> Self {
        Self::zeros(atlas.width(), atlas.height())
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.values {
            *v *= s;
        }
    }

    /// Adds the masked texture gradient of one view. `pixel_grads` holds
    /// d(loss)/d(pixel) with the image layout of `buffers`.
    pub fn accumulate(&mut self, buffers: &RasterBuffers, pixel_grads: &[f64], mask: &FaceMask) -> Result<()> {
        if pixel_grads.len() != buffers.len() * 3 {
            return Err(Error::Shape(format!(
                "{} pixel gradients for a {}x{} view",
                pixel_grads.len(),
                buffers.width,
                buffers.height
            )));
        }
        for i in 0..buffers.len() {
            let Some(face) = buffers.face(i) else { continue };
            if !mask.contains(face) {
                continue;
            }
            let g = &pixel_grads[i * 3..i * 3 + 3];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            for (x, y, wgt) in bilinear_footprint(self.width, self.height, buffers.uv(i)) {
                let t = (y * self.width + x) * 3;
                for c in 0..3 {
                    self.values[t + c] += wgt * g[c];
                }
            }
        }
        Ok(())
    }
}

pub fn backprop_to_texture(
    buffers: &RasterBuffers,
    pixel_grads: &[f64],
    mask: &FaceMask,
    atlas_width: usize,
    atlas_height: usize,
) -> Result<TexelGradient> {
    let mut g = TexelGradient::zeros(atlas_width, atlas_height);
    g.accumulate(buffers, pixel_grads, mask)?;
    Ok(g)
}
