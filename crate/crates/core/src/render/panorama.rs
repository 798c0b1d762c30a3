//! 36-view panoramas: 12 headings 30 degrees apart times 3 elevations.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::raster::{rasterize, shade, Camera, RasterBuffers, SubImage};
use crate::error::Result;
use crate::math::{wrap_angle, Vec3};
use crate::worldgen::{ObjectId, Scene, TextureAtlas};

pub const HEADINGS: usize = 12;
pub const ELEVATIONS: usize = 3;
pub const VIEWS: usize = HEADINGS * ELEVATIONS;
pub const VIEW_SPACING: f64 = PI / 6.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PanoramaSpec {
    pub width: usize,
    pub height: usize,
    pub hfov_deg: f64,
    /// Camera height above the viewpoint, meters.
    pub eye_height: f64,
}

impl Default for PanoramaSpec {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            hfov_deg: 60.0,
            eye_height: 1.5,
        }
    }
}

impl PanoramaSpec {
    pub fn validate(&self) -> Result<()> {
        self.camera(Vec3::ZERO, 0).map(|_| ())
    }

    /// Camera for sub-image `index` at a viewpoint on the floor.
    pub fn camera(&self, viewpoint: Vec3, index: usize) -> Result<Camera> {
        let (row, heading_index) = view_row_heading(index);
        Camera::new(
            viewpoint + Vec3::new(0.0, 0.0, self.eye_height),
            view_heading(heading_index),
            view_elevation(row),
            self.hfov_deg.to_radians(),
            self.width,
            self.height,
        )
    }
}

/// Sub-image index for an elevation row (0 = down, 1 = level, 2 = up) and heading index.
pub fn view_index(row: usize, heading_index: usize) -> usize {
    row * HEADINGS + heading_index
}

pub fn view_row_heading(index: usize) -> (usize, usize) {
    (index / HEADINGS, index % HEADINGS)
}

pub fn view_heading(heading_index: usize) -> f64 {
    heading_index as f64 * VIEW_SPACING
}

pub fn view_elevation(row: usize) -> f64 {
    (row as f64 - 1.0) * VIEW_SPACING
}

/// Sub-image whose camera direction is nearest to `(heading, elevation)`.
pub fn nearest_view(heading: f64, elevation: f64) -> usize {
    let h = (wrap_angle(heading) / VIEW_SPACING).round() as usize % HEADINGS;
    let row = ((elevation / VIEW_SPACING).round() + 1.0).clamp(0.0, (ELEVATIONS - 1) as f64) as usize;
    view_index(row, h)
}

/// Rasterized views of one viewpoint.
#[derive(Debug, Clone)]
pub struct Panorama {
    pub views: Vec<(SubImage, RasterBuffers)>,
}

pub fn rasterize_panorama(scene: &Scene, viewpoint: Vec3, spec: &PanoramaSpec) -> Result<Vec<RasterBuffers>> {
    (0..VIEWS)
        .map(|i| Ok(rasterize(scene, &spec.camera(viewpoint, i)?)))
        .collect()
}

pub fn render_panorama(scene: &Scene, viewpoint: Vec3, spec: &PanoramaSpec) -> Result<Panorama> {
    let buffers = rasterize_panorama(scene, viewpoint, spec)?;
    Ok(Panorama {
        views: buffers
            .into_iter()
            .map(|b| (shade(&b, &scene.atlas), b))
            .collect(),
    })
}

pub fn shade_panorama(buffers: &[RasterBuffers], atlas: &TextureAtlas) -> Vec<SubImage> {
    buffers.iter().map(|b| shade(b, atlas)).collect()
}

/// Fraction of each view's pixels whose front-most face belongs to the object.
pub fn coverage_from_buffers(scene: &Scene, buffers: &[RasterBuffers], object: ObjectId) -> Result<Vec<f64>> {
    let obj = scene.object(object)?;
    let faces: BTreeSet<usize> = obj.faces.iter().copied().collect();
    Ok(buffers
        .iter()
        .map(|b| b.covered_by(|f| faces.contains(&f)) as f64 / b.len() as f64)
        .collect())
}

pub fn object_coverage(scene: &Scene, viewpoint: Vec3, object: ObjectId, spec: &PanoramaSpec) -> Result<Vec<f64>> {
    scene.object(object)?;
    let buffers = rasterize_panorama(scene, viewpoint, spec)?;
    coverage_from_buffers(scene, &buffers, object)
}

pub fn subimages_containing(
    scene: &Scene,
    viewpoint: Vec3,
    object: ObjectId,
    spec: &PanoramaSpec,
) -> Result<BTreeSet<usize>> {
    let cov = object_coverage(scene, viewpoint, object, spec)?;
    Ok(views_with_coverage(&cov))
}

pub fn views_with_coverage(coverage: &[f64]) -> BTreeSet<usize> {
    coverage
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0.0)
        .map(|(i, _)| i)
        .collect()
}
