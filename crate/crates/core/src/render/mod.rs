//! Unlit software rasterizer with a texture-space backward pass.

mod backward;
mod panorama;
mod ppm;
mod raster;

pub use backward::{backprop_to_texture, FaceMask, TexelGradient};
pub use panorama::{
    coverage_from_buffers, nearest_view, object_coverage, rasterize_panorama, render_panorama,
    shade_panorama, subimages_containing, view_elevation, view_heading, view_index,
    view_row_heading, views_with_coverage, Panorama, PanoramaSpec, ELEVATIONS, HEADINGS, VIEWS,
    VIEW_SPACING,
};
pub use ppm::write_ppm;
pub use raster::{
    bilinear_footprint, rasterize, render_subimage, sample_bilinear, shade, Camera, RasterBuffers,
    SubImage, BACKGROUND,
};
