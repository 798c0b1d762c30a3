//! Depth-buffered triangle rasterization and bilinear texture shading.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::worldgen::{FaceId, Scene, TextureAtlas};

pub const BACKGROUND: f64 = 0.5;
const NEAR: f64 = 0.05;
const NO_FACE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: Vec3,
    pub heading: f64,
    pub elevation: f64,
    pub hfov: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(
        position: Vec3,
        heading: f64,
        elevation: f64,
        hfov: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if !(hfov > 0.0 && hfov < std::f64::consts::PI) {
            return Err(Error::Shape(format!("hfov {hfov} outside (0, pi)")));
        }
        if width < 8 || height < 8 {
            return Err(Error::Shape(format!("image {width}x{height} smaller than 8x8")));
        }
        if !position.is_finite() || !heading.is_finite() || !elevation.is_finite() {
            return Err(Error::Shape("non-finite camera pose".into()));
        }
        Ok(Self {
            position,
            heading,
            elevation,
            hfov,
            width,
            height,
        })
    }

    /// Orthonormal `(right, up, forward)` basis. Heading 0 looks along +y,
    /// positive headings turn towards +x, positive elevation looks up.
    pub fn basis(&self) -> (Vec3, Vec3, Vec3) {
        let (sh, ch) = self.heading.sin_cos();
        let (se, ce) = self.elevation.sin_cos();
        let forward = Vec3::new(sh * ce, ch * ce, se);
        let right = Vec3::new(ch, -sh, 0.0);
        let up = right.cross(forward);
        (right, up, forward)
    }

    pub fn focal(&self) -> f64 {
        (self.width as f64 / 2.0) / (self.hfov / 2.0).tan()
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Unlit RGB image, row-major, interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct SubImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl SubImage {
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height * 3],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// Per-pixel visibility record of one rasterized view.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterBuffers {
    pub width: usize,
    pub height: usize,
    face: Vec<u32>,
    uv: Vec<[f64; 2]>,
    depth: Vec<f64>,
}

impl RasterBuffers {
    fn empty(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            face: vec![NO_FACE; n],
            uv: vec![[0.0, 0.0]; n],
            depth: vec![f64::INFINITY; n],
        }
    }

    pub fn len(&self) -> usize {
        self.face.len()
    }

    pub fn is_empty(&self) -> bool {
        self.face.is_empty()
    }

    /// Front-most face at pixel `i`, or `None` for background.
    pub fn face(&self, i: usize) -> Option<FaceId> {
        let f = self.face[i];
        (f != NO_FACE).then_some(f as FaceId)
    }

    pub fn uv(&self, i: usize) -> [f64; 2] {
        self.uv[i]
    }

    /// Depth along the view axis in meters; infinite for background.
    pub fn depth(&self, i: usize) -> f64 {
        self.depth[i]
    }

    pub fn covered_by(&self, faces: impl Fn(FaceId) -> bool) -> usize {
        (0..self.len())
            .filter(|&i| self.face(i).is_some_and(&faces))
            .count()
    }
}

#[derive(Clone, Copy)]
struct ClipVert {
    p: Vec3,
    uv: [f64; 2],
}

fn clip_near(poly: &[ClipVert]) -> Vec<ClipVert> {
    let mut out = Vec::with_capacity(poly.len() + 2);
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let a_in = a.p.z >= NEAR;
        let b_in = b.p.z >= NEAR;
        if a_in {
            out.push(a);
        }
        if a_in != b_in {
            let t = (NEAR - a.p.z) / (b.p.z - a.p.z);
            out.push(ClipVert {
                p: a.p.lerp(b.p, t),
                uv: [
                    a.uv[0] + (b.uv[0] - a.uv[0]) * t,
                    a.uv[1] + (b.uv[1] - a.uv[1]) * t,
                ],
            });
        }
    }
    out
}

fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Rasterizes the scene geometry for one camera. Visibility is resolved
/// with a strict depth test, so the first face in mesh order wins exact ties.
pub fn rasterize(scene: &Scene, camera: &Camera) -> RasterBuffers {
    let (w, h) = (camera.width, camera.height);
    let mut buf = RasterBuffers::empty(w, h);
    let (right, up, forward) = camera.basis();
    let focal = camera.focal();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let to_cam = |p: Vec3| {
        let d = p - camera.position;
        Vec3::new(d.dot(right), d.dot(up), d.dot(forward))
    };

    for (face_id, (tri, uvs)) in scene.faces.iter().zip(&scene.face_uvs).enumerate() {
        let verts: [ClipVert; 3] = std::array::from_fn(|k| ClipVert {
            p: to_cam(scene.vertices[tri[k]]),
            uv: uvs[k],
        });
        if verts.iter().all(|v| v.p.z < NEAR) {
            continue;
        }
        let poly = if verts.iter().all(|v| v.p.z >= NEAR) {
            verts.to_vec()
        } else {
            clip_near(&verts)
        };
        if poly.len() < 3 {
            continue;
        }
        let screen: Vec<[f64; 2]> = poly
            .iter()
            .map(|v| [cx + focal * v.p.x / v.p.z, cy - focal * v.p.y / v.p.z])
            .collect();
        for k in 1..poly.len() - 1 {
            let idx = [0, k, k + 1];
            let s = idx.map(|i| screen[i]);
            let area = edge(s[0], s[1], s[2]);
            if area.abs() < 1e-12 {
                continue;
            }
            let min_x = s.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
            let max_x = s.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
            let min_y = s.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
            let max_y = s.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
            if max_x < 0.0 || max_y < 0.0 || min_x > w as f64 || min_y > h as f64 {
                continue;
            }
            let x0 = (min_x - 0.5).floor().max(0.0) as usize;
            let x1 = ((max_x - 0.5).ceil().max(0.0) as usize).min(w - 1);
            let y0 = (min_y - 0.5).floor().max(0.0) as usize;
            let y1 = ((max_y - 0.5).ceil().max(0.0) as usize).min(h - 1);
            let inv_z = idx.map(|i| 1.0 / poly[i].p.z);
            let uv = idx.map(|i| poly[i].uv);
            for py in y0..=y1 {
                for px in x0..=x1 {
                    let p = [px as f64 + 0.5, py as f64 + 0.5];
                    let b0 = edge(s[1], s[2], p) / area;
                    let b1 = edge(s[2], s[0], p) / area;
                    let b2 = edge(s[0], s[1], p) / area;
                    if b0 < 0.0 || b1 < 0.0 || b2 < 0.0 {
                        continue;
                    }
                    let iz = b0 * inv_z[0] + b1 * inv_z[1] + b2 * inv_z[2];
                    let depth = 1.0 / iz;
                    let i = py * w + px;
                    if depth < buf.depth[i] {
                        let u = (b0 * uv[0][0] * inv_z[0]
                            + b1 * uv[1][0] * inv_z[1]
                            + b2 * uv[2][0] * inv_z[2])
                            * depth;
                        let v = (b0 * uv[0][1] * inv_z[0]
                            + b1 * uv[1][1] * inv_z[1]
                            + b2 * uv[2][1] * inv_z[2])
                            * depth;
                        buf.depth[i] = depth;
                        buf.face[i] = face_id as u32;
                        buf.uv[i] = [u.clamp(0.0, 1.0), v.clamp(0.0, 1.0)];
                    }
                }
            }
        }
    }
    buf
}

/// The four texels a bilinear lookup at `uv` reads, with their weights.
/// Texel centers sit at `(i + 0.5) / size`; lookups clamp to the edge.
pub fn bilinear_footprint(width: usize, height: usize, uv: [f64; 2]) -> [(usize, usize, f64); 4] {
    let x = (uv[0] * width as f64 - 0.5).clamp(0.0, (width - 1) as f64);
    let y = (uv[1] * height as f64 - 0.5).clamp(0.0, (height - 1) as f64);
    let x0 = (x.floor() as usize).min(width - 2);
    let y0 = (y.floor() as usize).min(height - 2);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1, y0, fx * (1.0 - fy)),
        (x0, y0 + 1, (1.0 - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    ]
}

pub fn sample_bilinear(atlas: &TextureAtlas, uv: [f64; 2]) -> [f64; 3] {
    let texels = atlas.texels();
    let mut rgb = [0.0; 3];
    for (x, y, wgt) in bilinear_footprint(atlas.width(), atlas.height(), uv) {
        let i = atlas.index(x, y, 0);
        for c in 0..3 {
            rgb[c] += wgt * texels[i + c] as f64;
        }
    }
    // Weights sum to one up to rounding; keep the convex-combination range.
    rgb.map(|v| v.clamp(0.0, 1.0))
}

/// Colors rasterized pixels from the atlas; background pixels are gray.
pub fn shade(buffers: &RasterBuffers, atlas: &TextureAtlas) -> SubImage {
    let mut img = SubImage::filled(buffers.width, buffers.height, BACKGROUND);
    for i in 0..buffers.len() {
        if buffers.face(i).is_some() {
            let rgb = sample_bilinear(atlas, buffers.uv(i));
            img.pixels[i * 3..i * 3 + 3].copy_from_slice(&rgb);
        }
    }
    img
}

pub fn render_subimage(scene: &Scene, camera: &Camera) -> (SubImage, RasterBuffers) {
    let buffers = rasterize(scene, camera);
    (shade(&buffers, &scene.atlas), buffers)
}
