#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vln_hijack::math::Vec3;
use vln_hijack::render::{shade, Camera, RasterBuffers, TexelGradient};
use vln_hijack::worldgen::{Category, Scene, SceneBuilder, TextureAtlas};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_atlas(rng: &mut ChaCha8Rng, w: usize, h: usize) -> TextureAtlas {
    let texels = (0..w * h * 3).map(|_| rng.gen_range(0.05f32..0.95)).collect();
    TextureAtlas::new(w, h, texels).unwrap()
}

/// Random UV rectangle inside the atlas.
pub fn random_uv(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let u0 = rng.gen_range(0.0..0.6);
    let v0 = rng.gen_range(0.0..0.6);
    [u0, v0, u0 + rng.gen_range(0.05..0.4), v0 + rng.gen_range(0.05..0.4)]
}

/// Random quad roughly facing the origin at 1.5-6 m, any direction.
pub fn random_quad(rng: &mut ChaCha8Rng) -> [Vec3; 4] {
    let heading: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let elev: f64 = rng.gen_range(-0.8..0.8);
    let dist: f64 = rng.gen_range(1.5..6.0);
    let fwd = Vec3::new(heading.sin() * elev.cos(), heading.cos() * elev.cos(), elev.sin());
    let right = Vec3::new(heading.cos(), -heading.sin(), 0.0);
    let up = right.cross(fwd);
    let tilt: f64 = rng.gen_range(-0.5..0.5);
    let r = right * tilt.cos() + up * tilt.sin();
    let u = up * tilt.cos() - right * tilt.sin();
    let c = fwd * dist;
    let (hw, hh) = (rng.gen_range(0.3..2.0), rng.gen_range(0.3..2.0));
    [
        c - r * hw - u * hh,
        c + r * hw - u * hh,
        c + r * hw + u * hh,
        c - r * hw + u * hh,
    ]
}

/// Scene of `quads` random quads around the origin; the first `object_quads`
/// of them form object 0.
pub fn random_scene(rng: &mut ChaCha8Rng, quads: usize, object_quads: usize, atlas: usize) -> Scene {
    let atlas = random_atlas(rng, atlas, atlas);
    let mut b = SceneBuilder::new(atlas);
    let obj: Vec<_> = (0..object_quads)
        .map(|_| (random_quad(rng), random_uv(rng)))
        .collect();
    if !obj.is_empty() {
        b.object(Category::Sofa, &obj);
    }
    for _ in object_quads..quads {
        let q = random_quad(rng);
        let uv = random_uv(rng);
        b.quad(q, uv);
    }
    b.build().unwrap()
}

/// Camera at the origin looking along `heading`, `elevation`.
pub fn camera(heading: f64, elevation: f64, size: usize) -> Camera {
    Camera::new(Vec3::ZERO, heading, elevation, 60f64.to_radians(), size, size).unwrap()
}

/// Scalar image loss `sum a_i p_i + b_i p_i^2` and its pixel gradient.
pub struct ImageLoss {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl ImageLoss {
    pub fn random(rng: &mut ChaCha8Rng, n: usize) -> Self {
        Self {
            a: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            b: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    pub fn value(&self, pixels: &[f64]) -> f64 {
        pixels
            .iter()
            .zip(self.a.iter().zip(&self.b))
            .map(|(p, (a, b))| a * p + b * p * p)
            .sum()
    }

    pub fn grad(&self, pixels: &[f64]) -> Vec<f64> {
        pixels
            .iter()
            .zip(self.a.iter().zip(&self.b))
            .map(|(p, (a, b))| a + 2.0 * b * p)
            .collect()
    }
}

/// Central finite difference of `loss(shade(buffers, atlas))` with respect
/// to texel value `index`, using the actually stored (f32) perturbations.
pub fn fd_texel(
    views: &[RasterBuffers],
    atlas: &TextureAtlas,
    index: usize,
    h: f32,
    loss: &dyn Fn(&[Vec<f64>]) -> f64,
) -> f64 {
    let mut plus = atlas.clone();
    let mut minus = atlas.clone();
    let base = atlas.texels()[index];
    plus.texels_mut()[index] = (base + h).min(1.0);
    minus.texels_mut()[index] = (base - h).max(0.0);
    let dx = plus.texels()[index] as f64 - minus.texels()[index] as f64;
    let render = |a: &TextureAtlas| -> Vec<Vec<f64>> {
        views.iter().map(|b| shade(b, a).pixels).collect()
    };
    (loss(&render(&plus)) - loss(&render(&minus))) / dx
}

/// Relative error with an absolute floor for tiny gradients.
pub fn grad_matches(analytic: f64, numeric: f64) -> bool {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-3 {
        (analytic - numeric).abs() <= 1e-5
    } else {
        (analytic - numeric).abs() / scale <= 1e-3
    }
}

pub fn grad_nonzero_texels(g: &TexelGradient) -> Vec<usize> {
    g.values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0.0)
        .map(|(i, _)| i)
        .collect()
}
pub mod world;
