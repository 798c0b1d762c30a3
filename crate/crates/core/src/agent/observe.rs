//! Raw patch features of panoramas and per-node observation caches.

use std::sync::{Arc, OnceLock};

use super::params::RAW_DIM;
use crate::error::{Error, Result};
use crate::math::{elevation_between, heading_between};
use crate::render::{render_panorama, PanoramaSpec, SubImage, VIEWS};
use crate::worldgen::{NavGraph, NodeId, Scene};

const GRID: usize = 4;

/// Raw 48-dim features of every sub-image of one panorama.
#[derive(Debug, Clone, PartialEq)]
pub struct PanoramaFeatures {
    pub views: Vec<[f64; RAW_DIM]>,
}

/// Pixel range `[lo, hi)` of patch `k` along an axis of `n` pixels.
fn patch_range(k: usize, n: usize) -> (usize, usize) {
    (k * n / GRID, (k + 1) * n / GRID)
}

/// 4x4 grid of patch means, laid out `(patch_row * 4 + patch_col) * 3 + channel`.
pub fn raw_features(img: &SubImage) -> Result<[f64; RAW_DIM]> {
    if img.width < GRID || img.height < GRID || img.pixels.len() != img.width * img.height * 3 {
        return Err(Error::MalformedObservation(format!(
            "sub-image {}x{} with {} values",
            img.width,
            img.height,
            img.pixels.len()
        )));
    }
    let mut out = [0.0; RAW_DIM];
    for py in 0..GRID {
        let (y0, y1) = patch_range(py, img.height);
        for px in 0..GRID {
            let (x0, x1) = patch_range(px, img.width);
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            let base = (py * GRID + px) * 3;
            for y in y0..y1 {
                for x in x0..x1 {
                    let i = (y * img.width + x) * 3;
                    for c in 0..3 {
                        out[base + c] += img.pixels[i + c];
                    }
                }
            }
            for c in 0..3 {
                out[base + c] /= n;
            }
        }
    }
    Ok(out)
}

/// Pulls a gradient on raw features back to the sub-image pixels.
pub fn raw_grad_to_pixels(grad: &[f64], width: usize, height: usize) -> Vec<f64> {
    let mut out = vec![0.0; width * height * 3];
    for py in 0..GRID {
        let (y0, y1) = patch_range(py, height);
        for px in 0..GRID {
            let (x0, x1) = patch_range(px, width);
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            let base = (py * GRID + px) * 3;
            for y in y0..y1 {
                for x in x0..x1 {
                    let i = (y * width + x) * 3;
                    for c in 0..3 {
                        out[i + c] = grad[base + c] / n;
                    }
                }
            }
        }
    }
    out
}

impl PanoramaFeatures {
    pub fn from_images(images: &[SubImage]) -> Result<Self> {
        if images.len() != VIEWS {
            return Err(Error::MalformedObservation(format!(
                "panorama has {} sub-images, expected {VIEWS}",
                images.len()
            )));
        }
        let views = images.iter().map(raw_features).collect::<Result<_>>()?;
        Ok(Self { views })
    }

    pub fn validate(&self) -> Result<()> {
        if self.views.len() != VIEWS {
            return Err(Error::MalformedObservation(format!(
                "panorama has {} sub-images, expected {VIEWS}",
                self.views.len()
            )));
        }
        if self.views.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::MalformedObservation("non-finite feature".into()));
        }
        Ok(())
    }
}

/// A move option at a node: the neighbor and the direction towards it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub node: NodeId,
    pub heading: f64,
    pub elevation: f64,
}

/// Candidates at `node` in ascending neighbor id order.
pub fn candidates(graph: &NavGraph, node: NodeId) -> Vec<Candidate> {
    let p = graph.position(node);
    graph
        .neighbors(node)
        .iter()
        .map(|&n| {
            let q = graph.position(n);
            Candidate {
                node: n,
                heading: heading_between(p, q),
                elevation: elevation_between(p, q),
            }
        })
        .collect()
}

/// Anything that can produce the panorama features observed at a node.
pub trait ObservationSource: Sync {
    fn features(&self, node: NodeId) -> Result<Arc<PanoramaFeatures>>;
}

/// Lazily rendered, cached observations of a scene.
#[derive(Debug)]
pub struct RenderedObservations<'a> {
    scene: &'a Scene,
    graph: &'a NavGraph,
    spec: PanoramaSpec,
    cache: Vec<OnceLock<Arc<PanoramaFeatures>>>,
}

impl<'a> RenderedObservations<'a> {
    pub fn new(scene: &'a Scene, graph: &'a NavGraph, spec: &PanoramaSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            scene,
            graph,
            spec: spec.clone(),
            cache: (0..graph.len()).map(|_| OnceLock::new()).collect(),
        })
    }

    pub fn scene(&self) -> &'a Scene {
        self.scene
    }

    pub fn spec(&self) -> &PanoramaSpec {
        &self.spec
    }

    /// Renders every node now.
    pub fn prefetch(&self) -> Result<()> {
        for n in 0..self.graph.len() {
            self.features(n)?;
        }
        Ok(())
    }
}

impl ObservationSource for RenderedObservations<'_> {
    fn features(&self, node: NodeId) -> Result<Arc<PanoramaFeatures>> {
        let cell = self.cache.get(node).ok_or(Error::UnknownNode(node))?;
        if let Some(f) = cell.get() {
            return Ok(f.clone());
        }
        let pano = render_panorama(self.scene, self.graph.position(node), &self.spec)?;
        let images: Vec<SubImage> = pano.views.into_iter().map(|(img, _)| img).collect();
        let feats = Arc::new(PanoramaFeatures::from_images(&images)?);
        Ok(cell.get_or_init(|| feats).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_image_gives_constant_features() {
        let f = raw_features(&SubImage::filled(32, 32, 0.5)).unwrap();
        assert!(f.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn features_are_patch_means() {
        let mut img = SubImage::filled(8, 8, 0.0);
        // Pixel (1, 0) lies in patch (0, 0) of 2x2 pixels.
        img.pixels[3] = 1.0;
        let f = raw_features(&img).unwrap();
        assert_eq!(f[0], 0.25);
        assert_eq!(f[1], 0.0);
        assert!(f[3..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_pullback_is_adjoint() {
        // <g, F(p)> = <F^T g, p> for the linear feature map F.
        let w = 12;
        let h = 10;
        let pixels: Vec<f64> = (0..w * h * 3).map(|i| ((i * 37) % 11) as f64 / 11.0).collect();
        let img = SubImage {
            width: w,
            height: h,
            pixels: pixels.clone(),
        };
        let g: Vec<f64> = (0..RAW_DIM).map(|i| (i as f64 * 0.3).sin()).collect();
        let f = raw_features(&img).unwrap();
        let lhs: f64 = g.iter().zip(f).map(|(a, b)| a * b).sum();
        let back = raw_grad_to_pixels(&g, w, h);
        let rhs: f64 = back.iter().zip(&pixels).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn malformed_panorama_is_rejected() {
        let imgs = vec![SubImage::filled(8, 8, 0.5); 35];
        assert!(PanoramaFeatures::from_images(&imgs).is_err());
    }
}
