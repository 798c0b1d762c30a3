//! Grid-of-rooms world generator.
//!
//! Rooms are axis-aligned squares. A navigation node sits at every room
//! center and every doorway; doorways are placed on a random spanning tree
//! of the room grid plus a few extra openings. Objects are boxes standing on
//! the floor in the diagonal sectors around a room center so that they never
//! block the axis-aligned edges.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{NavGraph, NodeId};
use super::scene::{Category, Scene, SceneObject, TextureAtlas};
use crate::error::{Error, Result};
use crate::math::Vec3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldParams {
    pub rooms_x: usize,
    pub rooms_y: usize,
    /// Side length of a room in meters.
    pub room_size: f64,
    pub wall_height: f64,
    /// Expected number of objects per room (each room has four slots).
    pub object_density: f64,
    /// Probability of opening a doorway on a wall not used by the spanning tree.
    pub extra_door_prob: f64,
    pub atlas_size: usize,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            rooms_x: 4,
            rooms_y: 4,
            room_size: 8.0,
            wall_height: 3.0,
            object_density: 2.0,
            extra_door_prob: 0.35,
            atlas_size: 256,
        }
    }
}

impl WorldParams {
    /// Fewest nodes any seed can produce: every room plus a spanning tree of doors.
    pub fn min_node_count(&self) -> usize {
        let rooms = self.rooms_x * self.rooms_y;
        (2 * rooms).saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rooms_x == 0 || self.rooms_y == 0 {
            return Err(Error::WorldParams("room grid must be non-empty".into()));
        }
        if self.min_node_count() < 8 {
            return Err(Error::WorldParams(format!(
                "node count {} < 8",
                self.min_node_count()
            )));
        }
        if !(self.room_size >= 4.0 && self.room_size.is_finite()) {
            return Err(Error::WorldParams("room_size must be at least 4 m".into()));
        }
        if !(self.wall_height > DOOR_HEIGHT && self.wall_height.is_finite()) {
            return Err(Error::WorldParams(format!(
                "wall_height must exceed the door height {DOOR_HEIGHT} m"
            )));
        }
        if !(self.object_density >= 0.0 && self.object_density <= 4.0) {
            return Err(Error::WorldParams("object_density must lie in [0, 4]".into()));
        }
        if !(0.0..=1.0).contains(&self.extra_door_prob) {
            return Err(Error::WorldParams("extra_door_prob must lie in [0, 1]".into()));
        }
        if self.atlas_size < 64 {
            return Err(Error::WorldParams("atlas_size must be at least 64".into()));
        }
        Ok(())
    }
}

const DOOR_WIDTH: f64 = 1.6;
const DOOR_HEIGHT: f64 = 2.4;
/// Distance from the room center to an object's footprint center.
const OBJECT_RADIUS: f64 = 2.1;

#[derive(Debug, Clone, Copy)]
struct Footprint {
    /// Extent tangential to the viewing direction from the room center.
    width: f64,
    depth: f64,
    height: f64,
}

fn footprint(c: Category) -> Footprint {
    let (width, depth, height) = match c {
        Category::Chair => (1.1, 1.0, 1.1),
        Category::Cabinet => (1.3, 0.8, 2.0),
        Category::Table => (1.8, 1.2, 0.95),
        Category::Plant => (1.0, 1.0, 1.6),
        Category::Sofa => (2.2, 1.1, 1.05),
        Category::TvMonitor => (1.5, 0.5, 1.7),
    };
    Footprint {
        width,
        depth,
        height,
    }
}

fn category_color(c: Category) -> [f32; 3] {
    match c {
        Category::Chair => [0.86, 0.55, 0.16],
        Category::Cabinet => [0.46, 0.30, 0.20],
        Category::Table => [0.90, 0.84, 0.32],
        Category::Plant => [0.16, 0.64, 0.26],
        Category::Sofa => [0.76, 0.16, 0.20],
        Category::TvMonitor => [0.12, 0.16, 0.38],
    }
}

/// Allocates square tiles of the atlas; faces map into a tile inset by one
/// texel so bilinear footprints never leave it.
struct TileAllocator {
    atlas: usize,
    tile: usize,
    next: usize,
}

#[derive(Debug, Clone, Copy)]
struct Tile {
    x0: usize,
    y0: usize,
    size: usize,
}

impl TileAllocator {
    fn new(atlas: usize, tiles_needed: usize) -> Result<Self> {
        let mut tile = 64;
        while tile > 4 && (atlas / tile) * (atlas / tile) < tiles_needed {
            tile /= 2;
        }
        if (atlas / tile) * (atlas / tile) < tiles_needed {
            return Err(Error::WorldParams(format!(
                "atlas of {atlas}x{atlas} cannot hold {tiles_needed} tiles"
            )));
        }
        Ok(Self {
            atlas,
            tile,
            next: 0,
        })
    }

    fn alloc(&mut self) -> Tile {
        let per_row = self.atlas / self.tile;
        let i = self.next;
        self.next += 1;
        Tile {
            x0: (i % per_row) * self.tile,
            y0: (i / per_row) * self.tile,
            size: self.tile,
        }
    }

    /// UV rectangle `(u0, v0, u1, v1)` strictly inside the tile.
    fn uv_rect(&self, t: Tile) -> [f64; 4] {
        let a = self.atlas as f64;
        [
            (t.x0 as f64 + 1.0) / a,
            (t.y0 as f64 + 1.0) / a,
            ((t.x0 + t.size) as f64 - 1.0) / a,
            ((t.y0 + t.size) as f64 - 1.0) / a,
        ]
    }
}

struct MeshBuilder {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    face_uvs: Vec<[[f64; 2]; 3]>,
}

impl MeshBuilder {
    /// Adds quad `a b c d` (in order around the perimeter) as two triangles
    /// mapped onto `uv = (u0, v0, u1, v1)`.
    fn quad(&mut self, q: [Vec3; 4], uv: [f64; 4]) {
        let base = self.vertices.len();
        self.vertices.extend_from_slice(&q);
        let [u0, v0, u1, v1] = uv;
        let t = [[u0, v1], [u1, v1], [u1, v0], [u0, v0]];
        self.faces.push([base, base + 1, base + 2]);
        self.face_uvs.push([t[0], t[1], t[2]]);
        self.faces.push([base, base + 2, base + 3]);
        self.face_uvs.push([t[0], t[2], t[3]]);
    }

    /// Vertical wall rectangle between horizontal points `p0`, `p1`.
    fn wall(&mut self, p0: Vec3, p1: Vec3, z0: f64, z1: f64, uv: [f64; 4]) {
        self.quad(
            [
                Vec3::new(p0.x, p0.y, z0),
                Vec3::new(p1.x, p1.y, z0),
                Vec3::new(p1.x, p1.y, z1),
                Vec3::new(p0.x, p0.y, z1),
            ],
            uv,
        );
    }
}

fn fill_tile(
    atlas: &mut TextureAtlas,
    tile: Tile,
    base: [f32; 3],
    stripe: usize,
    rng: &mut ChaCha8Rng,
) {
    for y in tile.y0..tile.y0 + tile.size {
        for x in tile.x0..tile.x0 + tile.size {
            let band = if stripe > 0 && ((x - tile.x0) / stripe + (y - tile.y0) / stripe).is_multiple_of(2) {
                0.07
            } else {
                -0.04
            };
            let jitter: f32 = rng.gen_range(-0.05..0.05);
            let rgb = base.map(|c| (c + band + jitter).clamp(0.0, 1.0));
            atlas.set(x, y, rgb);
        }
    }
}

fn room_center(params: &WorldParams, i: usize, j: usize) -> Vec3 {
    Vec3::new(
        (i as f64 + 0.5) * params.room_size,
        (j as f64 + 0.5) * params.room_size,
        0.0,
    )
}

/// Generates a reproducible world. Node ids: room centers first (row-major
/// over `(j, i)`), then doorways in the order their walls are enumerated.
pub fn generate_world(seed: u64, params: &WorldParams) -> Result<(Scene, NavGraph)> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (nx, ny) = (params.rooms_x, params.rooms_y);
    let s = params.room_size;
    let room_id = |i: usize, j: usize| j * nx + i;

    // Walls between rooms: (room_a, room_b, horizontal?) where horizontal
    // walls separate rows.
    let mut inner_walls = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            if i + 1 < nx {
                inner_walls.push((room_id(i, j), room_id(i + 1, j)));
            }
            if j + 1 < ny {
                inner_walls.push((room_id(i, j), room_id(i, j + 1)));
            }
        }
    }

    // Random spanning tree (randomized Kruskal) plus extra doors.
    let mut order: Vec<usize> = (0..inner_walls.len()).collect();
    order.shuffle(&mut rng);
    let mut parent: Vec<usize> = (0..nx * ny).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        let mut c = x;
        while p[c] != r {
            let n = p[c];
            p[c] = r;
            c = n;
        }
        r
    }
    let mut has_door = vec![false; inner_walls.len()];
    for &w in &order {
        let (a, b) = inner_walls[w];
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
            has_door[w] = true;
        }
    }
    for door in has_door.iter_mut() {
        let extra: f64 = rng.gen();
        if !*door && extra < params.extra_door_prob {
            *door = true;
        }
    }

    // Navigation graph.
    let mut positions = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            positions.push(room_center(params, i, j));
        }
    }
    let mut edges: Vec<(NodeId, NodeId)> = Vec::new();
    let mut door_nodes = vec![None; inner_walls.len()];
    for (w, &(a, b)) in inner_walls.iter().enumerate() {
        if !has_door[w] {
            continue;
        }
        let pa = positions[a];
        let pb = positions[b];
        let id = positions.len();
        positions.push(pa.lerp(pb, 0.5));
        door_nodes[w] = Some(id);
        edges.push((a, id));
        edges.push((id, b));
    }
    let graph = NavGraph::new(positions, &edges)?;
    debug_assert!(graph.is_connected());

    // Object placement: four diagonal slots per room.
    let slots_per_room = 4;
    let fill_prob = params.object_density / slots_per_room as f64;
    let mut placements = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            for k in 0..slots_per_room {
                let roll: f64 = rng.gen();
                // Near the diagonal of the k-th quadrant, clear of both axes.
                let offset = PI / 4.0 + rng.gen_range(-0.09..0.09);
                let jitter: f64 = rng.gen_range(-0.15..0.15);
                if roll < fill_prob {
                    placements.push((i, j, k as f64 * PI / 2.0 + offset, jitter));
                }
            }
        }
    }
    let mut categories: Vec<Category> = Vec::with_capacity(placements.len());
    let mut cycle = Category::ALL.to_vec();
    cycle.shuffle(&mut rng);
    for n in 0..placements.len() {
        if n < cycle.len() {
            categories.push(cycle[n]);
        } else {
            categories.push(*Category::ALL.choose(&mut rng).expect("non-empty"));
        }
    }
    // Keep the guaranteed categories spread over the grid rather than in
    // the first rooms.
    categories.shuffle(&mut rng);

    // Atlas tiles: floor + ceiling per room, a wall palette, one per object.
    let wall_palette = 6;
    let tiles_needed = 2 * nx * ny + wall_palette + placements.len();
    let mut tiles = TileAllocator::new(params.atlas_size, tiles_needed)?;
    let mut atlas = TextureAtlas::filled(params.atlas_size, params.atlas_size, [0.5, 0.5, 0.5]);
    let mut mesh = MeshBuilder {
        vertices: Vec::new(),
        faces: Vec::new(),
        face_uvs: Vec::new(),
    };

    let wall_tiles: Vec<Tile> = (0..wall_palette)
        .map(|_| {
            let t = tiles.alloc();
            let tint: [f32; 3] = [
                rng.gen_range(0.70..0.88),
                rng.gen_range(0.68..0.86),
                rng.gen_range(0.62..0.80),
            ];
            fill_tile(&mut atlas, t, tint, 0, &mut rng);
            t
        })
        .collect();

    let h = params.wall_height;
    for j in 0..ny {
        for i in 0..nx {
            let (x0, y0) = (i as f64 * s, j as f64 * s);
            let (x1, y1) = (x0 + s, y0 + s);
            let floor = tiles.alloc();
            let shade: f32 = rng.gen_range(0.38..0.56);
            fill_tile(&mut atlas, floor, [shade, shade * 0.9, shade * 0.8], 4, &mut rng);
            mesh.quad(
                [
                    Vec3::new(x0, y0, 0.0),
                    Vec3::new(x1, y0, 0.0),
                    Vec3::new(x1, y1, 0.0),
                    Vec3::new(x0, y1, 0.0),
                ],
                tiles.uv_rect(floor),
            );
            let ceiling = tiles.alloc();
            let light: f32 = rng.gen_range(0.86..0.96);
            fill_tile(&mut atlas, ceiling, [light, light, light * 0.97], 0, &mut rng);
            mesh.quad(
                [
                    Vec3::new(x0, y0, h),
                    Vec3::new(x1, y0, h),
                    Vec3::new(x1, y1, h),
                    Vec3::new(x0, y1, h),
                ],
                tiles.uv_rect(ceiling),
            );
        }
    }

    // Wall segments: every grid line segment, split around doorways.
    let segment = |mesh: &mut MeshBuilder, p0: Vec3, p1: Vec3, door: bool, pal: usize| {
        let uv = tiles.uv_rect(wall_tiles[pal % wall_palette]);
        if !door {
            mesh.wall(p0, p1, 0.0, h, uv);
            return;
        }
        let len = p0.distance(p1);
        let a = (len - DOOR_WIDTH) / 2.0 / len;
        let b = (len + DOOR_WIDTH) / 2.0 / len;
        let q0 = p0.lerp(p1, a);
        let q1 = p0.lerp(p1, b);
        mesh.wall(p0, q0, 0.0, h, uv);
        mesh.wall(q1, p1, 0.0, h, uv);
        mesh.wall(q0, q1, DOOR_HEIGHT, h, uv);
    };
    let wall_door = |a: usize, b: usize| -> bool {
        inner_walls
            .iter()
            .position(|&w| w == (a, b))
            .map(|w| has_door[w])
            .unwrap_or(false)
    };
    // Vertical grid lines (constant x).
    for gx in 0..=nx {
        for j in 0..ny {
            let x = gx as f64 * s;
            let p0 = Vec3::new(x, j as f64 * s, 0.0);
            let p1 = Vec3::new(x, (j + 1) as f64 * s, 0.0);
            let door = gx > 0 && gx < nx && wall_door(room_id(gx - 1, j), room_id(gx, j));
            segment(&mut mesh, p0, p1, door, gx * 7 + j * 3);
        }
    }
    // Horizontal grid lines (constant y).
    for gy in 0..=ny {
        for i in 0..nx {
            let y = gy as f64 * s;
            let p0 = Vec3::new(i as f64 * s, y, 0.0);
            let p1 = Vec3::new((i + 1) as f64 * s, y, 0.0);
            let door = gy > 0 && gy < ny && wall_door(room_id(i, gy - 1), room_id(i, gy));
            segment(&mut mesh, p0, p1, door, gy * 5 + i * 11 + 1);
        }
    }

    // Objects: contiguous face blocks, one atlas tile each.
    let mut objects = Vec::with_capacity(placements.len());
    for (id, (&(i, j, angle, jitter), &category)) in
        placements.iter().zip(categories.iter()).enumerate()
    {
        let fp = footprint(category);
        let center = room_center(params, i, j);
        let radius = OBJECT_RADIUS + jitter;
        let radial = Vec3::new(angle.sin(), angle.cos(), 0.0);
        let tangent = Vec3::new(radial.y, -radial.x, 0.0);
        let c = center + radial * (radius + fp.depth / 2.0 - 0.5);
        let hw = tangent * (fp.width / 2.0);
        let hd = radial * (fp.depth / 2.0);
        let corners = [c - hw - hd, c + hw - hd, c + hw + hd, c - hw + hd];
        let top = |p: Vec3| Vec3::new(p.x, p.y, fp.height);

        let tile = tiles.alloc();
        let color = category_color(category);
        let tint: f32 = rng.gen_range(-0.06..0.06);
        fill_tile(&mut atlas, tile, color.map(|v| (v + tint).clamp(0.0, 1.0)), 3, &mut rng);
        let uv = tiles.uv_rect(tile);
        let first = mesh.faces.len();
        for k in 0..4 {
            let a = corners[k];
            let b = corners[(k + 1) % 4];
            mesh.quad([a, b, top(b), top(a)], uv);
        }
        mesh.quad(corners.map(top), uv);
        objects.push(SceneObject {
            id,
            category,
            faces: (first..mesh.faces.len()).collect(),
        });
    }

    let scene = Scene {
        vertices: mesh.vertices,
        faces: mesh.faces,
        face_uvs: mesh.face_uvs,
        objects,
        atlas,
    };
    scene.validate()?;
    Ok((scene, graph))
}
