use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Vec3;

pub type FaceId = usize;
pub type ObjectId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Chair,
    Cabinet,
    Table,
    Plant,
    Sofa,
    TvMonitor,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Chair,
        Category::Cabinet,
        Category::Table,
        Category::Plant,
        Category::Sofa,
        Category::TvMonitor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Chair => "chair",
            Category::Cabinet => "cabinet",
            Category::Table => "table",
            Category::Plant => "plant",
            Category::Sofa => "sofa",
            Category::TvMonitor => "tv_monitor",
        }
    }

    /// Token used for this category inside generated instructions.
    pub fn token(self) -> &'static str {
        match self {
            Category::TvMonitor => "tv",
            other => other.name(),
        }
    }

    pub fn parse(s: &str) -> Option<Category> {
        Category::ALL.into_iter().find(|c| c.name() == s)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: ObjectId,
    pub category: Category,
    /// Sorted face ids rendered by this object.
    pub faces: Vec<FaceId>,
}

/// RGB texel grid, row-major with interleaved channels, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TextureAtlas {
    width: usize,
    height: usize,
    texels: Vec<f32>,
}

impl TextureAtlas {
    pub fn new(width: usize, height: usize, texels: Vec<f32>) -> Result<Self> {
        if texels.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "atlas {width}x{height} needs {} values, got {}",
                width * height * 3,
                texels.len()
            )));
        }
        if let Some(i) = texels.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Shape(format!(
                "texel value {} at index {i} outside [0, 1]",
                texels[i]
            )));
        }
        Ok(Self {
            width,
            height,
            texels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let texels = (0..width * height).flat_map(|_| rgb).collect();
        Self {
            width,
            height,
            texels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn texels(&self) -> &[f32] {
        &self.texels
    }

    /// Mutable access for callers that keep every value in `[0, 1]`.
    pub fn texels_mut(&mut self) -> &mut [f32] {
        &mut self.texels
    }

    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * 3 + c
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = self.index(x, y, 0);
        [self.texels[i], self.texels[i + 1], self.texels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = self.index(x, y, 0);
        for (c, v) in rgb.into_iter().enumerate() {
            self.texels[i + c] = v.clamp(0.0, 1.0);
        }
    }

    pub fn same_shape(&self, other: &TextureAtlas) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// Textured, labeled triangle mesh. The atlas is persisted separately from
/// the geometry, so it is skipped by serde.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    pub face_uvs: Vec<[[f64; 2]; 3]>,
    pub objects: Vec<SceneObject>,
    #[serde(skip)]
    pub atlas: TextureAtlas,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if self.face_uvs.len() != self.faces.len() {
            return Err(Error::Shape("face_uvs and faces differ in length".into()));
        }
        for (f, tri) in self.faces.iter().enumerate() {
            if tri.iter().any(|&v| v >= self.vertices.len()) {
                return Err(Error::Shape(format!("face {f} references a missing vertex")));
            }
        }
        for uv in self.face_uvs.iter().flatten().flatten() {
            if !(0.0..=1.0).contains(uv) {
                return Err(Error::Shape(format!("uv coordinate {uv} outside [0, 1]")));
            }
        }
        let mut owner = vec![None; self.faces.len()];
        for (i, obj) in self.objects.iter().enumerate() {
            if obj.id != i {
                return Err(Error::Shape(format!("object {} stored at slot {i}", obj.id)));
            }
            for &f in &obj.faces {
                let slot = owner
                    .get_mut(f)
                    .ok_or_else(|| Error::Shape(format!("object {i} references face {f}")))?;
                if slot.is_some() {
                    return Err(Error::Shape(format!("face {f} belongs to two objects")));
                }
                *slot = Some(i);
            }
        }
        Ok(())
    }

    pub fn object(&self, id: ObjectId) -> Result<&SceneObject> {
        self.objects.get(id).ok_or(Error::UnknownObject(id))
    }

    /// Owning object per face.
    pub fn face_owners(&self) -> Vec<Option<ObjectId>> {
        let mut owner = vec![None; self.faces.len()];
        for obj in &self.objects {
            for &f in &obj.faces {
                owner[f] = Some(obj.id);
            }
        }
        owner
    }

    /// Centroid of an object's vertices.
    pub fn object_center(&self, id: ObjectId) -> Result<Vec3> {
        let obj = self.object(id)?;
        let mut sum = Vec3::ZERO;
        let mut n = 0.0;
        for &f in &obj.faces {
            for &v in &self.faces[f] {
                sum = sum + self.vertices[v];
                n += 1.0;
            }
        }
        Ok(if n > 0.0 { sum * (1.0 / n) } else { sum })
    }

    pub fn with_atlas(&self, atlas: TextureAtlas) -> Scene {
        Scene {
            atlas,
            ..self.clone()
        }
    }
}

/// Incremental construction of small scenes out of textured quads.
#[derive(Debug, Clone)]
pub struct SceneBuilder {
    scene: Scene,
}

impl SceneBuilder {
    pub fn new(atlas: TextureAtlas) -> Self {
        Self {
            scene: Scene {
                vertices: Vec::new(),
                faces: Vec::new(),
                face_uvs: Vec::new(),
                objects: Vec::new(),
                atlas,
            },
        }
    }

    /// Adds quad `corners` (in perimeter order) as two triangles mapped onto
    /// `uv = [u0, v0, u1, v1]`. Returns the two new face ids.
    pub fn quad(&mut self, corners: [Vec3; 4], uv: [f64; 4]) -> [FaceId; 2] {
        let s = &mut self.scene;
        let base = s.vertices.len();
        s.vertices.extend_from_slice(&corners);
        let [u0, v0, u1, v1] = uv;
        let t = [[u0, v1], [u1, v1], [u1, v0], [u0, v0]];
        let f = s.faces.len();
        s.faces.push([base, base + 1, base + 2]);
        s.face_uvs.push([t[0], t[1], t[2]]);
        s.faces.push([base, base + 2, base + 3]);
        s.face_uvs.push([t[0], t[2], t[3]]);
        [f, f + 1]
    }

    /// Adds an object made of the given quads.
    pub fn object(&mut self, category: Category, quads: &[([Vec3; 4], [f64; 4])]) -> ObjectId {
        let mut faces = Vec::new();
        for &(corners, uv) in quads {
            faces.extend(self.quad(corners, uv));
        }
        let id = self.scene.objects.len();
        self.scene.objects.push(SceneObject { id, category, faces });
        id
    }

    pub fn build(self) -> Result<Scene> {
        self.scene.validate()?;
        Ok(self.scene)
    }
}
