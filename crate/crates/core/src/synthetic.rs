//! Synthetic tri-modal datasets with known class structure.
//!
//! Every class has a text prototype, an image prototype and a shape generator
//! (box, ellipsoid or cylinder with class-coded proportions and color). Shape
//! text and image vectors are their class prototype plus Gaussian noise, and
//! class prompt vectors are stored in the cache under the filled template
//! sentences, so zero-shot evaluation runs exactly as on real data.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    sample_surface_points, Dataset, DatasetManifest, DatasetTag, EmbeddingCache, Mesh, ShapeRecord, TextCategory,
};
use crate::error::{Error, Result};
use crate::evalkit::{default_templates, prompt_sentences};
use crate::linalg::{dot, normalized};
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub text_dim: usize,
    pub image_dim: usize,
    /// Per-component standard deviation added to image prototypes.
    pub image_noise: f64,
    /// Per-component standard deviation added to text prototypes.
    pub text_noise: f64,
    pub prompt_noise: f64,
    pub prompt_templates: usize,
    pub views_per_shape: usize,
    pub captions_per_shape: usize,
    pub points_per_shape: usize,
    /// Classes `(2p, 2p+1)` for `p < confusable_pairs` share geometry kind and
    /// color and have nearly parallel prototypes.
    pub confusable_pairs: usize,
    /// Cosine between the prototypes of a confusable pair.
    pub confusable_similarity: f64,
    /// Height ratio between the second and first class of a confusable pair.
    pub confusable_stretch: f64,
    /// Relative per-shape jitter of the class extents.
    pub geometry_jitter: f64,
    /// Fraction of shapes generated without any text candidate.
    pub text_less_fraction: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            text_dim: 32,
            image_dim: 32,
            image_noise: 0.1,
            text_noise: 0.1,
            prompt_noise: 0.02,
            prompt_templates: 4,
            views_per_shape: 2,
            captions_per_shape: 2,
            points_per_shape: 128,
            confusable_pairs: 0,
            confusable_similarity: 0.9,
            confusable_stretch: 1.15,
            geometry_jitter: 0.05,
            text_less_fraction: 0.0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("synthetic: {m}")));
        if self.classes == 0 || self.text_dim == 0 || self.image_dim == 0 {
            return bad("classes and dims must be positive");
        }
        if 2 * self.confusable_pairs > self.classes {
            return bad("more confusable pairs than classes allow");
        }
        if self.views_per_shape == 0 || self.captions_per_shape == 0 || self.points_per_shape == 0 {
            return bad("views, captions and points per shape must be positive");
        }
        if self.prompt_templates == 0 || self.prompt_templates > default_templates().len() {
            return bad("prompt_templates out of range");
        }
        if !(-1.0..=1.0).contains(&self.confusable_similarity) {
            return bad("confusable_similarity must be a cosine");
        }
        if !(0.0..=1.0).contains(&self.text_less_fraction) {
            return bad("text_less_fraction must be in [0, 1]");
        }
        for s in [
            self.image_noise,
            self.text_noise,
            self.prompt_noise,
            self.geometry_jitter,
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return bad("noise levels must be finite and non-negative");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solid {
    Box,
    Ellipsoid,
    Cylinder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassShape {
    pub solid: Solid,
    /// Half-extents along x, y, z.
    pub extents: [f64; 3],
    pub color: [f64; 3],
}

impl ClassShape {
    pub fn mesh(&self, extents: [f64; 3]) -> Mesh {
        let (vertices, triangles) = match self.solid {
            Solid::Box => box_mesh(),
            Solid::Ellipsoid => sphere_mesh(8, 12),
            Solid::Cylinder => cylinder_mesh(16),
        };
        let vertices: Vec<[f64; 3]> = vertices
            .into_iter()
            .map(|v| [v[0] * extents[0], v[1] * extents[1], v[2] * extents[2]])
            .collect();
        let colors = vec![self.color; vertices.len()];
        Mesh::new(vertices, colors, triangles).expect("generated meshes are valid")
    }
}

fn box_mesh() -> (Vec<[f64; 3]>, Vec<[usize; 3]>) {
    let mut v = Vec::with_capacity(8);
    for i in 0..8 {
        let s = |b: usize| if i & b != 0 { 1.0 } else { -1.0 };
        v.push([s(1), s(2), s(4)]);
    }
    let faces = [
        [0, 1, 3, 2],
        [4, 6, 7, 5],
        [0, 4, 5, 1],
        [2, 3, 7, 6],
        [0, 2, 6, 4],
        [1, 5, 7, 3],
    ];
    let t = faces
        .iter()
        .flat_map(|f| [[f[0], f[1], f[2]], [f[0], f[2], f[3]]])
        .collect();
    (v, t)
}

fn sphere_mesh(stacks: usize, slices: usize) -> (Vec<[f64; 3]>, Vec<[usize; 3]>) {
    let mut v = vec![[0.0, 0.0, 1.0]];
    for i in 1..stacks {
        let phi = std::f64::consts::PI * i as f64 / stacks as f64;
        for j in 0..slices {
            let theta = TAU * j as f64 / slices as f64;
            v.push([phi.sin() * theta.cos(), phi.sin() * theta.sin(), phi.cos()]);
        }
    }
    v.push([0.0, 0.0, -1.0]);
    let south = v.len() - 1;
    let ring = |i: usize, j: usize| 1 + (i - 1) * slices + j % slices;
    let mut t = Vec::new();
    for j in 0..slices {
        t.push([0, ring(1, j), ring(1, j + 1)]);
        t.push([south, ring(stacks - 1, j + 1), ring(stacks - 1, j)]);
    }
    for i in 1..stacks - 1 {
        for j in 0..slices {
            t.push([ring(i, j), ring(i + 1, j), ring(i + 1, j + 1)]);
            t.push([ring(i, j), ring(i + 1, j + 1), ring(i, j + 1)]);
        }
    }
    (v, t)
}

fn cylinder_mesh(slices: usize) -> (Vec<[f64; 3]>, Vec<[usize; 3]>) {
    let mut v = vec![[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]];
    for j in 0..slices {
        let theta = TAU * j as f64 / slices as f64;
        v.push([theta.cos(), theta.sin(), 1.0]);
        v.push([theta.cos(), theta.sin(), -1.0]);
    }
    let top = |j: usize| 2 + 2 * (j % slices);
    let bottom = |j: usize| 3 + 2 * (j % slices);
    let mut t = Vec::new();
    for j in 0..slices {
        t.push([0, top(j), top(j + 1)]);
        t.push([1, bottom(j + 1), bottom(j)]);
        t.push([top(j), bottom(j), bottom(j + 1)]);
        t.push([top(j), bottom(j + 1), top(j + 1)]);
    }
    (v, t)
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        if let Ok((u, _)) = normalized(&v, "prototype") {
            return u;
        }
    }
}

/// A unit vector with cosine `cos` to the unit vector `base`.
fn tilted<R: Rng + ?Sized>(rng: &mut R, base: &[f64], cos: f64) -> Vec<f64> {
    if base.len() == 1 {
        return base.to_vec();
    }
    loop {
        let r = random_unit(rng, base.len());
        let along = dot(&r, base);
        let ortho: Vec<f64> = r.iter().zip(base).map(|(x, b)| x - along * b).collect();
        if let Ok((o, _)) = normalized(&ortho, "orthogonal direction") {
            let sin = (1.0 - cos * cos).max(0.0).sqrt();
            return base.iter().zip(&o).map(|(b, o)| cos * b + sin * o).collect();
        }
    }
}

fn noisy<R: Rng + ?Sized>(rng: &mut R, proto: &[f64], sigma: f64) -> Vec<f32> {
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    proto.iter().map(|p| (p + normal.sample(rng)) as f32).collect()
}

const PALETTE: [[f64; 3]; 10] = [
    [0.9, 0.1, 0.1],
    [0.1, 0.7, 0.2],
    [0.1, 0.3, 0.9],
    [0.9, 0.8, 0.1],
    [0.7, 0.2, 0.8],
    [0.1, 0.8, 0.8],
    [0.9, 0.5, 0.1],
    [0.5, 0.5, 0.5],
    [0.4, 0.2, 0.1],
    [0.95, 0.6, 0.7],
];

/// Fixed class structure from which any number of datasets can be drawn.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub config: SyntheticConfig,
    pub labels: Vec<String>,
    pub shapes: Vec<ClassShape>,
    pub text_prototypes: Vec<Vec<f64>>,
    pub image_prototypes: Vec<Vec<f64>>,
    prompts: Vec<(String, Vec<f32>)>,
}

impl SyntheticWorld {
    pub fn new(config: SyntheticConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "synthetic-world"));
        let c = config.classes;
        let labels: Vec<String> = (0..c).map(|i| format!("class{i:02}")).collect();
        let mut shapes = Vec::with_capacity(c);
        let mut text_prototypes: Vec<Vec<f64>> = Vec::with_capacity(c);
        let mut image_prototypes: Vec<Vec<f64>> = Vec::with_capacity(c);
        for k in 0..c {
            let partner = (k % 2 == 1 && k / 2 < config.confusable_pairs).then(|| k - 1);
            if let Some(p) = partner {
                let base: &ClassShape = &shapes[p];
                let mut extents = base.extents;
                extents[2] *= config.confusable_stretch;
                shapes.push(ClassShape {
                    solid: base.solid,
                    extents,
                    color: base.color,
                });
                let t = tilted(&mut rng, &text_prototypes[p], config.confusable_similarity);
                let i = tilted(&mut rng, &image_prototypes[p], config.confusable_similarity);
                text_prototypes.push(t);
                image_prototypes.push(i);
            } else {
                let solid = [Solid::Box, Solid::Ellipsoid, Solid::Cylinder][k % 3];
                let height = 0.5 + 0.35 * (k / 3) as f64;
                let width = 0.6 + 0.1 * (k % 2) as f64;
                shapes.push(ClassShape {
                    solid,
                    extents: [width, 0.5, height],
                    color: PALETTE[k % PALETTE.len()],
                });
                text_prototypes.push(random_unit(&mut rng, config.text_dim));
                image_prototypes.push(random_unit(&mut rng, config.image_dim));
            }
        }
        let templates = default_templates();
        let mut prompts = Vec::new();
        for (label, proto) in labels.iter().zip(&text_prototypes) {
            for sentence in prompt_sentences(label, &templates[..config.prompt_templates]) {
                prompts.push((sentence, noisy(&mut rng, proto, config.prompt_noise)));
            }
        }
        Ok(Self {
            config,
            labels,
            shapes,
            text_prototypes,
            image_prototypes,
            prompts,
        })
    }

    /// The template sentences used for class prompts in generated caches.
    pub fn templates(&self) -> Vec<&'static str> {
        default_templates()[..self.config.prompt_templates].to_vec()
    }

    /// Draws `counts[c]` shapes of class `c`, ids `{prefix}{c}_{n}`, with
    /// labels recorded in the manifest.
    pub fn dataset(&self, counts: &[usize], prefix: &str, seed: u64) -> Result<Dataset> {
        if counts.len() != self.config.classes {
            return Err(Error::DimensionMismatch {
                context: "synthetic class counts".into(),
                expected: self.config.classes,
                found: counts.len(),
            });
        }
        let cfg = &self.config;
        let mut cache = EmbeddingCache::new(cfg.text_dim, cfg.image_dim)?;
        for (key, v) in &self.prompts {
            cache.insert_text(key.clone(), v)?;
        }
        let mut records = Vec::new();
        let mut labels = BTreeMap::new();
        for (c, &count) in counts.iter().enumerate() {
            for n in 0..count {
                let id = format!("{prefix}{c:02}_{n:04}");
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &id));
                let shape = &self.shapes[c];
                let mut extents = shape.extents;
                for e in &mut extents {
                    *e *= 1.0 + rng.random_range(-1.0..=1.0) * cfg.geometry_jitter;
                }
                let points = sample_surface_points(&shape.mesh(extents), cfg.points_per_shape, &mut rng)?;
                let mut text_candidates = BTreeMap::new();
                if !rng.random_bool(cfg.text_less_fraction) {
                    let keys: Vec<String> = (0..cfg.captions_per_shape).map(|j| format!("{id}:t{j}")).collect();
                    for k in &keys {
                        cache.insert_text(k.clone(), &noisy(&mut rng, &self.text_prototypes[c], cfg.text_noise))?;
                    }
                    text_candidates.insert(TextCategory::Caption, keys);
                }
                let views: Vec<String> = (0..cfg.views_per_shape).map(|j| format!("{id}:v{j}")).collect();
                for k in &views {
                    cache.insert_image(k.clone(), &noisy(&mut rng, &self.image_prototypes[c], cfg.image_noise))?;
                }
                labels.insert(id.clone(), self.labels[c].clone());
                records.push(ShapeRecord {
                    id,
                    points,
                    text_candidates,
                    image_view_keys: views,
                    dataset_tag: DatasetTag::Synthetic,
                });
            }
        }
        Dataset::new(
            DatasetManifest {
                records,
                cache_path: PathBuf::from("cache.bin"),
                split_labels: Some(labels),
            },
            cache,
        )
    }

    pub fn balanced(&self, per_class: usize, prefix: &str, seed: u64) -> Result<Dataset> {
        self.dataset(&vec![per_class; self.config.classes], prefix, seed)
    }
}
