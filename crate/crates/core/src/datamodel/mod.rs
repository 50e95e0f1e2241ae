//! Dataset manifests, frozen embedding caches, triplet assembly, mesh surface
//! sampling and point-cloud augmentation.

mod augment;
mod cache;
mod manifest;
mod mesh;
mod points_file;
pub(crate) mod triplet;

pub use augment::{augment_points, AugmentConfig};
pub use cache::EmbeddingCache;
pub use manifest::{
    load_manifest, load_manifest_opts, load_manifest_with, write_manifest, Dataset, DatasetManifest, DatasetTag,
    LoadOptions, MeshSampling, Point, PointStorage, ShapeRecord, TextCategory,
};
pub use mesh::{sample_surface_points, Mesh};
pub use points_file::{read_points_file, write_points_file};
pub use triplet::{assemble_triplet, TripletSample};
