//! CIFAR-10 ingestion, pixel normalization, distance degradation, scene
//! composition, and the on-disk scene archive.

mod chip;
mod cifar;
mod degrade;
mod scene;
mod scene_archive;
pub mod synthetic;

pub use chip::{chip_to_rgb8, record_to_chip, resize_area, resize_bilinear, rgb8_to_chip, ImageChip};
pub use cifar::{
    load_cifar10, load_cifar10_split, parse_cifar10, serialize_cifar10, CifarRecord, CifarSplit, CIFAR_CLASSES,
    RECORD_BYTES,
};
pub use degrade::{degrade, gaussian_blur, DegradationSpec};
pub use scene::{compose_benchmark, compose_scene, BenchmarkSpec, GtBox, Provenance, Scene, SceneObject};
pub use scene::pixel_box;
pub use scene_archive::{read_scene_archive, scene_image_path, write_scene_archive, SceneRecord};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The crate-wide seeded generator.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed for item `index` of a seeded batch.
pub fn sub_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
