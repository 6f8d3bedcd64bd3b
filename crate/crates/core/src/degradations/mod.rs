//! Synthetic corruption of clean images and the dataset manifest.

mod bicubic;
mod dataset;
mod noise;
mod rain;
mod rng;
mod scene;
mod spec;

pub use bicubic::{bicubic_resize, cubic, downsample};
pub use dataset::{load_manifest, synthesize_dataset, DatasetManifest, ManifestEntry, MANIFEST_FILE, MANIFEST_VERSION};
pub use noise::add_gaussian_noise;
pub use rain::{add_rain_streaks, rain_layer, RainParams};
pub use rng::{derive_seed, rng_from_seed, RNG_ALGORITHM};
pub use scene::synthetic_scene;
pub use spec::{default_tasks, parse_task_list, DegradationKind, DegradationSpec};
