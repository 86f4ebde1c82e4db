//! Bi-temporal dataset handling.
//!
//! On-disk layout:
//!
//! ```text
//! root/A/<id>.png        first-date RGB image
//! root/B/<id>.png        second-date RGB image
//! root/label/<id>.png    change mask, 0 = unchanged, 255 = changed
//! root/list/train.txt    one id per line (likewise val.txt, test.txt)
//! ```

mod audit;
mod augment;
mod loader;
mod raster;
pub mod synthetic;
mod tiling;

pub use audit::{audit_dataset, AuditReport, SplitSize};
pub use augment::{augment, crop_resize, rotate_quarter, sample_rng, AugmentationPolicy};
pub use loader::{
    carve_validation, load_pair, load_split, make_batch, resolve_manifest, Batch, InMemory, Normalization,
    PairSource, Split, SplitManifest, TiledDirectory,
};
pub use raster::{read_label, read_rgb, write_label, write_pair, write_rgb, ImagePair};
pub use tiling::{detile, tile_pair};
