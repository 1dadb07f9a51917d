//! Volume I/O, synthetic phantoms, normalization, augmentation, and
//! sliding-window geometry.

pub mod augment;
pub mod dataset;
pub mod io;
pub mod normalize;
pub mod phantom;
pub mod volume;
pub mod windows;

pub use augment::{augment, AugmentConfig};
pub use dataset::{Dataset, Manifest, Split};
pub use io::{read_volume, write_volume};
pub use normalize::{normalize_intensity, Normalize};
pub use phantom::{generate_phantom, PhantomSpec};
pub use volume::{Volume, VolumeKind};
pub use windows::{plan_windows, WindowPlan};
