//! Location-aware input augmentation for image segmentation.
//!
//! Images are extended with spatial channels (row/column coordinates,
//! distance from the centre, or a flattened pixel index) before entering a
//! small encoder-decoder network trained from scratch. The crate covers the
//! whole pipeline: augmentation, layers with hand-written backward passes,
//! the network, optimizers, metrics, synthetic datasets and a trainer.

pub mod augment;
pub mod bench;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use augment::{augment_image, location_channels, AugmentSpec, Normalization, Variant};
pub use error::{Error, Result};
pub use metrics::{MetricReport, Task, ThresholdMode};
pub use model::{SegNet, SegNetConfig};
pub use tensor::{read_tensor, write_tensor, Tensor};
