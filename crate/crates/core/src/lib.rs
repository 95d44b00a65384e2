//! Frequency-domain adversarial attacks against grayscale image classifiers
//! and a DFT-autoencoder gate that detects them.
//!
//! The crate is organized around the experiment pipeline: `data` produces
//! class-folder datasets (real or synthetic phantoms), `models` trains a
//! small CNN classifier and a convolutional autoencoder on `numerics`'
//! autodiff engine, `attacks` crafts L-infinity-bounded adversarial examples
//! in pixel, wavelet, and DCT domains via `transforms`, and `detector` gates
//! the classifier behind spectrum reconstruction statistics. `harness` wires
//! the stages into the CLI commands.

pub mod attacks;
pub mod data;
pub mod detector;
pub mod harness;
pub mod losses;
pub mod models;
pub mod numerics;
pub mod transforms;

pub use attacks::{AdversarialBatch, AttackKind, AttackSpec};
pub use data::{Dataset, SplitPlan};
pub use detector::{CalibrationStats, DetectMethod, DetectionVerdict, DetectorBundle};
pub use losses::LossKind;
pub use models::{AutoencoderModel, ClassifierModel};
pub use numerics::{RngStream, Tensor};
pub use transforms::{DctGrid, Spectrum, WaveletPyramid};
