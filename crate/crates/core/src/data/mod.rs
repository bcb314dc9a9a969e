//! Training pairs: synthetic generation, augmentation, file formats and
//! flow visualization.

mod augment;
mod color;
mod flo;
mod manifest;
mod ppm;
mod synth;

pub use augment::{apply_geometric, apply_photometric, augment_pair, AugmentPolicy, Photometric};
pub use color::{flow_to_color, hsv_to_rgb};
pub use flo::{decode_flo, encode_flo, read_flo, write_flo, FLO_MAGIC, UNKNOWN_FLOW_THRESHOLD};
pub use manifest::{generate_dataset, load_dataset, load_sample, read_manifest, write_manifest, ManifestEntry};
pub use ppm::{decode_ppm, encode_ppm, read_image, write_image};
pub use synth::{generate_synthetic_pair, Affine, MotionBounds, MotionSpec, SyntheticPair};

use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::{Shape, Tensor};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}: not a flow file", .0.display())]
    NotFlowFile(PathBuf),
    #[error("{}: corrupt flow file (expected {expected} bytes, got {actual})", path.display())]
    CorruptFlow {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },
    #[error("{}: malformed image at byte {offset}: {msg}", path.display())]
    BadImage {
        path: PathBuf,
        offset: usize,
        msg: String,
    },
    #[error("{}:{line}: {msg}", path.display())]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("invalid motion: {0}")]
    Motion(String),
    #[error("invalid augmentation: {0}")]
    Augment(String),
    #[error("invalid sample: {0}")]
    Sample(String),
}

pub(crate) fn io_error(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> DataError {
    let path = path.into();
    move |source| DataError::Io { path, source }
}

/// One training example. Images are `(1, 3, H, W)` in `[0, 1]`; the flow is
/// `(1, 2, H, W)` and maps pixels of A to their position in B.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub image_a: Tensor<f32>,
    pub image_b: Tensor<f32>,
    pub flow: Tensor<f32>,
    /// `(1, 1, H, W)` 0/1 mask of pixels with known flow; `None` means all.
    pub valid: Option<Tensor<f32>>,
}

impl SamplePair {
    pub fn new(
        image_a: Tensor<f32>,
        image_b: Tensor<f32>,
        flow: Tensor<f32>,
        valid: Option<Tensor<f32>>,
    ) -> Result<Self, DataError> {
        let s = image_a.shape();
        let (h, w) = (s.h(), s.w());
        let expect = |name: &str, got: Shape, want: Shape| {
            if got == want {
                Ok(())
            } else {
                Err(DataError::Sample(format!("{name} has shape {got}, expected {want}")))
            }
        };
        expect("image A", s, Shape::new(1, 3, h, w))?;
        expect("image B", image_b.shape(), s)?;
        expect("flow", flow.shape(), Shape::new(1, 2, h, w))?;
        if let Some(m) = &valid {
            expect("valid mask", m.shape(), Shape::new(1, 1, h, w))?;
            if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(DataError::Sample("valid mask must contain only 0 and 1".into()));
            }
        }
        if !flow.is_finite() {
            return Err(DataError::Sample("flow contains non-finite values".into()));
        }
        Ok(SamplePair {
            image_a,
            image_b,
            flow,
            valid,
        })
    }

    pub fn height(&self) -> usize {
        self.image_a.shape().h()
    }

    pub fn width(&self) -> usize {
        self.image_a.shape().w()
    }

    /// The valid mask, materialized as all ones when absent.
    pub fn valid_mask(&self) -> Tensor<f32> {
        self.valid
            .clone()
            .unwrap_or_else(|| Tensor::ones(Shape::new(1, 1, self.height(), self.width())))
    }
}

/// Integer hash used for seed derivation and lattice noise.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of sample `index` in a dataset generated from `seed`.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    mix64(seed ^ mix64(index))
}
