pub mod attribution;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod embedders;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod modality;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod prior;
pub mod seed;
pub mod store;
pub mod tensor;

pub use checkpoint::{AlignmentCheckpoint, PriorCheckpoint};
pub use config::{EvalConfig, RunConfig};
pub use contrastive::{AlignConfig, AlignmentData, EpochRecord, ModalityExpert};
pub use data::{GenerationConfig, PreprocessConfig, SynthDataset};
pub use encoder::EncoderConfig;
pub use error::{Error, Result};
pub use modality::Modality;
pub use pipeline::EvalReport;
pub use prior::{PriorConfig, PriorNetwork};
pub use attribution::SaliencyMap;
pub use tensor::Tensor;
