pub mod augment;
pub mod checkpoint;
pub mod classifier;
pub mod codec;
pub mod cvae_gan;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod nets;
pub mod report;
pub mod synth;
pub mod trace;
pub mod vae;

pub use error::{Error, FrameError, Result};
pub use exec::Exec;
pub use synth::{
    make_dataset, synth_spectrogram, DatasetConfig, Dims, InterferenceClass, InterferenceRecord, Provenance, Sample,
    SignalModel, Spectrogram,
};
pub use trace::LossTrace;
pub use vae::{LatentParams, LossBreakdown, TrainConfig, Trained, VaeArch, VaeModel};
pub use codec::{LatentCode, LatentMode};
