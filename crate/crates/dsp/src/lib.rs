//! Audio front-end for spoofing countermeasures: WAV I/O, LFCC/LFBE
//! features and data augmentation.

pub mod alaw;
pub mod augment;
pub mod cache;
mod error;
pub mod filter;
pub mod frontend;
pub mod resample;
pub mod wav;

pub use augment::{
    alaw_codec, apply_reverb, bandlimit_wideband, derive_seed, pitch_shift, synth_rir, t60_for, AugmentKind,
    AugmentSpec, RoomImpulseResponse,
};
pub use cache::FeatureCache;
pub use error::{DspError, Result};
pub use frontend::{
    deltas, fix_length, frame_signal, lfbe, lfcc, FeatureKind, FeatureMatrix, Frontend, FrontendConfig, FIXED_FRAMES,
};
pub use resample::{resample, Resampler};
pub use wav::{read_wav, write_wav, Waveform, CANONICAL_RATE};
