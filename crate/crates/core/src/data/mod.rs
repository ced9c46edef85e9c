//! Tracklet manifests, frame sampling, identity-balanced batching and the
//! synthetic cross-view generator.

mod manifest;
mod sampler;
mod store;
mod synth;

pub use manifest::{direction_split, sample_frames, sample_indices, Direction, Manifest, Split, MANIFEST_VERSION};
pub use sampler::{BatchSampler, SamplerConfig};
pub use store::{augment, load_frames, read_payload, write_payload, TrackletStore, SYNTH_PREFIX};
pub use synth::{generate_synthetic, laplacian_energy, write_synthetic, SynthSpec, Synthetic};
