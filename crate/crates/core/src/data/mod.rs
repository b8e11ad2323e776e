//! Label metadata, scene synthesis, and example/batch assembly.

mod examples;
mod metadata;
mod synth;

pub use examples::{build_examples, make_batches, window_examples, windows, Batch, Batches, Example, Window, WindowConfig};
pub use metadata::{format_metadata, parse_metadata, sort_events, EventFrame, LABEL_RATE, N_CLASSES};
pub use synth::{class_template, synth_scene, Scene, SynthConfig};
