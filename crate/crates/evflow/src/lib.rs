//! evflow: unsupervised event-camera optical flow at desk scale.
//!
//! The crate covers the full loop: event streams are sliced into fixed
//! interval volumes and rendered as per-polarity count images; a recurrent
//! encoder-decoder predicts a multi-scale flow pyramid; training minimizes a
//! motion-compensation objective built from images of warped events (average
//! timestamp and exponential count), plus a Charbonnier smoothness prior.
//! A deterministic synthetic scene generator provides event streams with
//! analytic ground-truth flow so that losses, training and metrics can all be
//! verified without sensor data.
//!
//! Everything is CPU-only `f64`; gradients come from a small reverse-mode
//! tape in [`autodiff`].

pub mod autodiff;
pub mod cells;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod event;
pub mod io;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod motion;
pub mod synth;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
pub use event::{count_image, normalize_timestamps, slice_stream};
pub use event::{CountImage, Event, EventVolume, Polarity, SensorSize};
pub use synth::{generate, Particle, SceneSpec};
