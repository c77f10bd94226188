//! Frame preprocessing, hue segmentation, centroid extraction and
//! frame-to-frame marker matching.

pub mod color;
pub mod matching;
pub mod preprocess;
pub mod segment;

pub use color::{hsv_to_rgb, rgb_to_hsv, HsvImage};
pub use matching::{match_centroids, match_observations, Matching};
pub use preprocess::{gaussian_blur, preprocess, FlatField};
pub use segment::{segment_markers, MarkerObservation, SegmentParams, SubImage};
