//! Synthetic corpus of labeled audio-visual videos.
//!
//! Each video is `T` one-second segments over `C` event classes, with
//! per-segment features in both modalities, per-modality ground truth and
//! pseudo labels, and a video-level weak label (the union of ground truth
//! over modalities and segments).

mod generate;
mod io;

pub use generate::{default_class_names, generate, generate_detailed, GenStats};
pub use io::{load, save, Dataset, FORMAT_VERSION, VIDEO_MAGIC};

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use thiserror::Error;

use crate::Tensor;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid config: {field}: {message}")]
    InvalidConfig { field: &'static str, message: String },
    #[error("degenerate split: {side} side would be empty ({total} samples at fraction {fraction})")]
    DegenerateSplit {
        side: &'static str,
        total: usize,
        fraction: f64,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {source}")]
    Manifest {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: String,
        expected: [u8; 4],
        found: [u8; 4],
    },
    #[error("unsupported format version {found} in {path} (supported: {supported})")]
    UnsupportedVersion {
        path: String,
        found: u32,
        supported: u32,
    },
    #[error("truncated payload in {path}")]
    Truncated { path: String },
    #[error("manifest references missing video file for id {id}")]
    MissingVideo { id: String },
    #[error("inconsistent dataset: {message}")]
    Inconsistent { message: String },
}

/// One modality's per-segment embeddings, shape `T x d`, row-major.
///
/// Values are f64 in memory but always representable exactly in f32, so the
/// on-disk f32 encoding round-trips bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub t: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl FeatureSequence {
    pub fn zeros(t: usize, d: usize) -> Self {
        FeatureSequence {
            t,
            d,
            data: vec![0.0; t * d],
        }
    }

    pub fn segment(&self, t: usize) -> &[f64] {
        &self.data[t * self.d..(t + 1) * self.d]
    }

    pub fn segment_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.d..(t + 1) * self.d]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.t, self.d], self.data.clone()).expect("consistent dims")
    }
}

/// Per-segment multi-hot labels over `C` classes, shape `T x C`, one byte
/// per cell in {0, 1}.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentLabelGrid {
    pub t: usize,
    pub c: usize,
    pub data: Vec<u8>,
}

impl SegmentLabelGrid {
    pub fn zeros(t: usize, c: usize) -> Self {
        SegmentLabelGrid {
            t,
            c,
            data: vec![0; t * c],
        }
    }

    #[inline]
    pub fn get(&self, t: usize, c: usize) -> bool {
        self.data[t * self.c + c] != 0
    }

    #[inline]
    pub fn set(&mut self, t: usize, c: usize, on: bool) {
        self.data[t * self.c + c] = on as u8;
    }

    pub fn active_classes(&self, t: usize) -> impl Iterator<Item = usize> + '_ {
        let row = &self.data[t * self.c..(t + 1) * self.c];
        row.iter().enumerate().filter(|(_, &v)| v != 0).map(|(c, _)| c)
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&v| v != 0)
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&v| v as f64).collect();
        Tensor::from_vec(&[self.t, self.c], data).expect("consistent dims")
    }
}

/// Video-level multi-hot label.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoLabel {
    pub bits: Vec<u8>,
}

impl VideoLabel {
    pub fn zeros(c: usize) -> Self {
        VideoLabel { bits: vec![0; c] }
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.bits.iter().map(|&v| v as f64).collect();
        Tensor::from_vec(&[self.bits.len()], data).expect("consistent dims")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: String,
    pub audio_features: FeatureSequence,
    pub visual_features: FeatureSequence,
    pub audio_gt: SegmentLabelGrid,
    pub visual_gt: SegmentLabelGrid,
    pub audio_pseudo: SegmentLabelGrid,
    pub visual_pseudo: SegmentLabelGrid,
    pub weak_label: VideoLabel,
}

impl VideoSample {
    pub fn t(&self) -> usize {
        self.audio_features.t
    }

    pub fn d(&self) -> usize {
        self.audio_features.d
    }

    pub fn num_classes(&self) -> usize {
        self.audio_gt.c
    }

    /// Weak label implied by the ground-truth grids: class present in either
    /// modality at any segment.
    pub fn weak_label_from_gt(&self) -> VideoLabel {
        union_label(&self.audio_gt, &self.visual_gt)
    }

    /// Video-level pseudo label by the same union rule, from the pseudo grids.
    pub fn pseudo_video_label(&self) -> VideoLabel {
        union_label(&self.audio_pseudo, &self.visual_pseudo)
    }
}

pub(crate) fn union_label(a: &SegmentLabelGrid, b: &SegmentLabelGrid) -> VideoLabel {
    let c = a.c;
    let mut label = VideoLabel::zeros(c);
    for grid in [a, b] {
        for t in 0..grid.t {
            for cls in grid.active_classes(t) {
                label.bits[cls] = 1;
            }
        }
    }
    label
}

/// Generator configuration. All rates are probabilities in [0, 1].
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub num_videos: usize,
    pub t: usize,
    pub d: usize,
    pub c: usize,
    /// Inclusive range of events sampled per video; classes are distinct
    /// within a video, so the max may not exceed `c`.
    pub events_per_video: (usize, usize),
    /// Probability that an event appears in both modalities over the same
    /// interval (otherwise it lands in a single modality).
    pub alignment_rate: f64,
    /// Per-cell flip probability applied to ground truth to form pseudo labels.
    pub pseudo_corruption_rate: f64,
    pub feature_noise_sigma: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            num_videos: 32,
            t: 10,
            d: 32,
            c: 5,
            events_per_video: (1, 3),
            alignment_rate: 0.7,
            pseudo_corruption_rate: 0.0,
            feature_noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        fn positive(field: &'static str, v: usize) -> Result<(), DatasetError> {
            if v == 0 {
                return Err(DatasetError::InvalidConfig {
                    field,
                    message: "must be at least 1".into(),
                });
            }
            Ok(())
        }
        fn rate(field: &'static str, v: f64) -> Result<(), DatasetError> {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return Err(DatasetError::InvalidConfig {
                    field,
                    message: format!("{v} is not in [0, 1]"),
                });
            }
            Ok(())
        }
        positive("num_videos", self.num_videos)?;
        positive("t", self.t)?;
        positive("d", self.d)?;
        positive("c", self.c)?;
        rate("alignment_rate", self.alignment_rate)?;
        rate("pseudo_corruption_rate", self.pseudo_corruption_rate)?;
        if !self.feature_noise_sigma.is_finite() || self.feature_noise_sigma < 0.0 {
            return Err(DatasetError::InvalidConfig {
                field: "feature_noise_sigma",
                message: format!("{} must be >= 0", self.feature_noise_sigma),
            });
        }
        let (lo, hi) = self.events_per_video;
        if lo == 0 || lo > hi {
            return Err(DatasetError::InvalidConfig {
                field: "events_per_video",
                message: format!("({lo}, {hi}) is not a valid nonempty range"),
            });
        }
        if hi > self.c {
            return Err(DatasetError::InvalidConfig {
                field: "events_per_video",
                message: format!("max {hi} exceeds the {} representable distinct classes", self.c),
            });
        }
        Ok(())
    }
}

/// Deterministic disjoint/exhaustive split into (train, eval).
pub fn split(
    samples: Vec<VideoSample>,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<VideoSample>, Vec<VideoSample>), DatasetError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DatasetError::InvalidConfig {
            field: "train_fraction",
            message: format!("{train_fraction} is not in (0, 1)"),
        });
    }
    let total = samples.len();
    let n_train = (total as f64 * train_fraction).floor() as usize;
    if n_train == 0 {
        return Err(DatasetError::DegenerateSplit {
            side: "train",
            total,
            fraction: train_fraction,
        });
    }
    if n_train == total {
        return Err(DatasetError::DegenerateSplit {
            side: "eval",
            total,
            fraction: train_fraction,
        });
    }
    let mut order: Vec<usize> = (0..total).collect();
    let mut rng = StdRng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let picked: Vec<bool> = {
        let mut p = vec![false; total];
        for &i in order.iter().take(n_train) {
            p[i] = true;
        }
        p
    };
    let mut train = Vec::with_capacity(n_train);
    let mut eval = Vec::with_capacity(total - n_train);
    for (sample, is_train) in samples.into_iter().zip(picked) {
        if is_train {
            train.push(sample);
        } else {
            eval.push(sample);
        }
    }
    Ok((train, eval))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_8_2() {
        let samples = generate(&GenConfig {
            num_videos: 10,
            ..GenConfig::default()
        })
        .unwrap();
        let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
        let (train, eval) = split(samples, 0.8, 1).unwrap();
        assert_eq!(train.len(), 8);
        assert_eq!(eval.len(), 2);
        // disjoint and exhaustive
        let mut all: Vec<String> = train.iter().chain(&eval).map(|s| s.id.clone()).collect();
        all.sort();
        let mut expected = ids;
        expected.sort();
        assert_eq!(all, expected);
    }

    #[test]
    fn split_is_deterministic() {
        let cfg = GenConfig {
            num_videos: 12,
            ..GenConfig::default()
        };
        let a = split(generate(&cfg).unwrap(), 0.5, 9).unwrap();
        let b = split(generate(&cfg).unwrap(), 0.5, 9).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn split_rejects_degenerate() {
        let samples = generate(&GenConfig {
            num_videos: 2,
            ..GenConfig::default()
        })
        .unwrap();
        assert!(matches!(
            split(samples, 0.1, 0),
            Err(DatasetError::DegenerateSplit { side: "train", .. })
        ));
    }
}
