//! On-disk dataset layout.
//!
//! ```text
//! <dir>/manifest.json        ids, shapes, class names
//! <dir>/videos/<id>.bin      per-video payload, format below
//! ```
//!
//! Video payload, little-endian:
//! magic "LNK1" | u32 t | u32 d | u32 c | audio features f32[t*d] |
//! visual features f32[t*d] | audio_gt u8[t*c] | visual_gt u8[t*c] |
//! audio_pseudo u8[t*c] | visual_pseudo u8[t*c] | weak u8[c]
//!
//! The JSON manifest keeps the metadata human-inspectable; the binary
//! payload is compact and trivially parseable from any language.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DatasetError, FeatureSequence, SegmentLabelGrid, VideoLabel, VideoSample};

pub const VIDEO_MAGIC: [u8; 4] = *b"LNK1";
pub const FORMAT_VERSION: u32 = 1;

/// A corpus plus the class vocabulary its label indices refer to. The class
/// names double as the caption vocabulary for semantic embedding tables.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub samples: Vec<VideoSample>,
}

impl Dataset {
    pub fn new(class_names: Vec<String>, samples: Vec<VideoSample>) -> Self {
        Dataset {
            class_names,
            samples,
        }
    }

    pub fn dims(&self) -> Option<(usize, usize, usize)> {
        self.samples
            .first()
            .map(|s| (s.t(), s.d(), s.num_classes()))
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    t: usize,
    d: usize,
    c: usize,
    class_names: Vec<String>,
    videos: Vec<String>,
}

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save(dataset: &Dataset, dir: &Path) -> Result<(), DatasetError> {
    let (t, d, c) = dataset.dims().ok_or(DatasetError::Inconsistent {
        message: "cannot save an empty dataset".into(),
    })?;
    if dataset.class_names.len() != c {
        return Err(DatasetError::Inconsistent {
            message: format!(
                "{} class names for {c} classes",
                dataset.class_names.len()
            ),
        });
    }
    let videos_dir = dir.join("videos");
    fs::create_dir_all(&videos_dir).map_err(|e| io_err(&videos_dir, e))?;

    for sample in &dataset.samples {
        if sample.t() != t || sample.d() != d || sample.num_classes() != c {
            return Err(DatasetError::Inconsistent {
                message: format!("sample {} has mismatched dimensions", sample.id),
            });
        }
        let path = videos_dir.join(format!("{}.bin", sample.id));
        let bytes = encode_video(sample);
        fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
    }

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        t,
        d,
        c,
        class_names: dataset.class_names.clone(),
        videos: dataset.samples.iter().map(|s| s.id.clone()).collect(),
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| io_err(&path, e))?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<Dataset, DatasetError> {
    let manifest_path = dir.join("manifest.json");
    let raw = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&raw).map_err(|e| DatasetError::Manifest {
            path: manifest_path.display().to_string(),
            source: e,
        })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(DatasetError::UnsupportedVersion {
            path: manifest_path.display().to_string(),
            found: manifest.format_version,
            supported: FORMAT_VERSION,
        });
    }
    if manifest.class_names.len() != manifest.c {
        return Err(DatasetError::Inconsistent {
            message: format!(
                "manifest lists {} class names for c = {}",
                manifest.class_names.len(),
                manifest.c
            ),
        });
    }

    let mut samples = Vec::with_capacity(manifest.videos.len());
    for id in &manifest.videos {
        let path = video_path(dir, id);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(DatasetError::MissingVideo { id: id.clone() })
            }
            Err(e) => return Err(io_err(&path, e)),
        };
        let sample = decode_video(&path, id, &bytes)?;
        if sample.t() != manifest.t || sample.d() != manifest.d || sample.num_classes() != manifest.c
        {
            return Err(DatasetError::Inconsistent {
                message: format!(
                    "video {id} has dims (t={}, d={}, c={}) but manifest says (t={}, d={}, c={})",
                    sample.t(),
                    sample.d(),
                    sample.num_classes(),
                    manifest.t,
                    manifest.d,
                    manifest.c
                ),
            });
        }
        samples.push(sample);
    }
    Ok(Dataset {
        class_names: manifest.class_names,
        samples,
    })
}

fn video_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("videos").join(format!("{id}.bin"))
}

fn encode_video(sample: &VideoSample) -> Vec<u8> {
    let (t, d, c) = (sample.t(), sample.d(), sample.num_classes());
    let mut out = Vec::with_capacity(4 + 12 + 2 * t * d * 4 + 4 * t * c + c);
    out.extend_from_slice(&VIDEO_MAGIC);
    out.write_all(&(t as u32).to_le_bytes()).unwrap();
    out.write_all(&(d as u32).to_le_bytes()).unwrap();
    out.write_all(&(c as u32).to_le_bytes()).unwrap();
    for features in [&sample.audio_features, &sample.visual_features] {
        for &x in &features.data {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    for grid in [
        &sample.audio_gt,
        &sample.visual_gt,
        &sample.audio_pseudo,
        &sample.visual_pseudo,
    ] {
        out.extend_from_slice(&grid.data);
    }
    out.extend_from_slice(&sample.weak_label.bits);
    out
}

fn decode_video(path: &Path, id: &str, bytes: &[u8]) -> Result<VideoSample, DatasetError> {
    let mut cursor = bytes;
    let path_str = || path.display().to_string();

    let mut magic = [0u8; 4];
    read_exact(&mut cursor, &mut magic, path)?;
    if magic != VIDEO_MAGIC {
        return Err(DatasetError::BadMagic {
            path: path_str(),
            expected: VIDEO_MAGIC,
            found: magic,
        });
    }
    let t = read_u32(&mut cursor, path)? as usize;
    let d = read_u32(&mut cursor, path)? as usize;
    let c = read_u32(&mut cursor, path)? as usize;

    let read_features = |cursor: &mut &[u8]| -> Result<FeatureSequence, DatasetError> {
        let mut data = Vec::with_capacity(t * d);
        for _ in 0..t * d {
            let mut buf = [0u8; 4];
            read_exact(cursor, &mut buf, path)?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        Ok(FeatureSequence { t, d, data })
    };
    let audio_features = read_features(&mut cursor)?;
    let visual_features = read_features(&mut cursor)?;

    let read_grid = |cursor: &mut &[u8]| -> Result<SegmentLabelGrid, DatasetError> {
        let mut data = vec![0u8; t * c];
        read_exact(cursor, &mut data, path)?;
        if data.iter().any(|&v| v > 1) {
            return Err(DatasetError::Inconsistent {
                message: format!("video {id} contains label bytes outside {{0, 1}}"),
            });
        }
        Ok(SegmentLabelGrid { t, c, data })
    };
    let audio_gt = read_grid(&mut cursor)?;
    let visual_gt = read_grid(&mut cursor)?;
    let audio_pseudo = read_grid(&mut cursor)?;
    let visual_pseudo = read_grid(&mut cursor)?;

    let mut weak = vec![0u8; c];
    read_exact(&mut cursor, &mut weak, path)?;
    if !cursor.is_empty() {
        return Err(DatasetError::Inconsistent {
            message: format!(
                "video {id} has {} trailing bytes after payload",
                cursor.len()
            ),
        });
    }

    Ok(VideoSample {
        id: id.to_string(),
        audio_features,
        visual_features,
        audio_gt,
        visual_gt,
        audio_pseudo,
        visual_pseudo,
        weak_label: VideoLabel { bits: weak },
    })
}

fn read_exact(cursor: &mut &[u8], buf: &mut [u8], path: &Path) -> Result<(), DatasetError> {
    cursor
        .read_exact(buf)
        .map_err(|_| DatasetError::Truncated {
            path: path.display().to_string(),
        })
}

fn read_u32(cursor: &mut &[u8], path: &Path) -> Result<u32, DatasetError> {
    let mut buf = [0u8; 4];
    read_exact(cursor, &mut buf, path)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, GenConfig};

    fn small_dataset() -> Dataset {
        let cfg = GenConfig {
            num_videos: 4,
            t: 6,
            d: 8,
            c: 3,
            events_per_video: (1, 2),
            alignment_rate: 0.6,
            pseudo_corruption_rate: 0.2,
            feature_noise_sigma: 0.1,
            seed: 5,
        };
        Dataset::new(
            super::super::default_class_names(cfg.c),
            generate(&cfg).unwrap(),
        )
    }

    #[test]
    fn round_trip_is_exact() {
        let dataset = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        save(&dataset, dir.path()).unwrap();
        let loaded = load(dir.path()).unwrap();
        assert_eq!(dataset, loaded);
    }

    #[test]
    fn corrupted_magic_is_a_typed_error() {
        let dataset = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        save(&dataset, dir.path()).unwrap();
        let victim = dir.path().join("videos").join("video_00000.bin");
        let mut bytes = fs::read(&victim).unwrap();
        bytes[0] = b'X';
        fs::write(&victim, bytes).unwrap();
        assert!(matches!(
            load(dir.path()),
            Err(DatasetError::BadMagic { .. })
        ));
    }

    #[test]
    fn truncated_payload_is_detected() {
        let dataset = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        save(&dataset, dir.path()).unwrap();
        let victim = dir.path().join("videos").join("video_00001.bin");
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load(dir.path()),
            Err(DatasetError::Truncated { .. })
        ));
    }

    #[test]
    fn missing_video_names_the_id() {
        let dataset = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        save(&dataset, dir.path()).unwrap();
        fs::remove_file(dir.path().join("videos").join("video_00002.bin")).unwrap();
        match load(dir.path()) {
            Err(DatasetError::MissingVideo { id }) => assert_eq!(id, "video_00002"),
            other => panic!("expected MissingVideo, got {other:?}"),
        }
    }
}
