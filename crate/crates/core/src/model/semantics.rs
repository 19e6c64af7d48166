//! Pseudo-label semantic fusion.
//!
//! Per-segment pseudo labels are resolved to caption embeddings through a
//! fixed table (standing in for frozen text encoders), mapped by four MLPs
//! into per-feature scale and bias vectors, and fused with the interaction
//! outputs FiLM-style with a residual:
//! `F = f ⊙ scale + bias + f`.
//!
//! The table is frozen: gradients flow into the MLPs, never the embeddings.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::SegmentLabelGrid;
use crate::numerics::tape::Var;
use crate::{NumericsError, Tape, Tensor};

use super::{mlp2, BoundParams, Modality, Mlp2Ids};

pub const AUDIO_CAPTION_PREFIX: &str = "this is a sound of";
pub const VISUAL_CAPTION_PREFIX: &str = "A photo of";

#[derive(Debug, Error)]
pub enum SemanticsError {
    #[error("duplicate class name {name}")]
    DuplicateClass { name: String },
    #[error("empty class list")]
    EmptyClassList,
    #[error("pseudo grid has {found} classes, caption table has {expected}")]
    ClassCountMismatch { expected: usize, found: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed caption table {path}: {message}")]
    Malformed { path: String, message: String },
}

/// One caption and its fixed embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionEntry {
    pub caption: String,
    pub embedding: Vec<f64>,
}

/// Frozen per-class, per-modality caption embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionTable {
    pub d_text: usize,
    pub class_names: Vec<String>,
    pub audio: Vec<CaptionEntry>,
    pub visual: Vec<CaptionEntry>,
}

impl CaptionTable {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn entries(&self, modality: Modality) -> &[CaptionEntry] {
        match modality {
            Modality::Audio => &self.audio,
            Modality::Visual => &self.visual,
        }
    }
}

/// Deterministic unit-norm random embedding per (class, modality), with
/// captions built from the modality prefixes above.
pub fn build_fixture_table(
    class_names: &[String],
    d_text: usize,
    seed: u64,
) -> Result<CaptionTable, SemanticsError> {
    if class_names.is_empty() {
        return Err(SemanticsError::EmptyClassList);
    }
    for (i, name) in class_names.iter().enumerate() {
        if class_names[..i].contains(name) {
            return Err(SemanticsError::DuplicateClass { name: name.clone() });
        }
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let embed = |rng: &mut StdRng| -> Vec<f64> {
        let mut v: Vec<f64> = (0..d_text)
            .map(|_| {
                let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
                let u2: f64 = rng.gen();
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in v.iter_mut() {
                *x /= norm;
            }
        }
        v
    };
    let audio = class_names
        .iter()
        .map(|name| CaptionEntry {
            caption: format!("{AUDIO_CAPTION_PREFIX} {name}"),
            embedding: embed(&mut rng),
        })
        .collect();
    let visual = class_names
        .iter()
        .map(|name| CaptionEntry {
            caption: format!("{VISUAL_CAPTION_PREFIX} {name}"),
            embedding: embed(&mut rng),
        })
        .collect();
    Ok(CaptionTable {
        d_text,
        class_names: class_names.to_vec(),
        audio,
        visual,
    })
}

/// Per-segment semantic features: the mean embedding of the segment's
/// active pseudo classes, or the zero vector when none is active. This is a
/// constant input to the model, not a differentiable op.
pub fn semantic_features(
    pseudo: &SegmentLabelGrid,
    table: &CaptionTable,
    modality: Modality,
) -> Result<Tensor, SemanticsError> {
    if pseudo.c != table.num_classes() {
        return Err(SemanticsError::ClassCountMismatch {
            expected: table.num_classes(),
            found: pseudo.c,
        });
    }
    let entries = table.entries(modality);
    let mut data = vec![0.0; pseudo.t * table.d_text];
    for t in 0..pseudo.t {
        let active: Vec<usize> = pseudo.active_classes(t).collect();
        if active.is_empty() {
            continue;
        }
        let row = &mut data[t * table.d_text..(t + 1) * table.d_text];
        for &class in &active {
            for (x, e) in row.iter_mut().zip(&entries[class].embedding) {
                *x += e;
            }
        }
        let inv = 1.0 / active.len() as f64;
        for x in row.iter_mut() {
            *x *= inv;
        }
    }
    Ok(Tensor::from_vec(&[pseudo.t, table.d_text], data).expect("consistent dims"))
}

/// FiLM-style fusion with residual: `f ⊙ scale(F_p) + bias(F_p) + f`.
pub fn fuse_semantics(
    tape: &mut Tape,
    f_out: Var,
    f_p: Var,
    scale_mlp: Mlp2Ids,
    bias_mlp: Mlp2Ids,
    bound: &BoundParams,
) -> Result<Var, NumericsError> {
    let gamma1 = mlp2(tape, f_p, scale_mlp, bound)?;
    let gamma2 = mlp2(tape, f_p, bias_mlp, bound)?;
    let scaled = tape.mul(f_out, gamma1)?;
    let with_bias = tape.add(scaled, gamma2)?;
    tape.add(with_bias, f_out)
}

// ── Persistence: captions.json + embeddings.bin in the dataset dir ──────

#[derive(Serialize, Deserialize)]
struct CaptionManifest {
    d_text: usize,
    class_names: Vec<String>,
    audio_captions: Vec<String>,
    visual_captions: Vec<String>,
}

pub fn save_table(table: &CaptionTable, dir: &Path) -> Result<(), SemanticsError> {
    let manifest = CaptionManifest {
        d_text: table.d_text,
        class_names: table.class_names.clone(),
        audio_captions: table.audio.iter().map(|e| e.caption.clone()).collect(),
        visual_captions: table.visual.iter().map(|e| e.caption.clone()).collect(),
    };
    let json_path = dir.join("captions.json");
    fs::write(
        &json_path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| SemanticsError::Io {
        path: json_path.display().to_string(),
        source: e,
    })?;

    let mut bytes = Vec::with_capacity(2 * table.num_classes() * table.d_text * 8);
    for entry in table.audio.iter().chain(&table.visual) {
        for &x in &entry.embedding {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let bin_path = dir.join("embeddings.bin");
    fs::write(&bin_path, bytes).map_err(|e| SemanticsError::Io {
        path: bin_path.display().to_string(),
        source: e,
    })
}

pub fn load_table(dir: &Path) -> Result<CaptionTable, SemanticsError> {
    let json_path = dir.join("captions.json");
    let raw = fs::read_to_string(&json_path).map_err(|e| SemanticsError::Io {
        path: json_path.display().to_string(),
        source: e,
    })?;
    let manifest: CaptionManifest =
        serde_json::from_str(&raw).map_err(|e| SemanticsError::Malformed {
            path: json_path.display().to_string(),
            message: e.to_string(),
        })?;
    let c = manifest.class_names.len();
    if manifest.audio_captions.len() != c || manifest.visual_captions.len() != c {
        return Err(SemanticsError::Malformed {
            path: json_path.display().to_string(),
            message: "caption counts do not match class count".into(),
        });
    }

    let bin_path = dir.join("embeddings.bin");
    let bytes = fs::read(&bin_path).map_err(|e| SemanticsError::Io {
        path: bin_path.display().to_string(),
        source: e,
    })?;
    let want = 2 * c * manifest.d_text * 8;
    if bytes.len() != want {
        return Err(SemanticsError::Malformed {
            path: bin_path.display().to_string(),
            message: format!("expected {want} bytes of embeddings, found {}", bytes.len()),
        });
    }
    let mut cursor = bytes.as_slice();
    let mut read_embedding = |d_text: usize| -> Vec<f64> {
        (0..d_text)
            .map(|_| {
                let mut buf = [0u8; 8];
                cursor.read_exact(&mut buf).expect("length checked");
                f64::from_le_bytes(buf)
            })
            .collect()
    };
    let audio = manifest
        .audio_captions
        .iter()
        .map(|caption| CaptionEntry {
            caption: caption.clone(),
            embedding: read_embedding(manifest.d_text),
        })
        .collect();
    let visual = manifest
        .visual_captions
        .iter()
        .map(|caption| CaptionEntry {
            caption: caption.clone(),
            embedding: read_embedding(manifest.d_text),
        })
        .collect();
    Ok(CaptionTable {
        d_text: manifest.d_text,
        class_names: manifest.class_names,
        audio,
        visual,
    })
}
