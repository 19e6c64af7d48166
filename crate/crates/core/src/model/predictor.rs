//! Full forward pass: features -> attention -> cross-modal interaction ->
//! semantic fusion -> per-modality heads.
//!
//! Per modality, a linear head plus sigmoid yields per-segment event
//! probabilities. The audio-visual probability is their product (an
//! audio-visual event needs both modalities), and the video-level
//! probability is the max over segments and modalities.

use crate::dataset::{SegmentLabelGrid, VideoSample};
use crate::numerics::tape::Var;
use crate::{NumericsError, Tape, Tensor};

use super::attention::apply_tsam;
use super::interaction::cmim_forward;
use super::semantics::{fuse_semantics, semantic_features, CaptionTable, SemanticsError};
use super::{linear, BoundParams, Modality, ModelParameters};

/// Decision threshold used when binarizing probabilities (>= rule).
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Scale cross-attention logits by 1/sqrt(d) (off by default).
    pub softmax_scale: bool,
}

#[derive(Debug, Error)]
pub enum ForwardError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Semantics(#[from] SemanticsError),
}
use thiserror::Error;

/// Tape handles for everything downstream consumers need: probabilities for
/// prediction, and each feature stage for the losses.
pub struct ForwardVars {
    /// Attention-enhanced features, before cross-modal mixing.
    pub audio_tsam: Var,
    pub visual_tsam: Var,
    /// Interaction outputs, before semantic fusion.
    pub audio_cmim: Var,
    pub visual_cmim: Var,
    /// Semantically fused features feeding the heads.
    pub audio_fused: Var,
    pub visual_fused: Var,
    /// Per-segment probabilities, shape `[t, c]`.
    pub p_audio: Var,
    pub p_visual: Var,
    pub p_av: Var,
    /// Video-level probabilities, shape `[c]`.
    pub p_video: Var,
}

/// Evaluated probabilities of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub p_audio: Tensor,
    pub p_visual: Tensor,
    pub p_av: Tensor,
    pub p_video: Tensor,
}

/// Build the forward graph for one sample on `tape`.
pub fn build_forward(
    tape: &mut Tape,
    sample: &VideoSample,
    table: &CaptionTable,
    params: &ModelParameters,
    bound: &BoundParams,
    options: ForwardOptions,
) -> Result<ForwardVars, ForwardError> {
    let fa = tape.leaf(sample.audio_features.to_tensor());
    let fv = tape.leaf(sample.visual_features.to_tensor());

    let audio_tsam = apply_tsam(tape, fa, params.ids.tsam_audio, bound)?.enhanced;
    let visual_tsam = apply_tsam(tape, fv, params.ids.tsam_visual, bound)?.enhanced;

    let cmim = cmim_forward(
        tape,
        audio_tsam,
        visual_tsam,
        params.ids.cmim,
        bound,
        options.softmax_scale,
    )?;

    let fp_audio = tape.leaf(semantic_features(
        &sample.audio_pseudo,
        table,
        Modality::Audio,
    )?);
    let fp_visual = tape.leaf(semantic_features(
        &sample.visual_pseudo,
        table,
        Modality::Visual,
    )?);
    let audio_fused = fuse_semantics(
        tape,
        cmim.audio,
        fp_audio,
        params.ids.plsim.audio_scale,
        params.ids.plsim.audio_bias,
        bound,
    )?;
    let visual_fused = fuse_semantics(
        tape,
        cmim.visual,
        fp_visual,
        params.ids.plsim.visual_scale,
        params.ids.plsim.visual_bias,
        bound,
    )?;

    let logits_a = linear(tape, audio_fused, params.ids.head_audio, bound)?;
    let logits_v = linear(tape, visual_fused, params.ids.head_visual, bound)?;
    let p_audio = tape.sigmoid(logits_a);
    let p_visual = tape.sigmoid(logits_v);
    let p_av = tape.mul(p_audio, p_visual)?;
    let p_max = tape.max_elem(p_audio, p_visual)?;
    let p_video = tape.pool_max(p_max, 0)?;

    Ok(ForwardVars {
        audio_tsam,
        visual_tsam,
        audio_cmim: cmim.audio,
        visual_cmim: cmim.visual,
        audio_fused,
        visual_fused,
        p_audio,
        p_visual,
        p_av,
        p_video,
    })
}

impl ForwardVars {
    pub fn prediction(&self, tape: &Tape) -> Prediction {
        Prediction {
            p_audio: tape.value(self.p_audio).clone(),
            p_visual: tape.value(self.p_visual).clone(),
            p_av: tape.value(self.p_av).clone(),
            p_video: tape.value(self.p_video).clone(),
        }
    }
}

/// One-off inference: run the forward pass on a private tape.
pub fn forward(
    sample: &VideoSample,
    table: &CaptionTable,
    params: &ModelParameters,
    options: ForwardOptions,
) -> Result<Prediction, ForwardError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let vars = build_forward(&mut tape, sample, table, params, &bound, options)?;
    Ok(vars.prediction(&tape))
}

/// Binarized event grids for one prediction.
#[derive(Clone, Debug)]
pub struct EventGrids {
    pub audio: SegmentLabelGrid,
    pub visual: SegmentLabelGrid,
    pub audio_visual: SegmentLabelGrid,
}

/// Threshold the per-segment probabilities; a probability exactly at the
/// threshold counts as positive.
pub fn predict_events(pred: &Prediction, threshold: f64) -> EventGrids {
    let binarize = |p: &Tensor| -> SegmentLabelGrid {
        let (t, c) = (p.rows(), p.cols());
        let mut grid = SegmentLabelGrid::zeros(t, c);
        for i in 0..t {
            for j in 0..c {
                grid.set(i, j, p.at2(i, j) >= threshold);
            }
        }
        grid
    };
    EventGrids {
        audio: binarize(&pred.p_audio),
        visual: binarize(&pred.p_visual),
        audio_visual: binarize(&pred.p_av),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, GenConfig};
    use crate::model::semantics::build_fixture_table;
    use crate::model::{ModelDims, ModelParameters};

    fn fixture() -> (VideoSample, CaptionTable, ModelParameters) {
        let cfg = GenConfig {
            num_videos: 1,
            t: 5,
            d: 6,
            c: 3,
            events_per_video: (1, 2),
            alignment_rate: 0.7,
            pseudo_corruption_rate: 0.1,
            feature_noise_sigma: 0.1,
            seed: 33,
        };
        let sample = generate(&cfg).unwrap().remove(0);
        let names = crate::dataset::default_class_names(3);
        let table = build_fixture_table(&names, 6, 33).unwrap();
        let params = ModelParameters::init(ModelDims::new(5, 6, 3, 6, 2), 33);
        (sample, table, params)
    }

    #[test]
    fn zero_heads_give_half_quarter_half() {
        let (sample, table, mut params) = fixture();
        for ids in [params.ids.head_audio, params.ids.head_visual] {
            for id in [ids.w, ids.b] {
                let shape = params.set.value(id).shape().to_vec();
                *params.set.value_mut(id) = Tensor::zeros(&shape);
            }
        }
        let pred = forward(&sample, &table, &params, ForwardOptions::default()).unwrap();
        assert!(pred.p_audio.data().iter().all(|&p| p == 0.5));
        assert!(pred.p_visual.data().iter().all(|&p| p == 0.5));
        assert!(pred.p_av.data().iter().all(|&p| p == 0.25));
        assert!(pred.p_video.data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn probability_bounds_and_av_dominance() {
        let (sample, table, params) = fixture();
        let pred = forward(&sample, &table, &params, ForwardOptions::default()).unwrap();
        let (t, c) = (5, 3);
        for i in 0..t {
            for j in 0..c {
                let (pa, pv, pav) = (
                    pred.p_audio.at2(i, j),
                    pred.p_visual.at2(i, j),
                    pred.p_av.at2(i, j),
                );
                assert!((0.0..=1.0).contains(&pa) && (0.0..=1.0).contains(&pv));
                assert!(pav <= pa && pav <= pv);
                assert!(pred.p_video.data()[j] >= pa && pred.p_video.data()[j] >= pv);
            }
        }
    }

    /// Brute-force max over the 2T per-class values.
    #[test]
    fn video_probability_matches_exhaustive_max() {
        let (sample, table, params) = fixture();
        let pred = forward(&sample, &table, &params, ForwardOptions::default()).unwrap();
        for c in 0..3 {
            let mut best = f64::NEG_INFINITY;
            for t in 0..5 {
                best = best.max(pred.p_audio.at2(t, c)).max(pred.p_visual.at2(t, c));
            }
            assert_eq!(pred.p_video.data()[c], best);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let (sample, table, params) = fixture();
        let a = forward(&sample, &table, &params, ForwardOptions::default()).unwrap();
        let b = forward(&sample, &table, &params, ForwardOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn threshold_tie_counts_as_positive() {
        let pred = Prediction {
            p_audio: Tensor::from_vec(&[1, 3], vec![0.4999, 0.5, 0.5001]).unwrap(),
            p_visual: Tensor::from_vec(&[1, 3], vec![0.0, 0.0, 0.0]).unwrap(),
            p_av: Tensor::from_vec(&[1, 3], vec![0.25, 0.25, 0.25]).unwrap(),
            p_video: Tensor::from_vec(&[3], vec![0.5, 0.5, 0.5]).unwrap(),
        };
        let grids = predict_events(&pred, DEFAULT_THRESHOLD);
        assert!(!grids.audio.get(0, 0));
        assert!(grids.audio.get(0, 1), "0.5 must binarize to 1");
        assert!(grids.audio.get(0, 2));
        assert!(!grids.audio_visual.any(), "all-0.25 av grid stays empty");
    }
}
