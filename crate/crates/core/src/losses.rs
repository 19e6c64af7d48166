//! The five-term training objective.
//!
//! video-level BCE against the weak label, per-modality segment BCE against
//! pseudo labels, a pseudo-video-label BCE diagnostic, and an audio-visual
//! semantic-similarity MSE weighted elementwise by a piecewise function
//! `lambda(s; mu)` of segment-pair cosine similarity:
//!
//! ```text
//! lambda = 1                            s <= -0.2
//! lambda = e^|1-mu|                     -0.2 < s < 0
//! lambda = e^|1-mu| + (1 - e^|1-mu|)s   s >= 0
//! ```
//!
//! `lambda` sees a gradient-stopped copy of `s`: gradients reach `s` only
//! through the squared-error factor, and reach `mu` only through `lambda`.
//! Otherwise pushing `s` below the -0.2 knee would be a degenerate way to
//! shrink the weight.

use thiserror::Error;

use crate::dataset::{SegmentLabelGrid, VideoLabel, VideoSample};
use crate::model::predictor::ForwardVars;
use crate::numerics::tape::{Var, BCE_EPS};
use crate::{NumericsError, Tape, Tensor};

/// Boundary below which dissimilar pairs get weight 1.
pub const LAMBDA_KNEE: f64 = -0.2;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("label length {found} does not match class count {expected}")]
    LabelMismatch { expected: usize, found: usize },
}

/// Scalar reference form of the piecewise weight.
pub fn lambda_weight(s: f64, mu: f64) -> f64 {
    let u = (1.0 - mu).abs().exp();
    if s <= LAMBDA_KNEE {
        1.0
    } else if s < 0.0 {
        u
    } else {
        u + (1.0 - u) * s
    }
}

/// Intersection-over-union of the active class sets of every
/// (audio segment i, visual segment j) pair; 0 where the union is empty.
pub fn event_iou_grid(audio: &SegmentLabelGrid, visual: &SegmentLabelGrid) -> Tensor {
    debug_assert_eq!(audio.c, visual.c);
    let (ta, tv) = (audio.t, visual.t);
    let mut data = vec![0.0; ta * tv];
    for i in 0..ta {
        for j in 0..tv {
            let mut inter = 0usize;
            let mut union = 0usize;
            for c in 0..audio.c {
                let (a, v) = (audio.get(i, c), visual.get(j, c));
                inter += (a && v) as usize;
                union += (a || v) as usize;
            }
            if union > 0 {
                data[i * tv + j] = inter as f64 / union as f64;
            }
        }
    }
    Tensor::from_vec(&[ta, tv], data).expect("consistent dims")
}

/// Mean BCE between the video-level probabilities and the weak label.
pub fn video_loss(tape: &mut Tape, p_video: Var, y: &VideoLabel) -> Result<Var, LossError> {
    let c = tape.value(p_video).len();
    if y.bits.len() != c {
        return Err(LossError::LabelMismatch {
            expected: c,
            found: y.bits.len(),
        });
    }
    Ok(tape.bce(p_video, &y.to_tensor())?)
}

/// Sum over segments of the per-segment mean BCE against the pseudo grid.
/// Equal to `t * mean_bce` since every segment has the same class count.
pub fn segment_pseudo_loss(
    tape: &mut Tape,
    p_m: Var,
    pseudo: &SegmentLabelGrid,
) -> Result<Var, LossError> {
    let t = pseudo.t as f64;
    let mean = tape.bce(p_m, &pseudo.to_tensor())?;
    Ok(tape.scale(mean, t))
}

/// BCE between the video-level pseudo label (hard 0/1 treated as clamped
/// probabilities) and the true weak label. Constant in the model
/// parameters; it reports pseudo-label quality.
pub fn label_loss(pseudo_video: &VideoLabel, truth: &VideoLabel) -> f64 {
    debug_assert_eq!(pseudo_video.bits.len(), truth.bits.len());
    let eps = BCE_EPS;
    let mut sum = 0.0;
    for (&yp, &yt) in pseudo_video.bits.iter().zip(&truth.bits) {
        let p = (yp as f64).clamp(eps, 1.0 - eps);
        let y = yt as f64;
        sum -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    sum / truth.bits.len() as f64
}

pub struct AvssVars {
    /// Mean of `lambda * (s - r)^2` over all segment pairs.
    pub weighted: Var,
    /// Cosine-similarity grid `s`, shape `[t, t]` (differentiable).
    pub s: Var,
    /// The `lambda` grid (differentiable in `mu` only).
    pub lambda: Var,
    /// Constant event-IoU grid `r`.
    pub r: Tensor,
}

/// Build the weighted audio-visual semantic similarity loss from the
/// attention-enhanced (pre-interaction) feature pair.
pub fn avss_loss(
    tape: &mut Tape,
    audio_feats: Var,
    visual_feats: Var,
    audio_pseudo: &SegmentLabelGrid,
    visual_pseudo: &SegmentLabelGrid,
    mu: Var,
) -> Result<AvssVars, LossError> {
    avss_loss_with_mask_source(
        tape,
        audio_feats,
        visual_feats,
        audio_pseudo,
        visual_pseudo,
        mu,
        None,
    )
}

/// As [`avss_loss`], but with the gradient-stopped similarity values that
/// feed the `lambda` branches pinned to `mask_source` instead of the live
/// `s`. Finite-difference checks need this: the implemented gradient is the
/// derivative of the objective with `lambda`'s sample weights held constant,
/// so the differenced function must hold them constant too.
pub fn avss_loss_with_mask_source(
    tape: &mut Tape,
    audio_feats: Var,
    visual_feats: Var,
    audio_pseudo: &SegmentLabelGrid,
    visual_pseudo: &SegmentLabelGrid,
    mu: Var,
    mask_source: Option<&Tensor>,
) -> Result<AvssVars, LossError> {
    let s = tape.cosine_rows(audio_feats, visual_feats)?;
    let r = event_iou_grid(audio_pseudo, visual_pseudo);
    let r_leaf = tape.leaf(r.clone());
    let diff = tape.sub(s, r_leaf)?;
    let sq = tape.mul(diff, diff)?;

    // branch masks from a gradient-stopped copy of s:
    // lambda = u * a + b with u = e^|1-mu|
    let s_frozen = mask_source.cloned().unwrap_or_else(|| tape.value(s).clone());
    let mut a = Tensor::zeros(s_frozen.shape());
    let mut b = Tensor::zeros(s_frozen.shape());
    for ((&sv, av), bv) in s_frozen
        .data()
        .iter()
        .zip(a.data_mut())
        .zip(b.data_mut())
    {
        if sv <= LAMBDA_KNEE {
            *bv = 1.0;
        } else if sv < 0.0 {
            *av = 1.0;
        } else {
            *av = 1.0 - sv;
            *bv = sv;
        }
    }
    let one = tape.leaf(Tensor::scalar(1.0));
    let one_minus_mu = tape.sub(one, mu)?;
    let gap = tape.abs(one_minus_mu);
    let u = tape.exp(gap);
    let a_leaf = tape.leaf(a);
    let b_leaf = tape.leaf(b);
    let ua = tape.mul_scalar(a_leaf, u)?;
    let lambda = tape.add(ua, b_leaf)?;

    let weighted_grid = tape.mul(lambda, sq)?;
    let weighted = tape.mean_all(weighted_grid);
    Ok(AvssVars {
        weighted,
        s,
        lambda,
        r,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct LossOptions {
    /// Include the (parameter-constant) pseudo-label diagnostic term in the
    /// optimized objective. The reported breakdown always carries it.
    pub include_label_loss: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            include_label_loss: true,
        }
    }
}

/// Tape handles for the loss terms of one sample.
pub struct TotalLossVars {
    pub l_video: Var,
    pub l_audio_segments: Var,
    pub l_visual_segments: Var,
    pub avss: AvssVars,
    pub l_label: f64,
    /// The scalar node training minimizes.
    pub optimized: Var,
}

/// Wire the full objective for one sample from its forward vars.
pub fn total_loss(
    tape: &mut Tape,
    fwd: &ForwardVars,
    sample: &VideoSample,
    mu: Var,
    options: LossOptions,
) -> Result<TotalLossVars, LossError> {
    total_loss_with_mask_source(tape, fwd, sample, mu, options, None)
}

/// See [`avss_loss_with_mask_source`] for the role of `mask_source`.
pub fn total_loss_with_mask_source(
    tape: &mut Tape,
    fwd: &ForwardVars,
    sample: &VideoSample,
    mu: Var,
    options: LossOptions,
    mask_source: Option<&Tensor>,
) -> Result<TotalLossVars, LossError> {
    let l_video = video_loss(tape, fwd.p_video, &sample.weak_label)?;
    let l_audio_segments = segment_pseudo_loss(tape, fwd.p_audio, &sample.audio_pseudo)?;
    let l_visual_segments = segment_pseudo_loss(tape, fwd.p_visual, &sample.visual_pseudo)?;
    let avss = avss_loss_with_mask_source(
        tape,
        fwd.audio_tsam,
        fwd.visual_tsam,
        &sample.audio_pseudo,
        &sample.visual_pseudo,
        mu,
        mask_source,
    )?;
    let l_label = label_loss(&sample.pseudo_video_label(), &sample.weak_label);

    let mut optimized = tape.add(l_video, l_audio_segments)?;
    optimized = tape.add(optimized, l_visual_segments)?;
    optimized = tape.add(optimized, avss.weighted)?;
    if options.include_label_loss {
        let label_leaf = tape.leaf(Tensor::scalar(l_label));
        optimized = tape.add(optimized, label_leaf)?;
    }
    Ok(TotalLossVars {
        l_video,
        l_audio_segments,
        l_visual_segments,
        avss,
        l_label,
        optimized,
    })
}

/// Evaluated loss terms of one sample, individually inspectable.
#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub l_video: f64,
    pub l_a_video: f64,
    pub l_v_video: f64,
    pub l_label: f64,
    pub l_avss_weighted: f64,
    /// Always the sum of all five terms, independent of `LossOptions`.
    pub total: f64,
    pub lambda_grid: Tensor,
    pub s_grid: Tensor,
    pub r_grid: Tensor,
}

impl TotalLossVars {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let l_video = tape.value(self.l_video).item();
        let l_a_video = tape.value(self.l_audio_segments).item();
        let l_v_video = tape.value(self.l_visual_segments).item();
        let l_avss_weighted = tape.value(self.avss.weighted).item();
        LossBreakdown {
            l_video,
            l_a_video,
            l_v_video,
            l_label: self.l_label,
            l_avss_weighted,
            total: l_video + l_a_video + l_v_video + self.l_label + l_avss_weighted,
            lambda_grid: tape.value(self.avss.lambda).clone(),
            s_grid: tape.value(self.avss.s).clone(),
            r_grid: self.avss.r.clone(),
        }
    }
}
