//! Segment-level and event-level F-scores for audio, visual, audio-visual,
//! Type@AV, and Event@AV.
//!
//! Conventions, kept in one place so any deviation from the reference
//! toolkit is localized:
//! - segment level: micro F over all `t x c` cells of a video;
//! - event level: maximal runs of positive segments per class, greedily
//!   matched one-to-one in descending temporal-IoU order (ties broken by
//!   prediction then ground-truth index), a match requiring IoU >= 0.5;
//! - both-empty scores 1 (a video with no events of a type is correctly
//!   parsed);
//! - audio-visual ground truth is the elementwise AND of the two
//!   modalities' grids;
//! - Event@AV pools audio and visual events jointly, with the modality tag
//!   part of the match identity;
//! - every reported score is the mean over videos of per-video scores.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{SegmentLabelGrid, VideoSample};
use crate::model::predictor::{predict_events, Prediction};

pub const EVENT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("video {id}: prediction shape ({pt}, {pc}) does not match labels ({t}, {c})")]
    ShapeMismatch {
        id: String,
        pt: usize,
        pc: usize,
        t: usize,
        c: usize,
    },
}

/// Which stream an event belongs to; part of its identity when matching.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EventTrack {
    Audio,
    Visual,
    AudioVisual,
}

/// A maximal run of positive segments for one class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EventInterval {
    pub class: usize,
    /// Inclusive start segment.
    pub start: usize,
    /// Exclusive end segment.
    pub end: usize,
    pub track: EventTrack,
}

impl EventInterval {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    pub fn temporal_iou(&self, other: &EventInterval) -> f64 {
        let inter = self.end.min(other.end).saturating_sub(self.start.max(other.start));
        let union = self.len() + other.len() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Per class, maximal runs of consecutive positive segments, sorted by
/// (class, start).
pub fn extract_events(grid: &SegmentLabelGrid, track: EventTrack) -> Vec<EventInterval> {
    let mut events = Vec::new();
    for class in 0..grid.c {
        let mut start = None;
        for t in 0..grid.t {
            match (grid.get(t, class), start) {
                (true, None) => start = Some(t),
                (false, Some(s)) => {
                    events.push(EventInterval {
                        class,
                        start: s,
                        end: t,
                        track,
                    });
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            events.push(EventInterval {
                class,
                start: s,
                end: grid.t,
                track,
            });
        }
    }
    events
}

/// Inverse of [`extract_events`] for interval lists within bounds.
pub fn rasterize_events(events: &[EventInterval], t: usize, c: usize) -> SegmentLabelGrid {
    let mut grid = SegmentLabelGrid::zeros(t, c);
    for e in events {
        for seg in e.start..e.end {
            grid.set(seg, e.class, true);
        }
    }
    grid
}

/// Micro F-score over all cells of one video; 1 when both grids are empty.
pub fn segment_f1(pred: &SegmentLabelGrid, gt: &SegmentLabelGrid) -> f64 {
    debug_assert_eq!((pred.t, pred.c), (gt.t, gt.c));
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p != 0, g != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    f_from_counts(tp, fp, fn_)
}

fn f_from_counts(tp: u64, fp: u64, fn_: u64) -> f64 {
    if tp + fp + fn_ == 0 {
        return 1.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

/// Event-level F-score: greedy one-to-one matching in descending IoU order,
/// a match requiring the same (class, track) and IoU >= `iou_threshold`.
/// 1 when both lists are empty.
pub fn event_f1(
    pred: &[EventInterval],
    gt: &[EventInterval],
    iou_threshold: f64,
) -> f64 {
    if pred.is_empty() && gt.is_empty() {
        return 1.0;
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (pi, p) in pred.iter().enumerate() {
        for (gi, g) in gt.iter().enumerate() {
            if p.class == g.class && p.track == g.track {
                let iou = p.temporal_iou(g);
                if iou >= iou_threshold {
                    pairs.push((iou, pi, gi));
                }
            }
        }
    }
    pairs.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut pred_used = vec![false; pred.len()];
    let mut gt_used = vec![false; gt.len()];
    let mut matched = 0u64;
    for (_, pi, gi) in pairs {
        if !pred_used[pi] && !gt_used[gi] {
            pred_used[pi] = true;
            gt_used[gi] = true;
            matched += 1;
        }
    }
    let fp = pred.len() as u64 - matched;
    let fn_ = gt.len() as u64 - matched;
    f_from_counts(matched, fp, fn_)
}

/// The ten F-scores. Field names double as the JSON schema.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seg_a: f64,
    pub seg_v: f64,
    pub seg_av: f64,
    pub seg_type: f64,
    pub seg_event: f64,
    pub evt_a: f64,
    pub evt_v: f64,
    pub evt_av: f64,
    pub evt_type: f64,
    pub evt_event: f64,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str =
        "seg_a,seg_v,seg_av,seg_type,seg_event,evt_a,evt_v,evt_av,evt_type,evt_event";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.seg_a,
            self.seg_v,
            self.seg_av,
            self.seg_type,
            self.seg_event,
            self.evt_a,
            self.evt_v,
            self.evt_av,
            self.evt_type,
            self.evt_event
        )
    }

    pub fn values(&self) -> [f64; 10] {
        [
            self.seg_a, self.seg_v, self.seg_av, self.seg_type, self.seg_event, self.evt_a,
            self.evt_v, self.evt_av, self.evt_type, self.evt_event,
        ]
    }
}

pub(crate) fn and_grids(a: &SegmentLabelGrid, b: &SegmentLabelGrid) -> SegmentLabelGrid {
    let mut out = SegmentLabelGrid::zeros(a.t, a.c);
    for ((o, &x), &y) in out.data.iter_mut().zip(&a.data).zip(&b.data) {
        *o = (x != 0 && y != 0) as u8;
    }
    out
}

fn stack_grids(a: &SegmentLabelGrid, b: &SegmentLabelGrid) -> SegmentLabelGrid {
    let mut data = a.data.clone();
    data.extend_from_slice(&b.data);
    SegmentLabelGrid {
        t: a.t + b.t,
        c: a.c,
        data,
    }
}

/// Per-video scores of every metric family.
#[derive(Clone, Copy, Debug)]
struct VideoScores {
    seg_a: f64,
    seg_v: f64,
    seg_av: f64,
    seg_event: f64,
    evt_a: f64,
    evt_v: f64,
    evt_av: f64,
    evt_event: f64,
}

fn score_video(pred: &Prediction, sample: &VideoSample, threshold: f64) -> VideoScores {
    let grids = predict_events(pred, threshold);
    let av_gt = and_grids(&sample.audio_gt, &sample.visual_gt);

    let seg_a = segment_f1(&grids.audio, &sample.audio_gt);
    let seg_v = segment_f1(&grids.visual, &sample.visual_gt);
    let seg_av = segment_f1(&grids.audio_visual, &av_gt);
    let seg_event = segment_f1(
        &stack_grids(&grids.audio, &grids.visual),
        &stack_grids(&sample.audio_gt, &sample.visual_gt),
    );

    let pred_a = extract_events(&grids.audio, EventTrack::Audio);
    let pred_v = extract_events(&grids.visual, EventTrack::Visual);
    let pred_av = extract_events(&grids.audio_visual, EventTrack::AudioVisual);
    let gt_a = extract_events(&sample.audio_gt, EventTrack::Audio);
    let gt_v = extract_events(&sample.visual_gt, EventTrack::Visual);
    let gt_av = extract_events(&av_gt, EventTrack::AudioVisual);

    let evt_a = event_f1(&pred_a, &gt_a, EVENT_IOU_THRESHOLD);
    let evt_v = event_f1(&pred_v, &gt_v, EVENT_IOU_THRESHOLD);
    let evt_av = event_f1(&pred_av, &gt_av, EVENT_IOU_THRESHOLD);

    let joint_pred: Vec<EventInterval> = pred_a.iter().chain(&pred_v).copied().collect();
    let joint_gt: Vec<EventInterval> = gt_a.iter().chain(&gt_v).copied().collect();
    let evt_event = event_f1(&joint_pred, &joint_gt, EVENT_IOU_THRESHOLD);

    VideoScores {
        seg_a,
        seg_v,
        seg_av,
        seg_event,
        evt_a,
        evt_v,
        evt_av,
        evt_event,
    }
}

/// Score a corpus of (prediction, sample) pairs.
pub fn evaluate<'a, I>(corpus: I, threshold: f64) -> Result<MetricsReport, MetricsError>
where
    I: IntoIterator<Item = (&'a Prediction, &'a VideoSample)>,
{
    let mut n = 0usize;
    let mut sums = VideoScores {
        seg_a: 0.0,
        seg_v: 0.0,
        seg_av: 0.0,
        seg_event: 0.0,
        evt_a: 0.0,
        evt_v: 0.0,
        evt_av: 0.0,
        evt_event: 0.0,
    };
    for (pred, sample) in corpus {
        let (pt, pc) = (pred.p_audio.rows(), pred.p_audio.cols());
        if pt != sample.t() || pc != sample.num_classes() {
            return Err(MetricsError::ShapeMismatch {
                id: sample.id.clone(),
                pt,
                pc,
                t: sample.t(),
                c: sample.num_classes(),
            });
        }
        let scores = score_video(pred, sample, threshold);
        sums.seg_a += scores.seg_a;
        sums.seg_v += scores.seg_v;
        sums.seg_av += scores.seg_av;
        sums.seg_event += scores.seg_event;
        sums.evt_a += scores.evt_a;
        sums.evt_v += scores.evt_v;
        sums.evt_av += scores.evt_av;
        sums.evt_event += scores.evt_event;
        n += 1;
    }
    if n == 0 {
        return Err(MetricsError::EmptyCorpus);
    }
    let inv = 1.0 / n as f64;
    let (seg_a, seg_v, seg_av) = (sums.seg_a * inv, sums.seg_v * inv, sums.seg_av * inv);
    let (evt_a, evt_v, evt_av) = (sums.evt_a * inv, sums.evt_v * inv, sums.evt_av * inv);
    Ok(MetricsReport {
        seg_a,
        seg_v,
        seg_av,
        seg_type: (seg_a + seg_v + seg_av) / 3.0,
        seg_event: sums.seg_event * inv,
        evt_a,
        evt_v,
        evt_av,
        evt_type: (evt_a + evt_v + evt_av) / 3.0,
        evt_event: sums.evt_event * inv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, GenConfig, VideoLabel};
    use crate::Tensor;

    fn grid_from(rows: &[&[u8]]) -> SegmentLabelGrid {
        let t = rows.len();
        let c = rows[0].len();
        let mut g = SegmentLabelGrid::zeros(t, c);
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                g.set(i, j, v != 0);
            }
        }
        g
    }

    #[test]
    fn extract_events_examples() {
        let empty = SegmentLabelGrid::zeros(4, 2);
        assert!(extract_events(&empty, EventTrack::Audio).is_empty());

        // class 0 positive at segments {1,2,3, 7}
        let mut g = SegmentLabelGrid::zeros(8, 1);
        for t in [1, 2, 3, 7] {
            g.set(t, 0, true);
        }
        let events = extract_events(&g, EventTrack::Audio);
        assert_eq!(events.len(), 2);
        assert_eq!((events[0].start, events[0].end), (1, 4));
        assert_eq!((events[1].start, events[1].end), (7, 8));

        let mut full = SegmentLabelGrid::zeros(10, 1);
        for t in 0..10 {
            full.set(t, 0, true);
        }
        let events = extract_events(&full, EventTrack::Visual);
        assert_eq!(events.len(), 1);
        assert_eq!((events[0].start, events[0].end), (0, 10));
    }

    #[test]
    fn extract_rasterize_round_trip() {
        let g = grid_from(&[
            &[1, 0, 1],
            &[1, 1, 0],
            &[0, 1, 0],
            &[1, 0, 0],
        ]);
        let events = extract_events(&g, EventTrack::Audio);
        let back = rasterize_events(&events, 4, 3);
        assert_eq!(back, g);
        // and list-level identity on the normalized list
        let again = extract_events(&back, EventTrack::Audio);
        assert_eq!(again, events);
    }

    #[test]
    fn segment_f1_examples() {
        let gt = grid_from(&[&[1, 0], &[1, 0]]);
        assert_eq!(segment_f1(&gt, &gt), 1.0);

        let disjoint = grid_from(&[&[0, 1], &[0, 1]]);
        assert_eq!(segment_f1(&disjoint, &gt), 0.0);

        // TP = 2, FP = 1, FN = 1 -> 2/3
        let pred = grid_from(&[&[1, 1], &[1, 0]]);
        let gt2 = grid_from(&[&[1, 0], &[1, 1]]);
        assert!((segment_f1(&pred, &gt2) - 2.0 / 3.0).abs() < 1e-15);

        let empty = SegmentLabelGrid::zeros(2, 2);
        assert_eq!(segment_f1(&empty, &empty), 1.0);
    }

    #[test]
    fn segment_f1_flipping_a_correct_cell_never_helps() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(31);
        for _ in 0..200 {
            let (t, c) = (rng.gen_range(1..5), rng.gen_range(1..4));
            let mut pred = SegmentLabelGrid::zeros(t, c);
            let mut gt = SegmentLabelGrid::zeros(t, c);
            for cell in gt.data.iter_mut() {
                *cell = rng.gen_bool(0.5) as u8;
            }
            for (p, &g) in pred.data.iter_mut().zip(&gt.data) {
                *p = if rng.gen_bool(0.7) { g } else { 1 - g };
            }
            let correct: Vec<usize> = pred
                .data
                .iter()
                .zip(&gt.data)
                .enumerate()
                .filter(|(_, (p, g))| p == g)
                .map(|(i, _)| i)
                .collect();
            if correct.is_empty() {
                continue;
            }
            let before = segment_f1(&pred, &gt);
            let idx = correct[rng.gen_range(0..correct.len())];
            let mut flipped = pred.clone();
            flipped.data[idx] ^= 1;
            let after = segment_f1(&flipped, &gt);
            assert!(after <= before + 1e-15, "flip improved F: {before} -> {after}");
        }
    }

    #[test]
    fn event_f1_examples() {
        let ev = |class, start, end| EventInterval {
            class,
            start,
            end,
            track: EventTrack::Audio,
        };
        assert_eq!(event_f1(&[ev(0, 1, 4)], &[ev(0, 1, 4)], 0.5), 1.0);

        // IoU exactly 0.5 matches under the >= convention
        let pred = [ev(0, 0, 5)];
        let gt = [ev(0, 0, 10)];
        assert_eq!(event_f1(&pred, &gt, 0.5), 1.0);

        assert_eq!(event_f1(&[], &[ev(1, 2, 5)], 0.5), 0.0);
        assert_eq!(event_f1(&[], &[], 0.5), 1.0);
    }

    #[test]
    fn event_matching_is_one_to_one() {
        let ev = |start, end| EventInterval {
            class: 0,
            start,
            end,
            track: EventTrack::Audio,
        };
        // two predictions covering one gt: only one match allowed
        let pred = [ev(0, 4), ev(1, 5)];
        let gt = [ev(0, 5)];
        // matched = 1, fp = 1, fn = 0 -> 2/3
        assert!((event_f1(&pred, &gt, 0.5) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn different_class_or_track_never_matches() {
        let a = EventInterval {
            class: 0,
            start: 0,
            end: 4,
            track: EventTrack::Audio,
        };
        let mut b = a;
        b.class = 1;
        assert_eq!(event_f1(&[a], &[b], 0.5), 0.0);
        let mut c = a;
        c.track = EventTrack::Visual;
        assert_eq!(event_f1(&[a], &[c], 0.5), 0.0);
    }

    fn perfect_prediction(sample: &VideoSample) -> Prediction {
        let to_probs = |g: &SegmentLabelGrid| -> Tensor { g.to_tensor() };
        let p_audio = to_probs(&sample.audio_gt);
        let p_visual = to_probs(&sample.visual_gt);
        let (t, c) = (sample.t(), sample.num_classes());
        let mut p_av = Tensor::zeros(&[t, c]);
        for i in 0..t {
            for j in 0..c {
                p_av.set2(i, j, p_audio.at2(i, j) * p_visual.at2(i, j));
            }
        }
        let mut p_video = Tensor::zeros(&[c]);
        for j in 0..c {
            let mut best: f64 = 0.0;
            for i in 0..t {
                best = best.max(p_audio.at2(i, j)).max(p_visual.at2(i, j));
            }
            p_video.data_mut()[j] = best;
        }
        Prediction {
            p_audio,
            p_visual,
            p_av,
            p_video,
        }
    }

    fn corpus() -> Vec<VideoSample> {
        generate(&GenConfig {
            num_videos: 5,
            t: 6,
            d: 4,
            c: 3,
            events_per_video: (1, 3),
            alignment_rate: 0.5,
            pseudo_corruption_rate: 0.0,
            feature_noise_sigma: 0.1,
            seed: 77,
        })
        .unwrap()
    }

    #[test]
    fn perfect_predictor_scores_one_everywhere() {
        let samples = corpus();
        let preds: Vec<Prediction> = samples.iter().map(perfect_prediction).collect();
        let report = evaluate(preds.iter().zip(&samples), 0.5).unwrap();
        for v in report.values() {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn type_at_av_is_the_mean_of_the_three() {
        let samples = corpus();
        // imperfect predictions: threshold the audio grid against ground
        // truth shifted by one segment
        let preds: Vec<Prediction> = samples
            .iter()
            .map(|s| {
                let mut p = perfect_prediction(s);
                let (t, c) = (s.t(), s.num_classes());
                let mut shifted = Tensor::zeros(&[t, c]);
                for i in 1..t {
                    for j in 0..c {
                        shifted.set2(i, j, p.p_audio.at2(i - 1, j));
                    }
                }
                p.p_audio = shifted;
                p
            })
            .collect();
        let report = evaluate(preds.iter().zip(&samples), 0.5).unwrap();
        assert!((report.seg_type - (report.seg_a + report.seg_v + report.seg_av) / 3.0).abs() < 1e-12);
        assert!((report.evt_type - (report.evt_a + report.evt_v + report.evt_av) / 3.0).abs() < 1e-12);
        for v in report.values() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn evaluate_is_order_invariant() {
        let samples = corpus();
        let preds: Vec<Prediction> = samples
            .iter()
            .map(|s| {
                let mut p = perfect_prediction(s);
                // degrade a little so scores are not all 1
                p.p_visual = Tensor::full(&[s.t(), s.num_classes()], 0.6);
                p
            })
            .collect();
        let fwd = evaluate(preds.iter().zip(&samples), 0.5).unwrap();
        let rev = evaluate(preds.iter().rev().zip(samples.iter().rev()), 0.5).unwrap();
        assert_eq!(fwd, rev);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let empty: Vec<(&Prediction, &VideoSample)> = Vec::new();
        assert!(matches!(
            evaluate(empty, 0.5),
            Err(MetricsError::EmptyCorpus)
        ));
    }

    #[test]
    fn shape_mismatch_is_reported_with_id() {
        let samples = corpus();
        let mut pred = perfect_prediction(&samples[0]);
        pred.p_audio = Tensor::zeros(&[2, 2]);
        match evaluate([(&pred, &samples[0])], 0.5) {
            Err(MetricsError::ShapeMismatch { id, .. }) => assert_eq!(id, samples[0].id),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn report_serializes_with_the_contract_field_names() {
        let samples = corpus();
        let preds: Vec<Prediction> = samples.iter().map(perfect_prediction).collect();
        let report = evaluate(preds.iter().zip(&samples), 0.5).unwrap();
        let json = serde_json::to_value(report).unwrap();
        for key in [
            "seg_a", "seg_v", "seg_av", "seg_type", "seg_event", "evt_a", "evt_v", "evt_av",
            "evt_type", "evt_event",
        ] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        assert_eq!(MetricsReport::CSV_HEADER.split(',').count(), 10);
        assert_eq!(report.csv_row().split(',').count(), 10);
        let _unused = VideoLabel::zeros(1);
    }
}
