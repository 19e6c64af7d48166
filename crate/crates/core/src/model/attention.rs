//! Temporal-spatial attention over one modality's feature sequence.
//!
//! Temporal attention pools each segment's features down to a scalar (mean
//! and max variants), pushes both pooled vectors through a shared two-layer
//! MLP, sums, and squashes to per-segment weights. Spatial attention pools
//! across segments, concatenates the mean- and max-pooled vectors, and
//! projects them to per-feature weights. Both weight vectors multiply the
//! input sequentially, temporal first.

use crate::numerics::tape::Var;
use crate::{NumericsError, Tape};

use super::{mlp2, BoundParams, TsamIds};

pub struct TsamOut {
    /// `W[t] * S[k] * f[t,k]`
    pub enhanced: Var,
    /// Per-segment weights `W`, shape `[t]`, all in (0, 1).
    pub temporal: Var,
    /// Per-feature weights `S`, shape `[d]`, all in (0, 1).
    pub spatial: Var,
}

/// Per-segment attention weights `W[t] = sigmoid(MLP(avg) + MLP(max))`,
/// with the MLP shared between the two pooled vectors.
pub fn temporal_attention(
    tape: &mut Tape,
    f: Var,
    ids: TsamIds,
    bound: &BoundParams,
) -> Result<Var, NumericsError> {
    let t = tape.value(f).rows();
    let avg = tape.pool_mean(f, 1)?;
    let mx = tape.pool_max(f, 1)?;
    let avg = tape.reshape(avg, &[1, t])?;
    let mx = tape.reshape(mx, &[1, t])?;
    let a = mlp2(tape, avg, ids.temporal, bound)?;
    let m = mlp2(tape, mx, ids.temporal, bound)?;
    let sum = tape.add(a, m)?;
    let w = tape.sigmoid(sum);
    tape.reshape(w, &[t])
}

/// Per-feature weights `S[k] = sigmoid([avg; max] · w + b)` where the pools
/// run along the segment axis.
pub fn spatial_attention(
    tape: &mut Tape,
    f: Var,
    ids: TsamIds,
    bound: &BoundParams,
) -> Result<Var, NumericsError> {
    let d = tape.value(f).cols();
    let avg = tape.pool_mean(f, 0)?;
    let mx = tape.pool_max(f, 0)?;
    let cat = tape.concat(avg, mx)?;
    let cat = tape.reshape(cat, &[1, 2 * d])?;
    let proj = tape.matmul(cat, bound.var(ids.spatial.w))?;
    let proj = tape.add_row(proj, bound.var(ids.spatial.b))?;
    let s = tape.sigmoid(proj);
    tape.reshape(s, &[d])
}

/// Apply both attention stages sequentially: temporal weights broadcast
/// across features, then spatial weights broadcast across segments.
pub fn apply_tsam(
    tape: &mut Tape,
    f: Var,
    ids: TsamIds,
    bound: &BoundParams,
) -> Result<TsamOut, NumericsError> {
    let temporal = temporal_attention(tape, f, ids, bound)?;
    let spatial = spatial_attention(tape, f, ids, bound)?;
    let weighted = tape.mul_col(f, temporal)?;
    let enhanced = tape.mul_row(weighted, spatial)?;
    Ok(TsamOut {
        enhanced,
        temporal,
        spatial,
    })
}
