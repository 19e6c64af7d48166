//! Adaptive cross-modal interaction.
//!
//! Softmax cross-attention between the two feature sequences, gated by four
//! trainable scalars, with a doubled residual: with all-zero alpha gates the
//! outputs are exactly twice the inputs. No query/key/value projections and,
//! by default, no 1/sqrt(d) attention scaling; a flag enables the scaling
//! for experiments.

use crate::numerics::tape::Var;
use crate::{NumericsError, Tape};

use super::{BoundParams, CmimIds};

pub struct CmimOut {
    pub audio: Var,
    pub visual: Var,
}

/// `f_ac = fa + a2 * softmax(fa·fvT) · (b2 * fv)`, `f_aout = fa + f_ac`
/// (and symmetrically for the visual stream with a1/b1).
pub fn cmim_forward(
    tape: &mut Tape,
    fa: Var,
    fv: Var,
    ids: CmimIds,
    bound: &BoundParams,
    scale_by_sqrt_d: bool,
) -> Result<CmimOut, NumericsError> {
    let (ta, tv) = (tape.value(fa), tape.value(fv));
    if ta.shape() != tv.shape() {
        return Err(NumericsError::ShapeMismatch {
            op: "cmim_forward",
            lhs: ta.shape().to_vec(),
            rhs: tv.shape().to_vec(),
        });
    }
    let inv_sqrt_d = 1.0 / (ta.cols() as f64).sqrt();

    let cross = |tape: &mut Tape,
                     query: Var,
                     key: Var,
                     alpha: Var,
                     beta: Var|
     -> Result<Var, NumericsError> {
        let key_t = tape.transpose(key)?;
        let mut logits = tape.matmul(query, key_t)?;
        if scale_by_sqrt_d {
            logits = tape.scale(logits, inv_sqrt_d);
        }
        let attn = tape.softmax_rows(logits)?;
        let gated_key = tape.mul_scalar(key, beta)?;
        let context = tape.matmul(attn, gated_key)?;
        let context = tape.mul_scalar(context, alpha)?;
        let mixed = tape.add(query, context)?;
        tape.add(query, mixed)
    };

    let audio = cross(tape, fa, fv, bound.var(ids.alpha2), bound.var(ids.beta2))?;
    let visual = cross(tape, fv, fa, bound.var(ids.alpha1), bound.var(ids.beta1))?;
    Ok(CmimOut { audio, visual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelDims, ModelParameters};
    use crate::Tensor;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_features(rng: &mut StdRng, t: usize, d: usize) -> Tensor {
        let data = (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[t, d], data).unwrap()
    }

    fn run(
        params: &ModelParameters,
        fa: &Tensor,
        fv: &Tensor,
        scale: bool,
    ) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let va = tape.leaf(fa.clone());
        let vv = tape.leaf(fv.clone());
        let out = cmim_forward(&mut tape, va, vv, params.ids.cmim, &bound, scale).unwrap();
        (tape.value(out.audio).clone(), tape.value(out.visual).clone())
    }

    /// Fresh gates sit at the residual-identity point, so the outputs are
    /// exactly twice the inputs, bit for bit.
    #[test]
    fn fresh_init_doubles_inputs_bit_exactly() {
        let mut rng = StdRng::seed_from_u64(1);
        let params = ModelParameters::init(ModelDims::new(5, 6, 2, 6, 2), 1);
        for _ in 0..20 {
            let fa = rand_features(&mut rng, 5, 6);
            let fv = rand_features(&mut rng, 5, 6);
            let (oa, ov) = run(&params, &fa, &fv, false);
            for (o, i) in oa.data().iter().zip(fa.data()) {
                assert_eq!(*o, 2.0 * i);
            }
            for (o, i) in ov.data().iter().zip(fv.data()) {
                assert_eq!(*o, 2.0 * i);
            }
        }
    }

    /// Single-segment softmax collapses to weight 1: f_ac = fa + a2*b2*fv.
    #[test]
    fn t1_softmax_collapses() {
        let mut params = ModelParameters::init(ModelDims::new(1, 4, 2, 4, 2), 2);
        *params.set.value_mut(params.ids.cmim.alpha2) = Tensor::scalar(0.3);
        *params.set.value_mut(params.ids.cmim.beta2) = Tensor::scalar(-1.2);
        let fa = Tensor::from_vec(&[1, 4], vec![0.5, -0.25, 1.0, 0.0]).unwrap();
        let fv = Tensor::from_vec(&[1, 4], vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let (oa, _) = run(&params, &fa, &fv, false);
        for k in 0..4 {
            let f_ac = fa.at2(0, k) + 0.3 * (-1.2) * fv.at2(0, k);
            let want = fa.at2(0, k) + f_ac;
            assert!((oa.at2(0, k) - want).abs() < 1e-12);
        }
    }

    /// Loop oracle: per query row, recompute the softmax attention over all
    /// key rows and the gated weighted sum.
    #[test]
    fn matches_loop_oracle() {
        let mut rng = StdRng::seed_from_u64(3);
        let mut params = ModelParameters::init(ModelDims::new(4, 5, 2, 5, 2), 3);
        *params.set.value_mut(params.ids.cmim.alpha1) = Tensor::scalar(0.7);
        *params.set.value_mut(params.ids.cmim.alpha2) = Tensor::scalar(-0.4);
        *params.set.value_mut(params.ids.cmim.beta1) = Tensor::scalar(1.3);
        *params.set.value_mut(params.ids.cmim.beta2) = Tensor::scalar(0.9);
        let fa = rand_features(&mut rng, 4, 5);
        let fv = rand_features(&mut rng, 4, 5);
        let (oa, ov) = run(&params, &fa, &fv, false);

        let oracle = |query: &Tensor, key: &Tensor, alpha: f64, beta: f64| -> Tensor {
            let (t, d) = (4usize, 5usize);
            let mut out = Tensor::zeros(&[t, d]);
            for i in 0..t {
                let logits: Vec<f64> = (0..t)
                    .map(|j| (0..d).map(|k| query.at2(i, k) * key.at2(j, k)).sum())
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let denom: f64 = exps.iter().sum();
                for k in 0..d {
                    let mut ctx = 0.0;
                    for j in 0..t {
                        ctx += exps[j] / denom * (beta * key.at2(j, k));
                    }
                    let f_c = query.at2(i, k) + alpha * ctx;
                    out.set2(i, k, query.at2(i, k) + f_c);
                }
            }
            out
        };
        let want_a = oracle(&fa, &fv, -0.4, 0.9);
        let want_v = oracle(&fv, &fa, 0.7, 1.3);
        for (g, w) in oa.data().iter().zip(want_a.data()) {
            assert!((g - w).abs() < 1e-12);
        }
        for (g, w) in ov.data().iter().zip(want_v.data()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    /// Swapping the streams and the (a1,b1) <-> (a2,b2) gate pairs swaps
    /// the two outputs.
    #[test]
    fn swap_symmetry() {
        let mut rng = StdRng::seed_from_u64(4);
        let dims = ModelDims::new(3, 4, 2, 4, 2);
        let mut p = ModelParameters::init(dims, 4);
        *p.set.value_mut(p.ids.cmim.alpha1) = Tensor::scalar(0.6);
        *p.set.value_mut(p.ids.cmim.alpha2) = Tensor::scalar(-0.2);
        *p.set.value_mut(p.ids.cmim.beta1) = Tensor::scalar(0.8);
        *p.set.value_mut(p.ids.cmim.beta2) = Tensor::scalar(1.5);
        let mut q = p.clone();
        *q.set.value_mut(q.ids.cmim.alpha1) = Tensor::scalar(-0.2);
        *q.set.value_mut(q.ids.cmim.alpha2) = Tensor::scalar(0.6);
        *q.set.value_mut(q.ids.cmim.beta1) = Tensor::scalar(1.5);
        *q.set.value_mut(q.ids.cmim.beta2) = Tensor::scalar(0.8);

        let fa = rand_features(&mut rng, 3, 4);
        let fv = rand_features(&mut rng, 3, 4);
        let (oa, ov) = run(&p, &fa, &fv, false);
        let (ov_sw, oa_sw) = run(&q, &fv, &fa, false);
        assert_eq!(oa.data(), oa_sw.data());
        assert_eq!(ov.data(), ov_sw.data());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = StdRng::seed_from_u64(5);
        let params = ModelParameters::init(ModelDims::new(4, 6, 2, 6, 2), 5);
        let fa = rand_features(&mut rng, 4, 6);
        let fv = rand_features(&mut rng, 4, 6);
        let mut tape = Tape::new();
        let _ = params.bind(&mut tape);
        let va = tape.leaf(fa);
        let vv = tape.leaf(fv);
        let kt = tape.transpose(vv).unwrap();
        let logits = tape.matmul(va, kt).unwrap();
        let attn = tape.softmax_rows(logits).unwrap();
        for i in 0..4 {
            let sum: f64 = (0..4).map(|j| tape.value(attn).at2(i, j)).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let params = ModelParameters::init(ModelDims::new(3, 4, 2, 4, 2), 6);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let fa = tape.leaf(Tensor::zeros(&[3, 4]));
        let fv = tape.leaf(Tensor::zeros(&[3, 5]));
        assert!(cmim_forward(&mut tape, fa, fv, params.ids.cmim, &bound, false).is_err());
    }
}
