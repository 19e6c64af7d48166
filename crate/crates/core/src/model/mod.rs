//! Model parameters and the forward-pass submodules.
//!
//! Parameters live in a flat named registry so the optimizer, checkpoints,
//! and gradient checks all iterate the same fixed order; structured id
//! bundles give the submodules typed access into it.

pub mod attention;
pub mod checkpoint;
pub mod interaction;
pub mod predictor;
pub mod semantics;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use thiserror::Error;

use crate::numerics::tape::Var;
use crate::{Tape, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("duplicate parameter name {name}")]
    DuplicateName { name: String },
    #[error("unknown parameter name {name}")]
    UnknownName { name: String },
    #[error("parameter {name} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("missing parameter {name}")]
    Missing { name: String },
}

/// Modality selector used across the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Audio,
    Visual,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Audio, Modality::Visual];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Visual => "visual",
        }
    }
}

/// Static sizes of one model instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub t: usize,
    pub d: usize,
    pub c: usize,
    pub d_text: usize,
    /// Hidden width of the temporal-attention MLP: `max(1, t / r)`.
    pub tsam_hidden: usize,
    /// Hidden width of the semantic MLPs.
    pub plsim_hidden: usize,
}

impl ModelDims {
    pub const DEFAULT_REDUCTION_RATIO: usize = 2;

    pub fn new(t: usize, d: usize, c: usize, d_text: usize, reduction_ratio: usize) -> Self {
        ModelDims {
            t,
            d,
            c,
            d_text,
            tsam_hidden: (t / reduction_ratio.max(1)).max(1),
            plsim_hidden: d_text,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
}

/// Flat registry with unique names and a stable iteration order.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    fn push(&mut self, name: String, value: Tensor) -> Result<ParamId, ModelError> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(ModelError::DuplicateName { name });
        }
        self.params.push(Parameter { name, value });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn total_coords(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct Mlp2Ids {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct TsamIds {
    pub temporal: Mlp2Ids,
    pub spatial: LinearIds,
}

#[derive(Clone, Copy, Debug)]
pub struct CmimIds {
    pub alpha1: ParamId,
    pub alpha2: ParamId,
    pub beta1: ParamId,
    pub beta2: ParamId,
}

/// The four semantic MLPs: audio scale/bias, visual scale/bias.
#[derive(Clone, Copy, Debug)]
pub struct PlsimIds {
    pub audio_scale: Mlp2Ids,
    pub audio_bias: Mlp2Ids,
    pub visual_scale: Mlp2Ids,
    pub visual_bias: Mlp2Ids,
}

#[derive(Clone, Copy, Debug)]
pub struct ModelIds {
    pub tsam_audio: TsamIds,
    pub tsam_visual: TsamIds,
    pub cmim: CmimIds,
    pub plsim: PlsimIds,
    pub head_audio: LinearIds,
    pub head_visual: LinearIds,
    pub mu: ParamId,
}

/// All trainable weights of one model instance.
#[derive(Clone, Debug)]
pub struct ModelParameters {
    pub dims: ModelDims,
    pub set: ParamSet,
    pub ids: ModelIds,
}

/// Initial scalar values of the interaction gates: the residual-identity
/// point, so cross-modal influence starts at zero and grows only if the
/// loss asks for it.
pub const CMIM_ALPHA_INIT: f64 = 0.0;
pub const CMIM_BETA_INIT: f64 = 1.0;
/// Initial value of the loss-weight parameter.
pub const MU_INIT: f64 = 0.5;

/// Name plus shape of every parameter, in registry order. Single source of
/// truth shared by initialization and checkpoint validation.
fn layout(dims: &ModelDims) -> Vec<(String, Vec<usize>)> {
    let ModelDims {
        t,
        d,
        c,
        d_text,
        tsam_hidden: h,
        plsim_hidden: hp,
    } = *dims;
    let mut out = Vec::new();
    for m in Modality::BOTH {
        let m = m.name();
        out.push((format!("tsam.{m}.temporal.w1"), vec![t, h]));
        out.push((format!("tsam.{m}.temporal.b1"), vec![h]));
        out.push((format!("tsam.{m}.temporal.w2"), vec![h, t]));
        out.push((format!("tsam.{m}.temporal.b2"), vec![t]));
        out.push((format!("tsam.{m}.spatial.w"), vec![2 * d, d]));
        out.push((format!("tsam.{m}.spatial.b"), vec![d]));
    }
    for gate in ["alpha1", "alpha2", "beta1", "beta2"] {
        out.push((format!("cmim.{gate}"), vec![1]));
    }
    for mlp in ["audio_scale", "audio_bias", "visual_scale", "visual_bias"] {
        out.push((format!("plsim.{mlp}.w1"), vec![d_text, hp]));
        out.push((format!("plsim.{mlp}.b1"), vec![hp]));
        out.push((format!("plsim.{mlp}.w2"), vec![hp, d]));
        out.push((format!("plsim.{mlp}.b2"), vec![d]));
    }
    for m in Modality::BOTH {
        out.push((format!("head.{}.w", m.name()), vec![d, c]));
        out.push((format!("head.{}.b", m.name()), vec![c]));
    }
    out.push(("mu".to_string(), vec![1]));
    out
}

impl ModelParameters {
    /// Fresh weights: uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight
    /// matrices, zero biases (so a zero input cascades to 0.5 probabilities
    /// everywhere), zero final semantic-MLP layers (so semantic fusion
    /// starts as the identity), gates at the residual-identity point,
    /// mu = 0.5. Deterministic per seed.
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut set = ParamSet::default();
        let push = |set: &mut ParamSet, name: String, value: Tensor| -> ParamId {
            set.push(name, value).expect("layout names are unique")
        };

        let uniform = |rng: &mut StdRng, shape: &[usize], fan_in: usize| -> Tensor {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            Tensor::from_vec(shape, data).expect("valid shape")
        };

        let tsam = |set: &mut ParamSet, rng: &mut StdRng, m: Modality| -> TsamIds {
            let m = m.name();
            let (t, h, d) = (dims.t, dims.tsam_hidden, dims.d);
            TsamIds {
                temporal: Mlp2Ids {
                    w1: push(set, format!("tsam.{m}.temporal.w1"), uniform(rng, &[t, h], t)),
                    b1: push(set, format!("tsam.{m}.temporal.b1"), Tensor::zeros(&[h])),
                    w2: push(set, format!("tsam.{m}.temporal.w2"), uniform(rng, &[h, t], h)),
                    b2: push(set, format!("tsam.{m}.temporal.b2"), Tensor::zeros(&[t])),
                },
                spatial: LinearIds {
                    w: push(
                        set,
                        format!("tsam.{m}.spatial.w"),
                        uniform(rng, &[2 * d, d], 2 * d),
                    ),
                    b: push(set, format!("tsam.{m}.spatial.b"), Tensor::zeros(&[d])),
                },
            }
        };
        let tsam_audio = tsam(&mut set, &mut rng, Modality::Audio);
        let tsam_visual = tsam(&mut set, &mut rng, Modality::Visual);

        let cmim = CmimIds {
            alpha1: push(&mut set, "cmim.alpha1".into(), Tensor::scalar(CMIM_ALPHA_INIT)),
            alpha2: push(&mut set, "cmim.alpha2".into(), Tensor::scalar(CMIM_ALPHA_INIT)),
            beta1: push(&mut set, "cmim.beta1".into(), Tensor::scalar(CMIM_BETA_INIT)),
            beta2: push(&mut set, "cmim.beta2".into(), Tensor::scalar(CMIM_BETA_INIT)),
        };

        let plsim_mlp = |set: &mut ParamSet, rng: &mut StdRng, which: &str| -> Mlp2Ids {
            let (dt, hp, d) = (dims.d_text, dims.plsim_hidden, dims.d);
            Mlp2Ids {
                w1: push(set, format!("plsim.{which}.w1"), uniform(rng, &[dt, hp], dt)),
                b1: push(set, format!("plsim.{which}.b1"), Tensor::zeros(&[hp])),
                // zero final layer: fusion starts as the identity
                w2: push(set, format!("plsim.{which}.w2"), Tensor::zeros(&[hp, d])),
                b2: push(set, format!("plsim.{which}.b2"), Tensor::zeros(&[d])),
            }
        };
        let plsim = PlsimIds {
            audio_scale: plsim_mlp(&mut set, &mut rng, "audio_scale"),
            audio_bias: plsim_mlp(&mut set, &mut rng, "audio_bias"),
            visual_scale: plsim_mlp(&mut set, &mut rng, "visual_scale"),
            visual_bias: plsim_mlp(&mut set, &mut rng, "visual_bias"),
        };

        let head = |set: &mut ParamSet, rng: &mut StdRng, m: Modality| -> LinearIds {
            let (d, c) = (dims.d, dims.c);
            LinearIds {
                w: push(set, format!("head.{}.w", m.name()), uniform(rng, &[d, c], d)),
                b: push(set, format!("head.{}.b", m.name()), Tensor::zeros(&[c])),
            }
        };
        let head_audio = head(&mut set, &mut rng, Modality::Audio);
        let head_visual = head(&mut set, &mut rng, Modality::Visual);

        let mu = push(&mut set, "mu".into(), Tensor::scalar(MU_INIT));

        let params = ModelParameters {
            dims,
            set,
            ids: ModelIds {
                tsam_audio,
                tsam_visual,
                cmim,
                plsim,
                head_audio,
                head_visual,
                mu,
            },
        };
        debug_assert!(params.matches_layout().is_ok());
        params
    }

    /// Rebuild a parameter set from `(name, tensor)` records (checkpoint
    /// load). Dims are inferred from shapes and every record is validated
    /// against the canonical layout.
    pub fn from_named(records: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        let find = |name: &str| -> Result<&Tensor, ModelError> {
            records
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| ModelError::Missing { name: name.into() })
        };
        let tw1 = find("tsam.audio.temporal.w1")?;
        let sw = find("tsam.audio.spatial.w")?;
        let pw1 = find("plsim.audio_scale.w1")?;
        let pb1 = find("plsim.audio_scale.b1")?;
        let hw = find("head.audio.w")?;
        let dims = ModelDims {
            t: tw1.shape()[0],
            tsam_hidden: tw1.shape()[1],
            d: *sw.shape().last().unwrap_or(&0),
            d_text: pw1.shape()[0],
            plsim_hidden: pb1.shape()[0],
            c: *hw.shape().last().unwrap_or(&0),
        };

        let mut fresh = ModelParameters::init(dims, 0);
        let expected: Vec<(String, Vec<usize>)> = layout(&dims);
        for (name, tensor) in records {
            match expected.iter().find(|(n, _)| *n == name) {
                None => return Err(ModelError::UnknownName { name }),
                Some((_, shape)) if tensor.shape() != shape.as_slice() => {
                    return Err(ModelError::ShapeMismatch {
                        name,
                        expected: shape.clone(),
                        found: tensor.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
            let slot = fresh
                .set
                .iter_mut()
                .find(|p| p.name == name)
                .expect("layout contains name");
            slot.value = tensor;
        }
        // init covered every layout slot, so nothing can be missing beyond
        // the anchors checked above; verify anyway for honest errors
        fresh.matches_layout()?;
        Ok(fresh)
    }

    fn matches_layout(&self) -> Result<(), ModelError> {
        let expected = layout(&self.dims);
        for ((name, shape), param) in expected.iter().zip(self.set.iter()) {
            if *name != param.name {
                return Err(ModelError::Missing { name: name.clone() });
            }
            if param.value.shape() != shape.as_slice() {
                return Err(ModelError::ShapeMismatch {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: param.value.shape().to_vec(),
                });
            }
        }
        if expected.len() != self.set.len() {
            return Err(ModelError::UnknownName {
                name: self
                    .set
                    .iter()
                    .nth(expected.len())
                    .map(|p| p.name.clone())
                    .unwrap_or_default(),
            });
        }
        Ok(())
    }

    /// Register every parameter as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self
                .set
                .iter()
                .map(|p| tape.var(p.value.clone()))
                .collect(),
        }
    }
}

/// Tape handles for one binding of the parameter set, aligned with registry
/// order.
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients in registry order, zeros where no gradient flowed.
    pub fn gradients(&self, tape: &Tape, params: &ModelParameters) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(params.set.iter())
            .map(|(&v, p)| {
                tape.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
            })
            .collect()
    }
}

// ── Small tape helpers shared by the submodules ─────────────────────────

use crate::NumericsError;

/// `x · w + b` with the bias broadcast across rows.
pub(crate) fn linear(
    tape: &mut Tape,
    x: Var,
    ids: LinearIds,
    bound: &BoundParams,
) -> Result<Var, NumericsError> {
    let xw = tape.matmul(x, bound.var(ids.w))?;
    tape.add_row(xw, bound.var(ids.b))
}

/// Two-layer MLP with a rectifier between the layers.
pub(crate) fn mlp2(
    tape: &mut Tape,
    x: Var,
    ids: Mlp2Ids,
    bound: &BoundParams,
) -> Result<Var, NumericsError> {
    let h = tape.matmul(x, bound.var(ids.w1))?;
    let h = tape.add_row(h, bound.var(ids.b1))?;
    let h = tape.relu(h);
    let out = tape.matmul(h, bound.var(ids.w2))?;
    tape.add_row(out, bound.var(ids.b2))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ModelDims {
        ModelDims::new(4, 8, 3, 8, 2)
    }

    #[test]
    fn init_is_deterministic() {
        let a = ModelParameters::init(dims(), 7);
        let b = ModelParameters::init(dims(), 7);
        for (pa, pb) in a.set.iter().zip(b.set.iter()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.value, pb.value);
        }
    }

    #[test]
    fn names_are_unique() {
        let p = ModelParameters::init(dims(), 0);
        let mut names: Vec<&str> = p.set.iter().map(|p| p.name.as_str()).collect();
        let before = names.len();
        names.sort();
        names.dedup();
        assert_eq!(before, names.len());
    }

    #[test]
    fn plsim_final_layers_start_at_zero() {
        let p = ModelParameters::init(dims(), 3);
        for which in [
            p.ids.plsim.audio_scale,
            p.ids.plsim.audio_bias,
            p.ids.plsim.visual_scale,
            p.ids.plsim.visual_bias,
        ] {
            assert!(p.set.value(which.w2).data().iter().all(|&x| x == 0.0));
            assert!(p.set.value(which.b2).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn from_named_round_trips() {
        let p = ModelParameters::init(dims(), 11);
        let records: Vec<(String, Tensor)> = p
            .set
            .iter()
            .map(|q| (q.name.clone(), q.value.clone()))
            .collect();
        let q = ModelParameters::from_named(records).unwrap();
        assert_eq!(q.dims, p.dims);
        for (a, b) in p.set.iter().zip(q.set.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn from_named_rejects_unknown_and_missing() {
        let p = ModelParameters::init(dims(), 11);
        let mut records: Vec<(String, Tensor)> = p
            .set
            .iter()
            .map(|q| (q.name.clone(), q.value.clone()))
            .collect();
        records.push(("bogus.param".into(), Tensor::scalar(1.0)));
        assert!(matches!(
            ModelParameters::from_named(records.clone()),
            Err(ModelError::UnknownName { .. })
        ));
        records.clear();
        assert!(matches!(
            ModelParameters::from_named(records),
            Err(ModelError::Missing { .. })
        ));
    }

    #[test]
    fn tsam_hidden_is_floored_at_one() {
        let d = ModelDims::new(3, 4, 2, 4, 8);
        assert_eq!(d.tsam_hidden, 1);
    }
}
