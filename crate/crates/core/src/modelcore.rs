//! The four model variants behind one step interface.
//!
//! Hierarchical variants run a vision LSTM over keypoints and a motion LSTM
//! over motion commands, integrate both hidden states in a union LSTM, and
//! feed two tanh projections of the union state back into the next inputs
//! of the modality LSTMs. Flat variants run one LSTM on the concatenated
//! inputs. `ST` variants predict each motion dimension as logits over the
//! codec bins instead of a single tanh unit.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netblocks::{Bound, ConvEncoder, ImageDecoder, Keypoints, Linear, LstmCell, ParamStore, ENCODER_LAYOUT};
use crate::numkernel::{Graph, Real, Tensor, Var};
use crate::stcodec::{st_loss, StCodec, StCodecConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "SARNN")]
    Sarnn,
    #[serde(rename = "HSARNN")]
    Hsarnn,
    #[serde(rename = "SARNNST")]
    Sarnnst,
    #[serde(rename = "HSARNNST")]
    Hsarnnst,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Sarnn, Variant::Hsarnn, Variant::Sarnnst, Variant::Hsarnnst];

    pub fn hierarchical(self) -> bool {
        matches!(self, Variant::Hsarnn | Variant::Hsarnnst)
    }

    pub fn softmax_transform(self) -> bool {
        matches!(self, Variant::Sarnnst | Variant::Hsarnnst)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Sarnn => "SARNN",
            Variant::Hsarnn => "HSARNN",
            Variant::Sarnnst => "SARNNST",
            Variant::Hsarnnst => "HSARNNST",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub keypoints: f64,
    pub motion: f64,
    pub image: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { keypoints: 1.0, motion: 1.0, image: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub motion_dims: usize,
    pub keypoint_channels: usize,
    pub modality_hidden: usize,
    pub union_hidden: usize,
    pub feedback: usize,
    pub flat_hidden: usize,
    pub st: Option<StCodecConfig>,
    pub loss_weights: LossWeights,
}

impl ModelConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            motion_dims: 3,
            keypoint_channels: ENCODER_LAYOUT[2].1,
            modality_hidden: 64,
            union_hidden: 64,
            feedback: 16,
            flat_hidden: 128,
            st: variant.softmax_transform().then(StCodecConfig::default),
            loss_weights: LossWeights::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [self.motion_dims, self.modality_hidden, self.union_hidden, self.feedback, self.flat_hidden];
        if sizes.contains(&0) {
            return Err(Error::Config("all model sizes must be positive".into()));
        }
        if self.keypoint_channels != ENCODER_LAYOUT[2].1 {
            return Err(Error::Config(format!(
                "encoder produces {} keypoint channels, config asks for {}",
                ENCODER_LAYOUT[2].1, self.keypoint_channels
            )));
        }
        match (&self.st, self.variant.softmax_transform()) {
            (Some(st), true) => st.validate()?,
            (None, false) => {}
            (Some(_), false) => return Err(Error::Config(format!("{} must not carry a codec config", self.variant))),
            (None, true) => return Err(Error::Config(format!("{} needs a codec config", self.variant))),
        }
        let w = &self.loss_weights;
        if [w.keypoints, w.motion, w.image].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn keypoint_dims(&self) -> usize {
        2 * self.keypoint_channels
    }
}

/// Recurrent state. `S` is a [`Var`] inside a graph and a [`Tensor`]
/// between steps.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelState<S> {
    Hierarchical { h_v: S, c_v: S, h_m: S, c_m: S, h_u: S, c_u: S, feedback_v: S, feedback_m: S },
    Flat { h: S, c: S },
}

impl<S> ModelState<S> {
    pub fn is_hierarchical(&self) -> bool {
        matches!(self, ModelState::Hierarchical { .. })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&S) -> U) -> ModelState<U> {
        match self {
            ModelState::Hierarchical { h_v, c_v, h_m, c_m, h_u, c_u, feedback_v, feedback_m } => {
                ModelState::Hierarchical {
                    h_v: f(h_v),
                    c_v: f(c_v),
                    h_m: f(h_m),
                    c_m: f(c_m),
                    h_u: f(h_u),
                    c_u: f(c_u),
                    feedback_v: f(feedback_v),
                    feedback_m: f(feedback_m),
                }
            }
            ModelState::Flat { h, c } => ModelState::Flat { h: f(h), c: f(c) },
        }
    }

    pub fn parts(&self) -> Vec<&S> {
        match self {
            ModelState::Hierarchical { h_v, c_v, h_m, c_m, h_u, c_u, feedback_v, feedback_m } => {
                vec![h_v, c_v, h_m, c_m, h_u, c_u, feedback_v, feedback_m]
            }
            ModelState::Flat { h, c } => vec![h, c],
        }
    }
}

impl<T: Real> ModelState<Tensor<T>> {
    pub fn bind(&self, g: &mut Graph<T>) -> ModelState<Var> {
        self.map(|t| g.constant(t.clone()))
    }
}

impl ModelState<Var> {
    pub fn values<T: Real>(&self, g: &Graph<T>) -> ModelState<Tensor<T>> {
        self.map(|&v| g.value(v).clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Core {
    Hierarchical { vision: LstmCell, motion: LstmCell, union: LstmCell, feedback_v: Linear, feedback_m: Linear },
    Flat { cell: LstmCell },
}

/// Motion prediction inside a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MotionOut {
    /// `[1, D]`, tanh-bounded.
    Direct(Var),
    /// `[D, B]` unnormalized.
    Logits(Var),
}

impl MotionOut {
    pub fn var(self) -> Var {
        match self {
            MotionOut::Direct(v) | MotionOut::Logits(v) => v,
        }
    }
}

/// Graph outputs of one step.
#[derive(Clone, Debug)]
pub struct StepVars {
    /// Keypoints of the input image, `[1, 2C]`.
    pub keypoints: Var,
    pub next_keypoints: Var,
    pub next_motion: MotionOut,
    pub next_image: Var,
    pub state: ModelState<Var>,
}

/// Plain-value outputs of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput<T> {
    pub keypoints: Keypoints<T>,
    pub next_keypoints: Keypoints<T>,
    /// Decoded motion in normalized units.
    pub next_motion: Vec<T>,
    /// `[D, B]` logits for softmax-transform variants.
    pub logits: Option<Tensor<T>>,
    pub next_image: Tensor<T>,
    pub state: ModelState<Tensor<T>>,
}

/// One demonstration prepared for teacher-forced training.
#[derive(Clone, Debug)]
pub struct TrainingSequence<T> {
    pub images: Vec<Arc<Tensor<T>>>,
    /// `T` rows of `D` normalized values.
    pub motions: Vec<Vec<T>>,
    /// Motions of steps `1..T` stacked as `[T-1, D]`.
    motion_targets: Arc<Tensor<T>>,
    /// Codec targets of steps `1..T` stacked as `[(T-1) * D, B]`.
    st_targets: Option<Arc<Tensor<T>>>,
}

impl<T: Real> TrainingSequence<T> {
    pub fn new(images: Vec<Tensor<T>>, motions: Vec<Vec<T>>, st: Option<&StCodecConfig>) -> Result<Self> {
        if images.len() != motions.len() {
            return Err(Error::Input(format!("{} images vs {} motion rows", images.len(), motions.len())));
        }
        if images.len() < 2 {
            return Err(Error::Input(format!("sequence needs at least 2 steps, got {}", images.len())));
        }
        let dims = motions[0].len();
        if dims == 0 || motions.iter().any(|m| m.len() != dims) {
            return Err(Error::Input("motion rows must share one positive width".into()));
        }
        let later = &motions[1..];
        let motion_targets = Arc::new(Tensor::new(&[later.len(), dims], later.concat())?);
        let st_targets = match st {
            None => None,
            Some(cfg) => {
                let codec = StCodec::new(*cfg)?;
                let mut data = vec![T::zero(); later.len() * dims * cfg.bins];
                for (row, &x) in data.chunks_exact_mut(cfg.bins).zip(later.iter().flatten()) {
                    codec.encode_into(x.to_f64(), row);
                }
                Some(Arc::new(Tensor::new(&[later.len() * dims, cfg.bins], data)?))
            }
        };
        Ok(Self { images: images.into_iter().map(Arc::new).collect(), motions, motion_targets, st_targets })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Per-term averages of a teacher-forced pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub total: f64,
    pub keypoints: f64,
    pub motion: f64,
    pub image: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    encoder: ConvEncoder,
    decoder: ImageDecoder,
    core: Core,
    keypoint_head: Linear,
    motion_head: Linear,
    codec: Option<StCodecConfig>,
}

impl Model {
    /// Build the model and its freshly initialized parameters.
    pub fn new<T: Real>(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = ConvEncoder::new(&mut store, rng);
        let decoder = ImageDecoder::new(&mut store, rng, config.keypoint_channels);
        let (kd, md) = (config.keypoint_dims(), config.motion_dims);
        let (core, head_in) = if config.variant.hierarchical() {
            let (hm, hu, fb) = (config.modality_hidden, config.union_hidden, config.feedback);
            let core = Core::Hierarchical {
                vision: LstmCell::new(&mut store, rng, "vision_rnn", kd + fb, hm),
                motion: LstmCell::new(&mut store, rng, "motion_rnn", md + fb, hm),
                union: LstmCell::new(&mut store, rng, "union_rnn", 2 * hm, hu),
                feedback_v: Linear::new(&mut store, rng, "feedback_vision", hu, fb),
                feedback_m: Linear::new(&mut store, rng, "feedback_motion", hu, fb),
            };
            (core, hm)
        } else {
            let core = Core::Flat { cell: LstmCell::new(&mut store, rng, "rnn", kd + md, config.flat_hidden) };
            (core, config.flat_hidden)
        };
        let keypoint_head = Linear::new(&mut store, rng, "keypoint_head", head_in, kd);
        let motion_out = match &config.st {
            Some(st) => md * st.bins,
            None => md,
        };
        let motion_head = Linear::new(&mut store, rng, "motion_head", head_in, motion_out);
        Ok((
            Self { config: config.clone(), encoder, decoder, core, keypoint_head, motion_head, codec: config.st },
            store,
        ))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder(&self) -> &ConvEncoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &ImageDecoder {
        &self.decoder
    }

    pub fn initial_state<T: Real>(&self) -> ModelState<Tensor<T>> {
        let z = |n: usize| Tensor::zeros(&[1, n]);
        let c = &self.config;
        if c.variant.hierarchical() {
            ModelState::Hierarchical {
                h_v: z(c.modality_hidden),
                c_v: z(c.modality_hidden),
                h_m: z(c.modality_hidden),
                c_m: z(c.modality_hidden),
                h_u: z(c.union_hidden),
                c_u: z(c.union_hidden),
                feedback_v: z(c.feedback),
                feedback_m: z(c.feedback),
            }
        } else {
            ModelState::Flat { h: z(c.flat_hidden), c: z(c.flat_hidden) }
        }
    }

    /// Recurrent part of a step: head inputs for keypoints and motion, and
    /// the next state.
    fn core_step<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        keypoints: Var,
        motion: Var,
        state: &ModelState<Var>,
    ) -> Result<(Var, Var, ModelState<Var>)> {
        let md = self.config.motion_dims;
        if g.value(motion).shape() != [1, md] {
            return Err(Error::Input(format!("motion input must be [1, {md}], got {:?}", g.value(motion).shape())));
        }
        let (head_src_k, head_src_a, state2) = match (&self.core, state) {
            (
                Core::Hierarchical { vision, motion: motion_rnn, union, feedback_v, feedback_m },
                ModelState::Hierarchical { h_v, c_v, h_m, c_m, h_u, c_u, feedback_v: fb_v, feedback_m: fb_m },
            ) => {
                let xv = g.concat(&[keypoints, *fb_v])?;
                let (h_v2, c_v2) = vision.step(g, p, xv, *h_v, *c_v)?;
                let xm = g.concat(&[motion, *fb_m])?;
                let (h_m2, c_m2) = motion_rnn.step(g, p, xm, *h_m, *c_m)?;
                let xu = g.concat(&[h_v2, h_m2])?;
                let (h_u2, c_u2) = union.step(g, p, xu, *h_u, *c_u)?;
                let fv = feedback_v.forward(g, p, h_u2)?;
                let fv = g.tanh(fv)?;
                let fm = feedback_m.forward(g, p, h_u2)?;
                let fm = g.tanh(fm)?;
                (
                    h_v2,
                    h_m2,
                    ModelState::Hierarchical {
                        h_v: h_v2,
                        c_v: c_v2,
                        h_m: h_m2,
                        c_m: c_m2,
                        h_u: h_u2,
                        c_u: c_u2,
                        feedback_v: fv,
                        feedback_m: fm,
                    },
                )
            }
            (Core::Flat { cell }, ModelState::Flat { h, c }) => {
                let x = g.concat(&[keypoints, motion])?;
                let (h2, c2) = cell.step(g, p, x, *h, *c)?;
                (h2, h2, ModelState::Flat { h: h2, c: c2 })
            }
            _ => return Err(Error::Input(format!("state layout does not match variant {}", self.config.variant))),
        };
        Ok((head_src_k, head_src_a, state2))
    }

    /// Motion prediction from `[rows, H]` head inputs: `[rows, D]` direct
    /// values or `[rows * D, B]` logits.
    fn motion_out<T: Real>(&self, g: &mut Graph<T>, p: &Bound, src: Var) -> Result<MotionOut> {
        let rows = g.value(src).shape()[0];
        let a = self.motion_head.forward(g, p, src)?;
        Ok(match &self.codec {
            Some(st) => MotionOut::Logits(g.reshape(a, &[rows * self.config.motion_dims, st.bins])?),
            None => MotionOut::Direct(g.tanh(a)?),
        })
    }

    /// Step from precomputed input keypoints `[1, 2C]`.
    pub fn step_from_keypoints<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        keypoints: Var,
        motion: Var,
        state: &ModelState<Var>,
    ) -> Result<StepVars> {
        let (src_k, src_a, state) = self.core_step(g, p, keypoints, motion, state)?;
        let k = self.keypoint_head.forward(g, p, src_k)?;
        let next_keypoints = g.tanh(k)?;
        let next_motion = self.motion_out(g, p, src_a)?;
        let next_image = self.decoder.decode(g, p, next_keypoints)?;
        Ok(StepVars { keypoints, next_keypoints, next_motion, next_image, state })
    }

    /// Full step from an image `[1, 64, 64]`.
    pub fn step_vars<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        image: Var,
        motion: Var,
        state: &ModelState<Var>,
    ) -> Result<StepVars> {
        let (_, keypoints) = self.encoder.encode(g, p, image)?;
        self.step_from_keypoints(g, p, keypoints, motion, state)
    }

    /// Decoded motion (normalized units) from a step's motion output.
    pub fn decode_motion<T: Real>(&self, g: &Graph<T>, out: MotionOut) -> Result<Vec<T>> {
        match (out, &self.codec) {
            (MotionOut::Direct(v), _) => Ok(g.value(v).data().to_vec()),
            (MotionOut::Logits(v), Some(st)) => {
                let codec = StCodec::new(*st)?;
                g.value(v).data().chunks_exact(st.bins).map(|row| codec.decode_slice(row).map(T::of)).collect()
            }
            (MotionOut::Logits(_), None) => Err(Error::Input("logits from a model without codec".into())),
        }
    }

    /// Inference step on plain values.
    pub fn step<T: Real>(
        &self,
        params: &ParamStore<T>,
        image: &Tensor<T>,
        motion: &[T],
        state: &ModelState<Tensor<T>>,
    ) -> Result<StepOutput<T>> {
        let mut g = Graph::new();
        let p = params.bind_frozen(&mut g);
        let img = g.constant(image.clone());
        let mot = g.constant(Tensor::row(motion.to_vec()));
        let st = state.bind(&mut g);
        let out = self.step_vars(&mut g, &p, img, mot, &st)?;
        let next_motion = self.decode_motion(&g, out.next_motion)?;
        let logits = match out.next_motion {
            MotionOut::Logits(v) => Some(g.value(v).clone()),
            MotionOut::Direct(_) => None,
        };
        let clamp = |v: Var| Keypoints::new(g.value(v).data().iter().map(|x| x.max(-T::one()).min(T::one())).collect());
        Ok(StepOutput {
            keypoints: clamp(out.keypoints)?,
            next_keypoints: clamp(out.next_keypoints)?,
            next_motion,
            logits,
            next_image: g.value(out.next_image).clone(),
            state: out.state.values(&g),
        })
    }

    /// Next decoded motion and state, skipping the keypoint and image heads.
    pub fn predict_motion<T: Real>(
        &self,
        params: &ParamStore<T>,
        image: &Tensor<T>,
        motion: &[T],
        state: &ModelState<Tensor<T>>,
    ) -> Result<(Vec<T>, ModelState<Tensor<T>>)> {
        let mut g = Graph::new();
        let p = params.bind_frozen(&mut g);
        let img = g.constant(image.clone());
        let mot = g.constant(Tensor::row(motion.to_vec()));
        let st = state.bind(&mut g);
        let (_, keypoints) = self.encoder.encode(&mut g, &p, img)?;
        let (_, src_a, next) = self.core_step(&mut g, &p, keypoints, mot, &st)?;
        let out = self.motion_out(&mut g, &p, src_a)?;
        Ok((self.decode_motion(&g, out)?, next.values(&g)))
    }

    /// Teacher-forced loss over a whole sequence, averaged over its `T-1`
    /// transitions. The caller binds `p`; the returned scalar can be
    /// backpropagated.
    pub fn sequence_loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        seq: &TrainingSequence<T>,
    ) -> Result<(Var, SequenceMetrics)> {
        self.sequence_loss_impl(g, p, seq, None)
    }

    /// Encoder keypoints of every image, as used for keypoint targets.
    pub fn keypoint_targets<T: Real>(
        &self,
        params: &ParamStore<T>,
        seq: &TrainingSequence<T>,
    ) -> Result<Vec<Tensor<T>>> {
        seq.images
            .iter()
            .map(|img| {
                let mut g = Graph::new();
                let p = params.bind_frozen(&mut g);
                let x = g.constant_shared(Arc::clone(img));
                let (_, k) = self.encoder.encode(&mut g, &p, x)?;
                Ok(g.value(k).clone())
            })
            .collect()
    }

    /// `sequence_loss` with keypoint targets supplied as constants instead
    /// of detached encoder outputs. Both give the same value and gradient;
    /// this form is a plain function of the parameters, so finite
    /// differences can check it.
    pub fn sequence_loss_frozen<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        seq: &TrainingSequence<T>,
        targets: &[Tensor<T>],
    ) -> Result<(Var, SequenceMetrics)> {
        if targets.len() != seq.len() {
            return Err(Error::Input(format!("{} keypoint targets for {} steps", targets.len(), seq.len())));
        }
        self.sequence_loss_impl(g, p, seq, Some(targets))
    }

    fn sequence_loss_impl<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        seq: &TrainingSequence<T>,
        frozen: Option<&[Tensor<T>]>,
    ) -> Result<(Var, SequenceMetrics)> {
        let t_len = seq.len();
        if t_len < 2 {
            return Err(Error::Input(format!("sequence needs at least 2 steps, got {t_len}")));
        }
        if self.codec.is_some() && seq.st_targets.is_none() {
            return Err(Error::Input("softmax-transform variant needs codec targets".into()));
        }
        let keypoints: Vec<Var> = seq
            .images
            .iter()
            .map(|img| {
                let x = g.constant_shared(Arc::clone(img));
                self.encoder.encode(g, p, x).map(|(_, k)| k)
            })
            .collect::<Result<_>>()?;
        let mut state = self.initial_state::<T>().bind(g);
        let mut k_terms = Vec::with_capacity(t_len - 1);
        let mut i_terms = Vec::with_capacity(t_len - 1);
        let mut motion_src = Vec::with_capacity(t_len - 1);
        for t in 0..t_len - 1 {
            let motion = g.constant(Tensor::row(seq.motions[t].clone()));
            let (src_k, src_a, next) = self.core_step(g, p, keypoints[t], motion, &state)?;
            let k = self.keypoint_head.forward(g, p, src_k)?;
            let next_keypoints = g.tanh(k)?;
            let k_target = match frozen {
                Some(k) => g.constant(k[t + 1].clone()),
                None => g.detach(keypoints[t + 1]),
            };
            k_terms.push(g.mse_loss(next_keypoints, k_target)?);
            let next_image = self.decoder.decode(g, p, next_keypoints)?;
            let image_target = g.constant_shared(Arc::clone(&seq.images[t + 1]));
            i_terms.push(g.mse_loss(next_image, image_target)?);
            motion_src.push(src_a);
            state = next;
        }
        // The motion head sits outside the recurrence, so all steps go
        // through it as one matrix.
        let width = g.value(motion_src[0]).numel();
        let stacked = g.concat(&motion_src)?;
        let stacked = g.reshape(stacked, &[t_len - 1, width])?;
        let a_mean = match self.motion_out(g, p, stacked)? {
            MotionOut::Direct(v) => {
                let target = g.constant_shared(Arc::clone(&seq.motion_targets));
                g.mse_loss(v, target)?
            }
            MotionOut::Logits(v) => {
                let target = g.constant_shared(Arc::clone(seq.st_targets.as_ref().expect("checked above")));
                st_loss(g, v, target)?
            }
        };
        let steps = (t_len - 1) as f64;
        let k_sum = sum_terms(g, &k_terms)?;
        let i_sum = sum_terms(g, &i_terms)?;
        let w = self.config.loss_weights;
        let kw = g.scale(k_sum, w.keypoints / steps)?;
        let aw = g.scale(a_mean, w.motion)?;
        let iw = g.scale(i_sum, w.image / steps)?;
        let total = g.add(kw, aw)?;
        let total = g.add(total, iw)?;
        let val = |g: &Graph<T>, v: Var| g.value(v).data()[0].to_f64();
        let metrics = SequenceMetrics {
            total: val(g, total),
            keypoints: val(g, k_sum) / steps,
            motion: val(g, a_mean),
            image: val(g, i_sum) / steps,
        };
        Ok((total, metrics))
    }

    /// Feed the model its own decoded motion while taking images from a
    /// recorded stream. Returns `steps` predicted motions.
    pub fn rollout_open_loop<T: Real>(
        &self,
        params: &ParamStore<T>,
        images: &[Tensor<T>],
        first_motion: &[T],
        steps: usize,
    ) -> Result<Vec<Vec<T>>> {
        if steps > images.len() {
            return Err(Error::Input(format!("{steps} steps requested from {} images", images.len())));
        }
        let mut state = self.initial_state();
        let mut motion = first_motion.to_vec();
        let mut out = Vec::with_capacity(steps);
        for image in &images[..steps] {
            (motion, state) = self.predict_motion(params, image, &motion, &state)?;
            out.push(motion.clone());
        }
        Ok(out)
    }
}

fn sum_terms<T: Real>(g: &mut Graph<T>, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &v in &terms[1..] {
        acc = g.add(acc, v)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn zeroed(variant: Variant) -> (Model, ParamStore<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (model, mut store) = Model::new::<f32>(&ModelConfig::new(variant), &mut rng).unwrap();
        for i in 0..store.len() {
            let z = Tensor::zeros_like(store.get_mut(i));
            store.replace(i, z);
        }
        (model, store)
    }

    #[test]
    fn variant_flags() {
        assert!(!Variant::Sarnn.hierarchical());
        assert!(!Variant::Sarnn.softmax_transform());
        assert!(Variant::Hsarnn.hierarchical());
        assert!(!Variant::Hsarnn.softmax_transform());
        assert!(!Variant::Sarnnst.hierarchical());
        assert!(Variant::Sarnnst.softmax_transform());
        assert!(Variant::Hsarnnst.hierarchical());
        assert!(Variant::Hsarnnst.softmax_transform());
        for v in Variant::ALL {
            assert_eq!(v.name().starts_with('H'), v.hierarchical());
            assert_eq!(v.name().ends_with("ST"), v.softmax_transform());
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("LSTM".parse::<Variant>().is_err());
    }

    #[test]
    fn config_guards() {
        let mut c = ModelConfig::new(Variant::Sarnn);
        c.st = Some(StCodecConfig::default());
        assert!(c.validate().is_err());
        let mut c = ModelConfig::new(Variant::Hsarnnst);
        c.st = None;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::new(Variant::Hsarnn);
        c.feedback = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn parameter_counts_are_deterministic_and_distinct() {
        let count = |v: Variant| {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            Model::new::<f32>(&ModelConfig::new(v), &mut rng).unwrap().1.scalar_count()
        };
        let counts: Vec<usize> = Variant::ALL.iter().map(|&v| count(v)).collect();
        assert_eq!(counts, Variant::ALL.iter().map(|&v| count(v)).collect::<Vec<_>>());
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(counts[i], counts[j]);
            }
        }
    }

    #[test]
    fn zero_weights_force_known_motion() {
        let image = Tensor::full(&[1, 64, 64], 0.3f32);
        for v in Variant::ALL {
            let (model, store) = zeroed(v);
            let out = model.step(&store, &image, &[0.2, -0.4, 0.9], &model.initial_state()).unwrap();
            let expect = if v.softmax_transform() { -1.0 } else { 0.0 };
            assert_eq!(out.next_motion, vec![expect; 3], "{v}");
        }
    }

    #[test]
    fn state_mismatch_is_rejected() {
        let (flat, store) = zeroed(Variant::Sarnn);
        let (hier, _) = zeroed(Variant::Hsarnn);
        let image = Tensor::zeros(&[1, 64, 64]);
        let err = flat.step(&store, &image, &[0.0; 3], &hier.initial_state());
        assert!(matches!(err, Err(Error::Input(_))));
    }

    #[test]
    fn step_is_deterministic_and_moves_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (model, store) = Model::new::<f32>(&ModelConfig::new(Variant::Hsarnnst), &mut rng).unwrap();
        let image = Tensor::new(&[1, 64, 64], (0..4096).map(|i| ((i * 37) % 101) as f32 / 100.0).collect()).unwrap();
        let s0 = model.initial_state();
        let a = model.step(&store, &image, &[0.1, 0.2, 0.3], &s0).unwrap();
        let b = model.step(&store, &image, &[0.1, 0.2, 0.3], &s0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.state, s0);
        assert!(a.next_motion.iter().all(|v| (-1.0..=1.0).contains(v)));
        let (motion, state) = model.predict_motion(&store, &image, &[0.1, 0.2, 0.3], &s0).unwrap();
        assert_eq!((motion, state), (a.next_motion, a.state));
    }

    #[test]
    fn open_loop_zero_steps_is_empty() {
        let (model, store) = zeroed(Variant::Hsarnn);
        assert!(model.rollout_open_loop(&store, &[], &[0.0; 3], 0).unwrap().is_empty());
    }

    #[test]
    fn short_sequence_is_rejected() {
        let (model, store) = zeroed(Variant::Sarnn);
        let _ = (model, store);
        assert!(TrainingSequence::<f32>::new(vec![Tensor::zeros(&[1, 64, 64])], vec![vec![0.0; 3]], None).is_err());
    }
}
