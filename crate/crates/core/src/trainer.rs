//! Full-batch BPTT training with Adam and checkpoint persistence.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datastore::{bounds_over, Episode, NormBounds};
use crate::error::{Error, FormatError, Result};
use crate::modelcore::{Model, ModelConfig, SequenceMetrics, TrainingSequence, Variant};
use crate::netblocks::ParamStore;
use crate::numkernel::{Graph, Real, Tensor};
use crate::wire::{self, Reader};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling.
    pub clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 2000, lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip: 1.0, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config(format!("clip norm must be positive, got {}", self.clip)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// One bias-corrected Adam step on a flat slice. `t` counts from 1.
pub fn adam_update<T: Real>(param: &mut [T], grad: &[T], m: &mut [T], v: &mut [T], t: u64, cfg: &TrainConfig) {
    assert!(t >= 1, "Adam step counter starts at 1");
    assert!(
        param.len() == grad.len() && grad.len() == m.len() && m.len() == v.len(),
        "Adam slices must share one length"
    );
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powf(t as f64);
    let c2 = 1.0 - b2.powf(t as f64);
    for i in 0..param.len() {
        let g = grad[i].to_f64();
        let mi = b1 * m[i].to_f64() + (1.0 - b1) * g;
        let vi = b2 * v[i].to_f64() + (1.0 - b2) * g * g;
        m[i] = T::of(mi);
        v[i] = T::of(vi);
        let step = cfg.lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
        param[i] = T::of(param[i].to_f64() - step);
    }
}

/// Scale `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|&g| {
            let g = Real::to_f64(g);
            g * g
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            *g = T::of(Real::to_f64(*g) * scale);
        }
    }
    norm
}

/// Seed and stream position of the initialization RNG.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// `u128` word position, as decimal text.
    pub word_pos: String,
}

impl RngState {
    fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        Self { seed, word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 =
            self.word_pos.parse().map_err(|_| Error::Input(format!("bad rng word position `{}`", self.word_pos)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub adam_step: u64,
    pub rng: RngState,
    pub bounds: NormBounds,
    pub params: ParamStore<f32>,
    pub adam_m: Vec<Tensor<f32>>,
    pub adam_v: Vec<Tensor<f32>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    adam_step: u64,
    rng: RngState,
    bounds: NormBounds,
    tensors: usize,
}

fn init_model(cfg: &ModelConfig, seed: u64) -> Result<(Model, ParamStore<f32>, RngState)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (model, params) = Model::new::<f32>(cfg, &mut rng)?;
    Ok((model, params, RngState::capture(seed, &rng)))
}

impl Checkpoint {
    /// Freshly initialized parameters with zero Adam moments.
    pub fn initial(model: &ModelConfig, train: &TrainConfig, bounds: NormBounds) -> Result<Self> {
        train.validate()?;
        let (_, params, rng) = init_model(model, train.seed)?;
        let zeros: Vec<Tensor<f32>> = params.tensors().map(Tensor::zeros_like).collect();
        Ok(Self {
            model: model.clone(),
            train: train.clone(),
            epoch: 0,
            adam_step: 0,
            rng,
            bounds,
            params,
            adam_m: zeros.clone(),
            adam_v: zeros,
        })
    }

    pub fn variant(&self) -> Variant {
        self.model.variant
    }

    /// Rejects checkpoints trained as a different variant.
    pub fn expect_variant(&self, variant: Variant) -> Result<()> {
        if self.model.variant != variant {
            return Err(Error::Config(format!(
                "checkpoint holds a {} model, expected {}",
                self.model.variant, variant
            )));
        }
        Ok(())
    }

    /// Model structure matching the stored parameters.
    pub fn build_model(&self) -> Result<Model> {
        let (model, fresh, _) = init_model(&self.model, self.rng.seed)?;
        check_layout(&fresh, &self.params)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        wire::put_u32(&mut out, CHECKPOINT_VERSION);
        let header = Header {
            model: self.model.clone(),
            train: self.train.clone(),
            epoch: self.epoch,
            adam_step: self.adam_step,
            rng: self.rng.clone(),
            bounds: self.bounds.clone(),
            tensors: 3 * self.params.len(),
        };
        wire::put_block(&mut out, &wire::canonical_json(&header));
        let groups = [
            ("param", self.params.tensors().collect::<Vec<_>>()),
            ("adam_m", self.adam_m.iter().collect()),
            ("adam_v", self.adam_v.iter().collect()),
        ];
        for (prefix, tensors) in groups {
            for (name, t) in self.params.names().iter().zip(tensors) {
                wire::put_block(&mut out, format!("{prefix}/{name}").as_bytes());
                wire::put_u32(&mut out, t.rank() as u32);
                for &d in t.shape() {
                    wire::put_u32(&mut out, d as u32);
                }
                wire::put_f32s(&mut out, t.data());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        r.version(CHECKPOINT_VERSION)?;
        let header: Header = wire::parse_json(r.block("config")?, "config")?;
        let (_, fresh, _) = init_model(&header.model, header.rng.seed)?;
        if header.tensors != 3 * fresh.len() {
            return Err(FormatError::Corrupt {
                field: "config".into(),
                detail: format!("{} tensors for a model with {} parameters", header.tensors, fresh.len()),
            }
            .into());
        }
        let mut read_group = |prefix: &str| -> Result<Vec<Tensor<f32>>> {
            fresh
                .names()
                .iter()
                .zip(fresh.tensors())
                .map(|(name, like)| {
                    let expected = format!("{prefix}/{name}");
                    let found = r.block("tensor name")?;
                    if found != expected.as_bytes() {
                        return Err(FormatError::Corrupt {
                            field: "tensor name".into(),
                            detail: format!("expected `{expected}`, found `{}`", String::from_utf8_lossy(found)),
                        }
                        .into());
                    }
                    let rank = r.u32(&expected)? as usize;
                    let shape =
                        (0..rank).map(|_| r.u32(&expected).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
                    if shape != like.shape() {
                        return Err(FormatError::Corrupt {
                            field: expected,
                            detail: format!("shape {shape:?}, model needs {:?}", like.shape()),
                        }
                        .into());
                    }
                    let data = r.f32s(like.numel(), &expected)?;
                    Ok(Tensor::new(&shape, data)?)
                })
                .collect()
        };
        let params = read_group("param")?;
        let adam_m = read_group("adam_m")?;
        let adam_v = read_group("adam_v")?;
        r.finish()?;
        let mut store = fresh;
        for (i, t) in params.into_iter().enumerate() {
            store.replace(i, t);
        }
        Ok(Self {
            model: header.model,
            train: header.train,
            epoch: header.epoch,
            adam_step: header.adam_step,
            rng: header.rng,
            bounds: header.bounds,
            params: store,
            adam_m,
            adam_v,
        })
    }
}

fn check_layout(expected: &ParamStore<f32>, found: &ParamStore<f32>) -> Result<()> {
    if expected.names() != found.names() {
        return Err(Error::Config("parameter names do not match the model structure".into()));
    }
    for (name, (a, b)) in expected.names().iter().zip(expected.tensors().zip(found.tensors())) {
        if a.shape() != b.shape() {
            return Err(Error::Config(format!("parameter {name}: shape {:?} vs {:?}", b.shape(), a.shape())));
        }
    }
    Ok(())
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

/// Mean losses over all episodes, before that epoch's update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub k_term: f64,
    pub a_term: f64,
    pub img_term: f64,
}

pub fn write_loss_log(log: &[EpochLoss], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "epoch,total,k_term,a_term,img_term")?;
    for e in log {
        writeln!(out, "{},{},{},{},{}", e.epoch, e.total, e.k_term, e.a_term, e.img_term)?;
    }
    fs::write(path, out)?;
    Ok(())
}

/// Training sequences under `bounds`, ready for `sequence_loss`.
pub fn training_sequences(
    episodes: &[Episode],
    bounds: &NormBounds,
    model: &ModelConfig,
) -> Result<Vec<TrainingSequence<f32>>> {
    episodes
        .iter()
        .map(|ep| {
            let ep = if &ep.meta.bounds == bounds { ep.clone() } else { ep.renormalized(bounds)? };
            if ep.dims() != model.motion_dims {
                return Err(Error::Input(format!(
                    "episode has {} motion dims, model expects {}",
                    ep.dims(),
                    model.motion_dims
                )));
            }
            let images = (0..ep.steps()).map(|t| ep.image_tensor(t)).collect();
            let motions = (0..ep.steps()).map(|t| ep.norm_row(t).to_vec()).collect();
            TrainingSequence::new(images, motions, model.st.as_ref())
        })
        .collect()
}

/// Loss and parameter gradients of one sequence.
pub fn sequence_gradients<T: Real>(
    model: &Model,
    params: &ParamStore<T>,
    seq: &TrainingSequence<T>,
) -> Result<(SequenceMetrics, Vec<Vec<T>>)> {
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let (loss, metrics) = model.sequence_loss(&mut g, &p, seq)?;
    g.backward(loss)?;
    let grads = p
        .vars()
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![T::zero(); t.numel()], <[T]>::to_vec))
        .collect();
    Ok((metrics, grads))
}

fn check_finite(epoch: usize, m: &SequenceMetrics) -> Result<()> {
    for (term, v) in [("total", m.total), ("k_term", m.keypoints), ("a_term", m.motion), ("img_term", m.image)] {
        if !v.is_finite() {
            return Err(Error::NonFinite { epoch, term });
        }
    }
    Ok(())
}

pub fn train(episodes: &[Episode], model: &ModelConfig, cfg: &TrainConfig) -> Result<(Checkpoint, Vec<EpochLoss>)> {
    train_with(episodes, model, cfg, |_| {})
}

/// `train` with a per-epoch callback.
pub fn train_with(
    episodes: &[Episode],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<(Checkpoint, Vec<EpochLoss>)> {
    if episodes.is_empty() {
        return Err(Error::Input("training needs at least one episode".into()));
    }
    let steps = episodes[0].steps();
    if episodes.iter().any(|e| e.steps() != steps || e.dims() != episodes[0].dims()) {
        return Err(Error::Input("episodes must share step count and motion width".into()));
    }
    let bounds = bounds_over(episodes)?;
    let mut ckpt = Checkpoint::initial(model_cfg, cfg, bounds)?;
    let model = ckpt.build_model()?;
    let seqs = training_sequences(episodes, &ckpt.bounds, model_cfg)?;
    let n = seqs.len() as f64;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let results: Vec<(SequenceMetrics, Vec<Vec<f32>>)> =
            seqs.par_iter().map(|s| sequence_gradients(&model, &ckpt.params, s)).collect::<Result<_>>()?;
        let mut mean = SequenceMetrics::default();
        let mut grads: Vec<Vec<f32>> = ckpt.params.tensors().map(|t| vec![0.0; t.numel()]).collect();
        for (m, g) in &results {
            check_finite(epoch, m)?;
            mean.total += m.total / n;
            mean.keypoints += m.keypoints / n;
            mean.motion += m.motion / n;
            mean.image += m.image / n;
            for (acc, part) in grads.iter_mut().zip(g) {
                for (a, &b) in acc.iter_mut().zip(part) {
                    *a += b;
                }
            }
        }
        let inv = 1.0 / n as f32;
        grads.iter_mut().flatten().for_each(|g| *g *= inv);
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { epoch, term: "gradient" });
        }
        clip_global_norm(&mut grads, cfg.clip);
        ckpt.adam_step += 1;
        for (i, g) in grads.iter().enumerate() {
            let param = ckpt.params.get_mut(i).data_mut();
            adam_update(param, g, ckpt.adam_m[i].data_mut(), ckpt.adam_v[i].data_mut(), ckpt.adam_step, cfg);
        }
        if ckpt.params.tensors().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite { epoch, term: "parameters" });
        }
        ckpt.epoch = epoch;
        let entry =
            EpochLoss { epoch, total: mean.total, k_term: mean.keypoints, a_term: mean.motion, img_term: mean.image };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok((ckpt, log))
}

/// Mean teacher-forced metrics of `ckpt` on `episodes`, normalized with the
/// checkpoint's bounds.
pub fn evaluate_loss(ckpt: &Checkpoint, episodes: &[Episode]) -> Result<SequenceMetrics> {
    let model = ckpt.build_model()?;
    let seqs = training_sequences(episodes, &ckpt.bounds, &ckpt.model)?;
    let n = seqs.len() as f64;
    let mut mean = SequenceMetrics::default();
    for s in &seqs {
        let mut g = Graph::new();
        let p = ckpt.params.bind_frozen(&mut g);
        let (_, m) = model.sequence_loss(&mut g, &p, s)?;
        mean.total += m.total / n;
        mean.keypoints += m.keypoints / n;
        mean.motion += m.motion / n;
        mean.image += m.image / n;
    }
    Ok(mean)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn config_guards() {
        assert!(TrainConfig { lr: 0.0, ..cfg() }.validate().is_err());
        assert!(TrainConfig { clip: -1.0, ..cfg() }.validate().is_err());
        assert!(TrainConfig { beta2: 1.0, ..cfg() }.validate().is_err());
        assert!(cfg().validate().is_ok());
    }

    #[test]
    fn zero_gradient_leaves_param() {
        let mut p = [0.7f32, -2.0];
        let (mut m, mut v) = ([0.0f32; 2], [0.0f32; 2]);
        adam_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, &cfg());
        assert_eq!(p, [0.7, -2.0]);
        assert_eq!((m, v), ([0.0; 2], [0.0; 2]));
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let mut p = [0.0f64; 3];
        let (mut m, mut v) = ([0.0; 3], [0.0; 3]);
        adam_update(&mut p, &[3.0, -0.01, 1e4], &mut m, &mut v, 1, &cfg());
        for (x, s) in p.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - s * 1e-3).abs() < 1e-8, "{x}");
        }
    }

    #[test]
    fn constant_gradient_step_saturates() {
        let c = cfg();
        let mut p = [0.0f64, 0.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        let g = [0.37, -5.0];
        let mut prev = p;
        for t in 1..=1000 {
            prev = p;
            adam_update(&mut p, &g, &mut m, &mut v, t, &c);
        }
        for i in 0..2 {
            let step = prev[i] - p[i];
            let expected = c.lr * g[i].signum();
            assert!(((step - expected) / expected).abs() < 0.01, "{step}");
        }
    }

    #[test]
    fn quadratic_converges() {
        // Loss (x - 0.3)^2 starting at 0; the minimizer is 0.3.
        let c = TrainConfig { lr: 0.01, ..cfg() };
        let mut x = [0.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        for t in 1..=500 {
            let g = [2.0 * (x[0] - 0.3)];
            adam_update(&mut x, &g, &mut m, &mut v, t, &c);
        }
        assert!((x[0] - 0.3).abs() < 1e-3, "{}", x[0]);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![vec![3.0f32, 4.0], vec![12.0]];
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 13.0);
        let after: f64 = g.iter().flatten().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        assert!(after <= 1.0 + 1e-6);
        assert!((g[0][0] - 3.0 / 13.0).abs() < 1e-7);
        let mut small = vec![vec![0.1f32]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }

    #[test]
    fn rng_state_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let _: u64 = rand::Rng::random(&mut rng);
        let s = RngState::capture(9, &rng);
        let mut back = s.restore().unwrap();
        assert_eq!(rand::Rng::random::<u64>(&mut back), rand::Rng::random::<u64>(&mut rng));
    }

    fn bounds() -> NormBounds {
        NormBounds { min: vec![0.0, 0.0, 0.0], max: vec![0.5, 0.3, 1.0] }
    }

    #[test]
    fn initial_checkpoint_round_trips() {
        let ck = Checkpoint::initial(&ModelConfig::new(Variant::Hsarnnst), &cfg(), bounds()).unwrap();
        assert!(ck.adam_m.iter().chain(&ck.adam_v).all(|t| t.data().iter().all(|&v| v == 0.0)));
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(&bytes[..4], b"HSCK");
    }

    #[test]
    fn damaged_checkpoints_are_rejected() {
        let ck = Checkpoint::initial(&ModelConfig::new(Variant::Sarnn), &cfg(), bounds()).unwrap();
        let bytes = ck.to_bytes();
        let cut = Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(cut, Error::Format(FormatError::Truncated { .. })), "{cut}");
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::Format(FormatError::BadMagic { .. }))));
        let mut version = bytes.clone();
        version[4] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&version),
            Err(Error::Format(FormatError::Version { expected: 1, found: 2 }))
        ));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Format(FormatError::TrailingBytes(1)))));
    }

    #[test]
    fn variant_guard() {
        let ck = Checkpoint::initial(&ModelConfig::new(Variant::Sarnn), &cfg(), bounds()).unwrap();
        assert!(ck.expect_variant(Variant::Sarnn).is_ok());
        let err = ck.expect_variant(Variant::Hsarnnst).unwrap_err();
        assert!(err.to_string().contains("SARNN"));
    }
}
