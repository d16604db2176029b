//! Finite-difference checks of every opcode and every composite block.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::modelcore::{Model, ModelConfig, TrainingSequence, Variant};
use crate::netblocks::{spatial_softmax, Bound, ConvEncoder, ImageDecoder, LstmCell, ParamStore, IMAGE_SIZE};
use crate::numkernel::{
    grad_check, grad_check_fn, Attrs, GradCheckReport, Graph, KernelError, OpChain, OpCode, Tensor, Var,
};
use crate::stcodec::{st_loss, StCodec, StCodecConfig};

pub const GRAD_TOLERANCE: f64 = 1e-4;
const OP_SEEDS: u64 = 5;
/// Entries compared per tensor in block checks.
const BLOCK_SAMPLES: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCase {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradSuiteReport {
    pub tolerance: f64,
    pub cases: Vec<GradCase>,
}

impl GradSuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn worst(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }
}

fn case(name: impl Into<String>, reports: &[GradCheckReport]) -> GradCase {
    let max_rel_error = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    GradCase {
        name: name.into(),
        max_rel_error,
        checked: reports.iter().map(|r| r.checked).sum(),
        passed: max_rel_error < GRAD_TOLERANCE && max_rel_error.is_finite(),
    }
}

/// Two input shapes, with matching attributes, per opcode.
pub fn op_configs(op: OpCode) -> [(Attrs, Vec<usize>); 2] {
    let plain = |a: &[usize], b: &[usize]| [(Attrs::None, a.to_vec()), (Attrs::None, b.to_vec())];
    match op {
        OpCode::MatMul => plain(&[2, 4], &[3, 5]),
        OpCode::Conv2d => [
            (Attrs::Conv { stride: 1, padding: 1 }, vec![1, 5, 5]),
            (Attrs::Conv { stride: 2, padding: 1 }, vec![2, 6, 4]),
        ],
        OpCode::Deconv2d => [
            (Attrs::Deconv { stride: 2, padding: 1, output_padding: 1 }, vec![2, 3, 3]),
            (Attrs::Deconv { stride: 1, padding: 1, output_padding: 0 }, vec![1, 4, 2]),
        ],
        OpCode::SoftmaxLastDim | OpCode::CrossEntropyLoss => plain(&[2, 5], &[9]),
        OpCode::Slice => {
            [(Attrs::Slice { start: 1, len: 2 }, vec![3, 4]), (Attrs::Slice { start: 0, len: 3 }, vec![5])]
        }
        OpCode::Scale => [(Attrs::Scale(-1.5), vec![3, 4]), (Attrs::Scale(0.25), vec![6])],
        OpCode::Reshape => [(Attrs::Reshape(vec![4, 3]), vec![3, 4]), (Attrs::Reshape(vec![2, 3]), vec![6])],
        OpCode::GaussianHeatmap => [
            (Attrs::Heatmap { height: 6, width: 5, sigma: 0.4 }, vec![1, 6]),
            (Attrs::Heatmap { height: 4, width: 7, sigma: 0.3 }, vec![1, 2]),
        ],
        _ => plain(&[3, 4], &[6]),
    }
}

/// One opcode over both shape configurations and five seeds.
pub fn check_op(op: OpCode) -> Result<GradCase> {
    let mut reports = Vec::new();
    for (attrs, shape) in op_configs(op) {
        let chain = OpChain::with_attrs(vec![(op, attrs)]);
        for seed in 0..OP_SEEDS {
            reports.push(grad_check(&chain, &shape, seed)?);
        }
    }
    Ok(case(op.name(), &reports))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("positive shape")
}

/// Copy of `store` with every entry shifted by up to 0.1. Zero-initialized
/// biases put many ReLU inputs exactly on the kink.
fn off_kink(store: &ParamStore<f64>, seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut out = store.clone();
    for i in 0..out.len() {
        out.get_mut(i).data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    }
    out
}

/// Check `loss` with every tensor in `store` plus `extra` as leaves.
fn check_block<F>(store: &ParamStore<f64>, extra: &[Tensor<f64>], seed: u64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &Bound, &[Var]) -> Result<Var>,
{
    let mut inputs: Vec<Tensor<f64>> = store.tensors().cloned().collect();
    let n = inputs.len();
    inputs.extend_from_slice(extra);
    let report = grad_check_fn(&inputs, Some((BLOCK_SAMPLES, seed)), |g, vars| {
        let bound = Bound::from_vars(vars[..n].to_vec());
        loss(g, &bound, &vars[n..]).map_err(|e| match e {
            Error::Kernel(k) => k,
            other => KernelError::InvalidShape(other.to_string()),
        })
    })?;
    Ok(report)
}

fn encoder_case(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let encoder = ConvEncoder::new(&mut store, &mut rng);
    let image = uniform(&mut rng, &[1, IMAGE_SIZE, IMAGE_SIZE], 0.0, 1.0);
    let target = uniform(&mut rng, &[1, 2 * encoder.channels()], -1.0, 1.0);
    check_block(&off_kink(&store, seed), &[image, target], seed, |g, p, x| {
        let (_, k) = encoder.encode(g, p, x[0])?;
        Ok(g.mse_loss(k, x[1])?)
    })
}

fn spatial_softmax_case(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = uniform(&mut rng, &[3, 5, 6], -2.0, 2.0);
    let target = uniform(&mut rng, &[1, 6], -1.0, 1.0);
    check_block(&ParamStore::new(), &[features, target], seed, |g, _, x| {
        let k = spatial_softmax(g, x[0], 1.0)?;
        Ok(g.mse_loss(k, x[1])?)
    })
}

fn lstm_case(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cell = LstmCell::new(&mut store, &mut rng, "cell", 4, 5);
    let extra = [
        uniform(&mut rng, &[3, 4], -1.0, 1.0),
        uniform(&mut rng, &[1, 5], -0.5, 0.5),
        uniform(&mut rng, &[1, 5], -0.5, 0.5),
        uniform(&mut rng, &[1, 5], -1.0, 1.0),
    ];
    check_block(&off_kink(&store, seed), &extra, seed, |g, p, x| {
        let (mut h, mut c) = (x[1], x[2]);
        let flat = g.reshape(x[0], &[12])?;
        for t in 0..3 {
            let row = g.slice(flat, 4 * t, 4)?;
            let row = g.reshape(row, &[1, 4])?;
            (h, c) = cell.step(g, p, row, h, c)?;
        }
        let hc = g.add(h, c)?;
        Ok(g.mse_loss(hc, x[3])?)
    })
}

fn decoder_case(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let channels = 4;
    let decoder = ImageDecoder::new(&mut store, &mut rng, channels);
    let keypoints = uniform(&mut rng, &[1, 2 * channels], -0.8, 0.8);
    let target = uniform(&mut rng, &[1, IMAGE_SIZE, IMAGE_SIZE], 0.0, 1.0);
    check_block(&off_kink(&store, seed), &[keypoints, target], seed, |g, p, x| {
        let img = decoder.decode(g, p, x[0])?;
        Ok(g.mse_loss(img, x[1])?)
    })
}

fn st_loss_case(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = StCodecConfig { bins: 40, sigma_bins: 2.0, ..Default::default() };
    let codec = StCodec::new(cfg)?;
    let logits = uniform(&mut rng, &[3, cfg.bins], -2.0, 2.0);
    let mut targets = vec![0.0; 3 * cfg.bins];
    for row in targets.chunks_exact_mut(cfg.bins) {
        codec.encode_into(rng.random_range(-1.0..1.0), row);
    }
    let targets = Tensor::new(&[3, cfg.bins], targets)?;
    check_block(&ParamStore::new(), &[logits], seed, move |g, _, x| {
        let t = g.constant(targets.clone());
        st_loss(g, x[0], t)
    })
}

/// Teacher-forced loss over five random steps of a full-size model.
fn sequence_case(variant: Variant, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig::new(variant);
    let (model, store) = Model::new::<f64>(&cfg, &mut rng)?;
    let images = (0..5).map(|_| uniform(&mut rng, &[1, IMAGE_SIZE, IMAGE_SIZE], 0.0, 1.0)).collect();
    let motions = (0..5).map(|_| (0..cfg.motion_dims).map(|_| rng.random_range(-0.9..0.9)).collect()).collect();
    let seq = TrainingSequence::new(images, motions, cfg.st.as_ref())?;
    let store = off_kink(&store, seed);
    let targets = model.keypoint_targets(&store, &seq)?;
    check_block(&store, &[], seed, |g, p, _| Ok(model.sequence_loss_frozen(g, p, &seq, &targets)?.0))
}

pub type BlockRunner = Box<dyn Fn(u64) -> Result<GradCheckReport>>;

/// Composite block checks as `(name, runner)`.
pub fn block_cases() -> Vec<(String, BlockRunner)> {
    let mut cases: Vec<(String, BlockRunner)> = vec![
        ("conv_encoder".into(), Box::new(encoder_case)),
        ("spatial_softmax".into(), Box::new(spatial_softmax_case)),
        ("lstm_3_steps".into(), Box::new(lstm_case)),
        ("image_decoder".into(), Box::new(decoder_case)),
        ("st_loss".into(), Box::new(st_loss_case)),
    ];
    for v in Variant::ALL {
        cases.push((format!("sequence_loss_t5_{}", v.name()), Box::new(move |s| sequence_case(v, s))));
    }
    cases
}

/// Every opcode over five seeds, then every block over two seeds.
pub fn run_grad_suite() -> Result<GradSuiteReport> {
    let mut cases = Vec::new();
    for op in OpCode::ALL {
        cases.push(check_op(op)?);
    }
    for (name, run) in block_cases() {
        let reports = (0..2).map(&run).collect::<Result<Vec<_>>>()?;
        cases.push(case(name, &reports));
    }
    Ok(GradSuiteReport { tolerance: GRAD_TOLERANCE, cases })
}
