//! Building blocks of the visuomotor model: convolutional encoder, spatial
//! softmax keypoints, keypoint-conditioned image decoder, LSTM cell and
//! linear heads.
//!
//! Blocks hold [`ParamId`]s into a [`ParamStore`]; a forward pass binds the
//! store into a [`Graph`] once and then threads [`Var`]s through the blocks.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numkernel::{Graph, Real, Tensor, Var};

pub const IMAGE_SIZE: usize = 64;
pub const FEATURE_SIZE: usize = 16;
/// Heatmap width in feature-grid pixels.
pub const HEATMAP_SIGMA_PX: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor<T>>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(Arc::new(value));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.tensors.iter().map(|t| &**t)
    }

    /// Mutable access; clones the storage if a graph still shares it.
    pub fn get_mut(&mut self, index: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.tensors[index])
    }

    pub fn replace(&mut self, index: usize, value: Tensor<T>) {
        self.tensors[index] = Arc::new(value);
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Bind every parameter as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| g.param(Arc::clone(t))).collect())
    }

    /// Bind every parameter as a constant (inference).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| g.constant_shared(Arc::clone(t))).collect())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(|t| Arc::new(t.cast())).collect() }
    }
}

/// Parameters bound into one graph.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Vars in parameter order, e.g. leaves created by a gradient check.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

fn xavier<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-limit..limit))).collect();
    Tensor::new(shape, data).expect("positive shape")
}

/// `y = x W + b`; `x` is `[rows, inputs]` and the bias is added to every row.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        inputs: usize,
        outputs: usize,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(rng, &[inputs, outputs], inputs, outputs));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[1, outputs]));
        Self { weight, bias, inputs, outputs }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.weight))?;
        let rows = g.value(x).shape()[0];
        let bias = if rows == 1 {
            p.var(self.bias)
        } else {
            let ones = g.constant(Tensor::full(&[rows, 1], T::one()));
            g.matmul(ones, p.var(self.bias))?
        };
        Ok(g.add(y, bias)?)
    }
}

/// LSTM cell with gate layout `[input, forget, cell, output]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell {
    pub input_weight: ParamId,
    pub hidden_weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub hidden: usize,
}

impl LstmCell {
    /// Xavier-uniform weights; forget-gate bias 1, other biases 0.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        inputs: usize,
        hidden: usize,
    ) -> Self {
        let g4 = 4 * hidden;
        let input_weight = store.add(format!("{name}.w_x"), xavier(rng, &[inputs, g4], inputs, hidden));
        let hidden_weight = store.add(format!("{name}.w_h"), xavier(rng, &[hidden, g4], hidden, hidden));
        let mut b = Tensor::zeros(&[1, g4]);
        b.data_mut()[hidden..2 * hidden].iter_mut().for_each(|v| *v = T::one());
        let bias = store.add(format!("{name}.bias"), b);
        Self { input_weight, hidden_weight, bias, inputs, hidden }
    }

    /// One step: returns `(h', c')`.
    pub fn step<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let expect = |g: &Graph<T>, v: Var, n: usize, what: &str| -> Result<()> {
            if g.value(v).shape() != [1, n] {
                return Err(Error::Input(format!("lstm {what} must be [1, {n}], got {:?}", g.value(v).shape())));
            }
            Ok(())
        };
        expect(g, x, self.inputs, "input")?;
        expect(g, h, self.hidden, "hidden state")?;
        expect(g, c, self.hidden, "cell state")?;
        let n = self.hidden;
        let zx = g.matmul(x, p.var(self.input_weight))?;
        let zh = g.matmul(h, p.var(self.hidden_weight))?;
        let z = g.add(zx, zh)?;
        let z = g.add(z, p.var(self.bias))?;
        let i = g.slice(z, 0, n)?;
        let f = g.slice(z, n, n)?;
        let cand = g.slice(z, 2 * n, n)?;
        let o = g.slice(z, 3 * n, n)?;
        let i = g.sigmoid(i)?;
        let f = g.sigmoid(f)?;
        let cand = g.tanh(cand)?;
        let o = g.sigmoid(o)?;
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c2 = g.add(keep, write)?;
        let squashed = g.tanh(c2)?;
        let h2 = g.mul(o, squashed)?;
        Ok((h2, c2))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

/// Three 3x3 convolutions, 1 -> 8 -> 16 -> 8 channels, 64x64 -> 16x16.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvEncoder {
    pub layers: [ConvLayer; 3],
}

/// `(in, out, stride)` of each encoder convolution.
pub const ENCODER_LAYOUT: [(usize, usize, usize); 3] = [(1, 8, 2), (8, 16, 2), (16, 8, 1)];

impl ConvEncoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Self {
        let layers = ENCODER_LAYOUT.map(|(cin, cout, stride)| {
            let idx = store.len();
            let weight =
                store.add(format!("encoder.conv{idx}.weight"), xavier(rng, &[cout, cin, 3, 3], cin * 9, cout * 9));
            let bias = store.add(format!("encoder.conv{idx}.bias"), Tensor::zeros(&[cout]));
            ConvLayer { weight, bias, stride, padding: 1 }
        });
        Self { layers }
    }

    pub fn channels(&self) -> usize {
        ENCODER_LAYOUT[2].1
    }

    /// Feature map `[8, 16, 16]`; ReLU after the first two layers only.
    pub fn features<T: Real>(&self, g: &mut Graph<T>, p: &Bound, image: Var) -> Result<Var> {
        let shape = g.value(image).shape();
        if shape != [1, IMAGE_SIZE, IMAGE_SIZE] {
            return Err(Error::Input(format!("image must be [1, {IMAGE_SIZE}, {IMAGE_SIZE}], got {shape:?}")));
        }
        let mut x = image;
        for (i, layer) in self.layers.iter().enumerate() {
            x = g.conv2d(x, p.var(layer.weight), p.var(layer.bias), layer.stride, layer.padding)?;
            if i + 1 < self.layers.len() {
                x = g.relu(x)?;
            }
        }
        Ok(x)
    }

    /// Features and their spatial-softmax keypoints `[1, 2C]`.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, p: &Bound, image: Var) -> Result<(Var, Var)> {
        let features = self.features(g, p, image)?;
        let keypoints = spatial_softmax(g, features, 1.0)?;
        Ok((features, keypoints))
    }
}

/// Expected `(x, y)` location of each channel's softmax over its cells.
///
/// `features` is `[C, H, W]`; the result is a `[1, 2C]` row laid out as
/// `[x0, y0, x1, y1, ...]` with `x` along columns and `y` along rows, both
/// spanning `[-1, 1]`.
pub fn spatial_softmax<T: Real>(g: &mut Graph<T>, features: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("spatial softmax temperature must be positive, got {temperature}")));
    }
    let shape = g.value(features).shape().to_vec();
    if shape.len() != 3 || shape[1] < 2 || shape[2] < 2 {
        return Err(Error::Input(format!("spatial softmax needs [C, H>=2, W>=2], got {shape:?}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let flat = g.reshape(features, &[c, h * w])?;
    let flat = if temperature != 1.0 { g.scale(flat, 1.0 / temperature)? } else { flat };
    let weights = g.softmax(flat)?;
    let grid = g.constant(coordinate_grid(h, w));
    let kp = g.matmul(weights, grid)?;
    Ok(g.reshape(kp, &[1, 2 * c])?)
}

/// `[H*W, 2]` table of cell coordinates `(x, y)`.
pub fn coordinate_grid<T: Real>(h: usize, w: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(2 * h * w);
    for r in 0..h {
        for c in 0..w {
            data.push(T::of(-1.0 + 2.0 * c as f64 / (w - 1) as f64));
            data.push(T::of(-1.0 + 2.0 * r as f64 / (h - 1) as f64));
        }
    }
    Tensor::new(&[h * w, 2], data).expect("positive grid")
}

/// Keypoint vector `[x0, y0, ..., x_{C-1}, y_{C-1}]` in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Keypoints<T>(Vec<T>);

impl<T: Real> Keypoints<T> {
    pub fn new(coords: Vec<T>) -> Result<Self> {
        if !coords.len().is_multiple_of(2) {
            return Err(Error::Input(format!("{} keypoint scalars is not a list of pairs", coords.len())));
        }
        if coords.iter().any(|v| !(v.abs() <= T::one())) {
            return Err(Error::Input("keypoint outside [-1, 1]".into()));
        }
        Ok(Self(coords))
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len() / 2
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn x(&self, i: usize) -> T {
        self.0[2 * i]
    }

    pub fn y(&self, i: usize) -> T {
        self.0[2 * i + 1]
    }
}

/// Spatial softmax on a plain tensor.
pub fn spatial_softmax_values<T: Real>(features: &Tensor<T>, temperature: f64) -> Result<Keypoints<T>> {
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let kp = spatial_softmax(&mut g, f, temperature)?;
    // Rounding can leave a coordinate a hair outside the unit box.
    let coords = g.value(kp).data().iter().map(|v| v.max(-T::one()).min(T::one())).collect();
    Keypoints::new(coords)
}

/// Encoder forward pass on a plain image.
pub fn encode_image<T: Real>(
    store: &ParamStore<T>,
    encoder: &ConvEncoder,
    image: &Tensor<T>,
) -> Result<(Tensor<T>, Keypoints<T>)> {
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let x = g.constant(image.clone());
    let features = encoder.features(&mut g, &p, x)?;
    let features = g.value(features).clone();
    let keypoints = spatial_softmax_values(&features, 1.0)?;
    Ok((features, keypoints))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeconvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

/// Renders keypoints as Gaussian heatmaps on the 16x16 feature grid, then
/// upsamples through three transposed convolutions to a `[1, 64, 64]`
/// image in `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDecoder {
    pub layers: [DeconvLayer; 3],
    pub channels: usize,
}

impl ImageDecoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, channels: usize) -> Self {
        let layout = [(channels, 16, 1, 0), (16, 8, 2, 1), (8, 1, 2, 1)];
        let layers = layout.map(|(cin, cout, stride, output_padding)| {
            let idx = store.len();
            let weight =
                store.add(format!("decoder.deconv{idx}.weight"), xavier(rng, &[cin, cout, 3, 3], cout * 9, cin * 9));
            let bias = store.add(format!("decoder.deconv{idx}.bias"), Tensor::zeros(&[cout]));
            DeconvLayer { weight, bias, stride, padding: 1, output_padding }
        });
        Self { layers, channels }
    }

    pub fn heatmap_sigma() -> f64 {
        HEATMAP_SIGMA_PX * 2.0 / (FEATURE_SIZE - 1) as f64
    }

    pub fn decode<T: Real>(&self, g: &mut Graph<T>, p: &Bound, keypoints: Var) -> Result<Var> {
        if g.value(keypoints).numel() != 2 * self.channels {
            return Err(Error::Input(format!(
                "decoder expects {} keypoint scalars, got {}",
                2 * self.channels,
                g.value(keypoints).numel()
            )));
        }
        let mut x = g.gaussian_heatmap(keypoints, FEATURE_SIZE, FEATURE_SIZE, Self::heatmap_sigma())?;
        for (i, layer) in self.layers.iter().enumerate() {
            x = g.deconv2d(
                x,
                p.var(layer.weight),
                p.var(layer.bias),
                layer.stride,
                layer.padding,
                layer.output_padding,
            )?;
            x = if i + 1 < self.layers.len() { g.relu(x)? } else { g.sigmoid(x)? };
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn kp_of(features: Tensor<f64>) -> Keypoints<f64> {
        spatial_softmax_values(&features, 1.0).unwrap()
    }

    #[test]
    fn uniform_map_gives_centre() {
        let kp = kp_of(Tensor::zeros(&[1, 4, 4]));
        assert!(kp.x(0).abs() < 1e-15 && kp.y(0).abs() < 1e-15);
    }

    #[test]
    fn single_hot_cell_gives_its_coordinate() {
        let mut f = Tensor::zeros(&[1, 4, 4]);
        f.data_mut()[4 + 2] = 100.0;
        let kp = kp_of(f);
        assert!((kp.x(0) - 1.0 / 3.0).abs() < 1e-6, "{kp:?}");
        assert!((kp.y(0) + 1.0 / 3.0).abs() < 1e-6, "{kp:?}");
    }

    #[test]
    fn mirrored_channel_mirrors_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut data = vec![0.0f64; 2 * 16];
        for r in 0..4 {
            for c in 0..4 {
                let v = rng.random_range(-2.0..2.0);
                data[r * 4 + c] = v;
                data[16 + r * 4 + (3 - c)] = v;
            }
        }
        let kp = kp_of(Tensor::new(&[2, 4, 4], data).unwrap());
        assert!((kp.x(0) + kp.x(1)).abs() < 1e-6);
        assert!((kp.y(0) - kp.y(1)).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_temperature() {
        let f = Tensor::<f64>::zeros(&[1, 4, 4]);
        assert!(matches!(spatial_softmax_values(&f, 0.0), Err(Error::Config(_))));
        assert!(matches!(spatial_softmax_values(&f, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn lstm_zero_everything_stays_zero() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = LstmCell::new(&mut store, &mut rng, "l", 3, 4);
        for i in 0..store.len() {
            let z = Tensor::zeros_like(store.get_mut(i));
            store.replace(i, z);
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[1, 3]));
        let h = g.constant(Tensor::zeros(&[1, 4]));
        let c = g.constant(Tensor::zeros(&[1, 4]));
        let (h2, c2) = cell.step(&mut g, &p, x, h, c).unwrap();
        assert_eq!(g.value(h2).data(), &[0.0; 4]);
        assert_eq!(g.value(c2).data(), &[0.0; 4]);
    }

    #[test]
    fn lstm_forget_gate_scales_cell() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = LstmCell::new(&mut store, &mut rng, "l", 2, 3);
        let zero_w = Tensor::zeros_like(store.get(cell.input_weight));
        store.replace(cell.input_weight.index(), zero_w);
        let zero_h = Tensor::zeros_like(store.get(cell.hidden_weight));
        store.replace(cell.hidden_weight.index(), zero_h);
        let bf = 1.7;
        let mut b = Tensor::zeros(&[1, 12]);
        b.data_mut()[3..6].iter_mut().for_each(|v| *v = bf);
        store.replace(cell.bias.index(), b);
        let c0 = [0.5, -1.25, 2.0];
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Tensor::row(vec![0.3, -0.2]));
        let h = g.constant(Tensor::row(vec![0.1, 0.2, 0.3]));
        let c = g.constant(Tensor::row(c0.to_vec()));
        let (_, c2) = cell.step(&mut g, &p, x, h, c).unwrap();
        let s = 1.0 / (1.0 + (-bf).exp());
        for (got, want) in g.value(c2).data().iter().zip(c0) {
            assert!((got - s * want).abs() < 1e-15);
        }
    }

    #[test]
    fn lstm_forget_bias_initialised_to_one() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = LstmCell::new(&mut store, &mut rng, "l", 5, 6);
        let b = store.get(cell.bias).data();
        assert!(b[6..12].iter().all(|&v| v == 1.0));
        assert!(b[..6].iter().chain(&b[12..]).all(|&v| v == 0.0));
        assert_eq!(store.get(cell.input_weight).shape(), &[5, 24]);
        assert_eq!(store.get(cell.hidden_weight).shape(), &[6, 24]);
    }

    #[test]
    fn lstm_rejects_wrong_shapes() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = LstmCell::new(&mut store, &mut rng, "l", 2, 3);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[1, 5]));
        let h = g.constant(Tensor::zeros(&[1, 3]));
        assert!(cell.step(&mut g, &p, x, h, h).is_err());
    }

    #[test]
    fn encoder_shape_audit() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = ConvEncoder::new(&mut store, &mut rng);
        assert_eq!(store.scalar_count(), (8 * 9 + 8) + (16 * 8 * 9 + 16) + (8 * 16 * 9 + 8));
        let image = Tensor::zeros(&[1, 64, 64]);
        let (features, kp) = encode_image(&store, &enc, &image).unwrap();
        assert_eq!(features.shape(), &[8, 16, 16]);
        assert_eq!(kp.as_slice().len(), 16);
        let (f2, kp2) = encode_image(&store, &enc, &image).unwrap();
        assert_eq!(features, f2);
        assert_eq!(kp, kp2);
        assert!(encode_image(&store, &enc, &Tensor::zeros(&[1, 32, 32])).is_err());
    }

    #[test]
    fn heatmap_peaks_at_grid_centre() {
        let mut g = Graph::<f64>::new();
        let kp = g.constant(Tensor::row(vec![0.0, 0.0]));
        let h = g.gaussian_heatmap(kp, 16, 16, ImageDecoder::heatmap_sigma()).unwrap();
        let data = g.value(h).data();
        let best = data.iter().cloned().fold(f64::MIN, f64::max);
        // A 16-cell grid has no centre cell; the four central cells tie.
        for (r, c) in [(7, 7), (7, 8), (8, 7), (8, 8)] {
            assert_eq!(data[r * 16 + c], best);
        }
        let argmax = data.iter().position(|&v| v == best).unwrap();
        assert_eq!((argmax / 16, argmax % 16), (7, 7));
    }

    #[test]
    fn decoder_is_deterministic_and_bounded() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dec = ImageDecoder::new(&mut store, &mut rng, 8);
        let run = || {
            let mut g = Graph::new();
            let p = store.bind_frozen(&mut g);
            let kp = g.constant(Tensor::row((0..16).map(|i| (i as f32 / 8.0) - 1.0).collect()));
            let img = dec.decode(&mut g, &p, kp).unwrap();
            g.value(img).clone()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[1, 64, 64]);
        assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
