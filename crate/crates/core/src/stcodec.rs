//! Softmax transformation of motion scalars.
//!
//! Each normalized motion value is represented by a distribution over `B`
//! evenly spaced bin centers. Targets are Gaussian bumps around the true
//! value; predictions are decoded by taking the center of the most probable
//! bin.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{Graph, Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StCodecConfig {
    pub bins: usize,
    pub lo: f64,
    pub hi: f64,
    /// Teacher bump width, in bins.
    pub sigma_bins: f64,
}

impl Default for StCodecConfig {
    fn default() -> Self {
        Self { bins: 2000, lo: -1.0, hi: 1.0, sigma_bins: 10.0 }
    }
}

impl StCodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::Config(format!("need at least 2 bins, got {}", self.bins)));
        }
        if !(self.hi > self.lo) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::Config(format!("need finite lo < hi, got [{}, {}]", self.lo, self.hi)));
        }
        if !(self.sigma_bins > 0.0) {
            return Err(Error::Config(format!("sigma_bins must be positive, got {}", self.sigma_bins)));
        }
        Ok(())
    }

    /// Bin spacing `(hi - lo) / (B - 1)`.
    pub fn delta(&self) -> f64 {
        (self.hi - self.lo) / (self.bins - 1) as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lo + (self.hi - self.lo) * i as f64 / (self.bins - 1) as f64
    }

    /// Position of `x` in bin units.
    fn bin_coord(&self, x: f64) -> f64 {
        (x - self.lo) * (self.bins - 1) as f64 / (self.hi - self.lo)
    }
}

/// Length-`B` probability vector.
#[derive(Clone, Debug, PartialEq)]
pub struct BinDistribution(Vec<f64>);

impl BinDistribution {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::Input("empty distribution".into()));
        }
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Input("distribution has negative or non-finite entries".into()));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Input(format!("distribution sums to {s}")));
        }
        Ok(Self(p))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// First index of the maximum; NaN entries are never selected.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] || values[best].partial_cmp(&values[best]).is_none() {
            best = i;
        }
    }
    best
}

/// Encoder/decoder bound to one configuration. Counts clamped inputs.
#[derive(Debug)]
pub struct StCodec {
    cfg: StCodecConfig,
    clamped: AtomicU64,
}

impl Clone for StCodec {
    fn clone(&self) -> Self {
        Self { cfg: self.cfg, clamped: AtomicU64::new(self.clamped()) }
    }
}

impl StCodec {
    pub fn new(cfg: StCodecConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, clamped: AtomicU64::new(0) })
    }

    pub fn config(&self) -> &StCodecConfig {
        &self.cfg
    }

    /// Number of inputs that fell outside `[lo, hi]` so far.
    pub fn clamped(&self) -> u64 {
        self.clamped.load(Ordering::Relaxed)
    }

    /// Writes the teacher distribution for `x` into `out` (length `B`).
    pub fn encode_into<T: Real>(&self, x: f64, out: &mut [T]) {
        let c = &self.cfg;
        let x = if x < c.lo || x > c.hi || x.is_nan() {
            self.clamped.fetch_add(1, Ordering::Relaxed);
            if x.is_nan() {
                c.lo
            } else {
                x.clamp(c.lo, c.hi)
            }
        } else {
            x
        };
        let u = c.bin_coord(x);
        let inv = -0.5 / (c.sigma_bins * c.sigma_bins);
        let mut w: Vec<f64> = (0..c.bins)
            .map(|i| {
                let d = i as f64 - u;
                (d * d * inv).exp()
            })
            .collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        for (o, v) in out.iter_mut().zip(w) {
            *o = T::of(v);
        }
    }

    pub fn encode(&self, x: f64) -> BinDistribution {
        let mut p = vec![0.0f64; self.cfg.bins];
        self.encode_into(x, &mut p);
        BinDistribution(p)
    }

    pub fn decode(&self, p: &BinDistribution) -> Result<f64> {
        self.decode_slice(p.probs())
    }

    /// Center of the largest entry; ties go to the lower index. Works on
    /// logits as well as probabilities.
    pub fn decode_slice<T: Real>(&self, p: &[T]) -> Result<f64> {
        if p.len() != self.cfg.bins {
            return Err(Error::Input(format!("expected {} bins, got {}", self.cfg.bins, p.len())));
        }
        if p.iter().any(|v| v.is_nan()) {
            return Err(Error::Input("distribution contains NaN".into()));
        }
        Ok(self.cfg.center(argmax(p)))
    }
}

/// Mean over motion dimensions of the cross-entropy between
/// `softmax(logits[d])` and `targets[d]`. Both are `[D, B]`.
pub fn st_loss<T: Real>(g: &mut Graph<T>, logits: Var, targets: Var) -> Result<Var> {
    let (ls, ts) = (g.value(logits).shape(), g.value(targets).shape());
    if ls.len() != 2 || ls != ts {
        return Err(Error::Input(format!("st_loss: logits {ls:?} vs targets {ts:?}")));
    }
    Ok(g.cross_entropy(logits, targets)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::Tensor;

    fn codec() -> StCodec {
        StCodec::new(StCodecConfig::default()).unwrap()
    }

    #[test]
    fn config_validation() {
        let bad = [
            StCodecConfig { bins: 1, ..Default::default() },
            StCodecConfig { hi: -1.0, ..Default::default() },
            StCodecConfig { sigma_bins: 0.0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(StCodec::new(cfg).is_err());
        }
    }

    #[test]
    fn lower_bound_encodes_to_first_bin() {
        let c = codec();
        let p = c.encode(-1.0);
        assert_eq!(p.argmax(), 0);
        assert!(p.probs().windows(2).all(|w| w[0] >= w[1]));
        assert!(p.probs()[0] > p.probs()[1]);
    }

    #[test]
    fn bin_centre_is_a_fixed_point() {
        let c = codec();
        let x = c.config().center(999);
        assert!((x + 1.0 / 1999.0).abs() < 1e-15);
        assert_eq!(c.config().center(0), -1.0);
        assert_eq!(c.config().center(1999), 1.0);
        let p = c.encode(x);
        assert_eq!(p.argmax(), 999);
        assert_eq!(c.decode(&p).unwrap(), x);
    }

    #[test]
    fn zero_ties_break_low() {
        let c = codec();
        // Oracle: scan every center for the nearest one, lower index on ties.
        let mut best = (f64::INFINITY, 0);
        for i in 0..2000 {
            let d = (c.config().center(i) - 0.0).abs();
            if d < best.0 - 1e-15 {
                best = (d, i);
            }
        }
        assert_eq!(best.1, 999);
        let p = c.encode(0.0);
        assert_eq!(p.argmax(), 999);
        assert_eq!(p.probs()[999], p.probs()[1000]);
        let err = c.decode(&p).unwrap().abs();
        assert!((err - 1.0 / 1999.0).abs() < 1e-15);
        assert!(err <= c.config().delta() / 2.0 + 1e-15);
    }

    #[test]
    fn decode_rules() {
        let c = codec();
        let mut onehot = vec![0.0; 2000];
        onehot[0] = 1.0;
        assert_eq!(c.decode(&BinDistribution::new(onehot).unwrap()).unwrap(), -1.0);
        let uniform = BinDistribution::new(vec![1.0 / 2000.0; 2000]).unwrap();
        assert_eq!(c.decode(&uniform).unwrap(), -1.0);
        assert!(c.decode_slice(&[0.0f64; 3]).is_err());
        let mut nan = vec![0.0f64; 2000];
        nan[5] = f64::NAN;
        assert!(c.decode_slice(&nan).is_err());
        assert!(BinDistribution::new(vec![]).is_err());
    }

    #[test]
    fn out_of_range_is_clamped_and_counted() {
        let c = codec();
        assert_eq!(c.clamped(), 0);
        let p = c.encode(1.5);
        assert_eq!(c.clamped(), 1);
        assert_eq!(p.argmax(), 1999);
        c.encode(-3.0);
        assert_eq!(c.clamped(), 2);
        c.encode(0.25);
        assert_eq!(c.clamped(), 2);
    }

    #[test]
    fn st_loss_at_target_equals_entropy() {
        let c = StCodec::new(StCodecConfig { bins: 50, ..Default::default() }).unwrap();
        let targets: Vec<BinDistribution> = [0.3, -0.8].iter().map(|&x| c.encode(x)).collect();
        let logits: Vec<f64> = targets.iter().flat_map(|p| p.probs().iter().map(|v| v.ln())).collect();
        let tdata: Vec<f64> = targets.iter().flat_map(|p| p.probs().to_vec()).collect();
        let entropy: f64 = targets
            .iter()
            .map(|p| -p.probs().iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>())
            .sum::<f64>()
            / 2.0;
        let mut g = Graph::new();
        let l = g.constant(Tensor::new(&[2, 50], logits).unwrap());
        let t = g.constant(Tensor::new(&[2, 50], tdata).unwrap());
        let loss = st_loss(&mut g, l, t).unwrap();
        assert!((g.value(loss).data()[0] - entropy).abs() < 1e-9);
        let bad = g.constant(Tensor::zeros(&[2, 49]));
        assert!(st_loss(&mut g, l, bad).is_err());
    }
}
