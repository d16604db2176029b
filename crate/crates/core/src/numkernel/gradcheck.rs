use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Attrs, Graph, OpCode, Var};
use super::tensor::Tensor;
use super::KernelError;

/// Finite-difference steps, tried in order. A central stencil that
/// straddles a ReLU kink averages the two one-sided slopes while the
/// analytic gradient takes one of them. A small step loses digits to
/// roundoff, which swamps gradients near 1e-9 unless the step grows. Each
/// entry is scored by its best agreement over the central and both
/// one-sided differences at every step.
pub const FD_STEPS: [f64; 5] = [1e-5, 1e-6, 1e-7, 1e-4, 1e-3];
/// Agreement good enough to skip the smaller steps.
const REFINE_BELOW: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// Number of scalar entries compared.
    pub checked: usize,
    /// `(input index, element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    /// `(analytic, numeric)` at the worst entry.
    pub worst_values: Option<(f64, f64)>,
}

/// Compare reverse-mode gradients of `f` against central differences.
///
/// Every tensor in `inputs` is bound as a trainable leaf. With
/// `sample = Some((k, seed))` at most `k` entries per input are compared,
/// drawn without replacement.
pub fn grad_check_fn<F>(
    inputs: &[Tensor<f64>],
    sample: Option<(usize, u64)>,
    f: F,
) -> Result<GradCheckReport, KernelError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, KernelError>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64, KernelError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut rng = sample.map(|(_, seed)| ChaCha8Rng::seed_from_u64(seed));
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, worst: None, worst_values: None };
    let base = eval(inputs)?;
    let mut work = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        let mut idx: Vec<usize> = (0..t.numel()).collect();
        if let (Some((k, _)), Some(rng)) = (sample, rng.as_mut()) {
            if k < idx.len() {
                for i in 0..k {
                    let j = rng.random_range(i..idx.len());
                    idx.swap(i, j);
                }
                idx.truncate(k);
                idx.sort_unstable();
            }
        }
        for e in idx {
            let orig = t.data()[e];
            let a = analytic[ti][e];
            let mut best: Option<(f64, f64)> = None;
            for h in FD_STEPS {
                work[ti].data_mut()[e] = orig + h;
                let up = eval(&work)?;
                work[ti].data_mut()[e] = orig - h;
                let down = eval(&work)?;
                work[ti].data_mut()[e] = orig;
                for numeric in [(up - down) / (2.0 * h), (up - base) / h, (base - down) / h] {
                    let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                    if best.is_none_or(|(r, _)| rel < r) {
                        best = Some((rel, numeric));
                    }
                }
                let rel = best.expect("scored above").0;
                if rel < REFINE_BELOW {
                    break;
                }
            }
            let (rel, numeric) = best.expect("at least one step");
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((ti, e));
                report.worst_values = Some((a, numeric));
            }
        }
    }
    Ok(report)
}

/// A chain of operators applied to one random input, closed by a loss.
///
/// Binary operators draw their second operand at random; if the chain does
/// not end in a loss, an MSE against a random target is appended.
#[derive(Clone, Debug, PartialEq)]
pub struct OpChain {
    pub steps: Vec<(OpCode, Attrs)>,
}

impl OpChain {
    pub fn new(ops: &[OpCode]) -> Self {
        Self { steps: ops.iter().map(|&op| (op, default_attrs(op))).collect() }
    }

    pub fn with_attrs(steps: Vec<(OpCode, Attrs)>) -> Self {
        Self { steps }
    }

    pub fn describe(&self) -> String {
        self.steps.iter().map(|(op, _)| op.name()).collect::<Vec<_>>().join("->")
    }
}

fn default_attrs(op: OpCode) -> Attrs {
    match op {
        OpCode::Conv2d => Attrs::Conv { stride: 1, padding: 1 },
        OpCode::Deconv2d => Attrs::Deconv { stride: 2, padding: 1, output_padding: 1 },
        OpCode::Slice => Attrs::Slice { start: 1, len: 2 },
        OpCode::Scale => Attrs::Scale(-1.5),
        OpCode::GaussianHeatmap => Attrs::Heatmap { height: 6, width: 5, sigma: 0.4 },
        _ => Attrs::None,
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("positive shape")
}

fn random_distribution(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = random_tensor(rng, shape);
    let w = *shape.last().unwrap();
    for row in t.data_mut().chunks_exact_mut(w) {
        row.iter_mut().for_each(|v| *v = (2.0 * *v).exp());
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    t
}

enum Operand {
    None,
    One(Tensor<f64>),
    Two(Tensor<f64>, Tensor<f64>),
}

/// Run a finite-difference check over `chain` starting from an input of
/// shape `shape`, with all random draws derived from `seed`.
pub fn grad_check(chain: &OpChain, shape: &[usize], seed: u64) -> Result<GradCheckReport, KernelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = random_tensor(&mut rng, shape);

    // Dry run in a scratch graph to learn operand shapes.
    let mut operands = Vec::new();
    let mut g = Graph::new();
    let mut cur = g.constant(x0.clone());
    let mut closed = false;
    for (op, attrs) in &chain.steps {
        let s = g.value(cur).shape().to_vec();
        let operand = match op {
            OpCode::MatMul => Operand::One(random_tensor(&mut rng, &[*s.last().unwrap(), 3])),
            OpCode::Conv2d => Operand::Two(random_tensor(&mut rng, &[2, s[0], 3, 3]), random_tensor(&mut rng, &[2])),
            OpCode::Deconv2d => Operand::Two(random_tensor(&mut rng, &[s[0], 2, 3, 3]), random_tensor(&mut rng, &[2])),
            OpCode::Add | OpCode::Mul | OpCode::MseLoss => Operand::One(random_tensor(&mut rng, &s)),
            OpCode::CrossEntropyLoss => Operand::One(random_distribution(&mut rng, &s)),
            OpCode::Concat => {
                let mut s2 = s.clone();
                *s2.last_mut().unwrap() = 3;
                Operand::One(random_tensor(&mut rng, &s2))
            }
            _ => Operand::None,
        };
        cur = apply_step(&mut g, cur, *op, attrs, &operand)?;
        operands.push(operand);
        closed = matches!(op, OpCode::MseLoss | OpCode::CrossEntropyLoss);
    }
    let target = (!closed).then(|| random_tensor(&mut rng, g.value(cur).shape()));

    let mut inputs = vec![x0];
    for o in &operands {
        match o {
            Operand::None => {}
            Operand::One(a) => inputs.push(a.clone()),
            Operand::Two(a, b) => {
                inputs.push(a.clone());
                inputs.push(b.clone());
            }
        }
    }
    if let Some(t) = &target {
        inputs.push(t.clone());
    }

    grad_check_fn(&inputs, None, |g, vars| {
        let mut cur = vars[0];
        let mut next = 1;
        for ((op, attrs), operand) in chain.steps.iter().zip(&operands) {
            let bound = match operand {
                Operand::None => None,
                Operand::One(_) => {
                    next += 1;
                    Some((vars[next - 1], None))
                }
                Operand::Two(..) => {
                    next += 2;
                    Some((vars[next - 2], Some(vars[next - 1])))
                }
            };
            cur = apply_bound(g, cur, *op, attrs, bound)?;
        }
        if target.is_some() {
            cur = g.mse_loss(cur, vars[next])?;
        }
        Ok(cur)
    })
}

fn apply_step(g: &mut Graph<f64>, cur: Var, op: OpCode, attrs: &Attrs, operand: &Operand) -> Result<Var, KernelError> {
    let bound = match operand {
        Operand::None => None,
        Operand::One(a) => Some((g.constant(a.clone()), None)),
        Operand::Two(a, b) => {
            let a = g.constant(a.clone());
            Some((a, Some(g.constant(b.clone()))))
        }
    };
    apply_bound(g, cur, op, attrs, bound)
}

fn apply_bound(
    g: &mut Graph<f64>,
    cur: Var,
    op: OpCode,
    attrs: &Attrs,
    bound: Option<(Var, Option<Var>)>,
) -> Result<Var, KernelError> {
    let inputs: Vec<Var> = match bound {
        None => vec![cur],
        Some((a, None)) => vec![cur, a],
        Some((a, Some(b))) => vec![cur, a, b],
    };
    g.apply(op, &inputs, attrs.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_tanh_mse_chain() {
        let r = grad_check(&OpChain::new(&[OpCode::MatMul, OpCode::Tanh, OpCode::MseLoss]), &[4, 4], 0).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn strided_conv_relu_mse_chain() {
        let chain = OpChain::with_attrs(vec![
            (OpCode::Conv2d, Attrs::Conv { stride: 2, padding: 1 }),
            (OpCode::Relu, Attrs::None),
            (OpCode::MseLoss, Attrs::None),
        ]);
        let r = grad_check(&chain, &[1, 8, 8], 0).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn softmax_cross_entropy_chain() {
        let chain = OpChain::new(&[OpCode::SoftmaxLastDim, OpCode::CrossEntropyLoss]);
        let r = grad_check(&chain, &[16], 0).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
