//! Central finite-difference oracle and gradient check suites.
//!
//! The oracle perturbs one coordinate at a time and divides by the actually
//! representable step `(θ+ε) - (θ-ε)`. Checks evaluate the probed function
//! on a 64-bit tape (same graph code, wider storage) so the numerical
//! estimate is clean, and compare it to the production 32-bit reverse pass.
//!
//! Reported error is relative to the largest gradient magnitude of the
//! tensor pair: `max_i |a_i - n_i| / max(‖a‖∞, ‖n‖∞, 1e-12)`. Coordinates
//! with near-zero gradients therefore do not blow up the ratio, while any
//! wrong reverse rule still surfaces at O(1).

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample as index_sample;
use rand::Rng;

use crate::backbone::Model;
use crate::error::{Error, Result};
use crate::params::seeded_rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Elem, Tensor, Tensor64, TensorOf};

/// Central-difference gradient estimate of a scalar function, one value per
/// coordinate of `theta`.
pub fn finite_difference_grad<E, F>(
    mut f: F,
    theta: &TensorOf<E>,
    epsilon: f64,
) -> Result<Tensor64>
where
    E: Elem,
    F: FnMut(&TensorOf<E>) -> Result<f64>,
{
    let coords: Vec<usize> = (0..theta.numel()).collect();
    let grad = finite_difference_grad_at(&mut f, theta, epsilon, &coords)?;
    Tensor64::new(theta.shape().to_vec(), grad)
}

/// As [`finite_difference_grad`] but only at the given coordinates.
pub fn finite_difference_grad_at<E, F>(
    f: &mut F,
    theta: &TensorOf<E>,
    epsilon: f64,
    coords: &[usize],
) -> Result<Vec<f64>>
where
    E: Elem,
    F: FnMut(&TensorOf<E>) -> Result<f64>,
{
    if !(epsilon > 0.0) {
        return Err(Error::Contract(alloc::format!(
            "finite differences need epsilon > 0, got {epsilon}"
        )));
    }
    let mut probe = theta.clone();
    let mut grad = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = theta.data()[i];
        let plus = E::from_f64(orig.to_f64() + epsilon);
        let minus = E::from_f64(orig.to_f64() - epsilon);
        probe.data_mut()[i] = plus;
        let fp = f(&probe)?;
        probe.data_mut()[i] = minus;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        let step = plus.to_f64() - minus.to_f64();
        if step == 0.0 {
            return Err(Error::Degenerate(alloc::format!(
                "epsilon {epsilon} vanishes at coordinate {i} (value {:?})",
                orig
            )));
        }
        grad.push((fp - fm) / step);
    }
    Ok(grad)
}

/// Scale-normalized worst-case disagreement between two gradient vectors.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()))
        / scale
}

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn from_error(name: String, err: f64, tolerance: f64) -> Self {
        CheckResult {
            name,
            max_rel_error: err,
            tolerance,
            passed: err <= tolerance,
        }
    }
}

/// A dual-precision graph under test: built once on a 32-bit tape for the
/// reverse pass and repeatedly on 64-bit tapes for the numerical probe.
pub trait GraphFn {
    /// Builds the graph over leaves `inputs` and returns the scalar loss.
    fn build<E: Elem>(&self, tape: &mut Tape<E>, inputs: &[Var]) -> Result<Var>;
}

/// Checks the reverse-mode gradients of `graph` with respect to every input
/// flagged differentiable.
pub fn check_graph<G: GraphFn>(
    name: &str,
    inputs: &[Tensor],
    differentiable: &[bool],
    graph: &G,
    epsilon: f64,
    tolerance: f64,
) -> Result<CheckResult> {
    let mut tape = Tape::<f32>::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(differentiable)
        .map(|(t, &d)| tape.leaf(t, d))
        .collect();
    let loss = graph.build(&mut tape, &vars)?;
    tape.backward(loss)?;

    let inputs64: Vec<Tensor64> = inputs.iter().map(|t| t.convert()).collect();
    let mut worst = 0.0f64;
    for (i, want) in differentiable.iter().enumerate() {
        if !want {
            continue;
        }
        let zero;
        let analytic: &[f64] = match tape.grad(vars[i]) {
            Some(g) => g,
            None => {
                zero = vec![0.0; inputs[i].numel()];
                &zero
            }
        };
        let numeric = finite_difference_grad(
            |probe: &Tensor64| {
                let mut t64 = Tape::<f64>::new();
                let vars64: Vec<Var> = inputs64
                    .iter()
                    .enumerate()
                    .map(|(j, t)| t64.leaf_native(if j == i { probe.clone() } else { t.clone() }, false))
                    .collect();
                let loss = graph.build(&mut t64, &vars64)?;
                t64.scalar(loss)
            },
            &inputs64[i],
            epsilon,
        )?;
        worst = worst.max(max_rel_error(analytic, numeric.data()));
    }
    Ok(CheckResult::from_error(name.into(), worst, tolerance))
}

/// Checks an end-to-end model loss: cross-entropy of `model` on one batch,
/// differentiated with respect to every trainable parameter, probed at up to
/// `coords_per_tensor` sampled coordinates each.
pub fn check_model<M: Model>(
    name: &str,
    model: &M,
    input: &Tensor,
    labels: &[u32],
    epsilon: f64,
    tolerance: f64,
    coords_per_tensor: usize,
    seed: u64,
) -> Result<CheckResult> {
    let mut tape = Tape::<f32>::new();
    let out = model.forward(&mut tape, input)?;
    let loss = tape.softmax_cross_entropy(out.logits, labels)?;
    tape.backward(loss)?;

    let mut rng = seeded_rng(seed, 40);
    let mut worst = 0.0f64;
    for (idx, p) in model.params().iter().enumerate() {
        if !p.trainable {
            continue;
        }
        let analytic_full = match tape.grad(out.bound[idx]) {
            Some(g) => g,
            None => continue,
        };
        let numel = p.tensor.numel();
        let coords: Vec<usize> = if numel <= coords_per_tensor {
            (0..numel).collect()
        } else {
            let mut c = index_sample(&mut rng, numel, coords_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        let theta64: Tensor64 = p.tensor.convert();
        let numeric = finite_difference_grad_at(
            &mut |probe: &Tensor64| {
                let mut t64 = Tape::<f64>::new();
                let out = model.forward_with(&mut t64, input, Some((idx, probe.data())))?;
                let loss = t64.softmax_cross_entropy(out.logits, labels)?;
                t64.scalar(loss)
            },
            &theta64,
            epsilon,
            &coords,
        )?;
        let analytic_scale = analytic_full.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let numeric_scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = analytic_scale.max(numeric_scale).max(1e-12);
        let err = coords
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (&c, n)| m.max((analytic_full[c] - n).abs()))
            / scale;
        worst = worst.max(err);
    }
    Ok(CheckResult::from_error(name.into(), worst, tolerance))
}

// ── Primitive check suite ────────────────────────────────────────────

struct ConvGraph {
    stride: usize,
    padding: usize,
    groups: usize,
    bias: bool,
}

impl GraphFn for ConvGraph {
    fn build<E: Elem>(&self, tape: &mut Tape<E>, inputs: &[Var]) -> Result<Var> {
        let bias = if self.bias { Some(inputs[2]) } else { None };
        let out = tape.conv2d(inputs[0], inputs[1], bias, self.stride, self.padding, self.groups)?;
        let r = *inputs.last().expect("projection tensor");
        let proj = tape.mul(out, r)?;
        tape.sum(proj)
    }
}

enum Unary {
    Relu,
    Gelu,
    Gap,
}

struct UnaryGraph(Unary);

impl GraphFn for UnaryGraph {
    fn build<E: Elem>(&self, tape: &mut Tape<E>, inputs: &[Var]) -> Result<Var> {
        let out = match self.0 {
            Unary::Relu => tape.relu(inputs[0])?,
            Unary::Gelu => tape.gelu(inputs[0])?,
            Unary::Gap => tape.global_avg_pool(inputs[0])?,
        };
        let proj = tape.mul(out, inputs[1])?;
        tape.sum(proj)
    }
}

struct BatchNormGraph;

impl GraphFn for BatchNormGraph {
    fn build<E: Elem>(&self, tape: &mut Tape<E>, inputs: &[Var]) -> Result<Var> {
        let out = tape.batch_norm(
            inputs[0],
            inputs[1],
            inputs[2],
            inputs[3],
            inputs[4],
            crate::backbone::BN_EPS,
        )?;
        let proj = tape.mul(out, inputs[5])?;
        tape.sum(proj)
    }
}

struct LinearGraph;

impl GraphFn for LinearGraph {
    fn build<E: Elem>(&self, tape: &mut Tape<E>, inputs: &[Var]) -> Result<Var> {
        let out = tape.linear(inputs[0], inputs[1], inputs[2])?;
        let proj = tape.mul(out, inputs[3])?;
        tape.sum(proj)
    }
}

struct CrossEntropyGraph {
    labels: Vec<u32>,
}

impl GraphFn for CrossEntropyGraph {
    fn build<E: Elem>(&self, tape: &mut Tape<E>, inputs: &[Var]) -> Result<Var> {
        tape.softmax_cross_entropy(inputs[0], &self.labels)
    }
}

struct ModulateGraph;

impl GraphFn for ModulateGraph {
    fn build<E: Elem>(&self, tape: &mut Tape<E>, inputs: &[Var]) -> Result<Var> {
        let out = tape.modulate(inputs[0], inputs[1], inputs[2])?;
        let proj = tape.mul(out, inputs[3])?;
        tape.sum(proj)
    }
}

struct ElementwiseGraph;

impl GraphFn for ElementwiseGraph {
    fn build<E: Elem>(&self, tape: &mut Tape<E>, inputs: &[Var]) -> Result<Var> {
        let prod = tape.mul(inputs[0], inputs[1])?;
        let summed = tape.add(prod, inputs[0])?;
        tape.sum(summed)
    }
}

fn random_tensor(shape: Vec<usize>, rng: &mut rand_chacha::ChaCha8Rng) -> Tensor {
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    Tensor::new(shape, data).expect("random tensor shape")
}

/// Random values in [-1,1] nudged off the ReLU kink, where central
/// differences are invalid.
fn random_tensor_off_kink(shape: Vec<usize>, rng: &mut rand_chacha::ChaCha8Rng, margin: f32) -> Tensor {
    let mut t = random_tensor(shape, rng);
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = if *v >= 0.0 { margin } else { -margin };
        }
    }
    t
}

fn positive_tensor(shape: Vec<usize>, rng: &mut rand_chacha::ChaCha8Rng) -> Tensor {
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(0.5f32..1.5)).collect();
    Tensor::new(shape, data).expect("random tensor shape")
}

fn merge(results: &mut Vec<CheckResult>, r: CheckResult) {
    match results.iter_mut().find(|e| e.name == r.name) {
        Some(existing) => {
            existing.max_rel_error = existing.max_rel_error.max(r.max_rel_error);
            existing.passed = existing.passed && r.passed;
        }
        None => results.push(r),
    }
}

/// Runs the per-primitive finite-difference suite over the given seeds and
/// returns one aggregated result per primitive configuration.
pub fn check_primitives(seeds: &[u64], epsilon: f64, tolerance: f64) -> Result<Vec<CheckResult>> {
    let mut results: Vec<CheckResult> = Vec::new();
    for &seed in seeds {
        let mut rng = seeded_rng(seed, 17);

        for (name, stride, padding, groups, bias, c_in, c_out, k) in [
            ("conv2d k3 s1 p1", 1usize, 1usize, 1usize, true, 4usize, 6usize, 3usize),
            ("conv2d k3 s2 p1", 2, 1, 1, false, 4, 6, 3),
            ("conv2d k1 s1 p0", 1, 0, 1, true, 4, 6, 1),
            ("conv2d grouped k3", 1, 1, 2, false, 4, 6, 3),
            ("conv2d depthwise k3", 1, 1, 4, false, 4, 4, 3),
        ] {
            let g = ConvGraph { stride, padding, groups, bias };
            let x = random_tensor(vec![2, c_in, 5, 5], &mut rng);
            let w = random_tensor(vec![c_out, c_in / groups, k, k], &mut rng);
            let h_out = (5 + 2 * padding - k) / stride + 1;
            let r = random_tensor(vec![2, c_out, h_out, h_out], &mut rng);
            let (inputs, diff): (Vec<Tensor>, Vec<bool>) = if bias {
                let b = random_tensor(vec![c_out], &mut rng);
                (vec![x, w, b, r], vec![true, true, true, false])
            } else {
                (vec![x, w, r], vec![true, true, false])
            };
            merge(&mut results, check_graph(name, &inputs, &diff, &g, epsilon, tolerance)?);
        }

        let x = random_tensor_off_kink(vec![2, 3, 4, 4], &mut rng, 0.05);
        let r = random_tensor(vec![2, 3, 4, 4], &mut rng);
        merge(
            &mut results,
            check_graph("relu", &[x, r], &[true, false], &UnaryGraph(Unary::Relu), epsilon, tolerance)?,
        );

        let x = random_tensor(vec![2, 3, 4, 4], &mut rng);
        let r = random_tensor(vec![2, 3, 4, 4], &mut rng);
        merge(
            &mut results,
            check_graph("gelu", &[x, r], &[true, false], &UnaryGraph(Unary::Gelu), epsilon, tolerance)?,
        );

        let x = random_tensor(vec![2, 3, 4, 4], &mut rng);
        let r = random_tensor(vec![2, 3], &mut rng);
        merge(
            &mut results,
            check_graph("global_average_pool", &[x, r], &[true, false], &UnaryGraph(Unary::Gap), epsilon, tolerance)?,
        );

        let x = random_tensor(vec![2, 5, 4, 4], &mut rng);
        let gamma = random_tensor(vec![5], &mut rng);
        let beta = random_tensor(vec![5], &mut rng);
        let mean = random_tensor(vec![5], &mut rng);
        let var = positive_tensor(vec![5], &mut rng);
        let r = random_tensor(vec![2, 5, 4, 4], &mut rng);
        merge(
            &mut results,
            check_graph(
                "batchnorm2d frozen",
                &[x, gamma, beta, mean, var, r],
                &[true, true, true, false, false, false],
                &BatchNormGraph,
                epsilon,
                tolerance,
            )?,
        );

        let x = random_tensor(vec![3, 6], &mut rng);
        let w = random_tensor(vec![4, 6], &mut rng);
        let b = random_tensor(vec![4], &mut rng);
        let r = random_tensor(vec![3, 4], &mut rng);
        merge(
            &mut results,
            check_graph(
                "linear",
                &[x, w, b, r],
                &[true, true, true, false],
                &LinearGraph,
                epsilon,
                tolerance,
            )?,
        );

        let logits = random_tensor(vec![4, 5], &mut rng);
        let labels: Vec<u32> = (0..4).map(|_| rng.gen_range(0..5u32)).collect();
        merge(
            &mut results,
            check_graph(
                "softmax_cross_entropy",
                &[logits],
                &[true],
                &CrossEntropyGraph { labels },
                epsilon,
                tolerance,
            )?,
        );

        let h = random_tensor(vec![2, 3, 4, 4], &mut rng);
        let delta = random_tensor(vec![2, 3, 4, 4], &mut rng);
        let alpha = random_tensor(vec![3], &mut rng);
        let r = random_tensor(vec![2, 3, 4, 4], &mut rng);
        merge(
            &mut results,
            check_graph(
                "modulate",
                &[h, delta, alpha, r],
                &[true, true, true, false],
                &ModulateGraph,
                epsilon,
                tolerance,
            )?,
        );

        let a = random_tensor(vec![7], &mut rng);
        let b = random_tensor(vec![7], &mut rng);
        merge(
            &mut results,
            check_graph("add/mul/sum", &[a, b], &[true, true], &ElementwiseGraph, epsilon, tolerance)?,
        );
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_slope_recovered() {
        // f(theta) = theta^2 at theta=3: derivative 6.
        let theta = Tensor64::scalar(3.0);
        let g = finite_difference_grad(
            |t: &Tensor64| Ok(t.data()[0] * t.data()[0]),
            &theta,
            1e-3,
        )
        .unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn linear_function_gives_ones() {
        let theta = Tensor64::new(vec![4], vec![0.3, -0.7, 2.0, 5.5]).unwrap();
        let g = finite_difference_grad(
            |t: &Tensor64| Ok(t.data().iter().sum()),
            &theta,
            1e-3,
        )
        .unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_non_positive_epsilon() {
        let theta = Tensor64::scalar(1.0);
        assert!(finite_difference_grad(|_| Ok(0.0), &theta, 0.0).is_err());
    }

    #[test]
    fn primitive_suite_passes_single_seed() {
        let results = check_primitives(&[0], 1e-3, 1e-3).unwrap();
        assert!(!results.is_empty());
        for r in &results {
            assert!(r.passed, "{} failed: {}", r.name, r.max_rel_error);
        }
    }
}
