//! Central finite-difference checks for graph-built scalar functions.

use rand::Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm; 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-300 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Builds the scalar `f(inputs)` on a fresh graph and returns its value and
/// the gradient with respect to each input.
pub fn analytic<F>(f: &F, inputs: &[Tensor]) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let value = g.value(out).item();
    let grads = g.backward(out)?;
    let gs = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.len()))
        .collect();
    Ok((value, gs))
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Central differences with step `h` over every input entry.
pub fn numeric<F>(f: &F, inputs: &[Tensor], h: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut g = vec![0.0; inputs[t].len()];
        for (k, slot) in g.iter_mut().enumerate() {
            let x0 = inputs[t].data()[k];
            work[t].data_mut()[k] = x0 + h;
            let fp = evaluate(f, &work)?;
            work[t].data_mut()[k] = x0 - h;
            let fm = evaluate(f, &work)?;
            work[t].data_mut()[k] = x0;
            *slot = (fp - fm) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// Relative error between analytic and numeric gradients, all inputs
/// flattened together.
pub fn check<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (_, a) = analytic(f, inputs)?;
    let n = numeric(f, inputs, FD_STEP)?;
    Ok(relative_error(&a.concat(), &n.concat()))
}

/// Reduces a non-scalar output to `sum(w * out)` with fixed weights so the
/// check sees every output entry.
pub fn project(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(out, w)?;
    g.sum_all(p)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Outcome of one named gradient check.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub points: usize,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;
type Sampler = Box<dyn Fn(&mut rand_chacha::ChaCha8Rng) -> Vec<Tensor>>;

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Output weights are drawn once per case so non-scalar ops are reduced the
/// same way at every point.
fn weighted(shape: &'static [usize], seed: u64, f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> Builder {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(shape, -1.0, 1.0, &mut rng);
    Box::new(move |g, v| {
        let out = f(g, v)?;
        project(g, out, &w)
    })
}

fn op_cases() -> Vec<(&'static str, Sampler, Builder)> {
    use super::{BatchNormStats, Mode};
    let r = |shape: &'static [usize]| -> Sampler { Box::new(move |rng| vec![random_tensor(shape, rng)]) };
    let r2 = |a: &'static [usize], b: &'static [usize]| -> Sampler {
        Box::new(move |rng| vec![random_tensor(a, rng), random_tensor(b, rng)])
    };
    vec![
        ("matmul", r2(&[3, 4], &[4, 2]), weighted(&[3, 2], 1, |g, v| g.matmul(v[0], v[1]))),
        ("add", r2(&[3, 4], &[4]), weighted(&[3, 4], 2, |g, v| g.add(v[0], v[1]))),
        ("sub", r2(&[2, 3, 2], &[3, 2]), weighted(&[2, 3, 2], 3, |g, v| g.sub(v[0], v[1]))),
        ("mul", r2(&[3, 4], &[4]), weighted(&[3, 4], 4, |g, v| g.mul(v[0], v[1]))),
        ("scale", r(&[5]), weighted(&[5], 5, |g, v| g.scale(v[0], -1.7))),
        (
            "concat_rows",
            r2(&[2, 3], &[4, 3]),
            weighted(&[6, 3], 6, |g, v| g.concat(&[v[0], v[1]], 0)),
        ),
        (
            "concat_cols",
            r2(&[3, 2], &[3, 1]),
            weighted(&[3, 5], 7, |g, v| g.concat(&[v[0], v[1], v[0]], 1)),
        ),
        ("sum_axis0", r(&[3, 4, 2]), weighted(&[4, 2], 8, |g, v| g.sum(v[0], 0))),
        ("sum_axis1", r(&[3, 4, 2]), weighted(&[3, 2], 9, |g, v| g.sum(v[0], 1))),
        ("sum_all", r(&[3, 4]), Box::new(|g, v| g.sum_all(v[0]))),
        ("relu", r(&[4, 3]), weighted(&[4, 3], 10, |g, v| g.relu(v[0]))),
        ("abs", r(&[4, 3]), weighted(&[4, 3], 11, |g, v| g.abs(v[0]))),
        ("softmax", r(&[3, 5]), weighted(&[3, 5], 12, |g, v| g.softmax(v[0]))),
        ("transpose", r(&[3, 4]), weighted(&[4, 3], 13, |g, v| g.transpose(v[0]))),
        ("reshape", r(&[3, 4]), weighted(&[2, 6], 14, |g, v| g.reshape(v[0], &[2, 6]))),
        (
            "gather_rows",
            r(&[4, 3]),
            weighted(&[5, 3], 15, |g, v| g.gather_rows(v[0], &[2, 0, 2, 3, 2])),
        ),
        (
            "rowwise_matvec",
            r2(&[3, 8], &[3, 4]),
            weighted(&[3, 2], 16, |g, v| g.rowwise_matvec(v[0], v[1])),
        ),
        ("group_sum", r(&[6, 3]), weighted(&[2, 3], 17, |g, v| g.group_sum(v[0], 3, 0.25))),
        ("group_max", r(&[6, 3]), weighted(&[3, 3], 18, |g, v| g.group_max(v[0], 2))),
        (
            "batchnorm_train",
            Box::new(|rng| {
                vec![
                    uniform(&[8, 3], -2.0, 2.0, rng),
                    uniform(&[3], 0.5, 1.5, rng),
                    random_tensor(&[3], rng),
                ]
            }),
            weighted(&[8, 3], 19, |g, v| {
                let mut s = BatchNormStats::new(3);
                g.batchnorm(v[0], v[1], v[2], &mut s, Mode::Train)
            }),
        ),
        (
            "batchnorm_eval",
            Box::new(|rng| {
                vec![
                    random_tensor(&[5, 3], rng),
                    uniform(&[3], 0.5, 1.5, rng),
                    random_tensor(&[3], rng),
                ]
            }),
            weighted(&[5, 3], 20, |g, v| {
                let mut s = BatchNormStats::new(3);
                s.mean = vec![0.1, -0.2, 0.3];
                s.var = vec![0.5, 2.0, 1.0];
                g.batchnorm(v[0], v[1], v[2], &mut s, Mode::Eval)
            }),
        ),
        ("cross_entropy", r(&[4, 3]), Box::new(|g, v| g.cross_entropy(v[0], &[0, 2, 1, 2]))),
        (
            "nll_probs",
            Box::new(|rng| vec![uniform(&[4, 3], 0.2, 1.0, rng)]),
            Box::new(|g, v| g.nll_probs(v[0], &[1, 0, 2, 2])),
        ),
        ("frobenius_sq", r(&[3, 4]), Box::new(|g, v| g.frobenius_sq(v[0]))),
        (
            "solve",
            Box::new(|rng| {
                let mut a = random_tensor(&[3, 3], rng);
                for i in 0..3 {
                    a.data_mut()[i * 4] += 3.0;
                }
                vec![a, random_tensor(&[3, 2], rng)]
            }),
            weighted(&[3, 2], 21, |g, v| g.solve(v[0], v[1])),
        ),
        ("normalize_rows", r(&[4, 3]), weighted(&[4, 3], 22, |g, v| g.normalize_rows(v[0]))),
    ]
}

/// Every primitive op checked at `points` random inputs.
pub fn op_suite(points: usize, seed: u64, tolerance: f64) -> Result<Vec<CheckOutcome>> {
    use rand::SeedableRng;
    let mut out = Vec::new();
    for (name, sample, build) in op_cases() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..points {
            let inputs = sample(&mut rng);
            worst = worst.max(check(&build, &inputs)?);
        }
        out.push(CheckOutcome {
            name: name.to_string(),
            max_error: worst,
            tolerance,
            points,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_matches_finite_differences() {
        let results = op_suite(20, 11, 1e-5).unwrap();
        for r in &results {
            assert!(r.passed(), "{}: {:e}", r.name, r.max_error);
        }
        assert!(results.len() >= 25);
    }

    #[test]
    fn relative_error_of_identical_vectors_is_zero() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
    }
}
