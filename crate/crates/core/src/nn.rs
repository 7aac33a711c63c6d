//! Parameter registry and the small dense building blocks shared by the
//! convolution layers and the heads.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{BatchNormStats, Checkpoint, Gradients, Graph, Mode, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BnId(usize);

/// Trainable tensors plus batch-norm running statistics, all named.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Tensor>,
    bn_names: Vec<String>,
    bn: Vec<BatchNormStats>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn add_bn(&mut self, name: impl Into<String>, features: usize) -> BnId {
        self.bn_names.push(name.into());
        self.bn.push(BatchNormStats::new(features));
        BnId(self.bn.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn bn(&self, id: BnId) -> &BatchNormStats {
        &self.bn[id.0]
    }

    pub fn bn_mut(&mut self, id: BnId) -> &mut BatchNormStats {
        &mut self.bn[id.0]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Starts a fresh graph with every parameter as a leaf (or a constant
    /// when `trainable` is false).
    pub fn session(&mut self, mode: Mode, trainable: bool) -> Session<'_> {
        let mut g = Graph::new();
        let vars = self
            .values
            .iter()
            .map(|t| {
                if trainable {
                    g.leaf(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Session {
            g,
            vars,
            bn: &mut self.bn,
            mode,
        }
    }

    /// All tensors for a checkpoint: parameters first, then running stats as
    /// `<name>.mean` / `<name>.var`.
    pub fn to_checkpoint(&self, spec_hash: [u8; 32], step: u64) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor)> = self
            .names
            .iter()
            .cloned()
            .zip(self.values.iter().cloned())
            .collect();
        for (name, s) in self.bn_names.iter().zip(&self.bn) {
            tensors.push((format!("{name}.mean"), Tensor::vector(s.mean.clone())));
            tensors.push((format!("{name}.var"), Tensor::vector(s.var.clone())));
        }
        Checkpoint {
            spec_hash,
            step,
            tensors,
        }
    }

    /// Overwrites values from a checkpoint written by [`Self::to_checkpoint`]
    /// for the same architecture.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        let want = self.names.len() + 2 * self.bn_names.len();
        if ck.tensors.len() != want {
            return Err(Error::invalid(format!(
                "checkpoint has {} tensors, model expects {want}",
                ck.tensors.len()
            )));
        }
        let fetch = |name: &str, shape: &[usize]| -> Result<&Tensor> {
            let t = ck
                .get(name)
                .ok_or_else(|| Error::invalid(format!("checkpoint is missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(Error::shape("load_checkpoint", shape, t.shape()));
            }
            Ok(t)
        };
        let mut values = Vec::with_capacity(self.values.len());
        for (name, v) in self.names.iter().zip(&self.values) {
            values.push(fetch(name, v.shape())?.clone());
        }
        let mut bn = self.bn.clone();
        for (name, s) in self.bn_names.iter().zip(bn.iter_mut()) {
            let f = [s.mean.len()];
            s.mean = fetch(&format!("{name}.mean"), &f)?.data().to_vec();
            s.var = fetch(&format!("{name}.var"), &f)?.data().to_vec();
        }
        self.values = values;
        self.bn = bn;
        Ok(())
    }
}

/// One forward/backward pass: a graph with the parameters bound as leaves.
pub struct Session<'a> {
    pub g: Graph,
    vars: Vec<Var>,
    bn: &'a mut [BatchNormStats],
    pub mode: Mode,
}

impl Session<'_> {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn batchnorm(&mut self, x: Var, bn: &BatchNorm) -> Result<Var> {
        let (gamma, beta) = (self.vars[bn.gamma.0], self.vars[bn.beta.0]);
        self.g
            .batchnorm(x, gamma, beta, &mut self.bn[bn.stats.0], self.mode)
    }

    /// Gradients of every parameter, zero where the loss does not depend on it.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .map(|&v| grads.get_or_zeros(v, self.g.value(v).len()))
            .collect()
    }
}

/// `x W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(p: &mut Params, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let w = p.add(format!("{name}.w"), Tensor::glorot(fan_in, fan_out, rng));
        let b = p.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = s.g.matmul(x, s.var(self.w))?;
        s.g.add(y, s.var(self.b))
    }

    /// Sets weight and bias to zero.
    pub fn zero(&self, p: &mut Params) {
        p.get_mut(self.w).data_mut().fill(0.0);
        p.get_mut(self.b).data_mut().fill(0.0);
    }
}

/// Linear layers with ReLU between them (and after the last if `relu_last`).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub relu_last: bool,
}

impl Mlp {
    pub fn new(p: &mut Params, name: &str, widths: &[usize], relu_last: bool, rng: &mut impl Rng) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(p, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers, relu_last }
    }

    pub fn forward(&self, s: &mut Session, mut x: Var) -> Result<Var> {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(s, x)?;
            if i + 1 < n || self.relu_last {
                x = s.g.relu(x)?;
            }
        }
        Ok(x)
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("mlp has at least one layer")
    }
}

/// Learnable affine part of a batch norm plus its running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: BnId,
}

impl BatchNorm {
    pub fn new(p: &mut Params, name: &str, features: usize) -> Self {
        Self {
            gamma: p.add(format!("{name}.gamma"), Tensor::filled(&[features], 1.0)),
            beta: p.add(format!("{name}.beta"), Tensor::zeros(&[features])),
            stats: p.add_bn(name, features),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_restores_params_and_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = Params::new();
        let l = Linear::new(&mut p, "l", 3, 2, &mut rng);
        let bn = BatchNorm::new(&mut p, "bn", 2);
        p.bn_mut(bn.stats).mean = vec![0.5, -1.0];
        let ck = p.to_checkpoint([1; 32], 3);
        let mut q = p.clone();
        q.get_mut(l.w).data_mut().fill(9.0);
        q.bn_mut(bn.stats).var = vec![7.0, 7.0];
        q.load_checkpoint(&ck).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn mlp_gradients_cover_all_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = Params::new();
        let m = Mlp::new(&mut p, "m", &[3, 4, 2], false, &mut rng);
        let mut s = p.session(Mode::Train, true);
        let x = s.g.constant(Tensor::from_fn(&[5, 3], |i| (i as f64 * 0.37).sin()));
        let y = m.forward(&mut s, x).unwrap();
        let l = s.g.frobenius_sq(y).unwrap();
        let grads = s.g.backward(l).unwrap();
        let pg = s.param_grads(&grads);
        assert_eq!(pg.len(), 4);
        assert!(pg.iter().all(|g| g.iter().any(|v| *v != 0.0)));
    }
}
