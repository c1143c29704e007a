use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::{self, GruCache, GruGrads, GruWeights};
use crate::nn::tensor::Tensor;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
struct Param {
    name: String,
    value: Tensor,
    grad: Tensor,
    m: Tensor,
    v: Tensor,
}

/// Adaptive-moment optimiser settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Serialisable copy of one parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named parameters with gradients and optimiser moments.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, usize>,
    steps: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let id = self.params.len();
        let zeros = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.to_string(),
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    /// Registers a parameter drawn uniformly from `±sqrt(1 / fan_in)`.
    pub fn register_uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.register(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].grad
    }

    fn value_and_grad(&mut self, id: ParamId) -> (&Tensor, &mut Tensor) {
        let p = &mut self.params[id.0];
        (&p.value, &mut p.grad)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    /// Parameter names in sorted order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(String::as_str)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.by_name.values().copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.grad.data().iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Fails with the name of the first parameter whose gradient is not
    /// finite.
    pub fn check_grads(&self) -> Result<()> {
        for &i in self.by_name.values() {
            if !self.params[i].grad.is_finite() {
                return Err(Error::Numeric {
                    context: format!("gradient of {}", self.params[i].name),
                });
            }
        }
        Ok(())
    }

    /// One adaptive-moment update over all parameters in name order, then
    /// clears the gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        self.check_grads()?;
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for &i in self.by_name.values() {
            let p = &mut self.params[i];
            let grads = p.grad.data();
            let m = p.m.data_mut();
            for (mv, &g) in m.iter_mut().zip(grads) {
                *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * g;
            }
            let v = p.v.data_mut();
            for (vv, &g) in v.iter_mut().zip(grads) {
                *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * g * g;
            }
            let (m, v) = (p.m.data(), p.v.data());
            for ((w, &mv), &vv) in p.value.data_mut().iter_mut().zip(m).zip(v) {
                let m_hat = mv / bc1;
                let v_hat = vv / bc2;
                *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
            p.grad.fill(0.0);
        }
        Ok(())
    }

    /// Copies parameter values (not gradients or moments) from a store with
    /// the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.by_name.len() != other.by_name.len() {
            return Err(Error::Config("parameter layouts differ".into()));
        }
        for (name, &i) in &self.by_name {
            let j = *other
                .by_name
                .get(name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if self.params[i].value.shape() != other.params[j].value.shape() {
                return Err(Error::shape("copy_values_from", name.clone()));
            }
            self.params[i].value = other.params[j].value.clone();
        }
        Ok(())
    }

    pub fn snapshot(&self) -> BTreeMap<String, TensorRecord> {
        self.by_name
            .iter()
            .map(|(name, &i)| {
                let v = &self.params[i].value;
                (
                    name.clone(),
                    TensorRecord {
                        shape: v.shape().to_vec(),
                        data: v.data().to_vec(),
                    },
                )
            })
            .collect()
    }

    /// Loads values by name; every parameter must be present with a
    /// matching shape.
    pub fn load_snapshot(&mut self, records: &BTreeMap<String, TensorRecord>) -> Result<()> {
        for (name, &i) in &self.by_name {
            let rec = records
                .get(name)
                .ok_or_else(|| Error::Version(format!("checkpoint lacks parameter {name}")))?;
            if rec.shape != self.params[i].value.shape() {
                return Err(Error::Version(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    rec.shape,
                    self.params[i].value.shape()
                )));
            }
            self.params[i].value = Tensor::new(rec.shape.clone(), rec.data.clone())?;
        }
        Ok(())
    }
}

/// Fully connected layer `x W^T + b`.
#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Affine {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight =
            store.register_uniform(&format!("{name}.weight"), &[out_dim, in_dim], in_dim, rng)?;
        let bias = store.register_uniform(&format!("{name}.bias"), &[out_dim], in_dim, rng)?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        ops::affine(x, store.value(self.weight), store.value(self.bias))
    }

    /// Accumulates parameter gradients and returns `dx`.
    pub fn backward(&self, store: &mut ParamStore, x: &Tensor, dy: &Tensor) -> Result<Tensor> {
        let dx = {
            let (w, dw) = store.value_and_grad(self.weight);
            ops::affine_backward_weight(x, w, dy, dw)?
        };
        ops::bias_backward(dy, store.grad_mut(self.bias))?;
        Ok(dx)
    }
}

/// Gated recurrent cell layer.
#[derive(Clone, Copy, Debug)]
pub struct GruCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let g = 3 * hidden;
        Ok(Self {
            w_ih: store.register_uniform(&format!("{name}.w_ih"), &[g, input], hidden, rng)?,
            w_hh: store.register_uniform(&format!("{name}.w_hh"), &[g, hidden], hidden, rng)?,
            b_ih: store.register_uniform(&format!("{name}.b_ih"), &[g], hidden, rng)?,
            b_hh: store.register_uniform(&format!("{name}.b_hh"), &[g], hidden, rng)?,
            input,
            hidden,
        })
    }

    fn weights<'a>(&self, store: &'a ParamStore) -> GruWeights<'a> {
        GruWeights {
            w_ih: store.value(self.w_ih),
            w_hh: store.value(self.w_hh),
            b_ih: store.value(self.b_ih),
            b_hh: store.value(self.b_hh),
        }
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        x: &Tensor,
        h: &Tensor,
    ) -> Result<(Tensor, GruCache)> {
        ops::gru_cell(x, h, &self.weights(store))
    }

    /// Returns `(dx, dh)`.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &GruCache,
        dh_new: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        // Gradients are staged so the weights can stay borrowed immutably.
        let mut g: Vec<Tensor> = [self.w_ih, self.w_hh, self.b_ih, self.b_hh]
            .iter()
            .map(|&id| Tensor::zeros(store.value(id).shape()))
            .collect();
        let out = {
            let [g0, g1, g2, g3] = g.as_mut_slice() else {
                unreachable!()
            };
            ops::gru_cell_backward(
                cache,
                &self.weights(store),
                GruGrads {
                    w_ih: g0,
                    w_hh: g1,
                    b_ih: g2,
                    b_hh: g3,
                },
                dh_new,
            )?
        };
        for (id, grad) in [self.w_ih, self.w_hh, self.b_ih, self.b_hh]
            .into_iter()
            .zip(&g)
        {
            store.grad_mut(id).add_assign(grad)?;
        }
        Ok(out)
    }
}
