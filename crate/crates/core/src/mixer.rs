//! Monotonic state-conditioned mixing of per-agent utilities (training only).

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{ops, Affine, ParamStore, Tensor};

#[derive(Clone, Copy, Debug)]
struct Hyper {
    w1: Affine,
    b1: Affine,
    w2: Affine,
    b2_hidden: Affine,
    b2_out: Affine,
}

#[derive(Clone, Debug)]
pub struct Mixer {
    store: ParamStore,
    hyper: Hyper,
    n_agents: usize,
    state_dim: usize,
    width: usize,
}

/// Intermediates of [`Mixer::forward`].
#[derive(Clone, Debug)]
pub struct MixCache {
    u: Tensor,
    state: Tensor,
    w1_raw: Tensor,
    w2_raw: Tensor,
    pre: Tensor,
    hidden: Tensor,
    b2_pre: Tensor,
    b2_act: Tensor,
}

impl Mixer {
    pub fn new(
        n_agents: usize,
        state_dim: usize,
        width: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n_agents == 0 || state_dim == 0 || width == 0 {
            return Err(Error::Config("mixer dimensions must be positive".into()));
        }
        let mut store = ParamStore::new();
        let s = &mut store;
        let hyper = Hyper {
            w1: Affine::new(s, "hyper_w1", state_dim, n_agents * width, rng)?,
            b1: Affine::new(s, "hyper_b1", state_dim, width, rng)?,
            w2: Affine::new(s, "hyper_w2", state_dim, width, rng)?,
            b2_hidden: Affine::new(s, "hyper_b2.0", state_dim, width, rng)?,
            b2_out: Affine::new(s, "hyper_b2.1", width, 1, rng)?,
        };
        Ok(Self {
            store,
            hyper,
            n_agents,
            state_dim,
            width,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    /// `Q_tot` for utilities `[B, N]` and states `[B, S]`, as `[B, 1]`.
    pub fn forward(&self, u: &Tensor, state: &Tensor) -> Result<(Tensor, MixCache)> {
        let (n, e) = (self.n_agents, self.width);
        let b = u.rows();
        if u.shape() != [b, n] || state.shape() != [b, self.state_dim] {
            return Err(Error::shape(
                "mix",
                format!("utilities {:?}, state {:?}", u.shape(), state.shape()),
            ));
        }
        let s = &self.store;
        let h = &self.hyper;
        let w1_raw = h.w1.forward(s, state)?;
        let w1 = ops::abs(&w1_raw);
        let mut pre = h.b1.forward(s, state)?;
        for r in 0..b {
            let ur = u.row(r);
            let wr = w1.row(r);
            let pr = pre.row_mut(r);
            for (i, &ui) in ur.iter().enumerate() {
                for (acc, &w) in pr.iter_mut().zip(&wr[i * e..(i + 1) * e]) {
                    *acc += ui * w;
                }
            }
        }
        let hidden = ops::elu(&pre);
        let w2_raw = h.w2.forward(s, state)?;
        let w2 = ops::abs(&w2_raw);
        let b2_pre = h.b2_hidden.forward(s, state)?;
        let b2_act = ops::relu(&b2_pre);
        let mut q = h.b2_out.forward(s, &b2_act)?;
        for r in 0..b {
            let dot: f64 = hidden
                .row(r)
                .iter()
                .zip(w2.row(r))
                .map(|(a, c)| a * c)
                .sum();
            q.row_mut(r)[0] += dot;
        }
        q.check_finite("mix")?;
        Ok((
            q,
            MixCache {
                u: u.clone(),
                state: state.clone(),
                w1_raw,
                w2_raw,
                pre,
                hidden,
                b2_pre,
                b2_act,
            },
        ))
    }

    /// Accumulates parameter gradients for `dQ_tot` `[B, 1]`; returns the
    /// utility gradients `[B, N]`.
    pub fn backward(&mut self, cache: &MixCache, d_q: &Tensor) -> Result<Tensor> {
        let (n, e) = (self.n_agents, self.width);
        let b = cache.u.rows();
        if d_q.shape() != [b, 1] {
            return Err(Error::shape("mix_backward", format!("{:?}", d_q.shape())));
        }
        let h = self.hyper;
        let s = &mut self.store;
        let w1 = ops::abs(&cache.w1_raw);
        let w2 = ops::abs(&cache.w2_raw);

        // Q = hidden . w2 + b2
        let mut d_hidden = Tensor::zeros(&[b, e]);
        let mut d_w2 = Tensor::zeros(&[b, e]);
        for r in 0..b {
            let g = d_q.row(r)[0];
            for (dst, &w) in d_hidden.row_mut(r).iter_mut().zip(w2.row(r)) {
                *dst = g * w;
            }
            for (dst, &hv) in d_w2.row_mut(r).iter_mut().zip(cache.hidden.row(r)) {
                *dst = g * hv;
            }
        }
        let d_b2_act = h.b2_out.backward(s, &cache.b2_act, d_q)?;
        let d_b2_pre = ops::relu_backward(&cache.b2_pre, &d_b2_act);
        h.b2_hidden.backward(s, &cache.state, &d_b2_pre)?;
        h.w2.backward(s, &cache.state, &ops::abs_backward(&cache.w2_raw, &d_w2))?;

        let d_pre = ops::elu_backward(&cache.pre, &d_hidden);
        h.b1.backward(s, &cache.state, &d_pre)?;
        let mut d_u = Tensor::zeros(&[b, n]);
        let mut d_w1 = Tensor::zeros(&[b, n * e]);
        for r in 0..b {
            let dp = d_pre.row(r);
            let wr = w1.row(r);
            let ur = cache.u.row(r);
            for i in 0..n {
                let block = &wr[i * e..(i + 1) * e];
                d_u.row_mut(r)[i] = dp.iter().zip(block).map(|(a, c)| a * c).sum();
                for (dst, &g) in d_w1.row_mut(r)[i * e..(i + 1) * e].iter_mut().zip(dp) {
                    *dst = ur[i] * g;
                }
            }
        }
        h.w1.backward(s, &cache.state, &ops::abs_backward(&cache.w1_raw, &d_w1))?;
        Ok(d_u)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn degenerate_mixer_returns_state_bias() {
        let mut m = Mixer::new(4, 6, 8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let ids: Vec<_> = m.params().ids().collect();
        for id in ids {
            if m.params().name(id) != "hyper_b2.1.bias" {
                m.params_mut().value_mut(id).fill(0.0);
            }
        }
        let b2 = m
            .params()
            .value(m.params().id("hyper_b2.1.bias").unwrap())
            .data()[0];
        let u = Tensor::row_vector(vec![1.0, -2.0, 3.0, 0.5]);
        let s = Tensor::row_vector(vec![0.3; 6]);
        let (q, _) = m.forward(&u, &s).unwrap();
        assert_eq!(q.data()[0], b2);
    }

    #[test]
    fn utility_gradients_are_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = Mixer::new(4, 6, 8, &mut rng).unwrap();
        let u = Tensor::matrix(5, 4, (0..20).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        let s = Tensor::matrix(5, 6, (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let (_, cache) = m.forward(&u, &s).unwrap();
        let du = m.backward(&cache, &Tensor::filled(&[5, 1], 1.0)).unwrap();
        assert!(du.data().iter().all(|&g| g >= 0.0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let m = Mixer::new(4, 6, 8, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let err = m.forward(&Tensor::zeros(&[1, 3]), &Tensor::zeros(&[1, 6]));
        assert!(matches!(err, Err(Error::Shape { .. })));
    }
}
