//! Per-agent actor: observation encoders, local attention graph, semantic
//! representation (SR) encoder and the recurrent utility head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{
    neighbor_agent, neighbor_slot, observability, pair_features, Action, PAIR_FEATURES,
};
use crate::error::{Error, Result};
use crate::nn::ops::{self, Attention, AttentionCache, GruCache, ScoreNormalization};
use crate::nn::{Affine, GruCell, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    /// Attention graph plus SR exchange.
    Gaxnet,
    /// Utility head fed by the own encoding only.
    Baseline,
}

/// What an agent broadcasts to its neighbours after each slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExchangeMode {
    /// The encoded representation `w̄`.
    Semantic,
    /// The raw attention weight `w`.
    Raw,
    /// Nothing; every inbox stays zero.
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActorConfig {
    pub obs_dim: usize,
    pub n_agents: usize,
    /// Encoder width.
    pub enc_dim: usize,
    /// Query/key/value width.
    pub attn_dim: usize,
    pub head_hidden: usize,
    pub n_actions: usize,
    pub mode: PolicyMode,
    pub exchange: ExchangeMode,
    pub score_norm: ScoreNormalization,
}

impl ActorConfig {
    pub fn new(obs_dim: usize, n_agents: usize) -> Self {
        Self {
            obs_dim,
            n_agents,
            enc_dim: 64,
            attn_dim: 32,
            head_hidden: 64,
            n_actions: Action::COUNT,
            mode: PolicyMode::Gaxnet,
            exchange: ExchangeMode::Semantic,
            score_norm: ScoreNormalization::Softmax,
        }
    }

    pub fn neighbours(&self) -> usize {
        self.n_agents - 1
    }

    pub fn head_input(&self) -> usize {
        match self.mode {
            PolicyMode::Gaxnet => self.enc_dim + self.neighbours() * (1 + self.attn_dim),
            PolicyMode::Baseline => self.enc_dim,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_agents < 2 {
            return Err(Error::EmptyGraph);
        }
        let expected = crate::env::OWN_FEATURES + crate::env::OTHER_FEATURES * self.neighbours();
        if self.obs_dim != expected {
            return Err(Error::shape(
                "ActorConfig",
                format!(
                    "obs_dim {} but {} agents need {expected}",
                    self.obs_dim, self.n_agents
                ),
            ));
        }
        if self.enc_dim == 0 || self.attn_dim == 0 || self.head_hidden == 0 || self.n_actions == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct AttentionLayers {
    enc_oth: Affine,
    query: Affine,
    key: Affine,
    value: Affine,
    sr_cell: GruCell,
    sr_readout: Affine,
}

#[derive(Clone, Copy, Debug)]
struct Layers {
    enc_own: Affine,
    attn: Option<AttentionLayers>,
    head_in: Affine,
    head_gru: GruCell,
    head_out: Affine,
}

/// Recurrent carry of one agent for a batch of `B` independent rollouts.
#[derive(Clone, Debug, PartialEq)]
pub struct ActorState {
    /// `[B * K, 1]`, one scalar per neighbour pair.
    pub sr_hidden: Tensor,
    /// `[B, head_hidden]`.
    pub agent_hidden: Tensor,
}

/// Inputs of one batched slot.
#[derive(Clone, Debug)]
pub struct StepInput<'a> {
    /// `[B, obs_dim]`.
    pub obs: &'a Tensor,
    /// `[B, K]`, values received from the neighbours, in neighbour order.
    pub inbox: &'a Tensor,
    pub state: &'a ActorState,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    /// `[B, n_actions]`.
    pub q: Tensor,
    /// Attention weights `w`, `[B, K]` (zero in baseline mode).
    pub weights: Tensor,
    /// Encoded representations `w̄`, `[B, K]` (zero in baseline mode).
    pub sr: Tensor,
    pub state: ActorState,
}

#[derive(Clone, Debug)]
struct AttentionTrace {
    pairs: Tensor,
    h_oth: Tensor,
    attention: AttentionCache,
    observable: Tensor,
    inbox: Tensor,
    sr_cache: GruCache,
    sr_h: Tensor,
    sr: Tensor,
}

/// Intermediates kept by [`Actor::forward_step`] for the backward pass.
#[derive(Clone, Debug)]
pub struct StepCache {
    obs: Tensor,
    h_own: Tensor,
    attn: Option<AttentionTrace>,
    head_x: Tensor,
    head_a: Tensor,
    head_cache: GruCache,
    head_h: Tensor,
}

/// Upstream gradients of one slot.
#[derive(Clone, Debug)]
pub struct StepGrad {
    /// `[B, n_actions]`.
    pub d_q: Tensor,
    /// `[B, K]`, gradient reaching the broadcast values from the neighbours'
    /// next slot.
    pub d_outbox: Tensor,
    pub d_state: ActorState,
}

/// Gradients with respect to the inputs of one slot.
#[derive(Clone, Debug)]
pub struct InputGrad {
    pub d_obs: Tensor,
    pub d_inbox: Tensor,
    pub d_state: ActorState,
}

/// Result of a single decentralised decision.
#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    pub action: Action,
    pub q: Vec<f64>,
    pub weights: Vec<f64>,
    pub sr: Vec<f64>,
    /// What this agent broadcasts, one value per neighbour.
    pub outbox: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Actor {
    cfg: ActorConfig,
    store: ParamStore,
    layers: Layers,
}

impl Actor {
    pub fn new(cfg: ActorConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let s = &mut store;
        let enc_own = Affine::new(s, "enc_own", cfg.obs_dim, cfg.enc_dim, rng)?;
        let attn = match cfg.mode {
            PolicyMode::Gaxnet => Some(AttentionLayers {
                enc_oth: Affine::new(s, "enc_oth", PAIR_FEATURES, cfg.enc_dim, rng)?,
                query: Affine::new(s, "query", cfg.enc_dim, cfg.attn_dim, rng)?,
                key: Affine::new(s, "key", cfg.enc_dim, cfg.attn_dim, rng)?,
                value: Affine::new(s, "value", cfg.enc_dim, cfg.attn_dim, rng)?,
                sr_cell: GruCell::new(s, "sr_cell", 2, 1, rng)?,
                sr_readout: Affine::new(s, "sr_readout", 1, 1, rng)?,
            }),
            PolicyMode::Baseline => None,
        };
        let head_in = Affine::new(s, "head_in", cfg.head_input(), cfg.head_hidden, rng)?;
        let head_gru = GruCell::new(s, "head_gru", cfg.head_hidden, cfg.head_hidden, rng)?;
        let head_out = Affine::new(s, "head_out", cfg.head_hidden, cfg.n_actions, rng)?;
        Ok(Self {
            cfg,
            store,
            layers: Layers {
                enc_own,
                attn,
                head_in,
                head_gru,
                head_out,
            },
        })
    }

    pub fn config(&self) -> &ActorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn initial_state(&self, batch: usize) -> ActorState {
        ActorState {
            sr_hidden: Tensor::zeros(&[batch * self.cfg.neighbours(), 1]),
            agent_hidden: Tensor::zeros(&[batch, self.cfg.head_hidden]),
        }
    }

    /// Own encoding `[B, J1]` and neighbour encodings `[B * K, J1]`, rows in
    /// ascending neighbour order.
    pub fn encode(&self, obs: &Tensor) -> Result<(Tensor, Tensor)> {
        let attn = self.attention_layers()?;
        let pairs = self.pair_matrix(obs)?;
        let h_own = self.layers.enc_own.forward(&self.store, obs)?;
        let h_oth = attn.enc_oth.forward(&self.store, &pairs)?;
        Ok((h_own, h_oth))
    }

    /// Scaled-dot attention of the own encoding over the neighbour encodings.
    pub fn attention_graph(&self, h_own: &Tensor, h_oth: &Tensor) -> Result<Attention> {
        Ok(self.attend(h_own, h_oth)?.0)
    }

    /// One SR step per pair. `w_now` and `sr_in` are `[B, K]`; returns
    /// `w̄` as `[B, K]` and the new pair hiddens.
    pub fn sr_encode(
        &self,
        w_now: &Tensor,
        sr_in: &Tensor,
        hidden: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let (sr, h, _) = self.sr_step(w_now, sr_in, hidden)?;
        Ok((sr, h))
    }

    /// Utility values `[B, n_actions]` and the new agent hidden.
    pub fn utility(
        &self,
        h_own: &Tensor,
        sr: &Tensor,
        messages: &Tensor,
        agent_hidden: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let head_x = match self.cfg.mode {
            PolicyMode::Gaxnet => ops::concat_cols(&[h_own, sr, messages])?,
            PolicyMode::Baseline => h_own.clone(),
        };
        let (q, h, _, _) = self.head(&head_x, agent_hidden)?;
        Ok((q, h))
    }

    fn attention_layers(&self) -> Result<&AttentionLayers> {
        self.layers
            .attn
            .as_ref()
            .ok_or_else(|| Error::State("baseline actors have no attention graph".into()))
    }

    fn pair_matrix(&self, obs: &Tensor) -> Result<Tensor> {
        let k = self.cfg.neighbours();
        let b = expect_rows(obs, self.cfg.obs_dim, "pair_matrix")?;
        let mut data = Vec::with_capacity(b * k * PAIR_FEATURES);
        for r in 0..b {
            let row = obs.row(r);
            for j in 0..k {
                data.extend_from_slice(&pair_features(row, j));
            }
        }
        Tensor::matrix(b * k, PAIR_FEATURES, data)
    }

    fn attend(&self, h_own: &Tensor, h_oth: &Tensor) -> Result<(Attention, AttentionCache)> {
        let attn = self.attention_layers()?;
        let q = attn.query.forward(&self.store, h_own)?;
        let keys = attn.key.forward(&self.store, h_oth)?;
        let values = attn.value.forward(&self.store, h_oth)?;
        ops::scaled_dot(
            &q,
            &keys,
            &values,
            self.cfg.neighbours(),
            (self.cfg.attn_dim as f64).sqrt(),
            self.cfg.score_norm,
        )
    }

    fn sr_step(
        &self,
        w_now: &Tensor,
        sr_in: &Tensor,
        hidden: &Tensor,
    ) -> Result<(Tensor, Tensor, GruCache)> {
        let attn = self.attention_layers()?;
        let k = self.cfg.neighbours();
        let b = expect_rows(w_now, k, "sr_encode")?;
        if sr_in.shape() != w_now.shape() || hidden.shape() != [b * k, 1] {
            return Err(Error::shape("sr_encode", "inbox or hidden shape"));
        }
        let mut x = Vec::with_capacity(2 * b * k);
        for (&w, &s) in w_now.data().iter().zip(sr_in.data()) {
            x.push(w);
            x.push(s);
        }
        let x = Tensor::matrix(b * k, 2, x)?;
        let (h, cache) = attn.sr_cell.forward(&self.store, &x, hidden)?;
        let logit = attn.sr_readout.forward(&self.store, &h)?;
        let sr = ops::sigmoid(&logit).reshape(&[b, k])?;
        Ok((sr, h, cache))
    }

    fn head(
        &self,
        head_x: &Tensor,
        agent_hidden: &Tensor,
    ) -> Result<(Tensor, Tensor, Tensor, GruCache)> {
        let l = &self.layers;
        let a = ops::tanh(&l.head_in.forward(&self.store, head_x)?);
        let (h, cache) = l.head_gru.forward(&self.store, &a, agent_hidden)?;
        let q = l.head_out.forward(&self.store, &h)?;
        Ok((q, h, a, cache))
    }

    /// One batched slot. The inbox is gated by the observability flags in
    /// `obs`, so unobservable neighbours contribute zero.
    pub fn forward_step(&self, input: &StepInput) -> Result<(StepOutput, StepCache)> {
        let k = self.cfg.neighbours();
        let obs = input.obs;
        let b = expect_rows(obs, self.cfg.obs_dim, "forward_step")?;
        if input.inbox.shape() != [b, k] {
            return Err(Error::shape(
                "forward_step",
                format!("inbox {:?}", input.inbox.shape()),
            ));
        }
        let h_own = self.layers.enc_own.forward(&self.store, obs)?;
        let (head_x, attn_trace, weights, sr, sr_hidden) = match &self.layers.attn {
            Some(layers) => {
                let pairs = self.pair_matrix(obs)?;
                let h_oth = layers.enc_oth.forward(&self.store, &pairs)?;
                let (att, att_cache) = self.attend(&h_own, &h_oth)?;
                let mut observable = Tensor::zeros(&[b, k]);
                for r in 0..b {
                    for j in 0..k {
                        observable.row_mut(r)[j] = observability(obs.row(r), j);
                    }
                }
                let mut sr_in = input.inbox.clone();
                for (v, e) in sr_in.data_mut().iter_mut().zip(observable.data()) {
                    *v *= e;
                }
                let (sr, sr_h, sr_cache) =
                    self.sr_step(&att.weights, &sr_in, &input.state.sr_hidden)?;
                let head_x = ops::concat_cols(&[&h_own, &sr, &att.messages])?;
                let trace = AttentionTrace {
                    pairs,
                    h_oth,
                    attention: att_cache,
                    observable,
                    inbox: input.inbox.clone(),
                    sr_cache,
                    sr_h: sr_h.clone(),
                    sr: sr.clone(),
                };
                (head_x, Some(trace), att.weights, sr, sr_h)
            }
            None => (
                h_own.clone(),
                None,
                Tensor::zeros(&[b, k]),
                Tensor::zeros(&[b, k]),
                input.state.sr_hidden.clone(),
            ),
        };
        let (q, head_h, head_a, head_cache) = self.head(&head_x, &input.state.agent_hidden)?;
        Ok((
            StepOutput {
                q,
                weights,
                sr,
                state: ActorState {
                    sr_hidden,
                    agent_hidden: head_h.clone(),
                },
            },
            StepCache {
                obs: obs.clone(),
                h_own,
                attn: attn_trace,
                head_x,
                head_a,
                head_cache,
                head_h,
            },
        ))
    }

    /// What this agent broadcasts after a slot, `[B, K]`.
    pub fn outbox(&self, out: &StepOutput) -> Tensor {
        match (self.cfg.mode, self.cfg.exchange) {
            (PolicyMode::Baseline, _) | (_, ExchangeMode::Off) => Tensor::zeros(out.sr.shape()),
            (_, ExchangeMode::Semantic) => out.sr.clone(),
            (_, ExchangeMode::Raw) => out.weights.clone(),
        }
    }

    /// Accumulates parameter gradients for one slot and returns the
    /// gradients of its inputs.
    pub fn backward_step(&mut self, cache: &StepCache, grad: &StepGrad) -> Result<InputGrad> {
        let l = self.layers;
        let k = self.cfg.neighbours();
        let b = cache.obs.rows();
        let s = &mut self.store;

        let mut dh = l.head_out.backward(s, &cache.head_h, &grad.d_q)?;
        dh.add_assign(&grad.d_state.agent_hidden)?;
        let (da, d_agent_hidden) = l.head_gru.backward(s, &cache.head_cache, &dh)?;
        let dz = ops::tanh_backward(&cache.head_a, &da);
        let d_head_x = l.head_in.backward(s, &cache.head_x, &dz)?;

        let mut d_obs = Tensor::zeros(&[b, self.cfg.obs_dim]);
        let mut d_inbox = Tensor::zeros(&[b, k]);
        let (d_h_own, d_sr_hidden) = match (&l.attn, &cache.attn) {
            (Some(layers), Some(trace)) => {
                let widths = [self.cfg.enc_dim, k, k * self.cfg.attn_dim];
                let [mut d_h_own, mut d_sr, d_messages]: [Tensor; 3] =
                    ops::split_cols(&d_head_x, &widths)?
                        .try_into()
                        .map_err(|_| Error::shape("backward_step", "head input split"))?;
                let mut d_weights = Tensor::zeros(&[b, k]);
                match self.cfg.exchange {
                    ExchangeMode::Semantic => d_sr.add_assign(&grad.d_outbox)?,
                    ExchangeMode::Raw => d_weights.add_assign(&grad.d_outbox)?,
                    ExchangeMode::Off => {}
                }
                let d_logit = ops::sigmoid_backward(&trace.sr, &d_sr).reshape(&[b * k, 1])?;
                let mut d_sr_h = layers.sr_readout.backward(s, &trace.sr_h, &d_logit)?;
                d_sr_h.add_assign(&grad.d_state.sr_hidden)?;
                let (d_sr_x, d_sr_hidden) = layers.sr_cell.backward(s, &trace.sr_cache, &d_sr_h)?;
                for r in 0..b {
                    for j in 0..k {
                        let row = d_sr_x.row(r * k + j);
                        let e = trace.observable.row(r)[j];
                        d_weights.row_mut(r)[j] += row[0];
                        d_inbox.row_mut(r)[j] = e * row[1];
                        d_obs.row_mut(r)
                            [crate::env::OWN_FEATURES + crate::env::OTHER_FEATURES * j + 3] +=
                            trace.inbox.row(r)[j] * row[1];
                    }
                }
                let d_mixed = Tensor::zeros(&[b, self.cfg.attn_dim]);
                let (dq, dkeys, dvalues) =
                    ops::scaled_dot_backward(&trace.attention, &d_weights, &d_messages, &d_mixed)?;
                d_h_own.add_assign(&layers.query.backward(s, &cache.h_own, &dq)?)?;
                let mut d_h_oth = layers.key.backward(s, &trace.h_oth, &dkeys)?;
                d_h_oth.add_assign(&layers.value.backward(s, &trace.h_oth, &dvalues)?)?;
                let d_pairs = layers.enc_oth.backward(s, &trace.pairs, &d_h_oth)?;
                for r in 0..b {
                    for j in 0..k {
                        scatter_pair(d_obs.row_mut(r), j, d_pairs.row(r * k + j));
                    }
                }
                (d_h_own, d_sr_hidden)
            }
            _ => (d_head_x, grad.d_state.sr_hidden.clone()),
        };
        d_obs.add_assign(&l.enc_own.backward(s, &cache.obs, &d_h_own)?)?;
        Ok(InputGrad {
            d_obs,
            d_inbox,
            d_state: ActorState {
                sr_hidden: d_sr_hidden,
                agent_hidden: d_agent_hidden,
            },
        })
    }

    /// Decentralised ε-greedy decision from the agent's own observation,
    /// inbox and carry. Ties go to the lowest action index.
    pub fn act(
        &self,
        obs: &[f64],
        inbox: &[f64],
        state: &mut ActorState,
        epsilon: f64,
        rng: &mut impl Rng,
    ) -> Result<Decision> {
        let obs = Tensor::row_vector(obs.to_vec());
        let inbox = Tensor::row_vector(inbox.to_vec());
        let (out, _) = self.forward_step(&StepInput {
            obs: &obs,
            inbox: &inbox,
            state,
        })?;
        let q = out.q.data().to_vec();
        let action = if rng.gen::<f64>() < epsilon {
            rng.gen_range(0..self.cfg.n_actions)
        } else {
            argmax(&q)
        };
        let outbox = self.outbox(&out).into_data();
        *state = out.state;
        Ok(Decision {
            action: Action::new(action)?,
            q,
            weights: out.weights.into_data(),
            sr: out.sr.into_data(),
            outbox,
        })
    }
}

fn expect_rows(t: &Tensor, cols: usize, op: &'static str) -> Result<usize> {
    if t.shape().len() != 2 || t.cols() != cols {
        return Err(Error::shape(
            op,
            format!("expected [B, {cols}], got {:?}", t.shape()),
        ));
    }
    Ok(t.rows())
}

/// Adds a pair-feature gradient back onto the flattened observation layout
/// used by [`pair_features`].
fn scatter_pair(d_obs: &mut [f64], j: usize, d_pair: &[f64]) {
    let b = crate::env::OWN_FEATURES + crate::env::OTHER_FEATURES * j;
    let targets = [0, 1, 2, 3, b, b + 1, 4, b + 2, b + 3];
    for (&t, &g) in targets.iter().zip(d_pair) {
        d_obs[t] += g;
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Routes every agent's outbox `[B, K]` to the receivers: entry `j` of agent
/// `n`'s inbox is what neighbour `neighbor_agent(n, j)` sent to `n`.
pub fn route_messages(outboxes: &[Tensor]) -> Result<Vec<Tensor>> {
    let n_agents = outboxes.len();
    let mut inboxes = Vec::with_capacity(n_agents);
    for n in 0..n_agents {
        let first = &outboxes[n];
        let (b, k) = (first.rows(), first.cols());
        if k + 1 != n_agents {
            return Err(Error::shape("route_messages", "outbox width must be N - 1"));
        }
        let mut inbox = Tensor::zeros(&[b, k]);
        for j in 0..k {
            let m = neighbor_agent(n, j);
            let slot = neighbor_slot(m, n);
            for r in 0..b {
                inbox.row_mut(r)[j] = outboxes[m].row(r)[slot];
            }
        }
        inboxes.push(inbox);
    }
    Ok(inboxes)
}

/// Adjoint of [`route_messages`]: maps inbox gradients back to the senders.
pub fn route_gradients(d_inboxes: &[Tensor]) -> Result<Vec<Tensor>> {
    // The routing is a permutation that is its own inverse.
    route_messages(d_inboxes)
}

/// Joint carry of all agents plus the messages in flight.
#[derive(Clone, Debug)]
pub struct TeamState {
    pub actors: Vec<ActorState>,
    /// Per sender, `[B, K]`.
    pub outboxes: Vec<Tensor>,
}

/// Joint output of one slot for all agents.
#[derive(Clone, Debug)]
pub struct TeamStep {
    pub outputs: Vec<StepOutput>,
    pub caches: Vec<StepCache>,
    pub next: TeamState,
}

/// Independent per-agent actors wired together by the one-slot-delayed
/// message exchange.
#[derive(Clone, Debug)]
pub struct Team {
    pub actors: Vec<Actor>,
}

impl Team {
    pub fn new(cfg: &ActorConfig, rng: &mut impl Rng) -> Result<Self> {
        let actors = (0..cfg.n_agents)
            .map(|_| Actor::new(cfg.clone(), rng))
            .collect::<Result<_>>()?;
        Ok(Self { actors })
    }

    pub fn config(&self) -> &ActorConfig {
        self.actors[0].config()
    }

    pub fn initial_state(&self, batch: usize) -> TeamState {
        let k = self.config().neighbours();
        TeamState {
            actors: self.actors.iter().map(|a| a.initial_state(batch)).collect(),
            outboxes: vec![Tensor::zeros(&[batch, k]); self.actors.len()],
        }
    }

    /// Runs every actor on its own `[B, obs_dim]` observation block.
    pub fn forward_step(&self, state: &TeamState, obs: &[Tensor]) -> Result<TeamStep> {
        if obs.len() != self.actors.len() {
            return Err(Error::shape(
                "Team::forward_step",
                "one observation block per agent",
            ));
        }
        let inboxes = route_messages(&state.outboxes)?;
        let mut outputs = Vec::with_capacity(obs.len());
        let mut caches = Vec::with_capacity(obs.len());
        for ((actor, o), (inbox, st)) in self
            .actors
            .iter()
            .zip(obs)
            .zip(inboxes.iter().zip(&state.actors))
        {
            let (out, cache) = actor.forward_step(&StepInput {
                obs: o,
                inbox,
                state: st,
            })?;
            outputs.push(out);
            caches.push(cache);
        }
        let next = TeamState {
            actors: outputs.iter().map(|o| o.state.clone()).collect(),
            outboxes: self
                .actors
                .iter()
                .zip(&outputs)
                .map(|(a, o)| a.outbox(o))
                .collect(),
        };
        Ok(TeamStep {
            outputs,
            caches,
            next,
        })
    }

    /// Backpropagates through a whole unrolled sequence of slots. `d_q[t][n]`
    /// is the gradient on agent `n`'s utilities at slot `t`. Returns the
    /// observation gradients in the same layout.
    pub fn backward(
        &mut self,
        caches: &[Vec<StepCache>],
        d_q: &[Vec<Tensor>],
    ) -> Result<Vec<Vec<Tensor>>> {
        let n_agents = self.actors.len();
        if caches.len() != d_q.len() {
            return Err(Error::shape("Team::backward", "one gradient set per slot"));
        }
        let Some(first) = caches.first() else {
            return Ok(Vec::new());
        };
        let b = first[0].obs.rows();
        let k = self.config().neighbours();
        let mut carry: Vec<ActorState> = self
            .actors
            .iter()
            .map(|a| {
                let z = a.initial_state(b);
                ActorState {
                    sr_hidden: z.sr_hidden,
                    agent_hidden: z.agent_hidden,
                }
            })
            .collect();
        let mut d_outbox = vec![Tensor::zeros(&[b, k]); n_agents];
        let mut d_obs = vec![Vec::new(); caches.len()];
        for t in (0..caches.len()).rev() {
            let mut d_inboxes = Vec::with_capacity(n_agents);
            let mut slot_obs = Vec::with_capacity(n_agents);
            for n in 0..n_agents {
                let g = self.actors[n].backward_step(
                    &caches[t][n],
                    &StepGrad {
                        d_q: d_q[t][n].clone(),
                        d_outbox: d_outbox[n].clone(),
                        d_state: carry[n].clone(),
                    },
                )?;
                carry[n] = g.d_state;
                d_inboxes.push(g.d_inbox);
                slot_obs.push(g.d_obs);
            }
            d_outbox = route_gradients(&d_inboxes)?;
            d_obs[t] = slot_obs;
        }
        Ok(d_obs)
    }
}
