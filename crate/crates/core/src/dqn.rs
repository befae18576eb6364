//! Value-based backbone: replay buffer, epsilon-greedy acting and the one-step
//! TD objective that supplies the RL term of the total loss.

use std::collections::VecDeque;

use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::env::{self, Action, MdpSpec, Observation, TabularState};
use crate::networks::{greedy_action, one_hot, BoundStack, NetworkError, NetworkStack};
use crate::rng::SplitMix64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DqnError {
    #[error("cannot sample {requested} items from a buffer holding {available}")]
    InsufficientData { requested: usize, available: usize },
    #[error("no stored sequence of {0} consecutive steps within one episode")]
    NoValidSequence(usize),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("epsilon must lie in [0, 1], got {0}")]
    InvalidEpsilon(f64),
    #[error("replay capacity must be positive")]
    ZeroCapacity,
    #[error("batch fields disagree in length: {0}")]
    BatchLength(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Observation,
    pub action: Action,
    pub reward: f64,
    pub next_obs: Observation,
    pub done: bool,
}

/// Replay entry keeping tabular states; observations are re-rendered on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTransition {
    pub state: TabularState,
    pub action: Action,
    pub reward: f64,
    pub next_state: TabularState,
    pub done: bool,
}

impl StoredTransition {
    pub fn materialize(&self, spec: &MdpSpec) -> Transition {
        Transition {
            obs: env::render(spec, &self.state),
            action: self.action,
            reward: self.reward,
            next_obs: env::render(spec, &self.next_state),
            done: self.done,
        }
    }
}

/// Ring buffer; the oldest item is evicted when full. Index 0 is the oldest.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    items: VecDeque<T>,
}

impl<T: Clone> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Result<Self, DqnError> {
        if capacity == 0 {
            return Err(DqnError::ZeroCapacity);
        }
        Ok(Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(item);
    }

    pub fn get(&self, index: usize) -> Option<&T> {
        self.items.get(index)
    }

    /// `n` indices drawn uniformly with replacement.
    pub fn sample_indices(&self, n: usize, rng: &mut SplitMix64) -> Result<Vec<usize>, DqnError> {
        if self.items.len() < n || self.items.is_empty() {
            return Err(DqnError::InsufficientData {
                requested: n,
                available: self.items.len(),
            });
        }
        let len = self.items.len() as u64;
        Ok((0..n).map(|_| rng.below(len) as usize).collect())
    }

    pub fn sample(&self, n: usize, rng: &mut SplitMix64) -> Result<Vec<T>, DqnError> {
        Ok(self
            .sample_indices(n, rng)?
            .into_iter()
            .map(|i| self.items[i].clone())
            .collect())
    }

    /// Start indices of `n` runs of `steps` consecutive items in which no item
    /// before the last ends an episode. Starts are drawn uniformly and
    /// redrawn until valid; with `steps == 1` this is plain uniform sampling.
    pub fn sample_sequences(
        &self,
        n: usize,
        steps: usize,
        rng: &mut SplitMix64,
        is_done: impl Fn(&T) -> bool,
    ) -> Result<Vec<usize>, DqnError> {
        if steps <= 1 {
            return self.sample_indices(n, rng);
        }
        let valid = |i: usize| {
            i + steps <= self.items.len() && (i..i + steps - 1).all(|j| !is_done(&self.items[j]))
        };
        if self.items.len() < n || !(0..self.items.len()).any(valid) {
            return if self.items.len() < n {
                Err(DqnError::InsufficientData {
                    requested: n,
                    available: self.items.len(),
                })
            } else {
                Err(DqnError::NoValidSequence(steps))
            };
        }
        let len = self.items.len() as u64;
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let i = rng.below(len) as usize;
            if valid(i) {
                out.push(i);
            }
        }
        Ok(out)
    }
}

/// Linear decay from `start` to `end` over the first `decay_steps` steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: u64,
}

impl EpsilonSchedule {
    pub fn value(&self, step: u64) -> f64 {
        if self.decay_steps == 0 || step >= self.decay_steps {
            return self.end;
        }
        let frac = step as f64 / self.decay_steps as f64;
        self.start + (self.end - self.start) * frac
    }
}

/// With probability `epsilon` a uniform action, otherwise the greedy action of
/// the online Q-values (ties to the lowest index). Always draws one uniform
/// number first, and a second only when exploring.
pub fn act_epsilon_greedy(
    stack: &NetworkStack,
    obs: &Observation,
    epsilon: f64,
    rng: &mut SplitMix64,
) -> Result<Action, DqnError> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(DqnError::InvalidEpsilon(epsilon));
    }
    if rng.next_f64() < epsilon {
        return Ok(Action::from_index(rng.below(Action::COUNT as u64) as usize).expect("index < 3"));
    }
    let q = stack.q_values(obs.data(), false)?;
    Ok(Action::from_index(greedy_action(&q)).expect("index < 3"))
}

/// Mean squared TD error. `z_online` feeds the online Q-head; the bootstrap
/// target uses the target Q-head on `z_next_target` and never carries gradient.
#[allow(clippy::too_many_arguments)]
pub fn td_loss_graph(
    tape: &mut Tape,
    net: &BoundStack,
    z_online: Var,
    z_next_target: Var,
    actions: &[Action],
    rewards: &[f64],
    dones: &[bool],
    gamma: f64,
) -> Result<Var, DqnError> {
    let b = actions.len();
    if b == 0 {
        return Err(DqnError::EmptyBatch);
    }
    if rewards.len() != b || dones.len() != b {
        return Err(DqnError::BatchLength(format!(
            "{b} actions, {} rewards, {} dones",
            rewards.len(),
            dones.len()
        )));
    }
    let q = net.q_head.forward(tape, z_online)?;
    let mask = tape.constant(one_hot(actions));
    let picked = tape.mul(q, mask)?;
    let q_sa = tape.sum_last(picked)?;

    let q_next = net.target_q_head.forward(tape, z_next_target)?;
    let q_next = tape.stop_gradient(q_next)?;
    let next_values = tape.value(q_next);
    let targets: Vec<f64> = (0..b)
        .map(|i| {
            let row = next_values.row(i);
            let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let cont = if dones[i] { 0.0 } else { 1.0 };
            rewards[i] + gamma * cont * best
        })
        .collect();
    let y = tape.constant(Tensor::vector(targets));
    let diff = tape.sub(q_sa, y)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.reduce_mean(sq)?)
}

/// Flattens observations into a `[B, l*H*W]` matrix.
pub fn stack_observations<'a>(obs: impl IntoIterator<Item = &'a Observation>) -> Tensor {
    let mut data = Vec::new();
    let mut rows = 0;
    let mut width = 0;
    for o in obs {
        width = o.data().len();
        data.extend_from_slice(o.data());
        rows += 1;
    }
    Tensor::from_parts(vec![rows, width], data)
}

#[derive(Debug, Clone)]
pub struct TdLossOutput {
    pub loss: f64,
    /// Gradients for the online parameters, in `OnlineNets::named` order.
    pub grads: Vec<Tensor>,
}

/// TD loss on clean observations, with gradients for every online parameter.
pub fn td_loss(stack: &NetworkStack, batch: &[Transition], gamma: f64) -> Result<TdLossOutput, DqnError> {
    if batch.is_empty() {
        return Err(DqnError::EmptyBatch);
    }
    let mut tape = Tape::new();
    let net = stack.bind(&mut tape);
    let obs = tape.constant(stack_observations(batch.iter().map(|t| &t.obs)));
    let next = tape.constant(stack_observations(batch.iter().map(|t| &t.next_obs)));
    let z = net.encoder.forward(&mut tape, obs)?;
    let zn = net.target_encoder.forward(&mut tape, next)?;
    let zn = tape.stop_gradient(zn)?;
    let actions: Vec<Action> = batch.iter().map(|t| t.action).collect();
    let rewards: Vec<f64> = batch.iter().map(|t| t.reward).collect();
    let dones: Vec<bool> = batch.iter().map(|t| t.done).collect();
    let loss = td_loss_graph(&mut tape, &net, z, zn, &actions, &rewards, &dones, gamma)?;
    let g = tape.backward(loss)?;
    let grads = net
        .online_vars()
        .into_iter()
        .zip(stack.online.named())
        .map(|(v, (_, t))| g.get_or_zeros(v, t))
        .collect();
    Ok(TdLossOutput {
        loss: tape.value(loss).item(),
        grads,
    })
}
