//! The training loop: act, store, sample, build two views per state, take one
//! Adam step on the online networks, then move the target networks.
//!
//! Randomness comes from independent substreams of the master seed
//! (environment resets, augmentation, initialization, replay sampling,
//! acting, evaluation), so evaluation frequency never perturbs training.
//! Each update applies Adam first and the target update second.

mod ablation;
mod log;

pub use ablation::{
    plan_ablation, run_ablation, run_id, AblationAxis, AblationOutcome, AblationRun, RunScore, ABLATION_MANIFEST,
};
pub use log::{learning_curve, read_run_log, LogEvent, LogRecord, RunLog};

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::sample_view;
use crate::autodiff::{adam_step, AdamState, Tensor};
use crate::dqn::{act_epsilon_greedy, stack_observations, DqnError, EpsilonSchedule, ReplayBuffer, StoredTransition};
use crate::env::{self, Action, EnvError, MdpSpec, Observation};
use crate::losses::{evaluate_objective, LossConfig, LossError, TrainingBatch};
use crate::networks::{greedy_action, Checkpoint, CheckpointError, NetworkConfig, NetworkError, NetworkStack};
use crate::rng::{derive_seed, SplitMix64, Stream};

pub const RUN_LOG: &str = "run.jsonl";
pub const TIMING_LOG: &str = "timing.jsonl";
pub const FINAL_CHECKPOINT: &str = "checkpoint.json";
pub const EVAL_CHECKPOINT: &str = "checkpoint_eval.json";
pub const EFFECTIVE_CONFIG: &str = "config.toml";
pub const SCORE_FILE: &str = "score.json";
pub const NONFINITE_DUMP: &str = "nonfinite_batch.json";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite {component} at step {step}{}", dump.as_ref().map(|p| format!("; batch written to {}", p.display())).unwrap_or_default())]
    NonFinite {
        step: u64,
        component: &'static str,
        dump: Option<PathBuf>,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Dqn(#[from] DqnError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_env_steps: u64,
    pub seed: u64,
    /// EMA coefficient of the target networks; 0 switches to hard copies.
    pub ema_tau: f64,
    /// Updates between hard copies of the target networks when `ema_tau` is 0.
    pub target_sync_interval: u64,
    pub eval_every: u64,
    pub eval_episodes: u32,
    /// Maximum pixel shift of the augmentation.
    pub augment_pad: u32,
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub learning_rate: f64,
    /// Updates between copies of the online Q-head into the target Q-head.
    pub q_target_sync_interval: u64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of `total_env_steps` over which epsilon decays linearly.
    pub epsilon_decay_fraction: f64,
    pub replay_capacity: usize,
    /// Environment steps per learner update.
    pub update_every: u64,
    /// Bootstrap the TD target from the clean next observation instead of a view.
    pub clean_q_target: bool,
    /// Updates between logged loss records.
    pub update_log_interval: u64,
    pub loss: LossConfig,
    pub network: NetworkConfig,
    pub env: MdpSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_env_steps: 50_000,
            seed: 0,
            ema_tau: 0.05,
            target_sync_interval: 1,
            eval_every: 2_000,
            eval_episodes: 10,
            augment_pad: 4,
            batch_size: 64,
            warmup_steps: 1_000,
            learning_rate: 3e-4,
            q_target_sync_interval: 1_000,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.2,
            replay_capacity: 50_000,
            update_every: 1,
            clean_q_target: false,
            update_log_interval: 1,
            loss: LossConfig::default(),
            network: NetworkConfig::default(),
            env: MdpSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        for (name, v) in [
            ("target_sync_interval", self.target_sync_interval),
            ("eval_every", self.eval_every),
            ("q_target_sync_interval", self.q_target_sync_interval),
            ("update_every", self.update_every),
            ("update_log_interval", self.update_log_interval),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.eval_episodes == 0 {
            return bad("eval_episodes must be positive".into());
        }
        if self.batch_size == 0 || self.replay_capacity == 0 {
            return bad("batch_size and replay_capacity must be positive".into());
        }
        if self.batch_size > self.replay_capacity {
            return bad("batch_size exceeds replay_capacity".into());
        }
        if !(0.0..=1.0).contains(&self.ema_tau) {
            return bad(format!("ema_tau must lie in [0, 1], got {}", self.ema_tau));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, v) in [
            ("epsilon_start", self.epsilon_start),
            ("epsilon_end", self.epsilon_end),
            ("epsilon_decay_fraction", self.epsilon_decay_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        self.loss.validate()?;
        self.network.validate()?;
        self.env.validate()?;
        Ok(())
    }

    pub fn epsilon_schedule(&self) -> EpsilonSchedule {
        EpsilonSchedule {
            start: self.epsilon_start,
            end: self.epsilon_end,
            decay_steps: (self.total_env_steps as f64 * self.epsilon_decay_fraction).round() as u64,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub stack: NetworkStack,
    pub log: Vec<LogRecord>,
    /// Score of the last evaluation, if one ran.
    pub final_score: Option<f64>,
    pub updates: u64,
}

/// Mean undiscounted return of the greedy policy on clean observations.
/// Episode `i` resets with the `i`-th draw of a stream seeded by `seed`.
pub fn evaluate(stack: &NetworkStack, spec: &MdpSpec, episodes: u32, seed: u64) -> Result<f64, TrainError> {
    let policy = |obs: &Observation, _: &mut SplitMix64| -> Result<Action, TrainError> {
        let q = stack.q_values(obs.data(), false)?;
        Ok(Action::from_index(greedy_action(&q))?)
    };
    mean_return(spec, episodes, seed, policy)
}

/// Mean return of the uniform random policy, the reference for learning checks.
pub fn random_policy_return(spec: &MdpSpec, episodes: u32, seed: u64) -> Result<f64, TrainError> {
    mean_return(spec, episodes, seed, |_, rng| {
        Ok(Action::from_index(rng.below(Action::COUNT as u64) as usize)?)
    })
}

fn mean_return(
    spec: &MdpSpec,
    episodes: u32,
    seed: u64,
    mut policy: impl FnMut(&Observation, &mut SplitMix64) -> Result<Action, TrainError>,
) -> Result<f64, TrainError> {
    if episodes == 0 {
        return Err(TrainError::Config("evaluation needs at least one episode".into()));
    }
    let mut resets = SplitMix64::new(seed);
    let mut action_rng = SplitMix64::new(derive_seed(seed, 1));
    let mut total = 0.0;
    for _ in 0..episodes {
        let (mut state, mut obs, mut rng) = env::reset(spec, resets.next_u64());
        loop {
            let a = policy(&obs, &mut action_rng)?;
            let out = env::step(spec, &state, a, &mut rng)?;
            total += out.reward;
            if out.done {
                break;
            }
            state = out.state;
            obs = out.observation;
        }
    }
    Ok(total / episodes as f64)
}

/// Seed of the evaluation performed at environment step `step`.
pub fn eval_seed(master_seed: u64, step: u64) -> u64 {
    derive_seed(Stream::Evaluation.seed(master_seed), step)
}

/// Builds a batch from `steps`-long runs starting at `starts`. Views are drawn
/// per transition in the order: first view, second view, then one view of
/// each next state.
pub fn assemble_batch(
    spec: &MdpSpec,
    buffer: &ReplayBuffer<StoredTransition>,
    starts: &[usize],
    steps: usize,
    pad: u32,
    clean_target: bool,
    rng: &mut SplitMix64,
) -> TrainingBatch {
    let mut v1 = Vec::with_capacity(starts.len());
    let mut v2 = Vec::with_capacity(starts.len());
    let mut next: Vec<Vec<Observation>> = vec![Vec::with_capacity(starts.len()); steps];
    let mut actions: Vec<Vec<Action>> = vec![Vec::with_capacity(starts.len()); steps];
    let mut clean = Vec::new();
    let (mut rewards, mut dones) = (Vec::new(), Vec::new());
    for &i in starts {
        let first = buffer.get(i).expect("sampled index in range");
        let obs = env::render(spec, &first.state);
        v1.push(Observation {
            pixels: sample_view(&obs, pad, rng).pixels,
        });
        v2.push(Observation {
            pixels: sample_view(&obs, pad, rng).pixels,
        });
        for k in 0..steps {
            let t = buffer.get(i + k).expect("sequence in range");
            let next_obs = env::render(spec, &t.next_state);
            next[k].push(Observation {
                pixels: sample_view(&next_obs, pad, rng).pixels,
            });
            actions[k].push(t.action);
            if k == 0 && clean_target {
                clean.push(next_obs);
            }
        }
        rewards.push(first.reward);
        dones.push(first.done);
    }
    TrainingBatch {
        v1: stack_observations(&v1),
        v2: stack_observations(&v2),
        actions,
        next_views: next.iter().map(stack_observations).collect(),
        rewards,
        dones,
        clean_next: clean_target.then(|| stack_observations(&clean)),
    }
}

fn dump_batch(path: &Path, step: u64, component: &str, batch: &TrainingBatch) -> std::io::Result<()> {
    let tensor = |t: &Tensor| serde_json::json!({ "shape": t.shape(), "values": t.data() });
    let doc = serde_json::json!({
        "step": step,
        "component": component,
        "v1": tensor(&batch.v1),
        "v2": tensor(&batch.v2),
        "next_views": batch.next_views.iter().map(tensor).collect::<Vec<_>>(),
        "actions": batch.actions.iter().map(|c| c.iter().map(|a| a.index()).collect::<Vec<_>>()).collect::<Vec<_>>(),
        "rewards": batch.rewards,
        "dones": batch.dones,
    });
    fs::write(path, serde_json::to_string(&doc)?)
}

struct Artifacts<'a> {
    dir: &'a Path,
    started: Instant,
    timing: String,
}

impl Artifacts<'_> {
    fn checkpoint(&self, name: &str, stack: &NetworkStack, seed: u64, step: u64) -> Result<(), TrainError> {
        Ok(Checkpoint::from_stack(stack, Some(seed), step).save(&self.dir.join(name))?)
    }

    fn mark_time(&mut self, step: u64) {
        let secs = self.started.elapsed().as_secs_f64();
        self.timing.push_str(&format!("{{\"step\":{step},\"wallclock_s\":{secs:.3}}}\n"));
    }
}

/// Runs one training job. With `out`, writes the run log, checkpoints, the
/// effective config and wall-clock timings into that directory (which must
/// exist); wall-clock times live in their own file so the run log stays
/// byte-for-byte reproducible.
pub fn train(config: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let spec = &config.env;
    let seed = config.seed;
    let mut reset_seeds = Stream::Environment.rng(seed);
    let mut aug_rng = Stream::Augmentation.rng(seed);
    let mut replay_rng = Stream::Replay.rng(seed);
    let mut act_rng = Stream::Acting.rng(seed);
    let mut stack = NetworkStack::new(
        config.network.clone(),
        spec.observation_len(),
        &mut Stream::Initialization.rng(seed),
    )?;
    let mut adam = AdamState::new(stack.online.named().into_iter().map(|(_, t)| t));
    let mut buffer = ReplayBuffer::new(config.replay_capacity)?;
    let schedule = config.epsilon_schedule();
    let steps_k = config.loss.pred_steps;

    let mut artifacts = match out {
        Some(dir) => {
            let path = dir.join(EFFECTIVE_CONFIG);
            fs::write(&path, config.to_toml()).map_err(io_err(&path))?;
            Some(Artifacts {
                dir,
                started: Instant::now(),
                timing: String::new(),
            })
        }
        None => None,
    };
    let mut log = match out {
        Some(dir) => {
            let path = dir.join(RUN_LOG);
            RunLog::to_file(&path).map_err(io_err(&path))?
        }
        None => RunLog::in_memory(),
    };
    let log_path = out.map(|d| d.join(RUN_LOG)).unwrap_or_default();
    let record = |log: &mut RunLog, step: u64, event: LogEvent| {
        log.push(LogRecord { step, seed, event }).map_err(io_err(&log_path))
    };

    let (mut state, mut obs, mut episode_rng) = env::reset(spec, reset_seeds.next_u64());
    let (mut episode_return, mut episode_len) = (0.0, 0u32);
    let mut updates = 0u64;
    let mut final_score = None;

    for t in 0..config.total_env_steps {
        let step_no = t + 1;
        let action = act_epsilon_greedy(&stack, &obs, schedule.value(t), &mut act_rng)?;
        let outcome = env::step(spec, &state, action, &mut episode_rng)?;
        buffer.push(StoredTransition {
            state: state.clone(),
            action,
            reward: outcome.reward,
            next_state: outcome.state.clone(),
            done: outcome.done,
        });
        episode_return += outcome.reward;
        episode_len += 1;
        if outcome.done {
            record(
                &mut log,
                step_no,
                LogEvent::Episode {
                    episodic_return: episode_return,
                    length: episode_len,
                },
            )?;
            (state, obs, episode_rng) = env::reset(spec, reset_seeds.next_u64());
            (episode_return, episode_len) = (0.0, 0);
        } else {
            state = outcome.state;
            obs = outcome.observation;
        }

        let ready = buffer.len() >= config.batch_size.max(steps_k);
        if step_no > config.warmup_steps && step_no % config.update_every == 0 && ready {
            let starts = buffer.sample_sequences(config.batch_size, steps_k, &mut replay_rng, |t| t.done)?;
            let batch = assemble_batch(
                spec,
                &buffer,
                &starts,
                steps_k,
                config.augment_pad,
                config.clean_q_target,
                &mut aug_rng,
            );
            let evaluated = match evaluate_objective(&stack, &batch, &config.loss, spec.gamma) {
                Ok(e) => e,
                Err(e) => {
                    let Some(component) = e.non_finite_source() else {
                        return Err(e.into());
                    };
                    let dump = match &artifacts {
                        Some(a) => {
                            let path = a.dir.join(NONFINITE_DUMP);
                            dump_batch(&path, step_no, component, &batch).map_err(io_err(&path))?;
                            Some(path)
                        }
                        None => None,
                    };
                    log.flush().map_err(io_err(&log_path))?;
                    return Err(TrainError::NonFinite {
                        step: step_no,
                        component,
                        dump,
                    });
                }
            };
            let mut params = stack.online.tensors_mut();
            adam_step(&mut params, &evaluated.grads, &mut adam, config.learning_rate)
                .map_err(|e| TrainError::Loss(e.into()))?;
            updates += 1;
            if config.ema_tau > 0.0 {
                stack.ema_update(config.ema_tau)?;
            } else if updates.is_multiple_of(config.target_sync_interval) {
                stack.hard_sync_ssl();
            }
            if updates.is_multiple_of(config.q_target_sync_interval) {
                stack.sync_q_head();
            }
            if updates.is_multiple_of(config.update_log_interval) {
                record(
                    &mut log,
                    step_no,
                    LogEvent::Update {
                        update: updates,
                        mode: config.loss.mode,
                        losses: evaluated.report,
                    },
                )?;
            }
        }

        let last = step_no == config.total_env_steps;
        if step_no % config.eval_every == 0 || last {
            let score = evaluate(&stack, spec, config.eval_episodes, eval_seed(seed, step_no))?;
            final_score = Some(score);
            record(
                &mut log,
                step_no,
                LogEvent::Eval {
                    eval_score: score,
                    episodes: config.eval_episodes,
                },
            )?;
            ::log::info!("seed {seed} step {step_no}: eval {score:.3} ({updates} updates)");
            if let Some(a) = &mut artifacts {
                a.checkpoint(EVAL_CHECKPOINT, &stack, seed, step_no)?;
                a.mark_time(step_no);
            }
        }
    }

    log.flush().map_err(io_err(&log_path))?;
    if let Some(a) = &mut artifacts {
        a.checkpoint(FINAL_CHECKPOINT, &stack, seed, config.total_env_steps)?;
        let path = a.dir.join(TIMING_LOG);
        fs::write(&path, &a.timing).map_err(io_err(&path))?;
    }
    Ok(TrainOutcome {
        stack,
        log: log.into_records(),
        final_score,
        updates,
    })
}

#[cfg(test)]
mod tests;
