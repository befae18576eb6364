//! Online and target network stacks.
//!
//! The online line holds the encoder `f_o`, latent dynamics model `h_o`,
//! projector `g_o`, the prediction heads `q_pre`/`q_con` and the DQN Q-head.
//! The target line holds `f_m`, `h_m`, `g_m` (moved toward the online line by
//! an exponential moving average) and a target Q-head that is hard-synced.
//! Every target-line output is wrapped in `stop_gradient`.

mod checkpoint;
mod mlp;

pub use checkpoint::{Checkpoint, CheckpointError, ParamRecord, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use mlp::{BoundMlp, Linear, Mlp};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::env::Action;
use crate::rng::SplitMix64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("EMA coefficient must lie in [0, 1], got {0}")]
    InvalidTau(f64),
    #[error("rollout needs at least one action")]
    EmptyRollout,
    #[error("input has {got} features, encoder expects {expected}")]
    InputWidth { got: usize, expected: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub encoder_widths: Vec<usize>,
    pub latent_dim: usize,
    pub dynamics_widths: Vec<usize>,
    pub projector_widths: Vec<usize>,
    pub projection_dim: usize,
    pub predictor_widths: Vec<usize>,
    /// 0: identity heads, 1: one head shared by both losses, 2: separate heads.
    pub num_predictors: u8,
    pub q_head_widths: Vec<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            encoder_widths: vec![256, 128],
            latent_dim: 64,
            dynamics_widths: vec![128],
            projector_widths: vec![64],
            projection_dim: 32,
            predictor_widths: vec![32],
            num_predictors: 2,
            q_head_widths: vec![64],
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.num_predictors > 2 {
            return Err(NetworkError::InvalidConfig(format!(
                "num_predictors must be 0, 1 or 2, got {}",
                self.num_predictors
            )));
        }
        let widths = [
            &self.encoder_widths,
            &self.dynamics_widths,
            &self.projector_widths,
            &self.predictor_widths,
            &self.q_head_widths,
        ];
        if self.latent_dim == 0 || self.projection_dim == 0 || widths.iter().any(|w| w.contains(&0)) {
            return Err(NetworkError::InvalidConfig("layer widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predictors {
    Identity,
    Shared(Mlp),
    Separate { pre: Mlp, con: Mlp },
}

impl Predictors {
    fn named(&self) -> Vec<(String, &Tensor)> {
        fn prefix<'a>(p: &str, m: &'a Mlp) -> Vec<(String, &'a Tensor)> {
            m.named()
                .into_iter()
                .map(|(n, t)| (format!("{p}.{n}"), t))
                .collect()
        }
        match self {
            Predictors::Identity => Vec::new(),
            Predictors::Shared(m) => prefix("predictor", m),
            Predictors::Separate { pre, con } => {
                let mut v = prefix("predictor_pre", pre);
                v.extend(prefix("predictor_con", con));
                v
            }
        }
    }

    fn mlps_mut(&mut self) -> Vec<&mut Mlp> {
        match self {
            Predictors::Identity => Vec::new(),
            Predictors::Shared(m) => vec![m],
            Predictors::Separate { pre, con } => vec![pre, con],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineNets {
    pub encoder: Mlp,
    pub dynamics: Mlp,
    pub projector: Mlp,
    pub predictors: Predictors,
    pub q_head: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetNets {
    pub encoder: Mlp,
    pub dynamics: Mlp,
    pub projector: Mlp,
    pub q_head: Mlp,
}

impl OnlineNets {
    /// All trainable parameters in a fixed order with dotted names.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (p, m) in [
            ("encoder", &self.encoder),
            ("dynamics", &self.dynamics),
            ("projector", &self.projector),
        ] {
            out.extend(m.named().into_iter().map(|(n, t)| (format!("{p}.{n}"), t)));
        }
        out.extend(self.predictors.named());
        out.extend(
            self.q_head
                .named()
                .into_iter()
                .map(|(n, t)| (format!("q_head.{n}"), t)),
        );
        out
    }

    /// Mutable parameters in the same order as [`OnlineNets::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.extend(self.encoder.tensors_mut());
        out.extend(self.dynamics.tensors_mut());
        out.extend(self.projector.tensors_mut());
        for m in self.predictors.mlps_mut() {
            out.extend(m.tensors_mut());
        }
        out.extend(self.q_head.tensors_mut());
        out
    }
}

impl TargetNets {
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (p, m) in [
            ("encoder", &self.encoder),
            ("dynamics", &self.dynamics),
            ("projector", &self.projector),
            ("q_head", &self.q_head),
        ] {
            out.extend(m.named().into_iter().map(|(n, t)| (format!("{p}.{n}"), t)));
        }
        out
    }
}

/// Parameter groups used when inspecting which losses reach which networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Encoder,
    Dynamics,
    Projector,
    Predictors,
    QHead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkStack {
    pub config: NetworkConfig,
    pub input_dim: usize,
    pub online: OnlineNets,
    pub target: TargetNets,
}

impl NetworkStack {
    /// Initialises the online line and copies it into the target line.
    pub fn new(config: NetworkConfig, input_dim: usize, rng: &mut SplitMix64) -> Result<Self, NetworkError> {
        config.validate()?;
        if input_dim == 0 {
            return Err(NetworkError::InvalidConfig("input_dim must be positive".into()));
        }
        let c = &config;
        let encoder = Mlp::init(input_dim, &c.encoder_widths, c.latent_dim, rng);
        let dynamics = Mlp::init(c.latent_dim + Action::COUNT, &c.dynamics_widths, c.latent_dim, rng);
        let projector = Mlp::init(c.latent_dim, &c.projector_widths, c.projection_dim, rng);
        let mut predictor = || Mlp::init(c.projection_dim, &c.predictor_widths, c.projection_dim, rng);
        let predictors = match c.num_predictors {
            0 => Predictors::Identity,
            1 => Predictors::Shared(predictor()),
            _ => {
                let pre = predictor();
                let con = predictor();
                Predictors::Separate { pre, con }
            }
        };
        let q_head = Mlp::init(c.latent_dim, &c.q_head_widths, Action::COUNT, rng);
        let online = OnlineNets {
            encoder,
            dynamics,
            projector,
            predictors,
            q_head,
        };
        let target = TargetNets {
            encoder: online.encoder.clone(),
            dynamics: online.dynamics.clone(),
            projector: online.projector.clone(),
            q_head: online.q_head.clone(),
        };
        Ok(Self {
            config,
            input_dim,
            online,
            target,
        })
    }

    /// Registers every parameter (online and target) as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundStack {
        let online: Vec<Var> = self.online.named().into_iter().map(|(_, t)| tape.leaf(t.clone())).collect();
        let target: Vec<Var> = self.target.named().into_iter().map(|(_, t)| tape.leaf(t.clone())).collect();
        self.assemble(&online, &target)
    }

    /// Groups already-registered variables into a [`BoundStack`]. `online` and
    /// `target` follow the orders of [`OnlineNets::named`] and
    /// [`TargetNets::named`].
    pub fn assemble(&self, online: &[Var], target: &[Var]) -> BoundStack {
        fn take(mlp: &Mlp, vars: &mut std::slice::Iter<'_, Var>) -> BoundMlp {
            BoundMlp {
                layers: mlp
                    .layers
                    .iter()
                    .map(|_| (*vars.next().expect("weight var"), *vars.next().expect("bias var")))
                    .collect(),
            }
        }
        let mut o = online.iter();
        let encoder = take(&self.online.encoder, &mut o);
        let dynamics = take(&self.online.dynamics, &mut o);
        let projector = take(&self.online.projector, &mut o);
        let predictors = match &self.online.predictors {
            Predictors::Identity => BoundPredictors::Identity,
            Predictors::Shared(m) => BoundPredictors::Shared(take(m, &mut o)),
            Predictors::Separate { pre, con } => {
                let pre = take(pre, &mut o);
                let con = take(con, &mut o);
                BoundPredictors::Separate { pre, con }
            }
        };
        let q_head = take(&self.online.q_head, &mut o);
        assert!(o.next().is_none(), "too many online vars");
        let mut t = target.iter();
        let bound = BoundStack {
            encoder,
            dynamics,
            projector,
            predictors,
            q_head,
            target_encoder: take(&self.target.encoder, &mut t),
            target_dynamics: take(&self.target.dynamics, &mut t),
            target_projector: take(&self.target.projector, &mut t),
            target_q_head: take(&self.target.q_head, &mut t),
            frozen_encoder: None,
        };
        assert!(t.next().is_none(), "too many target vars");
        bound
    }

    /// `theta_m <- (1 - tau) * theta_m + tau * theta_o` for the encoder,
    /// dynamics model and projector. The target Q-head is left alone.
    pub fn ema_update(&mut self, tau: f64) -> Result<(), NetworkError> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(NetworkError::InvalidTau(tau));
        }
        let pairs = [
            (&mut self.target.encoder, &self.online.encoder),
            (&mut self.target.dynamics, &self.online.dynamics),
            (&mut self.target.projector, &self.online.projector),
        ];
        for (t, o) in pairs {
            for (tt, ot) in t.tensors_mut().zip(o.tensors()) {
                for (m, p) in tt.data_mut().iter_mut().zip(ot.data()) {
                    *m = (1.0 - tau) * *m + tau * p;
                }
            }
        }
        Ok(())
    }

    /// Copies the online encoder, dynamics model and projector into the target line.
    pub fn hard_sync_ssl(&mut self) {
        self.target.encoder = self.online.encoder.clone();
        self.target.dynamics = self.online.dynamics.clone();
        self.target.projector = self.online.projector.clone();
    }

    pub fn sync_q_head(&mut self) {
        self.target.q_head = self.online.q_head.clone();
    }

    /// Q-values for a batch of flattened observations (`rows x input_dim`).
    pub fn q_values_batch(&self, input: &[f64], rows: usize, use_target: bool) -> Vec<f64> {
        let (enc, head) = if use_target {
            (&self.target.encoder, &self.target.q_head)
        } else {
            (&self.online.encoder, &self.online.q_head)
        };
        let z = enc.forward_values(input, rows);
        head.forward_values(&z, rows)
    }

    /// Q-values of one flattened observation.
    pub fn q_values(&self, input: &[f64], use_target: bool) -> Result<[f64; 3], NetworkError> {
        if input.len() != self.input_dim {
            return Err(NetworkError::InputWidth {
                got: input.len(),
                expected: self.input_dim,
            });
        }
        let q = self.q_values_batch(input, 1, use_target);
        Ok([q[0], q[1], q[2]])
    }

    pub fn parameter_count(&self) -> usize {
        self.online.named().iter().map(|(_, t)| t.len()).sum::<usize>()
            + self.target.named().iter().map(|(_, t)| t.len()).sum::<usize>()
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn greedy_action(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in q.iter().enumerate().skip(1) {
        if *v > q[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub enum BoundPredictors {
    Identity,
    Shared(BoundMlp),
    Separate { pre: BoundMlp, con: BoundMlp },
}

/// Every parameter of a [`NetworkStack`] registered on one tape.
#[derive(Debug, Clone)]
pub struct BoundStack {
    pub encoder: BoundMlp,
    pub dynamics: BoundMlp,
    pub projector: BoundMlp,
    pub predictors: BoundPredictors,
    pub q_head: BoundMlp,
    pub target_encoder: BoundMlp,
    pub target_dynamics: BoundMlp,
    pub target_projector: BoundMlp,
    pub target_q_head: BoundMlp,
    /// When set, encoder branches cut by a [`GradientScope`] evaluate this copy
    /// instead of detaching the online encoder output. Both give the same
    /// values; the copy lets finite differences see the cut branch as constant.
    pub frozen_encoder: Option<BoundMlp>,
}

impl BoundStack {
    /// Online leaves in the order of [`OnlineNets::named`].
    pub fn online_vars(&self) -> Vec<Var> {
        let mut v: Vec<Var> = Vec::new();
        v.extend(self.encoder.vars());
        v.extend(self.dynamics.vars());
        v.extend(self.projector.vars());
        match &self.predictors {
            BoundPredictors::Identity => {}
            BoundPredictors::Shared(m) => v.extend(m.vars()),
            BoundPredictors::Separate { pre, con } => {
                v.extend(pre.vars());
                v.extend(con.vars());
            }
        }
        v.extend(self.q_head.vars());
        v
    }

    /// Target leaves in the order of [`TargetNets::named`].
    pub fn target_vars(&self) -> Vec<Var> {
        let mut v: Vec<Var> = Vec::new();
        for m in [
            &self.target_encoder,
            &self.target_dynamics,
            &self.target_projector,
            &self.target_q_head,
        ] {
            v.extend(m.vars());
        }
        v
    }

    pub fn group_vars(&self, group: ParamGroup) -> Vec<Var> {
        match group {
            ParamGroup::Encoder => self.encoder.vars().collect(),
            ParamGroup::Dynamics => self.dynamics.vars().collect(),
            ParamGroup::Projector => self.projector.vars().collect(),
            ParamGroup::Predictors => match &self.predictors {
                BoundPredictors::Identity => Vec::new(),
                BoundPredictors::Shared(m) => m.vars().collect(),
                BoundPredictors::Separate { pre, con } => pre.vars().chain(con.vars()).collect(),
            },
            ParamGroup::QHead => self.q_head.vars().collect(),
        }
    }

    pub fn q_pre(&self, tape: &mut Tape, y: Var) -> Result<Var, AutodiffError> {
        match &self.predictors {
            BoundPredictors::Identity => Ok(y),
            BoundPredictors::Shared(m) | BoundPredictors::Separate { pre: m, .. } => m.forward(tape, y),
        }
    }

    pub fn q_con(&self, tape: &mut Tape, y: Var) -> Result<Var, AutodiffError> {
        match &self.predictors {
            BoundPredictors::Identity => Ok(y),
            BoundPredictors::Shared(m) | BoundPredictors::Separate { con: m, .. } => m.forward(tape, y),
        }
    }
}

/// Where encoder gradients are cut for each auxiliary loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GradientScope {
    /// The prediction loss does not update the encoder.
    pub detach_encoder_for_prediction: bool,
    /// The consistency loss does not update the encoder.
    pub detach_encoder_for_consistency: bool,
}

/// Batched inputs of the latent pipeline; every matrix has one row per transition.
#[derive(Debug, Clone)]
pub struct PipelineInputs {
    /// First view of `s_t`, `[B, input_dim]`.
    pub v1: Var,
    /// Second view of `s_t`.
    pub v2: Var,
    /// One-hot actions `a_t .. a_{t+K-1}`, each `[B, 3]`.
    pub actions: Vec<Var>,
    /// Views of `s_{t+1} .. s_{t+K}`.
    pub next_views: Vec<Var>,
}

/// Latents of one batch. Per-step vectors have `K` entries; index `k` refers to
/// the prediction of time `t + k + 1`.
#[derive(Debug, Clone)]
pub struct LatentPipeline {
    /// `z_t^1 = f_o(v_t^1)`
    pub z1: Var,
    /// `zbar_t^2 = f_m(v_t^2)` (stop-gradient)
    pub zbar2: Var,
    /// Online dynamics predictions feeding the prediction loss.
    pub xhat1: Vec<Var>,
    /// Online projections of `xhat1`.
    pub yhat1: Vec<Var>,
    /// Online projections feeding the consistency loss; identical to `yhat1`
    /// unless the two losses use different gradient scopes.
    pub yhat1_con: Vec<Var>,
    /// Target dynamics predictions from `zbar2` (stop-gradient).
    pub xbar2: Vec<Var>,
    /// Target projections of `xbar2` (stop-gradient).
    pub ybar2: Vec<Var>,
    /// `f_m` of the true next views (stop-gradient).
    pub zbar_next: Vec<Var>,
    /// `g_m(f_m(v_{t+k+1}))` (stop-gradient).
    pub ytilde: Vec<Var>,
}

/// Iterates the dynamics model: each step consumes the previous prediction.
pub fn rollout_k(
    tape: &mut Tape,
    dynamics: &BoundMlp,
    z: Var,
    actions: &[Var],
) -> Result<Vec<Var>, NetworkError> {
    if actions.is_empty() {
        return Err(NetworkError::EmptyRollout);
    }
    let mut out = Vec::with_capacity(actions.len());
    let mut current = z;
    for &a in actions {
        let input = tape.concat(current, a)?;
        current = dynamics.forward(tape, input)?;
        out.push(current);
    }
    Ok(out)
}

/// Runs the online and target lines over one batch.
pub fn forward_pipeline(
    tape: &mut Tape,
    net: &BoundStack,
    inputs: &PipelineInputs,
    scope: GradientScope,
) -> Result<LatentPipeline, NetworkError> {
    if inputs.actions.len() != inputs.next_views.len() {
        return Err(NetworkError::InvalidConfig(format!(
            "{} actions but {} next views",
            inputs.actions.len(),
            inputs.next_views.len()
        )));
    }
    let z1 = net.encoder.forward(tape, inputs.v1)?;
    let detached = if scope.detach_encoder_for_prediction || scope.detach_encoder_for_consistency {
        let z = match &net.frozen_encoder {
            Some(frozen) => frozen.forward(tape, inputs.v1)?,
            None => z1,
        };
        Some(tape.stop_gradient(z)?)
    } else {
        None
    };
    let pre_input = if scope.detach_encoder_for_prediction { detached.unwrap() } else { z1 };
    let con_input = if scope.detach_encoder_for_consistency { detached.unwrap() } else { z1 };

    let xhat1 = rollout_k(tape, &net.dynamics, pre_input, &inputs.actions)?;
    let yhat1 = xhat1
        .iter()
        .map(|&x| net.projector.forward(tape, x))
        .collect::<Result<Vec<_>, _>>()?;
    let yhat1_con = if pre_input == con_input {
        yhat1.clone()
    } else {
        let xcon = rollout_k(tape, &net.dynamics, con_input, &inputs.actions)?;
        xcon.iter()
            .map(|&x| net.projector.forward(tape, x))
            .collect::<Result<Vec<_>, _>>()?
    };

    let zbar2_raw = net.target_encoder.forward(tape, inputs.v2)?;
    let zbar2 = tape.stop_gradient(zbar2_raw)?;
    let mut xbar2 = Vec::with_capacity(inputs.actions.len());
    let mut ybar2 = Vec::with_capacity(inputs.actions.len());
    for x in rollout_k(tape, &net.target_dynamics, zbar2, &inputs.actions)? {
        let y = net.target_projector.forward(tape, x)?;
        xbar2.push(tape.stop_gradient(x)?);
        ybar2.push(tape.stop_gradient(y)?);
    }

    let mut zbar_next = Vec::with_capacity(inputs.next_views.len());
    let mut ytilde = Vec::with_capacity(inputs.next_views.len());
    for &v in &inputs.next_views {
        let z = net.target_encoder.forward(tape, v)?;
        let z = tape.stop_gradient(z)?;
        let y = net.target_projector.forward(tape, z)?;
        zbar_next.push(z);
        ytilde.push(tape.stop_gradient(y)?);
    }

    Ok(LatentPipeline {
        z1,
        zbar2,
        xhat1,
        yhat1,
        yhat1_con,
        xbar2,
        ybar2,
        zbar_next,
        ytilde,
    })
}

/// One-hot rows for a batch of actions.
pub fn one_hot(actions: &[Action]) -> Tensor {
    let mut data = vec![0.0; actions.len() * Action::COUNT];
    for (i, a) in actions.iter().enumerate() {
        data[i * Action::COUNT + a.index()] = 1.0;
    }
    Tensor::from_parts(vec![actions.len(), Action::COUNT], data)
}
