//! Training objectives: the cosine prediction and consistency losses, their
//! InfoNCE substitute, and the weighted sum with the TD term.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::dqn::{td_loss_graph, DqnError};
use crate::env::Action;
use crate::networks::{
    forward_pipeline, one_hot, BoundStack, GradientScope, LatentPipeline, NetworkError, NetworkStack,
    ParamGroup, PipelineInputs,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("{component} is not finite")]
    NonFinite { component: &'static str },
    #[error("malformed batch: {0}")]
    Batch(String),
    #[error("unknown loss mode '{0}'")]
    UnknownMode(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Dqn(#[from] DqnError),
}

impl LossError {
    /// The loss component or tape operation that produced a non-finite value,
    /// however deeply the error is wrapped.
    pub fn non_finite_source(&self) -> Option<&'static str> {
        let from_tape = |e: &AutodiffError| match e {
            AutodiffError::NonFinite { op } => Some(*op),
            _ => None,
        };
        match self {
            LossError::NonFinite { component } => Some(component),
            LossError::Autodiff(e)
            | LossError::Network(NetworkError::Autodiff(e))
            | LossError::Dqn(DqnError::Autodiff(e))
            | LossError::Dqn(DqnError::Network(NetworkError::Autodiff(e))) => from_tape(e),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    #[default]
    Vcd,
    /// The encoder ignores the prediction loss.
    VcdPne,
    /// The encoder ignores the consistency loss.
    VcdCne,
    /// No consistency loss.
    Base,
    /// Consistency loss replaced by InfoNCE.
    Contrastive,
}

impl LossMode {
    pub const ALL: [LossMode; 5] = [
        LossMode::Vcd,
        LossMode::VcdPne,
        LossMode::VcdCne,
        LossMode::Base,
        LossMode::Contrastive,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Vcd => "vcd",
            LossMode::VcdPne => "vcd_pne",
            LossMode::VcdCne => "vcd_cne",
            LossMode::Base => "base",
            LossMode::Contrastive => "contrastive",
        }
    }

    pub fn scope(self) -> GradientScope {
        GradientScope {
            detach_encoder_for_prediction: self == LossMode::VcdPne,
            detach_encoder_for_consistency: self == LossMode::VcdCne,
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossMode {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LossMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| LossError::UnknownMode(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda: f64,
    pub pred_steps: usize,
    pub mode: LossMode,
    pub infonce_temperature: f64,
    /// Average the auxiliary losses over both view orderings.
    pub symmetrize: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            pred_steps: 1,
            mode: LossMode::Vcd,
            infonce_temperature: 0.1,
            symmetrize: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(LossError::InvalidConfig(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        if self.pred_steps == 0 {
            return Err(LossError::InvalidConfig("pred_steps must be at least 1".into()));
        }
        if !(self.infonce_temperature.is_finite() && self.infonce_temperature > 0.0) {
            return Err(LossError::InvalidTemperature(self.infonce_temperature));
        }
        Ok(())
    }

    /// Weight actually applied to the consistency term.
    pub fn effective_lambda(&self) -> f64 {
        if self.mode == LossMode::Base {
            0.0
        } else {
            self.lambda
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_rl: f64,
    pub l_pre: f64,
    pub l_con: f64,
    pub l_total: f64,
    pub lambda: f64,
}

/// Combines component values into a report, in the same order of operations
/// as the graph built by [`compose_total`].
pub fn total_loss(l_rl: f64, l_pre: f64, l_con: f64, config: &LossConfig) -> Result<LossReport, LossError> {
    for (component, v) in [("l_rl", l_rl), ("l_pre", l_pre), ("l_con", l_con)] {
        if !v.is_finite() {
            return Err(LossError::NonFinite { component });
        }
    }
    let lambda = config.effective_lambda();
    Ok(LossReport {
        l_rl,
        l_pre,
        l_con,
        l_total: (l_rl + l_pre) + l_con * lambda,
        lambda,
    })
}

/// Mean over rows of `2 - 2 cos(prediction_i, target_i)`.
pub fn cosine_distance_loss(tape: &mut Tape, prediction: Var, target: Var) -> Result<Var, LossError> {
    let cos = tape.cosine_similarity(prediction, target)?;
    let rows = tape.value(cos).len();
    let two = tape.constant(Tensor::full(&[rows], 2.0));
    let scaled = tape.scale(cos, 2.0)?;
    let per_row = tape.sub(two, scaled)?;
    Ok(tape.reduce_mean(per_row)?)
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Var, LossError> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    if terms.len() > 1 {
        acc = tape.scale(acc, 1.0 / terms.len() as f64)?;
    }
    Ok(acc)
}

/// `q_pre(yhat)` against the target projection of the true next view,
/// averaged over the predicted steps.
pub fn prediction_loss(tape: &mut Tape, net: &BoundStack, pipe: &LatentPipeline) -> Result<Var, LossError> {
    let mut terms = Vec::with_capacity(pipe.yhat1.len());
    for (&y, &target) in pipe.yhat1.iter().zip(&pipe.ytilde) {
        let p = net.q_pre(tape, y)?;
        terms.push(cosine_distance_loss(tape, p, target)?);
    }
    mean_of(tape, &terms)
}

/// `q_con(yhat)` against the target line's prediction from the second view,
/// averaged over the predicted steps.
pub fn consistency_loss(tape: &mut Tape, net: &BoundStack, pipe: &LatentPipeline) -> Result<Var, LossError> {
    let mut terms = Vec::with_capacity(pipe.yhat1_con.len());
    for (&y, &target) in pipe.yhat1_con.iter().zip(&pipe.ybar2) {
        let p = net.q_con(tape, y)?;
        terms.push(cosine_distance_loss(tape, p, target)?);
    }
    mean_of(tape, &terms)
}

/// InfoNCE with in-batch negatives: row `i` of `keys` is the positive for row
/// `i` of `queries`, every other row a negative.
pub fn infonce_loss(tape: &mut Tape, queries: Var, keys: Var, temperature: f64) -> Result<Var, LossError> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(LossError::InvalidTemperature(temperature));
    }
    let (qs, ks) = (tape.value(queries).shape().to_vec(), tape.value(keys).shape().to_vec());
    if qs.len() != 2 || qs != ks {
        return Err(LossError::Batch(format!("queries {qs:?} and keys {ks:?} must be equal matrices")));
    }
    let b = qs[0];
    let qn = tape.l2_normalize(queries)?;
    let kn = tape.l2_normalize(keys)?;
    let kt = tape.transpose(kn)?;
    let sims = tape.matmul(qn, kt)?;
    let logits = tape.scale(sims, 1.0 / temperature)?;

    // Row-max shift; it cancels in the loss, so it is a constant.
    let lv = tape.value(logits);
    let mut shift = Vec::with_capacity(b * b);
    for i in 0..b {
        let m = lv.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        shift.extend(std::iter::repeat_n(m, b));
    }
    let shift = tape.constant(Tensor::from_parts(vec![b, b], shift));
    let shifted = tape.sub(logits, shift)?;

    let e = tape.exp(shifted)?;
    let sum = tape.sum_last(e)?;
    let lse = tape.log(sum)?;
    let mut eye = vec![0.0; b * b];
    (0..b).for_each(|i| eye[i * b + i] = 1.0);
    let eye = tape.constant(Tensor::from_parts(vec![b, b], eye));
    let diag = tape.mul(shifted, eye)?;
    let positive = tape.sum_last(diag)?;
    let per_row = tape.sub(lse, positive)?;
    Ok(tape.reduce_mean(per_row)?)
}

fn contrastive_consistency(
    tape: &mut Tape,
    net: &BoundStack,
    pipe: &LatentPipeline,
    temperature: f64,
) -> Result<Var, LossError> {
    let mut terms = Vec::with_capacity(pipe.yhat1_con.len());
    for (&y, &target) in pipe.yhat1_con.iter().zip(&pipe.ybar2) {
        let p = net.q_con(tape, y)?;
        terms.push(infonce_loss(tape, p, target, temperature)?);
    }
    mean_of(tape, &terms)
}

/// Scalar nodes of one objective.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveTerms {
    pub l_rl: Var,
    pub l_pre: Var,
    pub l_con: Var,
    /// Contribution of the prediction loss to the total.
    pub pre_term: Var,
    /// `lambda * l_con`, cut from the graph when the weight is zero.
    pub con_term: Var,
    pub total: Var,
}

impl ObjectiveTerms {
    pub fn report(&self, tape: &Tape, config: &LossConfig) -> LossReport {
        LossReport {
            l_rl: tape.value(self.l_rl).item(),
            l_pre: tape.value(self.l_pre).item(),
            l_con: tape.value(self.l_con).item(),
            l_total: tape.value(self.total).item(),
            lambda: config.effective_lambda(),
        }
    }
}

/// `L_rl + L_pre + lambda * L_con` as a graph.
pub fn compose_total(
    tape: &mut Tape,
    l_rl: Var,
    l_pre: Var,
    l_con: Var,
    config: &LossConfig,
) -> Result<ObjectiveTerms, LossError> {
    let lambda = config.effective_lambda();
    let con_source = if lambda == 0.0 { tape.stop_gradient(l_con)? } else { l_con };
    let con_term = tape.scale(con_source, lambda)?;
    let partial = tape.add(l_rl, l_pre)?;
    let total = tape.add(partial, con_term)?;
    Ok(ObjectiveTerms {
        l_rl,
        l_pre,
        l_con,
        pre_term: l_pre,
        con_term,
        total,
    })
}

/// One mini-batch of `B` transitions with `K` predicted steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    /// First view of `s_t`, `[B, D]`.
    pub v1: Tensor,
    /// Second view of `s_t`, `[B, D]`.
    pub v2: Tensor,
    /// `K` action columns, each of length `B`.
    pub actions: Vec<Vec<Action>>,
    /// Views of `s_{t+1} .. s_{t+K}`, each `[B, D]`. The first one also feeds
    /// the TD target unless `clean_next` is set.
    pub next_views: Vec<Tensor>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Un-augmented `s_{t+1}` for the TD target.
    pub clean_next: Option<Tensor>,
}

/// Tape handles of a registered [`TrainingBatch`].
#[derive(Debug, Clone)]
pub struct BatchVars {
    pub inputs: PipelineInputs,
    pub clean_next: Option<Var>,
}

impl TrainingBatch {
    pub fn batch_size(&self) -> usize {
        self.rewards.len()
    }

    pub fn validate(&self, input_dim: usize) -> Result<(), LossError> {
        let b = self.rewards.len();
        if b == 0 {
            return Err(LossError::Batch("batch is empty".into()));
        }
        if self.actions.is_empty() || self.actions.len() != self.next_views.len() {
            return Err(LossError::Batch(format!(
                "{} action steps but {} next-view steps",
                self.actions.len(),
                self.next_views.len()
            )));
        }
        if self.dones.len() != b || self.actions.iter().any(|a| a.len() != b) {
            return Err(LossError::Batch("per-transition fields disagree in length".into()));
        }
        let expected = [b, input_dim];
        let views = [&self.v1, &self.v2]
            .into_iter()
            .chain(self.next_views.iter())
            .chain(self.clean_next.iter());
        for v in views {
            if v.shape() != expected {
                return Err(LossError::Batch(format!(
                    "view of shape {:?}, expected {expected:?}",
                    v.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn register(&self, tape: &mut Tape) -> BatchVars {
        let inputs = PipelineInputs {
            v1: tape.constant(self.v1.clone()),
            v2: tape.constant(self.v2.clone()),
            actions: self.actions.iter().map(|a| tape.constant(one_hot(a))).collect(),
            next_views: self.next_views.iter().map(|v| tape.constant(v.clone())).collect(),
        };
        let clean_next = self.clean_next.as_ref().map(|t| tape.constant(t.clone()));
        BatchVars { inputs, clean_next }
    }
}

/// The complete objective of one update.
#[derive(Debug, Clone)]
pub struct Objective {
    pub terms: ObjectiveTerms,
    pub pipeline: LatentPipeline,
}

/// Builds `L_total` for `batch` on a tape where `net` is already bound.
pub fn build_objective(
    tape: &mut Tape,
    net: &BoundStack,
    batch: &TrainingBatch,
    config: &LossConfig,
    gamma: f64,
) -> Result<Objective, LossError> {
    config.validate()?;
    if batch.actions.len() != config.pred_steps {
        return Err(LossError::Batch(format!(
            "batch has {} predicted steps, configuration asks for {}",
            batch.actions.len(),
            config.pred_steps
        )));
    }
    let vars = batch.register(tape);
    let scope = config.mode.scope();
    let pipe = forward_pipeline(tape, net, &vars.inputs, scope)?;
    let aux = |tape: &mut Tape, pipe: &LatentPipeline| -> Result<(Var, Var), LossError> {
        let l_pre = prediction_loss(tape, net, pipe)?;
        let l_con = if config.mode == LossMode::Contrastive {
            contrastive_consistency(tape, net, pipe, config.infonce_temperature)?
        } else {
            consistency_loss(tape, net, pipe)?
        };
        Ok((l_pre, l_con))
    };
    let (mut l_pre, mut l_con) = aux(tape, &pipe)?;
    if config.symmetrize {
        let swapped = PipelineInputs {
            v1: vars.inputs.v2,
            v2: vars.inputs.v1,
            ..vars.inputs.clone()
        };
        let mirror = forward_pipeline(tape, net, &swapped, scope)?;
        let (p2, c2) = aux(tape, &mirror)?;
        l_pre = mean_of(tape, &[l_pre, p2])?;
        l_con = mean_of(tape, &[l_con, c2])?;
    }

    let z_next = match vars.clean_next {
        Some(v) => {
            let z = net.target_encoder.forward(tape, v)?;
            tape.stop_gradient(z)?
        }
        None => pipe.zbar_next[0],
    };
    let l_rl = td_loss_graph(
        tape,
        net,
        pipe.z1,
        z_next,
        &batch.actions[0],
        &batch.rewards,
        &batch.dones,
        gamma,
    )?;
    let terms = compose_total(tape, l_rl, l_pre, l_con, config)?;
    Ok(Objective { terms, pipeline: pipe })
}

/// Objective value with gradients for every online parameter, in
/// `OnlineNets::named` order.
#[derive(Debug, Clone)]
pub struct Evaluated {
    pub report: LossReport,
    pub grads: Vec<Tensor>,
}

pub fn evaluate_objective(
    stack: &NetworkStack,
    batch: &TrainingBatch,
    config: &LossConfig,
    gamma: f64,
) -> Result<Evaluated, LossError> {
    batch.validate(stack.input_dim)?;
    let mut tape = Tape::new();
    let net = stack.bind(&mut tape);
    let objective = build_objective(&mut tape, &net, batch, config, gamma)?;
    let report = objective.terms.report(&tape, config);
    total_loss(report.l_rl, report.l_pre, report.l_con, config)?;
    if !report.l_total.is_finite() {
        return Err(LossError::NonFinite { component: "l_total" });
    }
    let g = tape.backward(objective.terms.total)?;
    let grads = net
        .online_vars()
        .into_iter()
        .zip(stack.online.named())
        .map(|(v, (_, t))| g.get_or_zeros(v, t))
        .collect();
    Ok(Evaluated { report, grads })
}

/// Auxiliary loss whose gradient reach is inspected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuxLoss {
    Prediction,
    Consistency,
}

/// Which parameter groups receive nonzero gradient from each weighted
/// auxiliary term.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientScopeReport {
    pub mode: LossMode,
    pub prediction: Vec<(ParamGroup, bool)>,
    pub consistency: Vec<(ParamGroup, bool)>,
}

impl GradientScopeReport {
    pub fn reaches(&self, loss: AuxLoss, group: ParamGroup) -> bool {
        let row = match loss {
            AuxLoss::Prediction => &self.prediction,
            AuxLoss::Consistency => &self.consistency,
        };
        row.iter().any(|&(g, hit)| g == group && hit)
    }

    /// `[pre->encoder, pre->dynamics, con->encoder, con->dynamics]`.
    pub fn check_marks(&self) -> [bool; 4] {
        [
            self.reaches(AuxLoss::Prediction, ParamGroup::Encoder),
            self.reaches(AuxLoss::Prediction, ParamGroup::Dynamics),
            self.reaches(AuxLoss::Consistency, ParamGroup::Encoder),
            self.reaches(AuxLoss::Consistency, ParamGroup::Dynamics),
        ]
    }
}

pub fn inspect_gradient_scope(
    stack: &NetworkStack,
    batch: &TrainingBatch,
    config: &LossConfig,
    gamma: f64,
) -> Result<GradientScopeReport, LossError> {
    batch.validate(stack.input_dim)?;
    let mut tape = Tape::new();
    let net = stack.bind(&mut tape);
    let objective = build_objective(&mut tape, &net, batch, config, gamma)?;
    let groups = [
        ParamGroup::Encoder,
        ParamGroup::Dynamics,
        ParamGroup::Projector,
        ParamGroup::Predictors,
        ParamGroup::QHead,
    ];
    let reach = |root: Var| -> Result<Vec<(ParamGroup, bool)>, LossError> {
        let g = tape.backward(root)?;
        Ok(groups
            .iter()
            .map(|&group| (group, net.group_vars(group).into_iter().any(|v| g.is_nonzero(v))))
            .collect())
    };
    let prediction = reach(objective.terms.pre_term)?;
    let consistency = reach(objective.terms.con_term)?;
    Ok(GradientScopeReport {
        mode: config.mode,
        prediction,
        consistency,
    })
}
