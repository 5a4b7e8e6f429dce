//! The β-conditioned actor-critic over meshes: hierarchical action
//! sampling (how many edits, then which edges), exact log-probabilities,
//! value estimates, counterfactual rewards, and the joint training loop
//! that alternates policy and evolution updates.
//!
//! Sampling is a two-pass affair: a forward pass produces logits and the
//! drawn action's log-probability is evaluated with the same tape ops the
//! training pass replays, so the two agree bit for bit.

use crate::datagen::Trajectory;
use crate::error::{Error, Result};
use crate::evolution::{
    rollout, rollout_loss_on_tape, trajectory_series, EvolutionModel, IdentityPolicy,
    RemeshPolicy, RolloutRecord,
};
use crate::gnn::{
    encode, pool_global_mean, Act, GraphBatch, Mlp, MlpVars, NormStats, Processor,
    ProcessorVars,
};
use crate::mesh::{EdgeId, Mesh, RemeshAction};
use crate::tensor::{
    categorical_sample, clip_global_norm, cosine_lr, Adam, Tape, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Edge feature width on 1D chains, mirrored from the evolution model.
const EDGE_WIDTH_1D: usize = 2;

/// The actor-critic network. One processor feeds every head; β joins the
/// node latents only after message passing.
#[derive(Clone, Debug)]
pub struct PolicyModel {
    pub processor: Processor,
    /// Count trunk on the pooled latent.
    pub count_mlp: Mlp,
    /// Final linear producing both (k_max+1)-logit blocks.
    pub count_linear: Mlp,
    pub edge_refine_mlp: Mlp,
    pub edge_coarsen_mlp: Mlp,
    /// Linear head estimating the error part of the reward from [z̄; β].
    pub value_loss_head: Mlp,
    /// Linear head estimating the computation part from z̄ alone, so that
    /// v = loss_head + β · comp_head stays affine in β by construction.
    pub value_comp_head: Mlp,
    pub node_norm: NormStats,
    pub edge_norm: NormStats,
    pub bundle: usize,
    pub hidden: usize,
    pub k_max: usize,
}

pub struct PolicyVars {
    proc: ProcessorVars,
    count_mlp: MlpVars,
    count_linear: MlpVars,
    edge_refine: MlpVars,
    edge_coarsen: MlpVars,
    value_loss: MlpVars,
    value_comp: MlpVars,
}

impl PolicyVars {
    /// Leaf handles in binding order (matches `PolicyModel::params_mut`).
    pub fn leaves(&self) -> Vec<Var> {
        let mut out = self.proc.leaves();
        out.extend_from_slice(self.count_mlp.leaves());
        out.extend_from_slice(self.count_linear.leaves());
        out.extend_from_slice(self.edge_refine.leaves());
        out.extend_from_slice(self.edge_coarsen.leaves());
        out.extend_from_slice(self.value_loss.leaves());
        out.extend_from_slice(self.value_comp.leaves());
        out
    }
}

/// Tape-resident policy outputs for one mesh and β.
pub struct PolicyEval {
    /// Count logits, shape [1, k_max+1].
    pub k_refine: Var,
    pub k_coarsen: Var,
    /// Per-edge logits, shape [1, n_edges], in `edge_ids` order.
    pub edge_refine: Var,
    pub edge_coarsen: Var,
    /// Value estimate v̂, shape [1].
    pub value: Var,
    /// Undirected mesh edges in logit order (ascending id).
    pub edge_ids: Vec<EdgeId>,
}

impl PolicyModel {
    pub fn new<R: Rng>(
        rng: &mut R,
        bundle: usize,
        hidden: usize,
        n_message_steps: usize,
        n_encoder_layers: usize,
        k_max: usize,
    ) -> Result<Self> {
        let f_v = bundle + 1;
        let h = hidden;
        let processor = Processor::new(
            rng,
            f_v,
            EDGE_WIDTH_1D,
            h,
            n_message_steps,
            n_encoder_layers,
            false,
            Act::Elu,
        )?;
        Ok(PolicyModel {
            processor,
            count_mlp: Mlp::with_layers(rng, h + 1, h, h, 2, Act::Elu)?,
            count_linear: Mlp::with_layers(rng, h, h, 2 * (k_max + 1), 1, Act::Elu)?,
            edge_refine_mlp: Mlp::with_layers(rng, 3 * h + 2, h, 1, 3, Act::Elu)?,
            edge_coarsen_mlp: Mlp::with_layers(rng, 3 * h + 2, h, 1, 3, Act::Elu)?,
            value_loss_head: Mlp::with_layers(rng, h + 1, h, 1, 1, Act::Elu)?,
            value_comp_head: Mlp::with_layers(rng, h, h, 1, 1, Act::Elu)?,
            node_norm: NormStats::new(f_v),
            edge_norm: NormStats::new(EDGE_WIDTH_1D),
            bundle,
            hidden,
            k_max,
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> PolicyVars {
        PolicyVars {
            proc: self.processor.bind(tape),
            count_mlp: self.count_mlp.bind(tape),
            count_linear: self.count_linear.bind(tape),
            edge_refine: self.edge_refine_mlp.bind(tape),
            edge_coarsen: self.edge_coarsen_mlp.bind(tape),
            value_loss: self.value_loss_head.bind(tape),
            value_comp: self.value_comp_head.bind(tape),
        }
    }

    /// Runs the shared processor and every head for one lowered mesh.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &PolicyVars,
        batch: &GraphBatch,
        beta: f64,
    ) -> Result<PolicyEval> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::invalid(format!(
                "tradeoff coefficient {} outside [0, 1]",
                beta
            )));
        }
        if batch.edge_ids.is_empty() {
            return Err(Error::mesh("policy needs at least one edge"));
        }
        let n = batch.n_nodes();
        let h = self.hidden;
        let nf = self.node_norm.normalize(&batch.node_features)?;
        let ef = self.edge_norm.normalize(&batch.edge_features)?;
        let nfv = tape.constant(nf);
        let efv = tape.constant(ef);
        let latent = self.processor.forward(
            tape,
            &vars.proc,
            &batch.senders,
            &batch.receivers,
            nfv,
            efv,
        )?;

        // β joins only after message passing.
        let bcol = tape.constant(Tensor::full(&[n, 1], beta as f32));
        let z_b = tape.concat(&[latent.z_nodes, bcol])?;

        let pooled = pool_global_mean(tape, z_b, &batch.segments, batch.n_graphs)?;
        let trunk = self.count_mlp.forward(tape, &vars.count_mlp, pooled)?;
        let trunk = tape.elu(trunk);
        let counts = self.count_linear.forward(tape, &vars.count_linear, trunk)?;
        let k_refine = tape.slice_cols(counts, 0, self.k_max + 1)?;
        let k_coarsen = tape.slice_cols(counts, self.k_max + 1, 2 * (self.k_max + 1))?;

        // Edge inputs use the canonical (low id -> high id) direction.
        let n_e = batch.edge_ids.len();
        let mut lo_rows = Vec::with_capacity(n_e);
        let mut hi_rows = Vec::with_capacity(n_e);
        for &entry in &batch.canonical_entries {
            lo_rows.push(batch.senders[entry]);
            hi_rows.push(batch.receivers[entry]);
        }
        let zi = tape.gather_rows(z_b, &lo_rows)?;
        let zj = tape.gather_rows(z_b, &hi_rows)?;
        let ze = tape.gather_rows(latent.z_edges, &batch.canonical_entries)?;
        let edge_in = tape.concat(&[zi, zj, ze])?;
        let er = self
            .edge_refine_mlp
            .forward(tape, &vars.edge_refine, edge_in)?;
        let ec = self
            .edge_coarsen_mlp
            .forward(tape, &vars.edge_coarsen, edge_in)?;
        let edge_refine = tape.reshape(er, vec![1, n_e])?;
        let edge_coarsen = tape.reshape(ec, vec![1, n_e])?;

        let v_loss = self
            .value_loss_head
            .forward(tape, &vars.value_loss, pooled)?;
        let pooled_z = tape.slice_cols(pooled, 0, h)?;
        let v_comp = self
            .value_comp_head
            .forward(tape, &vars.value_comp, pooled_z)?;
        let v_comp_scaled = tape.mul_scalar(v_comp, beta as f32);
        let v = tape.add(v_loss, v_comp_scaled)?;
        let value = tape.sum(v);

        Ok(PolicyEval {
            k_refine,
            k_coarsen,
            edge_refine,
            edge_coarsen,
            value,
            edge_ids: batch.edge_ids.clone(),
        })
    }

    /// Forward + sample on a private tape. The reported log-probability is
    /// evaluated with the same ops `action_log_prob` uses in training, so
    /// both passes agree bit for bit.
    pub fn act_sample<R: Rng>(
        &self,
        mesh: &Mesh,
        beta: f64,
        rng: &mut R,
    ) -> Result<(RemeshAction, SampledAction)> {
        let batch = encode(mesh)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let eval = self.forward(&mut tape, &vars, &batch, beta)?;
        let mut sampled = sample_action(
            tape.value(eval.k_refine).data(),
            tape.value(eval.edge_refine).data(),
            tape.value(eval.k_coarsen).data(),
            tape.value(eval.edge_coarsen).data(),
            rng,
        )?;
        let lp = action_log_prob(&mut tape, &eval, &sampled)?;
        sampled.log_prob = tape.value(lp).item() as f64;
        sampled.value = tape.value(eval.value).item() as f64;
        let action = sampled.to_remesh_action(&eval.edge_ids);
        Ok((action, sampled))
    }

    pub fn n_params(&self) -> usize {
        self.processor.n_params()
            + self.count_mlp.n_params()
            + self.count_linear.n_params()
            + self.edge_refine_mlp.n_params()
            + self.edge_coarsen_mlp.n_params()
            + self.value_loss_head.n_params()
            + self.value_comp_head.n_params()
    }

    /// Parameters in binding order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.processor.params_mut();
        out.extend(self.count_mlp.params_mut());
        out.extend(self.count_linear.params_mut());
        out.extend(self.edge_refine_mlp.params_mut());
        out.extend(self.edge_coarsen_mlp.params_mut());
        out.extend(self.value_loss_head.params_mut());
        out.extend(self.value_comp_head.params_mut());
        out
    }

    /// Per-parameter learning rates in `params_mut` order: the two value
    /// heads run at `lr_value`, everything else (including the shared
    /// processor) at `lr_policy`.
    pub fn lr_groups(&self, lr_policy: f32, lr_value: f32) -> Vec<f32> {
        let mlp_tensors = |m: &Mlp| m.weights.len() + m.biases.len();
        let proc = &self.processor;
        let proc_tensors = mlp_tensors(&proc.node_encoder)
            + mlp_tensors(&proc.edge_encoder)
            + proc
                .layers
                .iter()
                .map(|l| mlp_tensors(&l.edge_mlp) + mlp_tensors(&l.node_mlp))
                .sum::<usize>();
        let n_actor = proc_tensors
            + mlp_tensors(&self.count_mlp)
            + mlp_tensors(&self.count_linear)
            + mlp_tensors(&self.edge_refine_mlp)
            + mlp_tensors(&self.edge_coarsen_mlp);
        let n_value = mlp_tensors(&self.value_loss_head) + mlp_tensors(&self.value_comp_head);
        let mut out = vec![lr_policy; n_actor];
        out.extend(vec![lr_value; n_value]);
        out
    }

    /// Named tensors for checkpointing; requires frozen normalization.
    pub fn named(&self) -> Result<Vec<(String, Tensor)>> {
        let mut out = self.processor.named("policy/proc");
        out.extend(self.count_mlp.named("policy/count_mlp"));
        out.extend(self.count_linear.named("policy/count_linear"));
        out.extend(self.edge_refine_mlp.named("policy/edge_refine"));
        out.extend(self.edge_coarsen_mlp.named("policy/edge_coarsen"));
        out.extend(self.value_loss_head.named("policy/value_loss"));
        out.extend(self.value_comp_head.named("policy/value_comp"));
        out.extend(self.node_norm.named("policy/node_norm")?);
        out.extend(self.edge_norm.named("policy/edge_norm")?);
        Ok(out)
    }

    pub fn load(&mut self, store: &BTreeMap<String, Tensor>) -> Result<()> {
        self.processor.load("policy/proc", store)?;
        self.count_mlp.load("policy/count_mlp", store)?;
        self.count_linear.load("policy/count_linear", store)?;
        self.edge_refine_mlp.load("policy/edge_refine", store)?;
        self.edge_coarsen_mlp.load("policy/edge_coarsen", store)?;
        self.value_loss_head.load("policy/value_loss", store)?;
        self.value_comp_head.load("policy/value_comp", store)?;
        self.node_norm = NormStats::load("policy/node_norm", self.bundle + 1, store)?;
        self.edge_norm = NormStats::load("policy/edge_norm", EDGE_WIDTH_1D, store)?;
        Ok(())
    }
}

/// A drawn action in logit-index space, with the log-probability and value
/// recorded at sampling time.
#[derive(Clone, Debug, Default)]
pub struct SampledAction {
    pub k_refine: usize,
    pub k_coarsen: usize,
    /// Indices into the edge logit row; duplicates allowed (draws are
    /// independent, with replacement).
    pub refine_edges: Vec<usize>,
    pub coarsen_edges: Vec<usize>,
    pub log_prob: f64,
    pub value: f64,
}

impl SampledAction {
    pub fn to_remesh_action(&self, edge_ids: &[EdgeId]) -> RemeshAction {
        RemeshAction {
            refine: self.refine_edges.iter().map(|&i| edge_ids[i]).collect(),
            coarsen: self.coarsen_edges.iter().map(|&i| edge_ids[i]).collect(),
        }
    }
}

/// Hierarchical draw: K^re, then K^re refine edges, then K^co, then K^co
/// coarsen edges, each an independent categorical draw (edges with
/// replacement). The RNG is consumed in exactly that order.
pub fn sample_action<R: Rng>(
    k_refine_logits: &[f32],
    edge_refine_logits: &[f32],
    k_coarsen_logits: &[f32],
    edge_coarsen_logits: &[f32],
    rng: &mut R,
) -> Result<SampledAction> {
    let k_re = categorical_sample(k_refine_logits, 1, false, rng)?[0].index;
    let re: Vec<usize> = categorical_sample(edge_refine_logits, k_re, false, rng)?
        .iter()
        .map(|d| d.index)
        .collect();
    let k_co = categorical_sample(k_coarsen_logits, 1, false, rng)?[0].index;
    let co: Vec<usize> = categorical_sample(edge_coarsen_logits, k_co, false, rng)?
        .iter()
        .map(|d| d.index)
        .collect();
    Ok(SampledAction {
        k_refine: k_re,
        k_coarsen: k_co,
        refine_edges: re,
        coarsen_edges: co,
        log_prob: 0.0,
        value: 0.0,
    })
}

/// log p(k) from a count-logit row.
fn count_log_prob(tape: &mut Tape, logits: Var, k: usize) -> Result<Var> {
    let w = tape.value(logits).row_width();
    if k >= w {
        return Err(Error::invalid(format!(
            "count {} outside the {}-logit block",
            k, w
        )));
    }
    let lp = tape.log_softmax(logits);
    let pick = tape.slice_cols(lp, k, k + 1)?;
    Ok(tape.sum(pick))
}

/// Σ log p(e) over drawn edges, as a multiplicity-weighted sum so
/// duplicates count as many times as they were drawn.
fn edges_log_prob(tape: &mut Tape, logits: Var, draws: &[usize]) -> Result<Option<Var>> {
    if draws.is_empty() {
        return Ok(None);
    }
    let n = tape.value(logits).row_width();
    let mut mult = vec![0.0f32; n];
    for &d in draws {
        if d >= n {
            return Err(Error::invalid(format!(
                "edge draw {} outside the {}-edge support",
                d, n
            )));
        }
        mult[d] += 1.0;
    }
    let lp = tape.log_softmax(logits);
    let w = tape.constant(Tensor::new(vec![n], mult)?);
    let prod = tape.mul(lp, w)?;
    Ok(Some(tape.sum(prod)))
}

/// Exact factorized log-probability of a sampled action, differentiable
/// with respect to the policy parameters:
/// log p(K^re) + Σ log p(e^re) + log p(K^co) + Σ log p(e^co).
pub fn action_log_prob(
    tape: &mut Tape,
    eval: &PolicyEval,
    action: &SampledAction,
) -> Result<Var> {
    if action.refine_edges.len() != action.k_refine
        || action.coarsen_edges.len() != action.k_coarsen
    {
        return Err(Error::invalid(
            "sampled counts disagree with the edge draw lists",
        ));
    }
    let mut total = count_log_prob(tape, eval.k_refine, action.k_refine)?;
    if let Some(lp) = edges_log_prob(tape, eval.edge_refine, &action.refine_edges)? {
        total = tape.add(total, lp)?;
    }
    let co = count_log_prob(tape, eval.k_coarsen, action.k_coarsen)?;
    total = tape.add(total, co)?;
    if let Some(lp) = edges_log_prob(tape, eval.edge_coarsen, &action.coarsen_edges)? {
        total = tape.add(total, lp)?;
    }
    Ok(total)
}

/// Entropy of one softmax block.
fn block_entropy(tape: &mut Tape, logits: Var) -> Result<Var> {
    let p = tape.softmax(logits);
    let lp = tape.log_softmax(logits);
    let prod = tape.mul(p, lp)?;
    let s = tape.sum(prod);
    Ok(tape.neg(s))
}

/// Entropy of the hierarchical action distribution along the sampled
/// branch: H(K^re) + K^re·H(e^re) + H(K^co) + K^co·H(e^co).
pub fn action_entropy(
    tape: &mut Tape,
    eval: &PolicyEval,
    action: &SampledAction,
) -> Result<Var> {
    let h_kre = block_entropy(tape, eval.k_refine)?;
    let h_kco = block_entropy(tape, eval.k_coarsen)?;
    let mut total = tape.add(h_kre, h_kco)?;
    if action.k_refine > 0 {
        let h = block_entropy(tape, eval.edge_refine)?;
        let scaled = tape.mul_scalar(h, action.k_refine as f32);
        total = tape.add(total, scaled)?;
    }
    if action.k_coarsen > 0 {
        let h = block_entropy(tape, eval.edge_coarsen)?;
        let scaled = tape.mul_scalar(h, action.k_coarsen as f32);
        total = tape.add(total, scaled)?;
    }
    Ok(total)
}

/// The counterfactual reward of one action against the identity rollout.
#[derive(Clone, Copy, Debug)]
pub struct Reward {
    pub delta_error: f64,
    pub delta_computation: f64,
    pub beta: f64,
    pub r: f64,
}

/// r = (1−β)·ΔError + β·ΔComputation, both Δs averaged over the horizon.
/// With `normalize`, ΔError is divided by the identity rollout's loss
/// (relative improvement) and ΔComputation by the initial node count.
pub fn compute_reward(
    policy_rec: &RolloutRecord,
    identity_rec: &RolloutRecord,
    initial_nodes: usize,
    beta: f64,
    normalize: bool,
) -> Result<Reward> {
    if policy_rec.len() != identity_rec.len() || policy_rec.is_empty() {
        return Err(Error::invalid(format!(
            "rollout horizons {} and {} must match and be positive",
            policy_rec.len(),
            identity_rec.len()
        )));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid(format!(
            "tradeoff coefficient {} outside [0, 1]",
            beta
        )));
    }
    if initial_nodes == 0 {
        return Err(Error::invalid("reward needs a non-empty start mesh"));
    }
    let s = policy_rec.len() as f64;
    let l_id = identity_rec.total_loss();
    let l_pol = policy_rec.total_loss();
    let delta_error = if normalize {
        let denom = if l_id > 0.0 { l_id } else { 1.0 };
        (l_id - l_pol) / denom
    } else {
        (l_id - l_pol) / s
    };
    let n_id: usize = identity_rec.node_counts.iter().sum();
    let n_pol: usize = policy_rec.node_counts.iter().sum();
    let diff_avg = (n_id as f64 - n_pol as f64) / s;
    let delta_computation = if normalize {
        diff_avg / initial_nodes as f64
    } else {
        diff_avg
    };
    Ok(Reward {
        delta_error,
        delta_computation,
        beta,
        r: (1.0 - beta) * delta_error + beta * delta_computation,
    })
}

/// REINFORCE term with a stop-gradient advantage and entropy bonus:
/// −log p · sg(r − v̂) − η·H.
pub fn actor_loss_on_tape(
    tape: &mut Tape,
    log_prob: Var,
    reward: f64,
    value: Var,
    entropy: Var,
    eta: f32,
) -> Result<Var> {
    let r = tape.constant(Tensor::new(vec![1], vec![reward as f32])?);
    let adv = tape.sub(r, value)?;
    let adv = tape.stop_gradient(adv);
    let weighted = tape.mul(log_prob, adv)?;
    let neg = tape.neg(weighted);
    let ent = tape.mul_scalar(entropy, eta);
    tape.sub(neg, ent)
}

/// Squared value error (v̂ − r)².
pub fn value_loss_on_tape(tape: &mut Tape, value: Var, reward: f64) -> Result<Var> {
    let r = tape.constant(Tensor::new(vec![1], vec![reward as f32])?);
    let d = tape.sub(value, r)?;
    Ok(tape.square(d))
}

/// Applies a fixed action on the first call and nothing afterwards; the
/// reward rollouts use it to isolate a single decision.
pub struct OneShotPolicy {
    action: Option<RemeshAction>,
}

impl OneShotPolicy {
    pub fn new(action: RemeshAction) -> Self {
        OneShotPolicy {
            action: Some(action),
        }
    }
}

impl RemeshPolicy for OneShotPolicy {
    fn act(&mut self, _mesh: &Mesh, _beta: f64) -> Result<RemeshAction> {
        Ok(self.action.take().unwrap_or_default())
    }
}

/// Samples from a frozen policy at every step of a rollout.
pub struct SamplingPolicy<'a, R: Rng> {
    pub model: &'a PolicyModel,
    pub rng: &'a mut R,
}

impl<R: Rng> RemeshPolicy for SamplingPolicy<'_, R> {
    fn act(&mut self, mesh: &Mesh, beta: f64) -> Result<RemeshAction> {
        let (action, _) = self.model.act_sample(mesh, beta, self.rng)?;
        Ok(action)
    }
}

/// Joint-phase hyperparameters.
#[derive(Clone, Debug)]
pub struct JointConfig {
    pub epochs: usize,
    /// Policy optimizer steps per epoch (evolution frozen).
    pub policy_steps: usize,
    /// Evolution optimizer steps per epoch (policy frozen).
    pub evo_steps: usize,
    pub s_steps: usize,
    pub lr_policy: f32,
    pub lr_value: f32,
    pub lr_evo: f32,
    pub value_coef: f32,
    pub entropy_coef: f32,
    pub clip: f32,
    /// β is drawn uniformly from this range per episode.
    pub beta_range: (f64, f64),
    pub evo_batch: usize,
    /// Resolution policy episodes start from.
    pub policy_resolution: usize,
    /// Resolution losses are evaluated on.
    pub gt_resolution: usize,
    pub vertex_cap: usize,
    pub normalize_reward: bool,
    /// Bundle index policy episodes start at (the bundle covering the
    /// paper's start window).
    pub policy_start_bundle: usize,
    pub bundle: usize,
}

impl Default for JointConfig {
    fn default() -> Self {
        JointConfig {
            epochs: 30,
            policy_steps: 200,
            evo_steps: 100,
            s_steps: 4,
            lr_policy: 5e-4,
            lr_value: 1e-4,
            lr_evo: 1e-4,
            value_coef: 0.5,
            entropy_coef: 1e-2,
            clip: 2.0,
            beta_range: (0.0, 0.5),
            evo_batch: 128,
            policy_resolution: 25,
            gt_resolution: 100,
            vertex_cap: 100,
            normalize_reward: true,
            policy_start_bundle: 1,
            bundle: 25,
        }
    }
}

/// One policy episode's record.
#[derive(Clone, Copy, Debug)]
pub struct EpisodeLog {
    pub epoch: usize,
    pub step: usize,
    pub beta: f64,
    pub reward: f64,
    pub delta_error: f64,
    pub delta_computation: f64,
    pub k_refine: usize,
    pub k_coarsen: usize,
    pub value: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default)]
pub struct JointLog {
    pub episodes: Vec<EpisodeLog>,
    /// Mean two-branch evolution loss per evolution step.
    pub evo_losses: Vec<f64>,
    pub skipped_episodes: usize,
}

fn sample_beta<R: Rng>(range: (f64, f64), rng: &mut R) -> f64 {
    if range.0 >= range.1 {
        range.0
    } else {
        rng.gen_range(range.0..range.1)
    }
}

/// Alternates policy updates (REINFORCE + value regression, evolution
/// frozen) with evolution updates (two-branch rollout loss under the
/// current frozen policy). Episodes that abort numerically are logged and
/// skipped. Returns the full training log.
pub fn joint_train(
    evo: &mut EvolutionModel,
    policy: &mut PolicyModel,
    trajs: &[Trajectory],
    cfg: &JointConfig,
    seed: u64,
) -> Result<JointLog> {
    if trajs.is_empty() {
        return Err(Error::invalid("joint training needs a non-empty dataset"));
    }
    if !evo.node_norm.is_frozen() {
        return Err(Error::invalid(
            "joint training needs a pre-trained evolution model (normalization not frozen)",
        ));
    }
    // The policy normalizes inputs exactly as the evolution model does.
    if !policy.node_norm.is_frozen() {
        policy.node_norm = evo.node_norm.clone();
        policy.edge_norm = evo.edge_norm.clone();
    }

    let gt_series = trajectory_series(trajs, cfg.gt_resolution, cfg.bundle, None)?;
    let start_series = trajectory_series(
        trajs,
        cfg.policy_resolution,
        cfg.bundle,
        Some(cfg.vertex_cap),
    )?;
    let n_bundles = gt_series[0].n_bundles();
    if cfg.policy_start_bundle + cfg.s_steps >= n_bundles + 1 {
        return Err(Error::invalid(format!(
            "{}-step episodes from bundle {} overrun {} bundles",
            cfg.s_steps, cfg.policy_start_bundle, n_bundles
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam_policy = Adam::new();
    let mut adam_evo = Adam::new();
    let policy_base_lrs = policy.lr_groups(cfg.lr_policy, cfg.lr_value);
    let total_policy_steps = (cfg.epochs * cfg.policy_steps) as u64;
    let total_evo_steps = (cfg.epochs * cfg.evo_steps) as u64;
    let mut log = JointLog::default();
    let mut policy_step = 0u64;
    let mut evo_step = 0u64;
    let joint_weights = vec![1.0f64; cfg.s_steps];

    for epoch in 0..cfg.epochs {
        // Policy phase: evolution frozen, one episode per optimizer step.
        for step in 0..cfg.policy_steps {
            let ti = rng.gen_range(0..trajs.len());
            let beta = sample_beta(cfg.beta_range, &mut rng);
            let mesh0 = start_series[ti].mesh_at(cfg.policy_start_bundle)?;
            let episode = (|| -> Result<EpisodeLog> {
                let identity_rec = rollout(
                    &mut IdentityPolicy,
                    evo,
                    &mesh0,
                    &gt_series[ti],
                    cfg.policy_start_bundle,
                    cfg.s_steps,
                    beta,
                )?;
                let (action, sampled) = policy.act_sample(&mesh0, beta, &mut rng)?;
                let mut one_shot = OneShotPolicy::new(action);
                let policy_rec = rollout(
                    &mut one_shot,
                    evo,
                    &mesh0,
                    &gt_series[ti],
                    cfg.policy_start_bundle,
                    cfg.s_steps,
                    beta,
                )?;
                let reward = compute_reward(
                    &policy_rec,
                    &identity_rec,
                    mesh0.n_nodes(),
                    beta,
                    cfg.normalize_reward,
                )?;

                let mut tape = Tape::new();
                let vars = policy.bind(&mut tape);
                let batch0 = encode(&mesh0)?;
                let eval = policy.forward(&mut tape, &vars, &batch0, beta)?;
                let lp = action_log_prob(&mut tape, &eval, &sampled)?;
                let h = action_entropy(&mut tape, &eval, &sampled)?;
                let actor =
                    actor_loss_on_tape(&mut tape, lp, reward.r, eval.value, h, cfg.entropy_coef)?;
                let vl = value_loss_on_tape(&mut tape, eval.value, reward.r)?;
                let vterm = tape.mul_scalar(vl, cfg.value_coef);
                let total = tape.add(actor, vterm)?;
                let loss_value = tape.value(total).item() as f64;
                let grads_by_var = tape.backward(total)?;
                let mut grads: Vec<Tensor> = vars
                    .leaves()
                    .iter()
                    .map(|&v| grads_by_var.grad_or_zeros(&tape, v))
                    .collect();
                clip_global_norm(&mut grads, cfg.clip);
                let factor = cosine_lr(1.0, policy_step, total_policy_steps);
                let lrs: Vec<f32> = policy_base_lrs.iter().map(|&b| b * factor).collect();
                let mut params = policy.params_mut();
                adam_policy.step(&mut params, &grads, &lrs)?;

                Ok(EpisodeLog {
                    epoch,
                    step,
                    beta,
                    reward: reward.r,
                    delta_error: reward.delta_error,
                    delta_computation: reward.delta_computation,
                    k_refine: sampled.k_refine,
                    k_coarsen: sampled.k_coarsen,
                    value: sampled.value,
                    loss: loss_value,
                })
            })();
            policy_step += 1;
            match episode {
                Ok(e) => log.episodes.push(e),
                Err(e) if e.is_numeric() => {
                    log.skipped_episodes += 1;
                }
                Err(e) => return Err(e),
            }
        }

        // Evolution phase: policy frozen, two-branch rollout loss.
        for _ in 0..cfg.evo_steps {
            let shapes: Vec<Vec<usize>> = evo
                .params_mut()
                .iter()
                .map(|p| p.shape().to_vec())
                .collect();
            let mut grads: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
            let mut step_loss = 0.0f64;
            let mut n_ok = 0usize;
            for _ in 0..cfg.evo_batch {
                let ti = rng.gen_range(0..trajs.len());
                let beta = sample_beta(cfg.beta_range, &mut rng);
                let start = rng.gen_range(0..=n_bundles - 1 - cfg.s_steps);
                let example = (|rng: &mut ChaCha8Rng| -> Result<(f64, Tape, Vec<Var>, Var)> {
                    let mut tape = Tape::new();
                    let vars = evo.bind(&mut tape);
                    let mut sampler = SamplingPolicy { model: policy, rng };
                    let pol_loss = rollout_loss_on_tape(
                        &mut tape,
                        evo,
                        &vars,
                        start_series[ti].mesh_at(start)?,
                        &mut sampler,
                        beta,
                        &gt_series[ti],
                        start,
                        &joint_weights,
                    )?;
                    let id_loss = rollout_loss_on_tape(
                        &mut tape,
                        evo,
                        &vars,
                        gt_series[ti].mesh_at(start)?,
                        &mut IdentityPolicy,
                        beta,
                        &gt_series[ti],
                        start,
                        &joint_weights,
                    )?;
                    let total = tape.add(pol_loss, id_loss)?;
                    let v = tape.value(total).item() as f64;
                    Ok((v, tape, vars.leaves(), total))
                })(&mut rng);
                match example {
                    Ok((v, tape, leaves, total)) => {
                        let g = tape.backward(total)?;
                        for (k, leaf) in leaves.iter().enumerate() {
                            if let Some(gt) = g.get(*leaf) {
                                for (a, b) in grads[k].data_mut().iter_mut().zip(gt.data()) {
                                    *a += b;
                                }
                            }
                        }
                        step_loss += v;
                        n_ok += 1;
                    }
                    Err(e) if e.is_numeric() => {
                        log.skipped_episodes += 1;
                    }
                    Err(e) => return Err(e),
                }
            }
            if n_ok > 0 {
                let inv = 1.0 / n_ok as f32;
                for g in &mut grads {
                    for x in g.data_mut() {
                        *x *= inv;
                    }
                }
                clip_global_norm(&mut grads, cfg.clip);
                let lr = cosine_lr(cfg.lr_evo, evo_step, total_evo_steps);
                let mut params = evo.params_mut();
                let lrs = vec![lr; params.len()];
                adam_evo.step(&mut params, &grads, &lrs)?;
                log.evo_losses.push(step_loss / n_ok as f64);
            } else {
                log.evo_losses.push(f64::NAN);
            }
            evo_step += 1;
        }
    }
    Ok(log)
}
