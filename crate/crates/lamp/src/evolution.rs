//! The field-evolution model: one-bundle prediction, policy-coupled
//! rollouts, the two-branch rollout loss, and pre-training.
//!
//! Rollout losses follow one protocol everywhere: predictions are
//! transferred onto the trajectory's reference mesh and compared there,
//! so a coarse mesh pays for the detail it cannot carry.

use crate::datagen::Trajectory;
use crate::error::{Error, Result};
use crate::gnn::{encode, Act, GraphBatch, Mlp, MlpVars, NormStats, Processor, ProcessorVars};
use crate::interp::plan_transfer;
use crate::mesh::{apply_action, remove_chain_node, Mesh, NodeId, RemeshAction};
use crate::tensor::{clip_global_norm, cosine_lr, Adam, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Chooses a remeshing action for the current state. Implementations may
/// sample internally; the identity policy never edits anything.
pub trait RemeshPolicy {
    fn act(&mut self, mesh: &Mesh, beta: f64) -> Result<RemeshAction>;
}

/// The do-nothing counterfactual policy.
pub struct IdentityPolicy;

impl RemeshPolicy for IdentityPolicy {
    fn act(&mut self, _mesh: &Mesh, _beta: f64) -> Result<RemeshAction> {
        Ok(RemeshAction::default())
    }
}

/// Advances a mesh's feature bundle by one application. `step` is the
/// absolute bundle index being produced, which lets test oracles look up
/// ground truth.
pub trait Evolver {
    fn advance(&self, mesh: &Mesh, step: usize) -> Result<Tensor>;
}

/// Node feature bundles as a matrix, rows in ascending node id.
pub fn features_tensor(mesh: &Mesh) -> Result<Tensor> {
    let mut width = None;
    let mut data = Vec::new();
    let mut rows = 0usize;
    for n in mesh.nodes() {
        match width {
            None => width = Some(n.q.len()),
            Some(w) if w != n.q.len() => {
                return Err(Error::mesh("inconsistent feature widths"))
            }
            _ => {}
        }
        data.extend_from_slice(&n.q);
        rows += 1;
    }
    let width = width.ok_or_else(|| Error::mesh("features of an empty mesh"))?;
    Tensor::new(vec![rows, width], data)
}

/// Writes a feature matrix back onto the mesh, rows in ascending node id.
pub fn write_features(mesh: &mut Mesh, t: &Tensor) -> Result<()> {
    let ids: Vec<NodeId> = mesh.nodes().map(|n| n.id).collect();
    if t.rows() != ids.len() {
        return Err(Error::invalid(format!(
            "{} feature rows for {} nodes",
            t.rows(),
            ids.len()
        )));
    }
    let w = t.row_width();
    for (r, id) in ids.iter().enumerate() {
        mesh.node_mut(*id)?.q = t.data()[r * w..(r + 1) * w].to_vec();
    }
    Ok(())
}

/// Mean squared difference in f64.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "mse",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut acc = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = *x as f64 - *y as f64;
        acc += d * d;
    }
    Ok(acc / a.numel() as f64)
}

/// A trajectory regrouped into feature bundles on its uniform mesh:
/// bundle `k` holds time steps `[k*bundle, (k+1)*bundle)` as node feature
/// columns.
#[derive(Clone, Debug)]
pub struct BundleSeries {
    pub mesh: Mesh,
    pub bundles: Vec<Tensor>,
    pub bundle: usize,
}

impl BundleSeries {
    pub fn from_trajectory(
        traj: &Trajectory,
        bundle: usize,
        vertex_cap: Option<usize>,
    ) -> Result<Self> {
        if bundle == 0 || traj.n_t < bundle {
            return Err(Error::invalid(format!(
                "bundle width {} on a {}-step trajectory",
                bundle, traj.n_t
            )));
        }
        let mesh = Mesh::uniform_1d(traj.n_x, traj.length, bundle, vertex_cap)?;
        let n_bundles = traj.n_t / bundle;
        let mut bundles = Vec::with_capacity(n_bundles);
        for k in 0..n_bundles {
            let mut data = vec![0.0f32; traj.n_x * bundle];
            for c in 0..bundle {
                let frame = traj.frame(k * bundle + c);
                for (i, &v) in frame.iter().enumerate() {
                    data[i * bundle + c] = v as f32;
                }
            }
            bundles.push(Tensor::new(vec![traj.n_x, bundle], data)?);
        }
        Ok(BundleSeries {
            mesh,
            bundles,
            bundle,
        })
    }

    pub fn n_bundles(&self) -> usize {
        self.bundles.len()
    }

    /// The series mesh carrying bundle `k` as its node features.
    pub fn mesh_at(&self, k: usize) -> Result<Mesh> {
        if k >= self.bundles.len() {
            return Err(Error::invalid(format!(
                "bundle index {} of {}",
                k,
                self.bundles.len()
            )));
        }
        let mut m = self.mesh.clone();
        write_features(&mut m, &self.bundles[k])?;
        Ok(m)
    }
}

/// One multi-step rollout: per-step post-remesh meshes (with predicted
/// features), node counts, and losses against ground truth on its mesh.
#[derive(Clone, Debug)]
pub struct RolloutRecord {
    pub meshes: Vec<Mesh>,
    pub node_counts: Vec<usize>,
    pub losses: Vec<f64>,
}

impl RolloutRecord {
    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }

    pub fn total_loss(&self) -> f64 {
        self.losses.iter().sum()
    }

    pub fn mean_nodes(&self) -> f64 {
        if self.node_counts.is_empty() {
            return 0.0;
        }
        self.node_counts.iter().sum::<usize>() as f64 / self.node_counts.len() as f64
    }
}

/// Rolls the evolver forward `s_steps` bundles from `start_mesh` (which
/// carries bundle `start`), remeshing with `policy` before each prediction
/// and transferring features onto each edited mesh.
pub fn rollout(
    policy: &mut dyn RemeshPolicy,
    evolver: &dyn Evolver,
    start_mesh: &Mesh,
    series: &BundleSeries,
    start: usize,
    s_steps: usize,
    beta: f64,
) -> Result<RolloutRecord> {
    if s_steps < 1 {
        return Err(Error::invalid("rollout needs at least one step"));
    }
    if start + s_steps >= series.n_bundles() + 1 {
        return Err(Error::invalid(format!(
            "rollout to bundle {} but the series ends at {}",
            start + s_steps,
            series.n_bundles() - 1
        )));
    }
    let mut mesh = start_mesh.clone();
    let mut record = RolloutRecord {
        meshes: Vec::with_capacity(s_steps),
        node_counts: Vec::with_capacity(s_steps),
        losses: Vec::with_capacity(s_steps),
    };
    for s in 1..=s_steps {
        let action = policy.act(&mesh, beta)?;
        if !(action.refine.is_empty() && action.coarsen.is_empty()) {
            let old = mesh.clone();
            let rec = apply_action(&mut mesh, &action)?;
            let (dv, _, _) = rec.total_delta();
            if dv != 0 || rec.flips > 0 {
                let plan = plan_transfer(&old, &mesh)?;
                let q = plan.apply(&features_tensor(&old)?)?;
                write_features(&mut mesh, &q)?;
            }
        }
        let pred = evolver.advance(&mesh, start + s)?;
        if !pred.is_finite() {
            return Err(Error::NonFinite(format!(
                "rollout prediction at bundle step {}",
                start + s
            )));
        }
        write_features(&mut mesh, &pred)?;
        let plan_ref = plan_transfer(&mesh, &series.mesh)?;
        let on_ref = plan_ref.apply(&pred)?;
        record.losses.push(mse(&on_ref, &series.bundles[start + s])?);
        record.node_counts.push(mesh.n_nodes());
        record.meshes.push(mesh.clone());
    }
    Ok(record)
}

/// Per-step weights of the two rollout-loss branches.
#[derive(Clone, Debug)]
pub struct EvolutionLossConfig {
    pub s_steps: usize,
    pub alpha_policy: Vec<f64>,
    pub alpha_identity: Vec<f64>,
}

impl EvolutionLossConfig {
    pub fn new(alpha_policy: Vec<f64>, alpha_identity: Vec<f64>) -> Result<Self> {
        if alpha_policy.is_empty() || alpha_policy.len() != alpha_identity.len() {
            return Err(Error::invalid(
                "per-step weight lists must be non-empty and equal length",
            ));
        }
        if alpha_policy
            .iter()
            .chain(&alpha_identity)
            .any(|&w| !(w >= 0.0))
        {
            return Err(Error::invalid("per-step weights must be >= 0"));
        }
        Ok(EvolutionLossConfig {
            s_steps: alpha_policy.len(),
            alpha_policy,
            alpha_identity,
        })
    }

    /// Pre-training weighting: no policy branch; later steps damped to 0.1.
    pub fn pretrain(s_steps: usize) -> Self {
        let mut id = vec![0.1; s_steps];
        id[0] = 1.0;
        EvolutionLossConfig {
            s_steps,
            alpha_policy: vec![0.0; s_steps],
            alpha_identity: id,
        }
    }

    /// Joint-phase weighting: both branches at full weight every step.
    pub fn joint(s_steps: usize) -> Self {
        EvolutionLossConfig {
            s_steps,
            alpha_policy: vec![1.0; s_steps],
            alpha_identity: vec![1.0; s_steps],
        }
    }
}

/// Weighted sum of both branches' per-step losses.
pub fn evolution_loss(
    policy_rollout: &RolloutRecord,
    identity_rollout: &RolloutRecord,
    cfg: &EvolutionLossConfig,
) -> Result<f64> {
    if policy_rollout.len() != cfg.s_steps || identity_rollout.len() != cfg.s_steps {
        return Err(Error::invalid(format!(
            "rollout lengths {} and {} against {} weights",
            policy_rollout.len(),
            identity_rollout.len(),
            cfg.s_steps
        )));
    }
    let mut total = 0.0;
    for s in 0..cfg.s_steps {
        total += cfg.alpha_policy[s] * policy_rollout.losses[s];
        total += cfg.alpha_identity[s] * identity_rollout.losses[s];
    }
    Ok(total)
}

/// The evolution network: encode-process-decode with a residual head, so a
/// zeroed decoder final layer starts at persistence.
#[derive(Clone, Debug)]
pub struct EvolutionModel {
    pub processor: Processor,
    pub decoder: Mlp,
    pub node_norm: NormStats,
    pub edge_norm: NormStats,
    pub bundle: usize,
    pub hidden: usize,
}

/// Edge feature width on 1D chains: (signed spacing, spacing).
const EDGE_WIDTH_1D: usize = 2;

pub struct EvolutionVars {
    proc: ProcessorVars,
    dec: MlpVars,
}

impl EvolutionVars {
    /// Leaf handles in binding order (matches `EvolutionModel::params_mut`).
    pub fn leaves(&self) -> Vec<Var> {
        let mut out = self.proc.leaves();
        out.extend_from_slice(self.dec.leaves());
        out
    }
}

impl EvolutionModel {
    pub fn new<R: Rng>(
        rng: &mut R,
        bundle: usize,
        hidden: usize,
        n_message_steps: usize,
        n_encoder_layers: usize,
    ) -> Result<Self> {
        let f_v = bundle + 1;
        let processor = Processor::new(
            rng,
            f_v,
            EDGE_WIDTH_1D,
            hidden,
            n_message_steps,
            n_encoder_layers,
            false,
            Act::Silu,
        )?;
        let mut decoder =
            Mlp::with_layers(rng, hidden, hidden, bundle, n_encoder_layers, Act::Silu)?;
        decoder.zero_final();
        Ok(EvolutionModel {
            processor,
            decoder,
            node_norm: NormStats::new(f_v),
            edge_norm: NormStats::new(EDGE_WIDTH_1D),
            bundle,
            hidden,
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> EvolutionVars {
        EvolutionVars {
            proc: self.processor.bind(tape),
            dec: self.decoder.bind(tape),
        }
    }

    /// One prediction on a lowered mesh. `q` is the raw (unnormalized)
    /// bundle matrix; the boundary flags come from the batch. Output is
    /// input's last column plus the decoded delta.
    pub fn forward_step(
        &self,
        tape: &mut Tape,
        vars: &EvolutionVars,
        batch: &GraphBatch,
        q: Var,
    ) -> Result<Var> {
        let n = batch.n_nodes();
        if tape.value(q).shape() != [n, self.bundle] {
            return Err(Error::invalid(format!(
                "feature matrix {:?} does not match {} nodes x bundle {}",
                tape.value(q).shape(),
                n,
                self.bundle
            )));
        }
        let fw = batch.node_features.row_width();
        let flags: Vec<f32> = (0..n)
            .map(|r| batch.node_features.data()[r * fw + fw - 1])
            .collect();
        let bcol = tape.constant(Tensor::new(vec![n, 1], flags)?);
        let x = tape.concat(&[q, bcol])?;
        let xn = self.node_norm.normalize_on_tape(tape, x)?;
        let en = self.edge_norm.normalize(&batch.edge_features)?;
        let ev = tape.constant(en);
        let latent = self.processor.forward(
            tape,
            &vars.proc,
            &batch.senders,
            &batch.receivers,
            xn,
            ev,
        )?;
        let delta = self.decoder.forward(tape, &vars.dec, latent.z_nodes)?;
        let base = tape.slice_cols(q, self.bundle - 1, self.bundle)?;
        tape.add_column(delta, base)
    }

    /// Inference: predicts the next bundle from the mesh's stored features.
    pub fn predict_bundle(&self, mesh: &Mesh) -> Result<Tensor> {
        let batch = encode(mesh)?;
        let mut tape = Tape::new();
        let q = tape.constant(features_tensor(mesh)?);
        let vars = self.bind(&mut tape);
        let out = self.forward_step(&mut tape, &vars, &batch, q)?;
        Ok(tape.value(out).clone())
    }

    /// Accumulates normalization statistics from a lowered mesh. A no-op
    /// once frozen.
    pub fn observe_norm(&mut self, batch: &GraphBatch) -> Result<()> {
        self.node_norm.update(&batch.node_features)?;
        self.edge_norm.update(&batch.edge_features)
    }

    pub fn freeze_norm(&mut self) {
        self.node_norm.freeze();
        self.edge_norm.freeze();
    }

    pub fn n_params(&self) -> usize {
        self.processor.n_params() + self.decoder.n_params()
    }

    /// Parameters in binding order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.processor.params_mut();
        out.extend(self.decoder.params_mut());
        out
    }

    /// Named tensors for checkpointing; requires frozen normalization.
    pub fn named(&self) -> Result<Vec<(String, Tensor)>> {
        let mut out = self.processor.named("evo/proc");
        out.extend(self.decoder.named("evo/dec"));
        out.extend(self.node_norm.named("evo/node_norm")?);
        out.extend(self.edge_norm.named("evo/edge_norm")?);
        Ok(out)
    }

    pub fn load(&mut self, store: &BTreeMap<String, Tensor>) -> Result<()> {
        self.processor.load("evo/proc", store)?;
        self.decoder.load("evo/dec", store)?;
        self.node_norm = NormStats::load("evo/node_norm", self.bundle + 1, store)?;
        self.edge_norm = NormStats::load("evo/edge_norm", EDGE_WIDTH_1D, store)?;
        Ok(())
    }
}

impl Evolver for EvolutionModel {
    fn advance(&self, mesh: &Mesh, _step: usize) -> Result<Tensor> {
        self.predict_bundle(mesh)
    }
}

/// One rollout branch built on a live tape so gradients flow through every
/// prediction and feature transfer. Steps with zero weight still advance
/// the state but contribute no loss term. Returns the weighted branch loss.
pub fn rollout_loss_on_tape(
    tape: &mut Tape,
    model: &EvolutionModel,
    vars: &EvolutionVars,
    start_mesh: Mesh,
    policy: &mut dyn RemeshPolicy,
    beta: f64,
    series: &BundleSeries,
    start: usize,
    weights: &[f64],
) -> Result<Var> {
    if weights.is_empty() {
        return Err(Error::invalid("rollout loss needs at least one step"));
    }
    if start + weights.len() >= series.n_bundles() + 1 {
        return Err(Error::invalid(format!(
            "rollout to bundle {} but the series ends at {}",
            start + weights.len(),
            series.n_bundles() - 1
        )));
    }
    let mut mesh = start_mesh;
    let mut q = tape.constant(features_tensor(&mesh)?);
    let mut total: Option<Var> = None;
    for (i, &w) in weights.iter().enumerate() {
        let s = start + i + 1;
        let action = policy.act(&mesh, beta)?;
        if !(action.refine.is_empty() && action.coarsen.is_empty()) {
            let old = mesh.clone();
            let rec = apply_action(&mut mesh, &action)?;
            let (dv, _, _) = rec.total_delta();
            if dv != 0 || rec.flips > 0 {
                let plan = plan_transfer(&old, &mesh)?;
                q = plan.apply_on_tape(tape, q)?;
            }
        }
        let batch = encode(&mesh)?;
        let pred = model.forward_step(tape, vars, &batch, q)?;
        if !tape.value(pred).is_finite() {
            return Err(Error::NonFinite(format!(
                "rollout prediction at bundle step {}",
                s
            )));
        }
        write_features(&mut mesh, tape.value(pred))?;
        q = pred;
        if w > 0.0 {
            let plan_ref = plan_transfer(&mesh, &series.mesh)?;
            let on_ref = plan_ref.apply_on_tape(tape, pred)?;
            let gt = tape.constant(series.bundles[s].clone());
            let diff = tape.sub(on_ref, gt)?;
            let sq = tape.square(diff);
            let l = tape.mean(sq);
            let term = tape.mul_scalar(l, w as f32);
            total = Some(match total {
                Some(t) => tape.add(t, term)?,
                None => term,
            });
        }
    }
    total.ok_or_else(|| Error::invalid("all rollout-step weights are zero"))
}

/// Downsamples every trajectory to `n_x` points and bundles it.
pub fn trajectory_series(
    trajs: &[Trajectory],
    n_x: usize,
    bundle: usize,
    vertex_cap: Option<usize>,
) -> Result<Vec<BundleSeries>> {
    trajs
        .iter()
        .map(|t| {
            let d = crate::datagen::downsample(t, n_x)?;
            BundleSeries::from_trajectory(&d, bundle, vertex_cap)
        })
        .collect()
}

/// Pre-training hyperparameters. `weights` fixes the rollout horizon; the
/// mesh each example trains on is drawn from `resolutions` and its loss is
/// evaluated on the trajectory's `gt_resolution` mesh.
#[derive(Clone, Debug)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub weights: Vec<f64>,
    pub lr: f32,
    pub clip: f32,
    pub dropout_batch_frac: f64,
    pub dropout_max_frac: f64,
    pub resolutions: Vec<usize>,
    pub gt_resolution: usize,
    pub bundle: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 50,
            batch_size: 128,
            weights: vec![1.0, 0.1, 0.1, 0.1],
            lr: 1e-3,
            clip: 2.0,
            dropout_batch_frac: 0.1,
            dropout_max_frac: 0.3,
            resolutions: vec![100],
            gt_resolution: 100,
            bundle: 25,
        }
    }
}

/// Removes a random `frac` of the interior nodes of a 1D chain, bridging
/// their neighbors. Boundary nodes are never touched.
pub fn dropout_interior_nodes<R: Rng>(mesh: &mut Mesh, frac: f64, rng: &mut R) -> Result<usize> {
    if !(0.0..=1.0).contains(&frac) {
        return Err(Error::invalid("dropout fraction outside [0, 1]"));
    }
    let mut interior: Vec<NodeId> = mesh
        .nodes()
        .filter(|n| !n.boundary)
        .map(|n| n.id)
        .collect();
    let n_drop = (frac * interior.len() as f64).floor() as usize;
    interior.shuffle(rng);
    for &victim in interior.iter().take(n_drop) {
        remove_chain_node(mesh, victim)?;
    }
    Ok(n_drop)
}

/// Trains the evolution model alone on ground-truth trajectories (identity
/// remeshing), one randomly placed rollout window per trajectory per epoch.
/// Normalization statistics accumulate during the first epoch and freeze
/// at its end. Returns the per-epoch mean loss curve.
pub fn pretrain(
    model: &mut EvolutionModel,
    trajs: &[Trajectory],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if trajs.is_empty() {
        return Err(Error::invalid("pretrain needs a non-empty dataset"));
    }
    if cfg.resolutions.is_empty() || cfg.weights.is_empty() {
        return Err(Error::invalid(
            "pretrain needs resolutions and per-step weights",
        ));
    }
    let s_steps = cfg.weights.len();
    let mut gt_series = Vec::with_capacity(trajs.len());
    let mut train_series: Vec<BTreeMap<usize, BundleSeries>> = Vec::with_capacity(trajs.len());
    for t in trajs {
        let gt = crate::datagen::downsample(t, cfg.gt_resolution)?;
        gt_series.push(BundleSeries::from_trajectory(&gt, cfg.bundle, None)?);
        let mut per_res = BTreeMap::new();
        for &r in &cfg.resolutions {
            let d = crate::datagen::downsample(t, r)?;
            per_res.insert(r, BundleSeries::from_trajectory(&d, cfg.bundle, None)?);
        }
        train_series.push(per_res);
    }
    let n_bundles = gt_series[0].n_bundles();
    if n_bundles < s_steps + 1 {
        return Err(Error::invalid(format!(
            "{}-step rollouts on {}-bundle trajectories",
            s_steps, n_bundles
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new();
    let n_batches_per_epoch = trajs.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * n_batches_per_epoch) as u64;
    let mut step = 0u64;
    let mut curve = Vec::with_capacity(cfg.epochs);
    let param_shapes: Vec<Vec<usize>> = model
        .params_mut()
        .iter()
        .map(|p| p.shape().to_vec())
        .collect();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..trajs.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for batch_idx in order.chunks(cfg.batch_size) {
            let dropout_batch = rng.gen::<f64>() < cfg.dropout_batch_frac;
            let mut grads: Vec<Tensor> = param_shapes
                .iter()
                .map(|s| Tensor::zeros(s))
                .collect();
            for &ti in batch_idx {
                let r = cfg.resolutions[rng.gen_range(0..cfg.resolutions.len())];
                let series = &train_series[ti][&r];
                let start = rng.gen_range(0..=n_bundles - 1 - s_steps);
                let mut mesh = series.mesh_at(start)?;
                if dropout_batch {
                    let frac = rng.gen_range(0.0..cfg.dropout_max_frac);
                    dropout_interior_nodes(&mut mesh, frac, &mut rng)?;
                }
                if epoch == 0 {
                    model.observe_norm(&encode(&mesh)?)?;
                }
                let mut tape = Tape::new();
                let vars = model.bind(&mut tape);
                let loss = rollout_loss_on_tape(
                    &mut tape,
                    model,
                    &vars,
                    mesh,
                    &mut IdentityPolicy,
                    0.0,
                    &gt_series[ti],
                    start,
                    &cfg.weights,
                )?;
                epoch_loss += tape.value(loss).item() as f64;
                let g = tape.backward(loss)?;
                for (k, v) in vars.leaves().iter().enumerate() {
                    if let Some(gt) = g.get(*v) {
                        for (a, b) in grads[k].data_mut().iter_mut().zip(gt.data()) {
                            *a += b;
                        }
                    }
                }
            }
            let inv = 1.0 / batch_idx.len() as f32;
            for g in &mut grads {
                for x in g.data_mut() {
                    *x *= inv;
                }
            }
            clip_global_norm(&mut grads, cfg.clip);
            let lr = cosine_lr(cfg.lr, step, total_steps);
            let mut params = model.params_mut();
            let lrs = vec![lr; params.len()];
            adam.step(&mut params, &grads, &lrs)?;
            step += 1;
        }
        if epoch == 0 {
            model.freeze_norm();
        }
        curve.push(epoch_loss / trajs.len() as f64);
    }
    Ok(curve)
}
