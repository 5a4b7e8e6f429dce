//! Experiment orchestration: run configuration, model construction,
//! evaluation rollouts, the error-versus-compute sweep over β, checkpoint
//! files that bundle both models, and the command-line interface.

use crate::datagen::{generate_trajectories, read_dataset, write_dataset, Trajectory};
use crate::error::{Error, Result};
use crate::evolution::{
    pretrain, rollout, trajectory_series, EvolutionModel, IdentityPolicy, PretrainConfig,
    RemeshPolicy,
};
use crate::mesh::{Mesh, NodeId, RemeshAction};
use crate::policy::{joint_train, JointConfig, JointLog, PolicyModel, SamplingPolicy};
use crate::tensor::{read_checkpoint, write_checkpoint, Tensor};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Everything one experiment needs, serializable so runs are reproducible
/// from a single JSON file. Defaults are the full-scale training recipe;
/// `desk_scale` shrinks the schedule to something a single core finishes
/// in minutes.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Trajectories used for training (taken from the front of the file).
    pub n_train: usize,
    /// Trajectories used for evaluation (a separately generated file).
    pub n_test: usize,
    /// Time steps per bundle.
    pub bundle: usize,
    /// Resolution losses and ground truth are evaluated on.
    pub gt_resolution: usize,
    /// Resolution evaluation rollouts start from.
    pub initial_nx: usize,
    /// Hard ceiling on mesh size during remeshing.
    pub vertex_cap: usize,
    /// Bundle applications per evaluation rollout.
    pub eval_applications: usize,

    pub hidden: usize,
    pub evo_message_steps: usize,
    pub evo_encoder_layers: usize,
    pub policy_message_steps: usize,
    pub policy_encoder_layers: usize,
    pub k_max: usize,

    pub pretrain_epochs: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f32,
    /// Per-step pretraining loss weights; the length fixes the horizon.
    pub pretrain_weights: Vec<f64>,
    /// Mesh resolutions pretraining examples are drawn from.
    pub resolutions: Vec<usize>,
    pub dropout_batch_frac: f64,
    pub dropout_max_frac: f64,

    pub joint_epochs: usize,
    pub policy_steps: usize,
    pub evo_steps: usize,
    pub evo_batch: usize,
    pub s_steps: usize,
    pub lr_policy: f32,
    pub lr_value: f32,
    pub lr_evo: f32,
    pub value_coef: f32,
    pub entropy_coef: f32,
    pub clip: f32,
    pub beta_min: f64,
    pub beta_max: f64,
    pub normalize_reward: bool,
    /// Bundle index policy episodes start at.
    pub start_bundle: usize,
    /// Resolution policy episodes start from.
    pub policy_resolution: usize,

    /// Master seed for weights and training-time randomness.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n_train: 512,
            n_test: 64,
            bundle: 25,
            gt_resolution: 100,
            initial_nx: 25,
            vertex_cap: 100,
            eval_applications: 8,
            hidden: 64,
            evo_message_steps: 3,
            evo_encoder_layers: 3,
            policy_message_steps: 3,
            policy_encoder_layers: 2,
            k_max: 20,
            pretrain_epochs: 50,
            pretrain_batch: 128,
            pretrain_lr: 1e-3,
            pretrain_weights: vec![1.0, 0.1, 0.1, 0.1],
            resolutions: vec![100],
            dropout_batch_frac: 0.1,
            dropout_max_frac: 0.3,
            joint_epochs: 30,
            policy_steps: 200,
            evo_steps: 100,
            evo_batch: 128,
            s_steps: 4,
            lr_policy: 5e-4,
            lr_value: 1e-4,
            lr_evo: 1e-4,
            value_coef: 0.5,
            entropy_coef: 1e-2,
            clip: 2.0,
            beta_min: 0.0,
            beta_max: 0.5,
            normalize_reward: true,
            start_bundle: 1,
            policy_resolution: 25,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// A schedule sized for a single core: fewer, shorter epochs with small
    /// batches, same architecture, data family, and loss horizons.
    pub fn desk_scale() -> Self {
        ExperimentConfig {
            pretrain_epochs: 30,
            pretrain_batch: 16,
            joint_epochs: 20,
            policy_steps: 100,
            evo_steps: 15,
            evo_batch: 16,
            ..ExperimentConfig::default()
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {}", path.display(), e)))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.bundle == 0 {
            return bad("bundle must be at least 1".into());
        }
        if self.initial_nx < 2 || self.gt_resolution < self.initial_nx {
            return bad(format!(
                "resolutions initial_nx {} and gt_resolution {} must satisfy 2 <= initial <= gt",
                self.initial_nx, self.gt_resolution
            ));
        }
        if self.vertex_cap < self.initial_nx {
            return bad(format!(
                "vertex_cap {} below the initial resolution {}",
                self.vertex_cap, self.initial_nx
            ));
        }
        if self.eval_applications == 0 || self.s_steps == 0 {
            return bad("rollout horizons must be at least 1".into());
        }
        if self.pretrain_weights.is_empty() || self.pretrain_weights.iter().any(|&w| w < 0.0) {
            return bad("pretrain_weights must be non-empty and non-negative".into());
        }
        if self.resolutions.is_empty() || self.resolutions.iter().any(|&r| r < 2) {
            return bad("resolutions must be non-empty, each at least 2".into());
        }
        if self.policy_resolution < 2 {
            return bad("policy_resolution must be at least 2".into());
        }
        if !(0.0..=1.0).contains(&self.beta_min)
            || !(0.0..=1.0).contains(&self.beta_max)
            || self.beta_min > self.beta_max
        {
            return bad(format!(
                "beta range [{}, {}] must sit inside [0, 1]",
                self.beta_min, self.beta_max
            ));
        }
        for (name, lr) in [
            ("pretrain_lr", self.pretrain_lr),
            ("lr_policy", self.lr_policy),
            ("lr_value", self.lr_value),
            ("lr_evo", self.lr_evo),
        ] {
            if !(lr.is_finite() && lr > 0.0) {
                return bad(format!("{} must be positive and finite, got {}", name, lr));
            }
        }
        if !(self.clip.is_finite() && self.clip > 0.0) {
            return bad(format!("clip must be positive and finite, got {}", self.clip));
        }
        if self.value_coef < 0.0 || self.entropy_coef < 0.0 {
            return bad("value_coef and entropy_coef must be non-negative".into());
        }
        if self.hidden == 0 || self.k_max == 0 {
            return bad("hidden width and k_max must be at least 1".into());
        }
        if self.evo_message_steps == 0 || self.policy_message_steps == 0 {
            return bad("message-passing step counts must be at least 1".into());
        }
        if self.pretrain_batch == 0 || self.evo_batch == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        Ok(())
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            batch_size: self.pretrain_batch,
            weights: self.pretrain_weights.clone(),
            lr: self.pretrain_lr,
            clip: self.clip,
            dropout_batch_frac: self.dropout_batch_frac,
            dropout_max_frac: self.dropout_max_frac,
            resolutions: self.resolutions.clone(),
            gt_resolution: self.gt_resolution,
            bundle: self.bundle,
        }
    }

    pub fn joint_config(&self) -> JointConfig {
        JointConfig {
            epochs: self.joint_epochs,
            policy_steps: self.policy_steps,
            evo_steps: self.evo_steps,
            s_steps: self.s_steps,
            lr_policy: self.lr_policy,
            lr_value: self.lr_value,
            lr_evo: self.lr_evo,
            value_coef: self.value_coef,
            entropy_coef: self.entropy_coef,
            clip: self.clip,
            beta_range: (self.beta_min, self.beta_max),
            evo_batch: self.evo_batch,
            policy_resolution: self.policy_resolution,
            gt_resolution: self.gt_resolution,
            vertex_cap: self.vertex_cap,
            normalize_reward: self.normalize_reward,
            policy_start_bundle: self.start_bundle,
            bundle: self.bundle,
        }
    }
}

/// Builds both models with weights seeded from the config.
pub fn build_models(cfg: &ExperimentConfig) -> Result<(EvolutionModel, PolicyModel)> {
    let mut evo_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let evo = EvolutionModel::new(
        &mut evo_rng,
        cfg.bundle,
        cfg.hidden,
        cfg.evo_message_steps,
        cfg.evo_encoder_layers,
    )?;
    let mut policy_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    policy_rng.set_stream(1);
    let policy = PolicyModel::new(
        &mut policy_rng,
        cfg.bundle,
        cfg.hidden,
        cfg.policy_message_steps,
        cfg.policy_encoder_layers,
        cfg.k_max,
    )?;
    Ok((evo, policy))
}

/// Splits edges whose endpoints see a sharp second difference in the most
/// recent field values; never coarsens. A fixed-rule baseline.
#[derive(Clone, Copy, Debug)]
pub struct CurvatureHeuristic {
    /// Refine when either endpoint's |second difference| exceeds this.
    pub threshold: f32,
    /// Children shorter than this are never created.
    pub min_child_len: f64,
}

impl Default for CurvatureHeuristic {
    fn default() -> Self {
        CurvatureHeuristic {
            threshold: 0.1,
            min_child_len: 0.04,
        }
    }
}

/// |q[left] - 2 q[n] + q[right]| of the last feature column; zero on
/// boundaries and any node without exactly two neighbors.
fn second_difference(mesh: &Mesh, n: NodeId) -> Result<f32> {
    let node = mesh.node(n)?;
    if node.boundary {
        return Ok(0.0);
    }
    let mut neighbors = Vec::with_capacity(2);
    for &eid in mesh.edges_of_node(n) {
        let (a, b) = mesh.edge(eid)?.nodes;
        neighbors.push(if a == n { b } else { a });
    }
    if neighbors.len() != 2 {
        return Ok(0.0);
    }
    let last = |id: NodeId| -> Result<f32> {
        Ok(mesh.node(id)?.q.last().copied().unwrap_or(0.0))
    };
    Ok(last(neighbors[0])? - 2.0 * last(n)? + last(neighbors[1])?)
}

impl RemeshPolicy for CurvatureHeuristic {
    fn act(&mut self, mesh: &Mesh, _beta: f64) -> Result<RemeshAction> {
        let mut refine = Vec::new();
        for e in mesh.edges() {
            let (a, b) = e.nodes;
            let len = (mesh.node(b)?.u[0] - mesh.node(a)?.u[0]).abs();
            if len / 2.0 < self.min_child_len {
                continue;
            }
            let sd = second_difference(mesh, a)?
                .abs()
                .max(second_difference(mesh, b)?.abs());
            if sd > self.threshold {
                refine.push(e.id);
            }
        }
        Ok(RemeshAction {
            refine,
            coarsen: Vec::new(),
        })
    }
}

/// Which remesher an evaluation rollout uses.
pub enum Remesher<'a> {
    Identity,
    Heuristic(CurvatureHeuristic),
    Learned(&'a PolicyModel),
}

/// Mean over trajectories of per-rollout mean loss and mean vertex count.
#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub mse: f64,
    pub avg_vertices: f64,
    pub n_trajectories: usize,
    /// Per-trajectory (mean loss, mean vertices).
    pub per_trajectory: Vec<(f64, f64)>,
}

/// Rolls every trajectory from its bundle-0 state at `initial_nx` through
/// `eval_applications` bundle predictions, scoring each on the
/// `gt_resolution` mesh. Learned policies sample with one RNG stream per
/// trajectory so results do not depend on evaluation order.
pub fn evaluate_model(
    evo: &EvolutionModel,
    remesher: &Remesher,
    trajs: &[Trajectory],
    cfg: &ExperimentConfig,
    beta: f64,
    seed: u64,
) -> Result<EvalOutcome> {
    if trajs.is_empty() {
        return Err(Error::invalid("evaluation needs at least one trajectory"));
    }
    let gt_series = trajectory_series(trajs, cfg.gt_resolution, cfg.bundle, None)?;
    let start_series =
        trajectory_series(trajs, cfg.initial_nx, cfg.bundle, Some(cfg.vertex_cap))?;
    let mut per_trajectory = Vec::with_capacity(trajs.len());
    let mut sum_mse = 0.0f64;
    let mut sum_vertices = 0.0f64;
    for ti in 0..trajs.len() {
        let mesh0 = start_series[ti].mesh_at(0)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(ti as u64);
        let mut learned;
        let mut identity;
        let mut heuristic;
        let policy: &mut dyn RemeshPolicy = match remesher {
            Remesher::Identity => {
                identity = IdentityPolicy;
                &mut identity
            }
            Remesher::Heuristic(h) => {
                heuristic = *h;
                &mut heuristic
            }
            Remesher::Learned(model) => {
                learned = SamplingPolicy {
                    model,
                    rng: &mut rng,
                };
                &mut learned
            }
        };
        let rec = rollout(
            policy,
            evo,
            &mesh0,
            &gt_series[ti],
            0,
            cfg.eval_applications,
            beta,
        )?;
        let mse = rec.total_loss() / rec.len() as f64;
        let verts = rec.mean_nodes();
        per_trajectory.push((mse, verts));
        sum_mse += mse;
        sum_vertices += verts;
    }
    Ok(EvalOutcome {
        mse: sum_mse / trajs.len() as f64,
        avg_vertices: sum_vertices / trajs.len() as f64,
        n_trajectories: trajs.len(),
        per_trajectory,
    })
}

/// One β sweep point.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub beta: f64,
    pub mse: f64,
    pub avg_vertices: f64,
    pub n_trajectories: usize,
    pub seed: u64,
}

/// Evaluates the learned policy at each β with the same data and seed.
pub fn sweep_beta(
    evo: &EvolutionModel,
    policy: &PolicyModel,
    trajs: &[Trajectory],
    cfg: &ExperimentConfig,
    betas: &[f64],
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if betas.is_empty() {
        return Err(Error::invalid("sweep needs at least one beta"));
    }
    let mut rows = Vec::with_capacity(betas.len());
    for &beta in betas {
        let out = evaluate_model(evo, &Remesher::Learned(policy), trajs, cfg, beta, seed)?;
        rows.push(SweepRow {
            beta,
            mse: out.mse,
            avg_vertices: out.avg_vertices,
            n_trajectories: out.n_trajectories,
            seed,
        });
    }
    Ok(rows)
}

/// CSV for sweep rows; floats print shortest-round-trip so identical runs
/// give identical bytes.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("beta,mse,avg_vertices,n_trajectories,seed\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.beta, r.mse, r.avg_vertices, r.n_trajectories, r.seed
        );
    }
    out
}

fn named_refs(named: &[(String, Tensor)]) -> Vec<(String, &Tensor)> {
    named.iter().map(|(n, t)| (n.clone(), t)).collect()
}

/// Writes the evolution model alone (post-pretraining).
pub fn save_evolution_checkpoint(
    path: &Path,
    evo: &EvolutionModel,
    cfg: &ExperimentConfig,
) -> Result<()> {
    let named = evo.named()?;
    let meta = serde_json::json!({ "phase": "pretrain", "config": cfg });
    write_checkpoint(path, &named_refs(&named), &meta)
}

/// Writes both models (post-joint-training).
pub fn save_joint_checkpoint(
    path: &Path,
    evo: &EvolutionModel,
    policy: &PolicyModel,
    cfg: &ExperimentConfig,
) -> Result<()> {
    let mut named = evo.named()?;
    named.extend(policy.named()?);
    let meta = serde_json::json!({ "phase": "joint", "config": cfg });
    write_checkpoint(path, &named_refs(&named), &meta)
}

/// Loads whatever models the checkpoint holds into the given instances.
/// Returns the stored metadata. The policy argument may be `None` for
/// evolution-only checkpoints.
pub fn load_checkpoint_into(
    path: &Path,
    evo: &mut EvolutionModel,
    policy: Option<&mut PolicyModel>,
) -> Result<serde_json::Value> {
    let (entries, meta) = read_checkpoint(path)?;
    let store: BTreeMap<String, Tensor> = entries.into_iter().collect();
    evo.load(&store)?;
    if let Some(p) = policy {
        p.load(&store)?;
    }
    Ok(meta)
}

/// CSV with one row per policy episode and one per evolution step.
pub fn joint_log_csv(log: &JointLog) -> String {
    let mut out = String::from(
        "kind,epoch,step,beta,reward,delta_error,delta_computation,k_refine,k_coarsen,value,loss\n",
    );
    for e in &log.episodes {
        let _ = writeln!(
            out,
            "policy,{},{},{},{},{},{},{},{},{},{}",
            e.epoch,
            e.step,
            e.beta,
            e.reward,
            e.delta_error,
            e.delta_computation,
            e.k_refine,
            e.k_coarsen,
            e.value,
            e.loss
        );
    }
    for (i, l) in log.evo_losses.iter().enumerate() {
        let _ = writeln!(out, "evo,,{},,,,,,,,{}", i, l);
    }
    out
}

/// CSV of the pretraining loss curve.
pub fn pretrain_log_csv(curve: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (i, l) in curve.iter().enumerate() {
        let _ = writeln!(out, "{},{}", i, l);
    }
    out
}

#[derive(Parser)]
#[command(
    name = "lamp",
    about = "Mesh-adaptive neural surrogate: data generation, training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a trajectory dataset file.
    GenerateData {
        /// Number of trajectories.
        #[arg(long)]
        count: usize,
        /// Master seed; each trajectory gets its own stream under it.
        #[arg(long)]
        seed: u64,
        /// Output dataset path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the evolution model on ground-truth trajectories.
    Pretrain {
        /// Experiment config JSON; defaults to the full-scale recipe.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training dataset file.
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Optional CSV of the per-epoch loss curve.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Joint phase: alternate policy and evolution updates.
    TrainJoint {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint from `pretrain`.
        #[arg(long)]
        evo: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional CSV of episodes and evolution steps.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (or a fixed baseline) on a dataset.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Joint checkpoint with both models; optional for baselines, which
        /// then run on freshly pretrained weights from an evolution
        /// checkpoint given via --evo.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Evolution-only checkpoint (baselines without a joint checkpoint).
        #[arg(long)]
        evo: Option<PathBuf>,
        /// Tradeoff coefficient the policy is conditioned on.
        #[arg(long, default_value_t = 0.1)]
        beta: f64,
        /// Evaluate the identity remesher instead of the learned policy.
        #[arg(long)]
        identity: bool,
        /// Evaluate the curvature-split heuristic instead.
        #[arg(long)]
        heuristic: bool,
        /// Override the starting resolution from the config.
        #[arg(long)]
        initial_nx: Option<usize>,
        /// Sampling seed for the learned policy.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional CSV (single row, sweep format).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the learned policy across several β values.
    SweepBeta {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated β values.
        #[arg(long, value_delimiter = ',')]
        betas: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Stress the mesh editor with random filtered actions and validate.
    ValidateMesh {
        #[arg(long, default_value_t = 25)]
        nx: usize,
        #[arg(long, default_value_t = 1000)]
        actions: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print a config JSON to stdout.
    PrintConfig {
        /// `full` (default) or `desk`.
        #[arg(long, default_value = "full")]
        preset: String,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::from_file(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn load_training_set(path: &Path, cfg: &ExperimentConfig) -> Result<Vec<Trajectory>> {
    let mut trajs = read_dataset(path)?;
    if trajs.len() < cfg.n_train {
        return Err(Error::Config(format!(
            "config wants {} training trajectories but {} holds {}",
            cfg.n_train,
            path.display(),
            trajs.len()
        )));
    }
    trajs.truncate(cfg.n_train);
    Ok(trajs)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenerateData { count, seed, out } => {
            let trajs = generate_trajectories(seed, count)?;
            write_dataset(&out, &trajs)?;
            println!("wrote {} trajectories to {}", trajs.len(), out.display());
        }
        Cmd::Pretrain {
            config,
            data,
            out,
            log,
        } => {
            let cfg = load_config(&config)?;
            let trajs = load_training_set(&data, &cfg)?;
            let (mut evo, _) = build_models(&cfg)?;
            let curve = pretrain(&mut evo, &trajs, &cfg.pretrain_config(), cfg.seed)?;
            save_evolution_checkpoint(&out, &evo, &cfg)?;
            if let Some(p) = log {
                write_text(&p, &pretrain_log_csv(&curve))?;
            }
            println!(
                "pretrained {} epochs, loss {} -> {}, checkpoint {}",
                curve.len(),
                curve.first().unwrap_or(&f64::NAN),
                curve.last().unwrap_or(&f64::NAN),
                out.display()
            );
        }
        Cmd::TrainJoint {
            config,
            data,
            evo,
            out,
            log,
        } => {
            let cfg = load_config(&config)?;
            let trajs = load_training_set(&data, &cfg)?;
            let (mut evo_model, mut policy) = build_models(&cfg)?;
            load_checkpoint_into(&evo, &mut evo_model, None)?;
            let jlog = joint_train(&mut evo_model, &mut policy, &trajs, &cfg.joint_config(), cfg.seed)?;
            save_joint_checkpoint(&out, &evo_model, &policy, &cfg)?;
            if let Some(p) = log {
                write_text(&p, &joint_log_csv(&jlog))?;
            }
            let mean_reward = if jlog.episodes.is_empty() {
                f64::NAN
            } else {
                jlog.episodes.iter().map(|e| e.reward).sum::<f64>() / jlog.episodes.len() as f64
            };
            println!(
                "joint-trained {} episodes ({} skipped), mean reward {}, checkpoint {}",
                jlog.episodes.len(),
                jlog.skipped_episodes,
                mean_reward,
                out.display()
            );
        }
        Cmd::Evaluate {
            config,
            data,
            ckpt,
            evo,
            beta,
            identity,
            heuristic,
            initial_nx,
            seed,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(nx) = initial_nx {
                cfg.initial_nx = nx;
                cfg.validate()?;
            }
            if identity && heuristic {
                return Err(Error::Config(
                    "--identity and --heuristic are mutually exclusive".into(),
                ));
            }
            let trajs = read_dataset(&data)?;
            let (mut evo_model, mut policy) = build_models(&cfg)?;
            match (&ckpt, &evo) {
                (Some(p), _) => {
                    load_checkpoint_into(p, &mut evo_model, Some(&mut policy))?;
                }
                (None, Some(p)) => {
                    if !(identity || heuristic) {
                        return Err(Error::Config(
                            "a learned-policy evaluation needs --ckpt".into(),
                        ));
                    }
                    load_checkpoint_into(p, &mut evo_model, None)?;
                }
                (None, None) => {
                    return Err(Error::Config(
                        "evaluate needs --ckpt or (--evo with a baseline flag)".into(),
                    ));
                }
            }
            let remesher = if identity {
                Remesher::Identity
            } else if heuristic {
                Remesher::Heuristic(CurvatureHeuristic::default())
            } else {
                Remesher::Learned(&policy)
            };
            let outcome = evaluate_model(&evo_model, &remesher, &trajs, &cfg, beta, seed)?;
            println!(
                "beta {} mse {} avg_vertices {} over {} trajectories",
                beta, outcome.mse, outcome.avg_vertices, outcome.n_trajectories
            );
            if let Some(p) = out {
                let row = SweepRow {
                    beta,
                    mse: outcome.mse,
                    avg_vertices: outcome.avg_vertices,
                    n_trajectories: outcome.n_trajectories,
                    seed,
                };
                write_text(&p, &sweep_csv(&[row]))?;
            }
        }
        Cmd::SweepBeta {
            config,
            data,
            ckpt,
            betas,
            seed,
            out,
        } => {
            let cfg = load_config(&config)?;
            let trajs = read_dataset(&data)?;
            let (mut evo_model, mut policy) = build_models(&cfg)?;
            load_checkpoint_into(&ckpt, &mut evo_model, Some(&mut policy))?;
            let rows = sweep_beta(&evo_model, &policy, &trajs, &cfg, &betas, seed)?;
            write_text(&out, &sweep_csv(&rows))?;
            for r in &rows {
                println!(
                    "beta {} mse {} avg_vertices {}",
                    r.beta, r.mse, r.avg_vertices
                );
            }
        }
        Cmd::ValidateMesh { nx, actions, seed } => {
            let applied = stress_mesh(nx, actions, seed)?;
            println!(
                "applied {} random actions on a {}-node chain, mesh valid",
                applied, nx
            );
        }
        Cmd::PrintConfig { preset } => {
            let cfg = match preset.as_str() {
                "full" => ExperimentConfig::default(),
                "desk" => ExperimentConfig::desk_scale(),
                other => {
                    return Err(Error::Config(format!(
                        "unknown preset '{}', expected 'full' or 'desk'",
                        other
                    )))
                }
            };
            let text = serde_json::to_string_pretty(&cfg)
                .map_err(|e| Error::Config(e.to_string()))?;
            println!("{}", text);
        }
    }
    Ok(())
}

/// Applies `actions` random remeshing actions to a fresh chain, validating
/// after each. Returns the number applied.
pub fn stress_mesh(nx: usize, actions: usize, seed: u64) -> Result<usize> {
    use rand::Rng;
    let mut mesh = Mesh::uniform_1d(nx, 16.0, 4, Some(4 * nx))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..actions {
        let edges: Vec<_> = mesh.edges().map(|e| e.id).collect();
        let pick = |rng: &mut ChaCha8Rng, n: usize| -> Vec<crate::mesh::EdgeId> {
            (0..n)
                .map(|_| edges[rng.gen_range(0..edges.len())])
                .collect()
        };
        let n_re = rng.gen_range(0..4);
        let n_co = rng.gen_range(0..4);
        let action = RemeshAction {
            refine: pick(&mut rng, n_re),
            coarsen: pick(&mut rng, n_co),
        };
        crate::mesh::apply_action(&mut mesh, &action)?;
        crate::mesh::validate(&mesh)?;
    }
    Ok(actions)
}

/// Entry point for the binary: parses arguments, runs, maps errors to exit
/// codes (2 for configuration problems, 3 for numeric failures, 1 otherwise).
pub fn cli_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Clap prints its own message (also for --help / --version).
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            match e {
                Error::Config(_) => 2,
                ref e if e.is_numeric() => 3,
                _ => 1,
            }
        }
    }
}
