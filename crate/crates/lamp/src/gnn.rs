//! Encode-process-decode graph network over meshes.
//!
//! A mesh becomes a `GraphBatch` (node rows in ascending node id, directed
//! edge entries sorted by (receiver id, sender id) so scatter accumulation
//! order is a property of the mesh, not of row layout). The processor
//! uplifts features to the latent width and runs message-passing layers
//! with residual connections on both node and edge latents.

use crate::error::{Error, Result};
use crate::mesh::{EdgeId, Mesh, MeshDim, NodeId};
use crate::tensor::{Tape, Tensor, Var};
use rand::Rng;
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Act {
    Silu,
    Elu,
    Relu,
    Linear,
}

impl Act {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Act::Silu => tape.silu(x),
            Act::Elu => tape.elu(x),
            Act::Relu => tape.relu(x),
            Act::Linear => x,
        }
    }
}

/// Dense multilayer perceptron. The activation sits between layers; the
/// final layer is linear.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    pub act: Act,
}

/// Tape handles of one bound Mlp, in (W0, b0, W1, b1, ...) order.
pub struct MlpVars {
    vars: Vec<Var>,
}

impl MlpVars {
    /// Leaf handles in binding order (matches `params_mut`).
    pub fn leaves(&self) -> &[Var] {
        &self.vars
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases. `sizes` lists the layer widths
    /// including input and output, so `sizes.len() - 1` linear layers.
    pub fn new<R: Rng>(rng: &mut R, sizes: &[usize], act: Act) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::invalid("an Mlp needs at least one linear layer"));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
            let data: Vec<f32> = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-limit..limit))
                .collect();
            weights.push(Tensor::new(vec![fan_in, fan_out], data)?);
            biases.push(Tensor::zeros(&[fan_out]));
        }
        Ok(Mlp { weights, biases, act })
    }

    /// Uniform-width helper: `n_layers` linear layers through `hidden`.
    pub fn with_layers<R: Rng>(
        rng: &mut R,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        n_layers: usize,
        act: Act,
    ) -> Result<Self> {
        let mut sizes = vec![in_dim];
        for _ in 0..n_layers.saturating_sub(1) {
            sizes.push(hidden);
        }
        sizes.push(out_dim);
        Mlp::new(rng, &sizes, act)
    }

    /// Zeroes the final layer so the initial output is exactly 0.
    pub fn zero_final(&mut self) {
        if let Some(w) = self.weights.last_mut() {
            w.data_mut().fill(0.0);
        }
        if let Some(b) = self.biases.last_mut() {
            b.data_mut().fill(0.0);
        }
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(|t| t.numel()).sum::<usize>()
            + self.biases.iter().map(|t| t.numel()).sum::<usize>()
    }

    /// Pushes every parameter as a trainable leaf, in a stable order.
    pub fn bind(&self, tape: &mut Tape) -> MlpVars {
        let mut vars = Vec::with_capacity(self.weights.len() * 2);
        for (w, b) in self.weights.iter().zip(&self.biases) {
            vars.push(tape.leaf(w.clone()));
            vars.push(tape.leaf(b.clone()));
        }
        MlpVars { vars }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &MlpVars, mut x: Var) -> Result<Var> {
        let n = self.weights.len();
        for l in 0..n {
            x = tape.matmul(x, vars.vars[2 * l])?;
            x = tape.add(x, vars.vars[2 * l + 1])?;
            if l + 1 < n {
                x = self.act.apply(tape, x);
            }
        }
        Ok(x)
    }

    /// Parameters in binding order.
    pub fn params(&self) -> Vec<&Tensor> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    /// (name, tensor) pairs for checkpointing, `prefix/w0`, `prefix/b0`, ...
    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            out.push((format!("{}/w{}", prefix, l), w.clone()));
            out.push((format!("{}/b{}", prefix, l), b.clone()));
        }
        out
    }

    pub fn load(&mut self, prefix: &str, store: &BTreeMap<String, Tensor>) -> Result<()> {
        for l in 0..self.weights.len() {
            self.weights[l] = fetch(store, &format!("{}/w{}", prefix, l), self.weights[l].shape())?;
            self.biases[l] = fetch(store, &format!("{}/b{}", prefix, l), self.biases[l].shape())?;
        }
        Ok(())
    }
}

pub(crate) fn fetch(
    store: &BTreeMap<String, Tensor>,
    name: &str,
    shape: &[usize],
) -> Result<Tensor> {
    let t = store
        .get(name)
        .ok_or_else(|| Error::Format(format!("checkpoint missing parameter {}", name)))?;
    if t.shape() != shape {
        return Err(Error::Format(format!(
            "checkpoint parameter {} has shape {:?}, expected {:?}",
            name,
            t.shape(),
            shape
        )));
    }
    Ok(t.clone())
}

/// A mesh lowered to tensors. Node rows follow ascending node id; directed
/// edge entries are sorted by (receiver id, sender id), each mesh edge
/// contributing both directions.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub node_features: Tensor,
    pub edge_features: Tensor,
    /// Per directed entry, the sender's node row.
    pub senders: Vec<usize>,
    pub receivers: Vec<usize>,
    /// Node row -> graph index (all zero for a single mesh).
    pub segments: Vec<usize>,
    pub n_graphs: usize,
    /// Row -> mesh node id.
    pub node_ids: Vec<NodeId>,
    /// Undirected mesh edges, ascending id.
    pub edge_ids: Vec<EdgeId>,
    /// Per undirected edge, the directed-entry index of its canonical
    /// direction (smaller node id -> larger node id).
    pub canonical_entries: Vec<usize>,
}

impl GraphBatch {
    pub fn n_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn n_directed(&self) -> usize {
        self.senders.len()
    }

    /// Node row of every id.
    pub fn rows(&self) -> BTreeMap<NodeId, usize> {
        self.node_ids
            .iter()
            .enumerate()
            .map(|(r, &id)| (id, r))
            .collect()
    }
}

/// Lowers a mesh: node features are the q bundle plus a boundary flag;
/// directed edge features are the mesh-coordinate delta (receiver minus
/// sender) and its magnitude, plus the world-coordinate delta and magnitude
/// when world positions are present.
pub fn encode(mesh: &Mesh) -> Result<GraphBatch> {
    let node_ids: Vec<NodeId> = mesh.nodes().map(|n| n.id).collect();
    if node_ids.is_empty() {
        return Err(Error::mesh("cannot encode an empty mesh"));
    }
    let rows: BTreeMap<NodeId, usize> = node_ids
        .iter()
        .enumerate()
        .map(|(r, &id)| (id, r))
        .collect();
    let q_width = mesh.node(node_ids[0])?.q.len();
    let f_v = q_width + 1;
    let mut node_data = Vec::with_capacity(node_ids.len() * f_v);
    for n in mesh.nodes() {
        if n.q.len() != q_width {
            return Err(Error::mesh("inconsistent feature widths"));
        }
        node_data.extend_from_slice(&n.q);
        node_data.push(if n.boundary { 1.0 } else { 0.0 });
    }
    let node_features = Tensor::new(vec![node_ids.len(), f_v], node_data)?;

    // Directed entries sorted by (receiver id, sender id): the scatter
    // accumulation order then survives any row relabeling bit-exactly.
    let mut directed: Vec<(NodeId, NodeId, EdgeId)> = Vec::with_capacity(mesh.n_edges() * 2);
    for e in mesh.edges() {
        let (a, b) = e.nodes;
        directed.push((b, a, e.id));
        directed.push((a, b, e.id));
    }
    directed.sort_by_key(|&(recv, send, _)| (recv, send));

    let use_world = mesh.nodes().all(|n| n.x.is_some());
    let f_e = match (mesh.dim, use_world) {
        (MeshDim::One, _) => 2,
        (MeshDim::Two, false) => 3,
        (MeshDim::Two, true) => 7,
    };
    let mut senders = Vec::with_capacity(directed.len());
    let mut receivers = Vec::with_capacity(directed.len());
    let mut edge_data = Vec::with_capacity(directed.len() * f_e);
    for &(recv, send, _) in &directed {
        senders.push(rows[&send]);
        receivers.push(rows[&recv]);
        let (s, r) = (mesh.node(send)?, mesh.node(recv)?);
        match mesh.dim {
            MeshDim::One => {
                let du = (r.u[0] - s.u[0]) as f32;
                edge_data.push(du);
                edge_data.push(du.abs());
            }
            MeshDim::Two => {
                let (dx, dy) = (r.u[0] - s.u[0], r.u[1] - s.u[1]);
                edge_data.push(dx as f32);
                edge_data.push(dy as f32);
                edge_data.push((dx * dx + dy * dy).sqrt() as f32);
                if use_world {
                    let (xs, xr) = (s.x.unwrap(), r.x.unwrap());
                    let d = [xr[0] - xs[0], xr[1] - xs[1], xr[2] - xs[2]];
                    let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                    edge_data.extend(d.iter().map(|&v| v as f32));
                    edge_data.push(norm as f32);
                }
            }
        }
    }
    let edge_features = Tensor::new(vec![directed.len(), f_e], edge_data)?;

    let mut edge_ids: Vec<EdgeId> = mesh.edges().map(|e| e.id).collect();
    edge_ids.sort_unstable();
    let canonical_entries = edge_ids
        .iter()
        .map(|&eid| {
            let (a, b) = mesh.edge(eid).unwrap().nodes;
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            directed
                .iter()
                .position(|&(recv, send, de)| de == eid && send == lo && recv == hi)
                .expect("both directions of every edge are present")
        })
        .collect();

    Ok(GraphBatch {
        segments: vec![0; node_ids.len()],
        n_graphs: 1,
        node_features,
        edge_features,
        senders,
        receivers,
        node_ids,
        edge_ids,
        canonical_entries,
    })
}

/// One message-passing layer: edge MLP on (edge latent, sender, receiver),
/// node MLP on (node latent, summed incoming edge updates), residuals on
/// both.
#[derive(Clone, Debug)]
pub struct MessageLayer {
    pub edge_mlp: Mlp,
    pub node_mlp: Mlp,
}

pub struct MessageVars {
    edge: MlpVars,
    node: MlpVars,
}

impl MessageLayer {
    pub fn new<R: Rng>(rng: &mut R, h: usize, act: Act) -> Result<Self> {
        Ok(MessageLayer {
            edge_mlp: Mlp::new(rng, &[3 * h, h, h], act)?,
            node_mlp: Mlp::new(rng, &[2 * h, h, h], act)?,
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> MessageVars {
        MessageVars {
            edge: self.edge_mlp.bind(tape),
            node: self.node_mlp.bind(tape),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &MessageVars,
        senders: &[usize],
        receivers: &[usize],
        z_v: Var,
        z_e: Var,
    ) -> Result<(Var, Var)> {
        let n_nodes = tape.value(z_v).rows();
        let zi = tape.gather_rows(z_v, senders)?;
        let zj = tape.gather_rows(z_v, receivers)?;
        let e_in = tape.concat(&[z_e, zi, zj])?;
        let e_upd = self.edge_mlp.forward(tape, &vars.edge, e_in)?;
        let z_e_next = tape.add(z_e, e_upd)?;
        let agg = tape.scatter_sum(z_e_next, receivers, n_nodes)?;
        let n_in = tape.concat(&[z_v, agg])?;
        let n_upd = self.node_mlp.forward(tape, &vars.node, n_in)?;
        let z_v_next = tape.add(z_v, n_upd)?;
        Ok((z_v_next, z_e_next))
    }
}

/// Node and edge latents after processing.
#[derive(Clone, Copy, Debug)]
pub struct LatentGraph {
    pub z_nodes: Var,
    pub z_edges: Var,
}

/// Feature encoders plus N message-passing steps. With `shared` one layer's
/// parameters serve every step.
#[derive(Clone, Debug)]
pub struct Processor {
    pub node_encoder: Mlp,
    pub edge_encoder: Mlp,
    pub layers: Vec<MessageLayer>,
    pub n_steps: usize,
    pub shared: bool,
}

pub struct ProcessorVars {
    node_enc: MlpVars,
    edge_enc: MlpVars,
    layers: Vec<MessageVars>,
}

impl ProcessorVars {
    /// Leaf handles in binding order (matches `Processor::params_mut`).
    pub fn leaves(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.node_enc.leaves().to_vec();
        out.extend_from_slice(self.edge_enc.leaves());
        for l in &self.layers {
            out.extend_from_slice(l.edge.leaves());
            out.extend_from_slice(l.node.leaves());
        }
        out
    }
}

impl Processor {
    pub fn new<R: Rng>(
        rng: &mut R,
        f_v: usize,
        f_e: usize,
        h: usize,
        n_steps: usize,
        n_encoder_layers: usize,
        shared: bool,
        act: Act,
    ) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::invalid("processor needs at least one step"));
        }
        let n_layers = if shared { 1 } else { n_steps };
        let layers = (0..n_layers)
            .map(|_| MessageLayer::new(rng, h, act))
            .collect::<Result<Vec<_>>>()?;
        Ok(Processor {
            node_encoder: Mlp::with_layers(rng, f_v, h, h, n_encoder_layers, act)?,
            edge_encoder: Mlp::with_layers(rng, f_e, h, h, n_encoder_layers, act)?,
            layers,
            n_steps,
            shared,
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> ProcessorVars {
        ProcessorVars {
            node_enc: self.node_encoder.bind(tape),
            edge_enc: self.edge_encoder.bind(tape),
            layers: self.layers.iter().map(|l| l.bind(tape)).collect(),
        }
    }

    /// Runs encode MLPs and message passing. `node_feat` and `edge_feat`
    /// are tape vars (typically normalized constants).
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &ProcessorVars,
        senders: &[usize],
        receivers: &[usize],
        node_feat: Var,
        edge_feat: Var,
    ) -> Result<LatentGraph> {
        let mut z_v = self.node_encoder.forward(tape, &vars.node_enc, node_feat)?;
        let mut z_e = self.edge_encoder.forward(tape, &vars.edge_enc, edge_feat)?;
        for step in 0..self.n_steps {
            let idx = if self.shared { 0 } else { step };
            let (v, e) = self.layers[idx].forward(
                tape,
                &vars.layers[idx],
                senders,
                receivers,
                z_v,
                z_e,
            )?;
            z_v = v;
            z_e = e;
        }
        Ok(LatentGraph {
            z_nodes: z_v,
            z_edges: z_e,
        })
    }

    pub fn n_params(&self) -> usize {
        self.node_encoder.n_params()
            + self.edge_encoder.n_params()
            + self
                .layers
                .iter()
                .map(|l| l.edge_mlp.n_params() + l.node_mlp.n_params())
                .sum::<usize>()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.node_encoder.params_mut();
        out.extend(self.edge_encoder.params_mut());
        for l in &mut self.layers {
            out.extend(l.edge_mlp.params_mut());
            out.extend(l.node_mlp.params_mut());
        }
        out
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = self.node_encoder.named(&format!("{}/node_enc", prefix));
        out.extend(self.edge_encoder.named(&format!("{}/edge_enc", prefix)));
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.edge_mlp.named(&format!("{}/mp{}/edge", prefix, i)));
            out.extend(l.node_mlp.named(&format!("{}/mp{}/node", prefix, i)));
        }
        out
    }

    pub fn load(&mut self, prefix: &str, store: &BTreeMap<String, Tensor>) -> Result<()> {
        self.node_encoder
            .load(&format!("{}/node_enc", prefix), store)?;
        self.edge_encoder
            .load(&format!("{}/edge_enc", prefix), store)?;
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.edge_mlp.load(&format!("{}/mp{}/edge", prefix, i), store)?;
            l.node_mlp.load(&format!("{}/mp{}/node", prefix, i), store)?;
        }
        Ok(())
    }
}

/// Per-node decoder head (a plain MLP on node latents).
pub fn decode_nodes(
    tape: &mut Tape,
    decoder: &Mlp,
    vars: &MlpVars,
    latent: &LatentGraph,
) -> Result<Var> {
    decoder.forward(tape, vars, latent.z_nodes)
}

/// Mean of node latents per graph segment.
pub fn pool_global_mean(
    tape: &mut Tape,
    z_nodes: Var,
    segments: &[usize],
    n_graphs: usize,
) -> Result<Var> {
    if segments.len() != tape.value(z_nodes).rows() {
        return Err(Error::invalid(format!(
            "{} segment labels for {} node rows",
            segments.len(),
            tape.value(z_nodes).rows()
        )));
    }
    let mut counts = vec![0usize; n_graphs];
    for &s in segments {
        if s >= n_graphs {
            return Err(Error::invalid(format!(
                "segment {} out of {} graphs",
                s, n_graphs
            )));
        }
        counts[s] += 1;
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::invalid("every graph needs at least one node"));
    }
    let sums = tape.scatter_sum(z_nodes, segments, n_graphs)?;
    let inv: Vec<f32> = counts.iter().map(|&c| 1.0 / c as f32).collect();
    tape.scale_rows(sums, &inv)
}

/// Running per-column normalization. Accumulates in f64; `freeze`
/// snapshots f32 mean/std that later updates cannot move.
#[derive(Clone, Debug)]
pub struct NormStats {
    width: usize,
    sum: Vec<f64>,
    sumsq: Vec<f64>,
    count: u64,
    frozen: Option<(Vec<f32>, Vec<f32>)>,
}

impl NormStats {
    pub fn new(width: usize) -> Self {
        NormStats {
            width,
            sum: vec![0.0; width],
            sumsq: vec![0.0; width],
            count: 0,
            frozen: None,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.is_some()
    }

    /// Accumulates rows. A no-op once frozen.
    pub fn update(&mut self, rows: &Tensor) -> Result<()> {
        if rows.row_width() != self.width {
            return Err(Error::invalid(format!(
                "normalization width {} fed rows of width {}",
                self.width,
                rows.row_width()
            )));
        }
        if self.frozen.is_some() {
            return Ok(());
        }
        for row in rows.data().chunks_exact(self.width) {
            for (c, &v) in row.iter().enumerate() {
                self.sum[c] += v as f64;
                self.sumsq[c] += (v as f64) * (v as f64);
            }
            self.count += 1;
        }
        Ok(())
    }

    fn current(&self) -> (Vec<f32>, Vec<f32>) {
        if let Some((m, s)) = &self.frozen {
            return (m.clone(), s.clone());
        }
        if self.count == 0 {
            return (vec![0.0; self.width], vec![1.0; self.width]);
        }
        let n = self.count as f64;
        let mut mean = Vec::with_capacity(self.width);
        let mut std = Vec::with_capacity(self.width);
        for c in 0..self.width {
            let m = self.sum[c] / n;
            let var = (self.sumsq[c] / n - m * m).max(0.0);
            mean.push(m as f32);
            std.push((var.sqrt() as f32).max(1e-6));
        }
        (mean, std)
    }

    pub fn freeze(&mut self) {
        if self.frozen.is_none() {
            let snap = self.current();
            self.frozen = Some(snap);
        }
    }

    /// (x - mean) / std per column, as differentiable tape ops with the
    /// statistics held constant.
    pub fn normalize_on_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        if tape.value(x).row_width() != self.width {
            return Err(Error::invalid(format!(
                "normalization width {} fed rows of width {}",
                self.width,
                tape.value(x).row_width()
            )));
        }
        let (mean, std) = self.current();
        let inv: Vec<f32> = std.iter().map(|s| 1.0 / s).collect();
        let m = tape.constant(Tensor::new(vec![self.width], mean)?);
        let i = tape.constant(Tensor::new(vec![self.width], inv)?);
        let centered = tape.sub(x, m)?;
        tape.mul(centered, i)
    }

    /// (x - mean) / std per column.
    pub fn normalize(&self, t: &Tensor) -> Result<Tensor> {
        if t.row_width() != self.width {
            return Err(Error::invalid(format!(
                "normalization width {} fed rows of width {}",
                self.width,
                t.row_width()
            )));
        }
        let (mean, std) = self.current();
        let mut data = t.data().to_vec();
        for row in data.chunks_exact_mut(self.width) {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - mean[c]) / std[c];
            }
        }
        Tensor::new(t.shape().to_vec(), data)
    }

    /// Frozen stats as named tensors (only frozen stats are persisted).
    pub fn named(&self, prefix: &str) -> Result<Vec<(String, Tensor)>> {
        let (mean, std) = match &self.frozen {
            Some((m, s)) => (m.clone(), s.clone()),
            None => {
                return Err(Error::invalid(
                    "normalization stats must be frozen before checkpointing",
                ))
            }
        };
        Ok(vec![
            (format!("{}/mean", prefix), Tensor::new(vec![self.width], mean)?),
            (format!("{}/std", prefix), Tensor::new(vec![self.width], std)?),
        ])
    }

    pub fn load(prefix: &str, width: usize, store: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mean = fetch(store, &format!("{}/mean", prefix), &[width])?;
        let std = fetch(store, &format!("{}/std", prefix), &[width])?;
        Ok(NormStats {
            width,
            sum: vec![0.0; width],
            sumsq: vec![0.0; width],
            count: 0,
            frozen: Some((mean.data().to_vec(), std.data().to_vec())),
        })
    }
}
