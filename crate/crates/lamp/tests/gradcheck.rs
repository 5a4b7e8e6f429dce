//! End-to-end gradient verification: the analytic backward pass of every
//! trainable tensor is compared against central finite differences of the
//! f64 graph replay, across several seeds, on models small enough that no
//! parameter tensor exceeds 64 elements.

use lamp::evolution::EvolutionModel;
use lamp::gnn::encode;
use lamp::mesh::{Mesh, NodeId};
use lamp::policy::{action_entropy, action_log_prob, PolicyModel};
use lamp::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 6] = [0, 1, 2, 3, 4, 5];
const TOL: f64 = 1e-4;
/// Gradients whose 2-norm disagreement sits below this are identical at
/// f32 precision; the relative test would otherwise divide by zero for
/// parameters the loss is exactly invariant to (a softmax shift, say).
const ATOL: f64 = 1e-5;
const FD_STEP: f64 = 1e-3;

/// Central finite differences on the f64 replay versus the f32 backward
/// pass, as a 2-norm relative error per parameter tensor.
fn finite_diff_check(tape: &Tape, loss: Var, params: &[Var], label: &str) {
    let grads = tape.backward(loss).expect("backward pass");
    for (pi, &p) in params.iter().enumerate() {
        let base: Vec<f64> = tape.value(p).data().iter().map(|&x| x as f64).collect();
        assert!(
            base.len() <= 64,
            "{}: parameter {} has {} elements, toy bound is 64",
            label,
            pi,
            base.len()
        );
        let analytic = grads.grad_or_zeros(tape, p);
        let mut fd = vec![0.0f64; base.len()];
        for i in 0..base.len() {
            let mut up = base.clone();
            up[i] += FD_STEP;
            let mut dn = base.clone();
            dn[i] -= FD_STEP;
            let lu = tape.replay_f64(loss, &[(p, up)]).unwrap();
            let ld = tape.replay_f64(loss, &[(p, dn)]).unwrap();
            fd[i] = (lu - ld) / (2.0 * FD_STEP);
        }
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for (a, f) in analytic.data().iter().zip(&fd) {
            num += (*a as f64 - f).powi(2);
            den += f.powi(2);
        }
        let abs = num.sqrt();
        let rel = abs / den.sqrt().max(1e-12);
        assert!(
            rel <= TOL || abs <= ATOL,
            "{}: parameter {} rel err {:.3e} > {:.1e} (abs {:.3e})",
            label,
            pi,
            rel,
            TOL,
            abs
        );
    }
}

fn random_mesh(n: usize, bundle: usize, seed: u64) -> Mesh {
    let mut m = Mesh::uniform_1d(n, 16.0, bundle, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<NodeId> = m.nodes().map(|x| x.id).collect();
    for id in ids {
        let q: Vec<f32> = (0..bundle).map(|_| rng.gen_range(-1.0..1.0)).collect();
        m.node_mut(id).unwrap().q = q;
    }
    m
}

#[test]
fn evolution_model_gradients_match_finite_differences() {
    const BUNDLE: usize = 3;
    const HIDDEN: usize = 4;
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = EvolutionModel::new(&mut rng, BUNDLE, HIDDEN, 1, 2).unwrap();
        let mesh = random_mesh(6, BUNDLE, seed + 100);
        let batch = encode(&mesh).unwrap();
        model.observe_norm(&batch).unwrap();
        model.freeze_norm();

        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let q: Vec<f32> = mesh.bundles().into_iter().flat_map(|(_, q)| q).collect();
        let qv = tape.constant(Tensor::new(vec![mesh.n_nodes(), BUNDLE], q).unwrap());
        let pred = model.forward_step(&mut tape, &vars, &batch, qv).unwrap();
        // Squared distance to a fixed random target makes the loss depend
        // on every output coordinate.
        let target: Vec<f32> = (0..mesh.n_nodes() * BUNDLE)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let tv = tape
            .constant(Tensor::new(vec![mesh.n_nodes(), BUNDLE], target).unwrap());
        let diff = tape.sub(pred, tv).unwrap();
        let sq = tape.square(diff);
        let loss = tape.mean(sq);

        finite_diff_check(&tape, loss, &vars.leaves(), &format!("evolution seed {}", seed));
    }
}

#[test]
fn policy_head_gradients_match_finite_differences() {
    const BUNDLE: usize = 3;
    const HIDDEN: usize = 4;
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = PolicyModel::new(&mut rng, BUNDLE, HIDDEN, 1, 2, 5).unwrap();
        let mesh = random_mesh(6, BUNDLE, seed + 200);
        let beta = 0.3;
        let (_, sampled) = policy.act_sample(&mesh, beta, &mut rng).unwrap();

        let batch = encode(&mesh).unwrap();
        let mut tape = Tape::new();
        let vars = policy.bind(&mut tape);
        let eval = policy.forward(&mut tape, &vars, &batch, beta).unwrap();
        // The log-probability exercises the count heads plus both edge
        // heads along the sampled branch; the entropy term covers the
        // softmax-entropy path through the same logits.
        let lp = action_log_prob(&mut tape, &eval, &sampled).unwrap();
        let ent = action_entropy(&mut tape, &eval, &sampled).unwrap();
        let ent_scaled = tape.mul_scalar(ent, 0.5);
        let loss = tape.add(lp, ent_scaled).unwrap();

        finite_diff_check(&tape, loss, &vars.leaves(), &format!("policy seed {}", seed));
    }
}

#[test]
fn value_head_gradients_match_finite_differences() {
    const BUNDLE: usize = 3;
    const HIDDEN: usize = 4;
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = PolicyModel::new(&mut rng, BUNDLE, HIDDEN, 1, 2, 5).unwrap();
        let mesh = random_mesh(6, BUNDLE, seed + 300);
        let batch = encode(&mesh).unwrap();

        let mut tape = Tape::new();
        let vars = policy.bind(&mut tape);
        let eval = policy.forward(&mut tape, &vars, &batch, 0.4).unwrap();
        // (v̂ - c)² routes gradients through both value heads and the
        // shared processor.
        let c = tape.constant(Tensor::new(vec![1], vec![0.7]).unwrap());
        let diff = tape.sub(eval.value, c).unwrap();
        let loss = tape.square(diff);

        finite_diff_check(&tape, loss, &vars.leaves(), &format!("value seed {}", seed));
    }
}
