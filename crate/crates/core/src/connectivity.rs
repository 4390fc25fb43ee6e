//! Layer-wise weight normalization, total input-to-output connectivity, the
//! node-level connectivity sweeps, the log-barrier connectivity regularizer,
//! a brute-force path-enumeration oracle, and layer-collapse detection.
//!
//! Total connectivity is the sum over all input-to-output paths of the
//! product of transformed weights along the path. It is computed with one
//! modified forward pass: all-ones input, transformed weights, zero biases,
//! identity activations, then summing the output vector. The path-enumeration
//! oracle computes the same quantity explicitly and serves as ground truth.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::matrix::Mat;
use crate::network::{Activation, LayeredNetwork};

/// Floor applied inside the logarithm of the regularizer; keeps the value
/// finite when connectivity collapses to zero so training can recover.
pub const LOG_GUARD_EPSILON: f64 = 1e-12;

/// Guard on the brute-force oracle: refuse to enumerate more paths than this.
pub const ORACLE_PATH_GUARD: u128 = 10_000_000;

/// How edge weights enter the connectivity computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Mode {
    /// Per-layer L1 normalization of absolute weights; each layer's entries
    /// sum to 1 (or to 0 for a zero-mass layer).
    Normalized,
    /// Raw magnitudes: theta = |W|. No normalization.
    SignalFlow,
}

/// A stage of the connectivity pass: one edge set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageKind {
    /// Weight layer `k` (0-based).
    Dense(usize),
    /// Scaling layer by index into the network's scaling list.
    Scale(usize),
}

/// Transformed weights for every edge set of a network.
#[derive(Debug, Clone)]
pub struct NormalizedView {
    mode: Mode,
    sizes: Vec<usize>,
    theta: Vec<Mat>,
    scaling_theta: Vec<Vec<f64>>,
    scaling_positions: Vec<usize>,
    /// Edge sets whose total mass is zero (normalized mode flags these).
    zero_mass_stages: Vec<StageKind>,
}

impl NormalizedView {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Transformed weight matrix for weight layer `k`.
    pub fn theta(&self, k: usize) -> &Mat {
        &self.theta[k]
    }

    pub fn theta_layers(&self) -> &[Mat] {
        &self.theta
    }

    /// Transformed scaling factors by scaling index.
    pub fn scaling_theta(&self, idx: usize) -> &[f64] {
        &self.scaling_theta[idx]
    }

    pub fn scaling_count(&self) -> usize {
        self.scaling_theta.len()
    }

    /// True if any edge set carries zero total mass (a collapsed state).
    pub fn has_zero_mass_stage(&self) -> bool {
        !self.zero_mass_stages.is_empty()
    }

    pub fn zero_mass_stages(&self) -> &[StageKind] {
        &self.zero_mass_stages
    }

    /// Edge sets in forward order: each weight layer followed by its
    /// attached scaling layer, if any.
    pub fn stages(&self) -> Vec<StageKind> {
        let mut out = Vec::new();
        for k in 0..self.theta.len() {
            out.push(StageKind::Dense(k));
            if let Some(idx) = self.scaling_positions.iter().position(|&p| p == k) {
                out.push(StageKind::Scale(idx));
            }
        }
        out
    }
}

/// Per-layer L1 normalization (or raw magnitudes in signal-flow mode).
/// Scaling layers are treated as their own edge sets and transformed the
/// same way. A zero-mass edge set normalizes to all zeros and is flagged.
pub fn normalize(net: &LayeredNetwork, mode: Mode) -> NormalizedView {
    let mut zero_mass = Vec::new();
    let mut theta = Vec::with_capacity(net.weight_layer_count());
    for (k, w) in net.weights().iter().enumerate() {
        let t = match mode {
            Mode::SignalFlow => w.map(f64::abs),
            Mode::Normalized => {
                let mass = w.l1_norm();
                if mass == 0.0 {
                    zero_mass.push(StageKind::Dense(k));
                    Mat::zeros(w.rows(), w.cols())
                } else {
                    w.map(|x| x.abs() / mass)
                }
            }
        };
        theta.push(t);
    }
    let mut scaling_theta = Vec::new();
    let mut scaling_positions = Vec::new();
    for (idx, s) in net.scalings().iter().enumerate() {
        let t = match mode {
            Mode::SignalFlow => s.factors.iter().map(|x| x.abs()).collect(),
            Mode::Normalized => {
                let mass: f64 = s.factors.iter().map(|x| x.abs()).sum();
                if mass == 0.0 {
                    zero_mass.push(StageKind::Scale(idx));
                    vec![0.0; s.factors.len()]
                } else {
                    s.factors.iter().map(|x| x.abs() / mass).collect()
                }
            }
        };
        scaling_theta.push(t);
        scaling_positions.push(s.after_weight_layer);
    }
    NormalizedView {
        mode,
        sizes: net.sizes().to_vec(),
        theta,
        scaling_theta,
        scaling_positions,
        zero_mass_stages: zero_mass,
    }
}

/// Total input-to-output connectivity via a single forward sweep.
pub fn phi_total(view: &NormalizedView) -> f64 {
    let mut v = vec![1.0; view.sizes[0]];
    for stage in view.stages() {
        v = propagate(view, stage, &v);
    }
    v.iter().sum()
}

fn propagate(view: &NormalizedView, stage: StageKind, v: &[f64]) -> Vec<f64> {
    match stage {
        StageKind::Dense(k) => {
            let t = &view.theta[k];
            let mut out = vec![0.0; t.rows()];
            for (j, o) in out.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (i, vi) in v.iter().enumerate() {
                    acc += t.get(j, i) * vi;
                }
                *o = acc;
            }
            out
        }
        StageKind::Scale(idx) => view.scaling_theta[idx]
            .iter()
            .zip(v)
            .map(|(t, x)| t * x)
            .collect(),
    }
}

fn propagate_back(view: &NormalizedView, stage: StageKind, v: &[f64]) -> Vec<f64> {
    match stage {
        StageKind::Dense(k) => {
            let t = &view.theta[k];
            let mut out = vec![0.0; t.cols()];
            for (i, o) in out.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (j, vj) in v.iter().enumerate() {
                    acc += t.get(j, i) * vj;
                }
                *o = acc;
            }
            out
        }
        StageKind::Scale(idx) => view.scaling_theta[idx]
            .iter()
            .zip(v)
            .map(|(t, x)| t * x)
            .collect(),
    }
}

/// Explicit enumeration of every input-to-output path; ground truth for
/// [`phi_total`]. Refuses when the path count exceeds [`ORACLE_PATH_GUARD`].
pub fn phi_total_oracle(net: &LayeredNetwork, mode: Mode) -> Result<f64> {
    let view = normalize(net, mode);
    let mut paths: u128 = view.sizes[0] as u128;
    for s in &view.sizes[1..] {
        paths = paths.saturating_mul(*s as u128);
    }
    if paths > ORACLE_PATH_GUARD {
        return Err(Error::PathGuard {
            paths,
            guard: ORACLE_PATH_GUARD,
        });
    }
    let stages = view.stages();
    fn descend(view: &NormalizedView, stages: &[StageKind], node: usize, acc: f64) -> f64 {
        if acc == 0.0 {
            return 0.0;
        }
        let Some((stage, rest)) = stages.split_first() else {
            return acc;
        };
        match *stage {
            StageKind::Dense(k) => {
                let t = &view.theta[k];
                let mut total = 0.0;
                for j in 0..t.rows() {
                    total += descend(view, rest, j, acc * t.get(j, node));
                }
                total
            }
            StageKind::Scale(idx) => descend(view, rest, node, acc * view.scaling_theta[idx][node]),
        }
    }
    let mut total = 0.0;
    for i in 0..view.sizes[0] {
        total += descend(&view, &stages, i, 1.0);
    }
    Ok(total)
}

/// Input-side and output-side connectivity mass at every stage boundary.
#[derive(Debug, Clone)]
pub struct ConnectivityProfile {
    phi_total: f64,
    stages: Vec<StageKind>,
    /// `a_in[b]` = connectivity from the input layer to each node at
    /// boundary `b`; boundary 0 is the input layer itself.
    a_in: Vec<Vec<f64>>,
    /// `a_out[b]` = connectivity from each node at boundary `b` to the
    /// output layer; the last boundary is all ones.
    a_out: Vec<Vec<f64>>,
    /// Boundary holding each real layer's nodes.
    layer_boundary: Vec<usize>,
}

impl ConnectivityProfile {
    pub fn phi_total(&self) -> f64 {
        self.phi_total
    }

    pub fn stages(&self) -> &[StageKind] {
        &self.stages
    }

    /// Input-side connectivity of the nodes of real layer `k` (0-based).
    pub fn a_in_layer(&self, k: usize) -> &[f64] {
        &self.a_in[self.layer_boundary[k]]
    }

    /// Output-side connectivity of the nodes of real layer `k` (0-based).
    pub fn a_out_layer(&self, k: usize) -> &[f64] {
        &self.a_out[self.layer_boundary[k]]
    }

    /// a_in at the source side of stage `s`.
    pub fn a_in_before_stage(&self, s: usize) -> &[f64] {
        &self.a_in[s]
    }

    /// a_out at the target side of stage `s`.
    pub fn a_out_after_stage(&self, s: usize) -> &[f64] {
        &self.a_out[s + 1]
    }

    pub fn stage_index_of_weight_layer(&self, k: usize) -> usize {
        self.stages
            .iter()
            .position(|s| *s == StageKind::Dense(k))
            .expect("weight layer present")
    }

    pub fn stage_index_of_scaling(&self, idx: usize) -> usize {
        self.stages
            .iter()
            .position(|s| *s == StageKind::Scale(idx))
            .expect("scaling layer present")
    }

    /// Per-stage sum of a_in * theta * a_out over the stage's edges. Every
    /// input-to-output path crosses each stage exactly once, so each entry
    /// equals total connectivity.
    pub fn stage_flow_sums(&self, view: &NormalizedView) -> Vec<f64> {
        self.stages
            .iter()
            .enumerate()
            .map(|(s, stage)| {
                let ain = &self.a_in[s];
                let aout = &self.a_out[s + 1];
                match *stage {
                    StageKind::Dense(k) => {
                        let t = view.theta(k);
                        let mut acc = 0.0;
                        for j in 0..t.rows() {
                            for i in 0..t.cols() {
                                acc += ain[i] * t.get(j, i) * aout[j];
                            }
                        }
                        acc
                    }
                    StageKind::Scale(idx) => view
                        .scaling_theta(idx)
                        .iter()
                        .enumerate()
                        .map(|(c, t)| ain[c] * t * aout[c])
                        .sum(),
                }
            })
            .collect()
    }
}

/// Forward and backward linear sweeps over the transformed weights.
pub fn node_connectivity(view: &NormalizedView) -> ConnectivityProfile {
    let stages = view.stages();
    let mut a_in = Vec::with_capacity(stages.len() + 1);
    a_in.push(vec![1.0; view.sizes[0]]);
    for stage in &stages {
        let next = propagate(view, *stage, a_in.last().unwrap());
        a_in.push(next);
    }
    let out_width = *view.sizes.last().unwrap();
    let mut a_out = vec![Vec::new(); stages.len() + 1];
    a_out[stages.len()] = vec![1.0; out_width];
    for (s, stage) in stages.iter().enumerate().rev() {
        a_out[s] = propagate_back(view, *stage, &a_out[s + 1]);
    }
    let phi = a_in.last().unwrap().iter().sum();

    // A real layer k sits right after the dense stage that produces it,
    // before any attached scaling; the input layer is boundary 0 and the
    // output layer is the final boundary.
    let layer_count = view.sizes.len();
    let mut layer_boundary = vec![0usize; layer_count];
    for (s, stage) in stages.iter().enumerate() {
        if let StageKind::Dense(k) = stage {
            layer_boundary[k + 1] = s + 1;
        }
    }
    layer_boundary[layer_count - 1] = stages.len();

    ConnectivityProfile {
        phi_total: phi,
        stages,
        a_in,
        a_out,
        layer_boundary,
    }
}

/// Append the connectivity computation to an autodiff tape, reusing existing
/// parameter nodes so gradients flow back to the raw weights.
///
/// `inputs` is the connectivity input matrix, `sizes[0] x n_samples`; the
/// canonical choice is a single all-ones column. With several columns the
/// result is averaged over them. `bias_nodes`, when given, enter the pass as
/// |b| (the signal-flow treatment).
pub fn append_phi_total(
    tape: &mut Tape,
    weight_nodes: &[NodeId],
    scaling_nodes: &[(usize, NodeId)],
    bias_nodes: Option<&[NodeId]>,
    inputs: Mat,
    mode: Mode,
) -> NodeId {
    let n_samples = inputs.cols();
    let mut v = tape.constant(inputs);
    for (k, &w) in weight_nodes.iter().enumerate() {
        let theta = match mode {
            Mode::Normalized => {
                let a = tape.abs(w);
                let mass = tape.sum(a);
                tape.div_or_zero(a, mass)
            }
            Mode::SignalFlow => tape.abs(w),
        };
        v = tape.matmul(theta, v);
        if let Some(biases) = bias_nodes {
            let b = tape.abs(biases[k]);
            v = tape.add(v, b);
        }
        if let Some(&(_, d)) = scaling_nodes.iter().find(|(pos, _)| *pos == k) {
            let theta_d = match mode {
                Mode::Normalized => {
                    let a = tape.abs(d);
                    let mass = tape.sum(a);
                    tape.div_or_zero(a, mass)
                }
                Mode::SignalFlow => tape.abs(d),
            };
            v = tape.mul(v, theta_d);
        }
    }
    let total = tape.sum(v);
    if n_samples > 1 {
        tape.scale(total, 1.0 / n_samples as f64)
    } else {
        total
    }
}

/// Value and gradients of the log-barrier connectivity regularizer,
/// -log(max(phi, epsilon)), differentiated through the normalization down to
/// the raw weights and scaling factors.
#[derive(Debug, Clone)]
pub struct RegularizerEval {
    /// -log(max(phi, epsilon)); the training-time regularizer value.
    pub neg_log_phi: f64,
    /// The raw regularizer -phi.
    pub neg_phi: f64,
    pub phi: f64,
    /// True when phi fell to the log guard; a warning state, not an error.
    pub collapsed: bool,
    pub weight_grads: Vec<Mat>,
    pub scaling_grads: Vec<Vec<f64>>,
}

pub fn connect_regularizer(net: &LayeredNetwork) -> RegularizerEval {
    let mut tape = Tape::new();
    let weight_nodes: Vec<NodeId> = net
        .weights()
        .iter()
        .map(|w| tape.param(w.clone()))
        .collect();
    let scaling_nodes: Vec<(usize, NodeId)> = net
        .scalings()
        .iter()
        .map(|s| (s.after_weight_layer, tape.param(Mat::column(&s.factors))))
        .collect();
    let ones = Mat::filled(net.sizes()[0], 1, 1.0);
    let phi = append_phi_total(
        &mut tape,
        &weight_nodes,
        &scaling_nodes,
        None,
        ones,
        Mode::Normalized,
    );
    let log_phi = tape.log_floored(phi, LOG_GUARD_EPSILON);
    let neg_log = tape.scale(log_phi, -1.0);
    tape.set_exit(neg_log);
    let value = tape.forward().expect("well-formed regularizer tape");
    tape.backward().expect("forward ran");
    let phi_value = tape.value(phi).expect("forwarded").scalar_value();
    let weight_grads = weight_nodes
        .iter()
        .map(|&id| tape.grad(id).expect("param grad").clone())
        .collect();
    let scaling_grads = scaling_nodes
        .iter()
        .map(|&(_, id)| tape.grad(id).expect("param grad").data().to_vec())
        .collect();
    RegularizerEval {
        neg_log_phi: value,
        neg_phi: -phi_value,
        phi: phi_value,
        collapsed: phi_value <= LOG_GUARD_EPSILON,
        weight_grads,
        scaling_grads,
    }
}

/// Gradient of total connectivity with respect to the transformed weights
/// themselves (theta as independent leaves). Returns one matrix per weight
/// layer and one vector per scaling layer.
pub fn phi_grad_wrt_theta(view: &NormalizedView) -> (Vec<Mat>, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let theta_nodes: Vec<NodeId> = view
        .theta_layers()
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect();
    let scaling_nodes: Vec<NodeId> = (0..view.scaling_count())
        .map(|idx| tape.param(Mat::column(view.scaling_theta(idx))))
        .collect();
    let mut v = tape.constant(Mat::filled(view.sizes()[0], 1, 1.0));
    for (k, &t) in theta_nodes.iter().enumerate() {
        v = tape.matmul(t, v);
        if let Some(idx) = view.scaling_positions.iter().position(|&p| p == k) {
            v = tape.mul(v, scaling_nodes[idx]);
        }
    }
    let phi = tape.sum(v);
    tape.set_exit(phi);
    tape.forward().expect("well-formed theta tape");
    tape.backward().expect("forward ran");
    let w = theta_nodes
        .iter()
        .map(|&id| tape.grad(id).expect("param grad").clone())
        .collect();
    let s = scaling_nodes
        .iter()
        .map(|&id| tape.grad(id).expect("param grad").data().to_vec())
        .collect();
    (w, s)
}

/// Mass and survivor counts per layer, plus the collapse verdict.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CollapseReport {
    pub collapsed: bool,
    pub phi_total: f64,
    pub layers: Vec<LayerMass>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct LayerMass {
    /// Weight layer index, or the scaling slot it sits after.
    pub stage: String,
    pub l1_mass: f64,
    pub surviving_edges: usize,
}

/// True iff no input-to-output path with positive mass remains.
pub fn detect_collapse(net: &LayeredNetwork) -> CollapseReport {
    let view = normalize(net, Mode::Normalized);
    let phi = phi_total(&view);
    let mut layers = Vec::new();
    for (k, w) in net.weights().iter().enumerate() {
        layers.push(LayerMass {
            stage: format!("weights[{k}]"),
            l1_mass: w.l1_norm(),
            surviving_edges: w.count_nonzero(),
        });
    }
    for s in net.scalings() {
        layers.push(LayerMass {
            stage: format!("scaling after weights[{}]", s.after_weight_layer),
            l1_mass: s.factors.iter().map(|x| x.abs()).sum(),
            surviving_edges: s.factors.iter().filter(|&&x| x != 0.0).count(),
        });
    }
    CollapseReport {
        collapsed: phi == 0.0,
        phi_total: phi,
        layers,
    }
}

/// A network carrying all its mass on one input-to-output path, with the
/// first and last layers fanned out to every input and output node. Its
/// normalized total connectivity is exactly 1 and its support size is
/// |V_1| + |V_K| + K - 3 for K > 2 (or |V_1| * |V_K| when K = 2).
pub fn max_connectivity_network(sizes: &[usize]) -> Result<LayeredNetwork> {
    let k = sizes.len();
    if k < 2 {
        return Err(Error::NetworkShape("need at least 2 layers".into()));
    }
    let mut weights = Vec::with_capacity(k - 1);
    for layer in 0..k - 1 {
        let (out, inp) = (sizes[layer + 1], sizes[layer]);
        let mut w = Mat::zeros(out, inp);
        if layer == 0 {
            // every input feeds node 0 of the second layer
            for c in 0..inp {
                w.set(0, c, 1.0);
            }
        } else if layer == k - 2 {
            // the chosen node feeds every output
            for r in 0..out {
                w.set(r, 0, 1.0);
            }
        } else {
            w.set(0, 0, 1.0);
        }
        weights.push(w);
    }
    let biases = sizes[1..].iter().map(|&s| vec![0.0; s]).collect();
    let activations = vec![Activation::Identity; k - 1];
    LayeredNetwork::new(sizes.to_vec(), weights, biases, activations)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain_net(weights: &[f64]) -> LayeredNetwork {
        let sizes = vec![1; weights.len() + 1];
        let mats = weights.iter().map(|&w| Mat::scalar(w)).collect();
        let biases = vec![vec![0.0]; weights.len()];
        let acts = vec![Activation::Identity; weights.len()];
        LayeredNetwork::new(sizes, mats, biases, acts).unwrap()
    }

    fn uniform_net(sizes: &[usize], w: f64) -> LayeredNetwork {
        let mats: Vec<Mat> = (0..sizes.len() - 1)
            .map(|k| Mat::filled(sizes[k + 1], sizes[k], w))
            .collect();
        let biases = sizes[1..].iter().map(|&s| vec![0.0; s]).collect();
        let acts = vec![Activation::Identity; sizes.len() - 1];
        LayeredNetwork::new(sizes.to_vec(), mats, biases, acts).unwrap()
    }

    #[test]
    fn normalize_examples() {
        // weights [1, -3] in one layer -> theta [0.25, 0.75]
        let net = LayeredNetwork::new(
            vec![2, 1],
            vec![Mat::from_rows(&[vec![1.0, -3.0]])],
            vec![vec![0.0]],
            vec![Activation::Identity],
        )
        .unwrap();
        let view = normalize(&net, Mode::Normalized);
        assert_eq!(view.theta(0).data(), &[0.25, 0.75]);

        // single nonzero edge normalizes to 1
        let net = chain_net(&[-7.3]);
        let view = normalize(&net, Mode::Normalized);
        assert_eq!(view.theta(0).data(), &[1.0]);

        // all-zero layer: zeros plus the flag
        let net = chain_net(&[0.0]);
        let view = normalize(&net, Mode::Normalized);
        assert_eq!(view.theta(0).data(), &[0.0]);
        assert!(view.has_zero_mass_stage());
    }

    #[test]
    fn signal_flow_is_exact_magnitude() {
        let net = LayeredNetwork::new(
            vec![2, 1],
            vec![Mat::from_rows(&[vec![1.5, -0.25]])],
            vec![vec![0.0]],
            vec![Activation::Identity],
        )
        .unwrap();
        let view = normalize(&net, Mode::SignalFlow);
        assert_eq!(view.theta(0).data(), &[1.5, 0.25]);
    }

    #[test]
    fn phi_total_examples() {
        // a full single path has connectivity exactly 1
        let net = max_connectivity_network(&[3, 2, 2, 1]).unwrap();
        let view = normalize(&net, Mode::Normalized);
        assert!((phi_total(&view) - 1.0).abs() < 1e-12);

        // fully connected 2-2-2 with equal weights: 1/|V_2| = 0.5
        let net = uniform_net(&[2, 2, 2], 0.7);
        let view = normalize(&net, Mode::Normalized);
        assert!((phi_total(&view) - 0.5).abs() < 1e-12);

        // an all-zero layer severs every path
        let mut net = uniform_net(&[2, 2, 2], 0.7);
        for x in net.params_mut().weights[1].data_mut() {
            *x = 0.0;
        }
        let view = normalize(&net, Mode::Normalized);
        assert_eq!(phi_total(&view), 0.0);
    }

    #[test]
    fn oracle_examples() {
        let net = chain_net(&[0.4]);
        assert!((phi_total_oracle(&net, Mode::Normalized).unwrap() - 1.0).abs() < 1e-15);

        let net = chain_net(&[2.0, -3.0]);
        // each single-edge layer normalizes to 1
        assert!((phi_total_oracle(&net, Mode::Normalized).unwrap() - 1.0).abs() < 1e-15);
        // signal-flow keeps magnitudes: 2 * 3 = 6
        assert!((phi_total_oracle(&net, Mode::SignalFlow).unwrap() - 6.0).abs() < 1e-15);

        // 2-2-2 uniform: 8 paths at 1/16 each
        let net = uniform_net(&[2, 2, 2], 1.0);
        assert!((phi_total_oracle(&net, Mode::Normalized).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn oracle_guard_refuses_huge_nets() {
        let net = uniform_net(&[40, 40, 40, 40, 40], 0.1);
        match phi_total_oracle(&net, Mode::Normalized) {
            Err(Error::PathGuard { .. }) => {}
            other => panic!("expected guard, got {other:?}"),
        }
    }

    #[test]
    fn node_connectivity_examples() {
        // chain 1-1-1: everything is 1
        let net = chain_net(&[0.5, 0.5]);
        let view = normalize(&net, Mode::Normalized);
        let p = node_connectivity(&view);
        for k in 0..3 {
            assert_eq!(p.a_in_layer(k), &[1.0]);
            assert_eq!(p.a_out_layer(k), &[1.0]);
        }
        assert!((p.phi_total() - 1.0).abs() < 1e-15);

        // 2-2-2 uniform: middle layer carries 0.5 on each side
        let net = uniform_net(&[2, 2, 2], 1.0);
        let view = normalize(&net, Mode::Normalized);
        let p = node_connectivity(&view);
        assert_eq!(p.a_in_layer(1), &[0.5, 0.5]);
        assert_eq!(p.a_out_layer(1), &[0.5, 0.5]);

        // severing a hidden node's inputs zeroes its a_in
        let mut net = uniform_net(&[2, 2, 2], 1.0);
        net.params_mut().weights[0].set(1, 0, 0.0);
        net.params_mut().weights[0].set(1, 1, 0.0);
        let view = normalize(&net, Mode::Normalized);
        let p = node_connectivity(&view);
        assert_eq!(p.a_in_layer(1)[1], 0.0);
        assert!(p.a_in_layer(1)[0] > 0.0);
    }

    #[test]
    fn regularizer_examples() {
        let net = max_connectivity_network(&[2, 2, 1]).unwrap();
        let eval = connect_regularizer(&net);
        assert!((eval.phi - 1.0).abs() < 1e-12);
        assert!(eval.neg_log_phi.abs() < 1e-12);
        assert!(!eval.collapsed);

        let net = uniform_net(&[2, 2, 2], 1.0);
        let eval = connect_regularizer(&net);
        assert!((eval.neg_log_phi - 0.5f64.ln().abs()).abs() < 1e-12);
        assert!((eval.neg_phi + 0.5).abs() < 1e-12);
    }

    #[test]
    fn regularizer_collapse_is_flagged_not_fatal() {
        let net = chain_net(&[0.0, 1.0]);
        let eval = connect_regularizer(&net);
        assert!(eval.collapsed);
        assert!((eval.neg_log_phi - (-LOG_GUARD_EPSILON.ln())).abs() < 1e-9);
        assert!(eval
            .weight_grads
            .iter()
            .all(|g| g.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn detect_collapse_examples() {
        let net = LayeredNetwork::init_random(&[4, 3, 2], 5).unwrap();
        assert!(!detect_collapse(&net).collapsed);

        let mut dead = net.clone();
        for x in dead.params_mut().weights[1].data_mut() {
            *x = 0.0;
        }
        let report = detect_collapse(&dead);
        assert!(report.collapsed);
        assert_eq!(report.layers[1].l1_mass, 0.0);
        assert_eq!(report.layers[1].surviving_edges, 0);

        let single = max_connectivity_network(&[6, 5, 5, 5, 1]).unwrap();
        assert!(!detect_collapse(&single).collapsed);
    }

    #[test]
    fn all_ones_scaling_is_invisible_to_signal_flow() {
        // magnitude-mode connectivity ignores unit scaling entirely; in
        // normalized mode the scaling edge set is normalized like any other
        // and a width-n unit scaling contributes a 1/n factor per path
        let mut net = LayeredNetwork::init_random(&[3, 4, 2], 14).unwrap();
        let plain = phi_total(&normalize(&net, Mode::SignalFlow));
        net.add_scaling(0).unwrap();
        let scaled = phi_total(&normalize(&net, Mode::SignalFlow));
        assert!((plain - scaled).abs() < 1e-12);

        let normalized = phi_total(&normalize(&net, Mode::Normalized));
        let unscaled = LayeredNetwork::init_random(&[3, 4, 2], 14).unwrap();
        let base = phi_total(&normalize(&unscaled, Mode::Normalized));
        assert!((normalized - base / 4.0).abs() < 1e-12);
    }

    #[test]
    fn stage_flow_sums_match_phi() {
        let mut net = LayeredNetwork::init_random(&[3, 4, 4, 2], 21).unwrap();
        net.add_scaling(1).unwrap();
        net.params_mut().scalings[0].factors = vec![0.3, 1.2, 0.1, 0.9];
        let view = normalize(&net, Mode::Normalized);
        let p = node_connectivity(&view);
        for flow in p.stage_flow_sums(&view) {
            assert!((flow - p.phi_total()).abs() < 1e-12);
        }
    }

    #[test]
    fn phi_grad_matches_ain_aout_product() {
        let net = LayeredNetwork::init_random(&[3, 4, 2], 33).unwrap();
        let view = normalize(&net, Mode::Normalized);
        let profile = node_connectivity(&view);
        let (grads, _) = phi_grad_wrt_theta(&view);
        for (k, g) in grads.iter().enumerate() {
            let s = profile.stage_index_of_weight_layer(k);
            let ain = profile.a_in_before_stage(s);
            let aout = profile.a_out_after_stage(s);
            for j in 0..g.rows() {
                for i in 0..g.cols() {
                    assert!((g.get(j, i) - ain[i] * aout[j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn max_connectivity_support_bound() {
        for sizes in [vec![2, 3, 1], vec![6, 5, 5, 5, 1], vec![4, 6, 6, 6, 3]] {
            let k = sizes.len();
            let net = max_connectivity_network(&sizes).unwrap();
            let view = normalize(&net, Mode::Normalized);
            assert!((phi_total(&view) - 1.0).abs() < 1e-12);
            let support: usize = net.weights().iter().map(|w| w.count_nonzero()).sum();
            assert!(support <= sizes[0] + sizes[k - 1] + k - 3);
        }
    }
}
