//! Tape builders shared by training and loss-aware scoring: network
//! parameters as leaves, the prediction pass, and the binary cross-entropy
//! loss composed from tape primitives.

use crate::autodiff::{NodeId, Tape};
use crate::connectivity::{append_phi_total, Mode, LOG_GUARD_EPSILON};
use crate::matrix::Mat;
use crate::network::{Activation, LayeredNetwork};

/// Probability floor inside the BCE logarithms. Mirrors the usual clamp in
/// BCE implementations: a saturated sigmoid would otherwise produce
/// 0 * ln(0) = NaN on perfectly confident predictions.
pub const BCE_PROB_FLOOR: f64 = 1e-100;

/// Parameter leaves for a network registered on a tape.
pub struct NetParams {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
    /// (after_weight_layer, node) per scaling layer, in network order.
    pub scalings: Vec<(usize, NodeId)>,
}

pub fn register_params(tape: &mut Tape, net: &LayeredNetwork) -> NetParams {
    let weights = net
        .weights()
        .iter()
        .map(|w| tape.param(w.clone()))
        .collect();
    let biases = net
        .biases()
        .iter()
        .map(|b| tape.param(Mat::column(b)))
        .collect();
    let scalings = net
        .scalings()
        .iter()
        .map(|s| (s.after_weight_layer, tape.param(Mat::column(&s.factors))))
        .collect();
    NetParams {
        weights,
        biases,
        scalings,
    }
}

/// Forward pass on the tape. `x` is laid out features x batch; the returned
/// node holds the output activations, `sizes[K-1] x batch`.
pub fn append_prediction(
    tape: &mut Tape,
    net: &LayeredNetwork,
    params: &NetParams,
    x: Mat,
) -> NodeId {
    let mut act = tape.constant(x);
    for k in 0..net.weight_layer_count() {
        let z = tape.matmul(params.weights[k], act);
        let z = tape.add(z, params.biases[k]);
        act = match net.activations()[k] {
            Activation::Relu => tape.relu(z),
            Activation::Sigmoid => tape.sigmoid(z),
            Activation::Identity => z,
        };
        if let Some(&(_, d)) = params.scalings.iter().find(|(pos, _)| *pos == k) {
            act = tape.mul(act, d);
        }
    }
    act
}

/// Mean binary cross-entropy between predicted probabilities (1 x batch) and
/// 0/1 targets: -(1/M) sum[y ln p + (1-y) ln(1-p)].
pub fn append_bce(tape: &mut Tape, probs: NodeId, targets: &[f64]) -> NodeId {
    let m = targets.len();
    let y = tape.constant(Mat::from_vec(1, m, targets.to_vec()));
    let ones = tape.constant(Mat::filled(1, m, 1.0));
    let ln_p = tape.log_floored(probs, BCE_PROB_FLOOR);
    let neg_p = tape.scale(probs, -1.0);
    let one_minus_p = tape.add(ones, neg_p);
    let ln_1mp = tape.log_floored(one_minus_p, BCE_PROB_FLOOR);
    let neg_y = tape.scale(y, -1.0);
    let one_minus_y = tape.add(ones, neg_y);
    let pos_term = tape.mul(y, ln_p);
    let neg_term = tape.mul(one_minus_y, ln_1mp);
    let both = tape.add(pos_term, neg_term);
    let total = tape.sum(both);
    tape.scale(total, -1.0 / m as f64)
}

/// The combined regularized objective on one tape:
/// BCE + l1 * sum|W| - connect * log(phi) + l2 * sum W^2.
/// Terms with a zero coefficient are skipped entirely.
pub struct ObjectiveTape {
    pub tape: Tape,
    pub params: NetParams,
    pub loss: NodeId,
    pub objective: NodeId,
    /// Total-connectivity node, present when the connectivity term is active.
    pub phi: Option<NodeId>,
}

pub fn build_objective(
    net: &LayeredNetwork,
    x: Mat,
    targets: &[f64],
    l1: f64,
    connect: f64,
    l2: f64,
) -> ObjectiveTape {
    let mut tape = Tape::new();
    let params = register_params(&mut tape, net);
    let probs = append_prediction(&mut tape, net, &params, x);
    let loss = append_bce(&mut tape, probs, targets);
    let mut objective = loss;
    if l1 > 0.0 {
        let mut acc: Option<NodeId> = None;
        for &w in &params.weights {
            let a = tape.abs(w);
            let s = tape.sum(a);
            acc = Some(match acc {
                None => s,
                Some(prev) => tape.add(prev, s),
            });
        }
        let term = tape.scale(acc.expect("at least one weight layer"), l1);
        objective = tape.add(objective, term);
    }
    let mut phi = None;
    if connect > 0.0 {
        let ones = Mat::filled(net.sizes()[0], 1, 1.0);
        let p = append_phi_total(
            &mut tape,
            &params.weights,
            &params.scalings,
            None,
            ones,
            Mode::Normalized,
        );
        let log_phi = tape.log_floored(p, LOG_GUARD_EPSILON);
        let term = tape.scale(log_phi, -connect);
        objective = tape.add(objective, term);
        phi = Some(p);
    }
    if l2 > 0.0 {
        let mut acc: Option<NodeId> = None;
        for &w in &params.weights {
            let sq = tape.mul(w, w);
            let s = tape.sum(sq);
            acc = Some(match acc {
                None => s,
                Some(prev) => tape.add(prev, s),
            });
        }
        let term = tape.scale(acc.expect("at least one weight layer"), l2);
        objective = tape.add(objective, term);
    }
    tape.set_exit(objective);
    ObjectiveTape {
        tape,
        params,
        loss,
        objective,
        phi,
    }
}
