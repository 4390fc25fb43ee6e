//! Property suites checking the method's structural claims against
//! independent oracles: path enumeration vs the forward-pass connectivity,
//! autodiff vs central finite differences, saliency conservation laws, and
//! the support/convergence behavior of the connectivity objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::connectivity::{
    connect_regularizer, max_connectivity_network, node_connectivity, normalize,
    phi_grad_wrt_theta, phi_total, phi_total_oracle, Mode,
};
use crate::data::generate_toy;
use crate::error::{Error, Result};
use crate::matrix::Mat;
use crate::network::LayeredNetwork;
use crate::objective::build_objective;
use crate::pruning::{score_channels, score_synflow, ParamKey};
use crate::training::evaluate;

#[derive(Debug, Clone, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub passed: bool,
    pub cases: Vec<CaseResult>,
}

impl SuiteReport {
    fn new(suite: &str, cases: Vec<CaseResult>) -> Self {
        SuiteReport {
            suite: suite.into(),
            passed: cases.iter().all(|c| c.passed),
            cases,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable report")
    }
}

pub const SUITES: &[&str] = &["oracle", "gradients", "conservation", "theorem-convergence"];

pub fn run_suite(name: &str) -> Result<SuiteReport> {
    match name {
        "oracle" => Ok(suite_oracle()),
        "gradients" => Ok(suite_gradients()),
        "conservation" => Ok(suite_conservation()),
        "theorem-convergence" => Ok(suite_theorem_convergence()),
        other => Err(Error::Config(format!(
            "unknown suite {other:?}; available: {SUITES:?}"
        ))),
    }
}

/// Random layered net with 3..=5 layers and widths 1..=6; weights may be
/// rescaled per layer to exercise scale invariance.
fn random_small_net(rng: &mut ChaCha8Rng) -> LayeredNetwork {
    let k = rng.random_range(3..=5usize);
    let sizes: Vec<usize> = (0..k).map(|_| rng.random_range(1..=6usize)).collect();
    let seed = rng.random_range(0..u64::MAX / 2);
    LayeredNetwork::init_random(&sizes, seed).unwrap()
}

/// Forward-pass connectivity vs explicit path enumeration on 100 random
/// nets, both weight transforms; max deviation must stay below 1e-10.
pub fn suite_oracle() -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let mut cases = Vec::new();
    let mut max_dev = 0.0f64;
    let mut checked = 0usize;
    for i in 0..100 {
        let net = random_small_net(&mut rng);
        for mode in [Mode::Normalized, Mode::SignalFlow] {
            let fast = phi_total(&normalize(&net, mode));
            let slow = phi_total_oracle(&net, mode).expect("small nets stay under the guard");
            let dev = (fast - slow).abs();
            max_dev = max_dev.max(dev);
            checked += 1;
            if dev >= 1e-10 {
                cases.push(CaseResult {
                    name: format!("oracle/net{i}/{mode:?}"),
                    passed: false,
                    detail: format!("deviation {dev:.3e} (fast {fast:.12}, oracle {slow:.12})"),
                });
            }
        }
    }
    cases.push(CaseResult {
        name: "oracle/max-deviation".into(),
        passed: max_dev < 1e-10,
        detail: format!("{checked} comparisons, max |forward - enumeration| = {max_dev:.3e}"),
    });
    SuiteReport::new("oracle", cases)
}

/// Central finite differences of a scalar function of the network, taken
/// over every weight and bias entry. Step h = 1e-5.
fn finite_diff(
    net: &LayeredNetwork,
    f: &dyn Fn(&LayeredNetwork) -> f64,
    h: f64,
) -> (Vec<Mat>, Vec<Vec<f64>>) {
    let mut wgrads = Vec::new();
    for k in 0..net.weight_layer_count() {
        let (rows, cols) = net.weights()[k].shape();
        let mut g = Mat::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                let base = net.weights()[k].get(r, c);
                let mut plus = net.clone();
                plus.params_mut().weights[k].set(r, c, base + h);
                let mut minus = net.clone();
                minus.params_mut().weights[k].set(r, c, base - h);
                g.set(r, c, (f(&plus) - f(&minus)) / (2.0 * h));
            }
        }
        wgrads.push(g);
    }
    let mut bgrads = Vec::new();
    for k in 0..net.weight_layer_count() {
        let n = net.biases()[k].len();
        let mut g = vec![0.0; n];
        for (i, gi) in g.iter_mut().enumerate() {
            let base = net.biases()[k][i];
            let mut plus = net.clone();
            plus.params_mut().biases[k][i] = base + h;
            let mut minus = net.clone();
            minus.params_mut().biases[k][i] = base - h;
            *gi = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        bgrads.push(g);
    }
    (wgrads, bgrads)
}

fn coord_ok(got: f64, want: f64) -> bool {
    let abs = (got - want).abs();
    abs < 1e-8 || abs / want.abs().max(got.abs()) < 1e-4
}

fn worst_coord(got: &Mat, want: &Mat) -> (f64, bool) {
    let mut worst = 0.0f64;
    let mut ok = true;
    for (g, w) in got.data().iter().zip(want.data()) {
        let abs = (g - w).abs();
        let rel = abs / w.abs().max(g.abs()).max(1e-300);
        worst = worst.max(abs.min(rel));
        if !coord_ok(*g, *w) {
            ok = false;
        }
    }
    (worst, ok)
}

/// A generic point for the finite-difference oracle: weights at least
/// `margin` away from the |.| kink, biases drawn nonzero so no ReLU
/// pre-activation can sit exactly at its kink (dead upstream units plus a
/// zero bias would otherwise pin z = 0, where central differences and the
/// chosen subgradient legitimately disagree).
fn nudge_to_generic_point(net: &mut LayeredNetwork, margin: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pm = net.params_mut();
    for w in pm.weights.iter_mut() {
        for x in w.data_mut() {
            if x.abs() < margin {
                *x = if *x < 0.0 { -margin } else { margin };
            }
        }
    }
    for b in pm.biases.iter_mut() {
        for x in b.iter_mut() {
            let v: f64 = rng.random_range(0.05..0.4);
            *x = if rng.random_range(0..2u8) == 0 { -v } else { v };
        }
    }
}

/// Plain (tape-free) BCE of the network on a probe batch; the finite
/// difference side of the gradient checks.
fn plain_bce(net: &LayeredNetwork, x_rows: &Mat, y: &[f64]) -> f64 {
    evaluate(net, x_rows, y)
        .expect("probe batch fits the net")
        .0
}

fn plain_neg_log_phi(net: &LayeredNetwork) -> f64 {
    -phi_total(&normalize(net, Mode::Normalized))
        .max(crate::connectivity::LOG_GUARD_EPSILON)
        .ln()
}

fn plain_objective(
    net: &LayeredNetwork,
    x_rows: &Mat,
    y: &[f64],
    l1: f64,
    l2: f64,
    lc: f64,
) -> f64 {
    let mut total = plain_bce(net, x_rows, y);
    if l1 > 0.0 {
        total += l1 * net.weights().iter().map(|w| w.l1_norm()).sum::<f64>();
    }
    if lc > 0.0 {
        total += lc * plain_neg_log_phi(net);
    }
    if l2 > 0.0 {
        total += l2
            * net
                .weights()
                .iter()
                .map(|w| w.data().iter().map(|x| x * x).sum::<f64>())
                .sum::<f64>();
    }
    total
}

/// A probe batch whose ReLU pre-activations stay clear of zero for this net,
/// so the finite-difference oracle does not straddle an activation kink.
fn clean_probe_batch(net: &LayeredNetwork, base_seed: u64, n: usize) -> (Mat, Vec<f64>) {
    'outer: for attempt in 0..50u64 {
        let data = generate_toy(n, 1, base_seed.wrapping_add(attempt * 7919));
        // check pre-activation margins with a manual pass
        let mut act = data.train_x.clone();
        for (k, w) in net.weights().iter().enumerate() {
            let mut z = act.matmul_nt(w);
            for r in 0..z.rows() {
                for c in 0..z.cols() {
                    z.set(r, c, z.get(r, c) + net.biases()[k][c]);
                }
            }
            if z.data().iter().any(|v| v.abs() < 1e-3) {
                continue 'outer;
            }
            act = match net.activations()[k] {
                crate::network::Activation::Relu => z.map(|v| if v > 0.0 { v } else { 0.0 }),
                crate::network::Activation::Sigmoid => z.map(crate::autodiff::sigmoid_scalar),
                crate::network::Activation::Identity => z,
            };
        }
        return (data.train_x, data.train_y);
    }
    // margins are a test-quality nicety; fall back to the base draw
    let data = generate_toy(n, 1, base_seed);
    (data.train_x, data.train_y)
}

fn rows_to_cols(x: &Mat) -> Mat {
    let mut out = Mat::zeros(x.cols(), x.rows());
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            out.set(c, r, x.get(r, c));
        }
    }
    out
}

/// Autodiff gradients of the BCE loss, the log-barrier regularizer, and the
/// combined objective vs central finite differences (h = 1e-5) on 20 random
/// 6-5-5-5-1 networks.
pub fn suite_gradients() -> SuiteReport {
    let h = 1e-5;
    let (l1, lc, l2) = (1e-3, 0.1, 5e-4);
    let mut cases = Vec::new();
    for trial in 0..20u64 {
        let mut net = LayeredNetwork::init_random(&[6, 5, 5, 5, 1], 1000 + trial).unwrap();
        nudge_to_generic_point(&mut net, 1e-3, 9000 + trial);
        let (x_rows, y) = clean_probe_batch(&net, 5000 + trial, 16);
        let x_cols = rows_to_cols(&x_rows);

        // (a) plain BCE
        let mut obj = build_objective(&net, x_cols.clone(), &y, 0.0, 0.0, 0.0);
        obj.tape.forward().expect("objective forward");
        obj.tape.backward().expect("objective backward");
        let (fd_w, fd_b) = finite_diff(&net, &|n| plain_bce(n, &x_rows, &y), h);
        let mut worst = 0.0f64;
        let mut ok = true;
        for k in 0..net.weight_layer_count() {
            let got = obj.tape.grad(obj.params.weights[k]).unwrap();
            let (w, o) = worst_coord(got, &fd_w[k]);
            worst = worst.max(w);
            ok &= o;
            let got_b = obj.tape.grad(obj.params.biases[k]).unwrap();
            let (w, o) = worst_coord(got_b, &Mat::column(&fd_b[k]));
            worst = worst.max(w);
            ok &= o;
        }
        cases.push(CaseResult {
            name: format!("gradients/bce/net{trial}"),
            passed: ok,
            detail: format!("worst min(abs,rel) error {worst:.3e}"),
        });

        // (b) the log-barrier regularizer alone
        let eval = connect_regularizer(&net);
        let (fd_w, _) = finite_diff(&net, &|n| plain_neg_log_phi(n), h);
        let mut worst = 0.0f64;
        let mut ok = true;
        for k in 0..net.weight_layer_count() {
            let (w, o) = worst_coord(&eval.weight_grads[k], &fd_w[k]);
            worst = worst.max(w);
            ok &= o;
        }
        cases.push(CaseResult {
            name: format!("gradients/neg-log-phi/net{trial}"),
            passed: ok,
            detail: format!("worst min(abs,rel) error {worst:.3e}"),
        });

        // (c) the combined objective with the standard barrier coefficients
        let mut obj = build_objective(&net, x_cols, &y, l1, lc, l2);
        obj.tape.forward().expect("objective forward");
        obj.tape.backward().expect("objective backward");
        let (fd_w, fd_b) = finite_diff(&net, &|n| plain_objective(n, &x_rows, &y, l1, l2, lc), h);
        let mut worst = 0.0f64;
        let mut ok = true;
        for k in 0..net.weight_layer_count() {
            let got = obj.tape.grad(obj.params.weights[k]).unwrap();
            let (w, o) = worst_coord(got, &fd_w[k]);
            worst = worst.max(w);
            ok &= o;
            let got_b = obj.tape.grad(obj.params.biases[k]).unwrap();
            let (w, o) = worst_coord(got_b, &Mat::column(&fd_b[k]));
            worst = worst.max(w);
            ok &= o;
        }
        cases.push(CaseResult {
            name: format!("gradients/combined/net{trial}"),
            passed: ok,
            detail: format!("worst min(abs,rel) error {worst:.3e}"),
        });
    }
    SuiteReport::new("gradients", cases)
}

/// Saliency identity and conservation: per-edge scores equal the product
/// rule share of total connectivity, layer sums equal total connectivity,
/// and per-channel scores conserve it too.
pub fn suite_conservation() -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
    let mut cases = Vec::new();

    let mut worst_identity = 0.0f64;
    let mut worst_layer_sum = 0.0f64;
    for _ in 0..50 {
        let net = random_small_net(&mut rng);
        let view = normalize(&net, Mode::Normalized);
        let profile = node_connectivity(&view);
        let phi = profile.phi_total();
        let (grads, _) = phi_grad_wrt_theta(&view);
        let table = score_synflow(&net);
        let mut layer_sums = vec![0.0f64; net.weight_layer_count()];
        for (key, s) in &table.entries {
            let ParamKey::Weight { layer, row, col } = key else {
                continue;
            };
            let via_grad = grads[*layer].get(*row, *col) * view.theta(*layer).get(*row, *col);
            worst_identity = worst_identity.max((s - via_grad).abs());
            layer_sums[*layer] += s;
        }
        for sum in layer_sums {
            worst_layer_sum = worst_layer_sum.max((sum - phi).abs());
        }
    }
    cases.push(CaseResult {
        name: "conservation/saliency-identity".into(),
        passed: worst_identity < 1e-8,
        detail: format!("max |a_in*theta*a_out - dphi/dtheta * theta| = {worst_identity:.3e}"),
    });
    cases.push(CaseResult {
        name: "conservation/saliency-layer-sums".into(),
        passed: worst_layer_sum < 1e-8,
        detail: format!("max |layer sum - phi| = {worst_layer_sum:.3e}"),
    });

    let mut worst_channel = 0.0f64;
    for _ in 0..50 {
        let mut net = random_small_net(&mut rng);
        // attach scalings with non-unit factors to every eligible slot
        for k in 0..net.weight_layer_count() {
            net.add_scaling(k).unwrap();
        }
        for s in net.params_mut().scalings.iter_mut() {
            for f in s.factors.iter_mut() {
                *f = rng.random_range(0.05..2.0);
            }
        }
        let view = normalize(&net, Mode::Normalized);
        let phi = phi_total(&view);
        let table = score_channels(&net).expect("scalings attached");
        let mut sums: std::collections::BTreeMap<usize, f64> = Default::default();
        for (key, s) in &table.entries {
            let ParamKey::Scaling { layer, .. } = key else {
                continue;
            };
            *sums.entry(*layer).or_default() += s;
        }
        for (_, sum) in sums {
            worst_channel = worst_channel.max((sum - phi).abs());
        }
    }
    cases.push(CaseResult {
        name: "conservation/channel-sums".into(),
        passed: worst_channel < 1e-8,
        detail: format!("max |channel sum - phi| = {worst_channel:.3e}"),
    });
    SuiteReport::new("conservation", cases)
}

/// Descent uses a cosine-annealed step: through the |.| subgradient the
/// losing weights see constant-magnitude gradients near zero, so a fixed
/// step leaves them oscillating with amplitude proportional to the step. A
/// diminishing step is the standard subgradient remedy and lets them settle.
pub const DESCENT_STEP_MAX: f64 = 0.1;
pub const DESCENT_ANNEAL_STEPS: usize = 4_000;
pub const DESCENT_MAX_STEPS: usize = 5_000;

fn descent_step(t: usize) -> f64 {
    if t >= DESCENT_ANNEAL_STEPS {
        return 0.0;
    }
    DESCENT_STEP_MAX
        * 0.5
        * (1.0 + (std::f64::consts::PI * t as f64 / DESCENT_ANNEAL_STEPS as f64).cos())
}

/// Outcome of one descent run on -log(phi).
pub struct DescentOutcome {
    pub reached: bool,
    pub steps: usize,
    pub phi: f64,
    /// Per middle weight layer: entries holding at least 1e-3 of layer mass.
    pub heavy_middle_weights: Vec<usize>,
}

/// Plain gradient descent on -log(phi) until phi >= target.
pub fn descend_connectivity(net: &LayeredNetwork, target: f64, max_steps: usize) -> DescentOutcome {
    let mut net = net.clone();
    let mut phi = 0.0;
    let mut reached = false;
    let mut steps = 0;
    for s in 0..max_steps {
        let eval = connect_regularizer(&net);
        phi = eval.phi;
        if phi >= target {
            reached = true;
            steps = s;
            break;
        }
        let lr = descent_step(s);
        let pm = net.params_mut();
        for (w, g) in pm.weights.iter_mut().zip(&eval.weight_grads) {
            for (x, gi) in w.data_mut().iter_mut().zip(g.data()) {
                *x -= lr * gi;
            }
        }
        steps = s + 1;
    }
    let k = net.layer_count();
    let mut heavy = Vec::new();
    for layer in 1..k.saturating_sub(2) {
        let w = &net.weights()[layer];
        let mass = w.l1_norm();
        let count = if mass == 0.0 {
            0
        } else {
            w.data().iter().filter(|x| x.abs() / mass >= 1e-3).count()
        };
        heavy.push(count);
    }
    DescentOutcome {
        reached,
        steps,
        phi,
        heavy_middle_weights: heavy,
    }
}

/// Support bound of connectivity maximizers, plus convergence of plain
/// gradient descent on the log-barrier objective to such maximizers.
pub fn suite_theorem_convergence() -> SuiteReport {
    let mut cases = Vec::new();

    // constructed maximizers attain connectivity 1 within the support bound
    let mut constructed_ok = true;
    let mut detail = String::new();
    for k in [3usize, 4, 5] {
        for v1 in 2..=6usize {
            for vk in 1..=3usize {
                let mut sizes = vec![v1];
                sizes.extend(std::iter::repeat_n(4, k - 2));
                sizes.push(vk);
                let net = max_connectivity_network(&sizes).unwrap();
                let phi = phi_total(&normalize(&net, Mode::Normalized));
                let support: usize = net.weights().iter().map(|w| w.count_nonzero()).sum();
                let bound = v1 + vk + k - 3;
                if (phi - 1.0).abs() > 1e-12 || support > bound {
                    constructed_ok = false;
                    detail =
                        format!("sizes {sizes:?}: phi {phi}, support {support} vs bound {bound}");
                }
            }
        }
    }
    // the study architecture: bound 6 + 1 + 5 - 3 = 9
    let toy = max_connectivity_network(&[6, 5, 5, 5, 1]).unwrap();
    let toy_support: usize = toy.weights().iter().map(|w| w.count_nonzero()).sum();
    if toy_support > 9 {
        constructed_ok = false;
        detail = format!("toy support {toy_support} > 9");
    }
    cases.push(CaseResult {
        name: "theorem/support-bound".into(),
        passed: constructed_ok,
        detail: if constructed_ok {
            format!("all constructions reach phi=1 within bound; toy support {toy_support} <= 9")
        } else {
            detail
        },
    });

    // gradient descent from random connected inits reaches phi >= 0.999 with
    // at most K-3 significant weights per middle layer
    let sizes = [4usize, 6, 6, 6, 3];
    let k = sizes.len();
    let mut reached = 0usize;
    let mut middle_ok = 0usize;
    let total = 50usize;
    for seed in 0..total as u64 {
        let net = LayeredNetwork::init_random(&sizes, 31_000 + seed).unwrap();
        let out = descend_connectivity(&net, 0.999, DESCENT_MAX_STEPS);
        if out.reached {
            reached += 1;
            if out.heavy_middle_weights.iter().all(|&c| c <= k - 3) {
                middle_ok += 1;
            }
        }
    }
    let passed = reached * 100 >= total * 96 && middle_ok == reached;
    cases.push(CaseResult {
        name: "theorem/descent-convergence".into(),
        passed,
        detail: format!(
            "{reached}/{total} runs reached phi >= 0.999; {middle_ok} of them hold <= {} heavy middle weights per layer",
            k - 3
        ),
    });
    SuiteReport::new("theorem-convergence", cases)
}
