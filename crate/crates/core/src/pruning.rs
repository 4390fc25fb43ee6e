//! Importance scoring and mask construction.
//!
//! Four scoring routes: weight magnitude, saliency from the connectivity
//! sweeps (the product-rule share of each edge in total connectivity),
//! per-channel scores over scaling factors, and loss-aware one-shot scores
//! |dJ/dW * W| with a connectivity term inside the objective. Masks drop a
//! fixed fraction of the lowest-scored entries, per layer or globally.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::connectivity::{
    append_phi_total, node_connectivity, normalize, Mode, LOG_GUARD_EPSILON,
};
use crate::error::{Error, Result};
use crate::matrix::Mat;
use crate::network::{LayeredNetwork, PruneMask};
use crate::objective::{append_bce, append_prediction, register_params};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Granularity {
    Weight,
    NodeGroup,
    ScalingEntry,
}

/// Stable identity of a scored parameter or group. Ordering is the fixed
/// tie-break rule: among equal scores the lower key is pruned first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamKey {
    /// (weight layer, target row, source column)
    Weight {
        layer: usize,
        row: usize,
        col: usize,
    },
    /// (weight layer the scaling sits after, channel)
    Scaling { layer: usize, channel: usize },
    /// (real hidden layer, node)
    Group { layer: usize, node: usize },
}

/// Scores in ascending key order, covering exactly the unmasked parameters
/// at the stated granularity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub granularity: Granularity,
    pub method: String,
    pub entries: Vec<(ParamKey, f64)>,
    /// Set when scoring degenerated (e.g. a collapsed network).
    pub warning: Option<String>,
}

impl ImportanceTable {
    pub fn get(&self, key: &ParamKey) -> Option<f64> {
        self.entries
            .binary_search_by(|(k, _)| k.cmp(key))
            .ok()
            .map(|i| self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Structured-text export: one `key<TAB>score` line, header first.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# importance v1 method={} granularity={:?} entries={}\n",
            self.method,
            self.granularity,
            self.entries.len()
        );
        if let Some(w) = &self.warning {
            out.push_str(&format!("# warning: {w}\n"));
        }
        for (key, score) in &self.entries {
            let k = match key {
                ParamKey::Weight { layer, row, col } => format!("w {layer} {row} {col}"),
                ParamKey::Scaling { layer, channel } => format!("s {layer} {channel}"),
                ParamKey::Group { layer, node } => format!("g {layer} {node}"),
            };
            out.push_str(&format!("{k}\t{score:.17e}\n"));
        }
        out
    }
}

fn weight_kept(net: &LayeredNetwork, layer: usize, row: usize, col: usize) -> bool {
    match net.mask() {
        None => true,
        Some(m) => m.weights[layer][row * net.weights()[layer].cols() + col],
    }
}

fn scaling_kept(net: &LayeredNetwork, idx: usize, channel: usize) -> bool {
    match net.mask() {
        None => true,
        Some(m) => m.scalings[idx][channel],
    }
}

/// Score every unmasked weight by its magnitude.
pub fn score_magnitude(net: &LayeredNetwork) -> ImportanceTable {
    let mut entries = Vec::with_capacity(net.weight_count());
    for (k, w) in net.weights().iter().enumerate() {
        for r in 0..w.rows() {
            for c in 0..w.cols() {
                if weight_kept(net, k, r, c) {
                    entries.push((
                        ParamKey::Weight {
                            layer: k,
                            row: r,
                            col: c,
                        },
                        w.get(r, c).abs(),
                    ));
                }
            }
        }
    }
    ImportanceTable {
        granularity: Granularity::Weight,
        method: "magnitude".into(),
        entries,
        warning: None,
    }
}

/// Saliency of each edge: a_in(source) * theta(edge) * a_out(target), the
/// edge's share of total connectivity under normalized weights.
pub fn score_synflow(net: &LayeredNetwork) -> ImportanceTable {
    let view = normalize(net, Mode::Normalized);
    let profile = node_connectivity(&view);
    let mut entries = Vec::with_capacity(net.weight_count());
    for k in 0..net.weight_layer_count() {
        let s = profile.stage_index_of_weight_layer(k);
        let ain = profile.a_in_before_stage(s);
        let aout = profile.a_out_after_stage(s);
        let theta = view.theta(k);
        for r in 0..theta.rows() {
            for c in 0..theta.cols() {
                if weight_kept(net, k, r, c) {
                    entries.push((
                        ParamKey::Weight {
                            layer: k,
                            row: r,
                            col: c,
                        },
                        ain[c] * theta.get(r, c) * aout[r],
                    ));
                }
            }
        }
    }
    let warning = if profile.phi_total() == 0.0 {
        Some("network is collapsed; all saliency scores are zero".into())
    } else {
        None
    };
    ImportanceTable {
        granularity: Granularity::Weight,
        method: "synflow".into(),
        entries,
        warning,
    }
}

/// Connectivity flowing through each scaling channel. Per scaling layer the
/// scores sum to total connectivity.
pub fn score_channels(net: &LayeredNetwork) -> Result<ImportanceTable> {
    if net.scalings().is_empty() {
        return Err(Error::NoScalingLayers);
    }
    let view = normalize(net, Mode::Normalized);
    let profile = node_connectivity(&view);
    let mut entries = Vec::new();
    for (idx, scaling) in net.scalings().iter().enumerate() {
        let s = profile.stage_index_of_scaling(idx);
        let ain = profile.a_in_before_stage(s);
        let aout = profile.a_out_after_stage(s);
        let theta = view.scaling_theta(idx);
        for c in 0..theta.len() {
            if scaling_kept(net, idx, c) {
                entries.push((
                    ParamKey::Scaling {
                        layer: scaling.after_weight_layer,
                        channel: c,
                    },
                    ain[c] * theta[c] * aout[c],
                ));
            }
        }
    }
    entries.sort_by_key(|e| e.0);
    Ok(ImportanceTable {
        granularity: Granularity::ScalingEntry,
        method: "channel".into(),
        entries,
        warning: None,
    })
}

/// Configuration for loss-aware scoring.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossAwareConfig {
    /// Weight of the connectivity term inside the objective.
    pub lambda: f64,
    /// Connectivity input columns: 1 uses the all-ones input, more use
    /// uniform samples in [0,1].
    pub connectivity_samples: usize,
    pub sample_seed: u64,
}

impl Default for LossAwareConfig {
    fn default() -> Self {
        LossAwareConfig {
            lambda: 0.0,
            connectivity_samples: 1,
            sample_seed: 0,
        }
    }
}

/// One-shot importance |dJ/dW * W| under J = loss - lambda * log(phi), with
/// the connectivity term in signal-flow form (theta = |W|, biases as |b|).
/// `x` is features x batch, `targets` one 0/1 label per batch column.
pub fn score_loss_aware(
    net: &LayeredNetwork,
    x: &Mat,
    targets: &[f64],
    cfg: &LossAwareConfig,
) -> Result<ImportanceTable> {
    if targets.is_empty() {
        return Err(Error::Config(
            "loss-aware scoring needs a nonempty batch".into(),
        ));
    }
    let mut tape = Tape::new();
    let params = register_params(&mut tape, net);
    let probs = append_prediction(&mut tape, net, &params, x.clone());
    let loss = append_bce(&mut tape, probs, targets);
    let mut objective = loss;
    if cfg.lambda != 0.0 {
        let inputs = connectivity_inputs(net.sizes()[0], cfg);
        let phi = append_phi_total(
            &mut tape,
            &params.weights,
            &params.scalings,
            Some(&params.biases),
            inputs,
            Mode::SignalFlow,
        );
        let log_phi = tape.log_floored(phi, LOG_GUARD_EPSILON);
        let term = tape.scale(log_phi, -cfg.lambda);
        objective = tape.add(objective, term);
    }
    tape.set_exit(objective);
    tape.forward()?;
    tape.backward()?;

    let mut entries = Vec::with_capacity(net.weight_count());
    for (k, (&wid, w)) in params.weights.iter().zip(net.weights()).enumerate() {
        let grad = tape.grad(wid).expect("param grad");
        if !grad.all_finite() {
            return Err(Error::NumericGradient { layer: k });
        }
        for r in 0..w.rows() {
            for c in 0..w.cols() {
                if weight_kept(net, k, r, c) {
                    entries.push((
                        ParamKey::Weight {
                            layer: k,
                            row: r,
                            col: c,
                        },
                        (grad.get(r, c) * w.get(r, c)).abs(),
                    ));
                }
            }
        }
    }
    Ok(ImportanceTable {
        granularity: Granularity::Weight,
        method: "loss-aware".into(),
        entries,
        warning: None,
    })
}

fn connectivity_inputs(width: usize, cfg: &LossAwareConfig) -> Mat {
    let samples = cfg.connectivity_samples.max(1);
    if samples == 1 {
        return Mat::filled(width, 1, 1.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sample_seed);
    let mut m = Mat::zeros(width, samples);
    for c in 0..samples {
        for r in 0..width {
            m.set(r, c, rng.random_range(0.0..=1.0));
        }
    }
    m
}

/// Sum per-weight scores into structural node groups: a hidden node's group
/// is its incoming row plus its outgoing column.
pub fn aggregate_node_groups(
    table: &ImportanceTable,
    net: &LayeredNetwork,
) -> Result<ImportanceTable> {
    if table.granularity != Granularity::Weight {
        return Err(Error::Config(
            "node-group aggregation needs a per-weight table".into(),
        ));
    }
    let k = net.layer_count();
    let mut entries = Vec::new();
    for layer in 1..k - 1 {
        for node in 0..net.sizes()[layer] {
            let mut score = 0.0;
            // incoming row of weight layer (layer - 1)
            for c in 0..net.sizes()[layer - 1] {
                if let Some(s) = table.get(&ParamKey::Weight {
                    layer: layer - 1,
                    row: node,
                    col: c,
                }) {
                    score += s;
                }
            }
            // outgoing column of weight layer (layer)
            for r in 0..net.sizes()[layer + 1] {
                if let Some(s) = table.get(&ParamKey::Weight {
                    layer,
                    row: r,
                    col: node,
                }) {
                    score += s;
                }
            }
            entries.push((ParamKey::Group { layer, node }, score));
        }
    }
    Ok(ImportanceTable {
        granularity: Granularity::NodeGroup,
        method: format!("{}+groups", table.method),
        entries,
        warning: table.warning.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scope {
    /// Drop the fraction within each layer separately.
    Local,
    /// Drop the fraction from the pooled score list.
    Global,
}

/// What to drop and how. The tie-break is fixed: among equal scores, the
/// lower key goes first.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneSpec {
    pub scope: Scope,
    pub fraction: f64,
    pub granularity: Granularity,
}

impl PruneSpec {
    pub fn local(fraction: f64, granularity: Granularity) -> Self {
        PruneSpec {
            scope: Scope::Local,
            fraction,
            granularity,
        }
    }

    pub fn global(fraction: f64, granularity: Granularity) -> Self {
        PruneSpec {
            scope: Scope::Global,
            fraction,
            granularity,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.fraction) {
            return Err(Error::Config(format!(
                "prune fraction must be in [0,1), got {}",
                self.fraction
            )));
        }
        Ok(())
    }
}

/// floor(fraction * n), robust to the fraction arriving one ulp under an
/// exact ratio (e.g. 1/3 of 3 entries must drop exactly 1).
fn drop_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64) + 1e-9).floor() as usize
}

/// Scope key for LOCAL grouping.
fn scope_of(key: &ParamKey) -> usize {
    match key {
        ParamKey::Weight { layer, .. } => *layer,
        ParamKey::Scaling { layer, .. } => *layer,
        ParamKey::Group { layer, .. } => *layer,
    }
}

/// Build a keep/drop mask from an importance table. Drops exactly
/// floor(fraction * n) entries per scope, lowest scores first. A LOCAL
/// request that would leave a weight layer with no kept parameter is
/// refused (it guarantees collapse).
pub fn build_mask(
    net: &LayeredNetwork,
    table: &ImportanceTable,
    spec: &PruneSpec,
) -> Result<PruneMask> {
    spec.validate()?;
    if spec.granularity != table.granularity {
        return Err(Error::Config(format!(
            "table granularity {:?} does not match spec {:?}",
            table.granularity, spec.granularity
        )));
    }
    let mut dropped: Vec<ParamKey> = Vec::new();
    match spec.scope {
        Scope::Global => {
            let mut pool: Vec<&(ParamKey, f64)> = table.entries.iter().collect();
            pool.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            dropped.extend(
                pool.iter()
                    .take(drop_count(spec.fraction, pool.len()))
                    .map(|e| e.0),
            );
        }
        Scope::Local => {
            let mut scopes: Vec<usize> = table.entries.iter().map(|(k, _)| scope_of(k)).collect();
            scopes.sort_unstable();
            scopes.dedup();
            for scope in scopes {
                let mut pool: Vec<&(ParamKey, f64)> = table
                    .entries
                    .iter()
                    .filter(|(k, _)| scope_of(k) == scope)
                    .collect();
                pool.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                dropped.extend(
                    pool.iter()
                        .take(drop_count(spec.fraction, pool.len()))
                        .map(|e| e.0),
                );
            }
        }
    }

    let mut mask = PruneMask::all_ones(net);
    for key in &dropped {
        drop_key(&mut mask, net, key);
    }

    if spec.scope == Scope::Local {
        // a layer is emptied if no parameter survives both the old mask and
        // the new drops
        let effective = match net.mask() {
            Some(old) => old.intersect(&mask),
            None => mask.clone(),
        };
        for (layer, keep) in effective.weights.iter().enumerate() {
            if keep.iter().all(|&k| !k) {
                return Err(Error::EmptiesLayer { layer });
            }
        }
        for (idx, keep) in effective.scalings.iter().enumerate() {
            if keep.iter().all(|&k| !k) {
                return Err(Error::EmptiesLayer {
                    layer: net.scalings()[idx].after_weight_layer,
                });
            }
        }
    }
    Ok(mask)
}

fn drop_key(mask: &mut PruneMask, net: &LayeredNetwork, key: &ParamKey) {
    match *key {
        ParamKey::Weight { layer, row, col } => {
            let cols = net.weights()[layer].cols();
            mask.weights[layer][row * cols + col] = false;
        }
        ParamKey::Scaling { layer, channel } => {
            let idx = net
                .scalings()
                .iter()
                .position(|s| s.after_weight_layer == layer)
                .expect("scaling key refers to an existing scaling layer");
            mask.scalings[idx][channel] = false;
        }
        ParamKey::Group { layer, node } => {
            // incoming row
            let w_in = layer - 1;
            let cols = net.weights()[w_in].cols();
            for c in 0..cols {
                mask.weights[w_in][node * cols + c] = false;
            }
            // outgoing column
            let w_out = layer;
            let cols_out = net.weights()[w_out].cols();
            for r in 0..net.weights()[w_out].rows() {
                mask.weights[w_out][r * cols_out + node] = false;
            }
        }
    }
}
