//! Layered feed-forward network model: weight matrices, biases, optional
//! per-layer scaling factors, and a keep/drop mask for hard pruning.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid_scalar;
use crate::error::{Error, Result};
use crate::matrix::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

/// Learnable per-node multiplicative factors inserted after a weight layer.
/// `after_weight_layer` is a 0-based weight-layer index; the factors scale the
/// activations of layer `after_weight_layer + 1` before they feed the next
/// weight layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingLayer {
    pub after_weight_layer: usize,
    pub factors: Vec<f64>,
}

/// Binary keep/drop pattern aligned with a network's parameters.
/// `true` keeps an entry, `false` pins it to zero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneMask {
    /// One flat row-major keep vector per weight matrix.
    pub weights: Vec<Vec<bool>>,
    /// One keep vector per scaling layer, in network scaling order.
    pub scalings: Vec<Vec<bool>>,
}

impl PruneMask {
    /// All-keep mask matching the network's parameter shapes.
    pub fn all_ones(net: &LayeredNetwork) -> Self {
        PruneMask {
            weights: net
                .weights
                .iter()
                .map(|w| vec![true; w.rows() * w.cols()])
                .collect(),
            scalings: net
                .scalings
                .iter()
                .map(|s| vec![true; s.factors.len()])
                .collect(),
        }
    }

    pub fn matches(&self, net: &LayeredNetwork) -> bool {
        self.weights.len() == net.weights.len()
            && self
                .weights
                .iter()
                .zip(&net.weights)
                .all(|(m, w)| m.len() == w.rows() * w.cols())
            && self.scalings.len() == net.scalings.len()
            && self
                .scalings
                .iter()
                .zip(&net.scalings)
                .all(|(m, s)| m.len() == s.factors.len())
    }

    /// Intersect with another mask of the same shape.
    pub fn intersect(&self, other: &PruneMask) -> PruneMask {
        PruneMask {
            weights: self
                .weights
                .iter()
                .zip(&other.weights)
                .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| x && y).collect())
                .collect(),
            scalings: self
                .scalings
                .iter()
                .zip(&other.scalings)
                .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| x && y).collect())
                .collect(),
        }
    }

    pub fn kept_weight_count(&self) -> usize {
        self.weights
            .iter()
            .map(|m| m.iter().filter(|&&k| k).count())
            .sum()
    }

    pub fn dropped_weight_count(&self) -> usize {
        self.weights
            .iter()
            .map(|m| m.iter().filter(|&&k| !k).count())
            .sum()
    }
}

/// Feed-forward network over layers `V_1 .. V_K`: weight matrix `k` maps the
/// width of layer `k` to the width of layer `k+1` and is stored as
/// `sizes[k+1] x sizes[k]` (row = target node, column = source node).
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredNetwork {
    sizes: Vec<usize>,
    weights: Vec<Mat>,
    biases: Vec<Vec<f64>>,
    activations: Vec<Activation>,
    scalings: Vec<ScalingLayer>,
    mask: Option<PruneMask>,
}

impl LayeredNetwork {
    pub fn new(
        sizes: Vec<usize>,
        weights: Vec<Mat>,
        biases: Vec<Vec<f64>>,
        activations: Vec<Activation>,
    ) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::NetworkShape(format!(
                "need at least 2 layers, got {}",
                sizes.len()
            )));
        }
        if sizes.contains(&0) {
            return Err(Error::NetworkShape("zero-width layer".into()));
        }
        let k = sizes.len();
        if weights.len() != k - 1 || biases.len() != k - 1 || activations.len() != k - 1 {
            return Err(Error::NetworkShape(format!(
                "expected {} weight layers, got {} weights / {} biases / {} activations",
                k - 1,
                weights.len(),
                biases.len(),
                activations.len()
            )));
        }
        for (i, w) in weights.iter().enumerate() {
            if w.shape() != (sizes[i + 1], sizes[i]) {
                return Err(Error::NetworkShape(format!(
                    "weight layer {} is {}x{}, expected {}x{}",
                    i,
                    w.rows(),
                    w.cols(),
                    sizes[i + 1],
                    sizes[i]
                )));
            }
            if !w.all_finite() {
                return Err(Error::NetworkShape(format!(
                    "weight layer {i} has non-finite entries"
                )));
            }
        }
        for (i, b) in biases.iter().enumerate() {
            if b.len() != sizes[i + 1] {
                return Err(Error::NetworkShape(format!(
                    "bias {} has length {}, expected {}",
                    i,
                    b.len(),
                    sizes[i + 1]
                )));
            }
            if !b.iter().all(|x| x.is_finite()) {
                return Err(Error::NetworkShape(format!(
                    "bias {i} has non-finite entries"
                )));
            }
        }
        Ok(LayeredNetwork {
            sizes,
            weights,
            biases,
            activations,
            scalings: Vec::new(),
            mask: None,
        })
    }

    /// Reassemble a network from stored parts, validating every invariant.
    pub fn from_parts(
        sizes: Vec<usize>,
        weights: Vec<Mat>,
        biases: Vec<Vec<f64>>,
        activations: Vec<Activation>,
        scalings: Vec<ScalingLayer>,
        mask: Option<PruneMask>,
    ) -> Result<Self> {
        let mut net = Self::new(sizes, weights, biases, activations)?;
        for s in scalings {
            let k = s.after_weight_layer;
            if s.factors.len() != net.sizes[k + 1] {
                return Err(Error::NetworkShape(format!(
                    "scaling after weight layer {} has {} factors, expected {}",
                    k,
                    s.factors.len(),
                    net.sizes[k + 1]
                )));
            }
            net.add_scaling(k)?;
            let idx = net
                .scalings
                .iter()
                .position(|x| x.after_weight_layer == k)
                .unwrap();
            net.scalings[idx].factors = s.factors;
        }
        if let Some(mask) = mask {
            if !mask.matches(&net) {
                return Err(Error::MaskShape("stored mask does not fit".into()));
            }
            net.mask = Some(mask);
            net.enforce_mask();
        }
        Ok(net)
    }

    /// Glorot-uniform weights, zero biases, ReLU hidden layers and a sigmoid
    /// output. Deterministic for a fixed seed.
    pub fn init_random(sizes: &[usize], seed: u64) -> Result<Self> {
        Self::init_random_with_output(sizes, seed, Activation::Sigmoid)
    }

    pub fn init_random_with_output(sizes: &[usize], seed: u64, output: Activation) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = sizes.len();
        if k < 2 {
            return Err(Error::NetworkShape("need at least 2 layers".into()));
        }
        let mut weights = Vec::with_capacity(k - 1);
        let mut biases = Vec::with_capacity(k - 1);
        let mut activations = Vec::with_capacity(k - 1);
        for i in 0..k - 1 {
            let (fan_out, fan_in) = (sizes[i + 1], sizes[i]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut w = Mat::zeros(fan_out, fan_in);
            for r in 0..fan_out {
                for c in 0..fan_in {
                    w.set(r, c, uniform_symmetric(&mut rng, bound));
                }
            }
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
            activations.push(if i + 2 == k { output } else { Activation::Relu });
        }
        Self::new(sizes.to_vec(), weights, biases, activations)
    }

    /// Attach an all-ones scaling layer after weight layer `k` (0-based).
    pub fn add_scaling(&mut self, after_weight_layer: usize) -> Result<()> {
        if after_weight_layer >= self.weights.len() {
            return Err(Error::NetworkShape(format!(
                "no weight layer {after_weight_layer} to attach scaling to"
            )));
        }
        if self
            .scalings
            .iter()
            .any(|s| s.after_weight_layer == after_weight_layer)
        {
            return Err(Error::NetworkShape(format!(
                "scaling already attached after weight layer {after_weight_layer}"
            )));
        }
        let width = self.sizes[after_weight_layer + 1];
        self.scalings.push(ScalingLayer {
            after_weight_layer,
            factors: vec![1.0; width],
        });
        self.scalings.sort_by_key(|s| s.after_weight_layer);
        if let Some(mask) = &mut self.mask {
            // keep mask alignment: rebuild scaling masks in the new order
            mask.scalings = self
                .scalings
                .iter()
                .map(|s| vec![true; s.factors.len()])
                .collect();
        }
        Ok(())
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn layer_count(&self) -> usize {
        self.sizes.len()
    }

    pub fn weight_layer_count(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Mat] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn scalings(&self) -> &[ScalingLayer] {
        &self.scalings
    }

    pub fn mask(&self) -> Option<&PruneMask> {
        self.mask.as_ref()
    }

    pub fn scaling_after(&self, weight_layer: usize) -> Option<&ScalingLayer> {
        self.scalings
            .iter()
            .find(|s| s.after_weight_layer == weight_layer)
    }

    /// Total number of weight entries across all layers.
    pub fn weight_count(&self) -> usize {
        self.weights.iter().map(|w| w.rows() * w.cols()).sum()
    }

    /// Mutable access for the optimizer. Masked entries must be re-pinned
    /// after mutation; see [`LayeredNetwork::enforce_mask`].
    pub fn params_mut(&mut self) -> ParamsMut<'_> {
        ParamsMut {
            weights: &mut self.weights,
            biases: &mut self.biases,
            scalings: &mut self.scalings,
        }
    }

    /// Zero every dropped parameter. Idempotent; a no-op without a mask.
    pub fn enforce_mask(&mut self) {
        let Some(mask) = &self.mask else { return };
        for (w, keep) in self.weights.iter_mut().zip(&mask.weights) {
            for (x, &k) in w.data_mut().iter_mut().zip(keep) {
                if !k {
                    *x = 0.0;
                }
            }
        }
        for (s, keep) in self.scalings.iter_mut().zip(&mask.scalings) {
            for (x, &k) in s.factors.iter_mut().zip(keep) {
                if !k {
                    *x = 0.0;
                }
            }
        }
    }

    /// Hard-prune: zero the dropped entries and retain the mask so later
    /// training keeps them at zero. Composes with an existing mask.
    pub fn apply_mask(&self, mask: &PruneMask) -> Result<LayeredNetwork> {
        if !mask.matches(self) {
            return Err(Error::MaskShape(format!(
                "mask covers {} weight layers / {} scaling layers",
                mask.weights.len(),
                mask.scalings.len()
            )));
        }
        let mut out = self.clone();
        out.mask = Some(match &self.mask {
            Some(old) => old.intersect(mask),
            None => mask.clone(),
        });
        out.enforce_mask();
        Ok(out)
    }

    /// Forward pass. `x` holds one sample per row, `sizes[0]` feature columns;
    /// the result holds one row per sample with `sizes[K-1]` columns.
    pub fn predict(&self, x: &Mat) -> Result<Mat> {
        if x.cols() != self.sizes[0] {
            return Err(Error::InputWidth {
                expected: self.sizes[0],
                actual: x.cols(),
            });
        }
        let mut act = x.clone();
        for (k, w) in self.weights.iter().enumerate() {
            // act is batch x in; w is out x in; z = act * w^T + b
            let mut z = act.matmul_nt(w);
            for r in 0..z.rows() {
                for c in 0..z.cols() {
                    z.set(r, c, z.get(r, c) + self.biases[k][c]);
                }
            }
            act = match self.activations[k] {
                Activation::Relu => z.map(crate::autodiff::relu),
                Activation::Sigmoid => z.map(sigmoid_scalar),
                Activation::Identity => z,
            };
            if let Some(scaling) = self.scaling_after(k) {
                for r in 0..act.rows() {
                    for c in 0..act.cols() {
                        act.set(r, c, act.get(r, c) * scaling.factors[c]);
                    }
                }
            }
        }
        Ok(act)
    }
}

/// Mutable views over all learnable parameters.
pub struct ParamsMut<'a> {
    pub weights: &'a mut [Mat],
    pub biases: &'a mut [Vec<f64>],
    pub scalings: &'a mut [ScalingLayer],
}

fn uniform_symmetric(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    use rand::Rng;
    rng.random_range(-bound..=bound)
}
