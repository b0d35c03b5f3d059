//! Global magnitude pruning and the binary masks exchanged between server
//! and clients. Masks cover weights only; biases are never pruned.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::ModelParams;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerMask {
    pub name: String,
    pub shape: Vec<usize>,
    /// `true` = weight survives, `false` = pruned. Row-major like the weights.
    pub bits: Vec<bool>,
}

impl LayerMask {
    pub fn ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Per-layer binary masks shaped like the weight tensors of a model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    layers: Vec<LayerMask>,
}

impl Mask {
    pub fn new(layers: Vec<LayerMask>) -> Result<Self> {
        for l in &layers {
            if l.shape.iter().product::<usize>() != l.bits.len() {
                return Err(Error::ShapeMismatch(format!(
                    "mask layer `{}` shape {:?} vs {} bits",
                    l.name,
                    l.shape,
                    l.bits.len()
                )));
            }
        }
        Ok(Self { layers })
    }

    fn filled(params: &ModelParams, value: bool) -> Self {
        Self {
            layers: params
                .layers()
                .iter()
                .map(|l| LayerMask {
                    name: l.name().to_string(),
                    shape: l.weights().shape().to_vec(),
                    bits: vec![value; l.weights().len()],
                })
                .collect(),
        }
    }

    /// Mask with every weight pruned. This is the round-0 mask: its inverse
    /// keeps the whole client model.
    pub fn zeros_for(params: &ModelParams) -> Self {
        Self::filled(params, false)
    }

    pub fn ones_for(params: &ModelParams) -> Self {
        Self::filled(params, true)
    }

    pub fn layers(&self) -> &[LayerMask] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.bits.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count_ones(&self) -> usize {
        self.layers.iter().map(LayerMask::ones).sum()
    }

    pub fn check_congruent(&self, params: &ModelParams) -> Result<()> {
        if self.layers.len() != params.layers().len() {
            return Err(Error::ShapeMismatch(format!(
                "mask has {} layers, model has {}",
                self.layers.len(),
                params.layers().len()
            )));
        }
        for (m, l) in self.layers.iter().zip(params.layers()) {
            if m.shape != l.weights().shape() {
                return Err(Error::ShapeMismatch(format!(
                    "mask layer `{}` {:?} vs weights `{}` {:?}",
                    m.name,
                    m.shape,
                    l.name(),
                    l.weights().shape()
                )));
            }
        }
        Ok(())
    }

    /// Number of positions where `self` and `other` disagree.
    pub fn hamming(&self, other: &Mask) -> usize {
        self.layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| a.bits.iter().zip(&b.bits).filter(|(x, y)| x != y).count())
            .sum()
    }
}

/// Zeroes the `floor(p * W)` smallest-magnitude weights across all layers.
///
/// Magnitude ties are broken by `(layer, flat index)` ascending, lower first.
/// The returned mask is derived from the pruned values, so it is 0 exactly
/// where a weight equals `0.0`.
pub fn prune(params: &ModelParams, p: f64) -> Result<(ModelParams, Mask)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidSparsity(p));
    }
    let total = params.weight_count();
    let k = (p * total as f64).floor() as usize;
    let mut out = params.clone();
    if k > 0 {
        let mut order: Vec<(f32, usize, usize)> = Vec::with_capacity(total);
        for (li, l) in params.layers().iter().enumerate() {
            order.extend(
                l.weights()
                    .values()
                    .iter()
                    .enumerate()
                    .map(|(i, w)| (w.abs(), li, i)),
            );
        }
        let cmp = |a: &(f32, usize, usize), b: &(f32, usize, usize)| {
            a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
        };
        order.select_nth_unstable_by(k - 1, cmp);
        for &(_, li, i) in &order[..k] {
            out.layers_mut()[li].weights_mut()[i] = 0.0;
        }
    }
    let mask = derive_mask(&out);
    Ok((out, mask))
}

/// Entrywise `1 - m`.
pub fn invert_mask(mask: &Mask) -> Mask {
    Mask {
        layers: mask
            .layers
            .iter()
            .map(|l| LayerMask {
                name: l.name.clone(),
                shape: l.shape.clone(),
                bits: l.bits.iter().map(|b| !b).collect(),
            })
            .collect(),
    }
}

/// Keeps weights where the mask is 1 and writes `+0.0` elsewhere; biases pass
/// through.
pub fn apply_mask(params: &ModelParams, mask: &Mask) -> Result<ModelParams> {
    mask.check_congruent(params)?;
    let mut out = params.clone();
    for (l, m) in out.layers_mut().iter_mut().zip(&mask.layers) {
        for (w, &keep) in l.weights_mut().iter_mut().zip(&m.bits) {
            if !keep {
                *w = 0.0;
            }
        }
    }
    Ok(out)
}

/// 1 where the weight is not `0.0` (either sign of zero counts as zero).
pub fn derive_mask(params: &ModelParams) -> Mask {
    Mask {
        layers: params
            .layers()
            .iter()
            .map(|l| LayerMask {
                name: l.name().to_string(),
                shape: l.weights().shape().to_vec(),
                bits: l.weights().values().iter().map(|&w| w != 0.0).collect(),
            })
            .collect(),
    }
}

/// Fraction of weights equal to `0.0`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Sparsity {
    pub per_layer: Vec<f64>,
    pub full_model: f64,
}

pub fn sparsity(params: &ModelParams) -> Sparsity {
    let mut zeros_total = 0usize;
    let per_layer = params
        .layers()
        .iter()
        .map(|l| {
            let zeros = l.weights().values().iter().filter(|&&w| w == 0.0).count();
            zeros_total += zeros;
            zeros as f64 / l.weights().len() as f64
        })
        .collect();
    Sparsity {
        per_layer,
        full_model: zeros_total as f64 / params.weight_count() as f64,
    }
}
