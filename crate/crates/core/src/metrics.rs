//! Model evaluation, client sparsity statistics, and the training-FLOPs
//! accounting model.
//!
//! Per dense layer of shape `in x out` and per training sample:
//!
//! * forward: one MAC per weight that is nonzero in the model the client
//!   received, plus `out` bias additions;
//! * backward, input gradient: `in * out` MACs, always counted in full;
//! * backward, weight derivative: one MAC per *active* weight, i.e. the
//!   union of server-nonzero weights and weights the client changed.
//!
//! One MAC is two FLOPs and a bias addition is one. The dense baseline
//! counts every weight in all three terms.

use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fl::ClientResult;
use crate::nn::{logits, Architecture, ModelParams};
use crate::sparsify::{sparsity, Mask, Sparsity};

/// Fraction of argmax hits and mean cross-entropy on `test`.
pub fn evaluate(params: &ModelParams, test: &Dataset) -> Result<(f64, f64)> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let z = logits(params, test.inputs())?;
    let k = params.output_dim();
    if test.class_count() > k {
        return Err(Error::ShapeMismatch(format!(
            "test set has {} classes, model outputs {k}",
            test.class_count()
        )));
    }
    let mut correct = 0usize;
    let mut loss = 0.0f64;
    for (r, &label) in test.labels().iter().enumerate() {
        let row = z.row(r);
        let mut best = 0;
        for j in 1..k {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == label {
            correct += 1;
        }
        let max = row[best] as f64;
        let lse = max
            + row
                .iter()
                .map(|&v| (v as f64 - max).exp())
                .sum::<f64>()
                .ln();
        loss += lse - row[label] as f64;
    }
    let n = test.len() as f64;
    Ok((correct as f64 / n, loss / n))
}

/// Per-layer active-weight counts: positions nonzero in `received` or whose
/// value changed during local training.
pub fn active_counts(received: &ModelParams, trained: &ModelParams) -> Result<Vec<usize>> {
    received.check_congruent(trained)?;
    Ok(received
        .layers()
        .iter()
        .zip(trained.layers())
        .map(|(r, t)| {
            r.weights()
                .values()
                .iter()
                .zip(t.weights().values())
                .filter(|(&a, &b)| a != 0.0 || a != b)
                .count()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerFlops {
    pub fan_in: usize,
    pub fan_out: usize,
    pub forward_macs: u64,
    pub bias_adds: u64,
    pub hidden_macs: u64,
    pub derivative_macs: u64,
    /// FLOPs for one sample under sparse training.
    pub sparse_flops: u64,
    /// FLOPs for one sample of dense training.
    pub dense_flops: u64,
    pub savings: f64,
}

impl LayerFlops {
    /// Savings with bias additions left out of both sides.
    pub fn savings_without_bias(&self) -> f64 {
        let dense = self.dense_flops - self.bias_adds;
        1.0 - (self.sparse_flops - self.bias_adds) as f64 / dense as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopsReport {
    pub layers: Vec<LayerFlops>,
    pub samples: u64,
    pub epochs: u64,
    /// Training FLOPs over `samples * epochs`.
    pub sparse_total: u64,
    pub dense_total: u64,
    pub savings: f64,
}

impl FlopsReport {
    pub fn dense_per_sample(&self) -> u64 {
        self.layers.iter().map(|l| l.dense_flops).sum()
    }

    pub fn sparse_per_sample(&self) -> u64 {
        self.layers.iter().map(|l| l.sparse_flops).sum()
    }
}

fn flops(macs: u64, bias: u64) -> u64 {
    2 * macs + bias
}

/// Training cost of a client given the mask of the model it received and the
/// number of active weights per layer (see [`active_counts`]).
pub fn training_flops(
    arch: &Architecture,
    server_mask: &Mask,
    active: &[usize],
    samples: usize,
    epochs: usize,
) -> Result<FlopsReport> {
    let dims = arch.layer_dims();
    if server_mask.layers().len() != dims.len() || active.len() != dims.len() {
        return Err(Error::ShapeMismatch(format!(
            "architecture has {} layers, mask {} and active counts {}",
            dims.len(),
            server_mask.layers().len(),
            active.len()
        )));
    }
    let mut layers = Vec::with_capacity(dims.len());
    for (li, ((&(fan_in, fan_out), m), &act)) in dims
        .iter()
        .zip(server_mask.layers())
        .zip(active)
        .enumerate()
    {
        let full = fan_in * fan_out;
        if m.shape != [fan_in, fan_out] {
            return Err(Error::ShapeMismatch(format!(
                "mask layer {li} shape {:?} vs [{fan_in}, {fan_out}]",
                m.shape
            )));
        }
        let nnz = m.ones();
        if act > full {
            return Err(Error::InconsistentCounts {
                layer: li,
                detail: format!("{act} active weights exceed {full}"),
            });
        }
        if act < nnz {
            return Err(Error::InconsistentCounts {
                layer: li,
                detail: format!("{act} active weights fewer than {nnz} server nonzeros"),
            });
        }
        let (forward, hidden, derivative) = (nnz as u64, full as u64, act as u64);
        let bias = fan_out as u64;
        let sparse = flops(forward + hidden + derivative, bias);
        let dense = flops(3 * full as u64, bias);
        layers.push(LayerFlops {
            fan_in,
            fan_out,
            forward_macs: forward,
            bias_adds: bias,
            hidden_macs: hidden,
            derivative_macs: derivative,
            sparse_flops: sparse,
            dense_flops: dense,
            savings: 1.0 - sparse as f64 / dense as f64,
        });
    }
    let scale = (samples * epochs) as u64;
    let sparse_total = scale * layers.iter().map(|l| l.sparse_flops).sum::<u64>();
    let dense_total = scale * layers.iter().map(|l| l.dense_flops).sum::<u64>();
    let savings = 1.0
        - layers.iter().map(|l| l.sparse_flops).sum::<u64>() as f64
            / layers.iter().map(|l| l.dense_flops).sum::<u64>() as f64;
    Ok(FlopsReport {
        layers,
        samples: samples as u64,
        epochs: epochs as u64,
        sparse_total,
        dense_total,
        savings,
    })
}

/// Mean client sparsity: per layer an arithmetic mean over clients; the full
/// model figure is each client's weight-count-weighted sparsity, averaged.
pub fn client_sparsity_stats(results: &[ClientResult]) -> Result<Sparsity> {
    let first = results.first().ok_or(Error::Empty("client results"))?;
    let n = results.len() as f64;
    let mut per_layer = vec![0.0; first.theta_prime.layers().len()];
    let mut full_model = 0.0;
    for r in results {
        let s = sparsity(&r.theta_prime);
        if s.per_layer.len() != per_layer.len() {
            return Err(Error::ShapeMismatch(
                "client results differ in layer count".into(),
            ));
        }
        for (acc, v) in per_layer.iter_mut().zip(&s.per_layer) {
            *acc += v / n;
        }
        full_model += s.full_model / n;
    }
    Ok(Sparsity {
        per_layer,
        full_model,
    })
}
