//! Complement sparsification protocol and the FedAvg baseline.
//!
//! Round 0 is plain FedAvg from a random dense model. Afterwards the server
//! holds a magnitude-pruned global model `w'`; clients train all weights
//! from `w'`, keep only the positions pruned in `w'` (the inverted mask),
//! and the server adds the amplified weighted average of those complements
//! back onto `w'` before pruning again.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{Dataset, Partition};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::{active_counts, client_sparsity_stats, evaluate, training_flops};
use crate::nn::{
    init_random, loss_and_grads, optimizer_step, Architecture, Hyperparams, ModelParams,
    OptimizerState, Tensor,
};
use crate::sparsify::{apply_mask, derive_mask, invert_mask, prune, sparsity, Mask, Sparsity};
use crate::wire::{dense_size, ByteLedger, Direction, LedgerMode, WirePacket};

/// A client's complement-sparsified model and its sample count.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientResult {
    pub client_id: usize,
    pub theta_prime: ModelParams,
    pub sample_count: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Cs,
    Vanilla,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PartitionParams {
    pub alpha: f64,
    pub min_per_client: usize,
}

impl Default for PartitionParams {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            min_per_client: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub arch: Architecture,
    pub hp: Hyperparams,
    pub n_clients: usize,
    pub clients_per_round: usize,
    pub rounds: usize,
    pub server_sparsity: f64,
    pub aggregation_ratio: f64,
    /// Accept an aggregation ratio outside `(1, 1/lr]`.
    pub relax_ratio_bound: bool,
    pub seed: u64,
    pub partition: PartitionParams,
    pub mode: Mode,
    pub ledger_mode: LedgerMode,
}

impl ExperimentConfig {
    /// Reference setup: 16 -> 32 (ReLU) -> 3, 20 clients with 10 per round,
    /// 50% server sparsity, aggregation ratio 1.5, default hyper-parameters.
    pub fn reference() -> Self {
        Self {
            arch: Architecture::relu(16, &[32], 3),
            hp: Hyperparams::default(),
            n_clients: 20,
            clients_per_round: 10,
            rounds: 50,
            server_sparsity: 0.5,
            aggregation_ratio: 1.5,
            relax_ratio_bound: false,
            seed: 0,
            partition: PartitionParams::default(),
            mode: Mode::Cs,
            ledger_mode: LedgerMode::MaskDerived,
        }
    }

    /// `Some(message)` when the aggregation ratio lies outside `(1, 1/lr]`.
    pub fn ratio_bound_warning(&self) -> Option<String> {
        let ratio = self.aggregation_ratio;
        let upper = 1.0 / self.hp.client_lr as f64;
        if ratio <= 1.0 {
            Some(format!("aggregation_ratio {ratio} <= 1: complement updates cannot outgrow the sparse model"))
        } else if ratio > upper {
            Some(format!(
                "aggregation_ratio {ratio} > 1/client_lr = {upper}: server step may explode"
            ))
        } else {
            None
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| {
            Err(Error::Config {
                key: key.into(),
                reason,
            })
        };
        self.arch.validate()?;
        self.hp.validate()?;
        if self.n_clients == 0 {
            return bad("n_clients", "must be >= 1".into());
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.n_clients {
            return bad(
                "clients_per_round",
                format!(
                    "must lie in 1..={} (n_clients), got {}",
                    self.n_clients, self.clients_per_round
                ),
            );
        }
        if self.rounds == 0 {
            return bad("rounds", "must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.server_sparsity) {
            return bad(
                "server_sparsity",
                format!("must lie in [0, 1), got {}", self.server_sparsity),
            );
        }
        if !(self.aggregation_ratio > 0.0 && self.aggregation_ratio.is_finite()) {
            return bad("aggregation_ratio", "must be positive".into());
        }
        if self.partition.alpha.is_nan() || self.partition.alpha <= 0.0 {
            return bad("dirichlet_alpha", "must be positive".into());
        }
        if self.mode == Mode::Cs && !self.relax_ratio_bound {
            if let Some(w) = self.ratio_bound_warning() {
                return bad("aggregation_ratio", w);
            }
        }
        Ok(())
    }
}

/// Runs `local_epochs` passes over in-order minibatches, updating every
/// weight, and returns the trained dense model.
pub fn train_local(w_in: &ModelParams, data: &Dataset, hp: &Hyperparams) -> Result<ModelParams> {
    if data.is_empty() {
        return Err(Error::Empty("client dataset"));
    }
    if data.dim() != w_in.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "client data dim {} vs model input {}",
            data.dim(),
            w_in.input_dim()
        )));
    }
    let batches = minibatches(data, hp.batch_size)?;
    let mut theta = w_in.clone();
    let mut state = OptimizerState::new();
    for _ in 0..hp.local_epochs {
        for (x, y) in &batches {
            let (_, grads) = loss_and_grads(&theta, x, y)?;
            optimizer_step(&mut theta, &grads, hp, &mut state)?;
        }
    }
    Ok(theta)
}

fn minibatches(data: &Dataset, batch_size: usize) -> Result<Vec<(Tensor, Vec<usize>)>> {
    let d = data.dim();
    let values = data.inputs().values();
    (0..data.len())
        .step_by(batch_size.max(1))
        .map(|start| {
            let end = (start + batch_size).min(data.len());
            let x = Tensor::new(vec![end - start, d], values[start * d..end * d].to_vec())?;
            Ok((x, data.labels()[start..end].to_vec()))
        })
        .collect()
}

/// Local training followed by the inverted-mask product. With the round-0
/// all-zero mask the dense trained model is returned unchanged.
pub fn client_update(
    client_id: usize,
    w_in: &ModelParams,
    mask: &Mask,
    data: &Dataset,
    hp: &Hyperparams,
) -> Result<ClientResult> {
    mask.check_congruent(w_in)?;
    let theta = train_local(w_in, data, hp)?;
    Ok(ClientResult {
        client_id,
        theta_prime: apply_mask(&theta, &invert_mask(mask))?,
        sample_count: data.len(),
    })
}

fn sorted_weights(results: &[ClientResult]) -> Result<(Vec<&ClientResult>, Vec<f64>)> {
    if results.is_empty() {
        return Err(Error::Empty("client results"));
    }
    let mut sorted: Vec<&ClientResult> = results.iter().collect();
    sorted.sort_by_key(|r| r.client_id);
    let total: u64 = sorted.iter().map(|r| r.sample_count as u64).sum();
    if total == 0 {
        return Err(Error::Empty("client sample counts"));
    }
    let weights = sorted
        .iter()
        .map(|r| r.sample_count as f64 / total as f64)
        .collect();
    for r in &sorted[1..] {
        sorted[0].theta_prime.check_congruent(&r.theta_prime)?;
    }
    Ok((sorted, weights))
}

/// Sample-count-weighted average of every parameter (FedAvg).
pub fn aggregate_initial(results: &[ClientResult]) -> Result<ModelParams> {
    let (sorted, weights) = sorted_weights(results)?;
    let mut out = sorted[0].theta_prime.zeros_like();
    let mut acc = vec![0.0f64; out.param_count()];
    for (r, &w) in sorted.iter().zip(&weights) {
        for (a, v) in acc.iter_mut().zip(r.theta_prime.iter_values()) {
            *a += w * v as f64;
        }
    }
    for (dst, a) in out.iter_values_mut().zip(acc) {
        *dst = a as f32;
    }
    Ok(out)
}

/// `w' + ratio * sum_n (|x_n|/|x|) theta'_n` on weights. Positions kept in
/// `w'` are copied through exactly; biases move by the amplified average of
/// `client_bias - w'_bias`.
pub fn aggregate_cs(
    w_prev_sparse: &ModelParams,
    results: &[ClientResult],
    ratio: f64,
) -> Result<ModelParams> {
    if ratio.is_nan() || ratio <= 0.0 {
        return Err(Error::Config {
            key: "aggregation_ratio".into(),
            reason: format!("must be positive, got {ratio}"),
        });
    }
    let (sorted, weights) = sorted_weights(results)?;
    w_prev_sparse.check_congruent(&sorted[0].theta_prime)?;

    for r in &sorted {
        for (prev, client) in w_prev_sparse.layers().iter().zip(r.theta_prime.layers()) {
            let hit = prev
                .weights()
                .values()
                .iter()
                .zip(client.weights().values())
                .position(|(&p, &c)| p != 0.0 && c != 0.0);
            if let Some(position) = hit {
                return Err(Error::ProtocolViolation {
                    client: r.client_id,
                    layer: prev.name().to_string(),
                    position,
                });
            }
        }
    }

    let mut out = w_prev_sparse.clone();
    for (li, layer) in out.layers_mut().iter_mut().enumerate() {
        let n_w = layer.weights().len();
        let mut w_acc = vec![0.0f64; n_w];
        let mut b_acc = vec![0.0f64; layer.bias().len()];
        let prev_bias = w_prev_sparse.layers()[li].bias().values();
        for (r, &w) in sorted.iter().zip(&weights) {
            let cl = &r.theta_prime.layers()[li];
            for (a, &v) in w_acc.iter_mut().zip(cl.weights().values()) {
                *a += w * v as f64;
            }
            for ((a, &v), &p) in b_acc.iter_mut().zip(cl.bias().values()).zip(prev_bias) {
                *a += w * (v as f64 - p as f64);
            }
        }
        for (dst, a) in layer.weights_mut().iter_mut().zip(w_acc) {
            if *dst == 0.0 {
                *dst = (ratio * a) as f32;
            }
        }
        for (dst, a) in layer.bias_mut().iter_mut().zip(b_acc) {
            *dst = (*dst as f64 + ratio * a) as f32;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ServerState {
    pub round: usize,
    /// Model sent to clients: `w'` after pruning (the random dense `w_0` before
    /// round 0).
    pub global_sparse: ModelParams,
    pub mask: Mask,
    /// Last aggregate before pruning.
    pub aggregated_dense: ModelParams,
    pub config: ExperimentConfig,
}

impl ServerState {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let w0 = init_random(&config.arch, config.seed)?;
        Ok(Self {
            round: 0,
            mask: Mask::zeros_for(&w0),
            aggregated_dense: w0.clone(),
            global_sparse: w0,
            config,
        })
    }
}

/// One row per round.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub participants: Vec<usize>,
    pub acc_sparse: f64,
    pub acc_dense: f64,
    pub loss_sparse: f64,
    pub loss_dense: f64,
    pub server_sparsity: Sparsity,
    pub client_sparsity: Sparsity,
    pub bytes_down: u64,
    pub bytes_up: u64,
    pub mask_bytes_down: u64,
    pub dense_bytes_down: u64,
    pub dense_bytes_up: u64,
    pub client_flops_total: u64,
    pub dense_flops_total: u64,
    pub flops_saved_fraction: f64,
    /// Positions where the new mask differs from the previous round's.
    pub mask_changes: usize,
}

struct ClientOutcome {
    result: ClientResult,
    sparse_flops: u64,
    dense_flops: u64,
    uplink: WirePacket,
}

/// Executes one round for `participants` (client id, local data), updating
/// `state` and `ledger`. The new models are evaluated on `test`.
pub fn run_round(
    state: &mut ServerState,
    participants: &[(usize, &Dataset)],
    test: &Dataset,
    ledger: &mut ByteLedger,
    exec: Execution,
) -> Result<RoundMetrics> {
    if participants.is_empty() {
        return Err(Error::Empty("participants"));
    }
    let cfg = &state.config;
    let t = state.round;
    let cs = cfg.mode == Mode::Cs;
    let round_tag = t as u32;
    let received = &state.global_sparse;
    let received_mask = derive_mask(received);
    let complement = invert_mask(&state.mask);

    let down = WirePacket::model(Direction::ServerToClient, round_tag, received, cs)?;
    let mask_packet = match (cs, cfg.ledger_mode) {
        (true, LedgerMode::MaskSent) => Some(WirePacket::mask(
            Direction::ServerToClient,
            round_tag,
            &state.mask,
        )?),
        _ => None,
    };
    let dense_len = dense_size(received);
    for _ in participants {
        ledger.record(&down, dense_len);
        if let Some(m) = &mask_packet {
            ledger.record(m, 0);
        }
    }

    let outcomes = exec.map(participants, |&(id, data)| -> Result<ClientOutcome> {
        let theta = train_local(received, data, &cfg.hp)?;
        let theta_prime = if cs {
            apply_mask(&theta, &complement)?
        } else {
            theta.clone()
        };
        let active = active_counts(received, &theta)?;
        let flops = training_flops(
            &cfg.arch,
            &received_mask,
            &active,
            data.len(),
            cfg.hp.local_epochs,
        )?;
        let uplink = WirePacket::model(Direction::ClientToServer, round_tag, &theta_prime, cs)?;
        Ok(ClientOutcome {
            result: ClientResult {
                client_id: id,
                theta_prime,
                sample_count: data.len(),
            },
            sparse_flops: flops.sparse_total,
            dense_flops: flops.dense_total,
            uplink,
        })
    });
    let mut outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    outcomes.sort_by_key(|o| o.result.client_id);

    let mut sparse_flops = 0u64;
    let mut dense_flops = 0u64;
    for o in &outcomes {
        ledger.record(&o.uplink, dense_size(&o.result.theta_prime));
        sparse_flops += o.sparse_flops;
        dense_flops += o.dense_flops;
    }
    let results: Vec<ClientResult> = outcomes.into_iter().map(|o| o.result).collect();

    let dense = if t == 0 || !cs {
        aggregate_initial(&results)?
    } else {
        aggregate_cs(received, &results, cfg.aggregation_ratio)?
    };
    let (sparse, mask) = if cs {
        prune(&dense, cfg.server_sparsity)?
    } else {
        let m = derive_mask(&dense);
        (dense.clone(), m)
    };

    let (acc_dense, loss_dense) = evaluate(&dense, test)?;
    let (acc_sparse, loss_sparse) = evaluate(&sparse, test)?;
    let bytes = ledger.round(round_tag).cloned().unwrap_or_default();
    let mut participants_sorted: Vec<usize> = participants.iter().map(|p| p.0).collect();
    participants_sorted.sort_unstable();

    let metrics = RoundMetrics {
        round: t,
        participants: participants_sorted,
        acc_sparse,
        acc_dense,
        loss_sparse,
        loss_dense,
        server_sparsity: sparsity(&sparse),
        client_sparsity: client_sparsity_stats(&results)?,
        bytes_down: bytes.bytes_down,
        bytes_up: bytes.bytes_up,
        mask_bytes_down: bytes.mask_down,
        dense_bytes_down: bytes.dense_down,
        dense_bytes_up: bytes.dense_up,
        client_flops_total: sparse_flops,
        dense_flops_total: dense_flops,
        flops_saved_fraction: if dense_flops == 0 {
            0.0
        } else {
            1.0 - sparse_flops as f64 / dense_flops as f64
        },
        mask_changes: if t == 0 { 0 } else { mask.hamming(&state.mask) },
    };

    state.aggregated_dense = dense;
    state.global_sparse = sparse;
    state.mask = mask;
    state.round += 1;
    Ok(metrics)
}

/// Uniformly samples `k` of `n` clients without replacement, ascending.
pub fn sample_clients(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut ids = rand::seq::index::sample(rng, n, k).into_vec();
    ids.sort_unstable();
    ids
}

/// Full run: `config.rounds` rounds, each over a fresh uniform sample of
/// `clients_per_round` clients. Deterministic in `config.seed`.
pub fn run_experiment(
    config: &ExperimentConfig,
    partition: &Partition,
    test: &Dataset,
    exec: Execution,
) -> Result<Vec<RoundMetrics>> {
    Ok(run_experiment_with_state(config, partition, test, exec)?.0)
}

/// [`run_experiment`], also returning the final server state and ledger.
pub fn run_experiment_with_state(
    config: &ExperimentConfig,
    partition: &Partition,
    test: &Dataset,
    exec: Execution,
) -> Result<(Vec<RoundMetrics>, ServerState, ByteLedger)> {
    if config.clients_per_round > config.n_clients {
        return Err(Error::Config {
            key: "clients_per_round".into(),
            reason: format!(
                "{} exceeds n_clients {}",
                config.clients_per_round, config.n_clients
            ),
        });
    }
    if partition.client_count() != config.n_clients {
        return Err(Error::Config {
            key: "n_clients".into(),
            reason: format!(
                "partition has {} shards, config says {}",
                partition.client_count(),
                config.n_clients
            ),
        });
    }
    let mut state = ServerState::new(config.clone())?;
    let mut ledger = ByteLedger::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let shards = partition.shards();
    let mut out = Vec::with_capacity(config.rounds);
    for _ in 0..config.rounds {
        let ids = sample_clients(&mut rng, config.n_clients, config.clients_per_round);
        let participants: Vec<(usize, &Dataset)> = ids.iter().map(|&i| (i, &shards[i])).collect();
        out.push(run_round(
            &mut state,
            &participants,
            test,
            &mut ledger,
            exec,
        )?);
    }
    Ok((out, state, ledger))
}
