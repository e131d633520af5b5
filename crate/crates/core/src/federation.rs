//! FedAvg simulation with per-client shift plans and clean rehearsal buffers.

use std::borrow::Cow;
use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corruptions::{apply_corruption, Severity, ShiftCorruption, MAX_LEVEL};
use crate::error::{Error, Result};
use crate::nn::{init_params, loss_and_grad, sgd_step, ModelParams};
use crate::rng::StreamKey;
use crate::tasks::{gen_classification_patched, gen_segmentation, shard_clients, ClientShard, TaskDataset, TaskKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub samples: usize,
    pub height: usize,
    pub width: usize,
    /// Ignored for segmentation (always 2).
    pub classes: usize,
    /// Pixel noise of the clean classification images.
    pub noise_sigma: f64,
    pub test_fraction: f64,
    pub data_seed: u64,
    /// Side of the centred stripe square (classification only, 0 = whole image).
    pub stripe_patch: usize,
}

impl TaskConfig {
    pub fn classification() -> Self {
        TaskConfig {
            kind: TaskKind::Classification,
            samples: 2000,
            height: 16,
            width: 16,
            classes: 2,
            noise_sigma: 0.05,
            test_fraction: 0.2,
            data_seed: 1,
            stripe_patch: crate::tasks::DEFAULT_STRIPE_PATCH,
        }
    }

    pub fn segmentation() -> Self {
        TaskConfig {
            kind: TaskKind::Segmentation,
            samples: 400,
            classes: 2,
            ..TaskConfig::classification()
        }
    }

    pub fn input_dim(&self) -> usize {
        match self.kind {
            TaskKind::Classification => self.height * self.width,
            TaskKind::Segmentation => crate::tasks::NEIGHBOURHOOD,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.kind {
            TaskKind::Classification => self.classes,
            TaskKind::Segmentation => 2,
        }
    }

    pub fn generate(&self) -> Result<TaskData> {
        let full = match self.kind {
            TaskKind::Classification => gen_classification_patched(
                self.samples,
                self.height,
                self.width,
                self.classes,
                self.noise_sigma,
                self.data_seed,
                self.stripe_patch,
            )?,
            TaskKind::Segmentation => gen_segmentation(self.samples, self.height, self.width, self.data_seed)?,
        };
        let (train, test) = full.split_holdout(self.test_fraction)?;
        if test.is_empty() {
            return Err(Error::InvalidConfig("test split is empty".into()));
        }
        Ok(TaskData {
            train: Arc::new(train),
            test: Arc::new(test),
        })
    }
}

/// Training split (sharded across clients) and the clean global test split.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub train: Arc<TaskDataset>,
    pub test: Arc<TaskDataset>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub task: TaskConfig,
    /// Hidden layer widths; input and output widths come from the task.
    pub hidden: Vec<usize>,
    pub total_clients: usize,
    pub clients_per_round: usize,
    pub local_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub rounds_cd: usize,
    pub rounds_cf: usize,
    pub rehearsal_fraction: f64,
    pub shift: ShiftCorruption,
    /// Strength of the shifted clients during the client-drift phase.
    pub cd_level: u8,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            task: TaskConfig::classification(),
            hidden: vec![64],
            total_clients: 20,
            clients_per_round: 10,
            local_epochs: 1,
            lr: 0.065,
            batch_size: 32,
            rounds_cd: 60,
            rounds_cf: 30,
            rehearsal_fraction: 0.0,
            shift: ShiftCorruption::single(crate::corruptions::CorruptionKind::GaussianNoise),
            cd_level: MAX_LEVEL,
        }
    }
}

impl FederationConfig {
    pub fn segmentation() -> Self {
        FederationConfig {
            task: TaskConfig::segmentation(),
            hidden: vec![16],
            lr: 1.0,
            shift: ShiftCorruption::single(crate::corruptions::CorruptionKind::OcclusionOverlay),
            ..FederationConfig::default()
        }
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.task.input_dim()];
        dims.extend(&self.hidden);
        dims.push(self.task.output_dim());
        dims
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.total_clients == 0 {
            return fail("total_clients must be >= 1".into());
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.total_clients {
            return fail(format!(
                "clients_per_round must be in 1..={}, got {}",
                self.total_clients, self.clients_per_round
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if self.rounds_cd == 0 || self.rounds_cf == 0 {
            return fail("rounds_cd and rounds_cf must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.rehearsal_fraction) {
            return fail(format!(
                "rehearsal_fraction must be in [0, 1), got {}",
                self.rehearsal_fraction
            ));
        }
        if self.cd_level > MAX_LEVEL {
            return fail(format!("cd_level must be <= {MAX_LEVEL}"));
        }
        if self.hidden.contains(&0) {
            return fail("hidden widths must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.shift.opacity) {
            return fail("shift opacity must be in [0, 1]".into());
        }
        self.shift.validate()
    }
}

/// Which clients train on corrupted data, and how strongly.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftPlan {
    pub shifted_ratio: f64,
    pub severity: Severity,
    pub shifted_client_ids: BTreeSet<usize>,
}

impl ShiftPlan {
    /// Shifted ids are the first `ceil(ratio * c)` entries of one seeded
    /// permutation of `0..c`, so sets are nested as the ratio grows.
    pub fn new(shifted_ratio: f64, severity: Severity, total_clients: usize, key: StreamKey) -> Result<Self> {
        if !(0.0..=1.0).contains(&shifted_ratio) {
            return Err(Error::InvalidConfig(format!(
                "shifted ratio must be in [0, 1], got {shifted_ratio}"
            )));
        }
        let count = ((shifted_ratio * total_clients as f64) - 1e-9).ceil().max(0.0) as usize;
        let mut order: Vec<usize> = (0..total_clients).collect();
        order.shuffle(&mut key.child("shifted-clients", 0).rng());
        Ok(ShiftPlan {
            shifted_ratio,
            severity,
            shifted_client_ids: order[..count.min(total_clients)].iter().copied().collect(),
        })
    }

    pub fn clean(total_clients: usize, key: StreamKey) -> Self {
        ShiftPlan::new(0.0, Severity::Level(0), total_clients, key).expect("ratio 0 is valid")
    }

    pub fn is_shifted(&self, client_id: usize) -> bool {
        !self.severity.is_identity() && self.shifted_client_ids.contains(&client_id)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingHistory {
    /// Clean-test metric after each aggregation round.
    pub metrics: Vec<f64>,
}

impl TrainingHistory {
    pub fn rounds(&self) -> usize {
        self.metrics.len()
    }

    pub fn final_metric(&self) -> Option<f64> {
        self.metrics.last().copied()
    }

    /// CSV rows `run_id,round,metric` (rounds are 1-based), without header.
    pub fn csv_rows(&self, run_id: &str) -> String {
        self.metrics
            .iter()
            .enumerate()
            .map(|(i, m)| format!("{run_id},{},{}\n", i + 1, crate::io::fmt_f64(*m)))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: ModelParams,
    pub num_samples: usize,
}

/// Sample-size weighted parameter mean. Summation runs in client-id order, so
/// the result does not depend on the order of `updates`.
pub fn aggregate(updates: &[ClientUpdate]) -> Result<ModelParams> {
    let first = updates
        .first()
        .ok_or_else(|| Error::InvalidConfig("cannot aggregate zero clients".into()))?;
    let mut ordered: Vec<&ClientUpdate> = updates.iter().collect();
    ordered.sort_by_key(|u| u.client_id);
    if ordered.windows(2).any(|p| p[0].client_id == p[1].client_id) {
        return Err(Error::InvalidInput("duplicate client id in aggregation".into()));
    }
    if let Some(bad) = ordered.iter().find(|u| !u.params.same_shape(&first.params)) {
        return Err(Error::Shape(format!(
            "client {} params {:?} differ from {:?}",
            bad.client_id,
            bad.params.layer_dims(),
            first.params.layer_dims()
        )));
    }
    let total: usize = ordered.iter().map(|u| u.num_samples).sum();
    if total == 0 {
        return Err(Error::InvalidConfig("aggregation weights sum to zero".into()));
    }
    let mut acc = ModelParams::zeros(&first.params.layer_dims())?;
    for u in ordered {
        let w = u.num_samples as f64 / total as f64;
        for (a, p) in acc.iter_mut().zip(u.params.iter()) {
            *a += w * p;
        }
    }
    Ok(acc)
}

/// A configured federation for one seed: data, shards and rehearsal buffers.
#[derive(Debug, Clone)]
pub struct Federation {
    cfg: FederationConfig,
    data: TaskData,
    shards: Vec<ClientShard>,
    key: StreamKey,
}

impl Federation {
    pub fn new(cfg: FederationConfig, data: TaskData, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let key = StreamKey::root(seed);
        let shards = shard_clients(&data.train, cfg.total_clients, key.child("shards", 0).0)?
            .into_iter()
            .map(|s| s.with_rehearsal(cfg.rehearsal_fraction, key))
            .collect::<Result<Vec<_>>>()?;
        Ok(Federation { cfg, data, shards, key })
    }

    pub fn config(&self) -> &FederationConfig {
        &self.cfg
    }

    pub fn shards(&self) -> &[ClientShard] {
        &self.shards
    }

    pub fn data(&self) -> &TaskData {
        &self.data
    }

    pub fn key(&self) -> StreamKey {
        self.key
    }

    pub fn init_model(&self) -> Result<ModelParams> {
        init_params(&self.cfg.layer_dims(), self.key.child("model", 0).0)
    }

    pub fn plan(&self, ratio: f64, severity: Severity) -> Result<ShiftPlan> {
        ShiftPlan::new(ratio, severity, self.cfg.total_clients, self.key)
    }

    pub fn evaluate(&self, params: &ModelParams) -> Result<f64> {
        self.data.test.evaluate(params)
    }

    /// One client's local update starting from `global`.
    pub fn local_train(
        &self,
        global: &ModelParams,
        client_id: usize,
        plan: &ShiftPlan,
        round_idx: usize,
        stream: StreamKey,
    ) -> Result<ModelParams> {
        let shard = self
            .shards
            .get(client_id)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown client {client_id}")))?;
        if shard.is_empty() {
            return Err(Error::InvalidConfig(format!("client {client_id} has no samples")));
        }
        let train = &self.data.train;
        let shifted = plan.is_shifted(client_id);
        let key = stream.child("round", round_idx as u64).child("client", client_id as u64);
        let mut params = global.clone();
        let mut order = shard.train_samples.clone();
        for epoch in 0..self.cfg.local_epochs {
            order.copy_from_slice(&shard.train_samples);
            order.shuffle(&mut key.child("epoch", epoch as u64).rng());
            for chunk in order.chunks(self.cfg.batch_size) {
                let items = chunk
                    .iter()
                    .map(|&idx| {
                        let sample = &train.samples[idx];
                        let image = if shifted && !shard.is_rehearsal(idx) {
                            let spec = self.cfg.shift.spec_for(plan.severity, client_id, sample.id);
                            Cow::Owned(apply_corruption(&sample.image, &spec, sample.id)?)
                        } else {
                            Cow::Borrowed(&sample.image)
                        };
                        Ok((image, &sample.target))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let batch = train.batch(items)?;
                let (_, grads) = loss_and_grad(&params, &batch)?;
                params = sgd_step(&params, &grads, self.cfg.lr)?;
            }
        }
        Ok(params)
    }

    /// Mean training loss of `params` over one client's shard as served under `plan`.
    pub fn shard_loss(&self, params: &ModelParams, client_id: usize, plan: &ShiftPlan) -> Result<f64> {
        let shard = &self.shards[client_id];
        let train = &self.data.train;
        let shifted = plan.is_shifted(client_id);
        let items = shard
            .train_samples
            .iter()
            .map(|&idx| {
                let s = &train.samples[idx];
                let image = if shifted && !shard.is_rehearsal(idx) {
                    let spec = self.cfg.shift.spec_for(plan.severity, client_id, s.id);
                    Cow::Owned(apply_corruption(&s.image, &spec, s.id)?)
                } else {
                    Cow::Borrowed(&s.image)
                };
                Ok((image, &s.target))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(loss_and_grad(params, &train.batch(items)?)?.0)
    }

    /// Runs `rounds` FedAvg rounds from `start`, evaluating on the clean test
    /// split after every aggregation.
    pub fn run(
        &self,
        plan: &ShiftPlan,
        rounds: usize,
        start: &ModelParams,
        stream: StreamKey,
    ) -> Result<(ModelParams, TrainingHistory)> {
        if start.layer_dims() != self.cfg.layer_dims() {
            return Err(Error::Shape(format!(
                "start params {:?} do not match configured dims {:?}",
                start.layer_dims(),
                self.cfg.layer_dims()
            )));
        }
        let c = self.cfg.total_clients;
        let k = self.cfg.clients_per_round;
        let mut global = start.clone();
        let mut history = TrainingHistory::default();
        for round in 0..rounds {
            let mut rng = stream.child("sample-clients", round as u64).rng();
            let mut chosen = index::sample(&mut rng, c, k).into_vec();
            chosen.sort_unstable();
            let updates = chosen
                .par_iter()
                .map(|&id| {
                    Ok(ClientUpdate {
                        client_id: id,
                        params: self.local_train(&global, id, plan, round, stream)?,
                        num_samples: self.shards[id].len(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            global = aggregate(&updates)?;
            if !global.is_finite() {
                return Err(Error::Divergence { round });
            }
            history.metrics.push(self.evaluate(&global)?);
        }
        Ok((global, history))
    }
}

/// Convenience wrapper: build the federation for `seed` and run one phase.
pub fn run_federation(
    cfg: &FederationConfig,
    data: &TaskData,
    seed: u64,
    plan: &ShiftPlan,
    phase_rounds: usize,
    start: &ModelParams,
    stream: StreamKey,
) -> Result<(ModelParams, TrainingHistory)> {
    Federation::new(cfg.clone(), data.clone(), seed)?.run(plan, phase_rounds, start, stream)
}
