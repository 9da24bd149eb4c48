//! Shared training protocol for adapters and baselines: shuffled minibatch
//! Adam steps, validation-best snapshot selection, multi-seed aggregation
//! and epoch timing.

mod prepared;
mod report;

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use prepared::{Input, Prepared, PreparedClip};
pub use report::{aggregate, read_records, render_tables, BenchRecord, RunReport, SeedRow, BENCH_SCHEMA, REPORT_SCHEMA};

use crate::autodiff::{argmax, AdamState, ParamStore, Tape, Tensor, Var};
use crate::baselines::{fine_tune, BaselineConfig, BlCnn, Probe};
use crate::data::Split;
use crate::error::{Error, Result};
use crate::reprogramming::{chunk_average, Adapter, AdapterConfig, NmrMethod};
use crate::rng::stream_rng;
use crate::source::{Checkpoint, SourceModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ii,
    Id,
    Ids,
    BlCnn,
    BlFt,
    BlRep,
}

impl Method {
    /// Report order: adapters first, then baselines.
    pub const ALL: [Method; 6] = [Method::Ii, Method::Id, Method::Ids, Method::BlCnn, Method::BlFt, Method::BlRep];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ii => "ii",
            Method::Id => "id",
            Method::Ids => "ids",
            Method::BlCnn => "bl_cnn",
            Method::BlFt => "bl_ft",
            Method::BlRep => "bl_rep",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::Ii => "II-NMR",
            Method::Id => "ID-NMR",
            Method::Ids => "IDS-NMR",
            Method::BlCnn => "BL-CNN",
            Method::BlFt => "BL-FT",
            Method::BlRep => "BL-Rep",
        }
    }

    pub fn nmr(self) -> Option<NmrMethod> {
        match self {
            Method::Ii => Some(NmrMethod::Ii),
            Method::Id => Some(NmrMethod::Id),
            Method::Ids => Some(NmrMethod::Ids),
            _ => None,
        }
    }

    pub fn input(self) -> Input {
        match self {
            Method::Ii => Input::Waveform,
            Method::BlRep => Input::Representation,
            _ => Input::Features,
        }
    }

    /// Whether the method's numbers depend on the source model.
    pub fn uses_source(self) -> bool {
        self != Method::BlCnn
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown method `{s}`; expected one of ii, id, ids, bl_cnn, bl_ft, bl_rep")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub method: Method,
    pub epochs: usize,
    pub lr: f32,
    pub seeds: Vec<u64>,
    pub batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::Ids,
            epochs: 100,
            lr: 1e-4,
            seeds: vec![0, 1, 2, 3, 4],
            batch_size: 16,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("run.epochs", "must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("run.seeds", "must list at least one seed"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("run.batch_size", "must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("run.lr", "must be a finite non-negative number"));
        }
        Ok(())
    }
}

/// Everything a run needs besides its own config.
pub struct Context<'a> {
    pub prepared: &'a Prepared<'a>,
    pub adapter: &'a AdapterConfig,
    pub baselines: &'a BaselineConfig,
}

impl Context<'_> {
    pub fn source(&self) -> &SourceModel {
        self.prepared.source
    }
}

/// The trainable part of a method together with how it scores a clip.
#[derive(Clone, Debug)]
pub enum Trainee<'a> {
    Nmr { adapter: Adapter, source: &'a SourceModel },
    Cnn(BlCnn),
    FineTune(SourceModel),
    Probe(Probe),
}

impl<'a> Trainee<'a> {
    pub fn new(method: Method, ctx: &Context<'a>, seed: u64) -> Result<Self> {
        let k = ctx.prepared.num_classes();
        let source = ctx.prepared.source;
        Ok(match method {
            Method::Ii | Method::Id | Method::Ids => Trainee::Nmr {
                adapter: Adapter::new(method.nmr().expect("nmr method"), ctx.adapter, source, k, seed)?,
                source,
            },
            Method::BlCnn => Trainee::Cnn(BlCnn::new(&ctx.baselines.cnn, k, seed)?),
            Method::BlFt => Trainee::FineTune(fine_tune(source, k, seed)?),
            Method::BlRep => Trainee::Probe(Probe::new(source.tap_dim(), &ctx.baselines.probe, k, seed)?),
        })
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Trainee::Nmr { adapter, .. } => &adapter.params,
            Trainee::Cnn(m) => &m.params,
            Trainee::FineTune(m) => &m.params,
            Trainee::Probe(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Trainee::Nmr { adapter, .. } => &mut adapter.params,
            Trainee::Cnn(m) => &mut m.params,
            Trainee::FineTune(m) => &mut m.params,
            Trainee::Probe(m) => &mut m.params,
        }
    }

    pub fn method(&self) -> Method {
        match self {
            Trainee::Nmr { adapter, .. } => match adapter.method {
                NmrMethod::Ii => Method::Ii,
                NmrMethod::Id => Method::Id,
                NmrMethod::Ids => Method::Ids,
            },
            Trainee::Cnn(_) => Method::BlCnn,
            Trainee::FineTune(_) => Method::BlFt,
            Trainee::Probe(_) => Method::BlRep,
        }
    }

    /// Trained parameters as a checkpoint. Adapters record the source
    /// checksum and label map; baselines record only their method.
    pub fn to_checkpoint(&self, source_checksum: &str) -> Checkpoint {
        match self {
            Trainee::Nmr { adapter, .. } => adapter.to_checkpoint(source_checksum),
            _ => Checkpoint {
                metadata: serde_json::json!({ "kind": "baseline", "method": self.method().name() }),
                params: self.params().clone(),
            },
        }
    }

    /// Scalars in the optimizer set and in the whole deployed model.
    pub fn param_counts(&self) -> (usize, usize) {
        let trainable = self.params().count_trainable();
        let total = match self {
            Trainee::Nmr { source, .. } => trainable + source.count_params(),
            _ => self.params().count_total(),
        };
        (trainable, total)
    }

    fn chunk_probs(&self, tape: &mut Tape<f32>, x: Var) -> Result<Var> {
        let logits = match self {
            Trainee::Nmr { .. } => unreachable!("adapters score whole clips"),
            Trainee::Cnn(m) => m.logits(tape, x)?,
            Trainee::FineTune(m) => m.logits(tape, x)?,
            Trainee::Probe(m) => m.logits(tape, x)?,
        };
        tape.softmax(logits)
    }

    /// Target scores `[1, K_T]` of one clip, averaged over its chunks. For
    /// adapters these are raw label-map means and need renormalizing before
    /// they can serve as a distribution.
    pub fn clip_scores(&self, tape: &mut Tape<f32>, chunks: &[Tensor<f32>]) -> Result<Var> {
        match self {
            Trainee::Nmr { adapter, source } => adapter.clip_scores(source, tape, chunks),
            _ => {
                let rows = chunks
                    .iter()
                    .map(|c| {
                        let x = tape.constant(c.clone());
                        self.chunk_probs(tape, x)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let all = tape.concat_rows(&rows)?;
                tape.mean_rows(all)
            }
        }
    }

    /// Clip scores from the evaluation path; argmax is the prediction.
    pub fn predict(&self, chunks: &[Tensor<f32>]) -> Result<Vec<f32>> {
        match self {
            Trainee::Nmr { adapter, source } => adapter.predict_clip(source, chunks),
            _ => {
                let per_chunk = chunks
                    .iter()
                    .map(|c| {
                        let mut tape = Tape::<f32>::new();
                        let x = tape.constant(c.clone());
                        let p = self.chunk_probs(&mut tape, x)?;
                        Ok(tape.value(p).data().to_vec())
                    })
                    .collect::<Result<Vec<_>>>()?;
                chunk_average(&per_chunk)
            }
        }
    }

    pub fn accuracy(&self, clips: &[PreparedClip]) -> Result<f64> {
        if clips.is_empty() {
            return Err(Error::EmptyInput("evaluation split"));
        }
        let mut correct = 0usize;
        for c in clips {
            correct += usize::from(argmax(&self.predict(&c.chunks)?) == c.label);
        }
        Ok(correct as f64 / clips.len() as f64)
    }

    /// Mean negative log-likelihood of a batch under renormalized scores.
    pub fn batch_loss(&self, tape: &mut Tape<f32>, clips: &[&PreparedClip]) -> Result<Var> {
        let rows = clips
            .iter()
            .map(|c| self.clip_scores(tape, &c.chunks))
            .collect::<Result<Vec<_>>>()?;
        let scores = tape.concat_rows(&rows)?;
        let probs = tape.normalize(scores)?;
        let labels: Vec<usize> = clips.iter().map(|c| c.label).collect();
        tape.nll(probs, &labels)
    }
}

/// Result of training one seed.
#[derive(Clone, Debug)]
pub struct TrainOutcome<'a> {
    /// Trainee restored to the best validation epoch.
    pub trainee: Trainee<'a>,
    pub row: SeedRow,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub val_history: Vec<f64>,
}

fn check_optimizer_set(method: Method, params: &ParamStore) -> Result<()> {
    if method.nmr().is_some() {
        if let Some(p) = params.iter().find(|p| p.frozen || p.name.starts_with("source.")) {
            return Err(Error::Contract(format!("optimizer set contains frozen parameter `{}`", p.name)));
        }
    }
    Ok(())
}

fn run_epoch(
    trainee: &mut Trainee<'_>,
    adam: &mut AdamState,
    train: &[PreparedClip],
    order: &[usize],
    batch_size: usize,
    epoch: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for (b, batch) in order.chunks(batch_size).enumerate() {
        let clips: Vec<&PreparedClip> = batch.iter().map(|&i| &train[i]).collect();
        let mut tape = Tape::<f32>::new();
        let loss = trainee.batch_loss(&mut tape, &clips)?;
        let grads = tape.backward(loss)?;
        grads.accumulate_into(trainee.params_mut());
        let value = f64::from(tape.value(loss).data()[0]);
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: b,
                grad_norm: trainee.params().grad_norm(),
            });
        }
        adam.step(trainee.params_mut())?;
        total += value * batch.len() as f64;
    }
    Ok(total / order.len().max(1) as f64)
}

/// Trains one seed and evaluates the best validation snapshot on test.
pub fn train<'a>(cfg: &RunConfig, ctx: &Context<'a>, seed: u64) -> Result<TrainOutcome<'a>> {
    cfg.validate()?;
    let method = cfg.method;
    let input = method.input();
    let train = ctx.prepared.get(input, Split::Train)?;
    let val = ctx.prepared.get(input, Split::Val)?;
    let test = ctx.prepared.get(input, Split::Test)?;
    if train.is_empty() {
        return Err(Error::EmptyInput("training split"));
    }
    let mut trainee = Trainee::new(method, ctx, seed)?;
    check_optimizer_set(method, trainee.params())?;

    let mut adam = AdamState::new(cfg.lr);
    let mut shuffle = stream_rng(seed, &format!("shuffle/{}", method.name()));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut val_history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        epoch_losses.push(run_epoch(&mut trainee, &mut adam, train, &order, cfg.batch_size, epoch)?);
        let acc = trainee.accuracy(val)?;
        val_history.push(acc);
        if best.as_ref().map_or(true, |(b, _, _)| acc > *b) {
            best = Some((acc, epoch, trainee.params().clone()));
        }
    }
    let (val_acc, best_epoch, snapshot) = best.expect("at least one epoch");
    *trainee.params_mut() = snapshot;
    let test_acc = trainee.accuracy(test)?;
    Ok(TrainOutcome {
        trainee,
        row: SeedRow {
            seed,
            best_epoch,
            val_acc,
            test_acc,
        },
        epoch_losses,
        val_history,
    })
}

/// Trains every configured seed in order and aggregates test accuracy.
pub fn multi_seed(cfg: &RunConfig, ctx: &Context<'_>, model_name: &str) -> Result<RunReport> {
    multi_seed_with(cfg, ctx, model_name, |_| Ok(()))
}

/// [`multi_seed`], handing each seed's outcome to `on_seed` before moving on.
pub fn multi_seed_with<'a>(
    cfg: &RunConfig,
    ctx: &Context<'a>,
    model_name: &str,
    mut on_seed: impl FnMut(&TrainOutcome<'a>) -> Result<()>,
) -> Result<RunReport> {
    cfg.validate()?;
    let source_before = ctx.source().checksum();
    let mut rows = Vec::with_capacity(cfg.seeds.len());
    let mut counts = (0, 0);
    for &seed in &cfg.seeds {
        let out = train(cfg, ctx, seed)?;
        counts = out.trainee.param_counts();
        on_seed(&out)?;
        rows.push(out.row);
    }
    Ok(RunReport::new(cfg, model_name, rows, counts, source_before, ctx.source().checksum()))
}

/// Median wall-clock seconds of one training epoch over three measured
/// epochs after one warm-up epoch, with every sample.
pub fn bench_epoch(cfg: &RunConfig, ctx: &Context<'_>, seed: u64) -> Result<(f64, Vec<f64>)> {
    cfg.validate()?;
    let train = ctx.prepared.get(cfg.method.input(), Split::Train)?;
    let mut trainee = Trainee::new(cfg.method, ctx, seed)?;
    check_optimizer_set(cfg.method, trainee.params())?;
    let mut adam = AdamState::new(cfg.lr);
    let order: Vec<usize> = (0..train.len()).collect();
    run_epoch(&mut trainee, &mut adam, train, &order, cfg.batch_size, 0)?;
    let mut samples = Vec::with_capacity(3);
    for epoch in 1..=3 {
        let t0 = Instant::now();
        run_epoch(&mut trainee, &mut adam, train, &order, cfg.batch_size, epoch)?;
        samples.push(t0.elapsed().as_secs_f64());
    }
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    Ok((sorted[1], samples))
}

#[cfg(test)]
mod tests;
