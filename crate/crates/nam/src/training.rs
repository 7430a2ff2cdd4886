//! Pair datasets, negative sampling and the two-phase training driver.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baskets::{BasketDataset, CoConsumptionIndex};
use crate::error::{NamError, Result};
use crate::math::{adam_step, AdamConfig, AdamState};
use crate::model::{ExampleGraph, LossConfig, NamModel, PairExample, ParamRole, Partition, Phase, ViewMode};
use crate::views::{ItemIdx, ViewRegistry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Negatives per positive pair.
    pub negatives: usize,
    pub lambda: f64,
    pub z_t: usize,
    /// Defaults to `z_t` when unset.
    pub z_a: Option<usize>,
    pub lr: f64,
    pub seed: u64,
    pub stop_gradient_psi: bool,
    pub include_positive_in_partition: bool,
    pub view_temperature: bool,
    /// Uniformly subsample positives per epoch above this count.
    pub max_pairs_per_epoch: Option<usize>,
    /// Restrict parameter updates to these views; gradients are still
    /// computed for all of them.
    pub train_views: Option<Vec<String>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 32,
            negatives: 4,
            lambda: 0.1,
            z_t: 100,
            z_a: None,
            lr: 1e-3,
            seed: 0,
            stop_gradient_psi: true,
            include_positive_in_partition: false,
            view_temperature: false,
            max_pairs_per_epoch: Some(1_000_000),
            train_views: None,
        }
    }
}

impl TrainConfig {
    pub fn z_a(&self) -> usize {
        self.z_a.unwrap_or(self.z_t)
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            stop_gradient_psi: self.stop_gradient_psi,
            partition: if self.include_positive_in_partition {
                Partition::WithPositive
            } else {
                Partition::NegativesOnly
            },
            view_temperature: self.view_temperature,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.negatives == 0 || self.z_t == 0 || self.z_a() == 0 {
            return Err(NamError::Domain(
                "batch_size, negatives, z_t and z_a must be positive".into(),
            ));
        }
        if !(self.lambda >= 0.0) {
            return Err(NamError::Domain(format!("lambda must be ≥ 0, got {}", self.lambda)));
        }
        if !(self.lr > 0.0) {
            return Err(NamError::Domain(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// An ordered co-consumed pair `(context, target)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct PositivePair {
    pub context: ItemIdx,
    pub target: ItemIdx,
}

/// Every ordered pair of distinct items of every basket. Pairs shared by
/// several baskets appear once per basket.
pub fn build_pair_dataset(baskets: &BasketDataset) -> Vec<PositivePair> {
    let mut out = Vec::new();
    for basket in baskets.baskets() {
        for &context in basket {
            for &target in basket {
                if context != target {
                    out.push(PositivePair { context, target });
                }
            }
        }
    }
    out
}

/// Draws negatives uniformly, with replacement, from the pool items never
/// co-consumed with the context.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    pool: Vec<ItemIdx>,
    in_pool: Vec<bool>,
    index: CoConsumptionIndex,
    eligible: Vec<usize>,
}

impl NegativeSampler {
    pub fn new(pool: Vec<ItemIdx>, index: CoConsumptionIndex, catalog_len: usize) -> Self {
        let mut in_pool = vec![false; catalog_len];
        for &i in &pool {
            in_pool[i.index()] = true;
        }
        let eligible = (0..catalog_len)
            .map(|k| {
                let item = ItemIdx(k as u32);
                let blocked = index.neighbours(item).iter().filter(|n| in_pool[n.index()]).count()
                    + usize::from(in_pool[k]);
                pool.len() - blocked
            })
            .collect();
        NegativeSampler {
            pool,
            in_pool,
            index,
            eligible,
        }
    }

    /// Pool = all items occurring in the baskets.
    pub fn from_baskets(baskets: &BasketDataset, catalog_len: usize) -> Self {
        NegativeSampler::new(baskets.items(), CoConsumptionIndex::new(baskets, catalog_len), catalog_len)
    }

    pub fn index(&self) -> &CoConsumptionIndex {
        &self.index
    }

    fn is_eligible(&self, context: ItemIdx, item: ItemIdx) -> bool {
        item != context && self.in_pool[item.index()] && !self.index.co_consumed(context, item)
    }

    /// Number of items negatives for `context` are drawn from.
    pub fn eligible_count(&self, context: ItemIdx) -> usize {
        self.eligible[context.index()]
    }

    pub fn sample<R: Rng + ?Sized>(&self, context: ItemIdx, n: usize, rng: &mut R) -> Result<Vec<ItemIdx>> {
        let eligible = self.eligible_count(context);
        if eligible == 0 {
            return Err(NamError::Sampling(format!(
                "no item outside the co-consumption set of {context}"
            )));
        }
        if eligible * 4 >= self.pool.len() {
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                let cand = self.pool[rng.gen_range(0..self.pool.len())];
                if self.is_eligible(context, cand) {
                    out.push(cand);
                }
            }
            Ok(out)
        } else {
            let candidates: Vec<ItemIdx> = self
                .pool
                .iter()
                .copied()
                .filter(|&c| self.is_eligible(context, c))
                .collect();
            Ok((0..n).map(|_| candidates[rng.gen_range(0..candidates.len())]).collect())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub phase: Phase,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub losses: Vec<EpochLoss>,
    /// Examples skipped because no negative could be drawn.
    pub skipped_sampling: usize,
    /// Examples skipped because the pair shared no view.
    pub skipped_no_view: usize,
}

fn phase_seed(seed: u64, phase: Phase) -> u64 {
    let tag = match phase {
        Phase::One => 0x9e37_79b9_7f4a_7c15,
        Phase::Two => 0xc2b2_ae3d_27d4_eb4f,
    };
    seed ^ tag
}

fn is_trainable(role: ParamRole, phase: Phase, config: &TrainConfig) -> bool {
    match (phase, role) {
        (_, ParamRole::Temperature) => config.view_temperature,
        (Phase::One, r) => r.is_embedding(),
        (Phase::Two, _) => true,
    }
}

/// Runs `config.epochs` epochs of minibatch Adam for one phase.
///
/// Per-example forward passes run in parallel; gradients are accumulated in
/// example order and the optimizer is applied serially, so results depend
/// only on the seed and the data.
pub fn train_phase(
    model: &mut NamModel,
    positives: &[PositivePair],
    registry: &ViewRegistry,
    sampler: &NegativeSampler,
    config: &TrainConfig,
    phase: Phase,
    mode: ViewMode,
) -> Result<TrainReport> {
    config.validate()?;
    model.validate(registry)?;
    let enabled = mode.enabled(registry.views());
    let loss_config = config.loss_config();
    let adam = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };
    let view_allowed: Vec<bool> = model
        .towers
        .iter()
        .map(|t| config.train_views.as_ref().is_none_or(|vs| vs.contains(&t.view.name)))
        .collect();
    let mut states = Vec::new();
    let mut trainable = Vec::new();
    model.visit_params(|view, role, p| {
        states.push(AdamState::for_param(p, adam));
        trainable.push(view_allowed[view] && is_trainable(role, phase, config));
    });

    let mut rng = ChaCha8Rng::seed_from_u64(phase_seed(config.seed, phase));
    let mut report = TrainReport::default();
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = match config.max_pairs_per_epoch {
            Some(cap) if positives.len() > cap => {
                rand::seq::index::sample(&mut rng, positives.len(), cap).into_vec()
            }
            _ => (0..positives.len()).collect(),
        };
        order.shuffle(&mut rng);

        let (mut loss_sum, mut loss_count) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let mut examples = Vec::with_capacity(chunk.len());
            for &k in chunk {
                let pair = positives[k];
                match sampler.sample(pair.context, config.negatives, &mut rng) {
                    Ok(negatives) => examples.push(PairExample {
                        context: pair.context,
                        target: pair.target,
                        negatives,
                    }),
                    Err(NamError::Sampling(_)) => report.skipped_sampling += 1,
                    Err(e) => return Err(e),
                }
            }
            let shared: &NamModel = model;
            let graphs: Vec<Result<ExampleGraph>> = examples
                .par_iter()
                .map(|ex| ExampleGraph::forward(shared, registry, ex, phase, &loss_config, &enabled))
                .collect();
            let mut live = Vec::with_capacity(graphs.len());
            for g in graphs {
                match g {
                    Ok(g) => live.push(g),
                    Err(NamError::NoActiveView) => report.skipped_no_view += 1,
                    Err(e) => return Err(e),
                }
            }
            if live.is_empty() {
                continue;
            }
            model.zero_grad();
            let scale = 1.0 / live.len() as f64;
            for g in &live {
                if !g.loss.is_finite() {
                    return Err(NamError::Training(format!(
                        "non-finite loss {} in phase {phase:?}, epoch {epoch}",
                        g.loss
                    )));
                }
                g.backward(model, registry, scale)?;
                loss_sum += g.loss;
                loss_count += 1;
            }
            let mut k = 0;
            model.visit_params_mut(|_, _, p| {
                if trainable[k] {
                    adam_step(p, &mut states[k]);
                }
                k += 1;
            });
        }
        let mean_loss = if loss_count == 0 {
            0.0
        } else {
            loss_sum / loss_count as f64
        };
        if !mean_loss.is_finite() {
            return Err(NamError::Training(format!(
                "non-finite epoch loss in phase {phase:?}, epoch {epoch}"
            )));
        }
        log::debug!("phase {phase:?} epoch {epoch}: mean loss {mean_loss:.6}");
        report.losses.push(EpochLoss {
            epoch: epoch + 1,
            phase,
            mean_loss,
        });
    }
    Ok(report)
}

/// View-dependent training of the context and target embedders.
pub fn train_phase1(
    model: &mut NamModel,
    positives: &[PositivePair],
    registry: &ViewRegistry,
    sampler: &NegativeSampler,
    config: &TrainConfig,
) -> Result<TrainReport> {
    train_phase(model, positives, registry, sampler, config, Phase::One, ViewMode::Nam)
}

/// Attentive multiview training.
pub fn train_phase2(
    model: &mut NamModel,
    positives: &[PositivePair],
    registry: &ViewRegistry,
    sampler: &NegativeSampler,
    config: &TrainConfig,
) -> Result<TrainReport> {
    train_phase(model, positives, registry, sampler, config, Phase::Two, ViewMode::Nam)
}

/// Writes `epoch,phase,mean_loss` rows after a `#` provenance comment.
pub fn write_loss_csv(path: &Path, losses: &[EpochLoss], comment: &str) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("# {comment}\n"));
    out.push_str("epoch,phase,mean_loss\n");
    for l in losses {
        let phase = match l.phase {
            Phase::One => "phase1",
            Phase::Two => "phase2",
        };
        out.push_str(&format!("{},{},{:?}\n", l.epoch, phase, l.mean_loss));
    }
    fs::write(path, out).map_err(|e| NamError::io(path, e))
}

const CHECKPOINT_FORMAT: &str = "nam-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Last phase trained, if any.
    pub phase: Option<Phase>,
    pub config: TrainConfig,
    pub model: NamModel,
}

/// JSON checkpoint with exact float round-trips. Written to a temporary file
/// and renamed into place.
pub fn save_checkpoint(model: &NamModel, config: &TrainConfig, phase: Option<Phase>, path: &Path) -> Result<()> {
    let ckpt = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        phase,
        config: config.clone(),
        model: model.clone(),
    };
    let bytes = serde_json::to_vec(&ckpt).map_err(|e| NamError::Checkpoint(e.to_string()))?;
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| NamError::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| NamError::io(&tmp, e))?;
    f.sync_all().map_err(|e| NamError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| NamError::io(path, e))
}

/// Loads a checkpoint and validates it against `registry`.
pub fn load_checkpoint(path: &Path, registry: &ViewRegistry) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| NamError::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_slice(&bytes)
        .map_err(|e| NamError::Checkpoint(format!("{}: {e}", path.display())))?;
    if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
        return Err(NamError::Checkpoint(format!(
            "unsupported checkpoint {} v{}",
            ckpt.format, ckpt.version
        )));
    }
    ckpt.model.validate(registry)?;
    Ok(ckpt)
}
