//! End-to-end fitting: item2vec, view registry, phase one, phase two.

use std::collections::BTreeSet;

use crate::baskets::{build_baskets, BasketDataset};
use crate::error::{NamError, Result};
use crate::eval::{make_cold_split, ColdSplit};
use crate::ingest::{build_registry, ContentEncoders, MetadataTable, RegistryConfig, RegistryInputs};
use crate::item2vec::{export_cf_view, train_sgns, SgnsConfig};
use crate::model::NamModel;
use crate::training::{build_pair_dataset, train_phase1, train_phase2, NegativeSampler, PositivePair, TrainConfig, TrainReport};
use crate::views::{Catalog, DirectViewTable, ItemIdx, ViewRegistry};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub sgns: SgnsConfig,
    pub train: TrainConfig,
    /// Pretrain and register the CF view.
    pub use_cf: bool,
    pub registry: RegistryConfig,
    /// Fraction of the catalog simulated as cold in [`run_fold`].
    pub cold_fraction: Option<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            sgns: SgnsConfig::default(),
            train: TrainConfig::default(),
            use_cf: true,
            registry: RegistryConfig::default(),
            cold_fraction: None,
        }
    }
}

/// Item universe and side information shared by every fold.
#[derive(Debug, Clone, Copy)]
pub struct Corpus<'a> {
    pub catalog: &'a Catalog,
    pub metadata: Option<&'a MetadataTable>,
    pub dense: &'a [DirectViewTable],
}

#[derive(Debug, Clone)]
pub struct Fitted {
    pub model: NamModel,
    pub registry: ViewRegistry,
    pub encoders: ContentEncoders,
    pub sgns_losses: Vec<f64>,
    pub phase1: TrainReport,
    pub phase2: TrainReport,
}

/// Builds the registry for `train` (CF from item2vec when enabled) without
/// training the NAM towers.
pub fn prepare_registry(
    corpus: Corpus<'_>,
    train: &BasketDataset,
    config: &PipelineConfig,
) -> Result<(ViewRegistry, ContentEncoders, Vec<f64>)> {
    let n = corpus.catalog.len();
    let (cf, sgns_losses) = if config.use_cf {
        let run = train_sgns(train, n, &config.sgns)?;
        (Some(export_cf_view(&run.model, corpus.catalog)?), run.epoch_losses)
    } else {
        (None, Vec::new())
    };
    let training_items: BTreeSet<ItemIdx> = train.items().into_iter().collect();
    let (registry, encoders) = build_registry(
        RegistryInputs {
            catalog: corpus.catalog.clone(),
            metadata: corpus.metadata,
            cf,
            dense: corpus.dense.to_vec(),
            training_items: Some(&training_items),
        },
        &config.registry,
    )?;
    Ok((registry, encoders, sgns_losses))
}

/// Runs the whole training pipeline on `train`.
pub fn fit(corpus: Corpus<'_>, train: &BasketDataset, config: &PipelineConfig) -> Result<Fitted> {
    if train.is_empty() {
        return Err(NamError::Training("no training baskets".into()));
    }
    let (registry, encoders, sgns_losses) = prepare_registry(corpus, train, config)?;
    let mut model = NamModel::new(&registry, config.train.z_t, config.train.z_a(), config.train.seed)?;
    let pairs = build_pair_dataset(train);
    let sampler = NegativeSampler::from_baskets(train, corpus.catalog.len());
    log::info!(
        "training on {} baskets, {} positive pairs, {} views",
        train.len(),
        pairs.len(),
        registry.num_views()
    );
    let phase1 = train_phase1(&mut model, &pairs, &registry, &sampler, &config.train)?;
    let phase2 = train_phase2(&mut model, &pairs, &registry, &sampler, &config.train)?;
    Ok(Fitted {
        model,
        registry,
        encoders,
        sgns_losses,
        phase1,
        phase2,
    })
}

/// Everything needed to evaluate one train/test partition.
#[derive(Debug, Clone)]
pub struct Fold {
    pub fitted: Fitted,
    pub split: ColdSplit,
    pub test_pairs: Vec<PositivePair>,
    pub train: BasketDataset,
}

/// Applies the optional cold split to the training baskets, fits, and
/// collects test pairs. Catalog items absent from the training baskets are
/// cold as well, since they never get CF data.
pub fn run_fold(
    corpus: Corpus<'_>,
    train_histories: &[Vec<ItemIdx>],
    test_histories: &[Vec<ItemIdx>],
    config: &PipelineConfig,
    seed: u64,
) -> Result<Fold> {
    let (train, _) = build_baskets(train_histories.iter().cloned());
    let (test, _) = build_baskets(test_histories.iter().cloned());
    let (mut split, train) = match config.cold_fraction {
        Some(f) => {
            let (split, filtered, dropped) = make_cold_split(corpus.catalog, &train, f, seed)?;
            log::info!("cold split: {} cold items, {dropped} baskets dropped", split.cold_items.len());
            (split, filtered)
        }
        None => (ColdSplit::all_warm(corpus.catalog), train),
    };
    let seen: BTreeSet<ItemIdx> = train.items().into_iter().collect();
    let unseen: Vec<ItemIdx> = split.warm_items.iter().copied().filter(|i| !seen.contains(i)).collect();
    for i in unseen {
        split.warm_items.remove(&i);
        split.cold_items.insert(i);
    }
    let fitted = fit(corpus, &train, config)?;
    Ok(Fold {
        fitted,
        split,
        test_pairs: build_pair_dataset(&test),
        train,
    })
}
