//! Skip-gram with negative sampling over baskets, used to pretrain the
//! collaborative-filtering view.
//!
//! Every ordered pair of distinct items in a basket is a positive example; no
//! window is applied because baskets are sets. Negatives come from the
//! unigram distribution raised to 0.75 and are resampled when they land
//! inside the current basket. Updates are plain SGD with a linearly decaying
//! learning rate and run serially, so a fixed seed reproduces the embeddings
//! bit for bit.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baskets::BasketDataset;
use crate::error::{NamError, Result};
use crate::math::{dot, Matrix};
use crate::views::{Catalog, DenseVector, DirectViewTable, ItemIdx, ViewId, ViewKind};

const UNIGRAM_POWER: f64 = 0.75;
const MAX_NEGATIVE_TRIES: usize = 64;

/// Cumulative sampling weights proportional to `count^0.75`.
#[derive(Debug, Clone)]
pub struct UnigramTable {
    items: Vec<ItemIdx>,
    cumulative: Vec<f64>,
}

impl UnigramTable {
    /// Items with a zero count are not sampleable.
    pub fn new(counts: &[u64]) -> Result<Self> {
        let mut items = Vec::new();
        let mut cumulative = Vec::new();
        let mut total = 0.0;
        for (k, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            total += (c as f64).powf(UNIGRAM_POWER);
            items.push(ItemIdx(k as u32));
            cumulative.push(total);
        }
        if items.is_empty() {
            return Err(NamError::Sampling("unigram table has no items".into()));
        }
        Ok(UnigramTable { items, cumulative })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ItemIdx {
        let total = *self.cumulative.last().expect("non-empty table");
        let u = rng.gen::<f64>() * total;
        let k = self.cumulative.partition_point(|&c| c <= u);
        self.items[k.min(self.items.len() - 1)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgnsConfig {
    pub dim: usize,
    pub epochs: usize,
    pub neg_ratio: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SgnsConfig {
    fn default() -> Self {
        SgnsConfig {
            dim: 100,
            epochs: 10,
            neg_ratio: 5,
            lr: 0.025,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct I2VModel {
    /// Center-item embeddings; these become the CF view.
    pub target_emb: Matrix,
    pub context_emb: Matrix,
    pub dim: usize,
    /// Whether each catalog item occurred in the training baskets.
    pub seen: Vec<bool>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgnsRun {
    pub model: I2VModel,
    /// Mean per-positive loss for each epoch.
    pub epoch_losses: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Negative log-sigmoid, stable for large |x|.
fn softplus_neg(x: f64) -> f64 {
    if x > 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

/// Ordered positive pairs a basket of `size` distinct items contributes.
pub fn positive_pairs_in_basket(size: usize) -> usize {
    size * size.saturating_sub(1)
}

pub fn init_embeddings(catalog_len: usize, dim: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let bound = 0.5 / dim as f64;
    let data = (0..catalog_len * dim)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Matrix::from_vec(catalog_len, dim, data).expect("sized by construction")
}

pub fn train_sgns(baskets: &BasketDataset, catalog_len: usize, config: &SgnsConfig) -> Result<SgnsRun> {
    if baskets.is_empty() {
        return Err(NamError::Training("item2vec needs at least one basket".into()));
    }
    if config.dim == 0 || config.neg_ratio == 0 {
        return Err(NamError::Domain("item2vec needs dim > 0 and neg_ratio ≥ 1".into()));
    }
    let dim = config.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut target = init_embeddings(catalog_len, dim, &mut rng);
    let mut context = init_embeddings(catalog_len, dim, &mut rng);
    let counts = baskets.item_counts(catalog_len);
    let table = UnigramTable::new(&counts)?;

    let pairs_per_epoch: usize = baskets.baskets().iter().map(|b| positive_pairs_in_basket(b.len())).sum();
    let total = (pairs_per_epoch * config.epochs).max(1) as f64;
    let mut processed = 0usize;
    let mut order: Vec<usize> = (0..baskets.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut grad_center = vec![0.0; dim];
    let mut negatives = Vec::with_capacity(config.neg_ratio);

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for &b in &order {
            let basket = &baskets.baskets()[b];
            for &center in basket {
                for &ctx in basket {
                    if center == ctx {
                        continue;
                    }
                    let lr = config.lr * (1.0 - processed as f64 / total).max(1e-4);
                    processed += 1;
                    negatives.clear();
                    for _ in 0..config.neg_ratio {
                        for _ in 0..MAX_NEGATIVE_TRIES {
                            let n = table.sample(&mut rng);
                            if basket.binary_search(&n).is_err() {
                                negatives.push(n);
                                break;
                            }
                        }
                    }
                    grad_center.iter_mut().for_each(|g| *g = 0.0);
                    let c = center.index();
                    let examples = std::iter::once((ctx, 1.0)).chain(negatives.iter().map(|&n| (n, 0.0)));
                    for (other, label) in examples {
                        let o = other.index();
                        let t_row = &target.as_slice()[c * dim..(c + 1) * dim];
                        let o_row = &mut context.as_mut_slice()[o * dim..(o + 1) * dim];
                        let score = dot(t_row, o_row);
                        loss_sum += if label > 0.5 {
                            softplus_neg(score)
                        } else {
                            softplus_neg(-score)
                        };
                        let g = (label - sigmoid(score)) * lr;
                        for k in 0..dim {
                            grad_center[k] += g * o_row[k];
                            o_row[k] += g * t_row[k];
                        }
                    }
                    let t_row = &mut target.as_mut_slice()[c * dim..(c + 1) * dim];
                    for k in 0..dim {
                        t_row[k] += grad_center[k];
                    }
                }
            }
        }
        let mean = loss_sum / pairs_per_epoch.max(1) as f64;
        if !mean.is_finite() {
            return Err(NamError::Training(format!("item2vec loss became non-finite ({mean})")));
        }
        epoch_losses.push(mean);
    }

    Ok(SgnsRun {
        model: I2VModel {
            target_emb: target,
            context_emb: context,
            dim,
            seen: counts.iter().map(|&c| c > 0).collect(),
            seed: config.seed,
        },
        epoch_losses,
    })
}

pub const CF_VIEW_NAME: &str = "cf";

/// The CF direct view: target embeddings of every item seen in training.
/// Items never seen (cold items) get no row.
pub fn export_cf_view(model: &I2VModel, catalog: &Catalog) -> Result<DirectViewTable> {
    if model.target_emb.rows() != catalog.len() {
        return Err(NamError::Shape {
            op: "export_cf_view",
            expected: catalog.len(),
            got: model.target_emb.rows(),
        });
    }
    let mut table = DirectViewTable::new(ViewId::new(CF_VIEW_NAME, ViewKind::Cf), model.dim);
    for item in catalog.items() {
        if model.seen[item.index()] {
            let row = model.target_emb.row(item.index()).to_vec();
            table.insert(catalog.id(item), DenseVector::new(row)?)?;
        }
    }
    Ok(table)
}

/// Writes the CF view in dense-view format with a `dim/items/seed` header.
pub fn save_embeddings(model: &I2VModel, catalog: &Catalog, path: &Path) -> Result<()> {
    let table = export_cf_view(model, catalog)?;
    let header = format!(
        "dim={} items={} seed={}",
        model.dim,
        table.present_count(),
        model.seed
    );
    table.save(path, Some(&header))
}
