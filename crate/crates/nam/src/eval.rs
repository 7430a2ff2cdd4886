//! HR@K / MRR@K, warm and cold catalog splits, and k-fold cross-validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baskets::BasketDataset;
use crate::error::{NamError, Result};
use crate::model::{ItemEncoding, NamModel};
use crate::training::PositivePair;
use crate::views::{Catalog, ItemIdx, ViewRegistry};

/// `1` iff the target sits inside the top `k`.
pub fn hit_ratio_at_k(rank: usize, k: usize) -> f64 {
    debug_assert!(rank >= 1);
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

/// Reciprocal rank truncated at `k`.
pub fn mrr_at_k(rank: usize, k: usize) -> f64 {
    debug_assert!(rank >= 1);
    if rank <= k {
        1.0 / rank as f64
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedCandidate {
    pub item: ItemIdx,
    /// `None` when the query and the candidate share no enabled view.
    pub psi: Option<f64>,
}

fn score_or_none(model: &NamModel, query: &ItemEncoding, cand: &ItemEncoding, enabled: &[bool]) -> Result<Option<f64>> {
    match model.score_encoded(query, cand, enabled) {
        Ok(b) => Ok(Some(b.psi)),
        Err(NamError::NoActiveView) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Orders scored candidates before unscored ones, then by ψ descending, then
/// by ascending item index.
fn ranks_before(a: &RankedCandidate, b: &RankedCandidate) -> std::cmp::Ordering {
    use std::cmp::Ordering;
    match (a.psi, b.psi) {
        (Some(x), Some(y)) => y.partial_cmp(&x).unwrap_or(Ordering::Equal).then(a.item.cmp(&b.item)),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => a.item.cmp(&b.item),
    }
}

/// Sorts `candidates` by ψ(query, ·). Candidates sharing no view with the
/// query come last, flagged with `psi: None`.
pub fn rank_candidates(
    model: &NamModel,
    registry: &ViewRegistry,
    query: ItemIdx,
    candidates: &[ItemIdx],
    enabled: &[bool],
) -> Result<Vec<RankedCandidate>> {
    if candidates.is_empty() {
        return Err(NamError::Domain("empty candidate list".into()));
    }
    let q = model.encode_item(registry, query)?;
    let mut out = candidates
        .iter()
        .map(|&item| {
            let enc = model.encode_item(registry, item)?;
            Ok(RankedCandidate {
                item,
                psi: score_or_none(model, &q, &enc, enabled)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(ranks_before);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Both items have CF data.
    Warm,
    /// Any pair with a cold item.
    Cold,
    /// Both items cold.
    ColdCase1,
    /// Context warm, target cold.
    ColdCase2,
    /// Context cold, target warm.
    ColdCase3,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::Warm,
        Scenario::Cold,
        Scenario::ColdCase1,
        Scenario::ColdCase2,
        Scenario::ColdCase3,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Warm => "warm",
            Scenario::Cold => "cold",
            Scenario::ColdCase1 => "cold-case-1",
            Scenario::ColdCase2 => "cold-case-2",
            Scenario::ColdCase3 => "cold-case-3",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColdSplit {
    pub warm_items: BTreeSet<ItemIdx>,
    pub cold_items: BTreeSet<ItemIdx>,
    pub seed: u64,
}

impl ColdSplit {
    /// Every catalog item warm.
    pub fn all_warm(catalog: &Catalog) -> Self {
        ColdSplit {
            warm_items: catalog.items().collect(),
            cold_items: BTreeSet::new(),
            seed: 0,
        }
    }

    pub fn is_cold(&self, item: ItemIdx) -> bool {
        self.cold_items.contains(&item)
    }

    /// Warm, or the cold sub-case of `(i, j)`.
    pub fn classify_pair(&self, i: ItemIdx, j: ItemIdx) -> Result<Scenario> {
        let cold = |x: ItemIdx| -> Result<bool> {
            if self.cold_items.contains(&x) {
                Ok(true)
            } else if self.warm_items.contains(&x) {
                Ok(false)
            } else {
                Err(NamError::Lookup(format!("item {x} is not in the split")))
            }
        };
        Ok(match (cold(i)?, cold(j)?) {
            (false, false) => Scenario::Warm,
            (true, true) => Scenario::ColdCase1,
            (false, true) => Scenario::ColdCase2,
            (true, false) => Scenario::ColdCase3,
        })
    }
}

/// Samples `floor(fraction · |catalog|)` cold items and strips them from the
/// training baskets. Returns the split, the filtered baskets and the number of
/// baskets dropped for shrinking below two items.
pub fn make_cold_split(
    catalog: &Catalog,
    train: &BasketDataset,
    fraction: f64,
    seed: u64,
) -> Result<(ColdSplit, BasketDataset, usize)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(NamError::Domain(format!("cold fraction must lie in (0, 1), got {fraction}")));
    }
    let n = catalog.len();
    let n_cold = (fraction * n as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cold_items: BTreeSet<ItemIdx> = rand::seq::index::sample(&mut rng, n, n_cold)
        .into_iter()
        .map(|k| ItemIdx(k as u32))
        .collect();
    let warm_items = catalog.items().filter(|i| !cold_items.contains(i)).collect();
    let mut filtered = train.clone();
    let dropped = filtered.remove_items(&cold_items);
    Ok((
        ColdSplit {
            warm_items,
            cold_items,
            seed,
        },
        filtered,
        dropped,
    ))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Cell {
    /// Evaluated pairs.
    pub n: usize,
    /// Sums over pairs, aligned with [`EvalReport::ks`].
    pub hit_sum: Vec<f64>,
    pub rr_sum: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    pub cells: BTreeMap<Scenario, Cell>,
    /// Pairs whose query and target share no enabled view; counted as misses.
    pub flagged: usize,
}

impl EvalReport {
    pub fn new(ks: &[usize]) -> Self {
        EvalReport {
            ks: ks.to_vec(),
            cells: BTreeMap::new(),
            flagged: 0,
        }
    }

    fn record(&mut self, scenario: Scenario, rank: Option<usize>) {
        let ks = &self.ks;
        let cell = self.cells.entry(scenario).or_insert_with(|| Cell {
            n: 0,
            hit_sum: vec![0.0; ks.len()],
            rr_sum: vec![0.0; ks.len()],
        });
        cell.n += 1;
        if let Some(rank) = rank {
            for (t, &k) in ks.iter().enumerate() {
                cell.hit_sum[t] += hit_ratio_at_k(rank, k);
                cell.rr_sum[t] += mrr_at_k(rank, k);
            }
        }
    }

    fn k_pos(&self, k: usize) -> Option<usize> {
        self.ks.iter().position(|&x| x == k)
    }

    pub fn count(&self, scenario: Scenario) -> usize {
        self.cells.get(&scenario).map_or(0, |c| c.n)
    }

    /// Mean HR@k over the scenario's pairs; `None` for empty cells.
    pub fn hit_ratio(&self, scenario: Scenario, k: usize) -> Option<f64> {
        let t = self.k_pos(k)?;
        let c = self.cells.get(&scenario).filter(|c| c.n > 0)?;
        Some(c.hit_sum[t] / c.n as f64)
    }

    pub fn mrr(&self, scenario: Scenario, k: usize) -> Option<f64> {
        let t = self.k_pos(k)?;
        let c = self.cells.get(&scenario).filter(|c| c.n > 0)?;
        Some(c.rr_sum[t] / c.n as f64)
    }

    /// `scenario,K,metric,value,n` rows, header included.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scenario,K,metric,value,n\n");
        for (&scenario, cell) in &self.cells {
            if cell.n == 0 {
                continue;
            }
            for &k in &self.ks {
                let hr = self.hit_ratio(scenario, k).unwrap_or(0.0);
                let mrr = self.mrr(scenario, k).unwrap_or(0.0);
                out.push_str(&format!("{scenario},{k},hr,{hr:?},{}\n", cell.n));
                out.push_str(&format!("{scenario},{k},mrr,{mrr:?},{}\n", cell.n));
            }
        }
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<12} {:>8}", "scenario", "pairs")?;
        for k in &self.ks {
            write!(f, " {:>8} {:>8}", format!("HR@{k}"), format!("MRR@{k}"))?;
        }
        writeln!(f)?;
        for (&scenario, cell) in &self.cells {
            write!(f, "{:<12} {:>8}", scenario.as_str(), cell.n)?;
            for &k in &self.ks {
                let hr = self.hit_ratio(scenario, k).unwrap_or(0.0);
                let mrr = self.mrr(scenario, k).unwrap_or(0.0);
                write!(f, " {hr:>8.4} {mrr:>8.4}")?;
            }
            writeln!(f)?;
        }
        if self.flagged > 0 {
            writeln!(f, "{} pairs shared no view and were counted as misses", self.flagged)?;
        }
        Ok(())
    }
}

/// Ranks every test target against the full catalog minus the query and
/// accumulates per-pair HR@K / MRR@K into the pair's scenario (and the
/// aggregate cold cell for the three cold cases).
///
/// Queries run in parallel; results are merged in query order.
pub fn evaluate(
    model: &NamModel,
    registry: &ViewRegistry,
    test_pairs: &[PositivePair],
    split: &ColdSplit,
    ks: &[usize],
    enabled: &[bool],
) -> Result<EvalReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(NamError::Domain("K list must be non-empty and positive".into()));
    }
    let n = registry.catalog().len();
    let mut by_query: BTreeMap<ItemIdx, Vec<ItemIdx>> = BTreeMap::new();
    for p in test_pairs {
        if p.context.index() >= n || p.target.index() >= n {
            return Err(NamError::Lookup(format!("test pair {}→{} outside catalog", p.context, p.target)));
        }
        by_query.entry(p.context).or_default().push(p.target);
    }
    // Fixed accumulation order, independent of the input pair order.
    by_query.values_mut().for_each(|t| t.sort_unstable());
    let encodings: Vec<ItemEncoding> = (0..n as u32)
        .into_par_iter()
        .map(|k| model.encode_item(registry, ItemIdx(k)))
        .collect::<Result<_>>()?;

    let per_query: Vec<Vec<(ItemIdx, Option<usize>)>> = by_query
        .par_iter()
        .map(|(&query, targets)| -> Result<Vec<(ItemIdx, Option<usize>)>> {
            let q = &encodings[query.index()];
            let psi: Vec<Option<f64>> = encodings
                .iter()
                .map(|c| score_or_none(model, q, c, enabled))
                .collect::<Result<_>>()?;
            Ok(targets
                .iter()
                .map(|&t| (t, rank_of(&psi, query, t)))
                .collect())
        })
        .collect::<Result<_>>()?;

    let mut report = EvalReport::new(ks);
    for ((&query, _), ranks) in by_query.iter().zip(per_query) {
        for (target, rank) in ranks {
            if rank.is_none() {
                report.flagged += 1;
            }
            let scenario = split.classify_pair(query, target)?;
            report.record(scenario, rank);
            if scenario != Scenario::Warm {
                report.record(Scenario::Cold, rank);
            }
        }
    }
    Ok(report)
}

/// 1-based rank of `target` among all items but `query`, or `None` when the
/// target is unscored.
fn rank_of(psi: &[Option<f64>], query: ItemIdx, target: ItemIdx) -> Option<usize> {
    let target_c = RankedCandidate {
        item: target,
        psi: Some(psi[target.index()]?),
    };
    let ahead = psi
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != query.index() && k != target.index())
        .filter(|&(k, &p)| {
            ranks_before(&RankedCandidate { item: ItemIdx(k as u32), psi: p }, &target_c) == std::cmp::Ordering::Less
        })
        .count();
    Some(ahead + 1)
}

/// Assigns each of `n_users` users to one of `folds` folds, balanced and
/// shuffled by `seed`.
pub fn fold_assignment(n_users: usize, folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(NamError::Domain(format!("need at least 2 folds, got {folds}")));
    }
    if n_users < folds {
        return Err(NamError::Domain(format!("{n_users} users cannot fill {folds} folds")));
    }
    let mut order: Vec<usize> = (0..n_users).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![0; n_users];
    for (pos, &user) in order.iter().enumerate() {
        assignment[user] = pos % folds;
    }
    Ok(assignment)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    /// Folds contributing to this cell.
    pub folds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossValidation {
    pub reports: Vec<EvalReport>,
    /// Keyed by `(scenario, K)`: `(HR, MRR)` across folds.
    pub aggregate: BTreeMap<(Scenario, usize), (MeanStd, MeanStd)>,
}

fn mean_std(xs: &[f64]) -> MeanStd {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    MeanStd {
        mean,
        std: var.sqrt(),
        folds: xs.len(),
    }
}

/// Unweighted mean and population standard deviation over folds; folds with
/// an empty cell are left out of that cell.
pub fn aggregate_reports(reports: &[EvalReport]) -> BTreeMap<(Scenario, usize), (MeanStd, MeanStd)> {
    let mut out = BTreeMap::new();
    let Some(first) = reports.first() else {
        return out;
    };
    for scenario in Scenario::ALL {
        for &k in &first.ks {
            let (hr, mrr): (Vec<f64>, Vec<f64>) = reports
                .iter()
                .filter_map(|r| Some((r.hit_ratio(scenario, k)?, r.mrr(scenario, k)?)))
                .unzip();
            if !hr.is_empty() {
                out.insert((scenario, k), (mean_std(&hr), mean_std(&mrr)));
            }
        }
    }
    out
}

/// Partitions users into folds and runs `pipeline(train, test, fold)` with
/// each fold held out once.
pub fn cross_validate<F>(users: &[Vec<ItemIdx>], folds: usize, seed: u64, mut pipeline: F) -> Result<CrossValidation>
where
    F: FnMut(&[Vec<ItemIdx>], &[Vec<ItemIdx>], usize) -> Result<EvalReport>,
{
    let assignment = fold_assignment(users.len(), folds, seed)?;
    let mut reports = Vec::with_capacity(folds);
    for fold in 0..folds {
        let (test, train): (Vec<_>, Vec<_>) = users
            .iter()
            .zip(&assignment)
            .partition(|&(_, &f)| f == fold);
        let train: Vec<Vec<ItemIdx>> = train.into_iter().map(|(u, _)| u.clone()).collect();
        let test: Vec<Vec<ItemIdx>> = test.into_iter().map(|(u, _)| u.clone()).collect();
        log::info!("fold {}/{folds}: {} train users, {} test users", fold + 1, train.len(), test.len());
        reports.push(pipeline(&train, &test, fold)?);
    }
    let aggregate = aggregate_reports(&reports);
    Ok(CrossValidation { reports, aggregate })
}

/// `scenario,K,metric,mean,std,folds` rows, header included.
pub fn aggregate_csv(aggregate: &BTreeMap<(Scenario, usize), (MeanStd, MeanStd)>) -> String {
    let mut out = String::from("scenario,K,metric,mean,std,folds\n");
    for ((scenario, k), (hr, mrr)) in aggregate {
        out.push_str(&format!("{scenario},{k},hr,{:?},{:?},{}\n", hr.mean, hr.std, hr.folds));
        out.push_str(&format!("{scenario},{k},mrr,{:?},{:?},{}\n", mrr.mean, mrr.std, mrr.folds));
    }
    out
}
