use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nam::baskets::{build_baskets, BasketDataset};
use nam::diagnostics::{selftest as run_selftest, SelfTestOptions};
use nam::eval::{aggregate_csv, cross_validate as run_cv, evaluate as run_eval, fold_assignment, make_cold_split, rank_candidates, ColdSplit};
use nam::ingest::{
    build_catalog, build_registry, filter_positive, index_histories, parse_metadata, parse_ratings, parse_sessions,
    MetadataSchema, MetadataTable, RatingsFormat, RegistryConfig, RegistryInputs,
};
use nam::item2vec::{export_cf_view, train_sgns, CF_VIEW_NAME};
use nam::model::{NamModel, Phase, ViewMode};
use nam::pipeline::{run_fold, Corpus, PipelineConfig};
use nam::training::{build_pair_dataset, load_checkpoint, save_checkpoint, train_phase1 as fit_phase1, train_phase2 as fit_phase2, write_loss_csv, NegativeSampler};
use nam::views::{load_dense_view, Catalog, DirectViewTable, ItemIdx, ViewId, ViewKind, ViewRegistry};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::manifest::Manifest;
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

const DATASET: &str = "dataset.json";
const SPLIT: &str = "split.json";
const CF_TABLE: &str = "views/cf.tsv";
const PHASE1: &str = "phase1.json";
const PHASE2: &str = "phase2.json";

pub struct Ctx {
    pub m: Manifest,
    pub strict: bool,
}

impl Ctx {
    pub fn new(m: Manifest, strict: bool) -> Self {
        Ctx { m, strict }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.m.output.dir.join(name)
    }

    fn seed(&self) -> u64 {
        self.m.seed
    }

    fn require(&self, name: &str, stage: &str) -> Result<PathBuf> {
        let p = self.out(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(CliError::Data(format!("{} not found; run `nam {stage}` first", p.display())))
        }
    }
}

/// Test users and the train/test partition fixed at ingest time.
#[derive(Debug, Serialize, Deserialize)]
struct Dataset {
    seed: u64,
    ids: Vec<String>,
    train: Vec<Vec<ItemIdx>>,
    test: Vec<Vec<ItemIdx>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitArtifact {
    seed: u64,
    fraction: f64,
    cold: Vec<String>,
    dropped_baskets: usize,
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) => fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display()))),
        None => Ok(()),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    write(path, text + "\n")
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn comment(seed: u64, checkpoint: Option<&str>) -> String {
    format!("seed={seed} checkpoint={}", checkpoint.unwrap_or("none"))
}

/// Parsed inputs shared by every stage.
struct Inputs {
    catalog: Catalog,
    metadata: Option<MetadataTable>,
    dense: Vec<DirectViewTable>,
    histories: Vec<Vec<ItemIdx>>,
}

fn load_inputs(ctx: &Ctx) -> Result<Inputs> {
    let d = &ctx.m.data;
    let interactions: Vec<BTreeSet<String>> = match (&d.ratings, &d.sessions) {
        (Some(path), None) => {
            let format = RatingsFormat {
                delimiter: d.delimiter,
                header: d.header,
                ..RatingsFormat::default()
            };
            let parsed = parse_ratings(path, &format, ctx.strict)?;
            if !parsed.malformed.is_empty() {
                log::warn!("{}: skipped {} malformed lines", path.display(), parsed.malformed.len());
            }
            filter_positive(&parsed.records, d.threshold).into_iter().map(|(_, s)| s).collect()
        }
        (None, Some(path)) => {
            let parsed = parse_sessions(path, ctx.strict)?;
            if !parsed.malformed.is_empty() {
                log::warn!("{}: skipped {} malformed lines", path.display(), parsed.malformed.len());
            }
            parsed.records.into_iter().map(|s| s.items.into_iter().collect()).collect()
        }
        _ => return Err(CliError::Usage("manifest needs exactly one of data.ratings or data.sessions".into())),
    };
    let metadata = match (&d.metadata, &d.schema) {
        (Some(path), Some(schema)) => {
            let schema: MetadataSchema = schema.parse()?;
            let (table, malformed) = parse_metadata(path, &schema, ctx.strict)?;
            if !malformed.is_empty() {
                log::warn!("{}: skipped {} malformed lines", path.display(), malformed.len());
            }
            Some(table)
        }
        (Some(_), None) => return Err(CliError::Usage("data.metadata needs data.schema".into())),
        (None, _) => None,
    };
    let dense = d
        .dense
        .iter()
        .map(|s| load_dense_view(&s.path, ViewId::new(s.name.clone(), ViewKind::Dense), s.dim))
        .collect::<nam::Result<Vec<_>>>()?;
    let dense_ids: Vec<String> = dense.iter().flat_map(|t| t.iter().map(|(id, _)| id.to_string())).collect();
    let catalog = build_catalog(interactions.iter().flatten().chain(&dense_ids), metadata.as_ref());
    let histories = index_histories(&catalog, interactions.iter())?;
    Ok(Inputs {
        catalog,
        metadata,
        dense,
        histories,
    })
}

fn load_dataset(ctx: &Ctx) -> Result<(Dataset, Catalog)> {
    let ds: Dataset = read_json(&ctx.require(DATASET, "ingest")?)?;
    let catalog = Catalog::new(ds.ids.iter().cloned());
    Ok((ds, catalog))
}

/// Training baskets after the optional cold split, with the split itself.
fn training_baskets(ctx: &Ctx, ds: &Dataset, catalog: &Catalog) -> Result<(BasketDataset, ColdSplit)> {
    let (train, _) = build_baskets(ds.train.iter().cloned());
    let path = ctx.out(SPLIT);
    let (train, mut split) = if path.exists() {
        let stored: SplitArtifact = read_json(&path)?;
        let (split, filtered, _) = make_cold_split(catalog, &train, stored.fraction, stored.seed)?;
        let cold: Vec<&str> = split.cold_items.iter().map(|&i| catalog.id(i)).collect();
        if cold != stored.cold.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(CliError::Data(format!("{} does not match the dataset; rerun split-cold", path.display())));
        }
        (filtered, split)
    } else {
        (train, ColdSplit::all_warm(catalog))
    };
    let seen: BTreeSet<ItemIdx> = train.items().into_iter().collect();
    let unseen: Vec<ItemIdx> = split.warm_items.iter().copied().filter(|i| !seen.contains(i)).collect();
    for i in unseen {
        split.warm_items.remove(&i);
        split.cold_items.insert(i);
    }
    Ok((train, split))
}

fn registry(ctx: &Ctx, catalog: &Catalog, train: &BasketDataset) -> Result<ViewRegistry> {
    let inputs = load_inputs(ctx)?;
    if inputs.catalog != *catalog {
        return Err(CliError::Data("input files changed since ingest; rerun ingest".into()));
    }
    let cf = if ctx.m.data.use_cf {
        let path = ctx.require(CF_TABLE, "train-cf")?;
        Some(load_dense_view(&path, ViewId::new(CF_VIEW_NAME, ViewKind::Cf), ctx.m.item2vec.dim)?)
    } else {
        None
    };
    let training_items: BTreeSet<ItemIdx> = train.items().into_iter().collect();
    let (registry, _) = build_registry(
        RegistryInputs {
            catalog: catalog.clone(),
            metadata: inputs.metadata.as_ref(),
            cf,
            dense: inputs.dense,
            training_items: Some(&training_items),
        },
        &RegistryConfig {
            min_label_count: ctx.m.data.min_label_count,
        },
    )?;
    Ok(registry)
}

pub fn ingest(ctx: &Ctx) -> Result<()> {
    let inputs = load_inputs(ctx)?;
    let d = &ctx.m.data;
    let folds = fold_assignment(inputs.histories.len(), d.folds, ctx.seed())?;
    if d.test_fold >= d.folds {
        return Err(CliError::Usage(format!("data.test_fold {} out of range for {} folds", d.test_fold, d.folds)));
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (h, &f) in inputs.histories.iter().zip(&folds) {
        if f == d.test_fold { &mut test } else { &mut train }.push(h.clone());
    }
    let ds = Dataset {
        seed: ctx.seed(),
        ids: inputs.catalog.ids().to_vec(),
        train,
        test,
    };
    write_json(&ctx.out(DATASET), &ds)?;

    let (baskets, _) = build_baskets(ds.train.iter().cloned());
    let training_items: BTreeSet<ItemIdx> = baskets.items().into_iter().collect();
    let (content, _) = build_registry(
        RegistryInputs {
            catalog: inputs.catalog.clone(),
            metadata: inputs.metadata.as_ref(),
            cf: None,
            dense: inputs.dense,
            training_items: Some(&training_items),
        },
        &RegistryConfig {
            min_label_count: d.min_label_count,
        },
    )?;
    println!("items {}", inputs.catalog.len());
    println!("users {} (train {}, test {})", inputs.histories.len(), ds.train.len(), ds.test.len());
    for h in 0..content.num_views() {
        let table = content.table(h);
        let name = &content.views()[h].name;
        let path = ctx.out(&format!("views/{name}.tsv"));
        ensure_parent(&path)?;
        table.save(&path, Some(&comment(ctx.seed(), None)))?;
        println!("view {name}: dim {}, present for {} items", content.dim(h), table.present_count());
    }
    Ok(())
}

pub fn split_cold(ctx: &Ctx, fraction: Option<f64>) -> Result<()> {
    let (ds, catalog) = load_dataset(ctx)?;
    let fraction = fraction.unwrap_or(ctx.m.eval.cold_fraction);
    let (train, _) = build_baskets(ds.train.iter().cloned());
    let (split, _, dropped) = make_cold_split(&catalog, &train, fraction, ctx.seed())?;
    let artifact = SplitArtifact {
        seed: ctx.seed(),
        fraction,
        cold: split.cold_items.iter().map(|&i| catalog.id(i).to_string()).collect(),
        dropped_baskets: dropped,
    };
    write_json(&ctx.out(SPLIT), &artifact)?;
    println!("cold items {} of {}, training baskets dropped {dropped}", artifact.cold.len(), catalog.len());
    Ok(())
}

pub fn train_cf(ctx: &Ctx) -> Result<()> {
    let (ds, catalog) = load_dataset(ctx)?;
    let (train, _) = training_baskets(ctx, &ds, &catalog)?;
    let run = train_sgns(&train, catalog.len(), &ctx.m.item2vec)?;
    let table = export_cf_view(&run.model, &catalog)?;
    let path = ctx.out(CF_TABLE);
    ensure_parent(&path)?;
    table.save(&path, Some(&comment(ctx.seed(), None)))?;
    let hash = file_hash(&path)?;
    let mut csv = format!("# {}\nepoch,loss\n", comment(ctx.seed(), Some(&hash)));
    for (e, l) in run.epoch_losses.iter().enumerate() {
        let _ = writeln!(csv, "{},{l:?}", e + 1);
    }
    write(&ctx.out("cf_loss.csv"), csv)?;
    println!("cf view: {} of {} items embedded", table.present_count(), catalog.len());
    Ok(())
}

fn train_stage(ctx: &Ctx, phase: Phase) -> Result<()> {
    let (ds, catalog) = load_dataset(ctx)?;
    let (train, _) = training_baskets(ctx, &ds, &catalog)?;
    let registry = registry(ctx, &catalog, &train)?;
    let config = &ctx.m.train;
    let (mut model, name) = match phase {
        Phase::One => (NamModel::new(&registry, config.z_t, config.z_a(), config.seed)?, PHASE1),
        Phase::Two => {
            let prior = ctx.require(PHASE1, "train-phase1")?;
            (load_checkpoint(&prior, &registry)?.model, PHASE2)
        }
    };
    let pairs = build_pair_dataset(&train);
    let sampler = NegativeSampler::from_baskets(&train, catalog.len());
    let report = match phase {
        Phase::One => fit_phase1(&mut model, &pairs, &registry, &sampler, config)?,
        Phase::Two => fit_phase2(&mut model, &pairs, &registry, &sampler, config)?,
    };
    let path = ctx.out(name);
    ensure_parent(&path)?;
    save_checkpoint(&model, config, Some(phase), &path)?;
    let hash = file_hash(&path)?;
    let loss_name = name.replace(".json", "_loss.csv");
    write_loss_csv(&ctx.out(&loss_name), &report.losses, &comment(ctx.seed(), Some(&hash)))?;
    if let Some(last) = report.losses.last() {
        println!("{name}: {} epochs, final mean loss {:.6}", report.losses.len(), last.mean_loss);
    }
    if report.skipped_sampling + report.skipped_no_view > 0 {
        println!(
            "skipped pairs: {} without negatives, {} without a common view",
            report.skipped_sampling, report.skipped_no_view
        );
    }
    println!("checkpoint {} sha256 {hash}", path.display());
    Ok(())
}

pub fn train_phase1(ctx: &Ctx) -> Result<()> {
    train_stage(ctx, Phase::One)
}

pub fn train_phase2(ctx: &Ctx) -> Result<()> {
    train_stage(ctx, Phase::Two)
}

fn load_model(ctx: &Ctx, checkpoint: Option<PathBuf>) -> Result<(Dataset, ColdSplit, ViewRegistry, NamModel, PathBuf)> {
    let (ds, catalog) = load_dataset(ctx)?;
    let (train, split) = training_baskets(ctx, &ds, &catalog)?;
    let registry = registry(ctx, &catalog, &train)?;
    let path = match checkpoint {
        Some(p) => p,
        None => ctx.require(PHASE2, "train-phase2")?,
    };
    let model = load_checkpoint(&path, &registry)?.model;
    Ok((ds, split, registry, model, path))
}

fn mode_name(mode: ViewMode) -> &'static str {
    match mode {
        ViewMode::Nam => "nam",
        ViewMode::NamCb => "nam-cb",
        ViewMode::CfOnly => "cf-only",
    }
}

pub fn evaluate(ctx: &Ctx, mode: ViewMode, k: &[usize], checkpoint: Option<PathBuf>) -> Result<()> {
    let (ds, split, registry, model, path) = load_model(ctx, checkpoint)?;
    let ks = if k.is_empty() { ctx.m.eval.k.clone() } else { k.to_vec() };
    let (test, _) = build_baskets(ds.test.iter().cloned());
    let pairs = build_pair_dataset(&test);
    let report = run_eval(&model, &registry, &pairs, &split, &ks, &mode.enabled(registry.views()))?;
    let hash = file_hash(&path)?;
    let out = ctx.out(&format!("report-{}.csv", mode_name(mode)));
    write(&out, format!("# {} mode={}\n{}", comment(ctx.seed(), Some(&hash)), mode_name(mode), report.to_csv()))?;
    print!("{report}");
    Ok(())
}

pub fn recommend(ctx: &Ctx, item: &str, k: usize, mode: ViewMode, checkpoint: Option<PathBuf>) -> Result<()> {
    let (_, _, registry, model, path) = load_model(ctx, checkpoint)?;
    let catalog = registry.catalog();
    let query = catalog.lookup(item)?;
    let enabled = mode.enabled(registry.views());
    if !(0..registry.num_views()).any(|h| enabled[h] && registry.is_present(h, query)) {
        return Err(CliError::Data(format!("item {item:?} has no enabled view")));
    }
    let candidates: Vec<ItemIdx> = catalog.items().filter(|&c| c != query).collect();
    let ranked = rank_candidates(&model, &registry, query, &candidates, &enabled)?;
    let names: Vec<&str> = registry.views().iter().map(|v| v.name.as_str()).collect();

    let mut csv = format!("# {} query={item}\nrank,item,psi", comment(ctx.seed(), Some(&file_hash(&path)?)));
    let mut table = format!("{:>4}  {:<16} {:>9}", "rank", "item", "psi");
    for n in &names {
        let _ = write!(csv, ",a_{n},mu_{n},s_{n}");
        let _ = write!(table, "  {:>24}", format!("{n} (a / mu / s)"));
    }
    csv.push('\n');
    table.push('\n');
    for (rank, cand) in ranked.iter().take(k).enumerate() {
        if cand.psi.is_none() {
            break;
        }
        let b = model.pair_forward(&registry, query, cand.item, &enabled)?;
        let id = catalog.id(cand.item);
        let _ = write!(csv, "{},{id},{:?}", rank + 1, b.psi);
        let _ = write!(table, "{:>4}  {id:<16} {:>9.4}", rank + 1, b.psi);
        for h in 0..names.len() {
            if b.mask[h] {
                let _ = write!(csv, ",{:?},{:?},{:?}", b.a[h], b.mu[h], b.s[h]);
                let _ = write!(table, "  {:>7.3} {:>8.3} {:>7.3}", b.a[h], b.mu[h], b.s[h]);
            } else {
                csv.push_str(",0,,");
                let _ = write!(table, "  {:>7.3} {:>8} {:>7}", 0.0, "-", "-");
            }
        }
        csv.push('\n');
        table.push('\n');
    }
    write(&ctx.out(&format!("recommend-{item}.csv")), csv)?;
    print!("{table}");
    Ok(())
}

pub fn selftest(ctx: &Ctx, cases: usize, corrupt: Option<f64>) -> Result<()> {
    let checks = run_selftest(&SelfTestOptions {
        seed: ctx.seed(),
        cases,
        corrupt_backward: corrupt,
    });
    let mut failed = 0;
    for c in &checks {
        println!(
            "{:<18} {:>4} cases  max rel error {:.2e}  {}",
            c.name,
            c.cases,
            c.max_rel_error,
            if c.passed { "ok" } else { "FAIL" }
        );
        failed += usize::from(!c.passed);
    }
    if failed > 0 {
        return Err(CliError::Numeric(format!("{failed} self-test checks failed")));
    }
    Ok(())
}

pub fn cross_validate(ctx: &Ctx, mode: ViewMode, k: &[usize], fraction: Option<f64>) -> Result<()> {
    let inputs = load_inputs(ctx)?;
    let ks = if k.is_empty() { ctx.m.eval.k.clone() } else { k.to_vec() };
    let fraction = fraction.unwrap_or(ctx.m.eval.cold_fraction);
    let config = PipelineConfig {
        sgns: ctx.m.item2vec,
        train: ctx.m.train.clone(),
        use_cf: ctx.m.data.use_cf,
        registry: RegistryConfig {
            min_label_count: ctx.m.data.min_label_count,
        },
        cold_fraction: (fraction > 0.0).then_some(fraction),
    };
    let corpus = Corpus {
        catalog: &inputs.catalog,
        metadata: inputs.metadata.as_ref(),
        dense: &inputs.dense,
    };
    let seed = ctx.seed();
    let cv = run_cv(&inputs.histories, ctx.m.data.folds, seed, |train, test, fold| {
        log::info!("fold {fold}: {} train users, {} test users", train.len(), test.len());
        let f = run_fold(corpus, train, test, &config, seed.wrapping_add(fold as u64))?;
        let enabled = mode.enabled(f.fitted.registry.views());
        run_eval(&f.fitted.model, &f.fitted.registry, &f.test_pairs, &f.split, &ks, &enabled)
    })?;
    let mut folds_csv = format!("# {} mode={}\nfold,scenario,K,metric,value,n\n", comment(seed, None), mode_name(mode));
    for (fold, report) in cv.reports.iter().enumerate() {
        for row in report.to_csv().lines().skip(1) {
            let _ = writeln!(folds_csv, "{fold},{row}");
        }
    }
    write(&ctx.out("cv_folds.csv"), folds_csv)?;
    let agg = aggregate_csv(&cv.aggregate);
    write(
        &ctx.out("cv.csv"),
        format!("# {} mode={}\n{agg}", comment(seed, None), mode_name(mode)),
    )?;
    print!("{agg}");
    Ok(())
}
