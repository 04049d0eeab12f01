//! Multi-seed experiment suites.
//!
//! Each suite expands into independent cells (one per sparsity and seed),
//! runs them on up to `threads` worker threads and concatenates the results
//! in cell order, so the output does not depend on the thread count.
//! Searches shared between suites of one [`SuiteRunner`] are computed once.
//!
//! In the run table the `criterion` column holds the method label:
//!
//! | suite | labels |
//! |---|---|
//! | existence | `dense`, `magnitude` (mask only), `jackpot`, `random_init` |
//! | criteria_overlap | `jackpot`, `random_scores`, and one row per criterion (mask only) |
//! | warmup_speed | the warm-up name of each search |
//! | finetune_ablation | `jackpot`, `finetune` |
//! | epoch_stability | `jackpot` |

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::criteria::{compute_scores, score_magnitude, Criterion};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::finetune::finetune;
use crate::masking::{check_sparsity, BinaryMask};
use crate::metrics::{aggregate_runs, evaluate, mask_overlap, write_aggregate_csv, AggregateRow, GroupKey};
use crate::nn::{build_model, Model, Schedule, SgdConfig};
use crate::report::{write_overlap_csv, write_runs_csv, write_trajectory_csv, ExperimentReport, OverlapRow, RunSummary, TrajectoryRow};
use crate::search::{search, SearchConfig, SearchOutcome, Warmup};
use crate::seed::derive_seed;
use crate::tensor::Scalar;

const EVAL_BATCH: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    /// Jackpot vs. search on an untrained network vs. magnitude mask, over sparsities.
    Existence,
    /// Overlap of each criterion's mask with the searched mask.
    CriteriaOverlap,
    /// Accuracy trajectories for each warm-up.
    WarmupSpeed,
    /// Jackpot vs. the same mask with fine-tuned weights.
    FinetuneAblation,
    /// One long search; overlap with the initial mask per epoch.
    EpochStability,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Existence, Suite::CriteriaOverlap, Suite::WarmupSpeed, Suite::FinetuneAblation, Suite::EpochStability];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Existence => "existence",
            Suite::CriteriaOverlap => "criteria_overlap",
            Suite::WarmupSpeed => "warmup_speed",
            Suite::FinetuneAblation => "finetune_ablation",
            Suite::EpochStability => "epoch_stability",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Suite::ALL.iter().map(|x| x.name()).collect();
            Error::Usage(format!("unknown suite '{}' (expected one of {})", s, names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub seeds: Vec<u64>,
    /// Grid of the existence suite.
    pub sparsities: Vec<f64>,
    /// Sparsity of the single-sparsity suites.
    pub sparsity: f64,
    pub finetune_sparsities: Vec<f64>,
    pub warmups: Vec<Warmup>,
    /// Template for every search; `sparsity`, `seed` and `warmup` are set per cell.
    pub search: SearchConfig,
    pub finetune: SgdConfig,
    pub stability_epochs: usize,
    pub threads: usize,
    /// Fill `wall_clock_s`. Off by default so reruns are byte-identical.
    pub timing: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            seeds: vec![0, 1, 2],
            sparsities: vec![0.5, 0.7, 0.9, 0.95],
            sparsity: 0.9,
            finetune_sparsities: vec![0.5, 0.9],
            warmups: vec![Warmup::None, Warmup::Magnitude, Warmup::Snip, Warmup::Grasp],
            search: SearchConfig::default(),
            finetune: default_finetune_optimizer(),
            stability_epochs: 100,
            threads: 1,
            timing: false,
        }
    }
}

pub fn default_finetune_optimizer() -> SgdConfig {
    SgdConfig { lr0: 0.01, momentum: 0.9, weight_decay: 5e-4, epochs: 20, schedule: Schedule::Cosine, batch_size: 64 }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("suite needs at least one seed".into()));
        }
        for &p in self.sparsities.iter().chain(&self.finetune_sparsities).chain([&self.sparsity]) {
            check_sparsity(p)?;
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be positive".into()));
        }
        self.search.validate()?;
        self.finetune.validate()
    }
}

/// The frozen model and data every suite works on.
pub struct Workbench<'a, F> {
    pub dataset: String,
    pub pretrained: &'a Model<F>,
    pub train: &'a Dataset,
    pub test: &'a Dataset,
}

#[derive(Debug, Clone)]
pub struct SuiteOutput {
    pub suite: Suite,
    pub report: ExperimentReport,
    /// Mean ± std of top-1 per label and sparsity.
    pub aggregates: Vec<AggregateRow>,
}

impl SuiteOutput {
    /// Writes `<suite>_runs.csv`, `<suite>_trajectory.csv`,
    /// `<suite>_aggregate.csv`, `<suite>.json` and, when present,
    /// `<suite>_overlap.csv`. Returns the written paths.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let name = self.suite.name();
        let mut paths = vec![dir.join(format!("{name}_runs.csv")), dir.join(format!("{name}_trajectory.csv")), dir.join(format!("{name}_aggregate.csv")), dir.join(format!("{name}.json"))];
        write_runs_csv(&self.report.runs, &paths[0])?;
        write_trajectory_csv(&self.report.trajectories, &paths[1])?;
        write_aggregate_csv(&self.aggregates, &paths[2])?;
        self.report.write_json(&paths[3])?;
        if !self.report.overlaps.is_empty() {
            paths.push(dir.join(format!("{name}_overlap.csv")));
            write_overlap_csv(&self.report.overlaps, &paths[4])?;
        }
        Ok(paths)
    }

    pub fn runs_labelled<'s>(&'s self, label: &'s str) -> impl Iterator<Item = &'s RunSummary> + 's {
        self.report.runs.iter().filter(move |r| r.criterion == label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct SearchKey {
    sparsity_bits: u64,
    seed: u64,
    epochs: usize,
    warmup: Warmup,
    untrained: bool,
}

struct CachedSearch<F> {
    outcome: SearchOutcome<F>,
    seconds: f64,
}

type Cache<F> = Mutex<HashMap<SearchKey, Arc<CachedSearch<F>>>>;

pub struct SuiteRunner<'a, F> {
    bench: Workbench<'a, F>,
    cfg: SuiteConfig,
    cache: Cache<F>,
    untrained: Mutex<HashMap<u64, Arc<Model<F>>>>,
}

impl<'a, F: Scalar> SuiteRunner<'a, F> {
    pub fn new(bench: Workbench<'a, F>, cfg: SuiteConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(SuiteRunner { bench, cfg, cache: Mutex::new(HashMap::new()), untrained: Mutex::new(HashMap::new()) })
    }

    pub fn config(&self) -> &SuiteConfig {
        &self.cfg
    }

    /// The (cached) search at `p` and `seed` with the configured epoch count.
    pub fn search_outcome(&self, p: f64, seed: u64, warmup: Warmup, untrained: bool) -> Result<SearchOutcome<F>> {
        Ok(self.searched(p, seed, self.cfg.search.epochs, warmup, untrained)?.outcome.clone())
    }

    pub fn run(&self, suite: Suite) -> Result<SuiteOutput> {
        let parts = match suite {
            Suite::Existence => {
                let mut cells: Vec<(Option<f64>, u64)> = self.cfg.seeds.iter().map(|&s| (None, s)).collect();
                cells.extend(self.grid(&self.cfg.sparsities).into_iter().map(|(p, s)| (Some(p), s)));
                par_map(self.cfg.threads, cells.len(), |i| match cells[i] {
                    (None, seed) => self.dense_cell(seed),
                    (Some(p), seed) => self.existence_cell(p, seed),
                })?
            }
            Suite::CriteriaOverlap => par_map(self.cfg.threads, self.cfg.seeds.len(), |i| self.criteria_cell(self.cfg.seeds[i]))?,
            Suite::WarmupSpeed => {
                let cells: Vec<(Warmup, u64)> = self.cfg.warmups.iter().flat_map(|&w| self.cfg.seeds.iter().map(move |&s| (w, s))).collect();
                par_map(self.cfg.threads, cells.len(), |i| self.warmup_cell(cells[i].0, cells[i].1))?
            }
            Suite::FinetuneAblation => {
                let cells = self.grid(&self.cfg.finetune_sparsities);
                par_map(self.cfg.threads, cells.len(), |i| self.finetune_cell(cells[i].0, cells[i].1))?
            }
            Suite::EpochStability => par_map(self.cfg.threads, self.cfg.seeds.len(), |i| self.stability_cell(self.cfg.seeds[i]))?,
        };
        let mut report = ExperimentReport::default();
        for part in parts {
            report.extend(part);
        }
        let aggregates = aggregate_runs(&report.runs, GroupKey::CriterionSparsity)?;
        Ok(SuiteOutput { suite, report, aggregates })
    }

    fn grid(&self, sparsities: &[f64]) -> Vec<(f64, u64)> {
        sparsities.iter().flat_map(|&p| self.cfg.seeds.iter().map(move |&s| (p, s))).collect()
    }

    fn untrained_model(&self, seed: u64) -> Result<Arc<Model<F>>> {
        if let Some(m) = self.untrained.lock().expect("cache lock").get(&seed) {
            return Ok(m.clone());
        }
        let pre = self.bench.pretrained;
        let m = Arc::new(build_model::<F>(pre.arch, &pre.input_shape, pre.num_classes, derive_seed(seed, "experiment/untrained"))?);
        self.untrained.lock().expect("cache lock").insert(seed, m.clone());
        Ok(m)
    }

    fn searched(&self, p: f64, seed: u64, epochs: usize, warmup: Warmup, untrained: bool) -> Result<Arc<CachedSearch<F>>> {
        let key = SearchKey { sparsity_bits: p.to_bits(), seed, epochs, warmup, untrained };
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let model = if untrained { self.untrained_model(seed)? } else { Arc::new(self.bench.pretrained.clone()) };
        let cfg = SearchConfig { sparsity: p, seed, epochs, warmup, ..self.cfg.search.clone() };
        let t = Instant::now();
        let outcome = search(&model, self.bench.train, self.bench.test, &cfg)?;
        let entry = Arc::new(CachedSearch { outcome, seconds: t.elapsed().as_secs_f64() });
        self.cache.lock().expect("cache lock").insert(key, entry.clone());
        Ok(entry)
    }

    fn jackpot(&self, p: f64, seed: u64) -> Result<Arc<CachedSearch<F>>> {
        self.searched(p, seed, self.cfg.search.epochs, Warmup::Magnitude, false)
    }

    fn summary(&self, run_id: String, label: &str, p: f64, epochs: usize, seed: u64, model: &Model<F>, masks: Option<&[BinaryMask]>) -> Result<RunSummary> {
        let eval = evaluate(model, masks, self.bench.test, EVAL_BATCH)?;
        let overlap_vs_magnitude = match masks {
            Some(m) => Some(mask_overlap(&score_magnitude(model).masks(p), m)?),
            None => None,
        };
        Ok(RunSummary {
            run_id,
            arch: model.arch.to_string(),
            dataset: self.bench.dataset.clone(),
            criterion: label.to_string(),
            sparsity: p,
            epochs,
            seed,
            top1: eval.top1,
            top5: eval.top5,
            overlap_vs_magnitude,
            overlap_vs_init: None,
            wall_clock_s: None,
        })
    }

    /// Run row plus per-epoch rows for a finished search.
    fn search_rows(&self, suite: Suite, label: &str, p: f64, seed: u64, model: &Model<F>, s: &CachedSearch<F>) -> Result<ExperimentReport> {
        let run_id = run_id(suite, label, p, seed);
        let out = &s.outcome;
        let mut row = self.summary(run_id.clone(), label, p, out.history.len() - 1, seed, model, Some(&out.masks))?;
        row.overlap_vs_init = Some(mask_overlap(&out.initial_masks, &out.masks)?);
        row.wall_clock_s = self.cfg.timing.then_some(s.seconds);
        let trajectories = out
            .history
            .iter()
            .map(|h| TrajectoryRow {
                run_id: run_id.clone(),
                epoch: h.epoch,
                lr: h.lr,
                train_loss: h.train_loss,
                train_acc: h.train_acc,
                test_acc: h.test_acc,
                sparsity: h.sparsity,
                overlap_vs_init: Some(h.overlap_vs_init),
            })
            .collect();
        Ok(ExperimentReport { runs: vec![row], trajectories, overlaps: Vec::new() })
    }

    fn dense_cell(&self, seed: u64) -> Result<ExperimentReport> {
        let row = self.summary(run_id(Suite::Existence, "dense", 0.0, seed), "dense", 0.0, 0, seed, self.bench.pretrained, None)?;
        Ok(ExperimentReport { runs: vec![row], ..Default::default() })
    }

    fn existence_cell(&self, p: f64, seed: u64) -> Result<ExperimentReport> {
        let pre = self.bench.pretrained;
        let mag = score_magnitude(pre).masks(p);
        let mut rep = ExperimentReport::default();
        let mut row = self.summary(run_id(Suite::Existence, "magnitude", p, seed), "magnitude", p, 0, seed, pre, Some(&mag))?;
        row.overlap_vs_init = Some(1.0);
        rep.runs.push(row);
        rep.extend(self.search_rows(Suite::Existence, "jackpot", p, seed, pre, &*self.jackpot(p, seed)?)?);
        let untrained = self.untrained_model(seed)?;
        let s = self.searched(p, seed, self.cfg.search.epochs, Warmup::Magnitude, true)?;
        rep.extend(self.search_rows(Suite::Existence, "random_init", p, seed, &untrained, &s)?);
        Ok(rep)
    }

    fn criteria_cell(&self, seed: u64) -> Result<ExperimentReport> {
        let (suite, p, pre) = (Suite::CriteriaOverlap, self.cfg.sparsity, self.bench.pretrained);
        let jackpot = self.jackpot(p, seed)?;
        let unbiased = self.searched(p, seed, self.cfg.search.epochs, Warmup::None, false)?;
        let mut rep = self.search_rows(suite, "jackpot", p, seed, pre, &jackpot)?;
        rep.extend(self.search_rows(suite, "random_scores", p, seed, pre, &unbiased)?);
        let references = [(run_id(suite, "jackpot", p, seed), &jackpot.outcome.masks), (run_id(suite, "random_scores", p, seed), &unbiased.outcome.masks)];
        for c in Criterion::ALL {
            let masks = compute_scores(pre, c, self.bench.train, &self.cfg.search.criterion, derive_seed(seed, "experiment/criterion"))?.masks(p);
            let id = run_id(suite, c.name(), p, seed);
            rep.runs.push(self.summary(id.clone(), c.name(), p, 0, seed, pre, Some(&masks))?);
            for (reference, searched) in &references {
                rep.overlaps.push(OverlapRow {
                    run_id: id.clone(),
                    seed,
                    sparsity: p,
                    criterion: c.name().to_string(),
                    reference: reference.clone(),
                    overlap: mask_overlap(&masks, searched)?,
                });
            }
        }
        Ok(rep)
    }

    fn warmup_cell(&self, warmup: Warmup, seed: u64) -> Result<ExperimentReport> {
        let p = self.cfg.sparsity;
        let s = self.searched(p, seed, self.cfg.search.epochs, warmup, false)?;
        self.search_rows(Suite::WarmupSpeed, warmup.name(), p, seed, self.bench.pretrained, &s)
    }

    fn finetune_cell(&self, p: f64, seed: u64) -> Result<ExperimentReport> {
        let (suite, pre) = (Suite::FinetuneAblation, self.bench.pretrained);
        let jackpot = self.jackpot(p, seed)?;
        let mut rep = self.search_rows(suite, "jackpot", p, seed, pre, &jackpot)?;
        let t = Instant::now();
        let tuned = finetune(pre.clone(), &jackpot.outcome.masks, self.bench.train, self.bench.test, &self.cfg.finetune, derive_seed(seed, "experiment/finetune"))?;
        let seconds = t.elapsed().as_secs_f64();
        let id = run_id(suite, "finetune", p, seed);
        let mut row = self.summary(id.clone(), "finetune", p, self.cfg.finetune.epochs, seed, &tuned.model, Some(&jackpot.outcome.masks))?;
        // overlap_vs_magnitude compares against the mask of the tuned weights; report it against the pre-trained ones instead
        row.overlap_vs_magnitude = Some(mask_overlap(&score_magnitude(pre).masks(p), &jackpot.outcome.masks)?);
        row.overlap_vs_init = Some(1.0);
        row.wall_clock_s = self.cfg.timing.then_some(seconds);
        rep.runs.push(row);
        rep.trajectories.extend(tuned.history.iter().map(|h| TrajectoryRow {
            run_id: id.clone(),
            epoch: h.epoch,
            lr: h.lr,
            train_loss: h.train_loss,
            train_acc: h.train_acc,
            test_acc: Some(h.test_acc),
            sparsity: p,
            overlap_vs_init: None,
        }));
        Ok(rep)
    }

    fn stability_cell(&self, seed: u64) -> Result<ExperimentReport> {
        let p = self.cfg.sparsity;
        let s = self.searched(p, seed, self.cfg.stability_epochs, Warmup::Magnitude, false)?;
        self.search_rows(Suite::EpochStability, "jackpot", p, seed, self.bench.pretrained, &s)
    }
}

pub fn run_id(suite: Suite, label: &str, p: f64, seed: u64) -> String {
    format!("{}/{}/p{}/s{}", suite.name(), label, p, seed)
}

/// `f(0..n)` on up to `threads` scoped threads, results in index order.
/// The first error by index wins.
pub fn par_map<T: Send>(threads: usize, n: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let workers = threads.max(1).min(n);
    if workers <= 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<T>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = f(i);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots.into_iter().map(|s| s.into_inner().expect("slot lock").expect("every cell ran")).collect()
}

/// Seed-averaged test accuracy per epoch over the given runs; epochs without
/// a measurement in every run are skipped.
pub fn mean_curve(rows: &[TrajectoryRow], run_ids: &[String]) -> Vec<(usize, f64)> {
    let mut per_epoch: std::collections::BTreeMap<usize, Vec<f64>> = std::collections::BTreeMap::new();
    for r in rows.iter().filter(|r| run_ids.contains(&r.run_id)) {
        if let Some(a) = r.test_acc {
            per_epoch.entry(r.epoch).or_default().push(a);
        }
    }
    per_epoch
        .into_iter()
        .filter(|(_, v)| v.len() == run_ids.len())
        .map(|(e, v)| (e, v.iter().sum::<f64>() / v.len() as f64))
        .collect()
}

/// First epoch whose accuracy reaches `target`.
pub fn epochs_to_reach(curve: &[(usize, f64)], target: f64) -> Option<usize> {
    curve.iter().find(|&&(_, a)| a >= target).map(|&(e, _)| e)
}
