//! One function per subcommand. Each returns the files it wrote so the caller
//! can record them in the manifest.

use std::path::PathBuf;
use std::time::Instant;

use jackpot::checkpoint::{load_masks, load_model, save_masks, save_model};
use jackpot::criteria::{compute_scores, score_magnitude};
use jackpot::data::{load_cifar10, load_mnist, synth_gaussian_classes, Dataset};
use jackpot::experiment::{Suite, SuiteConfig, SuiteRunner, Workbench};
use jackpot::finetune::finetune;
use jackpot::metrics::{aggregate_runs, evaluate, mask_overlap, write_aggregate_csv, GroupKey};
use jackpot::nn::{build_model, Arch, EpochStats, Model};
use jackpot::report::{read_runs_csv, write_runs_csv, write_trajectory_csv, RunSummary, TrajectoryRow};
use jackpot::search::{search, SearchConfig, Warmup};
use jackpot::seed::derive_seed;
use jackpot::masking::BinaryMask;
use jackpot::{Error, Result, Scalar};

use crate::config::{Config, DataName, CIFAR_DEFAULT_SUBSET};

const EVAL_BATCH: usize = 500;

/// Everything a command needs besides its own arguments.
pub struct Context {
    pub cfg: Config,
    pub out_dir: PathBuf,
    /// Already resolved: flag, then environment, then config.
    pub data_dir: Option<PathBuf>,
}

impl Context {
    fn seed(&self, stage: &str) -> u64 {
        derive_seed(self.cfg.run.seed, stage)
    }

    fn arch(&self) -> Result<Arch> {
        self.cfg.run.arch.parse()
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.cfg.run.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("model.ckpt"))
    }

    fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn dataset_name(&self) -> &'static str {
        match self.cfg.data.name {
            DataName::Mnist => "mnist",
            DataName::Cifar10 => "cifar10",
            DataName::Synth => "synth",
        }
    }

    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.cfg.data;
        let dir = || {
            self.data_dir.clone().ok_or_else(|| {
                Error::Usage(format!("no data directory for {}: pass --data-dir, set {} or [data] dir", self.dataset_name(), jackpot::data::DATA_DIR_ENV))
            })
        };
        let (mut train, test) = match d.name {
            DataName::Mnist => load_mnist(dir()?)?,
            DataName::Cifar10 => load_cifar10(dir()?)?,
            DataName::Synth => {
                let seed = self.seed("data/synth");
                let make = |n, label| synth_gaussian_classes(d.synth_classes, d.synth_dim, n, d.synth_separation, derive_seed(seed, label));
                (make(d.synth_per_class, "train")?, make(d.synth_test_per_class, "test")?)
            }
        };
        let subset = match (d.name, d.train_subset) {
            (_, Some(n)) => n,
            (DataName::Cifar10, None) => CIFAR_DEFAULT_SUBSET,
            _ => 0,
        };
        if subset > 0 && subset < train.len() {
            train = train.stratified_subset(subset, self.seed("data/subset"))?;
        }
        if !d.augment {
            train.augment = None;
        }
        Ok((train, test))
    }

    fn load_pretrained<F: Scalar>(&self) -> Result<Model<F>> {
        let path = self.checkpoint_path();
        if !path.exists() {
            return Err(Error::io(&path, std::io::Error::new(std::io::ErrorKind::NotFound, "model checkpoint not found; run `jackpot pretrain` first or set [run] checkpoint")));
        }
        let model = load_model::<F>(&path)?;
        let arch = self.arch()?;
        if model.arch != arch {
            return Err(Error::Config(format!("checkpoint {} holds a {} model but [run] arch is {}", path.display(), model.arch, arch)));
        }
        Ok(model)
    }

    fn summary<F: Scalar>(&self, run_id: String, label: &str, p: f64, epochs: usize, model: &Model<F>, masks: Option<&[BinaryMask]>, test: &Dataset) -> Result<RunSummary> {
        let eval = evaluate(model, masks, test, EVAL_BATCH)?;
        let overlap_vs_magnitude = match masks {
            Some(m) => Some(mask_overlap(&score_magnitude(model).masks(p), m)?),
            None => None,
        };
        Ok(RunSummary {
            run_id,
            arch: model.arch.to_string(),
            dataset: self.dataset_name().to_string(),
            criterion: label.to_string(),
            sparsity: p,
            epochs,
            seed: self.cfg.run.seed,
            top1: eval.top1,
            top5: eval.top5,
            overlap_vs_magnitude,
            overlap_vs_init: None,
            wall_clock_s: None,
        })
    }

    fn timed(&self, start: Instant) -> Option<f64> {
        self.cfg.run.timing.then(|| start.elapsed().as_secs_f64())
    }
}

fn p_tag(p: f64) -> String {
    format!("p{}", p)
}

fn training_rows(run_id: &str, p: f64, history: &[EpochStats]) -> Vec<TrajectoryRow> {
    history
        .iter()
        .map(|h| TrajectoryRow {
            run_id: run_id.to_string(),
            epoch: h.epoch,
            lr: h.lr,
            train_loss: h.train_loss,
            train_acc: h.train_acc,
            test_acc: Some(h.test_acc),
            sparsity: p,
            overlap_vs_init: None,
        })
        .collect()
}

fn write_runs(ctx: &Context, stem: &str, runs: &[RunSummary], traj: Option<&[TrajectoryRow]>) -> Result<Vec<PathBuf>> {
    let mut paths = vec![ctx.out(&format!("{stem}_runs.csv"))];
    write_runs_csv(runs, &paths[0])?;
    if let Some(rows) = traj {
        paths.push(ctx.out(&format!("{stem}_trajectory.csv")));
        write_trajectory_csv(rows, &paths[1])?;
    }
    Ok(paths)
}

pub fn pretrain<F: Scalar>(ctx: &Context) -> Result<Vec<PathBuf>> {
    let (train, test) = ctx.load_data()?;
    let model = build_model::<F>(ctx.arch()?, &train.sample_shape, train.num_classes, ctx.seed("model"))?;
    let start = Instant::now();
    let trained = jackpot::nn::pretrain(model, &train, &test, &ctx.cfg.pretrain, ctx.seed("pretrain"))?;
    let wall = ctx.timed(start);
    let ckpt = ctx.checkpoint_path();
    if let Some(parent) = ckpt.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let meta = [
        ("arch", trained.model.arch.to_string()),
        ("dataset", ctx.dataset_name().to_string()),
        ("seed", ctx.cfg.run.seed.to_string()),
        ("epochs", trained.epochs.to_string()),
    ];
    save_model(&ckpt, &trained.model, &meta)?;
    let run_id = format!("pretrain/dense/s{}", ctx.cfg.run.seed);
    let mut row = ctx.summary(run_id.clone(), "dense", 0.0, trained.epochs, &trained.model, None, &test)?;
    row.wall_clock_s = wall;
    println!("pretrain: {} on {}, top-1 {:.4} after {} epochs -> {}", row.arch, row.dataset, row.top1, trained.epochs, ckpt.display());
    let mut paths = vec![ckpt];
    paths.extend(write_runs(ctx, "pretrain", &[row], Some(&training_rows(&run_id, 0.0, &trained.history)))?);
    Ok(paths)
}

/// Sparsities for `score` and `search`: the sweep when given, else the stage's own.
pub fn sparsities(cfg: &Config, own: f64) -> Vec<f64> {
    if cfg.sweep.sparsities.is_empty() {
        vec![own]
    } else {
        cfg.sweep.sparsities.clone()
    }
}

pub fn score<F: Scalar>(ctx: &Context) -> Result<Vec<PathBuf>> {
    let (train, test) = ctx.load_data()?;
    let model = ctx.load_pretrained::<F>()?;
    let sc = &ctx.cfg.score;
    let start = Instant::now();
    let scores = compute_scores(&model, sc.criterion, &train, &sc.options, ctx.seed("score"))?;
    let wall = ctx.timed(start);
    let names = model.prunable_names();
    let (mut paths, mut runs) = (Vec::new(), Vec::new());
    for p in sparsities(&ctx.cfg, sc.sparsity) {
        let masks = scores.masks(p);
        let path = ctx.out(&format!("score-{}-{}.masks", sc.criterion.name(), p_tag(p)));
        save_masks(&path, &names, &masks, &[("criterion", sc.criterion.name().to_string()), ("sparsity", p.to_string())])?;
        let mut row = ctx.summary(format!("score/{}/{}/s{}", sc.criterion.name(), p_tag(p), ctx.cfg.run.seed), sc.criterion.name(), p, 0, &model, Some(&masks), &test)?;
        row.wall_clock_s = wall;
        println!("score: {} at p={}: mask-only top-1 {:.4} -> {}", sc.criterion.name(), p, row.top1, path.display());
        paths.push(path);
        runs.push(row);
    }
    paths.extend(write_runs(ctx, "score", &runs, None)?);
    Ok(paths)
}

pub fn search_cmd<F: Scalar>(ctx: &Context) -> Result<Vec<PathBuf>> {
    let (train, test) = ctx.load_data()?;
    let model = ctx.load_pretrained::<F>()?;
    let names = model.prunable_names();
    let (mut paths, mut runs, mut traj) = (Vec::new(), Vec::new(), Vec::new());
    for p in sparsities(&ctx.cfg, ctx.cfg.search.sparsity) {
        let cfg = SearchConfig { sparsity: p, seed: ctx.seed("search"), ..ctx.cfg.search.clone() };
        let start = Instant::now();
        let out = search(&model, &train, &test, &cfg)?;
        let wall = ctx.timed(start);
        let label = match cfg.warmup {
            Warmup::Magnitude => "jackpot".to_string(),
            w => format!("jackpot_{}", w.name()),
        };
        let run_id = format!("search/{}/{}/s{}", label, p_tag(p), ctx.cfg.run.seed);
        let path = ctx.out(&format!("search-{}.masks", p_tag(p)));
        save_masks(&path, &names, &out.masks, &[("warmup", cfg.warmup.name().to_string()), ("sparsity", p.to_string()), ("epochs", cfg.epochs.to_string())])?;
        let mut row = ctx.summary(run_id.clone(), &label, p, cfg.epochs, &model, Some(&out.masks), &test)?;
        row.overlap_vs_init = Some(mask_overlap(&out.initial_masks, &out.masks)?);
        row.wall_clock_s = wall;
        println!("search: warm-up {} at p={}: top-1 {:.4} after {} epochs -> {}", cfg.warmup, p, row.top1, cfg.epochs, path.display());
        traj.extend(out.history.iter().map(|h| TrajectoryRow {
            run_id: run_id.clone(),
            epoch: h.epoch,
            lr: h.lr,
            train_loss: h.train_loss,
            train_acc: h.train_acc,
            test_acc: h.test_acc,
            sparsity: h.sparsity,
            overlap_vs_init: Some(h.overlap_vs_init),
        }));
        paths.push(path);
        runs.push(row);
    }
    paths.extend(write_runs(ctx, "search", &runs, Some(&traj))?);
    Ok(paths)
}

pub fn finetune_cmd<F: Scalar>(ctx: &Context) -> Result<Vec<PathBuf>> {
    let (train, test) = ctx.load_data()?;
    let model = ctx.load_pretrained::<F>()?;
    let ft = &ctx.cfg.finetune;
    let p = ft.sparsity;
    let mask_path = ft.masks.clone().unwrap_or_else(|| ctx.out(&format!("search-{}.masks", p_tag(p))));
    let (names, masks) = load_masks(&mask_path)?;
    if names != model.prunable_names() {
        return Err(Error::Config(format!("{} holds masks for {:?}, model has {:?}", mask_path.display(), names, model.prunable_names())));
    }
    let start = Instant::now();
    let tuned = finetune(model.clone(), &masks, &train, &test, &ft.optimizer, ctx.seed("finetune"))?;
    let wall = ctx.timed(start);
    let ckpt = ctx.out(&format!("finetune-{}.ckpt", p_tag(p)));
    save_model(&ckpt, &tuned.model, &[("sparsity", p.to_string()), ("epochs", tuned.epochs.to_string())])?;
    let run_id = format!("finetune/{}/s{}", p_tag(p), ctx.cfg.run.seed);
    let mut row = ctx.summary(run_id.clone(), "finetune", p, tuned.epochs, &tuned.model, Some(&masks), &test)?;
    row.overlap_vs_magnitude = Some(mask_overlap(&score_magnitude(&model).masks(p), &masks)?);
    row.wall_clock_s = wall;
    println!("finetune: p={}: top-1 {:.4} after {} epochs -> {}", p, row.top1, tuned.epochs, ckpt.display());
    let mut paths = vec![ckpt];
    paths.extend(write_runs(ctx, "finetune", &[row], Some(&training_rows(&run_id, p, &tuned.history)))?);
    Ok(paths)
}

pub fn experiment<F: Scalar>(ctx: &Context, suite: Suite, threads: Option<usize>) -> Result<Vec<PathBuf>> {
    let (train, test) = ctx.load_data()?;
    let model = ctx.load_pretrained::<F>()?;
    let mut cfg: SuiteConfig = ctx.cfg.experiment.clone();
    if let Some(t) = threads {
        cfg.threads = t;
    }
    cfg.timing |= ctx.cfg.run.timing;
    let bench = Workbench { dataset: ctx.dataset_name().to_string(), pretrained: &model, train: &train, test: &test };
    let runner = SuiteRunner::new(bench, cfg)?;
    let out = runner.run(suite)?;
    for a in &out.aggregates {
        println!("{suite}: {:<28} n={} top-1 {}", a.group, a.runs, a.pct());
    }
    out.write(&ctx.out_dir)
}

/// Merge runs CSVs and aggregate top-1 per group.
pub fn report(ctx: &Context, inputs: &[PathBuf], group: GroupKey) -> Result<Vec<PathBuf>> {
    if inputs.is_empty() {
        return Err(Error::Usage("report needs at least one runs CSV".into()));
    }
    let mut runs = Vec::new();
    for path in inputs {
        runs.extend(read_runs_csv(path)?);
    }
    let rows = aggregate_runs(&runs, group)?;
    for a in &rows {
        println!("{:<36} n={} top-1 {}", a.group, a.runs, a.pct());
    }
    let path = ctx.out("report_aggregate.csv");
    write_aggregate_csv(&rows, &path)?;
    Ok(vec![path])
}
