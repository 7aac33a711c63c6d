//! `geoconv`: preprocessing, training, evaluation, descriptor export and the
//! verification suites.
//!
//! Settings resolve in three layers, later ones winning: built-in defaults,
//! the TOML file given by `--config`, then command-line flags. Relative
//! paths inside the config file resolve against the file's directory.
//!
//! Exit codes: 0 success, 1 validation or config error (including failed
//! checkpoint compatibility), 2 numerical failure or failed check, 3 I/O.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use geoconv::cache::Cache;
use geoconv::lrf::LrfVariant;
use geoconv::lrfconv::ConvVariant;
use geoconv::mesh::{load_mesh, MeshFormat, TriMesh};
use geoconv::netarch::{Ablation, HeadSpec, MeshInputs, Model, ModelSpec};
use geoconv::tensor::Checkpoint;
use geoconv::train::{
    desk_spec, evaluate_segmentation, geodesic_error_curve, load_root, match_errors, train_correspondence,
    train_segmentation, LabeledShape, MatchShape, MetricsReport, Prepared, Split, Task, TrainConfig,
};
use geoconv::verify::{self, SuiteReport};
use geoconv::{Error, Result};
use rayon::prelude::*;
use serde::Deserialize;

#[derive(Parser, Debug)]
#[command(name = "geoconv", version, about = "Learned mesh descriptors from LRF-aligned geodesic convolutions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute normals, frames, patch tables (and spectral data for matching) into the cache.
    Preprocess,
    /// Train a model and write a checkpoint plus metrics CSVs.
    Train,
    /// Evaluate a checkpoint on the data root.
    Eval,
    /// Write per-vertex descriptor matrices.
    ExportDescriptors {
        /// Export a single mesh instead of every shape in the data root.
        #[arg(long)]
        mesh: Option<PathBuf>,
    },
    /// Run the finite-difference, invariance, geometry, frame and spectral suites.
    Gradcheck,
    /// Run every documented example as an executable check.
    Selftest {
        /// Also run the short training experiments.
        #[arg(long)]
        experiments: bool,
    },
}

#[derive(Args, Debug, Default)]
struct Opts {
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    data_root: Option<PathBuf>,
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores for preprocessing, 1 for training).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true, value_enum)]
    task: Option<TaskArg>,
    #[arg(long, global = true, value_enum)]
    conv: Option<ConvArg>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    no_normals: bool,
    #[arg(long, global = true)]
    no_geodesic: bool,
    #[arg(long, global = true)]
    no_lrf: bool,
    #[arg(long, global = true)]
    no_feature_prop: bool,
    #[arg(long, global = true)]
    no_coords: bool,
}

#[derive(ValueEnum, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum TaskArg {
    Seg,
    Match,
}

#[derive(ValueEnum, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum ConvArg {
    Cc,
    Pn,
}

/// Training settings a config file may override.
#[derive(Deserialize, Debug, Default)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    epochs: Option<usize>,
    points_per_mesh: Option<usize>,
    lr: Option<f64>,
    spectral_k: Option<usize>,
    eval_every_epoch: Option<bool>,
}

#[derive(Deserialize, Debug, Default)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    data_root: Option<PathBuf>,
    cache: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    workers: Option<usize>,
    task: Option<TaskArg>,
    conv: Option<ConvArg>,
    lrf: Option<LrfVariant>,
    /// A full model spec in TOML; replaces the built-in desk-scale spec.
    spec_file: Option<PathBuf>,
    ablation: Option<Ablation>,
    train: TrainFile,
}

impl FileConfig {
    fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg: FileConfig =
            toml::from_str(&text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data_root, &mut cfg.cache, &mut cfg.checkpoint, &mut cfg.out, &mut cfg.spec_file]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

/// Fully resolved settings of one invocation.
#[derive(Debug)]
struct RunConfig {
    data_root: Option<PathBuf>,
    cache: Option<PathBuf>,
    checkpoint: PathBuf,
    out: PathBuf,
    seed: u64,
    workers: Option<usize>,
    task: Task,
    spec: ModelSpec,
    train: TrainConfig,
}

impl RunConfig {
    fn resolve(opts: Opts) -> Result<Self> {
        let file = match &opts.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let task = match opts.task.or(file.task).unwrap_or(TaskArg::Seg) {
            TaskArg::Seg => Task::Segmentation,
            TaskArg::Match => Task::Correspondence,
        };
        let mut spec = match &file.spec_file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.clone(),
                    source: e,
                })?;
                ModelSpec::from_toml(&text)?
            }
            None => {
                let mut s = desk_spec(file.lrf.unwrap_or(LrfVariant::Curvature));
                if task == Task::Correspondence {
                    s.head = HeadSpec::Correspondence { width: 32, blocks: 2 };
                }
                s
            }
        };
        if let Some(lrf) = file.lrf {
            spec.lrf_variant = lrf;
        }
        match opts.conv.or(file.conv) {
            Some(ConvArg::Cc) => spec.conv_variant = ConvVariant::Cc,
            Some(ConvArg::Pn) => spec.conv_variant = ConvVariant::Pn,
            None => {}
        }
        if let Some(a) = file.ablation {
            spec.ablation = a;
        }
        let a = &mut spec.ablation;
        a.use_normals &= !opts.no_normals;
        a.use_geodesic &= !opts.no_geodesic;
        a.use_lrf &= !opts.no_lrf;
        a.propagate_features &= !opts.no_feature_prop;
        a.use_coords &= !opts.no_coords;
        spec.validate()?;

        let seed = opts.seed.or(file.seed).unwrap_or(0);
        let out = opts.out.or(file.out).unwrap_or_else(|| PathBuf::from("geoconv-out"));
        let mut train = TrainConfig {
            seed,
            task,
            epochs: 50,
            points_per_mesh: 500,
            ..TrainConfig::default()
        };
        let t = &file.train;
        if let Some(v) = opts.epochs.or(t.epochs) {
            train.epochs = v;
        }
        if let Some(v) = t.points_per_mesh {
            train.points_per_mesh = v;
        }
        if let Some(v) = t.lr {
            train.lr = v;
        }
        if let Some(v) = t.spectral_k {
            train.spectral_k = v;
        }
        if let Some(v) = t.eval_every_epoch {
            train.eval_every_epoch = v;
        }
        train.recovery_checkpoint = Some(out.join("recovery.ckpt"));
        train.validate()?;
        if let Some(0) = opts.workers.or(file.workers) {
            return Err(Error::Invalid("--workers must be at least 1".into()));
        }

        Ok(Self {
            data_root: opts.data_root.or(file.data_root),
            cache: opts.cache.or(file.cache),
            checkpoint: opts
                .checkpoint
                .or(file.checkpoint)
                .unwrap_or_else(|| out.join("model.ckpt")),
            out,
            seed,
            workers: opts.workers.or(file.workers),
            task,
            spec,
            train,
        })
    }

    fn data_root(&self) -> Result<&Path> {
        let root = self
            .data_root
            .as_deref()
            .ok_or_else(|| Error::Invalid("no data root: pass --data-root or set data_root in the config".into()))?;
        if !root.is_dir() {
            return Err(Error::Invalid(format!("data root {} is not a directory", root.display())));
        }
        Ok(root)
    }

    fn cache(&self) -> Result<Cache> {
        let dir = match &self.cache {
            Some(d) => d.clone(),
            None => self.data_root()?.join("cache"),
        };
        Cache::new(dir)
    }

    fn pool(&self, default: usize) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers.unwrap_or(default))
            .build()
            .map_err(|e| Error::Invalid(format!("thread pool: {e}")))
    }

    fn create_out(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::Io {
            path: self.out.clone(),
            source: e,
        })
    }
}

fn available_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Shapes of the data root prepared through the cache; correspondence also
/// returns the null shape (the one named `null`) with its distance matrix.
struct Loaded {
    shapes: Vec<Prepared>,
    matching: Option<(Vec<MatchShape>, MatchShape)>,
}

fn load(cfg: &RunConfig, cache: &Cache) -> Result<Loaded> {
    let data = load_root(cfg.data_root()?)?;
    let pool = cfg.pool(available_workers())?;
    let shapes: Vec<Prepared> =
        pool.install(|| data.par_iter().map(|s| cache.prepared(s, &cfg.spec)).collect::<Result<_>>())?;
    let matching = match cfg.task {
        Task::Segmentation => None,
        Task::Correspondence => Some(match_shapes(cfg, cache, &data, shapes.clone(), &pool)?),
    };
    Ok(Loaded { shapes, matching })
}

fn match_shapes(
    cfg: &RunConfig,
    cache: &Cache,
    data: &[LabeledShape],
    shapes: Vec<Prepared>,
    pool: &rayon::ThreadPool,
) -> Result<(Vec<MatchShape>, MatchShape)> {
    let null_at = data
        .iter()
        .position(|s| s.name == "null")
        .ok_or_else(|| Error::Invalid("correspondence needs a shape named \"null\" in the manifest".into()))?;
    let k = cfg.train.spectral_k;
    let mut all: Vec<Option<MatchShape>> = pool.install(|| {
        shapes
            .into_par_iter()
            .enumerate()
            .map(|(i, p)| cache.match_shape(p, k, i == null_at).map(Some))
            .collect::<Result<_>>()
    })?;
    let null = all[null_at].take().expect("present");
    let n = null.prepared.mesh.vertex_count();
    let sources: Vec<MatchShape> = all.into_iter().flatten().collect();
    for s in &sources {
        if let Some(bad) = s.prepared.labels.iter().find(|&&t| t >= n) {
            return Err(Error::Invalid(format!(
                "{}: target vertex {bad} outside the {n}-vertex null shape",
                s.prepared.name
            )));
        }
    }
    Ok((sources, null))
}

/// 26 radii from 0 to a quarter of the null shape's largest geodesic distance.
fn curve_radii(null: &MatchShape) -> Vec<f64> {
    let max = null.distances.as_deref().unwrap_or(&[]).iter().copied().fold(0.0, f64::max);
    (0..=25).map(|i| max * 0.25 * i as f64 / 25.0).collect()
}

fn cmd_preprocess(cfg: &RunConfig) -> Result<()> {
    let cache = cfg.cache()?;
    let loaded = load(cfg, &cache)?;
    let s = cache.stats();
    println!(
        "preprocessed {} shapes into {}: {} cache hits, {} misses, {} rebuilt",
        loaded.shapes.len(),
        cache.dir().display(),
        s.hits,
        s.misses,
        s.rebuilt
    );
    Ok(())
}

fn save_checkpoint(cfg: &RunConfig, model: &Model) -> Result<()> {
    if let Some(dir) = cfg.checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    model
        .params
        .to_checkpoint(cfg.spec.spec_hash(), cfg.train.epochs as u64)
        .save(&cfg.checkpoint)
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let cache = cfg.cache()?;
    let loaded = load(cfg, &cache)?;
    cfg.create_out()?;
    let mut model = Model::new(cfg.spec.clone(), cfg.seed)?;
    let pool = cfg.pool(1)?;
    let report = match &loaded.matching {
        None => pool.install(|| train_segmentation(&mut model, &loaded.shapes, &cfg.train))?,
        Some((sources, null)) => {
            let radii = curve_radii(null);
            pool.install(|| train_correspondence(&mut model, sources, null, &cfg.train, &radii))?
        }
    };
    save_checkpoint(cfg, &model)?;
    report.write(&cfg.out)?;
    let spec_path = cfg.out.join("spec.toml");
    std::fs::write(&spec_path, cfg.spec.to_toml()).map_err(|e| Error::Io {
        path: spec_path,
        source: e,
    })?;
    if let Some(e) = report.epochs.last() {
        println!("epoch {}: loss {:.6}", e.epoch, e.loss);
    }
    if let Some(a) = report.final_test_accuracy {
        println!("test accuracy {a:.4}");
    }
    println!("checkpoint {}", cfg.checkpoint.display());
    Ok(())
}

fn load_model(cfg: &RunConfig) -> Result<Model> {
    let ck = Checkpoint::load_for(&cfg.checkpoint, &cfg.spec.spec_hash())?;
    let mut model = Model::new(cfg.spec.clone(), cfg.seed)?;
    model.params.load_checkpoint(&ck)?;
    Ok(model)
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let mut model = load_model(cfg)?;
    let cache = cfg.cache()?;
    let loaded = load(cfg, &cache)?;
    cfg.create_out()?;
    let mut report = MetricsReport::default();
    match &loaded.matching {
        None => {
            let split = |want: Split| loaded.shapes.iter().filter(|s| s.split == want).collect::<Vec<_>>();
            let (train, test) = (split(Split::Train), split(Split::Test));
            if !train.is_empty() {
                report.final_train_accuracy = Some(evaluate_segmentation(&mut model, &train)?);
            }
            if !test.is_empty() {
                report.final_test_accuracy = Some(evaluate_segmentation(&mut model, &test)?);
            }
        }
        Some((sources, null)) => {
            let mut errors = Vec::new();
            for src in sources.iter().filter(|s| s.prepared.split == Split::Test) {
                let (_, matches, _) = geoconv::train::match_shape(&mut model, src, null)?;
                errors.extend(match_errors(&matches, &src.prepared.labels, null)?);
            }
            if errors.is_empty() {
                return Err(Error::Invalid("no test-split shapes to evaluate".into()));
            }
            report.curve = geodesic_error_curve(&errors, &curve_radii(null));
        }
    }
    report.write(&cfg.out)?;
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let path = cfg.out.join("eval.csv");
    let text = format!(
        "split,accuracy\ntrain,{}\ntest,{}\n",
        fmt(report.final_train_accuracy),
        fmt(report.final_test_accuracy)
    );
    std::fs::write(&path, text).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    for (name, acc) in [("train", report.final_train_accuracy), ("test", report.final_test_accuracy)] {
        if let Some(a) = acc {
            println!("{name} accuracy {a:.4}");
        }
    }
    if let Some((r, f)) = report.curve.last() {
        println!("{:.1}% of matches within geodesic radius {r:.4}", 100.0 * f);
    }
    Ok(())
}

fn export_one(cfg: &RunConfig, cache: &Cache, model: &mut Model, name: &str, mesh: &TriMesh) -> Result<PathBuf> {
    let mesh = cache.geometry(mesh)?;
    let patches = cache.mesh_patches(&mesh, &cfg.spec)?;
    let inputs = MeshInputs::new(&mesh, &patches, &cfg.spec)?;
    let centers: Vec<usize> = (0..mesh.vertex_count()).collect();
    let lsd = model.descriptors(&inputs, &centers)?;
    let text = cfg.out.join(format!("{name}.lsd.txt"));
    std::fs::write(&text, lsd.to_text()).map_err(|e| Error::Io { path: text.clone(), source: e })?;
    let bin = cfg.out.join(format!("{name}.lsd.bin"));
    std::fs::write(&bin, lsd.to_bytes()).map_err(|e| Error::Io { path: bin, source: e })?;
    Ok(text)
}

fn cmd_export(cfg: &RunConfig, mesh: Option<&Path>) -> Result<()> {
    let mut model = load_model(cfg)?;
    cfg.create_out()?;
    let meshes: Vec<(String, TriMesh)> = match mesh {
        Some(p) => {
            let format = MeshFormat::from_path(p)
                .ok_or_else(|| Error::Invalid(format!("{}: unknown mesh extension", p.display())))?;
            let name = p.file_stem().map_or("mesh".into(), |s| s.to_string_lossy().into_owned());
            vec![(name, load_mesh(p, format)?)]
        }
        None => load_root(cfg.data_root()?)?.into_iter().map(|s| (s.name, s.mesh)).collect(),
    };
    let cache = match (&cfg.cache, &cfg.data_root) {
        (None, None) => Cache::new(cfg.out.join("cache"))?,
        _ => cfg.cache()?,
    };
    for (name, m) in &meshes {
        let path = export_one(cfg, &cache, &mut model, name, m)?;
        println!("{name}: {} x {} -> {}", m.vertex_count(), cfg.spec.descriptor_width(), path.display());
    }
    Ok(())
}

fn print_reports(reports: &[SuiteReport]) -> bool {
    for r in reports {
        println!("{}", r.render());
    }
    let failed: Vec<String> = reports
        .iter()
        .flat_map(|r| r.failures().into_iter().map(move |c| format!("{}: {}", r.name, c.name)))
        .collect();
    if failed.is_empty() {
        println!("all checks passed");
    } else {
        println!("{} failed checks:", failed.len());
        for f in &failed {
            println!("  {f}");
        }
    }
    failed.is_empty()
}

fn run(command: Command, cfg: &RunConfig) -> Result<bool> {
    match command {
        Command::Preprocess => cmd_preprocess(cfg)?,
        Command::Train => cmd_train(cfg)?,
        Command::Eval => cmd_eval(cfg)?,
        Command::ExportDescriptors { mesh } => cmd_export(cfg, mesh.as_deref())?,
        Command::Gradcheck => return Ok(print_reports(&verify::all_suites(cfg.seed)?)),
        Command::Selftest { experiments } => {
            let scratch = cfg.out.join("selftest");
            std::fs::create_dir_all(&scratch).map_err(|e| Error::Io {
                path: scratch.clone(),
                source: e,
            })?;
            return Ok(print_reports(&[verify::selftest(&scratch, experiments, cfg.seed)?]));
        }
    }
    Ok(true)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerical(_) => 2,
        Error::Io { .. } | Error::Cache { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = RunConfig::resolve(cli.opts).and_then(|cfg| run(cli.command, &cfg));
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
