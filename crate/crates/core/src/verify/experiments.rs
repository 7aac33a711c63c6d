//! Small training experiments: capacity, rotation generalisation,
//! correspondence self-training, channel ablations and determinism.

use std::path::Path;

use crate::cache::Cache;
use crate::error::{Error, Result};
use crate::lrf::LrfVariant;
use crate::mesh::{shapes, TriMesh, Vec3};
use crate::netarch::{HeadSpec, MeshPatches, Model, ModelSpec};
use crate::tensor::Checkpoint;
use crate::train::{
    capsule_dataset, desk_spec, match_shape, prepare_mesh, sheet_dataset, train_correspondence, train_segmentation,
    uniform_loss, LabeledShape, MatchShape, MetricsReport, Prepared, Split, TrainConfig,
};

/// The 100-vertex, two-class capsule used by the overfit runs.
pub fn overfit_shape() -> LabeledShape {
    let (mesh, labels) = shapes::capsule(1.0, 2.0, 14, 2, 3);
    let mesh = shapes::deform(&mesh, 0.03, 3);
    LabeledShape::new("capsule", mesh, labels, Split::Train).expect("generator labels every vertex")
}

#[derive(Debug, Clone)]
pub struct OverfitOutcome {
    pub vertices: usize,
    /// First step whose train accuracy reached 99%, if any.
    pub step_reaching_99: Option<usize>,
    pub final_train_accuracy: f64,
    /// Accuracy on a rigidly moved copy that was never trained on.
    pub final_rotated_accuracy: f64,
    pub report: MetricsReport,
}

impl OverfitOutcome {
    pub fn gap(&self) -> f64 {
        (self.final_train_accuracy - self.final_rotated_accuracy).abs()
    }
}

/// One Adam step per epoch on every vertex of the capsule, with a rotated
/// copy held out as the test split.
pub fn segmentation_overfit(steps: usize, seed: u64) -> Result<OverfitOutcome> {
    let spec = desk_spec(LrfVariant::Curvature);
    let shape = overfit_shape();
    let r = shapes::rotation_about(Vec3::new(0.3, -0.5, 0.8), 2.1);
    let rotated = LabeledShape::new(
        "capsule rotated",
        shape.mesh.rigid_transform(&r, &Vec3::new(0.5, 1.0, -2.0)),
        shape.labels.clone(),
        Split::Test,
    )?;
    let data = vec![Prepared::build(&shape, &spec)?, Prepared::build(&rotated, &spec)?];
    let mut model = Model::new(spec, seed)?;
    let cfg = TrainConfig {
        epochs: steps,
        points_per_mesh: shape.mesh.vertex_count(),
        seed,
        ..TrainConfig::default()
    };
    let report = train_segmentation(&mut model, &data, &cfg)?;
    Ok(OverfitOutcome {
        vertices: shape.mesh.vertex_count(),
        step_reaching_99: report
            .epochs
            .iter()
            .find(|e| e.train_accuracy.is_some_and(|a| a >= 0.99))
            .map(|e| e.epoch),
        final_train_accuracy: report.final_train_accuracy.unwrap_or(0.0),
        final_rotated_accuracy: report.final_test_accuracy.unwrap_or(0.0),
        report,
    })
}

/// The desk backbone with a matching head at least as wide as the default
/// 30 eigenfunctions, so the functional map is fully determined.
pub fn correspondence_spec() -> ModelSpec {
    let mut spec = desk_spec(LrfVariant::Curvature);
    spec.head = HeadSpec::Correspondence { width: 32, blocks: 2 };
    spec
}

#[derive(Debug, Clone)]
pub struct CorrespondenceOutcome {
    pub vertices: usize,
    pub steps: usize,
    pub uniform_loss: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Fraction of vertices matched exactly after training.
    pub exact_matches: f64,
}

impl CorrespondenceOutcome {
    pub fn ratio(&self) -> f64 {
        self.final_loss / self.uniform_loss
    }
}

/// Trains a mesh against itself as the null shape.
pub fn correspondence_self_training(mesh: &TriMesh, steps: usize, k: usize, seed: u64) -> Result<CorrespondenceOutcome> {
    let spec = correspondence_spec();
    let n = mesh.vertex_count();
    let shape = LabeledShape::new("self", mesh.clone(), (0..n).collect(), Split::Train)?;
    let null = MatchShape::new(Prepared::build(&shape, &spec)?, k, true)?;
    let source = MatchShape::new(null.prepared.clone(), k, false)?;
    let mut model = Model::new(spec, seed)?;
    let baseline = uniform_loss(&source, &null)?;
    let (_, _, initial) = match_shape(&mut model, &source, &null)?;
    let cfg = TrainConfig {
        epochs: steps,
        seed,
        spectral_k: k,
        task: crate::train::Task::Correspondence,
        ..TrainConfig::default()
    };
    train_correspondence(&mut model, std::slice::from_ref(&source), &null, &cfg, &[0.0])?;
    let (_, matches, fin) = match_shape(&mut model, &source, &null)?;
    Ok(CorrespondenceOutcome {
        vertices: n,
        steps,
        uniform_loss: baseline,
        initial_loss: initial,
        final_loss: fin,
        exact_matches: matches.iter().enumerate().filter(|&(i, &m)| i == m).count() as f64 / n as f64,
    })
}

pub const ABLATIONS: [&str; 5] = ["full", "no-coords", "no-geodesic", "no-normals", "no-lrf"];

/// Applies one of [`ABLATIONS`] to `spec`.
pub fn ablate(spec: &mut ModelSpec, name: &str) -> Result<()> {
    match name {
        "full" => {}
        "no-coords" => spec.ablation.use_coords = false,
        "no-geodesic" => spec.ablation.use_geodesic = false,
        "no-normals" => spec.ablation.use_normals = false,
        "no-lrf" => spec.ablation.use_lrf = false,
        "no-feature-prop" => spec.ablation.propagate_features = false,
        other => return Err(Error::invalid(format!("unknown ablation {other:?}"))),
    }
    Ok(())
}

/// Test accuracies per seed, in [`ABLATIONS`] order.
#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub seeds: Vec<u64>,
    pub accuracy: Vec<[f64; 5]>,
}

impl AblationOutcome {
    pub fn mean(&self, variant: usize) -> f64 {
        self.accuracy.iter().map(|a| a[variant]).sum::<f64>() / self.accuracy.len() as f64
    }

    /// Mean accuracy lost against the full model.
    pub fn mean_drop(&self, variant: usize) -> f64 {
        self.mean(0) - self.mean(variant)
    }
}

/// Bent sheets labelled by a boundary band; test sheets are randomly moved.
/// Each seed regenerates the data and the initialisation.
pub fn ablation_study(seeds: &[u64], epochs: usize) -> Result<AblationOutcome> {
    let mut accuracy = Vec::new();
    for &seed in seeds {
        let data = sheet_dataset(4, 4, 12, 2, 100 + seed);
        let base = desk_spec(LrfVariant::Curvature);
        let meshes = data.iter().map(|s| prepare_mesh(&s.mesh)).collect::<Result<Vec<_>>>()?;
        let patches = meshes.iter().map(|m| MeshPatches::build(m, &base)).collect::<Result<Vec<_>>>()?;
        let mut row = [0.0; 5];
        for (slot, name) in row.iter_mut().zip(ABLATIONS) {
            let mut spec = base.clone();
            ablate(&mut spec, name)?;
            let prepared = data
                .iter()
                .zip(&meshes)
                .zip(&patches)
                .map(|((s, m), p)| Prepared::new(s, m.clone(), p, &spec))
                .collect::<Result<Vec<_>>>()?;
            let mut model = Model::new(spec, seed)?;
            let cfg = TrainConfig {
                epochs,
                eval_every_epoch: false,
                seed,
                ..TrainConfig::default()
            };
            let r = train_segmentation(&mut model, &prepared, &cfg)?;
            *slot = r.final_test_accuracy.unwrap_or(0.0);
            log::info!("ablation seed {seed} {name}: test accuracy {slot:.4}");
        }
        accuracy.push(row);
    }
    Ok(AblationOutcome {
        seeds: seeds.to_vec(),
        accuracy,
    })
}

/// Bit patterns of every parameter.
fn param_bits(model: &Model) -> Vec<u64> {
    model.params.values().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
}

#[derive(Debug, Clone)]
pub struct DeterminismOutcome {
    pub metrics_identical: bool,
    pub params_identical: bool,
    pub checkpoint_bytes_identical: bool,
    pub checkpoint_params_identical: bool,
    pub cache_second_run_misses: usize,
    pub cache_second_run_hits: usize,
    pub cache_files_unchanged: bool,
}

impl DeterminismOutcome {
    pub fn passed(&self) -> bool {
        self.metrics_identical
            && self.params_identical
            && self.checkpoint_bytes_identical
            && self.checkpoint_params_identical
            && self.cache_second_run_misses == 0
            && self.cache_second_run_hits > 0
            && self.cache_files_unchanged
    }
}

fn snapshot(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        out.push((p.display().to_string(), bytes));
    }
    out.sort();
    Ok(out)
}

/// Two seeded single-threaded trainings, a checkpoint round trip and two
/// preprocessing passes over one cache, all under `dir`.
pub fn determinism(dir: &Path, seed: u64) -> Result<DeterminismOutcome> {
    let spec = desk_spec(LrfVariant::Curvature);
    let data = capsule_dataset(2, 1, seed);
    let cache_dir = dir.join("cache");

    let preprocess = |cache: &Cache| -> Result<Vec<Prepared>> { data.iter().map(|s| cache.prepared(s, &spec)).collect() };
    let first = Cache::new(&cache_dir)?;
    let prepared = preprocess(&first)?;
    let before = snapshot(&cache_dir)?;
    let second = Cache::new(&cache_dir)?;
    let again = preprocess(&second)?;
    let stats = second.stats();
    let cache_files_unchanged = snapshot(&cache_dir)? == before
        && prepared.iter().zip(&again).all(|(a, b)| a.inputs == b.inputs);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::invalid(e.to_string()))?;
    let run = || -> Result<(String, Model)> {
        let mut model = Model::new(spec.clone(), seed)?;
        let cfg = TrainConfig {
            epochs: 4,
            points_per_mesh: 60,
            seed,
            ..TrainConfig::default()
        };
        let report = pool.install(|| train_segmentation(&mut model, &prepared, &cfg))?;
        Ok((report.epochs_csv() + &report.curve_csv(), model))
    };
    let (m1, a) = run()?;
    let (m2, b) = run()?;

    let path = dir.join("model.ckpt");
    let ck = a.params.to_checkpoint(spec.spec_hash(), 4);
    ck.save(&path)?;
    let loaded = Checkpoint::load_for(&path, &spec.spec_hash())?;
    let mut restored = Model::new(spec.clone(), seed + 1)?;
    restored.params.load_checkpoint(&loaded)?;
    let resaved = restored.params.to_checkpoint(spec.spec_hash(), 4).to_bytes();
    let on_disk = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;

    Ok(DeterminismOutcome {
        metrics_identical: m1 == m2,
        params_identical: param_bits(&a) == param_bits(&b),
        checkpoint_bytes_identical: resaved == on_disk,
        checkpoint_params_identical: param_bits(&restored) == param_bits(&a),
        cache_second_run_misses: stats.misses + stats.rebuilt,
        cache_second_run_hits: stats.hits,
        cache_files_unchanged,
    })
}
