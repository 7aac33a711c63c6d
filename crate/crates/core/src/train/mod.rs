//! Preparing shapes for the network, the two training loops and their
//! metrics.

mod data;
mod metrics;

pub use data::{
    boundary_hops, capsule_dataset, load_dataset, load_root, read_labels, sheet_dataset, template_pairs, write_dataset,
    write_labels, LabeledShape, Manifest, ManifestEntry, Split, MANIFEST_FILE,
};
pub use metrics::{geodesic_error_curve, EpochMetrics, MetricsReport};

use std::path::PathBuf;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lrf::LrfVariant;
use crate::mesh::TriMesh;
use crate::netarch::{accuracy, segmentation_loss, HeadSpec, MeshInputs, MeshPatches, Model, ModelSpec};
use crate::spectral::{self, SpectralBasis};
use crate::tensor::{AdamState, Mode, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Segmentation,
    Correspondence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub points_per_mesh: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub task: Task,
    /// Eigenfunctions per shape for correspondence.
    pub spectral_k: usize,
    /// Skip per-epoch test evaluation (only the final epoch is evaluated).
    pub eval_every_epoch: bool,
    /// Where the last good parameters go if training diverges.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recovery_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            points_per_mesh: 2000,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            task: Task::Segmentation,
            spectral_k: 30,
            eval_every_epoch: true,
            recovery_checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.points_per_mesh == 0 || self.spectral_k == 0 || !(self.lr > 0.0) {
            return Err(Error::invalid("points per mesh, spectral k and learning rate must be positive"));
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamState {
        let mut a = AdamState::new(self.lr);
        a.beta1 = self.beta1;
        a.beta2 = self.beta2;
        a.eps = self.eps;
        a
    }
}

/// A desk-scale spec: one conv and two residual blocks of width 8 with
/// `K = 8`, and a four-block segmentation head.
pub fn desk_spec(lrf_variant: LrfVariant) -> ModelSpec {
    use crate::netarch::{ConvSpec, LayerKind, LayerSpec};
    let conv = |scale: f64| ConvSpec { k: 8, scale, lambda: 1 };
    let mut spec = ModelSpec::paper_default();
    spec.base_width = 8;
    spec.base_radius = 0.2;
    spec.lrf_variant = lrf_variant;
    spec.layers = vec![
        LayerSpec {
            kind: LayerKind::LrfConvBn,
            convs: vec![conv(1.0)],
        },
        LayerSpec {
            kind: LayerKind::ResidualBlock,
            convs: vec![conv(1.0), conv(1.0)],
        },
        LayerSpec {
            kind: LayerKind::ResidualBlock,
            convs: vec![conv(2.0), conv(2.0)],
        },
    ];
    spec.head = HeadSpec::Segmentation {
        widths: vec![64, 32, 16, 8],
    };
    spec
}

/// Mesh with normals and curvature directions plus the network inputs.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub name: String,
    pub mesh: TriMesh,
    pub labels: Vec<usize>,
    pub split: Split,
    pub inputs: MeshInputs,
    /// Vertices usable as patch centers.
    pub centers: Vec<usize>,
}

/// Estimates normals and curvature directions.
pub fn prepare_mesh(mesh: &TriMesh) -> Result<TriMesh> {
    mesh.clone().estimate_normals().estimate_curvature_dirs()
}

impl Prepared {
    /// `mesh` must already carry normals and curvature directions.
    pub fn new(shape: &LabeledShape, mesh: TriMesh, patches: &MeshPatches, spec: &ModelSpec) -> Result<Self> {
        let inputs = MeshInputs::new(&mesh, patches, spec)?;
        Ok(Self {
            name: shape.name.clone(),
            centers: mesh.patch_centers(),
            mesh,
            labels: shape.labels.clone(),
            split: shape.split,
            inputs,
        })
    }

    /// Builds everything from scratch (no cache).
    pub fn build(shape: &LabeledShape, spec: &ModelSpec) -> Result<Self> {
        let mesh = prepare_mesh(&shape.mesh)?;
        let patches = MeshPatches::build(&mesh, spec)?;
        Self::new(shape, mesh, &patches, spec)
    }

    fn center_labels(&self, centers: &[usize]) -> Vec<usize> {
        centers.iter().map(|&c| self.labels[c]).collect()
    }
}

/// Correspondence extras: a spectral basis, plus all-pairs geodesics for the
/// null shape.
#[derive(Debug, Clone)]
pub struct MatchShape {
    pub prepared: Prepared,
    pub basis: SpectralBasis,
    pub distances: Option<Vec<f64>>,
}

impl MatchShape {
    pub fn new(prepared: Prepared, k: usize, with_distances: bool) -> Result<Self> {
        let basis = spectral::laplacian_basis(&prepared.mesh, k)?;
        let distances = with_distances.then(|| crate::geodesy::all_pairs(&prepared.mesh));
        Ok(Self {
            prepared,
            basis,
            distances,
        })
    }
}

fn class_count(model: &Model) -> Result<usize> {
    match &model.spec.head {
        HeadSpec::Segmentation { widths } => Ok(*widths.last().expect("validated")),
        HeadSpec::Correspondence { .. } => Err(Error::invalid("segmentation needs a segmentation head")),
    }
}

/// Accuracy over every center vertex of `shapes` in eval mode.
pub fn evaluate_segmentation(model: &mut Model, shapes: &[&Prepared]) -> Result<f64> {
    let (mut hits, mut total) = (0.0, 0usize);
    for s in shapes {
        let probs = model.predict(&s.inputs)?;
        let rows = Tensor::from_fn(&[s.centers.len(), probs.cols()], |i| {
            probs.at(s.centers[i / probs.cols()], i % probs.cols())
        });
        let acc = accuracy(&rows, &s.center_labels(&s.centers));
        hits += acc * s.centers.len() as f64;
        total += s.centers.len();
    }
    Ok(if total == 0 { 0.0 } else { hits / total as f64 })
}

/// Restores the last good parameters, optionally writes them out, and turns
/// `err` into a divergence report.
fn diverged(model: &mut Model, good: &crate::nn::Params, cfg: &TrainConfig, epoch: usize, step: u64, err: Error) -> Error {
    model.params = good.clone();
    let mut msg = format!("training diverged at epoch {epoch}, step {step}: {err}");
    if let Some(path) = &cfg.recovery_checkpoint {
        let ck = model.params.to_checkpoint(model.spec.spec_hash(), step);
        match ck.save(path) {
            Ok(()) => msg.push_str(&format!("; last good parameters saved to {}", path.display())),
            Err(e) => msg.push_str(&format!("; saving last good parameters failed: {e}")),
        }
    }
    log::error!("{msg}");
    Error::Numerical(msg)
}

/// Per epoch and per training shape: sample centers, one Adam step on the
/// mean class NLL. Test accuracy is measured after every epoch.
pub fn train_segmentation(model: &mut Model, data: &[Prepared], cfg: &TrainConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let classes = class_count(model)?;
    for s in data {
        if let Some(&bad) = s.labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("{}: label {bad} outside {classes} classes", s.name)));
        }
    }
    let train: Vec<&Prepared> = data.iter().filter(|s| s.split == Split::Train).collect();
    let test: Vec<&Prepared> = data.iter().filter(|s| s.split == Split::Test).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = cfg.optimizer();
    let mut report = MetricsReport::default();
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        for s in &train {
            let m = cfg.points_per_mesh.min(s.centers.len());
            let picks: Vec<usize> = sample(&mut rng, s.centers.len(), m).into_iter().map(|i| s.centers[i]).collect();
            let labels = s.center_labels(&picks);
            let good = model.params.clone();
            let mut step = || -> Result<f64> {
                let mut sess = model.params.session(Mode::Train, true);
                let f = model.arch.backbone(&mut sess, &s.inputs)?;
                let rows = sess.g.gather_rows(f, &picks)?;
                let probs = model.arch.head(&mut sess, rows)?;
                let loss = segmentation_loss(&mut sess, probs, &labels)?;
                let value = sess.g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Numerical(format!("loss is {value} on {}", s.name)));
                }
                let grads = sess.g.backward(loss)?;
                let pg = sess.param_grads(&grads);
                drop(sess);
                adam.step(model.params.values_mut(), &pg)?;
                Ok(value)
            };
            match step() {
                Ok(v) => loss_sum += v,
                Err(e) => return Err(diverged(model, &good, cfg, epoch, adam.step, e)),
            }
        }
        let last = epoch + 1 == cfg.epochs;
        let (train_acc, test_acc) = if cfg.eval_every_epoch || last {
            (
                Some(evaluate_segmentation(model, &train)?),
                (!test.is_empty()).then(|| evaluate_segmentation(model, &test)).transpose()?,
            )
        } else {
            (None, None)
        };
        report.epochs.push(EpochMetrics {
            epoch: epoch + 1,
            loss: if train.is_empty() { 0.0 } else { loss_sum / train.len() as f64 },
            train_accuracy: train_acc,
            test_accuracy: test_acc,
        });
        log::info!(
            "epoch {}: loss {:.5} train acc {:?} test acc {:?}",
            epoch + 1,
            report.epochs[epoch].loss,
            train_acc,
            test_acc
        );
    }
    if cfg.epochs == 0 {
        report.final_train_accuracy = Some(evaluate_segmentation(model, &train)?);
        report.final_test_accuracy = (!test.is_empty()).then(|| evaluate_segmentation(model, &test)).transpose()?;
    } else {
        let e = report.epochs.last().expect("epochs > 0");
        report.final_train_accuracy = e.train_accuracy;
        report.final_test_accuracy = e.test_accuracy;
    }
    Ok(report)
}

/// Matches every source vertex to the null shape and returns
/// `(soft map, hard matches, loss)` in eval mode.
pub fn match_shape(model: &mut Model, src: &MatchShape, null: &MatchShape) -> Result<(Tensor, Vec<usize>, f64)> {
    let dist = null
        .distances
        .as_deref()
        .ok_or_else(|| Error::invalid("null shape has no distance matrix"))?;
    let mut s = model.params.session(Mode::Eval, false);
    let fx = model.arch.backbone(&mut s, &src.prepared.inputs)?;
    let fx = model.arch.head(&mut s, fx)?;
    let fy = model.arch.backbone(&mut s, &null.prepared.inputs)?;
    let fy = model.arch.head(&mut s, fy)?;
    let c = spectral::functional_map(&mut s.g, fx, fy, &src.basis, &null.basis)?;
    let p = spectral::soft_correspondence(&mut s.g, c, &src.basis, &null.basis)?;
    let l = spectral::fmnet_loss(&mut s.g, p, dist, &src.prepared.labels)?;
    let pt = s.g.value(p).clone();
    let matches = spectral::hard_matches(&pt);
    Ok((pt, matches, s.g.value(l).item()))
}

/// Loss of the uniform soft map for `src` against `null`.
pub fn uniform_loss(src: &MatchShape, null: &MatchShape) -> Result<f64> {
    let dist = null
        .distances
        .as_deref()
        .ok_or_else(|| Error::invalid("null shape has no distance matrix"))?;
    let (ny, nx) = (null.prepared.mesh.vertex_count(), src.prepared.mesh.vertex_count());
    let mut g = crate::tensor::Graph::new();
    let p = g.constant(Tensor::filled(&[ny, nx], 1.0 / ny as f64));
    let l = spectral::fmnet_loss(&mut g, p, dist, &src.prepared.labels)?;
    Ok(g.value(l).item())
}

/// Geodesic distance on the null shape between each match and its truth.
pub fn match_errors(matches: &[usize], truth: &[usize], null: &MatchShape) -> Result<Vec<f64>> {
    let dist = null
        .distances
        .as_deref()
        .ok_or_else(|| Error::invalid("null shape has no distance matrix"))?;
    let n = null.prepared.mesh.vertex_count();
    Ok(matches.iter().zip(truth).map(|(&m, &t)| dist[m * n + t]).collect())
}

/// Siamese training against a fixed null shape. The error curve of the
/// final epoch is evaluated on the test split (or on the training split
/// when there is no test split).
pub fn train_correspondence(
    model: &mut Model,
    sources: &[MatchShape],
    null: &MatchShape,
    cfg: &TrainConfig,
    radii: &[f64],
) -> Result<MetricsReport> {
    cfg.validate()?;
    let dist = null
        .distances
        .as_deref()
        .ok_or_else(|| Error::invalid("null shape has no distance matrix"))?;
    let train: Vec<&MatchShape> = sources.iter().filter(|s| s.prepared.split == Split::Train).collect();
    let test: Vec<&MatchShape> = sources.iter().filter(|s| s.prepared.split == Split::Test).collect();
    let mut adam = cfg.optimizer();
    let mut report = MetricsReport::default();
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        for src in &train {
            let good = model.params.clone();
            let mut step = || -> Result<f64> {
                let mut s = model.params.session(Mode::Train, true);
                let fx = model.arch.backbone(&mut s, &src.prepared.inputs)?;
                let fx = model.arch.head(&mut s, fx)?;
                let fy = model.arch.backbone(&mut s, &null.prepared.inputs)?;
                let fy = model.arch.head(&mut s, fy)?;
                let c = spectral::functional_map(&mut s.g, fx, fy, &src.basis, &null.basis)?;
                let p = spectral::soft_correspondence(&mut s.g, c, &src.basis, &null.basis)?;
                let loss = spectral::fmnet_loss(&mut s.g, p, dist, &src.prepared.labels)?;
                let value = s.g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Numerical(format!("loss is {value} on {}", src.prepared.name)));
                }
                let grads = s.g.backward(loss)?;
                let pg = s.param_grads(&grads);
                drop(s);
                adam.step(model.params.values_mut(), &pg)?;
                Ok(value)
            };
            match step() {
                Ok(v) => loss_sum += v,
                Err(e) => return Err(diverged(model, &good, cfg, epoch, adam.step, e)),
            }
        }
        report.epochs.push(EpochMetrics {
            epoch: epoch + 1,
            loss: if train.is_empty() { 0.0 } else { loss_sum / train.len() as f64 },
            train_accuracy: None,
            test_accuracy: None,
        });
        log::info!("epoch {}: loss {:.6}", epoch + 1, report.epochs[epoch].loss);
    }
    let eval = if test.is_empty() { &train } else { &test };
    let mut errors = Vec::new();
    for src in eval {
        let (_, matches, _) = match_shape(model, src, null)?;
        errors.extend(match_errors(&matches, &src.prepared.labels, null)?);
    }
    report.curve = geodesic_error_curve(&errors, radii);
    Ok(report)
}
