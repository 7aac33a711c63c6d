//! Executable check suites shared by the `gradcheck` and `selftest`
//! commands and the acceptance tests.
//!
//! Every suite returns a [`SuiteReport`] instead of panicking so a caller
//! can list all failures at once.

pub mod experiments;
mod selftest;

pub use selftest::selftest;

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use nalgebra::Matrix3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::Result;
use crate::geodesy::{all_pairs, farthest_point_sample, geodesic_ball, geodesic_distances};
use crate::lrf::{compute_lrfs, lrf_curvature, Lrf, LrfVariant};
use crate::lrfconv::ConvVariant;
use crate::mesh::{shapes, TriMesh, Vec3};
use crate::netarch::{segmentation_loss, HeadSpec, MeshInputs, MeshPatches, Model, ModelSpec};
use crate::patch::layer_radius;
use crate::spectral::{self, SpectralBasis};
use crate::tensor::gradcheck::{self, relative_error, FD_STEP};
use crate::tensor::{Graph, Mode, Tensor};
use crate::train::prepare_mesh;

/// Gradient tolerance for primitive ops.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Gradient tolerance for composite layers and whole networks.
pub const NETWORK_TOLERANCE: f64 = 1e-4;
/// Max-abs descriptor difference allowed between rotated copies.
pub const INVARIANCE_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    /// `value < bound`, with both in the detail.
    pub fn below(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self::new(name, value < bound, format!("{value:.3e} (bound {bound:.0e})"))
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: String,
    pub checks: Vec<Check>,
    pub elapsed: Duration,
}

impl SuiteReport {
    fn timed(name: &str, f: impl FnOnce() -> Result<Vec<Check>>) -> Result<Self> {
        let start = Instant::now();
        let checks = f()?;
        Ok(Self {
            name: name.to_string(),
            checks,
            elapsed: start.elapsed(),
        })
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    /// One line per check, then a summary line.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let _ = writeln!(s, "  [{}] {}: {}", if c.passed { "ok" } else { "FAIL" }, c.name, c.detail);
        }
        let failed = self.failures().count();
        let _ = writeln!(
            s,
            "{}: {} checks, {} failed ({:.1} s)",
            self.name,
            self.checks.len(),
            failed,
            self.elapsed.as_secs_f64()
        );
        s
    }
}

fn max_abs(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    (a - b).abs().max()
}

fn rotation_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).abs().max().max((r.determinant() - 1.0).abs())
}

// ---------------------------------------------------------------- gradients

/// The 2-layer toy network of the gradient suite: width 4, `K = 4`, one
/// 8-wide head block before the 8 classes.
pub fn gradient_toy_spec(variant: ConvVariant) -> ModelSpec {
    let mut spec = ModelSpec::toy(4, 2, 4, HeadSpec::Segmentation { widths: vec![8, 8] });
    spec.conv_variant = variant;
    spec.base_radius = 0.3;
    spec
}

/// Smallest distance to a ReLU or max-pool kink a gradient check point may
/// have; closer points sit on a non-differentiable crease at the FD step.
pub const KINK_MARGIN: f64 = 1e-4;

/// Full-parameter central-difference check of the training loss of `model`
/// (train mode, every vertex a center). `None` when the point lies within
/// `min_margin` of a kink, where the derivative is undefined at the FD scale.
pub fn network_gradient_error(model: &mut Model, inputs: &MeshInputs, labels: &[usize], min_margin: f64) -> Result<Option<f64>> {
    let stages = model.arch.stage_count();
    let (analytic, margin, trace) = {
        let mut s = model.params.session(Mode::Train, true);
        let mut trace = Vec::new();
        let f = model.arch.backbone_from(&mut s, inputs, 0, None, &mut trace)?;
        let y = model.arch.head(&mut s, f)?;
        let l = segmentation_loss(&mut s, y, labels)?;
        let g = s.g.backward(l)?;
        let trace: Vec<Tensor> = trace.iter().map(|&v| s.g.value(v).clone()).collect();
        (s.param_grads(&g), s.g.kink_margin(), trace)
    };
    if margin < min_margin {
        return Ok(None);
    }
    // first stage a parameter feeds; earlier stage outputs are reused as is
    let stage_of = |name: &str| -> usize {
        name.strip_prefix("backbone.")
            .and_then(|r| r.split('.').next())
            .and_then(|i| i.parse().ok())
            .unwrap_or(stages)
    };
    let starts: Vec<usize> = model.params.names().iter().map(|n| stage_of(n)).collect();
    // loss with stages `from..` recomputed, the rest read from `trace`
    let loss = |model: &mut Model, from: usize| -> Result<f64> {
        let mut s = model.params.session(Mode::Train, false);
        let f = match from {
            0 => model.arch.backbone(&mut s, inputs)?,
            _ => {
                let cached = s.g.constant(trace[from - 1].clone());
                model.arch.backbone_from(&mut s, inputs, from, Some(cached), &mut Vec::new())?
            }
        };
        let y = model.arch.head(&mut s, f)?;
        let l = segmentation_loss(&mut s, y, labels)?;
        Ok(s.g.value(l).item())
    };
    let slots: Vec<(usize, usize)> = (0..model.params.len())
        .flat_map(|p| (0..model.params.values()[p].len()).map(move |k| (p, k)))
        .collect();
    let base: &Model = model;
    let numeric = slots
        .par_iter()
        .map_init(
            || base.clone(),
            |m, &(p, k)| -> Result<f64> {
                let x0 = m.params.values()[p].data()[k];
                m.params.values_mut()[p].data_mut()[k] = x0 + FD_STEP;
                let fp = loss(m, starts[p])?;
                m.params.values_mut()[p].data_mut()[k] = x0 - FD_STEP;
                let fm = loss(m, starts[p])?;
                m.params.values_mut()[p].data_mut()[k] = x0;
                Ok((fp - fm) / (2.0 * FD_STEP))
            },
        )
        .collect::<Result<Vec<f64>>>()?;
    Ok(Some(relative_error(&analytic.concat(), &numeric)))
}

/// The toy network at `points` random parameter vectors on a 12-vertex mesh
/// with random labels. Draws closer than [`KINK_MARGIN`] to a kink are
/// replaced by fresh ones and counted in the detail.
pub fn network_gradcheck(variant: ConvVariant, points: usize, seed: u64) -> Result<Check> {
    let spec = gradient_toy_spec(variant);
    let mesh = prepare_mesh(&shapes::bumpy_sphere(0, 0.1, seed))?;
    let inputs = MeshInputs::from_mesh(&mesh, &spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..mesh.vertex_count()).map(|_| rng.random_range(0..8)).collect();
    let (mut worst, mut scalars, mut accepted, mut redrawn) = (0.0f64, 0, 0, 0);
    for draw in 0..points * 5 {
        if accepted == points {
            break;
        }
        let mut model = Model::new(spec.clone(), seed.wrapping_mul(1000).wrapping_add(draw as u64))?;
        // zero-initialised biases put ReLUs exactly on their kink
        for t in model.params.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        }
        scalars = model.params.scalar_count();
        match network_gradient_error(&mut model, &inputs, &labels, KINK_MARGIN)? {
            Some(error) => {
                accepted += 1;
                worst = worst.max(error);
            }
            None => redrawn += 1,
        }
    }
    let name = format!("toy network ({variant:?}, {scalars} parameters, {accepted} points, {redrawn} redrawn)");
    let mut check = Check::below(name, worst, NETWORK_TOLERANCE);
    check.passed &= accepted == points;
    Ok(check)
}

/// Functional map, soft correspondence and matching loss chained together,
/// differentiated with respect to both feature matrices.
pub fn spectral_gradcheck(points: usize, seed: u64) -> Result<Check> {
    let x = shapes::deform(&shapes::torus(10, 6, 1.0, 0.4), 0.05, seed);
    let y = shapes::deform(&shapes::torus(10, 6, 1.0, 0.4), 0.05, seed + 1);
    let (bx, by) = (spectral::laplacian_basis(&x, 10)?, spectral::laplacian_basis(&y, 10)?);
    let d = all_pairs(&y);
    let n = x.vertex_count();
    let gt: Vec<usize> = (0..n).collect();
    let f = |g: &mut Graph, v: &[crate::tensor::Var]| {
        let c = spectral::functional_map(g, v[0], v[1], &bx, &by)?;
        let p = spectral::soft_correspondence(g, c, &bx, &by)?;
        spectral::fmnet_loss(g, p, &d, &gt)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let inputs = [gradcheck::random_tensor(&[n, 12], &mut rng), gradcheck::random_tensor(&[n, 12], &mut rng)];
        worst = worst.max(gradcheck::check(&f, &inputs)?);
    }
    Ok(Check::below(format!("spectral matching chain ({points} points)"), worst, NETWORK_TOLERANCE))
}

/// Every primitive op, the toy network in both conv variants and the
/// spectral matching chain.
pub fn gradient_suite(points: usize, seed: u64) -> Result<SuiteReport> {
    SuiteReport::timed("gradient suite", || {
        let mut checks: Vec<Check> = gradcheck::op_suite(points, seed, OP_TOLERANCE)?
            .into_iter()
            .map(|o| Check::new(format!("op {}", o.name), o.passed(), format!("{:.3e} (bound {:.0e})", o.max_error, o.tolerance)))
            .collect();
        checks.push(network_gradcheck(ConvVariant::Cc, points, seed)?);
        checks.push(network_gradcheck(ConvVariant::Pn, points, seed)?);
        checks.push(spectral_gradcheck(points, seed)?);
        Ok(checks)
    })
}

// ---------------------------------------------------------------- rotation

/// The fixed 200-vertex mesh of the invariance suite.
pub fn invariance_mesh() -> TriMesh {
    shapes::deform(&shapes::torus(20, 10, 1.0, 0.4), 0.08, 5)
}

pub fn invariance_spec() -> ModelSpec {
    ModelSpec::toy(8, 3, 8, HeadSpec::Segmentation { widths: vec![8] })
}

#[derive(Debug, Clone)]
pub struct InvarianceOutcome {
    pub vertices: usize,
    pub strict: usize,
    pub rotations: usize,
    /// Worst max-abs descriptor difference over strict vertices.
    pub strict_error: f64,
    /// Same over every vertex, for information.
    pub all_error: f64,
}

/// Descriptors of `mesh` and of `rotations` random rigid copies.
pub fn descriptor_invariance(mesh: &TriMesh, spec: &ModelSpec, rotations: usize, seed: u64) -> Result<InvarianceOutcome> {
    let mut model = Model::new(spec.clone(), seed)?;
    let base = prepare_mesh(mesh)?;
    let patches = MeshPatches::build(&base, spec)?;
    let strict = patches.strict_vertices();
    let centers: Vec<usize> = (0..mesh.vertex_count()).collect();
    let reference = model.descriptors(&MeshInputs::new(&base, &patches, spec)?, &centers)?.rows;
    let width = reference.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (mut strict_error, mut all_error): (f64, f64) = (0.0, 0.0);
    for _ in 0..rotations {
        let r = shapes::random_rotation(&mut rng);
        let t = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let moved = prepare_mesh(&mesh.rigid_transform(&r, &t))?;
        let out = model.descriptors(&MeshInputs::from_mesh(&moved, spec)?, &centers)?.rows;
        for (v, &is_strict) in strict.iter().enumerate() {
            let e = (0..width).map(|c| (out.at(v, c) - reference.at(v, c)).abs()).fold(0.0, f64::max);
            all_error = all_error.max(e);
            if is_strict {
                strict_error = strict_error.max(e);
            }
        }
    }
    Ok(InvarianceOutcome {
        vertices: mesh.vertex_count(),
        strict: strict.iter().filter(|&&s| s).count(),
        rotations,
        strict_error,
        all_error,
    })
}

pub fn rotation_suite(rotations: usize, seed: u64) -> Result<SuiteReport> {
    SuiteReport::timed("rotation invariance suite", || {
        let o = descriptor_invariance(&invariance_mesh(), &invariance_spec(), rotations, seed)?;
        Ok(vec![
            Check::new(
                "strict vertices present",
                o.strict > 0,
                format!("{} of {} vertices strict", o.strict, o.vertices),
            ),
            Check::new(
                format!("descriptors agree under {} rigid motions", o.rotations),
                o.strict_error < INVARIANCE_TOLERANCE,
                format!(
                    "{:.3e} on strict vertices (bound {:.0e}); {:.3e} over all vertices",
                    o.strict_error, INVARIANCE_TOLERANCE, o.all_error
                ),
            ),
        ])
    })
}

// ---------------------------------------------------------------- geometry

/// Relaxes every edge `|V|` times.
pub fn bellman_ford(mesh: &TriMesh, source: usize) -> Vec<f64> {
    let mut d = vec![f64::INFINITY; mesh.vertex_count()];
    d[source] = 0.0;
    for _ in 0..mesh.vertex_count() {
        let mut changed = false;
        for e in mesh.edges() {
            if d[e.a] + e.length < d[e.b] {
                d[e.b] = d[e.a] + e.length;
                changed = true;
            }
            if d[e.b] + e.length < d[e.a] {
                d[e.a] = d[e.b] + e.length;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    d
}

/// Greedy selection that recomputes every minimum distance from scratch at
/// each step.
pub fn brute_force_fps(candidates: &[usize], metric: impl Fn(usize, usize) -> f64, k: usize, seed: usize) -> Vec<usize> {
    let mut picked = vec![seed];
    while picked.len() < k.min(candidates.len()) {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for &c in candidates {
            if picked.contains(&c) {
                continue;
            }
            let md = picked.iter().map(|&p| metric(p, c)).fold(f64::INFINITY, f64::min);
            if md > best.0 || (md == best.0 && c < best.1) {
                best = (md, c);
            }
        }
        picked.push(best.1);
    }
    let n = picked.len();
    (0..k).map(|i| picked[i % n]).collect()
}

fn small_meshes() -> Vec<(String, TriMesh)> {
    let mut out = Vec::new();
    for seed in 0..4 {
        out.push((format!("icosphere(1) deformed #{seed}"), shapes::deform(&shapes::icosphere(1), 0.2, seed)));
    }
    out.push(("grid 7x7 deformed".into(), shapes::deform(&shapes::grid(7, 7, 1.0, 1.0), 0.05, 1)));
    out.push(("torus 8x6".into(), shapes::deform(&shapes::torus(8, 6, 1.0, 0.4), 0.05, 2)));
    out.push(("tetrahedron".into(), shapes::tetrahedron()));
    out
}

pub fn geometry_suite(seed: u64) -> Result<SuiteReport> {
    SuiteReport::timed("geometry oracles", || {
        let mut checks = Vec::new();
        for (name, mesh) in small_meshes() {
            debug_assert!(mesh.vertex_count() <= 50);
            let mut mismatches = 0;
            for s in 0..mesh.vertex_count() {
                if geodesic_distances(&mesh, s, f64::INFINITY)?.distances != bellman_ford(&mesh, s) {
                    mismatches += 1;
                }
            }
            checks.push(Check::new(
                format!("dijkstra = bellman-ford on {name}"),
                mismatches == 0,
                format!("{} vertices, every source, {mismatches} mismatching sources", mesh.vertex_count()),
            ));
        }

        // half the trials on an integer lattice, where exact ties are common
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mismatches = 0;
        for trial in 0..100 {
            let pts: Vec<Vec3> = (0..30)
                .map(|_| {
                    if trial % 2 == 0 {
                        Vec3::new(rng.random(), rng.random(), rng.random())
                    } else {
                        Vec3::new(rng.random_range(0..3) as f64, rng.random_range(0..3) as f64, rng.random_range(0..3) as f64)
                    }
                })
                .collect();
            let mut cands: Vec<usize> = (0..30).collect();
            cands.shuffle(&mut rng);
            let k = if trial % 5 == 0 { 8 } else { rng.random_range(1..=35) };
            let start = cands[rng.random_range(0..30)];
            let metric = |a: usize, b: usize| (pts[a] - pts[b]).norm();
            if farthest_point_sample(&cands, metric, k, start)? != brute_force_fps(&cands, metric, k, start) {
                mismatches += 1;
            }
        }
        checks.push(Check::new(
            "fps = brute-force oracle",
            mismatches == 0,
            format!("100 trials of 30 points, {mismatches} mismatches"),
        ));

        let sphere = shapes::icosphere(3);
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        let mut pairs = 0;
        for i in 0..sphere.vertex_count() {
            let p = sphere.vertex(i);
            let Some(j) = (0..sphere.vertex_count()).find(|&j| (sphere.vertex(j) + p).norm() < 1e-9) else {
                continue;
            };
            if j < i {
                continue;
            }
            let d = geodesic_distances(&sphere, i, f64::INFINITY)?.distances[j];
            lo = lo.min(d);
            hi = hi.max(d);
            pairs += 1;
        }
        let pi = std::f64::consts::PI;
        checks.push(Check::new(
            "icosphere antipodal distance within 15% of pi",
            pairs > 0 && lo >= pi * 0.85 && hi <= pi * 1.15,
            format!("{pairs} pairs, range [{lo:.4}, {hi:.4}] vs pi = {pi:.4}"),
        ));

        let mut bad = 0;
        for c in 0..sphere.vertex_count() {
            let full = geodesic_distances(&sphere, c, f64::INFINITY)?.distances;
            let expected = full.iter().filter(|&&d| d < 0.5).count();
            if geodesic_ball(&sphere, c, 0.5)?.len() != expected {
                bad += 1;
            }
        }
        checks.push(Check::new(
            "ball sizes = full dijkstra counts (tau 0.5)",
            bad == 0,
            format!("{} centers, {bad} mismatches", sphere.vertex_count()),
        ));
        Ok(checks)
    })
}

// ---------------------------------------------------------------- frames

/// Meshes with normals and curvature directions covering closed, open,
/// flat, umbilic and degenerate cases.
pub fn lrf_fixtures() -> Result<Vec<(String, TriMesh)>> {
    let raw = vec![
        ("tetrahedron".to_string(), shapes::tetrahedron()),
        ("icosphere(2)".into(), shapes::icosphere(2)),
        ("bumpy sphere".into(), shapes::bumpy_sphere(2, 0.1, 1)),
        ("cylinder".into(), shapes::cylinder(1.0, 3.0, 32, 12)),
        ("torus".into(), invariance_mesh()),
        ("grid".into(), shapes::grid(8, 6, 1.0, 0.7)),
        ("capsule".into(), shapes::capsule(1.0, 2.0, 14, 2, 3).0),
    ];
    raw.into_iter().map(|(n, m)| Ok((n, prepare_mesh(&m)?))).collect()
}

fn frame_radius(mesh: &TriMesh) -> f64 {
    layer_radius(0.2, 1.0, mesh.surface_area())
}

/// Orthonormality and determinant on every vertex of every fixture.
pub fn frame_validity(fixtures: &[(String, TriMesh)]) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for (name, mesh) in fixtures {
        for variant in [LrfVariant::Shot, LrfVariant::Curvature] {
            let worst = compute_lrfs(mesh, variant, frame_radius(mesh))?
                .iter()
                .map(|l| rotation_error(&l.rotation))
                .fold(0.0, f64::max);
            checks.push(Check::below(format!("{variant:?} frames are rotations on {name}"), worst, 1e-8));
        }
    }
    Ok(checks)
}

/// Frames of rotated copies against rotated frames, on vertices whose sign
/// votes are strict.
pub fn frame_equivariance(mesh: &TriMesh, variant: LrfVariant, rotations: usize, seed: u64) -> Result<(usize, f64)> {
    let base = prepare_mesh(mesh)?;
    let radius = frame_radius(&base);
    let frames = compute_lrfs(&base, variant, radius)?;
    let strict: Vec<bool> = frames.iter().map(Lrf::is_strict).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..rotations {
        let r = shapes::random_rotation(&mut rng);
        let moved = prepare_mesh(&mesh.rigid_transform(&r, &Vec3::zeros()))?;
        let rotated = compute_lrfs(&moved, variant, radius)?;
        for ((a, b), &s) in frames.iter().zip(&rotated).zip(&strict) {
            if s {
                worst = worst.max(max_abs(&(r * a.rotation), &b.rotation));
            }
        }
    }
    Ok((strict.iter().filter(|&&s| s).count(), worst))
}

/// Worst angle of the curvature frame's first two axes against the radial
/// and circumferential directions of a z-axis cylinder, away from its rims.
pub fn cylinder_axis_error() -> Result<f64> {
    let m = prepare_mesh(&shapes::cylinder(1.0, 3.0, 32, 12))?;
    let mut worst: f64 = 0.0;
    for i in 0..m.vertex_count() {
        let p = m.vertex(i);
        if p.z < 0.6 || p.z > 2.4 {
            continue;
        }
        let lrf = lrf_curvature(&m, i)?;
        let radial = Vec3::new(p.x, p.y, 0.0).normalize();
        let circ = Vec3::new(-p.y, p.x, 0.0).normalize();
        worst = worst
            .max(lrf.axis(0).dot(&radial).clamp(-1.0, 1.0).acos())
            .max(lrf.axis(1).dot(&circ).abs().clamp(0.0, 1.0).acos());
    }
    Ok(worst)
}

pub fn lrf_suite(extra: &[(String, TriMesh)], seed: u64) -> Result<SuiteReport> {
    SuiteReport::timed("lrf suite", || {
        let mut fixtures = lrf_fixtures()?;
        for (n, m) in extra {
            fixtures.push((n.clone(), prepare_mesh(m)?));
        }
        let mut checks = frame_validity(&fixtures)?;
        for variant in [LrfVariant::Shot, LrfVariant::Curvature] {
            let (strict, worst) = frame_equivariance(&shapes::bumpy_sphere(2, 0.1, 1), variant, 100, seed)?;
            checks.push(Check::new(
                format!("{variant:?} frames equivariant under 100 rotations"),
                strict > 0 && worst < 1e-6,
                format!("{worst:.3e} (bound 1e-6) over {strict} strict vertices"),
            ));
        }
        checks.push(Check::below("cylinder curvature frame axis error (rad)", cylinder_axis_error()?, 0.1));
        Ok(checks)
    })
}

// ---------------------------------------------------------------- spectral

/// Largest deviation of `phi^T M phi` from the identity.
pub fn mass_gram_error(b: &SpectralBasis) -> f64 {
    let (n, k) = (b.vertex_count(), b.k());
    let mut worst: f64 = 0.0;
    for i in 0..k {
        for j in 0..k {
            let s: f64 = (0..n).map(|r| b.phi.at(r, i) * b.mass[r] * b.phi.at(r, j)).sum();
            worst = worst.max((s - if i == j { 1.0 } else { 0.0 }).abs());
        }
    }
    worst
}

/// Worst relative error of the first nonzero eigenvalues of a 25x17 grid
/// over a 1 x 0.6 rectangle against the analytic Neumann spectrum.
pub fn rectangle_spectrum_error(count: usize) -> Result<f64> {
    let (a, b) = (1.0, 0.6);
    let basis = spectral::laplacian_basis(&shapes::grid(25, 17, a, b), count + 1)?;
    let pi = std::f64::consts::PI;
    let mut exact: Vec<f64> = (0..8)
        .flat_map(|m| (0..8).map(move |n| (pi * m as f64 / a).powi(2) + (pi * n as f64 / b).powi(2)))
        .collect();
    exact.sort_by(f64::total_cmp);
    Ok((1..=count)
        .map(|i| (basis.eigenvalues[i] - exact[i]).abs() / exact[i])
        .fold(0.0, f64::max))
}

/// `C` of a shape mapped to itself with identical features, against `I`.
pub fn self_map_error(mesh: &TriMesh, k: usize, seed: u64) -> Result<f64> {
    let b = spectral::laplacian_basis(mesh, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = gradcheck::random_tensor(&[mesh.vertex_count(), 40], &mut rng);
    let mut g = Graph::new();
    let (x, y) = (g.constant(f.clone()), g.constant(f));
    let c = spectral::functional_map(&mut g, x, y, &b, &b)?;
    let eye = Tensor::from_fn(&[k, k], |i| if i / k == i % k { 1.0 } else { 0.0 });
    Ok(g.value(c).max_abs_diff(&eye))
}

pub fn spectral_suite(seed: u64) -> Result<SuiteReport> {
    SuiteReport::timed("spectral suite", || {
        let mut checks = Vec::new();
        for (name, mesh) in [
            ("bumpy sphere", shapes::bumpy_sphere(2, 0.05, 1)),
            ("grid", shapes::grid(9, 7, 1.0, 0.7)),
            ("torus", invariance_mesh()),
        ] {
            let b = spectral::laplacian_basis(&mesh, 12)?;
            let c0 = b.phi.at(0, 0);
            let spread = (0..mesh.vertex_count()).map(|r| (b.phi.at(r, 0) - c0).abs()).fold(0.0, f64::max);
            checks.push(Check::below(format!("lambda_0 on {name}"), b.eigenvalues[0].abs(), 1e-8));
            checks.push(Check::below(format!("phi_0 constant on {name}"), spread, 1e-8));
            checks.push(Check::below(format!("mass orthonormality on {name}"), mass_gram_error(&b), 1e-8));
            checks.push(Check::new(
                format!("eigenvalues nondecreasing on {name}"),
                b.eigenvalues.windows(2).all(|w| w[0] <= w[1]),
                format!("{:?}", &b.eigenvalues[..4]),
            ));
        }
        checks.push(Check::below("rectangle spectrum relative error (9 eigenvalues)", rectangle_spectrum_error(9)?, 0.1));
        checks.push(Check::below(
            "self-map C = I",
            self_map_error(&shapes::bumpy_sphere(2, 0.05, 4), 10, seed)?,
            1e-6,
        ));
        Ok(checks)
    })
}

/// Every finite-difference and invariance suite, as run by `gradcheck`.
pub fn all_suites(seed: u64) -> Result<Vec<SuiteReport>> {
    Ok(vec![
        gradient_suite(20, seed)?,
        rotation_suite(20, seed)?,
        geometry_suite(seed)?,
        lrf_suite(&[], seed)?,
        spectral_suite(seed)?,
    ])
}
