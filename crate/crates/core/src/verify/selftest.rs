//! The documented behaviour examples of every module as executable checks.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{experiments, Check, SuiteReport};
use crate::error::{Error, Result};
use crate::geodesy::{all_pairs, farthest_point_sample, geodesic_ball, geodesic_distances, NeighborhoodSample};
use crate::lrf::{shot_frame, Lrf, LrfVariant, SupportPoint};
use crate::lrfconv::{lrfconv_forward, ConvVariant, LrfConv};
use crate::mesh::{parse_off, shapes, TriMesh, Vec3};
use crate::netarch::{HeadSpec, LsdOutput, MeshInputs, Model, ModelSpec};
use crate::nn::Params;
use crate::patch::{align, AlignedPatch, PatchTable};
use crate::spectral::{self, SpectralBasis};
use crate::tensor::{gradcheck, AdamState, Checkpoint, Graph, Mode, Tensor};
use crate::train::{
    capsule_dataset, evaluate_segmentation, geodesic_error_curve, load_root, prepare_mesh, write_dataset,
    Prepared,
};

type Case<'a> = (&'static str, Box<dyn FnOnce() -> Result<Check> + 'a>);

fn ok(name: &str, passed: bool, detail: impl Into<String>) -> Result<Check> {
    Ok(Check::new(name, passed, detail))
}

fn eye(k: usize) -> Tensor {
    Tensor::from_fn(&[k, k], |i| if i / k == i % k { 1.0 } else { 0.0 })
}

/// Chain 0-1-2-3 with unit spacing; far apexes close each segment into a
/// triangle without shortening the chain.
fn chain(n: usize) -> TriMesh {
    let mut v: Vec<Vec3> = (0..n).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
    let mut f = Vec::new();
    for i in 0..n - 1 {
        v.push(Vec3::new(i as f64 + 0.5, 100.0, 0.0));
        f.push([i, i + 1, n + i]);
    }
    TriMesh::new(v, f).expect("valid chain")
}

fn random_patch(k: usize, rng: &mut ChaCha8Rng) -> AlignedPatch {
    let mut v = |s: f64| Vec3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s));
    let coords: Vec<Vec3> = (0..k).map(|j| if j == 0 { Vec3::zeros() } else { v(1.0) }).collect();
    let normals = (0..k).map(|_| v(1.0).normalize()).collect();
    let geodesics = coords.iter().map(|c| c.norm() * 1.1).collect();
    AlignedPatch {
        center: 0,
        coords,
        normals,
        geodesics,
        member_indices: (0..k).collect(),
    }
}

fn reorder(p: &AlignedPatch, f: &Tensor, order: &[usize]) -> Result<(AlignedPatch, Tensor)> {
    let q = AlignedPatch {
        center: p.center,
        coords: order.iter().map(|&i| p.coords[i]).collect(),
        normals: order.iter().map(|&i| p.normals[i]).collect(),
        geodesics: order.iter().map(|&i| p.geodesics[i]).collect(),
        member_indices: order.iter().map(|&i| p.member_indices[i]).collect(),
    };
    let data = order.iter().flat_map(|&i| f.row(i).to_vec()).collect();
    Ok((q, Tensor::matrix(order.len(), f.cols(), data)?))
}

fn conv(variant: ConvVariant, f_in: usize, f_out: usize, seed: u64) -> Result<(Params, LrfConv)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Params::new();
    let l = LrfConv::new(&mut p, "c", variant, f_in, f_out, &mut rng)?;
    Ok((p, l))
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn soft_map(c: &Tensor, b: &SpectralBasis) -> Result<Tensor> {
    let mut g = Graph::new();
    let cv = g.constant(c.clone());
    let p = spectral::soft_correspondence(&mut g, cv, b, b)?;
    Ok(g.value(p).clone())
}

fn map_of(fx: &Tensor, fy: &Tensor, bx: &SpectralBasis, by: &SpectralBasis) -> Result<Tensor> {
    let mut g = Graph::new();
    let (x, y) = (g.constant(fx.clone()), g.constant(fy.clone()));
    let c = spectral::functional_map(&mut g, x, y, bx, by)?;
    Ok(g.value(c).clone())
}

fn fm_loss(p: &Tensor, d: &[f64], gt: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let pv = g.constant(p.clone());
    let l = spectral::fmnet_loss(&mut g, pv, d, gt)?;
    Ok(g.value(l).item())
}

fn mesh_cases<'a>() -> Vec<Case<'a>> {
    vec![
        ("mesh: tetrahedron OFF", Box::new(|| {
            let text = "OFF\n4 4 6\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n3 0 2 1\n3 0 1 3\n3 1 2 3\n3 0 3 2\n";
            let m = parse_off(text, Path::new("tet.off"))?;
            ok("tetrahedron OFF parses to 4 vertices, 4 faces, 3 neighbors each",
               m.vertex_count() == 4 && m.face_count() == 4 && (0..4).all(|i| m.neighbors(i).len() == 3), "")
        })),
        ("mesh: short vertex list", Box::new(|| {
            let text = "OFF\n5 4 0\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n3 0 2 1\n3 0 1 3\n3 1 2 3\n3 0 3 2\n";
            match parse_off(text, Path::new("short.off")) {
                Err(Error::Parse { line, msg, .. }) => ok("OFF with a missing vertex reports a line", line > 0, format!("line {line}: {msg}")),
                other => ok("OFF with a missing vertex reports a line", false, format!("{other:?}")),
            }
        })),
        ("mesh: icosphere counts", Box::new(|| {
            let m = shapes::icosphere(2);
            ok("icosphere level 2 has 162 vertices and 320 faces", m.vertex_count() == 162 && m.face_count() == 320,
               format!("{} / {}", m.vertex_count(), m.face_count()))
        })),
        ("mesh: planar normals", Box::new(|| {
            let m = shapes::grid(5, 4, 1.0, 1.0).estimate_normals();
            let worst = m.normals().iter().map(|n| (n - Vec3::z()).norm()).fold(0.0, f64::max);
            Ok(Check::below("planar grid normals equal +z", worst, 1e-12))
        })),
        ("mesh: sphere normals", Box::new(|| {
            let m = shapes::icosphere(2).estimate_normals();
            let worst = (0..m.vertex_count())
                .map(|i| m.normal(i).dot(&m.vertex(i).normalize()).clamp(-1.0, 1.0).acos())
                .fold(0.0, f64::max);
            Ok(Check::below("icosphere normals match positions (rad)", worst, 0.05))
        })),
        ("mesh: apex normal", Box::new(|| {
            let m = shapes::tetrahedron().estimate_normals();
            let v = m.vertices();
            let mut expected = Vec3::zeros();
            for f in m.faces().iter().filter(|f| f.contains(&3)) {
                // twice the area times the unit face normal
                expected += (v[f[1]] - v[f[0]]).cross(&(v[f[2]] - v[f[0]]));
            }
            Ok(Check::below("tetrahedron apex normal is the area-weighted face sum", (m.normal(3) - expected.normalize()).norm(), 1e-12))
        })),
        ("mesh: cylinder direction", Box::new(|| {
            let m = prepare_mesh(&shapes::cylinder(1.0, 3.0, 32, 12))?;
            let mut worst: f64 = 0.0;
            for (i, c) in m.curvature().iter().enumerate() {
                let p = m.vertex(i);
                if p.z < 0.6 || p.z > 2.4 {
                    continue;
                }
                let circ = Vec3::new(-p.y, p.x, 0.0).normalize();
                worst = worst.max(c.direction.dot(&circ).abs().clamp(0.0, 1.0).acos());
            }
            Ok(Check::below("cylinder max-curvature direction is circumferential (rad)", worst, 0.1))
        })),
        ("mesh: umbilic plane and sphere", Box::new(|| {
            let plane = prepare_mesh(&shapes::grid(6, 6, 1.0, 1.0))?;
            // subdivided spheres are slightly anisotropic; the icosahedron is exactly isotropic
            let sphere = prepare_mesh(&shapes::icosphere(0))?;
            let flagged = |m: &TriMesh| m.curvature().iter().all(|c| !c.reliable);
            ok("plane and sphere vertices are all flagged umbilic", flagged(&plane) && flagged(&sphere), "")
        })),
    ]
}

fn geodesy_cases<'a>(seed: u64) -> Vec<Case<'a>> {
    vec![
        ("geodesy: chain", Box::new(|| {
            let d = geodesic_distances(&chain(4), 0, f64::INFINITY)?.distances;
            ok("chain distances are 0,1,2,3", d[..4] == [0.0, 1.0, 2.0, 3.0], format!("{:?}", &d[..4]))
        })),
        ("geodesy: self distance", Box::new(|| {
            let m = shapes::bumpy_sphere(1, 0.1, 2);
            let all = (0..m.vertex_count()).map(|s| Ok(geodesic_distances(&m, s, f64::INFINITY)?.distances[s] == 0.0)).collect::<Result<Vec<_>>>()?;
            ok("every source has distance 0 to itself", all.iter().all(|&b| b), "")
        })),
        ("geodesy: chain ball", Box::new(|| {
            let m = chain(4);
            let ball = geodesic_ball(&m, 0, 1.5)?;
            let all = geodesic_ball(&m, 0, 1e12)?;
            ok("chain ball of radius 1.5 is {0:0, 1:1}; a huge radius reaches everything",
               ball == vec![(0, 0.0), (1, 1.0)] && all.len() == m.vertex_count(), format!("{ball:?}"))
        })),
        ("geodesy: fps line", Box::new(|| {
            let xs = [0.0f64, 1.0, 2.0, 3.0, 4.0];
            let out = farthest_point_sample(&[0, 1, 2, 3, 4], |a, b| (xs[a] - xs[b]).abs(), 3, 0)?;
            ok("fps on a line picks 0, 4, 2", out == [0, 4, 2], format!("{out:?}"))
        })),
        ("geodesy: fps exhaustion", Box::new(|| {
            let xs = [0.0f64, 1.0, 5.0, 2.5];
            let mut out = farthest_point_sample(&[3, 2, 0, 1], |a, b| (xs[a] - xs[b]).abs(), 4, 1)?;
            out.sort_unstable();
            ok("fps with K = |candidates| is a permutation", out == [0, 1, 2, 3], format!("{out:?}"))
        })),
        ("geodesy: fps oracle", Box::new(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vec3> = (0..30).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
            let cands: Vec<usize> = (0..30).collect();
            let metric = |a: usize, b: usize| (pts[a] - pts[b]).norm();
            let got = farthest_point_sample(&cands, metric, 8, 0)?;
            ok("fps of 30 random points, K = 8, matches the brute-force oracle",
               got == super::brute_force_fps(&cands, metric, 8, 0), format!("{got:?}"))
        })),
    ]
}

fn lrf_cases<'a>(seed: u64) -> Vec<Case<'a>> {
    let support = |offs: &[Vec3]| -> Vec<SupportPoint> {
        offs.iter().enumerate().map(|(i, &o)| SupportPoint { vertex: i, offset: o, weight: 1.0 }).collect()
    };
    vec![
        ("lrf: ellipse", Box::new(move || {
            let offs: Vec<Vec3> = (0..24)
                .map(|k| {
                    let t = std::f64::consts::TAU * (k as f64 + 0.3) / 24.0;
                    Vec3::new(2.0 * t.cos(), t.sin(), 0.0)
                })
                .collect();
            let l = shot_frame(&support(&offs));
            ok("ellipse support: x along the major axis, z along +-z",
               l.reliable && l.axis(0).x.abs() > 1.0 - 1e-9 && l.axis(2).z.abs() > 1.0 - 1e-9, format!("{:?}", l.rotation))
        })),
        ("lrf: isotropic", Box::new(move || {
            let offs = [Vec3::new(1.0, 1.0, 1.0), Vec3::new(1.0, -1.0, -1.0), Vec3::new(-1.0, 1.0, -1.0), Vec3::new(-1.0, -1.0, 1.0)];
            ok("regular tetrahedron support is unreliable", !shot_frame(&support(&offs)).reliable, "")
        })),
        ("lrf: shot equivariance", Box::new(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let offs: Vec<Vec3> = (0..30)
                .map(|_| shapes::random_unit(&mut rng).component_mul(&Vec3::new(3.0, 1.5, 0.4)) + Vec3::new(1.0, 0.6, 0.3))
                .collect();
            let base = shot_frame(&support(&offs));
            let mut worst: f64 = 0.0;
            for _ in 0..100 {
                let r = shapes::random_rotation(&mut rng);
                let rotated: Vec<Vec3> = offs.iter().map(|o| r * o).collect();
                worst = worst.max((shot_frame(&support(&rotated)).rotation - r * base.rotation).abs().max());
            }
            ok("shot frame of rotated support is the rotated frame", base.is_strict() && worst < 1e-6, format!("{worst:.3e}"))
        })),
        ("lrf: cylinder frame", Box::new(|| Ok(Check::below("cylinder curvature frame axes (rad)", super::cylinder_axis_error()?, 0.1)))),
        ("lrf: plane fallback", Box::new(|| {
            let m = prepare_mesh(&shapes::grid(6, 6, 1.0, 1.0))?;
            let frames = (0..m.vertex_count()).map(|i| crate::lrf::lrf_curvature(&m, i)).collect::<Result<Vec<_>>>()?;
            ok("plane takes the fallback frame everywhere", frames.iter().all(|l| l.variant == LrfVariant::Shot && !l.reliable), "")
        })),
        ("lrf: curvature equivariance", Box::new(move || {
            let (strict, worst) = super::frame_equivariance(&shapes::bumpy_sphere(2, 0.1, 1), LrfVariant::Curvature, 20, seed)?;
            ok("curvature frames of a rotated mesh are rotated frames", strict > 0 && worst < 1e-6, format!("{worst:.3e} over {strict} strict vertices"))
        })),
    ]
}

fn patch_cases<'a>(seed: u64) -> Vec<Case<'a>> {
    vec![
        ("patch: self entry", Box::new(|| {
            let m = prepare_mesh(&shapes::bumpy_sphere(2, 0.1, 3))?;
            let t = PatchTable::build(&m, 0.5, 8, LrfVariant::Curvature)?;
            let mut worst: f64 = 0.0;
            for i in 0..m.vertex_count() {
                let p = t.patch(&m, i, true);
                let r = p.record(0);
                let n = t.lrfs[i].rotation.transpose() * m.normal(i);
                worst = worst.max(r[..3].iter().map(|v| v.abs()).fold(r[6].abs(), f64::max)).max((Vec3::new(r[3], r[4], r[5]) - n).norm());
            }
            Ok(Check::below("center entry is (0,0,0, aligned normal, 0)", worst, 1e-15))
        })),
        ("patch: planar", Box::new(|| {
            let m = shapes::grid(3, 3, 2.0, 2.0).estimate_normals();
            let sample = NeighborhoodSample { center: 4, members: vec![4, 5], geodesics: vec![0.0, 1.0] };
            let p = align(&m, &sample, &Lrf::identity(LrfVariant::Shot));
            let r = p.record(1);
            ok("planar neighbor at +x aligns to (1,0,0), normal +z, geodesic 1", r == [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0], format!("{r:?}"))
        })),
        ("patch: rigid motions", Box::new(move || {
            let mesh = shapes::bumpy_sphere(2, 0.1, 1);
            let base = prepare_mesh(&mesh)?;
            let tau = 0.6;
            let t0 = PatchTable::build(&base, tau, 8, LrfVariant::Curvature)?;
            let center = (0..base.vertex_count()).find(|&i| t0.lrfs[i].is_strict()).ok_or_else(|| Error::invalid("no strict vertex"))?;
            let reference = t0.patch(&base, center, true);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut worst: f64 = 0.0;
            for _ in 0..100 {
                let r = shapes::random_rotation(&mut rng);
                let moved = prepare_mesh(&mesh.rigid_transform(&r, &Vec3::new(rng.random(), rng.random(), rng.random())))?;
                let lrf = crate::lrf::lrf_curvature(&moved, center)?;
                let p = crate::patch::build_patch(&moved, center, tau, 8, &lrf)?;
                for j in 0..p.len() {
                    worst = worst.max(max_diff(&p.record(j), &reference.record(j)));
                }
            }
            Ok(Check::below("aligned patch unchanged by 100 rigid motions", worst, 1e-6))
        })),
    ]
}

fn tensor_cases<'a>(seed: u64) -> Vec<Case<'a>> {
    vec![
        ("tensor: identity", Box::new(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let a = gradcheck::random_tensor(&[3, 3], &mut rng);
            let (i, av) = (g.constant(eye(3)), g.constant(a.clone()));
            let y = g.matmul(i, av)?;
            ok("matmul(I, A) = A", g.value(y) == &a, "")
        })),
        ("tensor: softmax", Box::new(|| {
            let mut g = Graph::new();
            let x = g.constant(Tensor::zeros(&[1, 3]));
            let y = g.softmax(x)?;
            ok("softmax of zeros is uniform", max_diff(g.value(y).data(), &[1.0 / 3.0; 3]) < 1e-15, format!("{:?}", g.value(y).data()))
        })),
        ("tensor: cross entropy", Box::new(|| {
            let mut g = Graph::new();
            let x = g.constant(Tensor::matrix(1, 3, vec![1e3, 0.0, 0.0])?);
            let l = g.cross_entropy(x, &[0])?;
            Ok(Check::below("confident correct cross entropy", g.value(l).item(), 1e-6))
        })),
        ("tensor: op gradients", Box::new(move || {
            let outcomes = gradcheck::op_suite(20, seed, super::OP_TOLERANCE)?;
            let worst = outcomes.iter().map(|o| o.max_error).fold(0.0, f64::max);
            let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed()).map(|o| o.name.as_str()).collect();
            ok("every op matches central differences at 20 points", failed.is_empty(), format!("worst {worst:.3e}, failing {failed:?}"))
        })),
        ("tensor: adam fixed point", Box::new(|| {
            let mut p = vec![Tensor::vector(vec![1.5, -2.0])];
            let mut a = AdamState::new(1e-3);
            a.step(&mut p, &[vec![0.0, 0.0]])?;
            ok("zero gradients leave parameters unchanged", p[0].data() == [1.5, -2.0], "")
        })),
        ("tensor: adam step", Box::new(|| {
            let mut p = vec![Tensor::scalar(1.0)];
            let mut a = AdamState::new(1e-3);
            a.step(&mut p, &[vec![1.0]])?;
            // m_hat = v_hat = 1 after bias correction
            let expected = 1.0 - 1e-3 * 1.0 / (1.0 + 1e-8);
            Ok(Check::below("one Adam step with unit gradient moves by lr", (p[0].item() - expected).abs(), 1e-15))
        })),
        ("tensor: adam symmetry", Box::new(move || {
            let mut p = vec![Tensor::vector(vec![0.3, 0.3])];
            let mut a = AdamState::new(1e-2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..50 {
                let g: f64 = rng.random_range(-1.0..1.0);
                a.step(&mut p, &[vec![g, g]])?;
            }
            ok("identical parameters stay identical", p[0].data()[0] == p[0].data()[1], "")
        })),
    ]
}

fn lrfconv_cases<'a>(seed: u64) -> Vec<Case<'a>> {
    vec![
        ("lrfconv: annihilation", Box::new(move || {
            let (mut p, l) = conv(ConvVariant::Cc, 4, 5, seed)?;
            l.weight_output().ok_or_else(|| Error::invalid("no weight regressor"))?.zero(&mut p);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let patch = random_patch(6, &mut rng);
            let f = gradcheck::random_tensor(&[6, 4], &mut rng);
            let y = lrfconv_forward(&patch, Some(&f), &l, &mut p)?;
            ok("zero weight regressor gives zero output", y.iter().all(|&v| v == 0.0), format!("{y:?}"))
        })),
        ("lrfconv: singleton", Box::new(move || {
            let (mut p, l) = conv(ConvVariant::Cc, 0, 3, seed)?;
            let patch = AlignedPatch { center: 0, coords: vec![Vec3::zeros()], normals: vec![Vec3::z()], geodesics: vec![0.0], member_indices: vec![0] };
            let a = lrfconv_forward(&patch, None, &l, &mut p)?;
            let b = lrfconv_forward(&patch, None, &l, &mut p)?;
            ok("center-only patch is finite and deterministic", a == b && a.iter().all(|v| v.is_finite()), "")
        })),
        ("lrfconv: permutation", Box::new(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut worst: f64 = 0.0;
            for variant in [ConvVariant::Cc, ConvVariant::Pn] {
                let (mut p, l) = conv(variant, 3, 4, seed)?;
                let patch = random_patch(6, &mut rng);
                let f = gradcheck::random_tensor(&[6, 3], &mut rng);
                let base = lrfconv_forward(&patch, Some(&f), &l, &mut p)?;
                for _ in 0..10 {
                    let mut order: Vec<usize> = (0..6).collect();
                    order.shuffle(&mut rng);
                    let (q, g) = reorder(&patch, &f, &order)?;
                    worst = worst.max(max_diff(&base, &lrfconv_forward(&q, Some(&g), &l, &mut p)?));
                }
            }
            Ok(Check::below("neighbor order does not matter (both variants)", worst, 1e-12))
        })),
        ("lrfconv: pointnet duplicates", Box::new(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (mut p, l) = conv(ConvVariant::Pn, 2, 4, seed)?;
            let patch = random_patch(4, &mut rng);
            let f = gradcheck::random_tensor(&[4, 2], &mut rng);
            let base = lrfconv_forward(&patch, Some(&f), &l, &mut p)?;
            let (dup, g) = reorder(&patch, &f, &[0, 1, 2, 3, 2, 2])?;
            Ok(Check::below("max pooling ignores duplicated neighbors", max_diff(&base, &lrfconv_forward(&dup, Some(&g), &l, &mut p)?), 1e-12))
        })),
        ("lrfconv: pointnet singleton", Box::new(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (mut p, l) = conv(ConvVariant::Pn, 0, 3, seed)?;
            let patch = random_patch(1, &mut rng);
            let (dup, _) = reorder(&patch, &Tensor::zeros(&[1, 0]), &[0, 0, 0])?;
            ok("single-member pooling is that member", lrfconv_forward(&patch, None, &l, &mut p)? == lrfconv_forward(&dup, None, &l, &mut p)?, "")
        })),
    ]
}

fn netarch_cases<'a>(seed: u64) -> Vec<Case<'a>> {
    let toy4 = || ModelSpec::toy(4, 2, 4, HeadSpec::Segmentation { widths: vec![4, 8] });
    vec![
        ("netarch: shapes", Box::new(move || {
            let mesh = prepare_mesh(&shapes::deform(&shapes::grid(10, 5, 1.0, 0.5), 0.02, seed))?;
            let mut model = Model::new(toy4(), seed)?;
            let inputs = MeshInputs::from_mesh(&mesh, &model.spec)?;
            let d = model.descriptors(&inputs, &(0..50).collect::<Vec<_>>())?.rows;
            let y = model.predict(&inputs)?;
            ok("50-vertex mesh gives 50x4 descriptors and 50x8 outputs, finite",
               d.shape() == [50, 4] && y.shape() == [50, 8] && d.is_finite() && y.is_finite(), format!("{:?} {:?}", d.shape(), y.shape()))
        })),
        ("netarch: residual identity", Box::new(move || {
            let mut spec = toy4();
            spec.layers.push(crate::netarch::LayerSpec {
                kind: crate::netarch::LayerKind::ResidualBlock,
                convs: spec.layers[1].convs.repeat(2),
            });
            let mesh = prepare_mesh(&shapes::bumpy_sphere(1, 0.1, seed))?;
            let inputs = MeshInputs::from_mesh(&mesh, &spec)?;
            let mut model = Model::new(spec.clone(), seed)?;
            model.zero_residual_branch(2)?;
            let mut short = spec;
            short.layers.pop();
            let mut reference = Model::new(short, seed)?;
            // copy the shared prefix of parameters
            for (name, t) in reference.params.names().to_vec().iter().zip(reference.params.values_mut()) {
                let i = model.params.names().iter().position(|n| n == name).ok_or_else(|| Error::invalid("missing parameter"))?;
                *t = model.params.values()[i].clone();
            }
            let centers: Vec<usize> = (0..mesh.vertex_count()).collect();
            let full = model.descriptors(&inputs, &centers)?.rows;
            let cut = reference.descriptors(&inputs, &centers)?.rows;
            ok("zeroed residual branch passes its input through exactly", full == cut, format!("{:.3e}", full.max_abs_diff(&cut)))
        })),
        ("netarch: softmax rows", Box::new(move || {
            let mesh = prepare_mesh(&shapes::bumpy_sphere(1, 0.1, seed))?;
            let mut model = Model::new(toy4(), seed)?;
            let y = model.predict(&MeshInputs::from_mesh(&mesh, &model.spec)?)?;
            let worst = (0..y.rows()).map(|r| (y.row(r).iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
            Ok(Check::below("class probabilities sum to 1", worst, 1e-12))
        })),
        ("netarch: uniform logits", Box::new(|| {
            let mut g = Graph::new();
            let x = g.constant(Tensor::filled(&[2, 8], 0.7));
            let y = g.softmax(x)?;
            ok("equal logits give 1/8 per class", max_diff(g.value(y).data(), &[0.125; 16]) < 1e-15, "")
        })),
        ("netarch: loss examples", Box::new(move || {
            let mut p = Params::new();
            let mut s = p.session(Mode::Eval, false);
            let onehot = s.g.constant(Tensor::from_fn(&[3, 8], |i| if i % 8 == (i / 8) * 2 { 1.0 } else { 0.0 }));
            let zero = crate::netarch::segmentation_loss(&mut s, onehot, &[0, 2, 4])?;
            let uni = s.g.constant(Tensor::filled(&[3, 8], 0.125));
            let ln8 = crate::netarch::segmentation_loss(&mut s, uni, &[1, 5, 7])?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut raw = gradcheck::random_tensor(&[4, 8], &mut rng);
            raw.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.01);
            let sums: Vec<f64> = (0..4).map(|r| raw.row(r).iter().sum()).collect();
            let probs = Tensor::from_fn(&[4, 8], |i| raw.data()[i] / sums[i / 8]);
            let labels = [3usize, 0, 7, 3];
            let oracle = -labels.iter().enumerate().map(|(r, &l)| probs.at(r, l).ln()).sum::<f64>() / 4.0;
            let pv = s.g.constant(probs);
            let fixture = crate::netarch::segmentation_loss(&mut s, pv, &labels)?;
            let (a, b, c) = (s.g.value(zero).item(), s.g.value(ln8).item(), s.g.value(fixture).item());
            ok("loss is 0 for one-hot, ln 8 for uniform, matches a scalar oracle",
               a.abs() < 1e-15 && (b - 8f64.ln()).abs() < 1e-12 && (c - oracle).abs() < 1e-12, format!("{a:.3e} {b:.6} {:.3e}", (c - oracle).abs()))
        })),
    ]
}

fn spectral_cases<'a>(seed: u64) -> Vec<Case<'a>> {
    vec![
        ("spectral: harmonic constant", Box::new(|| {
            let b = spectral::laplacian_basis(&shapes::bumpy_sphere(2, 0.05, 1), 8)?;
            let c0 = b.phi.at(0, 0);
            let spread = (0..b.vertex_count()).map(|r| (b.phi.at(r, 0) - c0).abs()).fold(0.0, f64::max);
            ok("lambda_0 ~ 0 and phi_0 constant; eigenvalues nondecreasing",
               b.eigenvalues[0].abs() < 1e-8 && spread < 1e-8 && b.eigenvalues.windows(2).all(|w| w[0] <= w[1]),
               format!("lambda_0 {:.2e}, spread {spread:.2e}", b.eigenvalues[0]))
        })),
        ("spectral: rectangle", Box::new(|| Ok(Check::below("rectangle spectrum relative error", super::rectangle_spectrum_error(9)?, 0.1)))),
        ("spectral: self map", Box::new(move || Ok(Check::below("self-map C = I", super::self_map_error(&shapes::bumpy_sphere(2, 0.05, 4), 10, seed)?, 1e-6)))),
        ("spectral: homogeneity", Box::new(move || {
            let m = shapes::bumpy_sphere(1, 0.05, 4);
            let b = spectral::laplacian_basis(&m, 8)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (f, g) = (gradcheck::random_tensor(&[m.vertex_count(), 20], &mut rng), gradcheck::random_tensor(&[m.vertex_count(), 20], &mut rng));
            let sc = |t: &Tensor| Tensor::from_fn(t.shape(), |i| 3.7 * t.data()[i]);
            let c1 = map_of(&f, &g, &b, &b)?;
            let c2 = map_of(&sc(&f), &sc(&g), &b, &b)?;
            Ok(Check::below("scaling both feature sets leaves C unchanged", c1.max_abs_diff(&c2), 1e-9))
        })),
        ("spectral: orthogonal recovery", Box::new(move || {
            let k = 10;
            let unit = SpectralBasis { eigenvalues: vec![0.0; k], phi: eye(k), mass: vec![1.0; k] };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = gradcheck::random_tensor(&[k, 100], &mut rng);
            let q = nalgebra::DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0)).qr().q();
            let bm = &q * nalgebra::DMatrix::from_row_slice(k, 100, a.data());
            let b = Tensor::from_fn(&[k, 100], |i| bm[(i / 100, i % 100)]);
            let qt = Tensor::from_fn(&[k, k], |i| q[(i / k, i % k)]);
            Ok(Check::below("B = QA recovers C = Q", map_of(&a, &b, &unit, &unit)?.max_abs_diff(&qt), 1e-8))
        })),
        ("spectral: identity matching", Box::new(|| {
            let mesh = super::invariance_mesh();
            let b = spectral::laplacian_basis(&mesh, 30)?;
            let n = mesh.vertex_count();
            let distinct = (0..n).all(|i| (0..i).all(|j| (0..30).map(|c| (b.phi.at(i, c) - b.phi.at(j, c)).powi(2)).sum::<f64>() > 1e-12));
            let p = soft_map(&eye(30), &b)?;
            let p2 = soft_map(&Tensor::from_fn(&[30, 30], |i| 2.0 * eye(30).data()[i]), &b)?;
            let col = (0..n).map(|x| ((0..n).map(|y| p.at(y, x)).sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
            let m = spectral::hard_matches(&p);
            ok("C = I matches each vertex to itself; columns sum to 1; doubling C keeps argmax",
               distinct && m == (0..n).collect::<Vec<_>>() && col < 1e-9 && spectral::hard_matches(&p2) == m,
               format!("distinct rows {distinct}, column-sum error {col:.2e}"))
        })),
        ("spectral: loss examples", Box::new(|| {
            let mesh = shapes::bumpy_sphere(1, 0.05, 2);
            let n = mesh.vertex_count();
            let d = all_pairs(&mesh);
            let gt: Vec<usize> = (0..n).rev().collect();
            let perm = Tensor::from_fn(&[n, n], |i| if gt[i % n] == i / n { 1.0 } else { 0.0 });
            let uniform = Tensor::filled(&[n, n], 1.0 / n as f64);
            // the literal sum of P^2 D^2 divided by |X|
            let mut oracle = 0.0;
            for x in 0..n {
                for y in 0..n {
                    oracle += (1.0 / n as f64).powi(2) * d[y * n + gt[x]].powi(2);
                }
            }
            oracle /= n as f64;
            let half: Vec<f64> = d.iter().map(|v| v * 0.5).collect();
            let (l0, lu, lh) = (fm_loss(&perm, &d, &gt)?, fm_loss(&uniform, &d, &gt)?, fm_loss(&uniform, &half, &gt)?);
            ok("ground-truth P gives 0, uniform P matches a double loop, halving D quarters the loss",
               l0 == 0.0 && (lu - oracle).abs() < 1e-9 && (lh - 0.25 * lu).abs() < 1e-12 * lu.max(1.0), format!("{l0} {lu:.6} {oracle:.6}"))
        })),
    ]
}

fn train_cases<'a>(scratch: &'a Path, seed: u64) -> Vec<Case<'a>> {
    vec![
        ("train: manifest", Box::new(move || {
            let dir = scratch.join("manifest");
            write_dataset(&dir, &capsule_dataset(2, 1, seed))?;
            let shapes = load_root(&dir)?;
            ok("manifest of two meshes loads two labeled shapes", shapes.len() == 2, "")
        })),
        ("train: short labels", Box::new(move || {
            let dir = scratch.join("short-labels");
            let shape = capsule_dataset(1, 0, seed).remove(0);
            write_dataset(&dir, std::slice::from_ref(&shape))?;
            let labels = dir.join(format!("{}.labels", shape.name));
            crate::train::write_labels(&labels, &shape.labels[1..])?;
            match load_root(&dir) {
                Err(e) => ok("missing label is reported with the label file", e.to_string().contains(&labels.display().to_string()), e.to_string()),
                Ok(_) => ok("missing label is reported with the label file", false, "loaded"),
            }
        })),
        ("train: empty root", Box::new(move || {
            let dir = scratch.join("empty");
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            match load_root(&dir) {
                Err(e) => ok("empty data root names the expected manifest", e.to_string().contains("manifest.toml"), e.to_string()),
                Ok(_) => ok("empty data root names the expected manifest", false, "loaded"),
            }
        })),
        ("train: generator labels", Box::new(move || {
            let data = capsule_dataset(3, 1, seed);
            let good = data.iter().all(|s| {
                s.labels.len() == s.mesh.vertex_count() && s.labels.contains(&0) && s.labels.contains(&1) && s.labels.iter().all(|&l| l < 2)
            });
            ok("capsule generator labels every vertex with exactly the two parts", good, "")
        })),
        ("train: untrained chance", Box::new(move || {
            let spec = crate::train::desk_spec(LrfVariant::Curvature);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut shape = capsule_dataset(1, 0, seed).remove(0);
            shape.labels = (0..shape.mesh.vertex_count()).map(|_| rng.random_range(0..8)).collect();
            let prepared = Prepared::build(&shape, &spec)?;
            let mut model = Model::new(spec, seed)?;
            let acc = evaluate_segmentation(&mut model, &[&prepared])?;
            ok("untrained accuracy on 8 random classes is near chance", (acc - 0.125).abs() < 0.1, format!("{acc:.3}"))
        })),
        ("train: curve monotone", Box::new(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let errors: Vec<f64> = (0..200).map(|_| rng.random_range(0.0..2.0)).collect();
            let radii: Vec<f64> = (0..=20).map(|i| i as f64 * 0.1).collect();
            let c = geodesic_error_curve(&errors, &radii);
            ok("error curve is nondecreasing in r", c.windows(2).all(|w| w[0].1 <= w[1].1), "")
        })),
        ("cli: checkpoint guard", Box::new(move || {
            let spec = ModelSpec::toy(4, 1, 4, HeadSpec::Segmentation { widths: vec![8] });
            let mut other = spec.clone();
            other.base_width = 8;
            let path = scratch.join("guard.ckpt");
            Model::new(spec.clone(), seed)?.params.to_checkpoint(spec.spec_hash(), 0).save(&path)?;
            match Checkpoint::load_for(&path, &other.spec_hash()) {
                Err(e) => {
                    let msg = e.to_string();
                    ok("mismatched spec hash is refused naming both hashes",
                       msg.contains(&crate::tensor::hex(&spec.spec_hash())) && msg.contains(&crate::tensor::hex(&other.spec_hash())), msg)
                }
                Ok(_) => ok("mismatched spec hash is refused naming both hashes", false, "loaded"),
            }
        })),
        ("cli: export shape", Box::new(move || {
            let mesh = prepare_mesh(&shapes::deform(&shapes::grid(10, 5, 1.0, 0.5), 0.02, seed))?;
            let mut model = Model::new(ModelSpec::toy(8, 2, 4, HeadSpec::Segmentation { widths: vec![8] }), seed)?;
            let out = model.descriptors(&MeshInputs::from_mesh(&mesh, &model.spec)?, &(0..50).collect::<Vec<_>>())?;
            let back = LsdOutput::parse_text(&out.to_text())?;
            ok("50-vertex mesh exports a 50x8 matrix that reads back exactly", back.shape() == [50, 8] && back == out.rows, format!("{:?}", back.shape()))
        })),
        ("cli: cache", Box::new(move || {
            let dir = scratch.join("cache");
            let mesh = shapes::bumpy_sphere(1, 0.05, seed);
            let spec = ModelSpec::toy(4, 2, 4, HeadSpec::Segmentation { widths: vec![8] });
            let first = crate::cache::Cache::new(&dir)?;
            let g = first.geometry(&mesh)?;
            first.mesh_patches(&g, &spec)?;
            let second = crate::cache::Cache::new(&dir)?;
            let g = second.geometry(&mesh)?;
            second.mesh_patches(&g, &spec)?;
            let s = second.stats();
            ok("re-preprocessing only hits the cache", s.misses == 0 && s.rebuilt == 0 && s.hits > 0, format!("{s:?}"))
        })),
    ]
}

fn experiment_cases<'a>(seed: u64) -> Vec<Case<'a>> {
    vec![
        ("experiment: overfit and rotated copy", Box::new(move || {
            let o = experiments::segmentation_overfit(500, seed)?;
            ok("single-mesh overfit reaches 99% within 500 steps; rotated copy within 1%",
               o.step_reaching_99.is_some() && o.gap() <= 0.01,
               format!("step {:?}, train {:.3}, rotated {:.3}", o.step_reaching_99, o.final_train_accuracy, o.final_rotated_accuracy))
        })),
        ("experiment: self matching", Box::new(move || {
            let o = experiments::correspondence_self_training(&super::invariance_mesh(), 50, 30, seed)?;
            ok("self-trained matching is exact for at least 99% of vertices", o.exact_matches >= 0.99, format!("{:.3}", o.exact_matches))
        })),
    ]
}

/// Runs every example; `experiments` adds the training runs (about a
/// minute in release builds). `scratch` receives temporary files.
pub fn selftest(scratch: &Path, experiments: bool, seed: u64) -> Result<SuiteReport> {
    SuiteReport::timed("selftest", || {
        let mut cases = mesh_cases();
        cases.extend(geodesy_cases(seed));
        cases.extend(lrf_cases(seed));
        cases.extend(patch_cases(seed));
        cases.extend(tensor_cases(seed));
        cases.extend(lrfconv_cases(seed));
        cases.extend(netarch_cases(seed));
        cases.extend(spectral_cases(seed));
        cases.extend(train_cases(scratch, seed));
        if experiments {
            cases.extend(experiment_cases(seed));
        }
        Ok(cases
            .into_iter()
            .map(|(group, f)| match f() {
                Ok(mut c) => {
                    c.name = format!("{group}: {}", c.name);
                    c
                }
                Err(e) => Check::new(group, false, format!("error: {e}")),
            })
            .collect())
    })
}
