//! Cotangent Laplace–Beltrami bases, functional maps, soft correspondences
//! and the geodesic matching loss.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::mesh::TriMesh;
use crate::tensor::{Graph, Tensor, Var};

/// Triangles below this area get clamped cotangent weights.
pub const DEGENERATE_AREA: f64 = 1e-12;

/// Damping of the functional-map normal equations, relative to the mean
/// diagonal of `A A^T`.
pub const MAP_DAMPING: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBasis {
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    /// `N x k`, mass-orthonormal columns.
    pub phi: Tensor,
    /// Lumped barycentric mass per vertex.
    pub mass: Vec<f64>,
}

impl SpectralBasis {
    pub fn k(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn vertex_count(&self) -> usize {
        self.mass.len()
    }

    /// `Phi^T M`, `k x N`.
    pub fn projector(&self) -> Tensor {
        let (n, k) = (self.vertex_count(), self.k());
        Tensor::from_fn(&[k, n], |i| {
            let (r, c) = (i / n, i % n);
            self.phi.at(c, r) * self.mass[c]
        })
    }
}

/// Cotangent stiffness (positive semi-definite, zero row sums) and lumped
/// mass (one third of the incident triangle areas).
pub fn cotangent_laplacian(mesh: &TriMesh) -> (DMatrix<f64>, Vec<f64>) {
    let n = mesh.vertex_count();
    let mut w = DMatrix::zeros(n, n);
    let mut mass = vec![0.0; n];
    let mut clamped = 0usize;
    for (fi, f) in mesh.faces().iter().enumerate() {
        let area = mesh.face_area(fi);
        for &v in f {
            mass[v] += area / 3.0;
        }
        for c in 0..3 {
            // the angle at corner c weighs the opposite edge (a, b)
            let (i, a, b) = (f[c], f[(c + 1) % 3], f[(c + 2) % 3]);
            let (p, q) = (mesh.vertex(a) - mesh.vertex(i), mesh.vertex(b) - mesh.vertex(i));
            let cross = p.cross(&q).norm();
            let cot = if area < DEGENERATE_AREA {
                clamped += 1;
                0.0
            } else {
                p.dot(&q) / cross
            };
            let h = 0.5 * cot;
            w[(a, b)] -= h;
            w[(b, a)] -= h;
            w[(a, a)] += h;
            w[(b, b)] += h;
        }
    }
    if clamped > 0 {
        log::warn!("cotangent laplacian: {} corners of degenerate triangles clamped", clamped);
    }
    (w, mass)
}

/// The `k` smallest solutions of `W phi = lambda M phi`.
pub fn laplacian_basis(mesh: &TriMesh, k: usize) -> Result<SpectralBasis> {
    let n = mesh.vertex_count();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("cannot take {k} eigenpairs of a {n}-vertex mesh")));
    }
    let (w, mass) = cotangent_laplacian(mesh);
    if let Some(i) = mass.iter().position(|m| !(*m > 0.0)) {
        return Err(Error::invalid(format!("vertex {i} has no incident area")));
    }
    let inv_sqrt: Vec<f64> = mass.iter().map(|m| 1.0 / m.sqrt()).collect();
    let sym = DMatrix::from_fn(n, n, |r, c| w[(r, c)] * inv_sqrt[r] * inv_sqrt[c]);
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let mut phi = vec![0.0; n * k];
    let mut eigenvalues = Vec::with_capacity(k);
    for (col, &e) in order.iter().take(k).enumerate() {
        // round-off can leave the null eigenvalue slightly negative
        eigenvalues.push(eig.eigenvalues[e].max(0.0));
        let u = eig.eigenvectors.column(e);
        // sign: largest-magnitude entry positive
        let mut pivot = 0;
        for r in 0..n {
            if u[r].abs() > u[pivot].abs() {
                pivot = r;
            }
        }
        let s = if u[pivot] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n {
            phi[r * k + col] = s * u[r] * inv_sqrt[r];
        }
    }
    Ok(SpectralBasis {
        eigenvalues,
        phi: Tensor::matrix(n, k, phi)?,
        mass,
    })
}

/// Functional map `C` (`k x k`) with `C A ≈ B`, where `A = Phi_X^T M_X F_X`
/// and `B = Phi_Y^T M_Y F_Y`, from damped normal equations.
pub fn functional_map(
    g: &mut Graph,
    fx: Var,
    fy: Var,
    bx: &SpectralBasis,
    by: &SpectralBasis,
) -> Result<Var> {
    if bx.k() != by.k() {
        return Err(Error::shape("functional_map", &[bx.k()], &[by.k()]));
    }
    let k = bx.k();
    let px = g.constant(bx.projector());
    let py = g.constant(by.projector());
    let a = g.matmul(px, fx)?;
    let b = g.matmul(py, fy)?;
    let at = g.transpose(a)?;
    let bt = g.transpose(b)?;
    let aat = g.matmul(a, at)?;
    let abt = g.matmul(a, bt)?;
    // mu = damping * trace(A A^T) / k
    let tr = g.frobenius_sq(a)?;
    let mu = g.scale(tr, MAP_DAMPING / k as f64)?;
    let eye = g.constant(Tensor::from_fn(&[k, k], |i| if i / k == i % k { 1.0 } else { 0.0 }));
    let damp = g.mul(eye, mu)?;
    let lhs = g.add(aat, damp)?;
    flag_rank_deficiency(g.value(aat), g.value(mu).item());
    let ct = g.solve(lhs, abt)?;
    g.transpose(ct)
}

fn flag_rank_deficiency(aat: &Tensor, mu: f64) {
    let k = aat.rows();
    let m = DMatrix::from_row_slice(k, k, aat.data());
    let lo = m.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min);
    if lo < mu {
        log::warn!(
            "functional map: projected features are rank deficient (smallest eigenvalue {lo:e} below damping {mu:e})"
        );
    }
}

/// Soft map `P` (`N_Y x N_X`): scores `S = Phi_Y C Phi_X^T`, each column's
/// magnitudes normalised to unit length, then a column softmax.
pub fn soft_correspondence(g: &mut Graph, c: Var, bx: &SpectralBasis, by: &SpectralBasis) -> Result<Var> {
    let phi_y = g.constant(by.phi.clone());
    let phi_x = g.constant(bx.phi.clone());
    let yc = g.matmul(phi_y, c)?;
    let cy = g.transpose(yc)?;
    // S^T = Phi_X C^T Phi_Y^T, one row per source vertex
    let st = g.matmul(phi_x, cy)?;
    let mag = g.abs(st)?;
    let unit = g.normalize_rows(mag)?;
    let soft = g.softmax(unit)?;
    g.transpose(soft)
}

/// Argmax target per source column of `P`; ties go to the lowest index.
pub fn hard_matches(p: &Tensor) -> Vec<usize> {
    let (ny, nx) = (p.rows(), p.cols());
    (0..nx)
        .map(|x| {
            let mut best = 0;
            for y in 1..ny {
                if p.at(y, x) > p.at(best, x) {
                    best = y;
                }
            }
            best
        })
        .collect()
}

/// `D_Y Pi*`: column `x` holds the distances on `Y` from the true target of `x`.
pub fn target_distances(d_y: &[f64], n_y: usize, gt: &[usize]) -> Result<Tensor> {
    if d_y.len() != n_y * n_y {
        return Err(Error::shape("fmnet_loss", &[n_y, n_y], &[d_y.len()]));
    }
    if let Some(&bad) = gt.iter().find(|&&t| t >= n_y) {
        return Err(Error::invalid(format!("ground-truth target {bad} outside a {n_y}-vertex shape")));
    }
    let nx = gt.len();
    Ok(Tensor::from_fn(&[n_y, nx], |i| d_y[(i / nx) * n_y + gt[i % nx]]))
}

/// `(1/|X|) * || P ∘ (D_Y Pi*) ||_F^2`.
pub fn fmnet_loss(g: &mut Graph, p: Var, d_y: &[f64], gt: &[usize]) -> Result<Var> {
    let (ny, nx) = match g.shape(p) {
        [a, b] => (*a, *b),
        s => return Err(Error::shape("fmnet_loss", s, &[0, 0])),
    };
    if gt.len() != nx {
        return Err(Error::shape("fmnet_loss", &[ny, nx], &[gt.len()]));
    }
    let dt = g.constant(target_distances(d_y, ny, gt)?);
    let weighted = g.mul(p, dt)?;
    let sq = g.frobenius_sq(weighted)?;
    g.scale(sq, 1.0 / nx as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::shapes;
    use crate::tensor::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gram_error(b: &SpectralBasis) -> f64 {
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

    #[test]
    fn basis_invariants_on_closed_and_open_meshes() {
        for mesh in [shapes::bumpy_sphere(2, 0.05, 1), shapes::grid(9, 7, 1.0, 0.7), shapes::torus(12, 8, 1.0, 0.3)] {
            let b = laplacian_basis(&mesh, 12).unwrap();
            assert!(b.eigenvalues[0].abs() < 1e-8);
            let c0 = b.phi.at(0, 0);
            for r in 0..mesh.vertex_count() {
                assert!((b.phi.at(r, 0) - c0).abs() < 1e-6);
            }
            assert!(gram_error(&b) < 1e-8, "{}", gram_error(&b));
            assert!(b.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn stiffness_rows_sum_to_zero() {
        let (w, m) = cotangent_laplacian(&shapes::bumpy_sphere(1, 0.05, 2));
        for r in 0..w.nrows() {
            assert!(w.row(r).sum().abs() < 1e-12);
        }
        assert!((m.iter().sum::<f64>() - shapes::bumpy_sphere(1, 0.05, 2).surface_area()).abs() < 1e-12);
    }

    #[test]
    fn rectangle_spectrum_matches_neumann_eigenvalues() {
        let (a, b) = (1.0, 0.6);
        let mesh = shapes::grid(25, 17, a, b);
        assert!(mesh.vertex_count() >= 400);
        let basis = laplacian_basis(&mesh, 10).unwrap();
        let pi = std::f64::consts::PI;
        let mut exact: Vec<f64> = (0..6)
            .flat_map(|m| (0..6).map(move |n| (pi * m as f64 / a).powi(2) + (pi * n as f64 / b).powi(2)))
            .collect();
        exact.sort_by(f64::total_cmp);
        for i in 1..10 {
            let rel = (basis.eigenvalues[i] - exact[i]).abs() / exact[i];
            assert!(rel < 0.1, "eigenvalue {i}: {} vs {}", basis.eigenvalues[i], exact[i]);
        }
    }

    fn map_of(fx: &Tensor, fy: &Tensor, bx: &SpectralBasis, by: &SpectralBasis) -> Tensor {
        let mut g = Graph::new();
        let (x, y) = (g.constant(fx.clone()), g.constant(fy.clone()));
        let c = functional_map(&mut g, x, y, bx, by).unwrap();
        g.value(c).clone()
    }

    #[test]
    fn self_map_is_identity_and_scale_free() {
        let mesh = shapes::bumpy_sphere(2, 0.05, 4);
        let b = laplacian_basis(&mesh, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = gradcheck::random_tensor(&[mesh.vertex_count(), 40], &mut rng);
        let c = map_of(&f, &f, &b, &b);
        let eye = Tensor::from_fn(&[10, 10], |i| if i / 10 == i % 10 { 1.0 } else { 0.0 });
        assert!(c.max_abs_diff(&eye) < 1e-6, "{}", c.max_abs_diff(&eye));
        let g = gradcheck::random_tensor(&[mesh.vertex_count(), 40], &mut rng);
        let scaled = |t: &Tensor, s: f64| Tensor::from_fn(t.shape(), |i| t.data()[i] * s);
        let c1 = map_of(&f, &g, &b, &b);
        let c2 = map_of(&scaled(&f, 3.7), &scaled(&g, 3.7), &b, &b);
        assert!(c1.max_abs_diff(&c2) < 1e-10 * (1.0 + c1.data().iter().fold(0.0f64, |m, v| m.max(v.abs()))));
    }

    #[test]
    fn recovers_orthogonal_map() {
        // projected features constructed directly: with an identity basis
        // and unit mass, A = F_X and B = F_Y
        let k = 10;
        let unit = SpectralBasis {
            eigenvalues: vec![0.0; k],
            phi: Tensor::from_fn(&[k, k], |i| if i / k == i % k { 1.0 } else { 0.0 }),
            mass: vec![1.0; k],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = gradcheck::random_tensor(&[k, 100], &mut rng);
        let q = nalgebra::DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0)).qr().q();
        let am = DMatrix::from_row_slice(k, 100, a.data());
        let bm = &q * am;
        let b = Tensor::from_fn(&[k, 100], |i| bm[(i / 100, i % 100)]);
        let c = map_of(&a, &b, &unit, &unit);
        let qt = Tensor::from_fn(&[k, k], |i| q[(i / k, i % k)]);
        assert!(c.max_abs_diff(&qt) < 1e-8, "{}", c.max_abs_diff(&qt));
    }

    fn soft(c: &Tensor, b: &SpectralBasis) -> Tensor {
        let mut g = Graph::new();
        let cv = g.constant(c.clone());
        let p = soft_correspondence(&mut g, cv, b, b).unwrap();
        g.value(p).clone()
    }

    #[test]
    fn identity_map_matches_each_vertex_to_itself() {
        let mesh = shapes::deform(&shapes::torus(20, 10, 1.0, 0.4), 0.08, 5);
        let b = laplacian_basis(&mesh, 30).unwrap();
        // rows of the basis are pairwise distinct on this mesh
        let n = mesh.vertex_count();
        for i in 0..n {
            for j in 0..i {
                let d: f64 = (0..30).map(|c| (b.phi.at(i, c) - b.phi.at(j, c)).powi(2)).sum();
                assert!(d > 1e-12);
            }
        }
        let eye = Tensor::from_fn(&[30, 30], |i| if i / 30 == i % 30 { 1.0 } else { 0.0 });
        let p = soft(&eye, &b);
        assert_eq!(hard_matches(&p), (0..n).collect::<Vec<_>>());
        for x in 0..n {
            let s: f64 = (0..n).map(|y| p.at(y, x)).sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!((0..n).all(|y| p.at(y, x) >= 0.0));
        }
        // a doubled map moves mass but keeps every column's argmax
        let two = Tensor::from_fn(&[30, 30], |i| 2.0 * eye.data()[i]);
        let p2 = soft(&two, &b);
        assert_eq!(hard_matches(&p2), hard_matches(&p));
    }

    fn loss(p: &Tensor, d: &[f64], gt: &[usize]) -> f64 {
        let mut g = Graph::new();
        let pv = g.constant(p.clone());
        let l = fmnet_loss(&mut g, pv, d, gt).unwrap();
        g.value(l).item()
    }

    #[test]
    fn loss_examples() {
        let mesh = shapes::bumpy_sphere(1, 0.05, 7);
        let n = mesh.vertex_count();
        let d = crate::geodesy::all_pairs(&mesh);
        let gt: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
        let perm = Tensor::from_fn(&[n, n], |i| if gt[i % n] == i / n { 1.0 } else { 0.0 });
        assert_eq!(loss(&perm, &d, &gt), 0.0);
        let uniform = Tensor::filled(&[n, n], 1.0 / n as f64);
        let mut oracle = 0.0;
        for x in 0..n {
            for y in 0..n {
                let dist = d[y * n + gt[x]];
                oracle += (dist / n as f64).powi(2);
            }
        }
        oracle /= n as f64;
        assert!((loss(&uniform, &d, &gt) - oracle).abs() < 1e-9);
        let half: Vec<f64> = d.iter().map(|v| v * 0.5).collect();
        assert!((loss(&uniform, &half, &gt) - 0.25 * loss(&uniform, &d, &gt)).abs() < 1e-15);
        assert!(target_distances(&d, n, &[n]).is_err());
    }

    #[test]
    fn loss_gradient_through_map_and_softmax() {
        let mesh = shapes::bumpy_sphere(1, 0.05, 8);
        // 60-vertex torus matched onto a 42-vertex sphere
        let other = shapes::deform(&shapes::torus(10, 6, 1.0, 0.4), 0.05, 2);
        let bx = laplacian_basis(&other, 10).unwrap();
        let by = laplacian_basis(&mesh, 10).unwrap();
        let d = crate::geodesy::all_pairs(&mesh);
        let gt: Vec<usize> = (0..other.vertex_count()).map(|i| i % mesh.vertex_count()).collect();
        let f = |g: &mut Graph, v: &[Var]| -> Result<Var> {
            let c = functional_map(g, v[0], v[1], &bx, &by)?;
            let p = soft_correspondence(g, c, &bx, &by)?;
            fmnet_loss(g, p, &d, &gt)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..3 {
            let inputs = vec![
                gradcheck::random_tensor(&[other.vertex_count(), 12], &mut rng),
                gradcheck::random_tensor(&[mesh.vertex_count(), 12], &mut rng),
            ];
            let e = gradcheck::check(&f, &inputs).unwrap();
            assert!(e < 1e-4, "{e}");
        }
    }
}
