//! Principal curvature directions from a local quadric (Monge patch) fit.
//!
//! For each vertex the 2-ring is expressed in a tangent frame `(t1, t2, n)`
//! and `h = a u^2 + b uv + c v^2 + d u + e v` is fitted by least squares. The
//! fitted polynomial space is closed under rotations of the tangent plane, so
//! the recovered directions do not depend on the arbitrary choice of `t1`.

use nalgebra::{DMatrix, DVector, Matrix2, SymmetricEigen};

use super::{TriMesh, Vec3};

/// Principal curvatures closer than this are treated as umbilic.
pub const UMBILIC_TOL: f64 = 1e-6;

const MIN_FIT_POINTS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvatureSample {
    /// Unit tangent direction of the principal curvature with the largest
    /// magnitude, oriented toward the lowest-index 1-ring neighbor it is not
    /// orthogonal to.
    pub direction: Vec3,
    /// Principal curvature along `direction`.
    pub k_max: f64,
    /// The other principal curvature.
    pub k_min: f64,
    /// False at umbilic or under-determined vertices.
    pub reliable: bool,
}

impl CurvatureSample {
    fn unreliable(direction: Vec3) -> Self {
        Self {
            direction,
            k_max: 0.0,
            k_min: 0.0,
            reliable: false,
        }
    }
}

/// Deterministic unit tangent orthogonal to `n`.
pub(crate) fn tangent_basis(n: &Vec3) -> (Vec3, Vec3) {
    let axis = if n.x.abs() <= n.y.abs() && n.x.abs() <= n.z.abs() {
        Vec3::x()
    } else if n.y.abs() <= n.z.abs() {
        Vec3::y()
    } else {
        Vec3::z()
    };
    let t1 = n.cross(&axis).normalize();
    let t2 = n.cross(&t1);
    (t1, t2)
}

pub(super) fn estimate(mesh: &TriMesh) -> Vec<CurvatureSample> {
    (0..mesh.vertex_count()).map(|i| fit_vertex(mesh, i)).collect()
}

fn fit_vertex(mesh: &TriMesh, i: usize) -> CurvatureSample {
    let n = mesh.normal(i);
    if n == Vec3::zeros() {
        return CurvatureSample::unreliable(Vec3::zeros());
    }
    let (t1, t2) = tangent_basis(&n);
    let ring = mesh.two_ring(i);
    if ring.len() < MIN_FIT_POINTS {
        return CurvatureSample::unreliable(t1);
    }

    let origin = mesh.vertex(i);
    let offsets: Vec<Vec3> = ring.iter().map(|&j| mesh.vertex(j) - origin).collect();
    let scale = offsets.iter().map(|d| d.norm()).sum::<f64>() / offsets.len() as f64;
    if scale == 0.0 {
        return CurvatureSample::unreliable(t1);
    }

    // fit in units of the mean offset length to keep the system well scaled
    let mut design = DMatrix::zeros(offsets.len(), 5);
    let mut rhs = DVector::zeros(offsets.len());
    for (r, d) in offsets.iter().enumerate() {
        let (u, v, h) = (d.dot(&t1) / scale, d.dot(&t2) / scale, d.dot(&n) / scale);
        design[(r, 0)] = u * u;
        design[(r, 1)] = u * v;
        design[(r, 2)] = v * v;
        design[(r, 3)] = u;
        design[(r, 4)] = v;
        rhs[r] = h;
    }
    let svd = design.svd(true, true);
    let smax = svd.singular_values.max();
    if svd.singular_values.min() <= 1e-10 * smax {
        return CurvatureSample::unreliable(t1);
    }
    let coef = match svd.solve(&rhs, 0.0) {
        Ok(c) => c,
        Err(_) => return CurvatureSample::unreliable(t1),
    };
    let (a, b, c) = (coef[0] / scale, coef[1] / scale, coef[2] / scale);
    let (du, dv) = (coef[3], coef[4]);

    // first and second fundamental forms of the Monge patch at the origin
    let w = (1.0 + du * du + dv * dv).sqrt();
    let first = Matrix2::new(1.0 + du * du, du * dv, du * dv, 1.0 + dv * dv);
    let second = Matrix2::new(2.0 * a, b, b, 2.0 * c) / w;

    // II x = k I x, symmetrised through the Cholesky factor of I
    let chol = first.cholesky().expect("first fundamental form is positive definite");
    let l_inv = chol.l().try_inverse().expect("invertible");
    let sym = l_inv * second * l_inv.transpose();
    let sym = (sym + sym.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let (k0, k1) = (eig.eigenvalues[0], eig.eigenvalues[1]);
    let (imax, k_max, k_min) = if k0.abs() >= k1.abs() {
        (0, k0, k1)
    } else {
        (1, k1, k0)
    };
    let y = eig.eigenvectors.column(imax).into_owned();
    let x = l_inv.transpose() * y;

    let tangent = (t1 + n * du) * x[0] + (t2 + n * dv) * x[1];
    let projected = tangent - n * tangent.dot(&n);
    let norm = projected.norm();
    if norm == 0.0 {
        return CurvatureSample::unreliable(t1);
    }
    let mut direction = projected / norm;

    for &(j, len) in mesh.neighbors(i) {
        let dot = direction.dot(&(mesh.vertex(j) - origin));
        if dot.abs() > 1e-9 * len {
            if dot < 0.0 {
                direction = -direction;
            }
            break;
        }
    }

    CurvatureSample {
        direction,
        k_max,
        k_min,
        reliable: (k_max - k_min).abs() > UMBILIC_TOL,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::shapes;

    fn with_curvature(m: TriMesh) -> TriMesh {
        m.estimate_normals().estimate_curvature_dirs().unwrap()
    }

    #[test]
    fn directions_are_unit_and_tangent() {
        let m = with_curvature(shapes::bumpy_sphere(2, 0.08, 7));
        for (c, n) in m.curvature().iter().zip(m.normals()) {
            assert!((c.direction.norm() - 1.0).abs() < 1e-9);
            assert!(c.direction.dot(n).abs() < 1e-6);
        }
    }

    #[test]
    fn plane_is_umbilic_everywhere() {
        let m = with_curvature(shapes::grid(6, 6, 1.0, 1.0));
        assert!(m.curvature().iter().all(|c| !c.reliable));
    }

    #[test]
    fn icosahedron_is_umbilic_everywhere() {
        let m = with_curvature(shapes::icosphere(0));
        assert!(m.curvature().iter().all(|c| !c.reliable));
    }

    #[test]
    fn cylinder_max_direction_is_circumferential() {
        let m = with_curvature(shapes::cylinder(1.0, 3.0, 32, 12));
        let mut checked = 0;
        for (i, c) in m.curvature().iter().enumerate() {
            let p = m.vertex(i);
            if p.z < 0.6 || p.z > 2.4 {
                continue;
            }
            let circ = Vec3::new(-p.y, p.x, 0.0).normalize();
            let angle = c.direction.dot(&circ).abs().clamp(0.0, 1.0).acos();
            assert!(c.reliable);
            assert!(angle < 0.1, "vertex {i}: {angle}");
            assert!((c.k_max.abs() - 1.0).abs() < 0.1);
            checked += 1;
        }
        assert!(checked > 100);
    }

    #[test]
    fn too_few_neighbors_is_unreliable() {
        let m = with_curvature(shapes::tetrahedron());
        assert!(m.curvature().iter().all(|c| !c.reliable));
    }
}
