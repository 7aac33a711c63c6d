//! Local reference frames.
//!
//! Two constructions are provided. [`lrf_shot`] takes the eigenvectors of a
//! distance-weighted covariance of the support region, as in SHOT.
//! [`lrf_curvature`] aligns the first axis with the surface normal and the
//! second with the direction of maximum curvature. Both disambiguate axis
//! signs by a majority vote of the neighbor offsets, so a frame rotates with
//! the mesh whenever the vote is not close.

use nalgebra::{Matrix3, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesy;
use crate::mesh::{TriMesh, Vec3};

/// Eigenvalue pairs closer than this fraction of the largest one are
/// treated as equal.
pub const EIGEN_DEGENERACY_TOL: f64 = 1e-9;

/// A vote margin of at least this many offsets makes a sign choice robust to
/// round-off under rotation.
pub const STRICT_MARGIN: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrfVariant {
    Shot,
    Curvature,
}

impl LrfVariant {
    pub fn to_byte(self) -> u8 {
        match self {
            LrfVariant::Shot => 0,
            LrfVariant::Curvature => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(LrfVariant::Shot),
            1 => Some(LrfVariant::Curvature),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lrf {
    /// Columns are the frame axes `[r_x, r_y, r_z]`.
    pub rotation: Matrix3<f64>,
    /// Which construction produced the frame (a curvature frame that fell
    /// back to SHOT reports `Shot`).
    pub variant: LrfVariant,
    pub reliable: bool,
    /// Smallest vote margin over the disambiguated axes; 0 for degenerate frames.
    pub margin: u32,
}

impl Lrf {
    pub fn identity(variant: LrfVariant) -> Self {
        Self {
            rotation: Matrix3::identity(),
            variant,
            reliable: false,
            margin: 0,
        }
    }

    /// Sign choices are robust, so the frame is rotation-equivariant.
    pub fn is_strict(&self) -> bool {
        self.margin >= STRICT_MARGIN
    }

    pub fn axis(&self, k: usize) -> Vec3 {
        self.rotation.column(k).into_owned()
    }

    /// Coordinates of a world vector in this frame's basis.
    pub fn to_local(&self, v: &Vec3) -> Vec3 {
        self.rotation.transpose() * v
    }
}

/// Offset of a support point from the frame origin.
#[derive(Debug, Clone, Copy)]
pub struct SupportPoint {
    pub vertex: usize,
    pub offset: Vec3,
    pub weight: f64,
}

/// Majority sign of `axis` over the offsets. Returns the oriented axis and the
/// vote margin. Ties go to the sign of the lowest-index point whose offset is
/// not orthogonal to the axis.
fn vote(axis: Vec3, support: &[SupportPoint]) -> (Vec3, u32) {
    let (mut pos, mut neg) = (0u32, 0u32);
    for p in support {
        if p.offset == Vec3::zeros() {
            continue;
        }
        if p.offset.dot(&axis) >= 0.0 {
            pos += 1;
        } else {
            neg += 1;
        }
    }
    let margin = pos.abs_diff(neg);
    let flip = match pos.cmp(&neg) {
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Greater => false,
        std::cmp::Ordering::Equal => support
            .iter()
            .filter(|p| p.offset.dot(&axis).abs() > 1e-12 * p.offset.norm())
            .min_by_key(|p| p.vertex)
            .is_some_and(|p| p.offset.dot(&axis) < 0.0),
    };
    (if flip { -axis } else { axis }, margin)
}

/// SHOT frame from explicit support points.
pub fn shot_frame(support: &[SupportPoint]) -> Lrf {
    let active: Vec<&SupportPoint> = support
        .iter()
        .filter(|p| p.weight > 0.0 && p.offset != Vec3::zeros())
        .collect();
    if active.len() < 3 {
        return Lrf::identity(LrfVariant::Shot);
    }
    let wsum: f64 = active.iter().map(|p| p.weight).sum();
    let cov = active
        .iter()
        .map(|p| p.offset * p.offset.transpose() * p.weight)
        .sum::<Matrix3<f64>>()
        / wsum;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lam: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let tol = EIGEN_DEGENERACY_TOL * lam[0].abs();
    if lam[0] <= 0.0 || lam[0] - lam[1] <= tol || lam[1] - lam[2] <= tol {
        return Lrf::identity(LrfVariant::Shot);
    }
    let x0 = eig.eigenvectors.column(order[0]).into_owned();
    let z0 = eig.eigenvectors.column(order[2]).into_owned();
    let (x, mx) = vote(x0, support);
    let (z, mz) = vote(z0, support);
    let y = z.cross(&x);
    Lrf {
        rotation: Matrix3::from_columns(&[x, y, z]),
        variant: LrfVariant::Shot,
        reliable: true,
        margin: mx.min(mz),
    }
}

/// SHOT frame at `center` over a geodesic support region. Weights are
/// `radius - d` clamped at zero, with `d` the geodesic distance.
pub fn lrf_shot(mesh: &TriMesh, center: usize, support: &[(usize, f64)], radius: f64) -> Lrf {
    let origin = mesh.vertex(center);
    let points: Vec<SupportPoint> = support
        .iter()
        .map(|&(v, d)| SupportPoint {
            vertex: v,
            offset: mesh.vertex(v) - origin,
            weight: (radius - d).max(0.0),
        })
        .collect();
    shot_frame(&points)
}

/// Frame with `r_x = normal`, `r_y` along the tangential part of `direction`,
/// `r_z = r_x x r_y`. No sign disambiguation.
pub fn curvature_frame(normal: &Vec3, direction: &Vec3) -> Option<Matrix3<f64>> {
    let tangent = direction - normal * normal.dot(direction);
    let len = tangent.norm();
    if len <= 1e-12 || normal.norm() == 0.0 {
        return None;
    }
    let y = tangent / len;
    Some(Matrix3::from_columns(&[*normal, y, normal.cross(&y)]))
}

/// Normal / maximum-curvature frame. Umbilic or unreliable vertices fall
/// back to a SHOT frame over the 2-ring, marked unreliable.
pub fn lrf_curvature(mesh: &TriMesh, center: usize) -> Result<Lrf> {
    if !mesh.has_normals() || !mesh.has_curvature() {
        return Err(Error::invalid("curvature LRF needs normals and curvature directions"));
    }
    let sample = mesh.curvature()[center];
    let normal = mesh.normal(center);
    let frame = if sample.reliable {
        curvature_frame(&normal, &sample.direction)
    } else {
        None
    };
    let Some(frame) = frame else {
        return Ok(two_ring_fallback(mesh, center));
    };
    let origin = mesh.vertex(center);
    let ring: Vec<SupportPoint> = mesh
        .neighbors(center)
        .iter()
        .map(|&(j, _)| SupportPoint {
            vertex: j,
            offset: mesh.vertex(j) - origin,
            weight: 1.0,
        })
        .collect();
    let y = frame.column(1).into_owned();
    let (mut nonneg, mut neg) = (0u32, 0u32);
    for p in &ring {
        if p.offset.dot(&y) >= 0.0 {
            nonneg += 1;
        } else {
            neg += 1;
        }
    }
    let y = if neg > nonneg { -y } else { y };
    let x = normal;
    Ok(Lrf {
        rotation: Matrix3::from_columns(&[x, y, x.cross(&y)]),
        variant: LrfVariant::Curvature,
        reliable: true,
        margin: nonneg.abs_diff(neg),
    })
}

fn two_ring_fallback(mesh: &TriMesh, center: usize) -> Lrf {
    let ring = mesh.two_ring(center);
    let reach: f64 = {
        let first = mesh.neighbors(center).iter().map(|&(_, l)| l).fold(0.0, f64::max);
        let second = mesh
            .neighbors(center)
            .iter()
            .flat_map(|&(j, _)| mesh.neighbors(j).iter().map(|&(_, l)| l))
            .fold(0.0, f64::max);
        first + second
    };
    if ring.is_empty() || reach == 0.0 {
        return Lrf::identity(LrfVariant::Shot);
    }
    let dist = geodesy::sparse_distances(mesh, center, reach);
    let support: Vec<(usize, f64)> = ring
        .iter()
        .filter_map(|v| dist.get(v).map(|&d| (*v, d)))
        .collect();
    let radius = 1.25 * support.iter().map(|&(_, d)| d).fold(0.0, f64::max);
    let mut lrf = lrf_shot(mesh, center, &support, radius);
    lrf.reliable = false;
    lrf
}

/// One frame per vertex. `radius` is the SHOT support radius (the patch tau);
/// it is ignored by the curvature variant.
pub fn compute_lrfs(mesh: &TriMesh, variant: LrfVariant, radius: f64) -> Result<Vec<Lrf>> {
    (0..mesh.vertex_count())
        .into_par_iter()
        .map(|i| match variant {
            LrfVariant::Shot => {
                if mesh.is_isolated(i) {
                    return Ok(Lrf::identity(LrfVariant::Shot));
                }
                let ball = geodesy::geodesic_ball(mesh, i, radius)?;
                Ok(lrf_shot(mesh, i, &ball, radius))
            }
            LrfVariant::Curvature => {
                if mesh.is_isolated(i) {
                    return Ok(Lrf::identity(LrfVariant::Shot));
                }
                lrf_curvature(mesh, i)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::shapes;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_rotation(r: &Matrix3<f64>) {
        assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-8);
        assert!((r.determinant() - 1.0).abs() < 1e-8);
    }

    fn points(offsets: &[Vec3]) -> Vec<SupportPoint> {
        offsets
            .iter()
            .enumerate()
            .map(|(i, &o)| SupportPoint {
                vertex: i,
                offset: o,
                weight: 1.0,
            })
            .collect()
    }

    #[test]
    fn ellipse_axes() {
        // semi-axes 2 and 1; covariance eigenvectors are the coordinate axes
        let offs: Vec<Vec3> = (0..24)
            .map(|k| {
                let t = std::f64::consts::TAU * (k as f64 + 0.3) / 24.0;
                Vec3::new(2.0 * t.cos(), t.sin(), 0.0)
            })
            .collect();
        let lrf = shot_frame(&points(&offs));
        assert!(lrf.reliable);
        assert!(lrf.axis(0).x.abs() > 1.0 - 1e-9);
        assert!(lrf.axis(2).z.abs() > 1.0 - 1e-9);
        assert_rotation(&lrf.rotation);
    }

    #[test]
    fn regular_tetrahedron_is_degenerate() {
        let offs = [
            Vec3::new(1.0, 1.0, 1.0),
            Vec3::new(1.0, -1.0, -1.0),
            Vec3::new(-1.0, 1.0, -1.0),
            Vec3::new(-1.0, -1.0, 1.0),
        ];
        let lrf = shot_frame(&points(&offs));
        assert!(!lrf.reliable);
        assert_eq!(lrf.rotation, Matrix3::identity());
    }

    #[test]
    fn shot_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let offs: Vec<Vec3> = (0..30)
            .map(|_| shapes::random_unit(&mut rng).component_mul(&Vec3::new(3.0, 1.5, 0.4)) + Vec3::new(1.0, 0.6, 0.3))
            .collect();
        let base = shot_frame(&points(&offs));
        assert!(base.is_strict());
        for _ in 0..100 {
            let r = shapes::random_rotation(&mut rng);
            let rotated: Vec<Vec3> = offs.iter().map(|o| r * o).collect();
            let lrf = shot_frame(&points(&rotated));
            assert!((lrf.rotation - r * base.rotation).abs().max() < 1e-6);
        }
    }

    #[test]
    fn flipping_curvature_direction_flips_two_axes() {
        let n = Vec3::new(0.2, -0.3, 0.9).normalize();
        let d = Vec3::new(1.0, 0.4, 0.0);
        let a = curvature_frame(&n, &d).unwrap();
        let b = curvature_frame(&n, &(-d)).unwrap();
        assert_eq!(a.column(0), b.column(0));
        assert!((a.column(1) + b.column(1)).norm() < 1e-15);
        assert!((a.column(2) + b.column(2)).norm() < 1e-15);
        assert_rotation(&a);
    }

    #[test]
    fn cylinder_curvature_frame() {
        let m = shapes::cylinder(1.0, 3.0, 32, 12)
            .estimate_normals()
            .estimate_curvature_dirs()
            .unwrap();
        for i in 0..m.vertex_count() {
            let p = m.vertex(i);
            if p.z < 0.6 || p.z > 2.4 {
                continue;
            }
            let lrf = lrf_curvature(&m, i).unwrap();
            assert_eq!(lrf.variant, LrfVariant::Curvature);
            let radial = Vec3::new(p.x, p.y, 0.0).normalize();
            let circ = Vec3::new(-p.y, p.x, 0.0).normalize();
            assert!(lrf.axis(0).dot(&radial).clamp(-1.0, 1.0).acos() < 0.1);
            assert!(lrf.axis(1).dot(&circ).abs().clamp(0.0, 1.0).acos() < 0.1);
            assert_rotation(&lrf.rotation);
        }
    }

    #[test]
    fn plane_takes_fallback_everywhere() {
        let m = shapes::grid(6, 6, 1.0, 1.0)
            .estimate_normals()
            .estimate_curvature_dirs()
            .unwrap();
        for i in 0..m.vertex_count() {
            let lrf = lrf_curvature(&m, i).unwrap();
            assert_eq!(lrf.variant, LrfVariant::Shot);
            assert!(!lrf.reliable);
            assert_rotation(&lrf.rotation);
        }
    }

    #[test]
    fn all_frames_are_rotations() {
        let m = shapes::bumpy_sphere(2, 0.1, 1)
            .estimate_normals()
            .estimate_curvature_dirs()
            .unwrap();
        for variant in [LrfVariant::Shot, LrfVariant::Curvature] {
            for lrf in compute_lrfs(&m, variant, 0.5).unwrap() {
                assert_rotation(&lrf.rotation);
            }
        }
    }
}
