//! LRF-aligned local patches.
//!
//! A patch around vertex `i` holds, for each of its `K` FPS-selected members
//! `j`, the offset `x_j - x_i` and the normal `n_j` expressed in the basis of
//! the frame at `i`, plus the raw geodesic distance `d(i, j)`. Expressing
//! vectors in the frame basis (applying `R^T`) is what makes the patch
//! invariant to rigid motions of the mesh.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geodesy::{self, NeighborhoodSample};
use crate::lrf::{self, Lrf, LrfVariant};
use crate::mesh::{TriMesh, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPatch {
    pub center: usize,
    pub coords: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub geodesics: Vec<f64>,
    pub member_indices: Vec<usize>,
}

impl AlignedPatch {
    pub fn len(&self) -> usize {
        self.member_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_indices.is_empty()
    }

    /// The 7-dimensional record `[v, n, g]` of member `j`.
    pub fn record(&self, j: usize) -> [f64; 7] {
        let (v, n) = (self.coords[j], self.normals[j]);
        [v.x, v.y, v.z, n.x, n.y, n.z, self.geodesics[j]]
    }
}

/// Patch radius for a layer: the base radius scaled by the layer factor and
/// by the square root of the total surface area.
pub fn layer_radius(base_radius: f64, scale: f64, surface_area: f64) -> f64 {
    base_radius * scale * surface_area.sqrt()
}

/// Re-expresses a neighborhood sample in the basis of `lrf`.
pub fn align(mesh: &TriMesh, sample: &NeighborhoodSample, lrf: &Lrf) -> AlignedPatch {
    let origin = mesh.vertex(sample.center);
    let rt = lrf.rotation.transpose();
    let has_normals = mesh.has_normals();
    AlignedPatch {
        center: sample.center,
        coords: sample
            .members
            .iter()
            .map(|&j| rt * (mesh.vertex(j) - origin))
            .collect(),
        normals: sample
            .members
            .iter()
            .map(|&j| {
                if has_normals {
                    rt * mesh.normal(j)
                } else {
                    Vec3::zeros()
                }
            })
            .collect(),
        geodesics: sample.geodesics.clone(),
        member_indices: sample.members.clone(),
    }
}

/// Geodesic ball, FPS down to `k` members seeded at the center, then
/// alignment by `lrf`.
pub fn build_patch(mesh: &TriMesh, center: usize, tau: f64, k: usize, lrf: &Lrf) -> Result<AlignedPatch> {
    if k == 0 {
        return Err(Error::invalid("patch size K must be at least 1"));
    }
    let sample = geodesy::sample_neighborhood(mesh, center, tau, k)?;
    Ok(align(mesh, &sample, lrf))
}

/// Neighborhood samples and frames for every vertex at one `(tau, K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTable {
    pub tau: f64,
    pub k: usize,
    pub variant: LrfVariant,
    pub samples: Vec<NeighborhoodSample>,
    pub lrfs: Vec<Lrf>,
}

impl PatchTable {
    /// Builds samples and frames for all vertices in parallel. For the SHOT
    /// variant the frame support radius equals `tau`.
    pub fn build(mesh: &TriMesh, tau: f64, k: usize, variant: LrfVariant) -> Result<Self> {
        if !mesh.has_normals() {
            return Err(Error::invalid("patch tables need vertex normals"));
        }
        if k == 0 {
            return Err(Error::invalid("patch size K must be at least 1"));
        }
        let lrfs = lrf::compute_lrfs(mesh, variant, tau)?;
        let samples = (0..mesh.vertex_count())
            .into_par_iter()
            .map(|i| geodesy::sample_neighborhood(mesh, i, tau, k))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            tau,
            k,
            variant,
            samples,
            lrfs,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Aligned patch at `i`; with `use_lrf = false` the world axes are used.
    pub fn patch(&self, mesh: &TriMesh, i: usize, use_lrf: bool) -> AlignedPatch {
        let frame = if use_lrf {
            self.lrfs[i]
        } else {
            Lrf::identity(self.variant)
        };
        align(mesh, &self.samples[i], &frame)
    }

    pub fn patches(&self, mesh: &TriMesh, use_lrf: bool) -> Vec<AlignedPatch> {
        (0..self.len()).map(|i| self.patch(mesh, i, use_lrf)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::shapes;
    use nalgebra::Matrix3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn center_entry_is_origin() {
        let m = shapes::bumpy_sphere(2, 0.1, 2).estimate_normals();
        let table = PatchTable::build(&m, 0.5, 8, LrfVariant::Shot).unwrap();
        for i in [0, 10, 100] {
            let p = table.patch(&m, i, true);
            assert_eq!(p.member_indices[0], i);
            assert_eq!(p.coords[0], Vec3::zeros());
            assert_eq!(p.geodesics[0], 0.0);
            assert!((p.normals[0] - table.lrfs[i].to_local(&m.normal(i))).norm() < 1e-15);
            assert!(p.normals.iter().all(|n| (n.norm() - 1.0).abs() < 1e-6));
            assert!(p.geodesics.iter().all(|&g| g >= 0.0));
        }
    }

    #[test]
    fn planar_grid_with_identity_frame() {
        let m = shapes::grid(5, 5, 4.0, 4.0).estimate_normals();
        let center = 12; // (2, 2)
        let p = build_patch(&m, center, 1.01, 5, &Lrf::identity(LrfVariant::Shot)).unwrap();
        let right = p
            .member_indices
            .iter()
            .position(|&j| j == 13)
            .expect("neighbor at +x is inside the ball");
        assert_eq!(p.coords[right], Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(p.normals[right], Vec3::z());
        assert_eq!(p.geodesics[right], 1.0);
    }

    #[test]
    fn singleton_ball_is_padded_with_the_center() {
        let m = shapes::grid(4, 4, 3.0, 3.0).estimate_normals();
        let p = build_patch(&m, 5, 0.5, 4, &Lrf::identity(LrfVariant::Shot)).unwrap();
        assert_eq!(p.member_indices, vec![5; 4]);
        assert!(p.coords.iter().all(|c| *c == Vec3::zeros()));
    }

    #[test]
    fn patches_are_rigidly_invariant() {
        let mesh = shapes::bumpy_sphere(2, 0.12, 4);
        let base = mesh.estimate_normals().estimate_curvature_dirs().unwrap();
        let tau = 0.6;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for variant in [LrfVariant::Curvature, LrfVariant::Shot] {
            let table = PatchTable::build(&base, tau, 10, variant).unwrap();
            let strict: Vec<usize> = (0..base.vertex_count())
                .filter(|&i| table.lrfs[i].is_strict())
                .collect();
            assert!(strict.len() >= 15, "{variant:?}: {} strict", strict.len());
            for _ in 0..10 {
                let r: Matrix3<f64> = shapes::random_rotation(&mut rng);
                let t = Vec3::new(rng.random(), rng.random(), rng.random()) * 5.0;
                let moved = base
                    .rigid_transform(&r, &t)
                    .estimate_normals()
                    .estimate_curvature_dirs()
                    .unwrap();
                let table2 = PatchTable::build(&moved, tau, 10, variant).unwrap();
                for &i in &strict {
                    let (a, b) = (table.patch(&base, i, true), table2.patch(&moved, i, true));
                    assert_eq!(a.member_indices, b.member_indices);
                    for j in 0..a.len() {
                        assert!((a.coords[j] - b.coords[j]).abs().max() < 1e-6);
                        assert!((a.normals[j] - b.normals[j]).abs().max() < 1e-6);
                        assert!((a.geodesics[j] - b.geodesics[j]).abs() < 1e-6);
                    }
                }
            }
        }
    }
}
