//! Triangle meshes and per-vertex differential geometry.
//!
//! A [`TriMesh`] is built once from raw positions and faces, then enriched by
//! [`TriMesh::estimate_normals`] and [`TriMesh::estimate_curvature_dirs`]. After
//! that it is only read, so it can be shared across worker threads.

mod curvature;
mod io;
pub mod shapes;

use nalgebra::{Matrix3, Vector3};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use curvature::{CurvatureSample, UMBILIC_TOL};
pub use io::{load_mesh, load_obj, load_off, parse_obj, parse_off, save_off, MeshFormat};

pub type Vec3 = Vector3<f64>;

/// Undirected mesh edge with `a < b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub length: f64,
}

#[derive(Debug, Clone)]
pub struct TriMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    normals: Vec<Vec3>,
    curvature: Vec<CurvatureSample>,
    /// Sorted neighbor lists, each entry paired with the edge length.
    adjacency: Vec<Vec<(usize, f64)>>,
    edges: Vec<Edge>,
    isolated: Vec<bool>,
    non_manifold: Vec<bool>,
}

impl TriMesh {
    /// Builds connectivity for a raw triangle soup. Normals and curvature
    /// directions stay unset until estimated.
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        for (fi, f) in faces.iter().enumerate() {
            if let Some(&bad) = f.iter().find(|&&v| v >= n) {
                return Err(Error::invalid(format!(
                    "face {fi} references vertex {bad} but mesh has {n} vertices"
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::invalid(format!("face {fi} is degenerate: {f:?}")));
            }
        }
        if let Some(i) = vertices.iter().position(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::invalid(format!("vertex {i} has a non-finite coordinate")));
        }

        let mut edge_faces: std::collections::BTreeMap<(usize, usize), usize> =
            std::collections::BTreeMap::new();
        for f in &faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *edge_faces.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }

        let mut adjacency = vec![Vec::new(); n];
        let mut edges = Vec::with_capacity(edge_faces.len());
        let mut non_manifold = vec![false; n];
        for (&(a, b), &count) in &edge_faces {
            let length = (vertices[a] - vertices[b]).norm();
            edges.push(Edge { a, b, length });
            adjacency[a].push((b, length));
            adjacency[b].push((a, length));
            if count > 2 {
                non_manifold[a] = true;
                non_manifold[b] = true;
            }
        }
        for list in &mut adjacency {
            list.sort_by_key(|&(j, _)| j);
        }
        let isolated = adjacency.iter().map(|a| a.is_empty()).collect();

        Ok(Self {
            vertices,
            faces,
            normals: Vec::new(),
            curvature: Vec::new(),
            adjacency,
            edges,
            isolated,
            non_manifold,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn vertex(&self, i: usize) -> Vec3 {
        self.vertices[i]
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Neighbors of `i` with edge lengths, sorted by neighbor index.
    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.adjacency[i]
    }

    pub fn has_normals(&self) -> bool {
        !self.normals.is_empty()
    }

    pub fn has_curvature(&self) -> bool {
        !self.curvature.is_empty()
    }

    /// Per-vertex unit normals; empty before [`Self::estimate_normals`].
    pub fn normals(&self) -> &[Vec3] {
        &self.normals
    }

    pub fn normal(&self, i: usize) -> Vec3 {
        self.normals[i]
    }

    pub fn curvature(&self) -> &[CurvatureSample] {
        &self.curvature
    }

    pub fn is_isolated(&self, i: usize) -> bool {
        self.isolated[i]
    }

    pub fn is_non_manifold(&self, i: usize) -> bool {
        self.non_manifold[i]
    }

    /// Whether `i` may anchor a patch: it has incident faces and touches no
    /// non-manifold edge.
    pub fn is_patch_center(&self, i: usize) -> bool {
        !self.isolated[i] && !self.non_manifold[i]
    }

    pub fn patch_centers(&self) -> Vec<usize> {
        (0..self.vertex_count())
            .filter(|&i| self.is_patch_center(i))
            .collect()
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.faces[f];
        0.5 * (self.vertices[b] - self.vertices[a])
            .cross(&(self.vertices[c] - self.vertices[a]))
            .norm()
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Vertices reachable in at most two edge hops, excluding `i`, sorted.
    pub fn two_ring(&self, i: usize) -> Vec<usize> {
        let mut ring: Vec<usize> = self.adjacency[i]
            .iter()
            .flat_map(|&(j, _)| {
                std::iter::once(j).chain(self.adjacency[j].iter().map(|&(k, _)| k))
            })
            .filter(|&k| k != i)
            .collect();
        ring.sort_unstable();
        ring.dedup();
        ring
    }

    /// Area-weighted vertex normals following face winding. Isolated vertices
    /// get the zero vector and stay excluded from patch centers.
    pub fn estimate_normals(mut self) -> Self {
        let mut acc = vec![Vec3::zeros(); self.vertices.len()];
        for &[a, b, c] in &self.faces {
            // |cross| is twice the face area, which is the weight we want
            let fnormal =
                (self.vertices[b] - self.vertices[a]).cross(&(self.vertices[c] - self.vertices[a]));
            acc[a] += fnormal;
            acc[b] += fnormal;
            acc[c] += fnormal;
        }
        for (i, n) in acc.iter_mut().enumerate() {
            let len = n.norm();
            if self.isolated[i] || len == 0.0 {
                if !self.isolated[i] {
                    log::warn!("vertex {i}: incident face normals cancel; normal set to zero");
                    self.isolated[i] = true;
                }
                *n = Vec3::zeros();
            } else {
                *n /= len;
            }
        }
        self.normals = acc;
        self
    }

    /// Maximum-curvature directions from a quadric fit over each 2-ring.
    pub fn estimate_curvature_dirs(mut self) -> Result<Self> {
        if !self.has_normals() {
            return Err(Error::invalid("curvature estimation requires normals"));
        }
        self.curvature = curvature::estimate(&self);
        Ok(self)
    }

    /// Installs previously computed normals (e.g. from a cache).
    pub fn with_normals(mut self, normals: Vec<Vec3>) -> Result<Self> {
        if normals.len() != self.vertices.len() {
            return Err(Error::invalid("normal count does not match vertex count"));
        }
        self.normals = normals;
        Ok(self)
    }

    /// Installs previously computed curvature samples (e.g. from a cache).
    pub fn with_curvature(mut self, curvature: Vec<CurvatureSample>) -> Result<Self> {
        if curvature.len() != self.vertices.len() || !self.has_normals() {
            return Err(Error::invalid("curvature needs normals and one sample per vertex"));
        }
        self.curvature = curvature;
        Ok(self)
    }

    /// Copy of the raw geometry under `x -> rotation * x + translation`.
    /// Derived per-vertex fields are dropped and must be re-estimated.
    pub fn rigid_transform(&self, rotation: &Matrix3<f64>, translation: &Vec3) -> TriMesh {
        let vertices = self
            .vertices
            .iter()
            .map(|v| rotation * v + translation)
            .collect();
        TriMesh::new(vertices, self.faces.clone()).expect("topology unchanged")
    }

    /// Copy with the same faces and new positions.
    pub fn with_positions(&self, vertices: Vec<Vec3>) -> Result<TriMesh> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::invalid("vertex count changed"));
        }
        TriMesh::new(vertices, self.faces.clone())
    }

    /// SHA-256 over vertex coordinates and face indices, little-endian.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.vertices.len() as u64).to_le_bytes());
        for v in &self.vertices {
            for c in v.iter() {
                h.update(c.to_le_bytes());
            }
        }
        h.update((self.faces.len() as u64).to_le_bytes());
        for f in &self.faces {
            for &i in f {
                h.update((i as u64).to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::shapes;

    #[test]
    fn tetrahedron_connectivity() {
        let m = shapes::tetrahedron();
        assert_eq!(m.vertex_count(), 4);
        assert_eq!(m.face_count(), 4);
        for i in 0..4 {
            assert_eq!(m.neighbors(i).len(), 3);
        }
        assert_eq!(m.edges().len(), 6);
    }

    #[test]
    fn adjacency_is_symmetric() {
        let m = shapes::icosphere(2);
        for i in 0..m.vertex_count() {
            for &(j, l) in m.neighbors(i) {
                assert!(m.neighbors(j).iter().any(|&(k, l2)| k == i && l2 == l));
            }
        }
    }

    #[test]
    fn rejects_bad_faces() {
        let v = vec![Vec3::zeros(), Vec3::x(), Vec3::y()];
        assert!(TriMesh::new(v.clone(), vec![[0, 1, 3]]).is_err());
        assert!(TriMesh::new(v, vec![[0, 1, 1]]).is_err());
    }

    #[test]
    fn planar_grid_normals_point_up() {
        let m = shapes::grid(5, 4, 1.0, 1.0).estimate_normals();
        for n in m.normals() {
            assert!((n - Vec3::z()).norm() < 1e-12);
        }
    }

    #[test]
    fn tetrahedron_apex_normal_is_area_weighted_sum() {
        let m = shapes::tetrahedron().estimate_normals();
        // hand computation: sum the cross products of the three faces around vertex 3
        let v = m.vertices();
        let mut expected = Vec3::zeros();
        for f in m.faces() {
            if f.contains(&3) {
                expected += (v[f[1]] - v[f[0]]).cross(&(v[f[2]] - v[f[0]]));
            }
        }
        let expected = expected.normalize();
        assert!((m.normal(3) - expected).norm() < 1e-12);
    }

    #[test]
    fn isolated_vertex_gets_zero_normal() {
        let v = vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::new(5.0, 5.0, 5.0)];
        let m = TriMesh::new(v, vec![[0, 1, 2]]).unwrap().estimate_normals();
        assert_eq!(m.normal(3), Vec3::zeros());
        assert!(!m.is_patch_center(3));
        assert!(m.is_patch_center(0));
    }

    #[test]
    fn non_manifold_edge_excludes_vertices() {
        let v = vec![
            Vec3::zeros(),
            Vec3::x(),
            Vec3::y(),
            Vec3::new(0.0, -1.0, 0.0),
            Vec3::z(),
        ];
        let m = TriMesh::new(v, vec![[0, 1, 2], [1, 0, 3], [0, 1, 4]]).unwrap();
        assert!(m.is_non_manifold(0) && m.is_non_manifold(1));
        assert!(!m.is_patch_center(0));
        assert!(m.is_patch_center(2));
    }

    #[test]
    fn sphere_normal_error_shrinks_with_subdivision() {
        use rand::{Rng, SeedableRng};
        // jittered tessellations of the exact sphere, so symmetry cannot hide the error
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut prev = f64::INFINITY;
        for level in 1..=3 {
            let base = shapes::icosphere(level);
            let h = 0.3 * base.edges()[0].length;
            let v = base
                .vertices()
                .iter()
                .map(|p| {
                    let j = Vec3::new(rng.random(), rng.random(), rng.random()) * h;
                    (p + j).normalize()
                })
                .collect();
            let m = base.with_positions(v).unwrap().estimate_normals();
            let mean = m
                .vertices()
                .iter()
                .zip(m.normals())
                .map(|(p, n)| p.dot(n).clamp(-1.0, 1.0).acos())
                .sum::<f64>()
                / m.vertex_count() as f64;
            assert!(mean < prev, "level {level}: {mean} >= {prev}");
            prev = mean;
        }
    }

    #[test]
    fn icosphere_normals_match_positions() {
        let m = shapes::icosphere(2).estimate_normals();
        for (p, n) in m.vertices().iter().zip(m.normals()) {
            assert!(p.normalize().dot(n).clamp(-1.0, 1.0).acos() < 0.05);
        }
    }
}
