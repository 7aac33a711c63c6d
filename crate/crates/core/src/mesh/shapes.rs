//! Procedural meshes used by tests, examples and the synthetic datasets.

use std::collections::HashMap;

use nalgebra::{Matrix3, Rotation3, Unit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{TriMesh, Vec3};

pub fn tetrahedron() -> TriMesh {
    let v = vec![
        Vec3::new(0.0, 0.0, 0.0),
        Vec3::new(1.0, 0.0, 0.0),
        Vec3::new(0.0, 1.0, 0.0),
        Vec3::new(0.2, 0.3, 1.0),
    ];
    TriMesh::new(v, vec![[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 3, 2]]).expect("valid")
}

/// `nx * ny` vertex grid in the z=0 plane spanning `[0, sx] x [0, sy]`,
/// counter-clockwise seen from +z.
pub fn grid(nx: usize, ny: usize, sx: f64, sy: f64) -> TriMesh {
    assert!(nx >= 2 && ny >= 2);
    let mut v = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            v.push(Vec3::new(
                sx * i as f64 / (nx - 1) as f64,
                sy * j as f64 / (ny - 1) as f64,
                0.0,
            ));
        }
    }
    let mut f = Vec::new();
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let a = j * nx + i;
            let (b, c, d) = (a + 1, a + nx + 1, a + nx);
            // alternate the diagonal so the grid has no preferred direction
            if (i + j) % 2 == 0 {
                f.push([a, b, c]);
                f.push([a, c, d]);
            } else {
                f.push([a, b, d]);
                f.push([b, c, d]);
            }
        }
    }
    TriMesh::new(v, f).expect("valid")
}

/// Unit icosphere: `10 * 4^level + 2` vertices, `20 * 4^level` faces.
pub fn icosphere(level: usize) -> TriMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut v: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut f: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..level {
        let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, v: &mut Vec<Vec3>| -> usize {
            *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                v.push(((v[a] + v[b]) * 0.5).normalize());
                v.len() - 1
            })
        };
        let mut next = Vec::with_capacity(f.len() * 4);
        for &[a, b, c] in &f {
            let ab = midpoint(a, b, &mut v);
            let bc = midpoint(b, c, &mut v);
            let ca = midpoint(c, a, &mut v);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        f = next;
    }
    TriMesh::new(v, f).expect("valid")
}

/// Open tube around the z axis from z=0 to z=`height`, outward winding.
pub fn cylinder(radius: f64, height: f64, around: usize, along: usize) -> TriMesh {
    let mut v = Vec::with_capacity(around * along);
    for j in 0..along {
        let z = height * j as f64 / (along - 1) as f64;
        // stagger alternate rings for a more isotropic triangulation
        let shift = if j % 2 == 0 { 0.0 } else { 0.5 };
        for i in 0..around {
            let th = std::f64::consts::TAU * (i as f64 + shift) / around as f64;
            v.push(Vec3::new(radius * th.cos(), radius * th.sin(), z));
        }
    }
    let f = ring_strip_faces(around, along, |j, i| j * around + i);
    TriMesh::new(v, f).expect("valid")
}

fn ring_strip_faces(
    around: usize,
    rings: usize,
    idx: impl Fn(usize, usize) -> usize,
) -> Vec<[usize; 3]> {
    let mut f = Vec::new();
    for j in 0..rings - 1 {
        for i in 0..around {
            let i1 = (i + 1) % around;
            let (a, b) = (idx(j, i), idx(j, i1));
            let (c, d) = (idx(j + 1, i1), idx(j + 1, i));
            if j % 2 == 0 {
                f.push([a, b, d]);
                f.push([b, c, d]);
            } else {
                f.push([a, b, c]);
                f.push([a, c, d]);
            }
        }
    }
    f
}

/// Closed surface of revolution about z. `profile` lists `(radius, z)` for the
/// interior rings from bottom to top; poles are added at `z_bottom` / `z_top`.
pub fn revolution(profile: &[(f64, f64)], z_bottom: f64, z_top: f64, around: usize) -> TriMesh {
    let rings = profile.len();
    let mut v = Vec::with_capacity(rings * around + 2);
    v.push(Vec3::new(0.0, 0.0, z_bottom));
    for (j, &(r, z)) in profile.iter().enumerate() {
        let shift = if j % 2 == 0 { 0.0 } else { 0.5 };
        for i in 0..around {
            let th = std::f64::consts::TAU * (i as f64 + shift) / around as f64;
            v.push(Vec3::new(r * th.cos(), r * th.sin(), z));
        }
    }
    v.push(Vec3::new(0.0, 0.0, z_top));
    let top = v.len() - 1;
    let idx = |j: usize, i: usize| 1 + j * around + i;
    let mut f = Vec::new();
    for i in 0..around {
        f.push([0, idx(0, (i + 1) % around), idx(0, i)]);
    }
    f.extend(ring_strip_faces(around, rings, idx));
    for i in 0..around {
        f.push([top, idx(rings - 1, i), idx(rings - 1, (i + 1) % around)]);
    }
    TriMesh::new(v, f).expect("valid")
}

/// Capsule of radius `r`: a cylinder of length `len` capped by hemispheres.
/// Returns the mesh and per-vertex labels (0 = cylinder, 1 = caps).
pub fn capsule(r: f64, len: f64, around: usize, cap_rings: usize, body_rings: usize) -> (TriMesh, Vec<usize>) {
    let mut profile = Vec::new();
    for k in 1..=cap_rings {
        let phi = std::f64::consts::FRAC_PI_2 * k as f64 / (cap_rings + 1) as f64;
        profile.push((r * phi.sin(), -r * phi.cos()));
    }
    for k in 0..body_rings {
        profile.push((r, len * k as f64 / (body_rings - 1) as f64));
    }
    for k in (1..=cap_rings).rev() {
        let phi = std::f64::consts::FRAC_PI_2 * k as f64 / (cap_rings + 1) as f64;
        profile.push((r * phi.sin(), len + r * phi.cos()));
    }
    let mesh = revolution(&profile, -r, len + r, around);
    let labels = mesh
        .vertices()
        .iter()
        .map(|p| usize::from(p.z < -1e-9 || p.z > len + 1e-9))
        .collect();
    (mesh, labels)
}

/// Torus around the z axis with `nu * nv` vertices.
pub fn torus(nu: usize, nv: usize, major: f64, minor: f64) -> TriMesh {
    let mut v = Vec::with_capacity(nu * nv);
    for i in 0..nu {
        let u = std::f64::consts::TAU * i as f64 / nu as f64;
        for j in 0..nv {
            let w = std::f64::consts::TAU * j as f64 / nv as f64;
            let rr = major + minor * w.cos();
            v.push(Vec3::new(rr * u.cos(), rr * u.sin(), minor * w.sin()));
        }
    }
    let id = |i: usize, j: usize| (i % nu) * nv + (j % nv);
    let mut f = Vec::new();
    for i in 0..nu {
        for j in 0..nv {
            f.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
            f.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
        }
    }
    TriMesh::new(v, f).expect("valid")
}

/// Smooth random displacement field: a sum of `terms` sinusoids with random
/// directions, frequencies and phases, scaled to amplitude `amp`.
pub fn deform(mesh: &TriMesh, amp: f64, seed: u64) -> TriMesh {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let terms: Vec<(Vec3, Vec3, f64)> = (0..6)
        .map(|_| {
            let dir = random_unit(&mut rng);
            let wave = random_unit(&mut rng) * rng.random_range(1.0..3.0);
            (dir, wave, rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let v = mesh
        .vertices()
        .iter()
        .map(|p| {
            let d: Vec3 = terms
                .iter()
                .map(|(dir, wave, ph)| dir * (wave.dot(p) + ph).sin())
                .sum();
            p + d * (amp / terms.len() as f64).max(0.0) * 2.0
        })
        .collect();
    mesh.with_positions(v).expect("same topology")
}

/// Icosphere with an anisotropic scale and smooth bumps, so that no vertex is
/// umbilic and no neighborhood is symmetric.
pub fn bumpy_sphere(level: usize, amp: f64, seed: u64) -> TriMesh {
    let base = icosphere(level);
    let v = base
        .vertices()
        .iter()
        .map(|p| Vec3::new(1.3 * p.x, p.y, 0.8 * p.z))
        .collect();
    deform(&base.with_positions(v).expect("same topology"), amp, seed)
}

pub fn random_unit(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Uniformly distributed rotation (random axis, angle from the Haar measure).
pub fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
    // Shoemake's subgroup algorithm
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let q = nalgebra::Quaternion::new(
        (1.0 - u1).sqrt() * (std::f64::consts::TAU * u2).sin(),
        (1.0 - u1).sqrt() * (std::f64::consts::TAU * u2).cos(),
        u1.sqrt() * (std::f64::consts::TAU * u3).sin(),
        u1.sqrt() * (std::f64::consts::TAU * u3).cos(),
    );
    nalgebra::UnitQuaternion::from_quaternion(q)
        .to_rotation_matrix()
        .into_inner()
}

pub fn rotation_about(axis: Vec3, angle: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn icosphere_counts() {
        for level in 0..4 {
            let m = icosphere(level);
            assert_eq!(m.vertex_count(), 10 * 4usize.pow(level as u32) + 2);
            assert_eq!(m.face_count(), 20 * 4usize.pow(level as u32));
        }
    }

    #[test]
    fn closed_shapes_have_outward_normals() {
        let (capsule, labels) = capsule(0.5, 1.0, 10, 3, 4);
        assert_eq!(labels.len(), capsule.vertex_count());
        for m in [icosphere(2), capsule, torus(12, 8, 1.0, 0.3)] {
            let centroid: Vec3 =
                m.vertices().iter().sum::<Vec3>() / m.vertex_count() as f64;
            let signed_volume: f64 = m
                .faces()
                .iter()
                .map(|&[a, b, c]| {
                    let (pa, pb, pc) = (m.vertex(a) - centroid, m.vertex(b) - centroid, m.vertex(c) - centroid);
                    pa.dot(&pb.cross(&pc))
                })
                .sum();
            assert!(signed_volume > 0.0);
        }
    }

    #[test]
    fn random_rotations_are_proper() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let r = random_rotation(&mut rng);
            assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-12);
            assert!((r.determinant() - 1.0).abs() < 1e-12);
        }
    }
}
