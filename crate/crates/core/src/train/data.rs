//! Labeled shapes: manifest loading, label files and synthetic generators.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{load_mesh, shapes, MeshFormat, TriMesh, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// A mesh with one label per vertex: a class for segmentation or a target
/// vertex on the null shape for correspondence.
#[derive(Debug, Clone)]
pub struct LabeledShape {
    pub name: String,
    pub mesh: TriMesh,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl LabeledShape {
    pub fn new(name: impl Into<String>, mesh: TriMesh, labels: Vec<usize>, split: Split) -> Result<Self> {
        let name = name.into();
        if labels.len() != mesh.vertex_count() {
            return Err(Error::invalid(format!(
                "{name}: {} labels for {} vertices",
                labels.len(),
                mesh.vertex_count()
            )));
        }
        Ok(Self {
            name,
            mesh,
            labels,
            split,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub mesh: PathBuf,
    pub labels: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Manifest {
    #[serde(rename = "shape", default)]
    pub shapes: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.span().map_or(0, |s| text[..s.start].lines().count()),
            msg: e.message().to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::invalid(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// One non-negative integer per line; blank lines are ignored.
pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected a non-negative integer label, got {:?}", l.trim()),
            })
        })
        .collect()
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let text: String = labels.iter().map(|l| format!("{l}\n")).collect();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads every shape listed in `manifest`; relative paths resolve against
/// `root`.
pub fn load_dataset(root: &Path, manifest: &Path) -> Result<Vec<LabeledShape>> {
    let m = Manifest::load(manifest)?;
    m.shapes
        .iter()
        .map(|e| {
            let mesh_path = root.join(&e.mesh);
            let label_path = root.join(&e.labels);
            let format = MeshFormat::from_path(&mesh_path).ok_or_else(|| {
                Error::invalid(format!("{}: unknown mesh extension", mesh_path.display()))
            })?;
            let mesh = load_mesh(&mesh_path, format)?;
            let labels = read_labels(&label_path)?;
            if labels.len() != mesh.vertex_count() {
                return Err(Error::invalid(format!(
                    "{}: {} labels for {} vertices in {}",
                    label_path.display(),
                    labels.len(),
                    mesh.vertex_count(),
                    mesh_path.display()
                )));
            }
            let name = mesh_path
                .file_stem()
                .map_or_else(|| mesh_path.display().to_string(), |s| s.to_string_lossy().into_owned());
            LabeledShape::new(name, mesh, labels, e.split)
        })
        .collect()
}

/// File name of the manifest inside a data root.
pub const MANIFEST_FILE: &str = "manifest.toml";

/// Loads the dataset described by `<root>/manifest.toml`.
pub fn load_root(root: &Path) -> Result<Vec<LabeledShape>> {
    let manifest = root.join(MANIFEST_FILE);
    if !manifest.is_file() {
        return Err(Error::invalid(format!(
            "no dataset manifest in {}: expected {}",
            root.display(),
            manifest.display()
        )));
    }
    let shapes = load_dataset(root, &manifest)?;
    if shapes.is_empty() {
        return Err(Error::invalid(format!("{} lists no shapes", manifest.display())));
    }
    Ok(shapes)
}

/// Writes shapes as OFF meshes plus label files and a manifest into `dir`.
pub fn write_dataset(dir: &Path, shapes: &[LabeledShape]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest::default();
    for s in shapes {
        let mesh = PathBuf::from(format!("{}.off", s.name));
        let labels = PathBuf::from(format!("{}.labels", s.name));
        crate::mesh::save_off(&s.mesh, &dir.join(&mesh))?;
        write_labels(&dir.join(&labels), &s.labels)?;
        manifest.shapes.push(ManifestEntry {
            mesh,
            labels,
            split: s.split,
        });
    }
    let path = dir.join(MANIFEST_FILE);
    manifest.save(&path)?;
    Ok(path)
}

/// Capsules (cylinder body labeled 0, hemispherical caps labeled 1) of
/// varying proportions, gently deformed. `count` shapes, the last
/// `test` of them in the test split.
pub fn capsule_dataset(count: usize, test: usize, seed: u64) -> Vec<LabeledShape> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let r = rng.random_range(0.8..1.2);
            let len = rng.random_range(1.5..2.5);
            let (mesh, labels) = shapes::capsule(r, len, 12, 3, 5);
            let mesh = shapes::deform(&mesh, 0.03, rng.random());
            let split = if i + test >= count { Split::Test } else { Split::Train };
            LabeledShape::new(format!("capsule{i:02}"), mesh, labels, split).expect("labels match")
        })
        .collect()
}

/// Hop distance of every vertex from the mesh boundary.
pub fn boundary_hops(mesh: &TriMesh) -> Vec<usize> {
    let n = mesh.vertex_count();
    let mut edge_faces = std::collections::HashMap::new();
    for f in mesh.faces() {
        for c in 0..3 {
            let (a, b) = (f[c], f[(c + 1) % 3]);
            *edge_faces.entry((a.min(b), a.max(b))).or_insert(0usize) += 1;
        }
    }
    let mut hops = vec![usize::MAX; n];
    let mut queue = std::collections::VecDeque::new();
    for (&(a, b), &count) in &edge_faces {
        if count == 1 {
            for v in [a, b] {
                if hops[v] != 0 {
                    hops[v] = 0;
                    queue.push_back(v);
                }
            }
        }
    }
    while let Some(v) = queue.pop_front() {
        for &(u, _) in mesh.neighbors(v) {
            if hops[u] == usize::MAX {
                hops[u] = hops[v] + 1;
                queue.push_back(u);
            }
        }
    }
    hops
}

/// Curved, bumpy square sheets labeled 1 within `band` hops of the border
/// and 0 inside. Training sheets keep their generated pose; test sheets are
/// randomly rotated and translated.
pub fn sheet_dataset(train: usize, test: usize, side: usize, band: usize, seed: u64) -> Vec<LabeledShape> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..train + test)
        .map(|i| {
            let size = rng.random_range(0.9..1.1);
            let grid = shapes::grid(side, side, size, size);
            let (cx, cy) = (rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8));
            let bent: Vec<Vec3> = grid
                .vertices()
                .iter()
                .map(|p| {
                    let (x, y) = (p.x - size / 2.0, p.y - size / 2.0);
                    Vec3::new(x, y, 0.5 * (cx * x * x + cy * y * y))
                })
                .collect();
            let mesh = shapes::deform(&grid.with_positions(bent).expect("same topology"), 0.02, rng.random());
            let labels = boundary_hops(&mesh).iter().map(|&h| usize::from(h < band)).collect();
            let split = if i < train { Split::Train } else { Split::Test };
            let mesh = if split == Split::Test {
                let r = shapes::random_rotation(&mut rng);
                let t = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
                mesh.rigid_transform(&r, &t)
            } else {
                mesh
            };
            LabeledShape::new(format!("sheet{i:02}"), mesh, labels, split).expect("labels match")
        })
        .collect()
}

/// Near-isometric deformations of one template with shared vertex indexing:
/// the null shape (`labels` = identity) followed by `pairs` deformed copies
/// whose ground-truth target of vertex `i` is `i`.
pub fn template_pairs(template: &TriMesh, pairs: usize, amp: f64, seed: u64) -> (LabeledShape, Vec<LabeledShape>) {
    let n = template.vertex_count();
    let id: Vec<usize> = (0..n).collect();
    let null = LabeledShape::new("null", template.clone(), id.clone(), Split::Train).expect("labels match");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sources = (0..pairs)
        .map(|i| {
            let mesh = shapes::deform(template, amp, rng.random());
            let split = if i % 4 == 3 { Split::Test } else { Split::Train };
            LabeledShape::new(format!("pair{i:02}"), mesh, id.clone(), split).expect("labels match")
        })
        .collect();
    (null, sources)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let shapes = capsule_dataset(2, 1, 3);
        let manifest = write_dataset(dir.path(), &shapes).unwrap();
        let back = load_dataset(dir.path(), &manifest).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].labels, shapes[0].labels);
        assert_eq!(back[1].split, Split::Test);
        assert_eq!(back[0].mesh.vertices(), shapes[0].mesh.vertices());
    }

    #[test]
    fn short_label_file_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let shapes = capsule_dataset(1, 0, 4);
        let manifest = write_dataset(dir.path(), &shapes).unwrap();
        let label_path = dir.path().join("capsule00.labels");
        let n = shapes[0].mesh.vertex_count();
        write_labels(&label_path, &vec![0; n - 1]).unwrap();
        let err = load_dataset(dir.path(), &manifest).unwrap_err().to_string();
        assert!(err.contains("capsule00.labels"), "{err}");
    }

    #[test]
    fn bad_label_line_is_located() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.labels");
        std::fs::write(&p, "0\n1\nfoo\n").unwrap();
        let err = read_labels(&p).unwrap_err().to_string();
        assert!(err.contains(":3:"), "{err}");
    }

    #[test]
    fn capsule_labels_split_body_and_caps() {
        for s in capsule_dataset(3, 1, 5) {
            // labels are exactly the two generated classes, both present
            assert!(s.labels.iter().all(|&l| l < 2));
            assert!(s.labels.contains(&0) && s.labels.contains(&1));
            // every cap vertex lies beyond the body's axial range
            let zs: Vec<f64> = s.mesh.vertices().iter().map(|p| p.z).collect();
            let body_lo = (0..zs.len()).filter(|&i| s.labels[i] == 0).map(|i| zs[i]).fold(f64::INFINITY, f64::min);
            let body_hi = (0..zs.len()).filter(|&i| s.labels[i] == 0).map(|i| zs[i]).fold(f64::NEG_INFINITY, f64::max);
            for i in 0..zs.len() {
                if s.labels[i] == 1 {
                    assert!(zs[i] < body_lo + 0.1 || zs[i] > body_hi - 0.1);
                }
            }
        }
    }

    #[test]
    fn sheet_band_labels() {
        let data = sheet_dataset(1, 1, 10, 2, 6);
        for s in &data {
            let ones = s.labels.iter().filter(|&&l| l == 1).count();
            assert_eq!(ones, 100 - 36);
        }
        assert_eq!(data[1].split, Split::Test);
    }

    #[test]
    fn template_pairs_share_indexing() {
        let t = shapes::torus(8, 6, 1.0, 0.3);
        let (null, pairs) = template_pairs(&t, 4, 0.05, 1);
        assert_eq!(null.labels, (0..48).collect::<Vec<_>>());
        assert!(pairs.iter().all(|p| p.mesh.faces() == t.faces()));
        assert_eq!(pairs[3].split, Split::Test);
    }
}
