//! On-disk caches for derived per-mesh data.
//!
//! Every entry is one file: a fixed header (magic, format version, entry
//! kind, the key it was built for, payload length and SHA-256) followed by the
//! payload. The key hashes the mesh contents together with every parameter
//! the entry depends on, so a changed mesh or spec simply misses. A file
//! whose header or checksum does not verify is rebuilt in place.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::Matrix3;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geodesy::NeighborhoodSample;
use crate::lrf::{Lrf, LrfVariant};
use crate::mesh::{CurvatureSample, TriMesh, Vec3};
use crate::netarch::{MeshPatches, ModelSpec};
use crate::patch::{layer_radius, PatchTable};
use crate::spectral::{self, SpectralBasis};
use crate::tensor::Tensor;
use crate::train::{LabeledShape, MatchShape, Prepared};

pub const CACHE_MAGIC: [u8; 8] = *b"GEOCACHE";
pub const CACHE_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 1 + 32 + 8 + 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum EntryKind {
    Geometry = 1,
    Patches = 2,
    Spectral = 3,
    Distances = 4,
}

impl EntryKind {
    fn extension(self) -> &'static str {
        match self {
            EntryKind::Geometry => "geom",
            EntryKind::Patches => "patch",
            EntryKind::Spectral => "spec",
            EntryKind::Distances => "dist",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CacheStats {
    pub hits: usize,
    pub misses: usize,
    /// Entries that existed but failed verification.
    pub rebuilt: usize,
}

#[derive(Default)]
struct Counters {
    hits: AtomicUsize,
    misses: AtomicUsize,
    rebuilt: AtomicUsize,
}

pub struct Cache {
    dir: PathBuf,
    counters: Counters,
}

#[derive(Default)]
pub(crate) struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn vec3(&mut self, v: &Vec3) {
        v.iter().for_each(|&c| self.f64(c));
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::invalid("cache payload truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()? as usize;
        // every element occupies at least one byte
        if n > self.buf.len() - self.pos {
            return Err(Error::invalid("cache length field out of range"));
        }
        Ok(n)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn vec3(&mut self) -> Result<Vec3> {
        Ok(Vec3::new(self.f64()?, self.f64()?, self.f64()?))
    }
    fn finish(&self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(Error::invalid("trailing bytes in cache payload"))
        }
    }
}

fn key(mesh: &TriMesh, kind: EntryKind, params: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(mesh.content_hash());
    h.update([kind as u8]);
    h.update(params);
    h.finalize().into()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Cache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir,
            counters: Counters::default(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.counters.hits.load(Ordering::Relaxed),
            misses: self.counters.misses.load(Ordering::Relaxed),
            rebuilt: self.counters.rebuilt.load(Ordering::Relaxed),
        }
    }

    pub fn path_for(&self, kind: EntryKind, key: &[u8; 32]) -> PathBuf {
        self.dir.join(format!("{}.{}", hex(&key[..16]), kind.extension()))
    }

    fn read_entry(&self, path: &Path, kind: EntryKind, key: &[u8; 32]) -> std::result::Result<Vec<u8>, String> {
        let buf = std::fs::read(path).map_err(|e| e.to_string())?;
        if buf.len() < HEADER_LEN {
            return Err("short header".into());
        }
        let mut r = Reader::new(&buf);
        let bad = |m: &str| m.to_string();
        if r.take(8).map_err(|e| e.to_string())? != CACHE_MAGIC {
            return Err(bad("bad magic"));
        }
        if r.u32().map_err(|e| e.to_string())? != CACHE_VERSION {
            return Err(bad("format version changed"));
        }
        if r.u8().map_err(|e| e.to_string())? != kind as u8 {
            return Err(bad("wrong entry kind"));
        }
        if r.take(32).map_err(|e| e.to_string())? != key {
            return Err(bad("key mismatch"));
        }
        let len = r.u64().map_err(|e| e.to_string())? as usize;
        let sum = r.take(32).map_err(|e| e.to_string())?.to_vec();
        let payload = &buf[HEADER_LEN..];
        if payload.len() != len {
            return Err(bad("payload length mismatch"));
        }
        if Sha256::digest(payload).as_slice() != sum.as_slice() {
            return Err(bad("checksum mismatch"));
        }
        Ok(payload.to_vec())
    }

    fn write_entry(&self, path: &Path, kind: EntryKind, key: &[u8; 32], payload: &[u8]) -> Result<()> {
        let mut buf = Vec::with_capacity(HEADER_LEN + payload.len());
        buf.extend_from_slice(&CACHE_MAGIC);
        buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        buf.push(kind as u8);
        buf.extend_from_slice(key);
        buf.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        buf.extend_from_slice(&Sha256::digest(payload));
        buf.extend_from_slice(payload);
        // write-then-rename so a crash never leaves a half-written entry
        // under the final name
        let tmp = path.with_extension(format!("{}.tmp{}", kind.extension(), std::process::id()));
        std::fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    fn get_or_build<T>(
        &self,
        kind: EntryKind,
        key: [u8; 32],
        encode: impl Fn(&T) -> Vec<u8>,
        decode: impl Fn(&[u8]) -> Result<T>,
        build: impl FnOnce() -> Result<T>,
    ) -> Result<T> {
        let path = self.path_for(kind, &key);
        if path.exists() {
            match self.read_entry(&path, kind, &key).map_err(Error::Invalid).and_then(|p| decode(&p)) {
                Ok(v) => {
                    self.counters.hits.fetch_add(1, Ordering::Relaxed);
                    log::debug!("cache hit {}", path.display());
                    return Ok(v);
                }
                Err(e) => {
                    self.counters.rebuilt.fetch_add(1, Ordering::Relaxed);
                    log::warn!("cache entry {} is invalid ({e}); rebuilding", path.display());
                }
            }
        } else {
            self.counters.misses.fetch_add(1, Ordering::Relaxed);
            log::debug!("cache miss {}", path.display());
        }
        let value = build()?;
        self.write_entry(&path, kind, &key, &encode(&value))?;
        Ok(value)
    }

    /// `mesh` with normals and curvature directions.
    pub fn geometry(&self, mesh: &TriMesh) -> Result<TriMesh> {
        let (normals, curvature) = self.get_or_build(
            EntryKind::Geometry,
            key(mesh, EntryKind::Geometry, &[]),
            |(n, c): &(Vec<Vec3>, Vec<CurvatureSample>)| encode_geometry(n, c),
            |b| decode_geometry(b, mesh.vertex_count()),
            || {
                let m = crate::train::prepare_mesh(mesh)?;
                Ok((m.normals().to_vec(), m.curvature().to_vec()))
            },
        )?;
        mesh.clone().with_normals(normals)?.with_curvature(curvature)
    }

    /// Patch table of a mesh that already carries normals (and curvature
    /// directions for the curvature frame).
    pub fn patch_table(&self, mesh: &TriMesh, tau: f64, k: usize, variant: LrfVariant) -> Result<PatchTable> {
        let mut params = Writer::default();
        params.f64(tau);
        params.u64(k as u64);
        params.u8(variant.to_byte());
        self.get_or_build(
            EntryKind::Patches,
            key(mesh, EntryKind::Patches, &params.0),
            encode_table,
            |b| decode_table(b, mesh.vertex_count()),
            || PatchTable::build(mesh, tau, k, variant),
        )
    }

    pub fn mesh_patches(&self, mesh: &TriMesh, spec: &ModelSpec) -> Result<MeshPatches> {
        let area = mesh.surface_area();
        let (keys, _) = spec.patch_keys();
        let tables = keys
            .iter()
            .map(|&(k, scale)| self.patch_table(mesh, layer_radius(spec.base_radius, scale, area), k, spec.lrf_variant))
            .collect::<Result<Vec<_>>>()?;
        Ok(MeshPatches { tables })
    }

    pub fn spectral(&self, mesh: &TriMesh, k: usize) -> Result<SpectralBasis> {
        self.get_or_build(
            EntryKind::Spectral,
            key(mesh, EntryKind::Spectral, &(k as u64).to_le_bytes()),
            encode_basis,
            decode_basis,
            || spectral::laplacian_basis(mesh, k),
        )
    }

    /// All-pairs graph geodesics, row-major `N x N`.
    pub fn distances(&self, mesh: &TriMesh) -> Result<Vec<f64>> {
        let n = mesh.vertex_count();
        self.get_or_build(
            EntryKind::Distances,
            key(mesh, EntryKind::Distances, &[]),
            |d: &Vec<f64>| {
                let mut w = Writer::default();
                d.iter().for_each(|&v| w.f64(v));
                w.0
            },
            |b| {
                if b.len() != n * n * 8 {
                    return Err(Error::invalid("distance matrix has the wrong size"));
                }
                Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
            },
            || Ok(crate::geodesy::all_pairs(mesh)),
        )
    }
}

impl Cache {
    /// [`Prepared::build`] through the cache.
    pub fn prepared(&self, shape: &LabeledShape, spec: &ModelSpec) -> Result<Prepared> {
        let mesh = self.geometry(&shape.mesh)?;
        let patches = self.mesh_patches(&mesh, spec)?;
        Prepared::new(shape, mesh, &patches, spec)
    }

    /// [`MatchShape::new`] through the cache.
    pub fn match_shape(&self, prepared: Prepared, k: usize, with_distances: bool) -> Result<MatchShape> {
        let basis = self.spectral(&prepared.mesh, k)?;
        let distances = if with_distances {
            Some(self.distances(&prepared.mesh)?)
        } else {
            None
        };
        Ok(MatchShape {
            prepared,
            basis,
            distances,
        })
    }
}

fn encode_geometry(normals: &[Vec3], curvature: &[CurvatureSample]) -> Vec<u8> {
    let mut w = Writer::default();
    w.u64(normals.len() as u64);
    normals.iter().for_each(|n| w.vec3(n));
    for c in curvature {
        w.vec3(&c.direction);
        w.f64(c.k_max);
        w.f64(c.k_min);
        w.u8(u8::from(c.reliable));
    }
    w.0
}

fn decode_geometry(b: &[u8], n: usize) -> Result<(Vec<Vec3>, Vec<CurvatureSample>)> {
    let mut r = Reader::new(b);
    if r.len()? != n {
        return Err(Error::invalid("geometry entry has the wrong vertex count"));
    }
    let normals = (0..n).map(|_| r.vec3()).collect::<Result<Vec<_>>>()?;
    let curvature = (0..n)
        .map(|_| {
            Ok(CurvatureSample {
                direction: r.vec3()?,
                k_max: r.f64()?,
                k_min: r.f64()?,
                reliable: r.u8()? != 0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok((normals, curvature))
}

fn encode_table(t: &PatchTable) -> Vec<u8> {
    let mut w = Writer::default();
    w.f64(t.tau);
    w.u64(t.k as u64);
    w.u8(t.variant.to_byte());
    w.u64(t.samples.len() as u64);
    for (s, l) in t.samples.iter().zip(&t.lrfs) {
        w.u64(s.center as u64);
        w.u64(s.members.len() as u64);
        for (&m, &g) in s.members.iter().zip(&s.geodesics) {
            w.u64(m as u64);
            w.f64(g);
        }
        // frame: 9 scalars row-major, variant, reliability, vote margin
        for r in 0..3 {
            for c in 0..3 {
                w.f64(l.rotation[(r, c)]);
            }
        }
        w.u8(l.variant.to_byte());
        w.u8(u8::from(l.reliable));
        w.u32(l.margin);
    }
    w.0
}

fn decode_table(b: &[u8], n: usize) -> Result<PatchTable> {
    let mut r = Reader::new(b);
    let tau = r.f64()?;
    let k = r.u64()? as usize;
    let variant = LrfVariant::from_byte(r.u8()?).ok_or_else(|| Error::invalid("unknown frame variant"))?;
    let count = r.len()?;
    if count != n {
        return Err(Error::invalid("patch entry has the wrong vertex count"));
    }
    let mut samples = Vec::with_capacity(count);
    let mut lrfs = Vec::with_capacity(count);
    for _ in 0..count {
        let center = r.u64()? as usize;
        let m = r.len()?;
        let mut members = Vec::with_capacity(m);
        let mut geodesics = Vec::with_capacity(m);
        for _ in 0..m {
            let v = r.u64()? as usize;
            if v >= n {
                return Err(Error::invalid("patch member index out of range"));
            }
            members.push(v);
            geodesics.push(r.f64()?);
        }
        let mut rot = [0.0; 9];
        for v in rot.iter_mut() {
            *v = r.f64()?;
        }
        let lv = LrfVariant::from_byte(r.u8()?).ok_or_else(|| Error::invalid("unknown frame variant"))?;
        let reliable = r.u8()? != 0;
        let margin = r.u32()?;
        samples.push(NeighborhoodSample {
            center,
            members,
            geodesics,
        });
        lrfs.push(Lrf {
            rotation: Matrix3::from_row_slice(&rot),
            variant: lv,
            reliable,
            margin,
        });
    }
    r.finish()?;
    Ok(PatchTable {
        tau,
        k,
        variant,
        samples,
        lrfs,
    })
}

fn encode_basis(b: &SpectralBasis) -> Vec<u8> {
    let mut w = Writer::default();
    w.u64(b.k() as u64);
    w.u64(b.vertex_count() as u64);
    b.eigenvalues.iter().for_each(|&v| w.f64(v));
    b.phi.data().iter().for_each(|&v| w.f64(v));
    b.mass.iter().for_each(|&v| w.f64(v));
    w.0
}

fn decode_basis(b: &[u8]) -> Result<SpectralBasis> {
    let mut r = Reader::new(b);
    let k = r.len()?;
    let n = r.len()?;
    let eigenvalues = (0..k).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let phi = (0..n * k).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let mass = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(SpectralBasis {
        eigenvalues,
        phi: Tensor::matrix(n, k, phi)?,
        mass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::shapes;

    fn mesh() -> TriMesh {
        shapes::bumpy_sphere(1, 0.05, 2)
    }

    #[test]
    fn second_lookup_hits_and_matches() {
        let dir = tempfile::tempdir().unwrap();
        let c = Cache::new(dir.path()).unwrap();
        let g1 = c.geometry(&mesh()).unwrap();
        let t1 = c.patch_table(&g1, 0.5, 6, LrfVariant::Curvature).unwrap();
        let s1 = c.spectral(&g1, 5).unwrap();
        let d1 = c.distances(&g1).unwrap();
        assert_eq!(c.stats(), CacheStats { hits: 0, misses: 4, rebuilt: 0 });
        let c2 = Cache::new(dir.path()).unwrap();
        let g2 = c2.geometry(&mesh()).unwrap();
        let t2 = c2.patch_table(&g2, 0.5, 6, LrfVariant::Curvature).unwrap();
        assert_eq!(c2.spectral(&g2, 5).unwrap(), s1);
        assert_eq!(c2.distances(&g2).unwrap(), d1);
        assert_eq!(c2.stats(), CacheStats { hits: 4, misses: 0, rebuilt: 0 });
        assert_eq!(g2.normals(), g1.normals());
        assert_eq!(g2.curvature(), g1.curvature());
        assert_eq!(t2.samples, t1.samples);
        assert_eq!(t2.lrfs, t1.lrfs);
    }

    #[test]
    fn corrupted_entry_is_rebuilt_alone() {
        let dir = tempfile::tempdir().unwrap();
        let c = Cache::new(dir.path()).unwrap();
        let g = c.geometry(&mesh()).unwrap();
        let t = c.patch_table(&g, 0.5, 6, LrfVariant::Shot).unwrap();
        c.distances(&g).unwrap();
        let mut params = Writer::default();
        params.f64(0.5);
        params.u64(6);
        params.u8(LrfVariant::Shot.to_byte());
        let path = c.path_for(EntryKind::Patches, &key(&g, EntryKind::Patches, &params.0));
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, bytes).unwrap();
        let dist_path = c.path_for(EntryKind::Distances, &key(&g, EntryKind::Distances, &[]));
        let before = std::fs::metadata(&dist_path).unwrap().modified().unwrap();

        let c2 = Cache::new(dir.path()).unwrap();
        let g2 = c2.geometry(&mesh()).unwrap();
        let t2 = c2.patch_table(&g2, 0.5, 6, LrfVariant::Shot).unwrap();
        c2.distances(&g2).unwrap();
        assert_eq!(c2.stats(), CacheStats { hits: 2, misses: 0, rebuilt: 1 });
        assert_eq!(t2.samples, t.samples);
        assert_eq!(std::fs::metadata(&dist_path).unwrap().modified().unwrap(), before);
        // the rebuilt file verifies again
        let c3 = Cache::new(dir.path()).unwrap();
        c3.patch_table(&g2, 0.5, 6, LrfVariant::Shot).unwrap();
        assert_eq!(c3.stats().hits, 1);
    }

    #[test]
    fn changed_parameters_miss() {
        let dir = tempfile::tempdir().unwrap();
        let c = Cache::new(dir.path()).unwrap();
        let g = c.geometry(&mesh()).unwrap();
        c.patch_table(&g, 0.5, 6, LrfVariant::Shot).unwrap();
        c.patch_table(&g, 0.5, 7, LrfVariant::Shot).unwrap();
        c.patch_table(&g, 0.5, 6, LrfVariant::Curvature).unwrap();
        assert_eq!(c.stats().misses, 4);
    }
}
