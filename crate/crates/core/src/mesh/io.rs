//! OFF (read/write) and OBJ (read-only) mesh files.

use std::fmt::Write as _;
use std::path::Path;

use super::{TriMesh, Vec3};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Off,
    Obj,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "off" => Some(MeshFormat::Off),
            "obj" => Some(MeshFormat::Obj),
            _ => None,
        }
    }
}

pub fn load_mesh(path: &Path, format: MeshFormat) -> Result<TriMesh> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match format {
        MeshFormat::Off => parse_off(&text, path),
        MeshFormat::Obj => parse_obj(&text, path),
    }
}

pub fn load_off(path: &Path) -> Result<TriMesh> {
    load_mesh(path, MeshFormat::Off)
}

pub fn load_obj(path: &Path) -> Result<TriMesh> {
    load_mesh(path, MeshFormat::Obj)
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Non-empty, comment-stripped lines with their 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.split('#').next().unwrap_or("").trim();
        (!l.is_empty()).then_some((i + 1, l))
    })
}

fn parse_num<T: std::str::FromStr>(tok: &str, path: &Path, line: usize) -> Result<T> {
    tok.parse()
        .map_err(|_| parse_err(path, line, format!("malformed token {tok:?}")))
}

pub fn parse_off(text: &str, path: &Path) -> Result<TriMesh> {
    let mut lines = content_lines(text);
    let last_line = text.lines().count().max(1);

    let (hline, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file, expected OFF header"))?;
    let mut header_toks = header.split_whitespace();
    if header_toks.next() != Some("OFF") {
        return Err(parse_err(path, hline, "expected OFF header"));
    }
    // counts may share the header line ("OFF 4 4 6")
    let rest: Vec<&str> = header_toks.collect();
    let (cline, counts) = if rest.is_empty() {
        let (l, s) = lines
            .next()
            .ok_or_else(|| parse_err(path, last_line, "missing counts line"))?;
        (l, s.split_whitespace().collect::<Vec<_>>())
    } else {
        (hline, rest)
    };
    if counts.len() < 2 {
        return Err(parse_err(path, cline, "counts line needs vertex and face counts"));
    }
    let nv: usize = parse_num(counts[0], path, cline)?;
    let nf: usize = parse_num(counts[1], path, cline)?;

    let mut vertices = Vec::with_capacity(nv);
    for k in 0..nv {
        let (l, s) = lines.next().ok_or_else(|| {
            parse_err(path, last_line, format!("expected {nv} vertices, found {k}"))
        })?;
        let toks: Vec<&str> = s.split_whitespace().collect();
        if toks.len() < 3 {
            return Err(parse_err(path, l, "vertex line needs three coordinates"));
        }
        vertices.push(Vec3::new(
            parse_num(toks[0], path, l)?,
            parse_num(toks[1], path, l)?,
            parse_num(toks[2], path, l)?,
        ));
    }

    let mut faces = Vec::with_capacity(nf);
    for k in 0..nf {
        let (l, s) = lines.next().ok_or_else(|| {
            parse_err(path, last_line, format!("expected {nf} faces, found {k}"))
        })?;
        let toks: Vec<&str> = s.split_whitespace().collect();
        let arity: usize = parse_num(toks[0], path, l)?;
        if arity != 3 {
            return Err(parse_err(
                path,
                l,
                format!("non-triangular face with {arity} vertices"),
            ));
        }
        if toks.len() < 4 {
            return Err(parse_err(path, l, "face line needs three indices"));
        }
        let mut f = [0usize; 3];
        for (slot, tok) in f.iter_mut().zip(&toks[1..4]) {
            *slot = parse_num(tok, path, l)?;
            if *slot >= nv {
                return Err(parse_err(
                    path,
                    l,
                    format!("vertex index {slot} out of range (0..{nv})"),
                ));
            }
        }
        if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
            return Err(parse_err(path, l, format!("degenerate face {f:?}")));
        }
        faces.push(f);
    }
    if let Some((l, _)) = lines.next() {
        return Err(parse_err(path, l, "trailing data after declared faces"));
    }
    TriMesh::new(vertices, faces)
}

pub fn parse_obj(text: &str, path: &Path) -> Result<TriMesh> {
    let mut vertices = Vec::new();
    let mut raw_faces: Vec<(usize, [i64; 3])> = Vec::new();
    for (l, s) in content_lines(text) {
        let mut toks = s.split_whitespace();
        match toks.next() {
            Some("v") => {
                let c: Vec<&str> = toks.collect();
                if c.len() < 3 {
                    return Err(parse_err(path, l, "vertex needs three coordinates"));
                }
                vertices.push(Vec3::new(
                    parse_num(c[0], path, l)?,
                    parse_num(c[1], path, l)?,
                    parse_num(c[2], path, l)?,
                ));
            }
            Some("f") => {
                let c: Vec<&str> = toks.collect();
                if c.len() != 3 {
                    return Err(parse_err(
                        path,
                        l,
                        format!("non-triangular face with {} vertices", c.len()),
                    ));
                }
                let mut f = [0i64; 3];
                for (slot, tok) in f.iter_mut().zip(&c) {
                    let idx = tok.split('/').next().unwrap_or("");
                    *slot = parse_num(idx, path, l)?;
                }
                raw_faces.push((l, f));
            }
            _ => {}
        }
    }
    let nv = vertices.len() as i64;
    let mut faces = Vec::with_capacity(raw_faces.len());
    for (l, f) in raw_faces {
        let mut out = [0usize; 3];
        for (slot, &i) in out.iter_mut().zip(&f) {
            // 1-based; negative indices count back from the end
            let abs = if i < 0 { nv + i } else { i - 1 };
            if i == 0 || abs < 0 || abs >= nv {
                return Err(parse_err(path, l, format!("vertex index {i} out of range")));
            }
            *slot = abs as usize;
        }
        if out[0] == out[1] || out[1] == out[2] || out[0] == out[2] {
            return Err(parse_err(path, l, format!("degenerate face {out:?}")));
        }
        faces.push(out);
    }
    TriMesh::new(vertices, faces)
}

/// Writes OFF with shortest round-trip float formatting, so a reload
/// reproduces the coordinates bit for bit.
pub fn write_off(mesh: &TriMesh) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "OFF");
    let _ = writeln!(s, "{} {} {}", mesh.vertex_count(), mesh.face_count(), mesh.edges().len());
    for v in mesh.vertices() {
        let _ = writeln!(s, "{} {} {}", v.x, v.y, v.z);
    }
    for f in mesh.faces() {
        let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
    }
    s
}

pub fn save_off(mesh: &TriMesh, path: &Path) -> Result<()> {
    std::fs::write(path, write_off(mesh)).map_err(|e| Error::io(path, e))
}
