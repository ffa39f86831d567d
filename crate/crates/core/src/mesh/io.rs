//! ASCII OBJ (positions + faces) with a JSON sidecar for the basis, tags and lip ids.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BlendMesh, Region};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Sidecar {
    vertex_count: usize,
    face_count: usize,
    expr_dim: usize,
    expr_basis: Vec<f64>,
    region_tags: Vec<Region>,
    lip_vertex_ids: Vec<usize>,
}

fn obj_text(mesh: &BlendMesh) -> String {
    let mut s = String::from("# splatrig blend mesh\n");
    for v in &mesh.template {
        let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
    }
    for f in &mesh.faces {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

fn sidecar_text(mesh: &BlendMesh) -> String {
    let side = Sidecar {
        vertex_count: mesh.vertex_count(),
        face_count: mesh.face_count(),
        expr_dim: mesh.expr_dim,
        expr_basis: mesh.expr_basis.clone(),
        region_tags: mesh.region_tags.clone(),
        lip_vertex_ids: mesh.lip_vertex_ids.clone(),
    };
    serde_json::to_string_pretty(&side).expect("sidecar serializes")
}

pub(super) fn content_hash(mesh: &BlendMesh) -> String {
    let mut h = Sha256::new();
    h.update(obj_text(mesh).as_bytes());
    h.update(sidecar_text(mesh).as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn sidecar_path(obj: &Path) -> std::path::PathBuf {
    obj.with_extension("json")
}

/// Writes `path` (OBJ) and its sidecar next to it (same stem, `.json`).
pub fn save_mesh(mesh: &BlendMesh, path: &Path) -> Result<()> {
    fs::write(path, obj_text(mesh)).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    fs::write(&side, sidecar_text(mesh)).map_err(|e| Error::io(side, e))
}

pub fn load_mesh(path: &Path) -> Result<BlendMesh> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let what = path.display().to_string();
    let mut template = Vec::new();
    let mut faces = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let xs: Vec<f64> = it
                    .take(3)
                    .map(str::parse)
                    .collect::<Result<_, _>>()
                    .map_err(|e| Error::format(&what, format!("line {}: {e}", ln + 1)))?;
                if xs.len() != 3 {
                    return Err(Error::format(&what, format!("line {}: vertex needs 3 coordinates", ln + 1)));
                }
                template.push([xs[0], xs[1], xs[2]]);
            }
            Some("f") => {
                let ids: Vec<usize> = it
                    .map(|tok| tok.split('/').next().unwrap_or("").parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| Error::format(&what, format!("line {}: {e}", ln + 1)))?;
                if ids.len() != 3 || ids.contains(&0) {
                    return Err(Error::format(&what, format!("line {}: expected a 1-based triangle", ln + 1)));
                }
                faces.push([ids[0] - 1, ids[1] - 1, ids[2] - 1]);
            }
            _ => {}
        }
    }
    let side_path = sidecar_path(path);
    let side_text = fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let side: Sidecar = serde_json::from_str(&side_text)
        .map_err(|e| Error::format(side_path.display().to_string(), e.to_string()))?;
    if side.vertex_count != template.len() || side.face_count != faces.len() {
        return Err(Error::format(
            &what,
            format!(
                "sidecar describes {}v/{}f, OBJ has {}v/{}f",
                side.vertex_count,
                side.face_count,
                template.len(),
                faces.len()
            ),
        ));
    }
    BlendMesh::new(template, faces, side.expr_basis, side.expr_dim, side.region_tags, side.lip_vertex_ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::HeadSpec;

    #[test]
    fn save_load_preserves_mesh_and_hash() {
        let dir = tempfile::tempdir().unwrap();
        let m = HeadSpec::default().build();
        let p = dir.path().join("head.obj");
        save_mesh(&m, &p).unwrap();
        let back = load_mesh(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.content_hash(), m.content_hash());
    }

    #[test]
    fn mismatched_sidecar_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = HeadSpec::default().build();
        let p = dir.path().join("head.obj");
        save_mesh(&m, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let truncated: String = text.lines().filter(|l| !l.starts_with("f ")).map(|l| format!("{l}\n")).collect();
        fs::write(&p, truncated).unwrap();
        assert!(load_mesh(&p).is_err());
    }
}
