//! Wavefront OBJ subset: `v x y z` and triangular `f a b c` lines with
//! 1-based indices; `a/b/c` slash suffixes are ignored, as are normals,
//! texture coordinates, materials and comments. A transport format, not a
//! fidelity goal.

use std::io::BufRead;
use std::path::Path;

use super::FormatError;
use nalgebra::Vector3;
use ttp_core::mesh::{MeshOptions, TemplateMesh};

/// Parse a mesh from OBJ text. Reports malformed lines with their line
/// number; topology problems surface as mesh errors.
pub fn parse_obj(
    reader: impl BufRead,
    path: &Path,
    options: MeshOptions,
) -> Result<TemplateMesh, FormatError> {
    let mut vertices: Vec<Vector3<f64>> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let parse_err = |message: String| FormatError::Parse {
            path: path.display().to_string(),
            line: lineno,
            message,
        };
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let mut coords = [0.0f64; 3];
                for c in coords.iter_mut() {
                    let tok = tokens
                        .next()
                        .ok_or_else(|| parse_err("vertex needs 3 coordinates".into()))?;
                    *c = tok
                        .parse()
                        .map_err(|_| parse_err(format!("bad coordinate {tok:?}")))?;
                }
                vertices.push(Vector3::new(coords[0], coords[1], coords[2]));
            }
            Some("f") => {
                let mut indices = Vec::with_capacity(3);
                for tok in tokens {
                    // `a/b/c` carries texture/normal indices; only the
                    // vertex index matters here.
                    let vertex_tok = tok.split('/').next().unwrap_or(tok);
                    let one_based: usize = vertex_tok
                        .parse()
                        .map_err(|_| parse_err(format!("bad face index {tok:?}")))?;
                    if one_based == 0 {
                        return Err(parse_err("face indices are 1-based".into()));
                    }
                    indices.push(one_based - 1);
                }
                if indices.len() != 3 {
                    return Err(parse_err(format!(
                        "only triangles are supported, got {} indices",
                        indices.len()
                    )));
                }
                faces.push([indices[0], indices[1], indices[2]]);
            }
            // Everything else (vn, vt, o, g, s, usemtl, comments, blanks)
            // is transport noise.
            _ => {}
        }
    }
    Ok(TemplateMesh::with_options(vertices, faces, options)?)
}

pub fn load_obj(path: &Path, options: MeshOptions) -> Result<TemplateMesh, FormatError> {
    let file = std::fs::File::open(path)?;
    parse_obj(std::io::BufReader::new(file), path, options)
}

/// Deterministic OBJ output (17-significant-digit coordinates).
pub fn write_obj(mesh: &TemplateMesh) -> String {
    let mut out = String::new();
    for v in mesh.vertices() {
        out.push_str(&format!("v {:.16e} {:.16e} {:.16e}\n", v.x, v.y, v.z));
    }
    for f in mesh.faces() {
        out.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn parse(text: &str) -> Result<TemplateMesh, FormatError> {
        parse_obj(Cursor::new(text), Path::new("test.obj"), MeshOptions::default())
    }

    #[test]
    fn parses_a_tetrahedron() {
        let text = "\
# a comment
v 1 1 1
v 1 -1 -1
v -1 1 -1
v -1 -1 1
f 1 2 3
f 1 4 2
f 1 3 4
f 2 4 3
";
        let mesh = parse(text).unwrap();
        assert_eq!(mesh.vertex_count(), 4);
        assert_eq!(mesh.face_count(), 4);
        for i in 0..4 {
            assert_eq!(mesh.neighbors(i).0.len(), 3);
        }
    }

    #[test]
    fn slash_suffixes_are_ignored() {
        let text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1/1/1 2/2/2 3/3/3\n";
        assert_eq!(parse(text).unwrap().face_count(), 1);
    }

    #[test]
    fn repeated_index_is_a_topology_error() {
        let text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 1 2\n";
        assert!(matches!(parse(text), Err(FormatError::Mesh(_))));
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let text = "v 0 0 0\nv 1 0 zebra\n";
        match parse(text) {
            Err(FormatError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn round_trips_through_text() {
        let mesh = ttp_core::mesh::primitives::icosphere(1);
        let text = write_obj(&mesh);
        let back = parse(&text).unwrap();
        assert_eq!(back.vertex_count(), mesh.vertex_count());
        for (a, b) in mesh.vertices().iter().zip(back.vertices()) {
            assert_eq!(a, b);
        }
    }
}
