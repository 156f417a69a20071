//! PLY input (via `ply-rs`) and binary little-endian PLY output.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::Path;

use nalgebra::{Point3, Vector3};
use ply_rs::parser::Parser;
use ply_rs::ply::{DefaultElement, Property};

use super::{PointCloud, SceneError};

/// Vertex attributes (every scalar widened to f64) plus face index lists.
#[derive(Debug, Default)]
pub struct PlyTable {
    pub vertex_count: usize,
    pub vertex: BTreeMap<String, Vec<f64>>,
    pub faces: Vec<Vec<u32>>,
}

impl PlyTable {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.vertex.get(name).map(Vec::as_slice)
    }
}

fn scalar(p: &Property) -> Option<f64> {
    Some(match *p {
        Property::Char(v) => v.into(),
        Property::UChar(v) => v.into(),
        Property::Short(v) => v.into(),
        Property::UShort(v) => v.into(),
        Property::Int(v) => v.into(),
        Property::UInt(v) => v.into(),
        Property::Float(v) => v.into(),
        Property::Double(v) => v,
        _ => return None,
    })
}

fn index_list(p: &Property) -> Option<Vec<u32>> {
    fn conv<T: Copy + TryInto<u32>>(v: &[T]) -> Option<Vec<u32>> {
        v.iter().map(|x| (*x).try_into().ok()).collect()
    }
    match p {
        Property::ListChar(v) => conv(v),
        Property::ListUChar(v) => conv(v),
        Property::ListShort(v) => conv(v),
        Property::ListUShort(v) => conv(v),
        Property::ListInt(v) => conv(v),
        Property::ListUInt(v) => conv(v),
        _ => None,
    }
}

/// Reads the `vertex` and (if present) `face` elements of an ASCII or
/// binary PLY file.
pub fn read_ply_table(path: &Path) -> Result<PlyTable, SceneError> {
    let err = |message: String| SceneError::Ply {
        path: path.to_path_buf(),
        message,
    };
    if !path.exists() {
        return Err(SceneError::MissingFile(path.to_path_buf()));
    }
    let mut reader = BufReader::new(File::open(path)?);
    let ply = Parser::<DefaultElement>::new()
        .read_ply(&mut reader)
        .map_err(|e| err(e.to_string()))?;

    let mut table = PlyTable::default();
    let vertices = ply
        .payload
        .get("vertex")
        .ok_or_else(|| err("no `vertex` element".into()))?;
    table.vertex_count = vertices.len();
    if let Some(def) = ply.header.elements.get("vertex") {
        for name in def.properties.keys() {
            let mut col = Vec::with_capacity(vertices.len());
            for v in vertices {
                if let Some(x) = v.get(name).and_then(scalar) {
                    col.push(x);
                }
            }
            if col.len() == vertices.len() {
                table.vertex.insert(name.clone(), col);
            }
        }
    }
    if let Some(faces) = ply.payload.get("face") {
        for (i, f) in faces.iter().enumerate() {
            let list = f
                .get("vertex_indices")
                .or_else(|| f.get("vertex_index"))
                .and_then(index_list)
                .ok_or_else(|| err(format!("face {i} has no usable vertex index list")))?;
            table.faces.push(list);
        }
    }
    Ok(table)
}

/// Loads a point cloud with `x y z`, optional `red green blue` (8-bit; gray
/// when absent) and optional `nx ny nz`.
pub fn read_cloud(path: &Path) -> Result<PointCloud, SceneError> {
    let table = read_ply_table(path)?;
    let need = |name: &str| {
        table.column(name).ok_or_else(|| SceneError::Ply {
            path: path.to_path_buf(),
            message: format!("vertex property `{name}` missing"),
        })
    };
    let (x, y, z) = (need("x")?, need("y")?, need("z")?);
    let positions: Vec<Point3<f64>> = (0..table.vertex_count)
        .map(|i| Point3::new(x[i], y[i], z[i]))
        .collect();
    let colors = match (table.column("red"), table.column("green"), table.column("blue")) {
        (Some(r), Some(g), Some(b)) => (0..table.vertex_count)
            .map(|i| [r[i], g[i], b[i]].map(|c| c.round().clamp(0.0, 255.0) as u8))
            .collect(),
        _ => vec![[128, 128, 128]; table.vertex_count],
    };
    let normals = match (table.column("nx"), table.column("ny"), table.column("nz")) {
        (Some(a), Some(b), Some(c)) => Some(
            (0..table.vertex_count)
                .map(|i| Vector3::new(a[i], b[i], c[i]))
                .collect(),
        ),
        _ => None,
    };
    PointCloud::new(positions, colors, normals)
}

/// Mesh vertices and triangle index triples.
pub type RawMesh = (Vec<Point3<f64>>, Vec<[u32; 3]>);

/// Loads mesh vertices and triangles from PLY (polygons are fan-triangulated).
pub fn read_mesh_ply(path: &Path) -> Result<RawMesh, SceneError> {
    let table = read_ply_table(path)?;
    let col = |name: &str| {
        table.column(name).ok_or_else(|| SceneError::Ply {
            path: path.to_path_buf(),
            message: format!("vertex property `{name}` missing"),
        })
    };
    let (x, y, z) = (col("x")?, col("y")?, col("z")?);
    let vertices = (0..table.vertex_count)
        .map(|i| Point3::new(x[i], y[i], z[i]))
        .collect();
    let triangles = table.faces.iter().flat_map(|f| fan(f)).collect();
    Ok((vertices, triangles))
}

fn fan(face: &[u32]) -> Vec<[u32; 3]> {
    if face.len() < 3 {
        return Vec::new();
    }
    (1..face.len() - 1)
        .map(|i| [face[0], face[i], face[i + 1]])
        .collect()
}

/// Loads `v` and `f` records of a Wavefront OBJ file.
pub fn read_mesh_obj(path: &Path) -> Result<RawMesh, SceneError> {
    if !path.exists() {
        return Err(SceneError::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    let err = |line: usize, message: &str| SceneError::Ply {
        path: path.to_path_buf(),
        message: format!("line {}: {message}", line + 1),
    };
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let c: Vec<f64> = parts
                    .take(3)
                    .map(|s| s.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| err(ln, "bad vertex"))?;
                if c.len() != 3 {
                    return Err(err(ln, "vertex needs three coordinates"));
                }
                vertices.push(Point3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let mut face = Vec::new();
                for tok in parts {
                    let idx: i64 = tok
                        .split('/')
                        .next()
                        .unwrap_or_default()
                        .parse()
                        .map_err(|_| err(ln, "bad face index"))?;
                    let resolved = if idx < 0 {
                        vertices.len() as i64 + idx
                    } else {
                        idx - 1
                    };
                    if resolved < 0 {
                        return Err(err(ln, "face index out of range"));
                    }
                    face.push(resolved as u32);
                }
                triangles.extend(fan(&face));
            }
            _ => {}
        }
    }
    Ok((vertices, triangles))
}

/// Scalar types this crate writes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyScalar {
    UChar,
    Int,
    Float,
    Double,
}

impl PlyScalar {
    fn name(self) -> &'static str {
        match self {
            PlyScalar::UChar => "uchar",
            PlyScalar::Int => "int",
            PlyScalar::Float => "float",
            PlyScalar::Double => "double",
        }
    }
}

/// Writes the header of a vertex-only binary little-endian PLY file.
/// Comment text is flattened to a single line.
pub fn write_vertex_header<W: Write>(
    w: &mut W,
    vertex_count: usize,
    properties: &[(&str, PlyScalar)],
    comments: &[String],
) -> io::Result<()> {
    writeln!(w, "ply")?;
    writeln!(w, "format binary_little_endian 1.0")?;
    for c in comments {
        let flat: String = c.chars().map(|ch| if ch.is_control() { ' ' } else { ch }).collect();
        writeln!(w, "comment {flat}")?;
    }
    writeln!(w, "element vertex {vertex_count}")?;
    for (name, ty) in properties {
        writeln!(w, "property {} {name}", ty.name())?;
    }
    writeln!(w, "end_header")
}

/// Writes a cloud as binary PLY with double positions, uchar colors and
/// float normals (invalid normals written as zero).
pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<(), SceneError> {
    let mut buf = Vec::with_capacity(cloud.len() * 39 + 256);
    write_vertex_header(
        &mut buf,
        cloud.len(),
        &[
            ("x", PlyScalar::Double),
            ("y", PlyScalar::Double),
            ("z", PlyScalar::Double),
            ("red", PlyScalar::UChar),
            ("green", PlyScalar::UChar),
            ("blue", PlyScalar::UChar),
            ("nx", PlyScalar::Float),
            ("ny", PlyScalar::Float),
            ("nz", PlyScalar::Float),
        ],
        &[],
    )?;
    for i in 0..cloud.len() {
        for c in cloud.positions[i].coords.iter() {
            buf.extend_from_slice(&c.to_le_bytes());
        }
        buf.extend_from_slice(&cloud.colors[i]);
        for c in cloud.normals[i].iter() {
            buf.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ascii_cloud_with_normals() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        std::fs::write(
            &path,
            "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\n\
             property uchar red\nproperty uchar green\nproperty uchar blue\n\
             property float nx\nproperty float ny\nproperty float nz\nend_header\n\
             0 0 0 255 0 0 0 0 1\n1 2 3 0 255 0 0 0 0\n",
        )
        .unwrap();
        let cloud = read_cloud(&path).unwrap();
        assert_eq!(cloud.len(), 2);
        assert_eq!(cloud.positions[1], Point3::new(1.0, 2.0, 3.0));
        assert_eq!(cloud.colors[0], [255, 0, 0]);
        assert_eq!(cloud.normal_valid, vec![true, false]);
    }

    #[test]
    fn binary_roundtrip_keeps_doubles() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        let cloud = PointCloud::new(
            vec![Point3::new(0.1, 0.2, 0.3), Point3::new(-1e-3, 7.25, 1.0 / 3.0)],
            vec![[1, 2, 3], [250, 251, 252]],
            Some(vec![Vector3::z(), Vector3::x()]),
        )
        .unwrap();
        write_cloud(&path, &cloud).unwrap();
        let back = read_cloud(&path).unwrap();
        assert_eq!(back.positions, cloud.positions);
        assert_eq!(back.colors, cloud.colors);
        assert_eq!(back.normals, cloud.normals);
    }

    #[test]
    fn obj_quads_are_triangulated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.obj");
        std::fs::write(&path, "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1 2/2 3/3 4/4\n").unwrap();
        let (v, t) = read_mesh_obj(&path).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(t, vec![[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn missing_file() {
        let err = read_cloud(Path::new("/nonexistent/cloud.ply")).unwrap_err();
        assert!(matches!(err, SceneError::MissingFile(_)));
    }
}
