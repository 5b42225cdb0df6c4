//! Point cloud and mesh files: ASCII/binary PLY, whitespace XYZ and OBJ.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{NkfError, Result};
use crate::geometry::{OrientedPointCloud, Vec3};
use crate::mesh::TriangleMesh;

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> NkfError {
    NkfError::Parse { path: path.to_path_buf(), line, msg: msg.into() }
}

fn extension(path: &Path) -> String {
    path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase()
}

/// Reads an oriented cloud from `.ply` (x y z nx ny nz vertex properties) or
/// any other extension as whitespace-separated six-column text.
pub fn read_point_cloud(path: &Path) -> Result<OrientedPointCloud> {
    let (points, normals) = if extension(path) == "ply" {
        let ply = read_ply(path)?;
        let normals = ply.normals.ok_or_else(|| parse_err(path, 0, "vertex element has no nx ny nz properties"))?;
        (ply.positions, normals)
    } else {
        read_xyz(path)?
    };
    if points.is_empty() {
        return Err(NkfError::NoPoints(path.to_path_buf()));
    }
    OrientedPointCloud::new(points, normals)
}

fn read_xyz(path: &Path) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    let reader = BufReader::new(open(path)?);
    let mut points = Vec::new();
    let mut normals = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let vals: Vec<f64> = body
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| parse_err(path, i + 1, format!("{t:?}: {e}"))))
            .collect::<Result<_>>()?;
        if vals.len() != 6 {
            return Err(parse_err(path, i + 1, format!("expected 6 columns, found {}", vals.len())));
        }
        points.push(Vec3::new(vals[0], vals[1], vals[2]));
        normals.push(Vec3::new(vals[3], vals[4], vals[5]));
    }
    Ok((points, normals))
}

pub fn write_xyz(path: &Path, cloud: &OrientedPointCloud) -> Result<()> {
    let mut w = BufWriter::new(create(path)?);
    for (p, n) in cloud.points().iter().zip(cloud.normals()) {
        writeln!(w, "{:e} {:e} {:e} {:e} {:e} {:e}", p.x, p.y, p.z, n.x, n.y, n.z)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a cloud as ASCII PLY with position and normal properties.
pub fn write_point_cloud_ply(path: &Path, cloud: &OrientedPointCloud) -> Result<()> {
    let mut w = BufWriter::new(create(path)?);
    writeln!(w, "ply\nformat ascii 1.0\nelement vertex {}", cloud.len())?;
    for p in ["x", "y", "z", "nx", "ny", "nz"] {
        writeln!(w, "property double {p}")?;
    }
    writeln!(w, "end_header")?;
    for (p, n) in cloud.points().iter().zip(cloud.normals()) {
        writeln!(w, "{:e} {:e} {:e} {:e} {:e} {:e}", p.x, p.y, p.z, n.x, n.y, n.z)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().expect("eight bytes")),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar(String, Scalar),
    List(Scalar, Scalar),
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

#[derive(Debug, PartialEq)]
enum PlyFormat {
    Ascii,
    BinaryLe,
}

/// Vertex and face data pulled from a PLY file.
struct PlyData {
    positions: Vec<Vec3>,
    normals: Option<Vec<Vec3>>,
    faces: Vec<Vec<u32>>,
}

/// Minimal PLY reader: ascii and binary little-endian, vertex positions,
/// optional normals and polygon faces. Other elements are skipped.
fn read_ply(path: &Path) -> Result<PlyData> {
    let mut reader = BufReader::new(open(path)?);
    let mut line = String::new();
    let mut lineno = 0;
    let mut next_line = |reader: &mut BufReader<File>, line: &mut String| -> Result<usize> {
        line.clear();
        let n = reader.read_line(line)?;
        lineno += 1;
        if n == 0 {
            return Err(parse_err(path, lineno, "unexpected end of header"));
        }
        Ok(lineno)
    };
    let ln = next_line(&mut reader, &mut line)?;
    if line.trim() != "ply" {
        return Err(parse_err(path, ln, "missing 'ply' magic"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let ln = next_line(&mut reader, &mut line)?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", _] => format = Some(PlyFormat::BinaryLe),
            ["format", other, _] => return Err(parse_err(path, ln, format!("unsupported format {other}"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| parse_err(path, ln, "bad element count"))?,
                props: Vec::new(),
            }),
            ["property", "list", c, t, _name] => {
                let (c, t) = (Scalar::parse(c), Scalar::parse(t));
                let el = elements.last_mut().ok_or_else(|| parse_err(path, ln, "property before element"))?;
                match (c, t) {
                    (Some(c), Some(t)) => el.props.push(Property::List(c, t)),
                    _ => return Err(parse_err(path, ln, "unknown list type")),
                }
            }
            ["property", t, name] => {
                let t = Scalar::parse(t).ok_or_else(|| parse_err(path, ln, format!("unknown type {t}")))?;
                let el = elements.last_mut().ok_or_else(|| parse_err(path, ln, "property before element"))?;
                el.props.push(Property::Scalar(name.to_string(), t));
            }
            _ => return Err(parse_err(path, ln, format!("unrecognized header line {:?}", line.trim()))),
        }
    }
    let format = format.ok_or_else(|| parse_err(path, lineno, "header has no format line"))?;
    let header_lines = lineno;

    let mut out = PlyData { positions: Vec::new(), normals: None, faces: Vec::new() };
    let mut ascii_lines = String::new();
    let mut ascii_iter: Option<std::vec::IntoIter<(usize, String)>> = None;
    if format == PlyFormat::Ascii {
        reader.read_to_string(&mut ascii_lines)?;
        let rows: Vec<(usize, String)> = ascii_lines
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| (header_lines + i + 1, l.to_string()))
            .collect();
        ascii_iter = Some(rows.into_iter());
    }

    for el in &elements {
        let is_vertex = el.name == "vertex";
        let is_face = el.name == "face";
        let find = |n: &str| {
            el.props.iter().position(|p| matches!(p, Property::Scalar(name, _) if name == n))
        };
        let pos_idx = [find("x"), find("y"), find("z")];
        let nrm_idx = [find("nx"), find("ny"), find("nz")];
        if is_vertex && pos_idx.iter().any(Option::is_none) {
            return Err(parse_err(path, 0, "vertex element lacks x y z"));
        }
        let has_normals = is_vertex && nrm_idx.iter().all(Option::is_some);
        if has_normals {
            out.normals = Some(Vec::with_capacity(el.count));
        }
        for _ in 0..el.count {
            // one row: scalar values per property plus list contents
            let mut scalars: Vec<f64> = Vec::with_capacity(el.props.len());
            let mut list: Vec<f64> = Vec::new();
            match format {
                PlyFormat::Ascii => {
                    let (ln, row) = ascii_iter
                        .as_mut()
                        .and_then(|it| it.next())
                        .ok_or_else(|| parse_err(path, lineno, format!("missing {} rows", el.name)))?;
                    let mut toks = row.split_whitespace();
                    let mut next = || -> Result<f64> {
                        let t = toks.next().ok_or_else(|| parse_err(path, ln, "row too short"))?;
                        t.parse::<f64>().map_err(|e| parse_err(path, ln, format!("{t:?}: {e}")))
                    };
                    for p in &el.props {
                        match p {
                            Property::Scalar(..) => scalars.push(next()?),
                            Property::List(..) => {
                                let n = next()? as usize;
                                scalars.push(n as f64);
                                for _ in 0..n {
                                    list.push(next()?);
                                }
                            }
                        }
                    }
                }
                PlyFormat::BinaryLe => {
                    let mut buf = [0u8; 8];
                    let mut read = |t: Scalar, reader: &mut BufReader<File>| -> Result<f64> {
                        reader.read_exact(&mut buf[..t.size()]).map_err(|_| {
                            parse_err(path, 0, format!("binary body ends inside element {}", el.name))
                        })?;
                        Ok(t.decode(&buf))
                    };
                    for p in &el.props {
                        match p {
                            Property::Scalar(_, t) => scalars.push(read(*t, &mut reader)?),
                            Property::List(c, t) => {
                                let n = read(*c, &mut reader)? as usize;
                                scalars.push(n as f64);
                                for _ in 0..n {
                                    list.push(read(*t, &mut reader)?);
                                }
                            }
                        }
                    }
                }
            }
            if is_vertex {
                let g = |i: [Option<usize>; 3]| Vec3::new(scalars[i[0].unwrap()], scalars[i[1].unwrap()], scalars[i[2].unwrap()]);
                out.positions.push(g(pos_idx));
                if let Some(ns) = out.normals.as_mut() {
                    ns.push(g(nrm_idx));
                }
            } else if is_face {
                out.faces.push(list.iter().map(|&v| v as u32).collect());
            }
        }
    }
    Ok(out)
}

/// Reads a triangle mesh from `.obj` or `.ply`. Polygons are fan
/// triangulated.
pub fn read_mesh(path: &Path) -> Result<TriangleMesh> {
    let (vertices, faces) = match extension(path).as_str() {
        "ply" => {
            let ply = read_ply(path)?;
            (ply.positions, ply.faces)
        }
        "obj" => read_obj(path)?,
        other => return Err(NkfError::InvalidInput(format!("unsupported mesh extension {other:?} for {}", path.display()))),
    };
    let mut triangles = Vec::new();
    for f in faces {
        if f.len() < 3 {
            continue;
        }
        for i in 1..f.len() - 1 {
            triangles.push([f[0], f[i], f[i + 1]]);
        }
    }
    TriangleMesh::new(vertices, triangles)
}

fn read_obj(path: &Path) -> Result<(Vec<Vec3>, Vec<Vec<u32>>)> {
    let reader = BufReader::new(open(path)?);
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("v") => {
                let v: Vec<f64> = toks
                    .take(3)
                    .map(|t| t.parse::<f64>().map_err(|e| parse_err(path, i + 1, format!("{t:?}: {e}"))))
                    .collect::<Result<_>>()?;
                if v.len() != 3 {
                    return Err(parse_err(path, i + 1, "vertex needs three coordinates"));
                }
                vertices.push(Vec3::new(v[0], v[1], v[2]));
            }
            Some("f") => {
                let mut face = Vec::new();
                for t in toks {
                    let head = t.split('/').next().unwrap_or("");
                    let idx: i64 = head.parse().map_err(|_| parse_err(path, i + 1, format!("bad face index {t:?}")))?;
                    // OBJ indices are 1-based; negatives count back from the end
                    let resolved = if idx > 0 { idx - 1 } else { vertices.len() as i64 + idx };
                    if resolved < 0 {
                        return Err(parse_err(path, i + 1, format!("face index {idx} out of range")));
                    }
                    face.push(resolved as u32);
                }
                faces.push(face);
            }
            _ => {}
        }
    }
    Ok((vertices, faces))
}

/// ASCII OBJ with `v`, `vn` and `f v//vn` records.
pub fn write_obj(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    let mut w = BufWriter::new(create(path)?);
    for v in &mesh.vertices {
        writeln!(w, "v {:.9} {:.9} {:.9}", v.x, v.y, v.z)?;
    }
    for n in &mesh.normals {
        writeln!(w, "vn {:.6} {:.6} {:.6}", n.x, n.y, n.z)?;
    }
    let with_normals = mesh.normals.len() == mesh.vertices.len();
    for t in &mesh.triangles {
        let [a, b, c] = t.map(|i| i + 1);
        if with_normals {
            writeln!(w, "f {a}//{a} {b}//{b} {c}//{c}")?;
        } else {
            writeln!(w, "f {a} {b} {c}")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Binary little-endian PLY: float positions and normals, uchar/int faces.
pub fn write_ply(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    let mut w = BufWriter::new(create(path)?);
    let with_normals = mesh.normals.len() == mesh.vertices.len();
    writeln!(w, "ply\nformat binary_little_endian 1.0\nelement vertex {}", mesh.vertices.len())?;
    writeln!(w, "property float x\nproperty float y\nproperty float z")?;
    if with_normals {
        writeln!(w, "property float nx\nproperty float ny\nproperty float nz")?;
    }
    writeln!(w, "element face {}\nproperty list uchar int vertex_indices\nend_header", mesh.triangles.len())?;
    for (i, v) in mesh.vertices.iter().enumerate() {
        for c in v.iter() {
            w.write_all(&(*c as f32).to_le_bytes())?;
        }
        if with_normals {
            for c in mesh.normals[i].iter() {
                w.write_all(&(*c as f32).to_le_bytes())?;
            }
        }
    }
    for t in &mesh.triangles {
        w.write_all(&[3u8])?;
        for &i in t {
            w.write_all(&(i as i32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(NkfError::at(path))
}

/// Creates the file and any missing parent directories.
fn create(path: &Path) -> Result<File> {
    ensure_parent(path)?;
    File::create(path).map_err(NkfError::at(path))
}

/// Writes by extension: `.ply` binary PLY, anything else OBJ.
pub fn write_mesh(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    if extension(path) == "ply" { write_ply(path, mesh) } else { write_obj(path, mesh) }
}

/// Makes sure the parent directory of an output path exists.
pub fn ensure_parent(path: &Path) -> Result<PathBuf> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(NkfError::at(dir))?;
    }
    Ok(path.to_path_buf())
}
