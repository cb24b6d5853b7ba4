//! Triangle meshes with per-vertex uncertainty, topology queries and PLY/OBJ IO.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct UncertainMesh {
    pub vertices: Vec<Vector3<f64>>,
    /// Per-vertex uncertainty in [0, 1]; 1 means fully reliable.
    pub uncertainty: Vec<f64>,
    pub triangles: Vec<[u32; 3]>,
}

impl UncertainMesh {
    pub fn new(vertices: Vec<Vector3<f64>>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        let n = vertices.len();
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i as usize >= n)) {
            return Err(Error::invalid(format!("triangle {t:?} indexes past {n} vertices")));
        }
        Ok(UncertainMesh {
            uncertainty: vec![1.0; n],
            vertices,
            triangles,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle(&self, t: usize) -> [Vector3<f64>; 3] {
        let [a, b, c] = self.triangles[t];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle(t);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Volume enclosed by a closed, consistently wound mesh (positive for
    /// outward-facing counter-clockwise winding).
    pub fn signed_volume(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.triangle(t);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    /// Undirected edge -> number of incident triangles.
    pub fn edge_use_counts(&self) -> HashMap<(u32, u32), usize> {
        let mut counts = HashMap::with_capacity(self.triangles.len() * 3 / 2);
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Edges used by exactly one triangle.
    pub fn boundary_edge_count(&self) -> usize {
        self.edge_use_counts().values().filter(|&&c| c == 1).count()
    }

    /// Every edge shared by exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        !self.triangles.is_empty() && self.edge_use_counts().values().all(|&c| c == 2)
    }

    /// V - E + F over referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertices.len()];
        for t in &self.triangles {
            for &i in t {
                used[i as usize] = true;
            }
        }
        let v = used.iter().filter(|u| **u).count() as i64;
        let e = self.edge_use_counts().len() as i64;
        v - e + self.triangles.len() as i64
    }

    /// Geodesic sphere from a subdivided icosahedron; `20 * 4^level` triangles.
    pub fn icosphere(center: Vector3<f64>, radius: f64, level: u32) -> Self {
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        let mut verts: Vec<Vector3<f64>> = [
            (-1.0, phi, 0.0),
            (1.0, phi, 0.0),
            (-1.0, -phi, 0.0),
            (1.0, -phi, 0.0),
            (0.0, -1.0, phi),
            (0.0, 1.0, phi),
            (0.0, -1.0, -phi),
            (0.0, 1.0, -phi),
            (phi, 0.0, -1.0),
            (phi, 0.0, 1.0),
            (-phi, 0.0, -1.0),
            (-phi, 0.0, 1.0),
        ]
        .iter()
        .map(|&(x, y, z)| Vector3::new(x, y, z).normalize())
        .collect();
        let mut tris: Vec<[u32; 3]> = vec![
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
            let mut midpoints: HashMap<(u32, u32), u32> = HashMap::new();
            let mut mid = |a: u32, b: u32, verts: &mut Vec<Vector3<f64>>| -> u32 {
                *midpoints.entry((a.min(b), a.max(b))).or_insert_with(|| {
                    verts.push(((verts[a as usize] + verts[b as usize]) * 0.5).normalize());
                    (verts.len() - 1) as u32
                })
            };
            let mut next = Vec::with_capacity(tris.len() * 4);
            for &[a, b, c] in &tris {
                let ab = mid(a, b, &mut verts);
                let bc = mid(b, c, &mut verts);
                let ca = mid(c, a, &mut verts);
                next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            tris = next;
        }
        let vertices = verts.into_iter().map(|v| center + v * radius).collect();
        UncertainMesh::new(vertices, tris).expect("icosphere indices are in range")
    }

    pub fn write_ply_ascii(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_ply_header(&mut out, "ascii 1.0")?;
        for (v, w) in self.vertices.iter().zip(&self.uncertainty) {
            writeln!(out, "{} {} {} {}", v.x as f32, v.y as f32, v.z as f32, *w as f32)?;
        }
        for t in &self.triangles {
            writeln!(out, "3 {} {} {}", t[0], t[1], t[2])?;
        }
        Ok(())
    }

    pub fn write_ply_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_ply_header(&mut out, "binary_little_endian 1.0")?;
        for (v, w) in self.vertices.iter().zip(&self.uncertainty) {
            for c in [v.x, v.y, v.z, *w] {
                out.write_all(&(c as f32).to_le_bytes())?;
            }
        }
        for t in &self.triangles {
            out.write_all(&[3u8])?;
            for i in t {
                out.write_all(&(*i as i32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    fn write_ply_header(&self, out: &mut impl Write, format: &str) -> Result<()> {
        write!(
            out,
            "ply\nformat {format}\ncomment quality = per-vertex uncertainty in [0,1]\n\
             element vertex {}\nproperty float x\nproperty float y\nproperty float z\nproperty float quality\n\
             element face {}\nproperty list uchar int vertex_indices\nend_header\n",
            self.vertices.len(),
            self.triangles.len()
        )?;
        Ok(())
    }

    pub fn write_obj(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for v in &self.vertices {
            writeln!(out, "v {} {} {}", v.x, v.y, v.z)?;
        }
        for t in &self.triangles {
            writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
        }
        Ok(())
    }

    /// Reads a PLY (ascii or binary little endian) or OBJ mesh. Vertex
    /// `quality`, when present, becomes the uncertainty; polygons are fanned.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let is_obj = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("obj"));
        if is_obj {
            read_obj(path)
        } else {
            read_ply(path)
        }
    }
}

fn fan(poly: &[u32], tris: &mut Vec<[u32; 3]>) {
    for k in 1..poly.len().saturating_sub(1) {
        tris.push([poly[0], poly[k], poly[k + 1]]);
    }
}

fn read_obj(path: &Path) -> Result<UncertainMesh> {
    let mut verts = Vec::new();
    let mut tris = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let c: Vec<f64> = it
                    .take(3)
                    .map(|s| s.parse().map_err(|_| Error::format("obj: bad vertex")))
                    .collect::<Result<_>>()?;
                if c.len() != 3 {
                    return Err(Error::format("obj: vertex needs 3 coordinates"));
                }
                verts.push(Vector3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let idx: Vec<u32> = it
                    .map(|s| {
                        let first = s.split('/').next().unwrap_or("");
                        let i: i64 = first.parse().map_err(|_| Error::format("obj: bad face"))?;
                        let i = if i < 0 { verts.len() as i64 + i } else { i - 1 };
                        u32::try_from(i).map_err(|_| Error::format("obj: bad face index"))
                    })
                    .collect::<Result<_>>()?;
                fan(&idx, &mut tris);
            }
            _ => {}
        }
    }
    UncertainMesh::new(verts, tris)
}

#[derive(Clone, Copy, PartialEq)]
enum PlyFormat {
    Ascii,
    BinaryLe,
}

fn ply_scalar_size(ty: &str) -> Result<usize> {
    Ok(match ty {
        "char" | "uchar" | "int8" | "uint8" => 1,
        "short" | "ushort" | "int16" | "uint16" => 2,
        "int" | "uint" | "float" | "int32" | "uint32" | "float32" => 4,
        "double" | "float64" => 8,
        _ => return Err(Error::format(format!("ply: unknown type {ty}"))),
    })
}

fn ply_read_scalar(ty: &str, b: &[u8]) -> f64 {
    match ty {
        "char" | "int8" => b[0] as i8 as f64,
        "uchar" | "uint8" => b[0] as f64,
        "short" | "int16" => i16::from_le_bytes([b[0], b[1]]) as f64,
        "ushort" | "uint16" => u16::from_le_bytes([b[0], b[1]]) as f64,
        "int" | "int32" => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
        "uint" | "uint32" => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
        "float" | "float32" => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
        _ => f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]),
    }
}

enum PlyProp {
    Scalar(String, String),
    List(String, String),
}

struct PlyElement {
    name: String,
    count: usize,
    props: Vec<PlyProp>,
}

fn read_ply(path: &Path) -> Result<UncertainMesh> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let header_end = bytes
        .windows(10)
        .position(|w| w == b"end_header")
        .ok_or_else(|| Error::format("ply: missing end_header"))?;
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| Error::format("ply: header not utf-8"))?;
    let mut body = header_end + 10;
    while bytes.get(body).is_some_and(|&b| b == b'\r' || b == b'\n') {
        body += 1;
        if bytes[body - 1] == b'\n' {
            break;
        }
    }
    let mut format = None;
    let mut elements: Vec<PlyElement> = Vec::new();
    for (i, line) in header.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["ply"] if i == 0 => {}
            _ if i == 0 => return Err(Error::format("ply: bad magic")),
            ["format", "ascii", _] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", _] => format = Some(PlyFormat::BinaryLe),
            ["format", other, _] => return Err(Error::format(format!("ply: unsupported format {other}"))),
            ["element", name, count] => elements.push(PlyElement {
                name: name.to_string(),
                count: count.parse().map_err(|_| Error::format("ply: bad element count"))?,
                props: Vec::new(),
            }),
            ["property", "list", cty, ity, _] => elements
                .last_mut()
                .ok_or_else(|| Error::format("ply: property before element"))?
                .props
                .push(PlyProp::List(cty.to_string(), ity.to_string())),
            ["property", ty, name] => elements
                .last_mut()
                .ok_or_else(|| Error::format("ply: property before element"))?
                .props
                .push(PlyProp::Scalar(name.to_string(), ty.to_string())),
            _ => {}
        }
    }
    let format = format.ok_or_else(|| Error::format("ply: missing format"))?;
    let mut verts = Vec::new();
    let mut quality = Vec::new();
    let mut tris = Vec::new();
    let mut tokens = if format == PlyFormat::Ascii {
        Some(
            std::str::from_utf8(&bytes[body..])
                .map_err(|_| Error::format("ply: body not utf-8"))?
                .split_whitespace(),
        )
    } else {
        None
    };
    let mut pos = body;
    let truncated = || Error::format("ply: truncated body");
    for el in &elements {
        for _ in 0..el.count {
            let mut scalars: HashMap<&str, f64> = HashMap::new();
            let mut list: Vec<u32> = Vec::new();
            for prop in &el.props {
                match prop {
                    PlyProp::Scalar(name, ty) => {
                        let v = if let Some(tok) = tokens.as_mut() {
                            tok.next().ok_or_else(truncated)?.parse().map_err(|_| truncated())?
                        } else {
                            let sz = ply_scalar_size(ty)?;
                            let b = bytes.get(pos..pos + sz).ok_or_else(truncated)?;
                            pos += sz;
                            ply_read_scalar(ty, b)
                        };
                        scalars.insert(name.as_str(), v);
                    }
                    PlyProp::List(cty, ity) => {
                        let count = if let Some(tok) = tokens.as_mut() {
                            tok.next().ok_or_else(truncated)?.parse::<f64>().map_err(|_| truncated())? as usize
                        } else {
                            let sz = ply_scalar_size(cty)?;
                            let b = bytes.get(pos..pos + sz).ok_or_else(truncated)?;
                            pos += sz;
                            ply_read_scalar(cty, b) as usize
                        };
                        for _ in 0..count {
                            let v = if let Some(tok) = tokens.as_mut() {
                                tok.next().ok_or_else(truncated)?.parse::<f64>().map_err(|_| truncated())?
                            } else {
                                let sz = ply_scalar_size(ity)?;
                                let b = bytes.get(pos..pos + sz).ok_or_else(truncated)?;
                                pos += sz;
                                ply_read_scalar(ity, b)
                            };
                            list.push(v as u32);
                        }
                    }
                }
            }
            match el.name.as_str() {
                "vertex" => {
                    let get = |k: &str| scalars.get(k).copied().ok_or_else(|| Error::format(format!("ply: vertex missing {k}")));
                    verts.push(Vector3::new(get("x")?, get("y")?, get("z")?));
                    quality.push(scalars.get("quality").copied().unwrap_or(1.0));
                }
                "face" => fan(&list, &mut tris),
                _ => {}
            }
        }
    }
    let mut mesh = UncertainMesh::new(verts, tris)?;
    mesh.uncertainty = quality;
    Ok(mesh)
}
