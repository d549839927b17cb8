//! Binary PLY persistence for grouped scenes, plus a reader for plain point clouds.
//!
//! Scene files extend the usual splatting layout (`x y z nx ny nz f_dc_* f_rest_*
//! opacity scale_* rot_*`) with `f_id_0..f_id_15`. All properties are stored as
//! `double` so parameters survive a round trip bit-exactly. `f_rest` is stored
//! channel-major: all red coefficients, then green, then blue.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::scene::{Classifier, Gaussian, Scene, SceneMetadata, IDENTITY_DIM};
use crate::sh;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Ascii,
    BinaryLe,
    BinaryBe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(s: &str) -> Option<ScalarType> {
        Some(match s {
            "char" | "int8" => ScalarType::I8,
            "uchar" | "uint8" => ScalarType::U8,
            "short" | "int16" => ScalarType::I16,
            "ushort" | "uint16" => ScalarType::U16,
            "int" | "int32" => ScalarType::I32,
            "uint" | "uint32" => ScalarType::U32,
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }

    fn decode(self, b: &[u8], format: Format) -> f64 {
        macro_rules! num {
            ($t:ty, $n:expr) => {{
                let arr: [u8; $n] = b[..$n].try_into().unwrap();
                (if format == Format::BinaryBe { <$t>::from_be_bytes(arr) } else { <$t>::from_le_bytes(arr) }) as f64
            }};
        }
        match self {
            ScalarType::I8 => b[0] as i8 as f64,
            ScalarType::U8 => b[0] as f64,
            ScalarType::I16 => num!(i16, 2),
            ScalarType::U16 => num!(u16, 2),
            ScalarType::I32 => num!(i32, 4),
            ScalarType::U32 => num!(u32, 4),
            ScalarType::F32 => num!(f32, 4),
            ScalarType::F64 => num!(f64, 8),
        }
    }
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<(String, ScalarType)>,
}

/// The vertex table of a PLY file: property names and one row of values per vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexTable {
    pub names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl VertexTable {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

fn parse_header(path: &Path, reader: &mut impl BufRead) -> Result<(Format, Vec<Element>)> {
    let mut line = String::new();
    let mut next = |reader: &mut dyn BufRead| -> Result<String> {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(Error::malformed(path, "unexpected end of header"));
        }
        Ok(line.trim_end().to_string())
    };
    if next(reader)? != "ply" {
        return Err(Error::malformed(path, "missing ply magic"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let l = next(reader)?;
        let parts: Vec<&str> = l.split_whitespace().collect();
        match parts.as_slice() {
            ["end_header"] => break,
            ["format", f, _] => {
                format = Some(match *f {
                    "ascii" => Format::Ascii,
                    "binary_little_endian" => Format::BinaryLe,
                    "binary_big_endian" => Format::BinaryBe,
                    other => return Err(Error::malformed(path, format!("unknown format {other}"))),
                })
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let count = count.parse().map_err(|_| Error::malformed(path, "bad element count"))?;
                elements.push(Element { name: name.to_string(), count, properties: Vec::new() });
            }
            ["property", "list", ..] => {
                let el = elements.last().ok_or_else(|| Error::malformed(path, "property before element"))?;
                if el.name == "vertex" {
                    return Err(Error::malformed(path, "list properties on vertices are not supported"));
                }
                // Marked unsupported; only elements after the vertex table may carry lists.
                elements.last_mut().unwrap().properties.push(("<list>".into(), ScalarType::U8));
            }
            ["property", ty, name] => {
                let ty = ScalarType::parse(ty).ok_or_else(|| Error::malformed(path, format!("unknown type {ty}")))?;
                let el = elements.last_mut().ok_or_else(|| Error::malformed(path, "property before element"))?;
                el.properties.push((name.to_string(), ty));
            }
            _ => return Err(Error::malformed(path, format!("unrecognized header line: {l}"))),
        }
    }
    let format = format.ok_or_else(|| Error::malformed(path, "missing format line"))?;
    Ok((format, elements))
}

/// Reads the vertex element of any PLY file (ascii or binary, any scalar types).
pub fn read_vertices(path: &Path) -> Result<VertexTable> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let (format, elements) = parse_header(path, &mut reader)?;
    let mut skip_rows = 0usize;
    let mut skip_bytes = 0usize;
    let mut vertex = None;
    for el in &elements {
        if el.name == "vertex" {
            vertex = Some(el.clone());
            break;
        }
        if el.properties.iter().any(|(n, _)| n == "<list>") {
            return Err(Error::malformed(path, "list element before vertices"));
        }
        skip_rows += el.count;
        skip_bytes += el.count * el.properties.iter().map(|p| p.1.size()).sum::<usize>();
    }
    let vertex = vertex.ok_or_else(|| Error::malformed(path, "no vertex element"))?;
    let names: Vec<String> = vertex.properties.iter().map(|p| p.0.clone()).collect();
    let mut rows = Vec::with_capacity(vertex.count);
    if format == Format::Ascii {
        let mut text = String::new();
        reader.read_to_string(&mut text).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty()).skip(skip_rows);
        for _ in 0..vertex.count {
            let l = lines.next().ok_or_else(|| Error::malformed(path, "too few vertex rows"))?;
            let row: Vec<f64> = l
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::malformed(path, "bad ascii value"))?;
            if row.len() != names.len() {
                return Err(Error::malformed(path, "vertex row has the wrong number of values"));
            }
            rows.push(row);
        }
    } else {
        let mut skip = vec![0u8; skip_bytes];
        reader.read_exact(&mut skip).map_err(|e| Error::io(path, e))?;
        let stride: usize = vertex.properties.iter().map(|p| p.1.size()).sum();
        let mut buf = vec![0u8; stride * vertex.count];
        reader
            .read_exact(&mut buf)
            .map_err(|_| Error::malformed(path, "vertex data shorter than the header declares"))?;
        for chunk in buf.chunks_exact(stride.max(1)).take(vertex.count) {
            let mut off = 0;
            let row = vertex
                .properties
                .iter()
                .map(|&(_, ty)| {
                    let v = ty.decode(&chunk[off..], format);
                    off += ty.size();
                    v
                })
                .collect();
            rows.push(row);
        }
    }
    Ok(VertexTable { names, rows })
}

/// Property names of a scene file for the given SH degree, in file order.
pub fn scene_property_names(sh_degree: usize) -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for i in 0..3 * (sh::coeff_count(sh_degree) - 1) {
        names.push(format!("f_rest_{i}"));
    }
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names.extend((0..IDENTITY_DIM).map(|i| format!("f_id_{i}")));
    names
}

fn gaussian_record(g: &Gaussian) -> Vec<f64> {
    let rest = g.sh.len() - 1;
    let mut r = Vec::with_capacity(17 + 3 * rest + IDENTITY_DIM);
    r.extend_from_slice(&g.position);
    r.extend_from_slice(&[0.0; 3]);
    r.extend_from_slice(&g.sh[0]);
    for ch in 0..3 {
        r.extend(g.sh[1..].iter().map(|c| c[ch]));
    }
    r.push(g.opacity_logit);
    r.extend_from_slice(&g.log_scale);
    r.extend_from_slice(&g.rotation);
    r.extend_from_slice(&g.identity);
    r
}

/// Path of the classifier sidecar for a scene file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".classifier.json");
    PathBuf::from(s)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    classes: usize,
    /// Row-major `16 × classes`.
    weights: Vec<f64>,
    bias: Vec<f64>,
    #[serde(default)]
    metadata: SceneMetadata,
}

/// Writes the scene PLY and its classifier sidecar.
pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    scene.validate()?;
    let names = scene_property_names(scene.sh_degree);
    let mut out = Vec::with_capacity(256 + scene.len() * names.len() * 8);
    writeln!(out, "ply").unwrap();
    writeln!(out, "format binary_little_endian 1.0").unwrap();
    writeln!(out, "element vertex {}", scene.len()).unwrap();
    for n in &names {
        writeln!(out, "property double {n}").unwrap();
    }
    writeln!(out, "end_header").unwrap();
    for g in &scene.gaussians {
        for v in gaussian_record(g) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))?;
    let c = &scene.classifier;
    let sidecar =
        Sidecar { classes: c.classes, weights: c.weights.clone(), bias: c.bias.clone(), metadata: scene.metadata.clone() };
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Json { path: side.clone(), source: e })?;
    fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))
}

/// Reads a scene PLY and its classifier sidecar.
pub fn load_scene(path: &Path) -> Result<Scene> {
    let table = read_vertices(path)?;
    let col = |name: &str| table.column(name);
    let required = |name: &str| col(name).ok_or_else(|| Error::malformed(path, format!("missing property {name}")));
    let id_cols: Vec<Option<usize>> = (0..IDENTITY_DIM).map(|i| col(&format!("f_id_{i}"))).collect();
    if id_cols.iter().any(|c| c.is_none()) {
        return Err(Error::NotGroupedScene(format!("{} has no identity fields", path.display())));
    }
    let id_cols: Vec<usize> = id_cols.into_iter().flatten().collect();
    let rest = (0..).take_while(|i| col(&format!("f_rest_{i}")).is_some()).count();
    let sh_degree = (0..=sh::MAX_SH_DEGREE)
        .find(|&d| 3 * (sh::coeff_count(d) - 1) == rest)
        .ok_or_else(|| Error::malformed(path, format!("{rest} f_rest fields match no SH degree")))?;
    let pos = ["x", "y", "z"].map(|n| required(n)).into_iter().collect::<Result<Vec<_>>>()?;
    let dc = (0..3).map(|i| required(&format!("f_dc_{i}"))).collect::<Result<Vec<_>>>()?;
    let rest_cols = (0..rest).map(|i| required(&format!("f_rest_{i}"))).collect::<Result<Vec<_>>>()?;
    let opacity = required("opacity")?;
    let scale = (0..3).map(|i| required(&format!("scale_{i}"))).collect::<Result<Vec<_>>>()?;
    let rot = (0..4).map(|i| required(&format!("rot_{i}"))).collect::<Result<Vec<_>>>()?;
    let per_channel = rest / 3;
    let gaussians = table
        .rows
        .iter()
        .map(|r| {
            let mut sh = vec![[0.0; 3]; sh::coeff_count(sh_degree)];
            sh[0] = [r[dc[0]], r[dc[1]], r[dc[2]]];
            for ch in 0..3 {
                for k in 0..per_channel {
                    sh[k + 1][ch] = r[rest_cols[ch * per_channel + k]];
                }
            }
            let mut identity = [0.0; IDENTITY_DIM];
            for (e, &c) in identity.iter_mut().zip(&id_cols) {
                *e = r[c];
            }
            Gaussian {
                position: [r[pos[0]], r[pos[1]], r[pos[2]]],
                log_scale: [r[scale[0]], r[scale[1]], r[scale[2]]],
                rotation: [r[rot[0]], r[rot[1]], r[rot[2]], r[rot[3]]],
                opacity_logit: r[opacity],
                sh,
                identity,
            }
        })
        .collect();

    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sc: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Json { path: side.clone(), source: e })?;
    let classifier = Classifier { weights: sc.weights, bias: sc.bias, classes: sc.classes };
    let scene = Scene { gaussians, classifier, sh_degree, metadata: sc.metadata };
    scene.validate()?;
    Ok(scene)
}

/// Colored points for initialization: `x y z` plus `red green blue` (0–255 integers
/// or 0–1 floats). Points without color get mid gray.
pub fn load_points(path: &Path) -> Result<Vec<([f64; 3], [f64; 3])>> {
    let table = read_vertices(path)?;
    let c = |n: &str| table.column(n).ok_or_else(|| Error::malformed(path, format!("missing property {n}")));
    let (x, y, z) = (c("x")?, c("y")?, c("z")?);
    let rgb = match (table.column("red"), table.column("green"), table.column("blue")) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        _ => None,
    };
    let integer = {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let (_, els) = parse_header(path, &mut BufReader::new(f))?;
        els.iter()
            .find(|e| e.name == "vertex")
            .and_then(|e| e.properties.iter().find(|p| p.0 == "red"))
            .is_some_and(|p| !matches!(p.1, ScalarType::F32 | ScalarType::F64))
    };
    let div = if integer { 255.0 } else { 1.0 };
    Ok(table
        .rows
        .iter()
        .map(|r| {
            let color = rgb.map_or([0.5; 3], |c| c.map(|i| r[i] / div));
            ([r[x], r[y], r[z]], color)
        })
        .collect())
}

/// Writes colored points as binary PLY with `double` positions and `uchar` colors.
pub fn save_points(points: &[([f64; 3], [f64; 3])], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "ply\nformat binary_little_endian 1.0\nelement vertex {}", points.len()).unwrap();
    for n in ["x", "y", "z"] {
        writeln!(out, "property double {n}").unwrap();
    }
    for n in ["red", "green", "blue"] {
        writeln!(out, "property uchar {n}").unwrap();
    }
    writeln!(out, "end_header").unwrap();
    for (p, c) in points {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend(c.map(crate::image::quantize));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
