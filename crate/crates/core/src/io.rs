//! Point cloud files: whitespace-separated text, binary little-endian PLY
//! and raw little-endian f32 triplets.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::points::PointCloud;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudFormat {
    Xyz,
    Ply,
    RawF32,
}

impl CloudFormat {
    /// Chosen from the extension: `.ply`, `.bin`/`.raw`/`.f32`, anything
    /// else is text.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref() {
            Some("ply") => CloudFormat::Ply,
            Some("bin" | "raw" | "f32") => CloudFormat::RawF32,
            _ => CloudFormat::Xyz,
        }
    }
}

pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match CloudFormat::from_path(path) {
        CloudFormat::Xyz => {
            let text = String::from_utf8(bytes).map_err(|_| Error::Format {
                path: path.to_path_buf(),
                msg: "not valid UTF-8 text".into(),
            })?;
            parse_xyz(path, &text)
        }
        CloudFormat::Ply => parse_ply(path, &bytes),
        CloudFormat::RawF32 => parse_raw(path, &bytes),
    }
}

pub fn save_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    let bytes = match CloudFormat::from_path(path) {
        CloudFormat::Xyz => format_xyz(cloud).into_bytes(),
        CloudFormat::Ply => format_ply(cloud),
        CloudFormat::RawF32 => format_raw(cloud),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

fn finish(path: &Path, data: Vec<f64>) -> Result<PointCloud> {
    let n = data.len() / 3;
    if n == 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "no points".into(),
        });
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "non-finite coordinate".into(),
        });
    }
    PointCloud::new(Tensor::new(vec![n, 3], data)?)
}

/// One point per line; blank lines and lines starting with `#` are skipped.
/// Columns past the third are ignored.
pub fn parse_xyz(path: &Path, text: &str) -> Result<PointCloud> {
    let mut data = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split(|c: char| c.is_whitespace() || c == ',').filter(|s| !s.is_empty());
        for _ in 0..3 {
            let tok = cols.next().ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "expected three coordinates".into(),
            })?;
            let v: f64 = tok.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("bad number '{tok}'"),
            })?;
            data.push(v);
        }
    }
    finish(path, data)
}

pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut s = String::with_capacity(cloud.len() * 30);
    for r in cloud.tensor().data().chunks_exact(3) {
        s.push_str(&format!("{} {} {}\n", r[0] as f32, r[1] as f32, r[2] as f32));
    }
    s
}

fn parse_raw(path: &Path, bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() % 12 != 0 {
        let n = bytes.len() / 12 + 1;
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("truncated: expected {} bytes for {n} points, found {}", n * 12, bytes.len()),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    finish(path, data)
}

pub fn format_raw(cloud: &PointCloud) -> Vec<u8> {
    cloud
        .tensor()
        .data()
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect()
}

#[derive(Clone, Copy, Debug)]
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
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

/// Binary little-endian PLY whose first element is `vertex` with scalar
/// `x`, `y`, `z` properties; other vertex properties are skipped.
pub fn parse_ply(path: &Path, bytes: &[u8]) -> Result<PointCloud> {
    let fmt_err = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let marker = b"end_header";
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| fmt_err("missing end_header".into()))?;
    let mut body = end + marker.len();
    if bytes.get(body) == Some(&b'\r') {
        body += 1;
    }
    if bytes.get(body) != Some(&b'\n') {
        return Err(fmt_err("end_header must end its line".into()));
    }
    body += 1;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| fmt_err("header is not ASCII".into()))?;

    let mut lines = header.lines().map(str::trim).filter(|l| !l.is_empty());
    if lines.next() != Some("ply") {
        return Err(fmt_err("missing 'ply' magic".into()));
    }
    let mut count: Option<usize> = None;
    let mut in_vertex = false;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    let mut seen_format = false;
    for line in lines {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", f, _] => {
                if *f != "binary_little_endian" {
                    return Err(fmt_err(format!("unsupported PLY format '{f}'")));
                }
                seen_format = true;
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, n] => {
                if count.is_none() {
                    if *name != "vertex" {
                        return Err(fmt_err(format!("first element is '{name}', expected 'vertex'")));
                    }
                    count = Some(n.parse().map_err(|_| fmt_err(format!("bad vertex count '{n}'")))?);
                    in_vertex = true;
                } else {
                    in_vertex = false;
                }
            }
            ["property", "list", ..] if in_vertex => {
                return Err(fmt_err("list properties on vertices are not supported".into()));
            }
            ["property", ty, name] if in_vertex => {
                let s = Scalar::parse(ty).ok_or_else(|| fmt_err(format!("unknown property type '{ty}'")))?;
                props.push((name.to_string(), s));
            }
            ["property", ..] => {}
            _ => return Err(fmt_err(format!("unrecognized header line '{line}'"))),
        }
    }
    if !seen_format {
        return Err(fmt_err("missing format line".into()));
    }
    let n = count.ok_or_else(|| fmt_err("no vertex element".into()))?;
    let mut offsets = [usize::MAX; 3];
    let mut types = [Scalar::F32; 3];
    let mut stride = 0;
    for (name, s) in &props {
        if let Some(axis) = ["x", "y", "z"].iter().position(|a| a == name) {
            offsets[axis] = stride;
            types[axis] = *s;
        }
        stride += s.size();
    }
    if offsets.contains(&usize::MAX) {
        return Err(fmt_err("vertex element lacks x, y or z".into()));
    }
    let need = n * stride;
    let have = bytes.len() - body;
    if have < need {
        return Err(fmt_err(format!(
            "truncated: expected {need} bytes of vertex data, found {have}"
        )));
    }
    let mut data = Vec::with_capacity(n * 3);
    for rec in bytes[body..body + need].chunks_exact(stride) {
        for axis in 0..3 {
            data.push(types[axis].read(&rec[offsets[axis]..]));
        }
    }
    finish(path, data)
}

pub fn format_ply(cloud: &PointCloud) -> Vec<u8> {
    let mut out = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        cloud.len()
    )
    .into_bytes();
    out.extend(format_raw(cloud));
    out
}

/// Cloud files under `dir`, keyed by their relative path without extension
/// (`chair/0001` for `dir/chair/0001.ply`). Sorted by key.
pub fn index_clouds(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        ));
    }
    let mut out = BTreeMap::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::io(dir, e.into()))?;
        let p = entry.path();
        let ext = p.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
        if !entry.file_type().is_file() || !matches!(ext.as_str(), "xyz" | "txt" | "ply" | "bin" | "raw" | "f32") {
            continue;
        }
        let rel = p.strip_prefix(dir).expect("walk stays under its root").with_extension("");
        let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        out.insert(key, p.to_path_buf());
    }
    Ok(out)
}

/// Category of a cloud key: its first directory, or `default`.
pub fn category_of(key: &str) -> &str {
    key.split_once('/').map(|(c, _)| c).unwrap_or("default")
}
