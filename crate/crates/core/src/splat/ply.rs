//! Binary little-endian PLY in the common 3DGS layout.
//!
//! Unknown per-vertex properties (normals, higher-order SH coefficients, ...)
//! are carried through as raw bytes so that rewriting a loaded file only
//! touches the fields that actually changed.

use std::fs;
use std::io::{BufRead, Cursor, Read};
use std::path::Path;

use nalgebra::Vector3;

use super::{normalize_quat, Splat, SplatCloud, SplatError};

const REQUIRED: [&str; 14] = [
    "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
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
}

/// Property layout of a loaded file together with the raw vertex records.
#[derive(Debug, Clone)]
pub struct PlyLayout {
    header: String,
    record_size: usize,
    /// (offset, type) of each entry of `REQUIRED`.
    fields: [(usize, Scalar); 14],
    records: Vec<u8>,
    trailing: Vec<u8>,
}

impl PlyLayout {
    fn read(&self, row: usize, field: usize) -> f64 {
        let (off, ty) = self.fields[field];
        let base = row * self.record_size + off;
        let b = &self.records[base..base + ty.size()];
        match ty {
            Scalar::F32 => f32::from_le_bytes(b.try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b.try_into().unwrap()),
            // integer-typed splat fields are rejected at parse time
            _ => unreachable!(),
        }
    }
}

fn decode_row(layout: &PlyLayout, row: usize) -> Result<Splat, SplatError> {
    let f = |i| layout.read(row, i);
    let rot = normalize_quat(f(10), f(11), f(12), f(13)).ok_or(SplatError::NormalizationFailure(row))?;
    Ok(Splat {
        mu: Vector3::new(f(0), f(1), f(2)),
        color: Vector3::new(f(3), f(4), f(5)),
        opacity: sigmoid(f(6)),
        scale: Vector3::new(f(7).exp(), f(8).exp(), f(9).exp()),
        rot,
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Encoded (on-disk) values of the 14 required fields for a splat.
fn encode(s: &Splat) -> [f64; 14] {
    let q = s.rot.quaternion();
    [
        s.mu.x,
        s.mu.y,
        s.mu.z,
        s.color.x,
        s.color.y,
        s.color.z,
        logit(s.opacity),
        s.scale.x.ln(),
        s.scale.y.ln(),
        s.scale.z.ln(),
        q.w,
        q.i,
        q.j,
        q.k,
    ]
}

fn header_error(msg: impl Into<String>) -> SplatError {
    SplatError::MalformedHeader(msg.into())
}

pub fn read_ply(bytes: &[u8]) -> Result<SplatCloud, SplatError> {
    let mut cur = Cursor::new(bytes);
    let mut header = String::new();
    let mut line = String::new();
    cur.read_line(&mut line)?;
    if line.trim_end() != "ply" {
        return Err(header_error("missing `ply` magic"));
    }
    header.push_str(&line);

    let mut vertex_count: Option<usize> = None;
    let mut in_vertex = false;
    let mut seen_other_element = false;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    let mut format_ok = false;
    loop {
        line.clear();
        if cur.read_line(&mut line)? == 0 {
            return Err(header_error("unterminated header"));
        }
        header.push_str(&line);
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", "binary_little_endian", "1.0"] => format_ok = true,
            ["format", ..] => return Err(header_error(format!("unsupported format `{}`", line.trim()))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", "vertex", n] => {
                if vertex_count.is_some() || seen_other_element {
                    return Err(header_error("vertex must be the first and only vertex element"));
                }
                vertex_count = Some(n.parse().map_err(|_| header_error("bad vertex count"))?);
                in_vertex = true;
            }
            ["element", ..] => {
                in_vertex = false;
                seen_other_element = true;
            }
            ["property", "list", ..] if in_vertex => {
                return Err(header_error("list properties on vertices are not supported"))
            }
            ["property", ty, name] => {
                if in_vertex {
                    let ty = Scalar::parse(ty).ok_or_else(|| header_error(format!("unknown type `{ty}`")))?;
                    props.push((name.to_string(), ty));
                }
            }
            ["property", ..] => {}
            _ => return Err(header_error(format!("unexpected header line `{}`", line.trim()))),
        }
    }
    if !format_ok {
        return Err(header_error("missing binary_little_endian format line"));
    }
    let n = vertex_count.ok_or_else(|| header_error("no vertex element"))?;

    let mut fields = [(0usize, Scalar::F32); 14];
    let mut offset = 0;
    let mut found = [false; 14];
    for (name, ty) in &props {
        if let Some(i) = REQUIRED.iter().position(|r| r == name) {
            if !matches!(ty, Scalar::F32 | Scalar::F64) {
                return Err(header_error(format!("property `{name}` must be float or double")));
            }
            fields[i] = (offset, *ty);
            found[i] = true;
        }
        offset += ty.size();
    }
    if let Some(i) = found.iter().position(|f| !f) {
        return Err(SplatError::MissingField(REQUIRED[i].to_string()));
    }
    if n == 0 {
        return Err(SplatError::EmptyCloud);
    }
    let record_size = offset;
    let mut records = vec![0u8; n * record_size];
    cur.read_exact(&mut records)
        .map_err(|_| header_error(format!("body shorter than {n} records")))?;
    let mut trailing = Vec::new();
    cur.read_to_end(&mut trailing)?;

    let layout = PlyLayout {
        header,
        record_size,
        fields,
        records,
        trailing,
    };
    let splats = (0..n).map(|i| decode_row(&layout, i)).collect::<Result<Vec<_>, _>>()?;
    Ok(SplatCloud {
        splats,
        layout: Some(layout),
    })
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<SplatCloud, SplatError> {
    read_ply(&fs::read(path)?)
}

fn put(buf: &mut [u8], ty: Scalar, v: f64) {
    match ty {
        Scalar::F32 => buf.copy_from_slice(&(v as f32).to_le_bytes()),
        Scalar::F64 => buf.copy_from_slice(&v.to_le_bytes()),
        _ => unreachable!(),
    }
}

pub fn write_ply(cloud: &SplatCloud) -> Result<Vec<u8>, SplatError> {
    if cloud.is_empty() {
        return Err(SplatError::EmptyCloud);
    }
    match &cloud.layout {
        Some(layout) if layout.records.len() == layout.record_size * cloud.len() => {
            let mut out = layout.header.clone().into_bytes();
            let mut records = layout.records.clone();
            for (row, s) in cloud.splats.iter().enumerate() {
                // unchanged splats keep their stored bytes verbatim
                if decode_row(layout, row).ok().as_ref() == Some(s) {
                    continue;
                }
                let enc = encode(s);
                for (i, v) in enc.iter().enumerate() {
                    let (off, ty) = layout.fields[i];
                    let base = row * layout.record_size + off;
                    put(&mut records[base..base + ty.size()], ty, *v);
                }
            }
            out.extend_from_slice(&records);
            out.extend_from_slice(&layout.trailing);
            Ok(out)
        }
        _ => {
            let mut out = String::from("ply\nformat binary_little_endian 1.0\n");
            out.push_str(&format!("element vertex {}\n", cloud.len()));
            for name in REQUIRED {
                out.push_str(&format!("property float {name}\n"));
            }
            out.push_str("end_header\n");
            let mut out = out.into_bytes();
            out.reserve(cloud.len() * 14 * 4);
            for s in &cloud.splats {
                for v in encode(s) {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            Ok(out)
        }
    }
}

pub fn save_ply(cloud: &SplatCloud, path: impl AsRef<Path>) -> Result<(), SplatError> {
    let bytes = write_ply(cloud)?;
    fs::write(path, bytes)?;
    Ok(())
}


#[cfg(test)]
mod tests {
    use super::*;

    fn one_splat_bytes(raw: [f32; 14]) -> Vec<u8> {
        let mut out = String::from("ply\nformat binary_little_endian 1.0\nelement vertex 1\n");
        for name in REQUIRED {
            out.push_str(&format!("property float {name}\n"));
        }
        out.push_str("end_header\n");
        let mut out = out.into_bytes();
        for v in raw {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    #[test]
    fn raw_values_are_activated() {
        let mut raw = [0f32; 14];
        raw[10] = 1.0;
        let cloud = read_ply(&one_splat_bytes(raw)).unwrap();
        let s = &cloud.splats[0];
        assert_eq!(s.scale, Vector3::new(1.0, 1.0, 1.0));
        assert_eq!(s.opacity, 0.5);
    }

    #[test]
    fn zero_quaternion_fails() {
        let raw = [0f32; 14];
        assert!(matches!(read_ply(&one_splat_bytes(raw)), Err(SplatError::NormalizationFailure(0))));
    }

    #[test]
    fn quaternion_is_normalized() {
        let mut raw = [0f32; 14];
        raw[10] = 2.0;
        raw[11] = 2.0;
        let s = &read_ply(&one_splat_bytes(raw)).unwrap().splats[0];
        assert!((s.rot.quaternion().norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn inverse_transforms_on_save() {
        let s = Splat::isotropic(Vector3::new(1.0, 2.0, 3.0), 1.0, 0.5, Vector3::zeros());
        let bytes = write_ply(&SplatCloud::new(vec![s])).unwrap();
        let body = &bytes[bytes.len() - 56..];
        let vals: Vec<f32> = body.chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        assert_eq!(&vals[..3], &[1.0, 2.0, 3.0]);
        assert_eq!(vals[6], 0.0); // logit(0.5)
        assert_eq!(&vals[7..10], &[0.0, 0.0, 0.0]); // log(1)
        assert_eq!(&vals[10..], &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn missing_field() {
        let bytes = b"ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty float x\nend_header\n\0\0\0\0";
        assert!(matches!(read_ply(bytes), Err(SplatError::MissingField(f)) if f == "y"));
    }

    #[test]
    fn ascii_is_rejected() {
        let bytes = b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nend_header\n1\n";
        assert!(matches!(read_ply(bytes), Err(SplatError::MalformedHeader(_))));
    }

    #[test]
    fn empty_cloud() {
        let raw = one_splat_bytes([0.0; 14]);
        let text = String::from_utf8_lossy(&raw).replace("element vertex 1", "element vertex 0");
        let end = text.find("end_header\n").unwrap() + "end_header\n".len();
        assert!(matches!(read_ply(&text.as_bytes()[..end]), Err(SplatError::EmptyCloud)));
    }

    #[test]
    fn fixture_round_trip_is_byte_exact() {
        for seed in 0..4 {
            let bytes = fixture::random_ply_bytes(100, seed);
            let cloud = read_ply(&bytes).unwrap();
            assert_eq!(cloud.len(), 100);
            assert_eq!(write_ply(&cloud).unwrap(), bytes);
        }
    }

    #[test]
    fn edited_splats_are_rewritten_extras_kept() {
        let bytes = fixture::random_ply_bytes(10, 3);
        let mut cloud = read_ply(&bytes).unwrap();
        cloud.splats[4].mu.x = 42.0;
        let out = write_ply(&cloud).unwrap();
        let back = read_ply(&out).unwrap();
        assert_eq!(back.splats[4].mu.x, 42.0);
        for i in (0..10).filter(|&i| i != 4) {
            assert_eq!(back.splats[i], cloud.splats[i]);
        }
        // f_rest payload of the edited row is untouched
        let layout = cloud.layout.as_ref().unwrap();
        let start = layout.header.len() + 4 * layout.record_size + 9 * 4;
        assert_eq!(&out[start..start + 36], &bytes[start..start + 36]);
    }
}
