//! Binary PLY surfel maps and CSV tables.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::deformation::DeformGraph;
use crate::lie::{Pose, LieError};
use crate::surfel_map::{DenseSurfel, SurfelMap};
use crate::{Mat3, Vec3};

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Lie(#[from] LieError),
}

fn parse_err(offset: usize, message: impl Into<String>) -> IoError {
    IoError::Parse {
        offset,
        message: message.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Float,
    Double,
    Uint,
    Uchar,
}

impl Kind {
    fn name(self) -> &'static str {
        match self {
            Kind::Float => "float",
            Kind::Double => "double",
            Kind::Uint => "uint",
            Kind::Uchar => "uchar",
        }
    }

    fn size(self) -> usize {
        match self {
            Kind::Float | Kind::Uint => 4,
            Kind::Double => 8,
            Kind::Uchar => 1,
        }
    }
}

const SYM: [(usize, usize); 6] = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];

/// Vertex properties of a surfel map, in file order.
pub const SURFEL_FIELDS: [&str; 33] = [
    "x", "y", "z", "nx", "ny", "nz", "radius", "red", "green", "blue", "colour_sigma", "pc00", "pc01", "pc02", "pc11", "pc12", "pc22", "sc00",
    "sc01", "sc02", "sc11", "sc12", "sc22", "qc00", "qc01", "qc02", "qc11", "qc12", "qc22", "dof", "obs_count", "timestamp", "stable",
];

fn kind_of(field: &str) -> Kind {
    match field {
        "obs_count" => Kind::Uint,
        "timestamp" => Kind::Double,
        "stable" => Kind::Uchar,
        _ => Kind::Float,
    }
}

fn fields() -> impl Iterator<Item = &'static str> {
    SURFEL_FIELDS.iter().copied()
}

fn stride() -> usize {
    fields().map(|f| kind_of(f).size()).sum()
}

/// Flat f64 view of a surfel, one value per field.
fn surfel_values(s: &DenseSurfel) -> Vec<f64> {
    let mut v = Vec::with_capacity(33);
    v.extend(s.position.iter());
    v.extend(s.normal.iter());
    v.push(s.radius);
    v.extend(s.colour);
    v.push(s.colour_sigma);
    for m in [&s.position_cov, &s.scatter, &s.beam_noise] {
        v.extend(SYM.iter().map(|&(i, j)| m[(i, j)]));
    }
    v.push(s.dof);
    v.push(s.obs_count as f64);
    v.push(s.timestamp);
    v.push(if s.stable { 1.0 } else { 0.0 });
    v
}

fn surfel_from_values(v: &[f64]) -> DenseSurfel {
    let sym = |o: usize| {
        let mut m = Mat3::zeros();
        for (k, &(i, j)) in SYM.iter().enumerate() {
            m[(i, j)] = v[o + k];
            m[(j, i)] = v[o + k];
        }
        m
    };
    DenseSurfel {
        position: Vec3::new(v[0], v[1], v[2]),
        normal: Vec3::new(v[3], v[4], v[5]),
        radius: v[6],
        colour: [v[7], v[8], v[9]],
        colour_sigma: v[10],
        position_cov: sym(11),
        scatter: sym(17),
        beam_noise: sym(23),
        dof: v[29],
        obs_count: v[30] as u32,
        timestamp: v[31],
        stable: v[32] != 0.0,
    }
}

/// Serializes `map` as binary little-endian PLY, surfels in id order.
pub fn encode_ply(map: &SurfelMap) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(b"ply\nformat binary_little_endian 1.0\n");
    out.extend_from_slice(format!("comment ctmap surfel map v{}\n", env!("CARGO_PKG_VERSION")).as_bytes());
    out.extend_from_slice(format!("element vertex {}\n", map.len()).as_bytes());
    for f in fields() {
        out.extend_from_slice(format!("property {} {}\n", kind_of(f).name(), f).as_bytes());
    }
    out.extend_from_slice(b"end_header\n");
    for (_, s) in map.iter() {
        for (f, value) in fields().zip(surfel_values(s)) {
            match kind_of(f) {
                Kind::Float => out.extend_from_slice(&(value as f32).to_le_bytes()),
                Kind::Double => out.extend_from_slice(&value.to_le_bytes()),
                Kind::Uint => out.extend_from_slice(&(value as u32).to_le_bytes()),
                Kind::Uchar => out.push(value as u8),
            }
        }
    }
    out
}

/// Parses a PLY written by [`encode_ply`]. Nothing is returned unless the
/// whole file is valid.
pub fn decode_ply(bytes: &[u8]) -> Result<Vec<DenseSurfel>, IoError> {
    let mut offset = 0;
    let mut line = |expect: &str| -> Result<(usize, String), IoError> {
        let start = offset;
        let end = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| parse_err(start, format!("unterminated header, expected {expect}")))?;
        offset = start + end + 1;
        let text = std::str::from_utf8(&bytes[start..start + end]).map_err(|_| parse_err(start, "header is not UTF-8"))?;
        Ok((start, text.trim_end_matches('\r').to_string()))
    };
    let (at, magic) = line("ply")?;
    if magic != "ply" {
        return Err(parse_err(at, "missing ply magic"));
    }
    let (at, format) = line("format")?;
    if format != "format binary_little_endian 1.0" {
        return Err(parse_err(at, format!("unsupported format line {format:?}")));
    }
    let mut count = None;
    let mut props = Vec::new();
    loop {
        let (at, text) = line("end_header")?;
        let words: Vec<&str> = text.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| parse_err(at, format!("bad vertex count {n:?}")))?);
            }
            ["property", kind, name] => props.push((at, kind.to_string(), name.to_string())),
            _ => return Err(parse_err(at, format!("unexpected header line {text:?}"))),
        }
    }
    let count = count.ok_or_else(|| parse_err(offset, "no vertex element"))?;
    let expected: Vec<&str> = fields().collect();
    if props.len() != expected.len() {
        return Err(parse_err(offset, format!("expected {} properties, found {}", expected.len(), props.len())));
    }
    for ((at, kind, name), want) in props.iter().zip(&expected) {
        if name != want || kind != kind_of(want).name() {
            return Err(parse_err(*at, format!("expected property {} {}, found {} {}", kind_of(want).name(), want, kind, name)));
        }
    }
    let body = &bytes[offset..];
    let stride = stride();
    let needed = count.checked_mul(stride).ok_or_else(|| parse_err(offset, "vertex count overflows"))?;
    if body.len() < needed {
        return Err(parse_err(bytes.len(), format!("truncated body: {} of {} bytes", body.len(), needed)));
    }
    if body.len() > needed {
        return Err(parse_err(offset + needed, "trailing bytes after vertex data"));
    }
    let mut out = Vec::with_capacity(count);
    let mut pos = 0;
    for _ in 0..count {
        let mut values = Vec::with_capacity(expected.len());
        for f in &expected {
            let k = kind_of(f);
            let chunk = &body[pos..pos + k.size()];
            values.push(match k {
                Kind::Float => f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64,
                Kind::Double => f64::from_le_bytes(chunk.try_into().expect("8 bytes")),
                Kind::Uint => u32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64,
                Kind::Uchar => chunk[0] as f64,
            });
            pos += k.size();
        }
        out.push(surfel_from_values(&values));
    }
    Ok(out)
}

pub fn write_ply(path: &Path, map: &SurfelMap) -> Result<(), IoError> {
    fs::write(path, encode_ply(map))?;
    Ok(())
}

pub fn read_ply(path: &Path) -> Result<Vec<DenseSurfel>, IoError> {
    decode_ply(&fs::read(path)?)
}

/// Surfel table with the PLY field names as columns; values are rounded to
/// the PLY storage precision so both formats hold identical numbers.
pub fn write_surfel_csv<W: Write>(out: W, surfels: &[DenseSurfel]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(fields())?;
    for s in surfels {
        let row: Vec<String> = fields()
            .zip(surfel_values(s))
            .map(|(f, v)| match kind_of(f) {
                Kind::Float => (v as f32).to_string(),
                Kind::Double => v.to_string(),
                Kind::Uint | Kind::Uchar => (v as u64).to_string(),
            })
            .collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_surfel_csv<R: std::io::Read>(input: R) -> Result<Vec<DenseSurfel>, IoError> {
    let mut r = csv::Reader::from_reader(input);
    let expected: Vec<&str> = fields().collect();
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != expected {
        return Err(parse_err(0, "surfel CSV header does not match the surfel fields"));
    }
    let mut out = Vec::new();
    for record in r.records() {
        let record = record?;
        let at = record.position().map_or(0, |p| p.byte() as usize);
        let values = record
            .iter()
            .zip(fields())
            .map(|(v, f)| {
                let x = v.parse::<f64>().map_err(|_| parse_err(at, format!("bad number {v:?}")))?;
                Ok(if kind_of(f) == Kind::Float { x as f32 as f64 } else { x })
            })
            .collect::<Result<Vec<f64>, IoError>>()?;
        if record.len() != expected.len() {
            return Err(parse_err(at, "wrong column count"));
        }
        out.push(surfel_from_values(&values));
    }
    Ok(out)
}

/// Trajectory as `t,tx,ty,tz,rx,ry,rz` with rotation vectors in radians.
pub fn write_trajectory_csv<'a, W: Write>(out: W, poses: impl IntoIterator<Item = (f64, &'a Pose)>) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "tx", "ty", "tz", "rx", "ry", "rz"])?;
    for (t, pose) in poses {
        let r = pose.rotation_vector()?;
        let p = pose.translation();
        w.write_record([t, p.x, p.y, p.z, r.x, r.y, r.z].map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory_csv<R: std::io::Read>(input: R) -> Result<Vec<(f64, Pose)>, IoError> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for record in r.records() {
        let record = record?;
        let at = record.position().map_or(0, |p| p.byte() as usize);
        let v = record
            .iter()
            .map(|x| x.parse::<f64>().map_err(|_| parse_err(at, format!("bad number {x:?}"))))
            .collect::<Result<Vec<f64>, _>>()?;
        if v.len() != 7 {
            return Err(parse_err(at, "trajectory rows need 7 columns"));
        }
        out.push((v[0], Pose::from_rotation_vector(Vec3::new(v[4], v[5], v[6]), Vec3::new(v[1], v[2], v[3]))));
    }
    Ok(out)
}

/// Writes serializable rows with a header taken from the field names.
pub fn write_rows<W: Write, T: Serialize>(out: W, rows: &[T]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
struct GraphRow {
    node: usize,
    gx: f64,
    gy: f64,
    gz: f64,
    tx: f64,
    ty: f64,
    tz: f64,
    rx: f64,
    ry: f64,
    rz: f64,
    timestamp: f64,
}

/// Node snapshot `node,gx,gy,gz,tx,ty,tz,rx,ry,rz,timestamp`.
pub fn write_graph_csv<W: Write>(out: W, graph: &DeformGraph) -> Result<(), IoError> {
    let rows = graph
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let r = crate::lie::so3::log(&n.rotation)?;
            Ok(GraphRow {
                node: i,
                gx: n.position.x,
                gy: n.position.y,
                gz: n.position.z,
                tx: n.translation.x,
                ty: n.translation.y,
                tz: n.translation.z,
                rx: r.x,
                ry: r.y,
                rz: r.z,
                timestamp: n.timestamp,
            })
        })
        .collect::<Result<Vec<_>, IoError>>()?;
    write_rows(out, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn surfel(i: usize) -> DenseSurfel {
        let f = i as f64;
        DenseSurfel {
            position: Vec3::new(f * 0.1, -f, 1.0 / (f + 1.0)),
            normal: Vec3::z(),
            position_cov: Mat3::identity() * 1e-6 * (f + 1.0),
            scatter: Mat3::new(2.0, 0.1, 0.0, 0.1, 1.0, 0.0, 0.0, 0.0, 1e-4),
            dof: 5.0 + f,
            obs_count: i as u32,
            timestamp: 1e6 + f / 3.0,
            radius: 0.02,
            colour: [0.1, 0.2, 0.3],
            colour_sigma: 0.1,
            stable: i % 2 == 0,
            beam_noise: Mat3::identity() * 1e-5,
        }
    }

    #[test]
    fn empty_map_round_trip() {
        let bytes = encode_ply(&SurfelMap::new(8));
        assert!(decode_ply(&bytes).unwrap().is_empty());
    }

    #[test]
    fn round_trip_is_bit_exact_after_one_pass() {
        let map = SurfelMap::from_surfels((0..50).map(surfel));
        let bytes = encode_ply(&map);
        let back = decode_ply(&bytes).unwrap();
        assert_eq!(back.len(), 50);
        assert_eq!(back[3].timestamp, surfel(3).timestamp);
        assert_eq!(encode_ply(&SurfelMap::from_surfels(back)), bytes);
    }

    #[test]
    fn truncated_body_reports_offset() {
        let bytes = encode_ply(&SurfelMap::from_surfels((0..3).map(surfel)));
        let cut = &bytes[..bytes.len() - 5];
        match decode_ply(cut) {
            Err(IoError::Parse { offset, .. }) => assert_eq!(offset, cut.len()),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_property_reports_its_line() {
        let bytes = encode_ply(&SurfelMap::new(8));
        let text = String::from_utf8(bytes).unwrap().replace("property float nx", "property float qq");
        let at = text.find("property float qq").unwrap();
        match decode_ply(text.as_bytes()) {
            Err(IoError::Parse { offset, .. }) => assert_eq!(offset, at),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
