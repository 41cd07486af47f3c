//! Binary little-endian PLY in the layout common 3DGS viewers read, plus
//! extra per-vertex properties for the fields they do not know about.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scene::{GaussianCloud, GaussianPrimitive, Group, Quat, Vec3};

/// Zeroth-order spherical-harmonic constant; `f_dc` stores
/// `(color - 0.5) / SH_C0` like other 3DGS tools.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;

const DOUBLE_PROPS: [&str; 24] = [
    "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "f_rest_0", "f_rest_1",
    "f_rest_2", "f_rest_3", "f_rest_4", "f_rest_5", "f_rest_6", "f_rest_7", "f_rest_8", "opacity",
    "scale_0", "scale_1", "scale_2", "rot_0", "rot_1",
];

fn header(count: usize) -> String {
    let mut h = format!("ply\nformat binary_little_endian 1.0\nelement vertex {count}\n");
    for p in DOUBLE_PROPS.iter().chain(&["rot_2", "rot_3", "mask_logit"]) {
        h += &format!("property double {p}\n");
    }
    h += "property int group_id\nproperty int segment_id\n";
    for p in [
        "gamma_0", "gamma_1", "gamma_2", "color_0", "color_1", "color_2",
    ] {
        h += &format!("property double {p}\n");
    }
    h + "end_header\n"
}

/// Write `cloud` as PLY. `f_dc` is derived from the color for viewers;
/// `color_*` keeps the exact value.
pub fn write_ply(mut out: impl Write, cloud: &GaussianCloud) -> std::io::Result<()> {
    out.write_all(header(cloud.len()).as_bytes())?;
    let mut buf = Vec::with_capacity(cloud.len() * 270);
    for g in &cloud.gaussians {
        let mut d = |v: f64| buf.extend_from_slice(&v.to_le_bytes());
        g.position.iter().for_each(|&v| d(v));
        (0..3).for_each(|_| d(0.0));
        g.color.iter().for_each(|&c| d((c - 0.5) / SH_C0));
        for c in 0..3 {
            for k in 0..3 {
                d(g.sh1[k][c]);
            }
        }
        d(g.opacity_logit);
        g.log_scale.iter().for_each(|&v| d(v));
        g.rotation.iter().for_each(|&v| d(v));
        d(g.mask_logit);
        let group = g.group();
        buf.extend_from_slice(&(group.tag() as i32).to_le_bytes());
        buf.extend_from_slice(&group.segment().map_or(-1, |s| s as i32).to_le_bytes());
        let gamma = g.gamma().copied().unwrap_or_default();
        let mut d = |v: f64| buf.extend_from_slice(&v.to_le_bytes());
        gamma.iter().for_each(|&v| d(v));
        g.color.iter().for_each(|&v| d(v));
    }
    out.write_all(&buf)?;
    out.flush()
}

pub fn export_ply(path: &Path, cloud: &GaussianCloud) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_ply(std::io::BufWriter::new(file), cloud).map_err(|e| Error::io(path, e))
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

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format(format!("PLY: {}", msg.into()))
}

/// Read a binary little-endian PLY whose first element is `vertex`. Missing
/// properties take neutral defaults; only `x y z` are required.
pub fn read_ply(input: impl Read) -> Result<GaussianCloud> {
    let mut input = BufReader::new(input);
    let mut line = String::new();
    let next_line = |input: &mut BufReader<_>, line: &mut String| -> Result<()> {
        line.clear();
        match input.read_line(line) {
            Ok(0) => Err(bad("header ends early")),
            Ok(_) => Ok(()),
            Err(e) => Err(bad(e.to_string())),
        }
    };
    next_line(&mut input, &mut line)?;
    if line.trim_end() != "ply" {
        return Err(bad("missing magic"));
    }
    let mut count = None;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    let mut in_vertex = false;
    loop {
        next_line(&mut input, &mut line)?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["format", f, _] if *f != "binary_little_endian" => {
                return Err(bad(format!("unsupported format {f}")))
            }
            ["format", ..] | ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", "vertex", n] if count.is_none() => {
                count = Some(n.parse::<usize>().map_err(|_| bad("bad vertex count"))?);
                in_vertex = true;
            }
            ["element", ..] if count.is_none() => return Err(bad("first element must be vertex")),
            ["element", ..] => in_vertex = false,
            ["property", "list", ..] if in_vertex => {
                return Err(bad("list properties on vertices are not supported"))
            }
            ["property", ty, name] if in_vertex => {
                let ty = Scalar::parse(ty).ok_or_else(|| bad(format!("unknown type {ty}")))?;
                props.push((name.to_string(), ty));
            }
            ["property", ..] => {}
            _ => return Err(bad(format!("unexpected header line `{}`", line.trim_end()))),
        }
    }
    let count = count.ok_or_else(|| bad("no vertex element"))?;
    let stride: usize = props.iter().map(|p| p.1.size()).sum();
    let mut data = vec![
        0u8;
        count
            .checked_mul(stride)
            .ok_or_else(|| bad("vertex data too large"))?
    ];
    input
        .read_exact(&mut data)
        .map_err(|_| bad("vertex data truncated"))?;

    let offsets: Vec<usize> = props
        .iter()
        .scan(0, |o, p| {
            let at = *o;
            *o += p.1.size();
            Some(at)
        })
        .collect();
    let find = |name: &str| props.iter().position(|p| p.0 == name);
    for required in ["x", "y", "z"] {
        find(required).ok_or_else(|| bad(format!("missing property {required}")))?;
    }
    let columns: Vec<Option<usize>> = [
        "x",
        "y",
        "z",
        "f_dc_0",
        "f_dc_1",
        "f_dc_2",
        "f_rest_0",
        "f_rest_1",
        "f_rest_2",
        "f_rest_3",
        "f_rest_4",
        "f_rest_5",
        "f_rest_6",
        "f_rest_7",
        "f_rest_8",
        "opacity",
        "scale_0",
        "scale_1",
        "scale_2",
        "rot_0",
        "rot_1",
        "rot_2",
        "rot_3",
        "mask_logit",
        "group_id",
        "segment_id",
        "gamma_0",
        "gamma_1",
        "gamma_2",
        "color_0",
        "color_1",
        "color_2",
    ]
    .iter()
    .map(|n| find(n))
    .collect();

    let mut gaussians = Vec::with_capacity(count);
    for row in data.chunks_exact(stride.max(1)).take(count) {
        let get = |c: usize, default: f64| {
            columns[c].map_or(default, |k| props[k].1.read(&row[offsets[k]..]))
        };
        let position = Vec3::new(get(0, 0.0), get(1, 0.0), get(2, 0.0));
        let color = if columns[29].is_some() {
            Vec3::new(get(29, 0.5), get(30, 0.5), get(31, 0.5))
        } else {
            Vec3::new(get(3, 0.0), get(4, 0.0), get(5, 0.0)) * SH_C0 + Vec3::repeat(0.5)
        };
        let mut g = GaussianPrimitive::new(
            position,
            Vec3::new(get(16, -3.0), get(17, -3.0), get(18, -3.0)),
            0.5,
            color,
        );
        g.opacity_logit = get(15, 0.0);
        g.rotation = Quat::new(get(19, 1.0), get(20, 0.0), get(21, 0.0), get(22, 0.0));
        for c in 0..3 {
            for k in 0..3 {
                g.sh1[k][c] = get(6 + c * 3 + k, 0.0);
            }
        }
        g.mask_logit = get(23, 0.0);
        let tag = get(24, 0.0);
        let segment = get(25, -1.0);
        if tag.fract() != 0.0 || tag < 0.0 || segment.fract() != 0.0 {
            return Err(bad("group_id and segment_id must be integers"));
        }
        g.set_group(Group::from_tag(tag as u32, segment as i64)?);
        g.set_gamma(Vec3::new(get(26, 0.0), get(27, 0.0), get(28, 0.0)));
        gaussians.push(g);
    }
    Ok(GaussianCloud::new(gaussians))
}

pub fn import_ply(path: &Path) -> Result<GaussianCloud> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_ply(file)
}
