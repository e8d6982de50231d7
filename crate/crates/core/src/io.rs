//! File formats.
//!
//! * PFM: `PF` (3 channels) or `Pf` (1 channel) header, `W H`, then a scale
//!   line whose sign gives endianness (negative = little-endian). Rows are
//!   stored bottom-up as `f32`.
//! * Poses: one row-major 3x4 `[R | t]` per line, whitespace separated.
//! * PLY: `x y z red green blue` vertices, ASCII by default.
//! * Manifest: JSON listing every file of a dataset directory.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{ray_unproject, RaySurface};
use crate::geometry::Pose;
use crate::grid::ImageGrid;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: field `{field}`: {message}")]
    Parse {
        path: PathBuf,
        field: String,
        message: String,
    },
    #[error("{path}: {message}")]
    Unsupported { path: PathBuf, message: String },
}

impl IoError {
    pub fn parse(path: &Path, field: impl Into<String>, message: impl Into<String>) -> Self {
        IoError::Parse {
            path: path.to_path_buf(),
            field: field.into(),
            message: message.into(),
        }
    }

    /// File the error refers to.
    pub fn path(&self) -> &Path {
        match self {
            IoError::Io { path, .. } | IoError::Parse { path, .. } | IoError::Unsupported { path, .. } => path,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(io_err(path))
}

pub fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(io_err(path))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// Encodes a 1- or 3-channel grid as little-endian PFM.
pub fn encode_pfm(grid: &ImageGrid) -> Result<Vec<u8>, String> {
    let magic = match grid.channels() {
        1 => "Pf",
        3 => "PF",
        c => return Err(format!("PFM supports 1 or 3 channels, got {c}")),
    };
    let (w, h, ch) = (grid.width(), grid.height(), grid.channels());
    let mut out = format!("{magic}\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * ch * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            for c in 0..ch {
                out.extend_from_slice(&(grid.get(x, y, c) as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<ImageGrid, IoError> {
    // three whitespace-terminated header lines
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(IoError::parse(path, "header", "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the scale from the raster
    pos += 1;
    let channels = match fields[0].as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(IoError::parse(path, "magic", format!("expected PF or Pf, got {other:?}"))),
    };
    let width: usize = fields[1]
        .parse()
        .map_err(|_| IoError::parse(path, "width", format!("{:?}", fields[1])))?;
    let height: usize = fields[2]
        .parse()
        .map_err(|_| IoError::parse(path, "height", format!("{:?}", fields[2])))?;
    let scale: f64 = fields[3]
        .parse()
        .map_err(|_| IoError::parse(path, "scale", format!("{:?}", fields[3])))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(IoError::parse(path, "scale", "must be non-zero"));
    }
    let little = scale < 0.0;
    let n = width * height * channels;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != n * 4 {
        return Err(IoError::parse(
            path,
            "raster",
            format!("expected {} bytes, found {}", n * 4, raster.len()),
        ));
    }
    let mut data = vec![0.0; n];
    for (i, chunk) in raster.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let row_from_bottom = i / (width * channels);
        let rest = i % (width * channels);
        data[(height - 1 - row_from_bottom) * width * channels + rest] = v as f64;
    }
    ImageGrid::new(height, width, channels, data).map_err(|e| IoError::parse(path, "raster", e.to_string()))
}

pub fn write_pfm(path: &Path, grid: &ImageGrid) -> Result<(), IoError> {
    let bytes = encode_pfm(grid).map_err(|message| IoError::Unsupported {
        path: path.to_path_buf(),
        message,
    })?;
    write_bytes(path, &bytes)
}

pub fn read_pfm(path: &Path) -> Result<ImageGrid, IoError> {
    decode_pfm(&read_bytes(path)?, path)
}

/// Writes an 8-bit PNG (values clamped to `[0, 1]`).
pub fn write_png(path: &Path, grid: &ImageGrid) -> Result<(), IoError> {
    let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let (w, h) = (grid.width() as u32, grid.height() as u32);
    let bytes: Vec<u8> = grid.data().iter().map(|&v| to_u8(v)).collect();
    let color = match grid.channels() {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => {
            return Err(IoError::Unsupported {
                path: path.to_path_buf(),
                message: format!("PNG export supports 1 or 3 channels, got {c}"),
            })
        }
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    image::save_buffer(path, &bytes, w, h, color).map_err(|e| IoError::Unsupported {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn format_poses(poses: &[Pose]) -> String {
    let mut s = String::new();
    for p in poses {
        let line: Vec<String> = p.to_3x4().iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

pub fn parse_poses(text: &str, path: &Path) -> Result<Vec<Pose>, IoError> {
    let mut poses = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .enumerate()
            .map(|(k, t)| {
                t.parse::<f64>()
                    .map_err(|_| IoError::parse(path, format!("line {} value {}", lineno + 1, k + 1), format!("{t:?}")))
            })
            .collect::<Result<_, _>>()?;
        let m: [f64; 12] = vals.as_slice().try_into().map_err(|_| {
            IoError::parse(
                path,
                format!("line {}", lineno + 1),
                format!("expected 12 values, found {}", vals.len()),
            )
        })?;
        poses.push(Pose::from_3x4(&m));
    }
    Ok(poses)
}

/// Poses are written with shortest round-trip formatting, so a reload is
/// bit-exact.
pub fn write_poses(path: &Path, poses: &[Pose]) -> Result<(), IoError> {
    write_bytes(path, format_poses(poses).as_bytes())
}

pub fn read_poses(path: &Path) -> Result<Vec<Pose>, IoError> {
    parse_poses(&read_text(path)?, path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

/// Writes coloured vertices; colours are in `[0, 1]`.
pub fn write_ply(
    path: &Path,
    points: &[Vector3<f64>],
    colors: &[[f64; 3]],
    format: PlyFormat,
) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut write = || -> std::io::Result<()> {
        write!(
            out,
            "ply\nformat {fmt} 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
            points.len()
        )?;
        for (p, c) in points.iter().zip(colors) {
            let rgb = [to_u8(c[0]), to_u8(c[1]), to_u8(c[2])];
            match format {
                PlyFormat::Ascii => writeln!(
                    out,
                    "{} {} {} {} {} {}",
                    p.x as f32, p.y as f32, p.z as f32, rgb[0], rgb[1], rgb[2]
                )?,
                PlyFormat::BinaryLittleEndian => {
                    for v in [p.x, p.y, p.z] {
                        out.write_all(&(v as f32).to_le_bytes())?;
                    }
                    out.write_all(&rgb)?;
                }
            }
        }
        out.flush()
    };
    write().map_err(io_err(path))
}

/// Vertices of a PLY written by [`write_ply`].
#[derive(Clone, Debug, PartialEq)]
pub struct PlyData {
    pub points: Vec<Vector3<f64>>,
    pub colors: Vec<[u8; 3]>,
}

pub fn read_ply(path: &Path) -> Result<PlyData, IoError> {
    let bytes = read_bytes(path)?;
    let marker = b"end_header\n";
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| IoError::parse(path, "header", "missing end_header"))?
        + marker.len();
    let header = String::from_utf8_lossy(&bytes[..end]);
    let mut count = None;
    let mut format = None;
    for line in header.lines() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| IoError::parse(path, "element vertex", *n))?)
            }
            ["format", "ascii", _] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", _] => format = Some(PlyFormat::BinaryLittleEndian),
            _ => {}
        }
    }
    let count = count.ok_or_else(|| IoError::parse(path, "element vertex", "missing"))?;
    let format = format.ok_or_else(|| IoError::parse(path, "format", "missing or unsupported"))?;
    let body = &bytes[end..];
    let mut points = Vec::with_capacity(count);
    let mut colors = Vec::with_capacity(count);
    match format {
        PlyFormat::Ascii => {
            let text = String::from_utf8_lossy(body);
            for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
                let t: Vec<&str> = line.split_whitespace().collect();
                if t.len() != 6 {
                    return Err(IoError::parse(path, format!("vertex {i}"), "expected 6 values"));
                }
                let f = |k: usize| {
                    t[k].parse::<f64>()
                        .map_err(|_| IoError::parse(path, format!("vertex {i}"), t[k]))
                };
                let c = |k: usize| {
                    t[k].parse::<u8>()
                        .map_err(|_| IoError::parse(path, format!("vertex {i}"), t[k]))
                };
                points.push(Vector3::new(f(0)?, f(1)?, f(2)?));
                colors.push([c(3)?, c(4)?, c(5)?]);
            }
        }
        PlyFormat::BinaryLittleEndian => {
            if body.len() != count * 15 {
                return Err(IoError::parse(path, "body", "length does not match vertex count"));
            }
            for rec in body.chunks_exact(15) {
                let f = |k: usize| f32::from_le_bytes([rec[k], rec[k + 1], rec[k + 2], rec[k + 3]]) as f64;
                points.push(Vector3::new(f(0), f(4), f(8)));
                colors.push([rec[12], rec[13], rec[14]]);
            }
        }
    }
    if points.len() != count {
        return Err(IoError::parse(
            path,
            "element vertex",
            format!("header says {count}, found {}", points.len()),
        ));
    }
    Ok(PlyData { points, colors })
}

/// Unprojects every pixel with `valid == true` (and positive depth) and
/// writes it as a coloured vertex. Returns the vertex count.
pub fn export_pointcloud(
    path: &Path,
    depth: &ImageGrid,
    surface: &RaySurface,
    image: &ImageGrid,
    valid: Option<&[bool]>,
    format: PlyFormat,
) -> Result<usize, IoError> {
    let bad = |m: String| IoError::Unsupported {
        path: path.to_path_buf(),
        message: m,
    };
    if image.height() != depth.height() || image.width() != depth.width() {
        return Err(bad("image and depth sizes differ".into()));
    }
    let keep: Vec<bool> = depth
        .data()
        .iter()
        .enumerate()
        .map(|(i, &d)| d > 0.0 && d.is_finite() && valid.is_none_or(|v| v[i]))
        .collect();
    // unproject with placeholder depth where masked
    let safe = ImageGrid::new(
        depth.height(),
        depth.width(),
        1,
        depth.data().iter().zip(&keep).map(|(&d, &k)| if k { d } else { 1.0 }).collect(),
    )
    .map_err(|e| bad(e.to_string()))?;
    let pts = ray_unproject(surface, &safe).map_err(|e| bad(e.to_string()))?;
    let mut points = Vec::new();
    let mut colors = Vec::new();
    for (i, p) in pts.into_iter().enumerate() {
        if !keep[i] {
            continue;
        }
        let px = image.pixel(i % depth.width(), i / depth.width());
        let rgb = if px.len() >= 3 { [px[0], px[1], px[2]] } else { [px[0]; 3] };
        points.push(p);
        colors.push(rgb);
    }
    write_ply(path, &points, &colors, format)?;
    Ok(points.len())
}

/// Files of one frame, relative to the dataset root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    pub image_png: String,
    pub image_pfm: String,
    pub depth: String,
}

/// Index of a rendered dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub height: usize,
    pub width: usize,
    /// Camera model and parameters, as written by the renderer.
    pub camera: serde_json::Value,
    pub frames: Vec<FrameEntry>,
    /// Camera-to-world poses, one per frame.
    pub poses: String,
    /// Ground-truth unit rays (3-channel PFM).
    pub surface: String,
    /// 1 inside the camera's field of view, 0 outside (1-channel PFM).
    pub surface_mask: String,
}

impl Manifest {
    pub fn read(root: &Path) -> Result<Manifest, IoError> {
        let path = root.join(MANIFEST_FILE);
        let text = read_text(&path)?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| {
            IoError::parse(&path, format!("line {} column {}", e.line(), e.column()), e.to_string())
        })?;
        if m.version != MANIFEST_VERSION {
            return Err(IoError::parse(
                &path,
                "version",
                format!("unsupported version {}", m.version),
            ));
        }
        m.check_files(root)?;
        Ok(m)
    }

    pub fn write(&self, root: &Path) -> Result<(), IoError> {
        let path = root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| IoError::Unsupported {
            path: path.clone(),
            message: e.to_string(),
        })?;
        write_bytes(&path, text.as_bytes())
    }

    /// Every listed file exists.
    pub fn check_files(&self, root: &Path) -> Result<(), IoError> {
        let manifest = root.join(MANIFEST_FILE);
        let mut listed: Vec<(String, &str)> = vec![
            ("poses".into(), &self.poses),
            ("surface".into(), &self.surface),
            ("surface_mask".into(), &self.surface_mask),
        ];
        for (i, f) in self.frames.iter().enumerate() {
            listed.push((format!("frames[{i}].image_png"), &f.image_png));
            listed.push((format!("frames[{i}].image_pfm"), &f.image_pfm));
            listed.push((format!("frames[{i}].depth"), &f.depth));
        }
        for (field, rel) in listed {
            if !root.join(rel).is_file() {
                return Err(IoError::parse(&manifest, field, format!("missing file {rel}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{pinhole_template, Intrinsics};
    use crate::geometry::{euler_to_pose, PoseParams};

    #[test]
    fn pfm_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for ch in [1, 3] {
            let g = ImageGrid::from_fn(5, 7, ch, |x, y, c| ((x * 31 + y * 7 + c) as f32 * 0.137 - 2.0) as f64);
            let p = dir.path().join(format!("g{ch}.pfm"));
            write_pfm(&p, &g).unwrap();
            assert_eq!(read_pfm(&p).unwrap(), g);
        }
        assert!(write_pfm(&dir.path().join("x.pfm"), &ImageGrid::zeros(2, 2, 2)).is_err());
    }

    #[test]
    fn pfm_rows_are_bottom_up() {
        let g = ImageGrid::from_fn(2, 1, 1, |_, y, _| y as f64);
        let bytes = encode_pfm(&g).unwrap();
        let header = b"Pf\n1 2\n-1.0\n".len();
        assert_eq!(&bytes[header..header + 4], &1.0f32.to_le_bytes());
    }

    #[test]
    fn pfm_big_endian_and_errors() {
        let mut bytes = b"Pf\n2 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&1.5f32.to_be_bytes());
        bytes.extend_from_slice(&(-3.0f32).to_be_bytes());
        let g = decode_pfm(&bytes, Path::new("be.pfm")).unwrap();
        assert_eq!(g.data(), &[1.5, -3.0]);
        let err = decode_pfm(b"P6\n1 1\n-1\n", Path::new("bad.pfm")).unwrap_err();
        assert!(err.to_string().contains("bad.pfm") && err.to_string().contains("magic"));
        assert!(decode_pfm(b"Pf\n2 2\n-1\n\0\0\0\0", Path::new("short.pfm")).is_err());
    }

    #[test]
    fn poses_round_trip_is_bit_exact() {
        let poses: Vec<Pose> = (0..4)
            .map(|i| euler_to_pose(&PoseParams::new([0.1 * i as f64, -0.3, 1.0 / 3.0], [0.2, -0.1 * i as f64, 0.7])))
            .collect();
        let text = format_poses(&poses);
        assert_eq!(text.lines().count(), 4);
        assert_eq!(parse_poses(&text, Path::new("p.txt")).unwrap(), poses);
        let err = parse_poses("1 2 3\n", Path::new("p.txt")).unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }

    #[test]
    fn pointcloud_unit_depth_lies_on_sphere() {
        let dir = tempfile::tempdir().unwrap();
        let s = pinhole_template(6, 8, &Intrinsics::default_for(6, 8), 1.0);
        let depth = ImageGrid::filled(6, 8, 1, 1.0);
        let img = ImageGrid::filled(6, 8, 3, 0.5);
        for format in [PlyFormat::Ascii, PlyFormat::BinaryLittleEndian] {
            let p = dir.path().join("c.ply");
            let n = export_pointcloud(&p, &depth, &s, &img, None, format).unwrap();
            assert_eq!(n, 48);
            let ply = read_ply(&p).unwrap();
            assert!(ply.points.iter().all(|v| (v.norm() - 1.0).abs() < 1e-6));
            assert!(ply.colors.iter().all(|c| *c == [128, 128, 128]));
        }
    }

    #[test]
    fn pointcloud_plane_is_coplanar_and_masked() {
        let dir = tempfile::tempdir().unwrap();
        let k = Intrinsics::default_for(6, 8);
        let s = pinhole_template(6, 8, &k, 1.0);
        let depth = ImageGrid::from_fn(6, 8, 1, |x, y, _| 2.5 / s.ray(x, y).z);
        let img = ImageGrid::filled(6, 8, 1, 0.2);
        let mut valid = vec![true; 48];
        valid[5] = false;
        valid[17] = false;
        let p = dir.path().join("plane.ply");
        let n = export_pointcloud(&p, &depth, &s, &img, Some(&valid), PlyFormat::Ascii).unwrap();
        assert_eq!(n, 46);
        let ply = read_ply(&p).unwrap();
        assert_eq!(ply.points.len(), 46);
        // plane-fit oracle: all z equal the plane distance (f32 precision)
        assert!(ply.points.iter().all(|v| (v.z - 2.5).abs() < 1e-6));
    }
}
