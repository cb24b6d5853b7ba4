//! Depth frames, depth image codecs (16-bit PNG and binary PGM), TUM-style
//! trajectories and intrinsics files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{Intrinsics, Pose};
use crate::error::{Error, Result};

/// Ticks per meter used by the TUM RGB-D benchmark.
pub const TUM_DEPTH_SCALE: f64 = 5000.0;

/// A calibrated depth image. Invalid pixels carry depth 0.
#[derive(Debug, Clone)]
pub struct DepthFrame {
    depth: Vec<f64>,
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

impl DepthFrame {
    /// Builds a frame from row-major depths in meters. Non-finite or
    /// non-positive values become invalid pixels.
    pub fn from_depths(mut depth: Vec<f64>, intrinsics: Intrinsics, pose: Pose) -> Result<Self> {
        intrinsics.validate()?;
        if depth.len() != intrinsics.width * intrinsics.height {
            return Err(Error::invalid(format!(
                "{} depth values for a {}x{} image",
                depth.len(),
                intrinsics.width,
                intrinsics.height
            )));
        }
        for d in &mut depth {
            if !(d.is_finite() && *d > 0.0) {
                *d = 0.0;
            }
        }
        Ok(DepthFrame { depth, intrinsics, pose })
    }

    pub fn empty(intrinsics: Intrinsics, pose: Pose) -> Self {
        DepthFrame {
            depth: vec![0.0; intrinsics.width * intrinsics.height],
            intrinsics,
            pose,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    #[inline]
    pub fn depth(&self, m: usize, n: usize) -> f64 {
        self.depth[n * self.intrinsics.width + m]
    }

    #[inline]
    pub fn is_valid(&self, m: usize, n: usize) -> bool {
        self.depth(m, n) > 0.0
    }

    pub fn depths(&self) -> &[f64] {
        &self.depth
    }

    pub fn valid_count(&self) -> usize {
        self.depth.iter().filter(|d| **d > 0.0).count()
    }

    /// Camera-frame point of a pixel, `Q^-1 (m, n, 1)^T z`. No validity check.
    #[inline]
    pub fn camera_point(&self, m: usize, n: usize) -> Vector3<f64> {
        self.intrinsics.ray(m as f64, n as f64) * self.depth(m, n)
    }

    /// World-frame point of a valid pixel, `R Q^-1 (m, n, 1)^T z + t`.
    pub fn backproject(&self, m: usize, n: usize) -> Result<Vector3<f64>> {
        if m >= self.width() || n >= self.height() || !self.is_valid(m, n) {
            return Err(Error::InvalidPixel { m, n });
        }
        Ok(self.pose.transform_point(&self.camera_point(m, n)))
    }

    /// All valid pixels as world points, row-major order.
    pub fn point_cloud(&self) -> Vec<Vector3<f64>> {
        let mut out = Vec::with_capacity(self.valid_count());
        for n in 0..self.height() {
            for m in 0..self.width() {
                if self.is_valid(m, n) {
                    out.push(self.pose.transform_point(&self.camera_point(m, n)));
                }
            }
        }
        out
    }

    pub fn with_pose(mut self, pose: Pose) -> Self {
        self.pose = pose;
        self
    }

    pub(crate) fn depths_mut(&mut self) -> &mut [f64] {
        &mut self.depth
    }
}

fn depth_from_raw(raw: &[u16], depth_scale: f64) -> Vec<f64> {
    raw.iter()
        .map(|&r| if r == 0 { 0.0 } else { r as f64 / depth_scale })
        .collect()
}

fn check_dims(intrinsics: &Intrinsics, w: usize, h: usize) -> Result<()> {
    if w != intrinsics.width || h != intrinsics.height {
        return Err(Error::DimensionMismatch {
            expected_w: intrinsics.width,
            expected_h: intrinsics.height,
            found_w: w,
            found_h: h,
        });
    }
    Ok(())
}

/// Loads a 16-bit depth image (PNG or binary PGM, chosen by magic bytes).
/// `depth = raw / depth_scale`; raw 0 marks an invalid pixel.
pub fn load_depth_frame(path: impl AsRef<Path>, depth_scale: f64, intrinsics: Intrinsics) -> Result<DepthFrame> {
    if !(depth_scale > 0.0 && depth_scale.is_finite()) {
        return Err(Error::invalid(format!("depth scale must be positive, got {depth_scale}")));
    }
    intrinsics.validate()?;
    let mut bytes = Vec::new();
    File::open(path.as_ref())?.read_to_end(&mut bytes)?;
    let (w, h, raw) = if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png16(&bytes)?
    } else if bytes.starts_with(b"P5") {
        decode_pgm16(&bytes)?
    } else {
        return Err(Error::format(format!(
            "{}: neither PNG nor binary PGM",
            path.as_ref().display()
        )));
    };
    check_dims(&intrinsics, w, h)?;
    Ok(DepthFrame {
        depth: depth_from_raw(&raw, depth_scale),
        intrinsics,
        pose: Pose::identity(),
    })
}

fn decode_png16(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| Error::format(format!("png: {e}")))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale {
        return Err(Error::format(format!("png: expected grayscale, got {:?}", info.color_type)));
    }
    if info.bit_depth != png::BitDepth::Sixteen {
        return Err(Error::format(format!("png: unsupported bit depth {:?}", info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format("png: image too large"))?;
    let mut buf = vec![0u8; size];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(format!("png: {e}")))?;
    let data = &buf[..frame.buffer_size()];
    if data.len() != w * h * 2 {
        return Err(Error::format("png: unexpected buffer size"));
    }
    let raw = data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Ok((w, h, raw))
}

fn decode_pgm16(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    // header: "P5" <ws> width <ws> height <ws> maxval <single ws> data; '#' comments allowed
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::format("pgm: truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format("pgm: bad header field"))?;
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if !(256..=65535).contains(&maxval) {
        return Err(Error::format(format!("pgm: unsupported bit depth (maxval {maxval})")));
    }
    let data = bytes
        .get(pos..pos + w * h * 2)
        .ok_or_else(|| Error::format("pgm: truncated pixel data"))?;
    let raw = data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Ok((w, h, raw))
}

fn quantize(frame: &DepthFrame, depth_scale: f64) -> Result<Vec<u16>> {
    frame
        .depth
        .iter()
        .map(|&d| {
            let raw = (d * depth_scale).round();
            if raw > u16::MAX as f64 {
                Err(Error::invalid(format!("depth {d} m overflows 16 bits at scale {depth_scale}")))
            } else {
                Ok(raw as u16)
            }
        })
        .collect()
}

pub fn save_depth_png(frame: &DepthFrame, depth_scale: f64, path: impl AsRef<Path>) -> Result<()> {
    let raw = quantize(frame, depth_scale)?;
    let file = BufWriter::new(File::create(path)?);
    let mut encoder = png::Encoder::new(file, frame.width() as u32, frame.height() as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Sixteen);
    let mut writer = encoder.write_header().map_err(|e| Error::format(format!("png: {e}")))?;
    let bytes: Vec<u8> = raw.iter().flat_map(|v| v.to_be_bytes()).collect();
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::format(format!("png: {e}")))?;
    Ok(())
}

pub fn save_depth_pgm(frame: &DepthFrame, depth_scale: f64, path: impl AsRef<Path>) -> Result<()> {
    let raw = quantize(frame, depth_scale)?;
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n# depth scale {depth_scale} ticks per meter\n{} {}\n65535\n", frame.width(), frame.height())?;
    for v in raw {
        out.write_all(&v.to_be_bytes())?;
    }
    Ok(())
}

/// One trajectory entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StampedPose {
    pub timestamp: f64,
    pub pose: Pose,
}

pub fn parse_trajectory(text: &str) -> Result<Vec<StampedPose>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(format!("trajectory line {}: {e}", lineno + 1)))?;
        if vals.len() != 8 {
            return Err(Error::format(format!(
                "trajectory line {}: expected 8 fields, got {}",
                lineno + 1,
                vals.len()
            )));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(format!("trajectory line {}: non-finite value", lineno + 1)));
        }
        let q = Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
        let norm = q.norm();
        if norm < 1e-12 {
            return Err(Error::format(format!("trajectory line {}: zero quaternion", lineno + 1)));
        }
        if (norm - 1.0).abs() > 1e-3 {
            log::warn!("trajectory line {}: quaternion norm {norm}, renormalizing", lineno + 1);
        }
        let t = Vector3::new(vals[1], vals[2], vals[3]);
        out.push(StampedPose {
            timestamp: vals[0],
            pose: Pose::from_quaternion(UnitQuaternion::from_quaternion(q), t),
        });
    }
    if out.is_empty() {
        return Err(Error::format("trajectory is empty"));
    }
    out.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    Ok(out)
}

/// Reads `timestamp tx ty tz qx qy qz qw` lines; `#` starts a comment line.
pub fn load_trajectory(path: impl AsRef<Path>) -> Result<Vec<StampedPose>> {
    parse_trajectory(&std::fs::read_to_string(path)?)
}

pub fn format_trajectory(poses: &[StampedPose]) -> String {
    let mut s = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for sp in poses {
        let q = sp.pose.quaternion();
        let t = sp.pose.translation;
        // {:?} on f64 prints the shortest representation that round-trips exactly
        s.push_str(&format!(
            "{:?} {:?} {:?} {:?} {:?} {:?} {:?} {:?}\n",
            sp.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
        ));
    }
    s
}

pub fn save_trajectory(poses: &[StampedPose], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, format_trajectory(poses))?;
    Ok(())
}

/// On-disk intrinsics description, JSON or `key value` / `key: value` text.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntrinsicsFile {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    #[serde(default = "default_depth_scale")]
    pub depth_scale: f64,
}

fn default_depth_scale() -> f64 {
    TUM_DEPTH_SCALE
}

impl IntrinsicsFile {
    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
    }
}

pub fn load_intrinsics(path: impl AsRef<Path>) -> Result<IntrinsicsFile> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let parsed: IntrinsicsFile = if text.trim_start().starts_with('{') {
        serde_json::from_str(&text).map_err(|e| Error::format(format!("intrinsics json: {e}")))?
    } else {
        let mut map = serde_json::Map::new();
        for line in BufReader::new(text.as_bytes()).lines() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.splitn(2, |c: char| c == ':' || c == '=' || c.is_whitespace());
            let key = parts.next().unwrap_or_default().trim();
            let value = parts.next().unwrap_or_default().trim();
            let v: f64 = value
                .parse()
                .map_err(|_| Error::format(format!("intrinsics: bad value for `{key}`")))?;
            let json = if key == "width" || key == "height" {
                serde_json::Value::from(v as u64)
            } else {
                serde_json::Value::from(v)
            };
            map.insert(key.to_string(), json);
        }
        serde_json::from_value(serde_json::Value::Object(map))
            .map_err(|e| Error::format(format!("intrinsics: {e}")))?
    };
    parsed.intrinsics()?;
    if parsed.depth_scale.is_nan() || parsed.depth_scale <= 0.0 {
        return Err(Error::format("intrinsics: depth_scale must be positive"));
    }
    Ok(parsed)
}

pub fn save_intrinsics(k: &Intrinsics, depth_scale: f64, path: impl AsRef<Path>) -> Result<()> {
    let f = IntrinsicsFile {
        fx: k.fx,
        fy: k.fy,
        cx: k.cx,
        cy: k.cy,
        width: k.width,
        height: k.height,
        depth_scale,
    };
    let json = serde_json::to_string_pretty(&f).map_err(|e| Error::format(e.to_string()))?;
    std::fs::write(path, json)?;
    Ok(())
}
