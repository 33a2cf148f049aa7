//! Raster and table formats: PFM depth, 16-bit PGM labels or quantised depth,
//! and metric CSV.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::spn::RegionMask;

use super::depth::DepthMap;
use super::metrics::MetricsReport;

pub const METRICS_CSV_HEADER: &str = "scene,rel,mae,imae,rmse,irmse,rmselog,d1,d2,d3";

fn format_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        offset,
        detail: detail.into(),
    }
}

/// Whitespace-separated header tokens with `#` comments, as in Netpbm files.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
    comments: Vec<String>,
}

impl<'a> Header<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Header {
            bytes,
            pos: 0,
            comments: Vec::new(),
        }
    }

    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    let start = self.pos + 1;
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                    self.comments
                        .push(String::from_utf8_lossy(&self.bytes[start..self.pos]).trim().to_string());
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn token(&mut self, what: &str) -> Result<(usize, &'a str)> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() && self.bytes[self.pos] != b'#' {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(format_err(start, format!("missing {what}")));
        }
        let s = std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| format_err(start, format!("{what} is not ASCII")))?;
        Ok((start, s))
    }

    fn number<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        let (at, s) = self.token(what)?;
        s.parse().map_err(|_| format_err(at, format!("bad {what} {s:?}")))
    }

    /// Consumes the single whitespace byte that ends the header.
    fn end(&mut self) -> Result<usize> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => Ok(self.pos + 1),
            _ => Err(format_err(self.pos, "header must end with one whitespace byte")),
        }
    }
}

fn check_payload(bytes: &[u8], start: usize, needed: usize) -> Result<()> {
    if bytes.len() < start + needed {
        return Err(format_err(
            bytes.len(),
            format!("truncated payload: need {needed} bytes from offset {start}, file has {}", bytes.len() - start.min(bytes.len())),
        ));
    }
    Ok(())
}

/// Little-endian grayscale PFM, rows stored bottom to top. Invalid pixels
/// are written as 0.
pub fn encode_pfm(d: &DepthMap) -> Vec<u8> {
    let (h, w) = d.dims();
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(4 * h * w);
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&(d.values()[y * w + x] as f32).to_le_bytes());
        }
    }
    out
}

/// Parses a grayscale PFM; pixels with value > 0 are valid.
pub fn decode_pfm(bytes: &[u8]) -> Result<DepthMap> {
    let mut hd = Header::new(bytes);
    let (at, magic) = hd.token("magic")?;
    if magic != "Pf" {
        return Err(format_err(at, format!("expected grayscale PFM magic \"Pf\", found {magic:?}")));
    }
    let w: usize = hd.number("width")?;
    let h: usize = hd.number("height")?;
    let scale_at = hd.pos;
    let scale: f64 = hd.number("scale")?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(format_err(scale_at, "scale must be a nonzero finite number"));
    }
    let start = hd.end()?;
    check_payload(bytes, start, 4 * h * w)?;
    let little = scale < 0.0;
    let mut values = vec![0.0; h * w];
    for (r, y) in (0..h).rev().enumerate() {
        for x in 0..w {
            let o = start + 4 * (r * w + x);
            let raw = [bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]];
            let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
            values[y * w + x] = v as f64;
        }
    }
    DepthMap::from_positive(h, w, values)
}

/// Binary 16-bit PGM (big-endian samples) with a `# scale=<s>` comment.
pub fn encode_pgm16(h: usize, w: usize, samples: &[u16], scale: f64) -> Result<Vec<u8>> {
    if samples.len() != h * w {
        return Err(crate::error::dim_err("encode_pgm16", format!("{} samples for {h}x{w}", samples.len())));
    }
    let mut out = format!("P5\n# scale={scale}\n{w} {h}\n65535\n").into_bytes();
    out.reserve(2 * samples.len());
    for s in samples {
        out.extend_from_slice(&s.to_be_bytes());
    }
    Ok(out)
}

/// Returns `(height, width, samples, scale)`; scale defaults to 1 when the
/// comment is absent.
pub fn decode_pgm16(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>, f64)> {
    let mut hd = Header::new(bytes);
    let (at, magic) = hd.token("magic")?;
    if magic != "P5" {
        return Err(format_err(at, format!("expected binary PGM magic \"P5\", found {magic:?}")));
    }
    let w: usize = hd.number("width")?;
    let h: usize = hd.number("height")?;
    let max_at = hd.pos;
    let maxval: u32 = hd.number("maxval")?;
    if !(256..=65535).contains(&maxval) {
        return Err(format_err(max_at, format!("maxval {maxval} is not a 16-bit range")));
    }
    let start = hd.end()?;
    let mut scale = 1.0;
    for c in &hd.comments {
        if let Some(v) = c.strip_prefix("scale=") {
            scale = v
                .trim()
                .parse()
                .map_err(|_| format_err(0, format!("bad scale comment {c:?}")))?;
        }
    }
    check_payload(bytes, start, 2 * h * w)?;
    let samples = bytes[start..start + 2 * h * w]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok((h, w, samples, scale))
}

pub fn encode_mask_pgm(mask: &RegionMask) -> Result<Vec<u8>> {
    let (h, w) = mask.dims();
    let samples = mask
        .labels()
        .iter()
        .map(|&l| u16::try_from(l).map_err(|_| Error::Config(format!("label {l} does not fit 16 bits"))))
        .collect::<Result<Vec<_>>>()?;
    encode_pgm16(h, w, &samples, 1.0)
}

pub fn decode_mask_pgm(bytes: &[u8]) -> Result<RegionMask> {
    let (h, w, samples, _) = decode_pgm16(bytes)?;
    RegionMask::new(h, w, samples.into_iter().map(u32::from).collect())
}

/// Depth quantised as `round(depth · scale)`; 0 marks invalid pixels.
pub fn encode_depth_pgm(d: &DepthMap, scale: f64) -> Result<Vec<u8>> {
    let (h, w) = d.dims();
    let samples = d
        .values()
        .iter()
        .zip(d.valid())
        .map(|(&v, &ok)| {
            if !ok {
                return Ok(0);
            }
            let q = (v * scale).round();
            if !(1.0..=65535.0).contains(&q) {
                return Err(Error::Config(format!("depth {v} at scale {scale} leaves the 16-bit range")));
            }
            Ok(q as u16)
        })
        .collect::<Result<Vec<_>>>()?;
    encode_pgm16(h, w, &samples, scale)
}

pub fn decode_depth_pgm(bytes: &[u8]) -> Result<DepthMap> {
    let (h, w, samples, scale) = decode_pgm16(bytes)?;
    DepthMap::from_positive(h, w, samples.into_iter().map(|s| f64::from(s) / scale).collect())
}

pub fn write_pfm(path: &Path, d: &DepthMap) -> Result<()> {
    Ok(fs::write(path, encode_pfm(d))?)
}

pub fn read_pfm(path: &Path) -> Result<DepthMap> {
    decode_pfm(&fs::read(path)?)
}

pub fn write_mask_pgm(path: &Path, mask: &RegionMask) -> Result<()> {
    Ok(fs::write(path, encode_mask_pgm(mask)?)?)
}

pub fn read_mask_pgm(path: &Path) -> Result<RegionMask> {
    decode_mask_pgm(&fs::read(path)?)
}

pub fn metrics_csv(rows: &[(String, MetricsReport)]) -> String {
    let mut out = format!("{METRICS_CSV_HEADER}\n");
    for (scene, m) in rows {
        out.push_str(scene);
        for v in m.to_array() {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<(String, MetricsReport)>> {
    let mut offset = 0;
    let mut rows = Vec::new();
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let trimmed = line.trim_end_matches(['\n', '\r']);
        if i == 0 {
            if trimmed != METRICS_CSV_HEADER {
                return Err(format_err(0, format!("expected header {METRICS_CSV_HEADER:?}")));
            }
        } else if !trimmed.is_empty() {
            let fields: Vec<&str> = trimmed.split(',').collect();
            if fields.len() != 10 {
                return Err(format_err(offset, format!("row has {} fields, expected 10", fields.len())));
            }
            let mut vals = [0.0; 9];
            for (k, f) in fields[1..].iter().enumerate() {
                vals[k] = f
                    .parse()
                    .map_err(|_| format_err(offset, format!("bad number {f:?} in column {}", k + 2)))?;
            }
            rows.push((fields[0].to_string(), MetricsReport::from_array(vals)));
        }
        offset += line.len();
    }
    if text.is_empty() {
        return Err(format_err(0, "empty metrics file"));
    }
    Ok(rows)
}

pub fn write_metrics_csv(path: &Path, rows: &[(String, MetricsReport)]) -> Result<()> {
    Ok(fs::write(path, metrics_csv(rows))?)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<(String, MetricsReport)>> {
    parse_metrics_csv(&fs::read_to_string(path)?)
}
