use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const GIB: f64 = (1u64 << 30) as f64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GuidanceMethod {
    /// Full dynamic convolution: a `C×C×R×R` kernel at every pixel.
    DC,
    /// Channel-wise `R×R` kernels per pixel plus one `C×C` mixer.
    CF,
    /// Pooled per-channel scale broadcast over the map plus one `C×C` mixer.
    EG,
}

impl GuidanceMethod {
    pub const ALL: [GuidanceMethod; 3] = [GuidanceMethod::DC, GuidanceMethod::CF, GuidanceMethod::EG];

    pub fn name(self) -> &'static str {
        match self {
            GuidanceMethod::DC => "DC",
            GuidanceMethod::CF => "CF",
            GuidanceMethod::EG => "EG",
        }
    }
}

impl fmt::Display for GuidanceMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GuidanceMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "DC" => Ok(GuidanceMethod::DC),
            "CF" => Ok(GuidanceMethod::CF),
            "EG" => Ok(GuidanceMethod::EG),
            other => Err(Error::Config(format!("unknown guidance method {other:?}; expected DC, CF or EG"))),
        }
    }
}

/// Kernel storage of the three guidance schemes for one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryModel {
    pub c: u64,
    pub h: u64,
    pub w: u64,
    pub r: u64,
    pub bytes_per_element: u64,
}

impl MemoryModel {
    pub fn new(c: u64, h: u64, w: u64, r: u64) -> Result<Self> {
        for (name, v) in [("C", c), ("H", h), ("W", w), ("R", r)] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive, got 0")));
            }
        }
        if r.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel size R must be odd, got {r}")));
        }
        Ok(MemoryModel {
            c,
            h,
            w,
            r,
            bytes_per_element: 4,
        })
    }

    pub fn elements(&self, method: GuidanceMethod) -> Result<u64> {
        let MemoryModel { c, h, w, r, .. } = *self;
        let overflow = || Error::Config(format!("element count overflows at C={c} H={h} W={w} R={r}"));
        let hw = h.checked_mul(w).ok_or_else(overflow)?;
        let c2 = c.checked_mul(c).ok_or_else(overflow)?;
        let r2 = r * r;
        let n = match method {
            GuidanceMethod::DC => c2.checked_mul(r2).and_then(|x| x.checked_mul(hw)),
            GuidanceMethod::CF => c
                .checked_mul(r2)
                .and_then(|x| x.checked_mul(hw))
                .and_then(|x| x.checked_add(c2)),
            GuidanceMethod::EG => c.checked_mul(hw).and_then(|x| x.checked_add(c2)),
        };
        n.ok_or_else(overflow)
    }

    pub fn cost(&self, method: GuidanceMethod) -> Result<MemoryCost> {
        let elements = self.elements(method)?;
        let bytes = elements
            .checked_mul(self.bytes_per_element)
            .ok_or_else(|| Error::Config("byte count overflows".into()))?;
        Ok(MemoryCost {
            method,
            elements,
            bytes,
            gigabytes: bytes as f64 / GIB,
        })
    }

    /// `M_EG / M_DC = 1/(C·R²) + 1/(R²·H·W)`.
    pub fn eg_over_dc(&self) -> f64 {
        let (c, hw, r2) = (self.c as f64, (self.h * self.w) as f64, (self.r * self.r) as f64);
        1.0 / (c * r2) + 1.0 / (r2 * hw)
    }

    /// `M_EG / M_CF = (H·W + C) / (R²·H·W + C)`.
    pub fn eg_over_cf(&self) -> f64 {
        let (c, hw, r2) = (self.c as f64, (self.h * self.w) as f64, (self.r * self.r) as f64);
        (hw + c) / (r2 * hw + c)
    }

    pub fn report(&self) -> Result<MemoryReport> {
        let eg = self.elements(GuidanceMethod::EG)? as f64;
        let rows = GuidanceMethod::ALL
            .iter()
            .map(|&m| {
                let cost = self.cost(m)?;
                Ok(MemoryRow {
                    ratio_vs_eg: cost.elements as f64 / eg,
                    cost,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MemoryReport { model: *self, rows })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryCost {
    pub method: GuidanceMethod,
    pub elements: u64,
    pub bytes: u64,
    /// `bytes / 2³⁰`.
    pub gigabytes: f64,
}

/// Kernel storage of `method` at `(C, H, W, R)` with 4-byte elements.
pub fn memory_cost(method: GuidanceMethod, c: u64, h: u64, w: u64, r: u64) -> Result<MemoryCost> {
    MemoryModel::new(c, h, w, r)?.cost(method)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MemoryRow {
    pub cost: MemoryCost,
    /// Exact element ratio against EG.
    pub ratio_vs_eg: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryReport {
    pub model: MemoryModel,
    pub rows: Vec<MemoryRow>,
}

pub const CSV_HEADER: &str = "method,C,H,W,R,elements,bytes,GB,ratio_vs_EG";

/// GB rounded to three decimals, as printed in the table.
fn displayed_gb(gb: f64) -> f64 {
    (gb * 1000.0).round() / 1000.0
}

impl MemoryReport {
    pub fn row(&self, method: GuidanceMethod) -> &MemoryRow {
        self.rows
            .iter()
            .find(|r| r.cost.method == method)
            .expect("report holds every method")
    }

    /// Ratio of displayed (3-decimal) gigabytes against EG.
    pub fn displayed_ratio(&self, method: GuidanceMethod) -> f64 {
        let eg = displayed_gb(self.row(GuidanceMethod::EG).cost.gigabytes);
        displayed_gb(self.row(method).cost.gigabytes) / eg
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut out = format!(
            "kernel memory per sample at C={} H={} W={} R={} ({} bytes/element, GB = 1024^3 bytes)\n",
            m.c, m.h, m.w, m.r, m.bytes_per_element
        );
        out.push_str(&format!(
            "{:<6} {:>16} {:>18} {:>10} {:>14} {:>12}\n",
            "method", "elements", "bytes", "GB", "ratio_vs_EG", "GB_ratio"
        ));
        for row in &self.rows {
            out.push_str(&format!(
                "{:<6} {:>16} {:>18} {:>10.3} {:>14.3} {:>12.1}\n",
                row.cost.method.name(),
                row.cost.elements,
                row.cost.bytes,
                row.cost.gigabytes,
                row.ratio_vs_eg,
                self.displayed_ratio(row.cost.method),
            ));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let m = &self.model;
        let mut out = format!("{CSV_HEADER}\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                row.cost.method.name(),
                m.c,
                m.h,
                m.w,
                m.r,
                row.cost.elements,
                row.cost.bytes,
                row.cost.gigabytes,
                row.ratio_vs_eg
            ));
        }
        out
    }

    /// Parses [`to_csv`](Self::to_csv) output and recomputes every row,
    /// failing unless the file agrees with the model exactly.
    pub fn parse_csv(text: &str) -> Result<MemoryReport> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Config("empty memory report".into()))?;
        if header.trim() != CSV_HEADER {
            return Err(Error::Config(format!("unexpected memory report header {header:?}")));
        }
        let mut model: Option<MemoryModel> = None;
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 9 {
                return Err(Error::Config(format!("row {}: expected 9 fields, got {}", i + 1, f.len())));
            }
            let int = |s: &str| {
                s.parse::<u64>()
                    .map_err(|e| Error::Config(format!("row {}: bad integer {s:?}: {e}", i + 1)))
            };
            let real = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| Error::Config(format!("row {}: bad number {s:?}: {e}", i + 1)))
            };
            let method: GuidanceMethod = f[0].parse()?;
            let this = MemoryModel::new(int(f[1])?, int(f[2])?, int(f[3])?, int(f[4])?)?;
            if let Some(prev) = model {
                if prev != this {
                    return Err(Error::Config(format!("row {}: dimensions differ from earlier rows", i + 1)));
                }
            }
            model = Some(this);
            let expected = this.cost(method)?;
            let parsed = MemoryCost {
                method,
                elements: int(f[5])?,
                bytes: int(f[6])?,
                gigabytes: real(f[7])?,
            };
            if parsed != expected {
                return Err(Error::Config(format!(
                    "row {}: {method} does not match the analytic cost {expected:?}",
                    i + 1
                )));
            }
            rows.push(MemoryRow {
                cost: parsed,
                ratio_vs_eg: real(f[8])?,
            });
        }
        let model = model.ok_or_else(|| Error::Config("memory report has no rows".into()))?;
        let report = MemoryReport { model, rows };
        if report != model.report()? {
            return Err(Error::Config("memory report ratios disagree with the model".into()));
        }
        Ok(report)
    }
}
