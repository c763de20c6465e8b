//! Numeric claims in free text: "IVS is 1.05 cm", "LVIDd 46 mm", "RWT 0.48".

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Cm,
    Mm,
}

impl Unit {
    pub fn symbol(self) -> &'static str {
        match self {
            Unit::Cm => "cm",
            Unit::Mm => "mm",
        }
    }

    pub fn to_cm(self, v: f64) -> f64 {
        match self {
            Unit::Cm => v,
            Unit::Mm => v / 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantity {
    pub value: f64,
    pub unit: Option<Unit>,
    /// Digits after the decimal point as written.
    pub decimals: u32,
    /// Byte offset of the number in the source text.
    pub offset: usize,
}

impl Quantity {
    /// Value in centimetres for length quantities.
    pub fn cm(&self) -> Option<f64> {
        self.unit.map(|u| u.to_cm(self.value))
    }
}

/// Every standalone number in `text`, with a length unit when one follows.
/// Digits glued to letters ("A4C", "LV2") are not numbers.
pub fn extract_quantities(text: &str) -> Vec<Quantity> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let boundary = i == 0 || {
            let p = bytes[i - 1];
            !(p.is_ascii_alphanumeric() || p == b'.' || p == b'_')
        };
        if !(c.is_ascii_digit() && boundary) {
            i += 1;
            continue;
        }
        let start = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        let mut decimals = 0;
        if i + 1 < bytes.len() && bytes[i] == b'.' && bytes[i + 1].is_ascii_digit() {
            i += 1;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
                decimals += 1;
            }
        }
        if i < bytes.len() && bytes[i].is_ascii_alphabetic() && !unit_follows(bytes, i) {
            // "3rd", "2x": not a quantity.
            while i < bytes.len() && bytes[i].is_ascii_alphanumeric() {
                i += 1;
            }
            continue;
        }
        let Ok(value) = text[start..i].parse::<f64>() else { continue };
        let mut j = i;
        while j < bytes.len() && bytes[j] == b' ' {
            j += 1;
        }
        let unit = if unit_follows(bytes, j) {
            match &bytes[j..j + 2] {
                b"cm" => Some(Unit::Cm),
                _ => Some(Unit::Mm),
            }
        } else {
            None
        };
        out.push(Quantity { value, unit, decimals, offset: start });
    }
    out
}

fn unit_follows(bytes: &[u8], j: usize) -> bool {
    if j + 2 > bytes.len() {
        return false;
    }
    let tok = &bytes[j..j + 2];
    (tok == b"cm" || tok == b"mm") && (j + 2 == bytes.len() || !bytes[j + 2].is_ascii_alphabetic())
}

/// Rounds half away from zero to `decimals` places.
pub fn round_to(v: f64, decimals: u32) -> f64 {
    let f = libm::pow(10.0, decimals as f64);
    libm::round(v * f) / f
}

/// Whether a written claim is the value, allowing for the precision it was
/// written at.
pub fn claim_matches(claim: f64, decimals: u32, value: f64) -> bool {
    const EPS: f64 = 1e-6;
    libm::fabs(claim - value) <= EPS || libm::fabs(round_to(value, decimals) - claim) <= EPS
}
