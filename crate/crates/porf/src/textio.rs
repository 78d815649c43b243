//! Text formatting/parsing helpers shared by the pose and correspondence
//! file formats. Floats are written with 17 significant digits so parsing
//! reproduces them bit-exactly; exact zero keeps the short form.

use crate::error::{Error, Result};
use std::path::Path;

/// Canonical float formatting: `0`/`-0` for zeros, otherwise scientific
/// notation with 17 significant digits (round-trips f64 exactly).
pub fn fmt_f64(v: f64) -> String {
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".to_string() } else { "0".to_string() };
    }
    format!("{v:.16e}")
}

pub fn parse_f64(s: &str, path: &Path, line: usize) -> Result<f64> {
    s.parse::<f64>().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("invalid number {s:?}"),
    })
}

pub fn parse_usize(s: &str, path: &Path, line: usize) -> Result<usize> {
    s.parse::<usize>().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("invalid integer {s:?}"),
    })
}
