//! Text formatting and file helpers shared by the on-disk formats.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Formats like C's `%.12g`.
pub fn fmt_g12(x: f64) -> String {
    fmt_g(x, 12)
}

/// Formats like C's `%.<precision>g`.
pub fn fmt_g(x: f64, precision: usize) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let p = precision.max(1);
    // exponent after rounding to p significant digits
    let sci = format!("{:.*e}", p - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if exp < -4 || exp >= p as i32 {
        let mantissa = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (p as i32 - 1 - exp).max(0) as usize;
        strip_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Rounds to 12 significant digits, the value `%.12g` text denotes.
pub fn round_g12(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.11e}").parse().expect("round trip")
}

/// Writes `contents` to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Usage(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp: PathBuf = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(contents).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn parse_f64(path: &Path, line: usize, field: &str) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| Error::parse(path, format!("line {line}: invalid number {field:?}")))?;
    if !v.is_finite() {
        return Err(Error::parse(path, format!("line {line}: non-finite value {field:?}")));
    }
    Ok(v)
}

/// Parses a headerless numeric CSV into rows.
pub(crate) fn parse_numeric_csv(path: &Path, text: &str, skip_header: bool) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if (skip_header && n == 0) || line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| parse_f64(path, n + 1, f))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_c_percent_g() {
        // reference strings from printf("%.12g")
        let cases = [
            (0.5, "0.5"),
            (1.0, "1"),
            (-2.0 / 3.0, "-0.666666666667"),
            (1e-5, "1e-05"),
            (0.0001, "0.0001"),
            (123456789012.0, "123456789012"),
            (1234567890123.0, "1.23456789012e+12"),
            (1e100, "1e+100"),
            (std::f64::consts::PI, "3.14159265359"),
            (0.1 + 0.2, "0.3"),
            (999999999999.5, "1e+12"),
            (-1.5e-7, "-1.5e-07"),
            (0.0, "0"),
        ];
        for (x, want) in cases {
            assert_eq!(fmt_g12(x), want, "{x}");
        }
    }

    #[test]
    fn rounding_agrees_with_text() {
        for x in [1.0 / 3.0, 2.0f64.sqrt(), 1e-9 / 7.0, 12345.678901234567] {
            let text: f64 = fmt_g12(x).parse().unwrap();
            assert_eq!(round_g12(x), text);
        }
    }

    #[test]
    fn atomic_write_creates_parents() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b/c.txt");
        write_atomic(&p, b"hello").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "hello");
        write_atomic(&p, b"again").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "again");
        assert_eq!(fs::read_dir(dir.path().join("a/b")).unwrap().count(), 1);
    }
}
