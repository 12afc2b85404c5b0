//! Plain-text image and table output.
//!
//! PGM files use the plain `P2` variant with maxval 255: a `P2` line, a
//! `<width> <height>` line, a `255` line, then one line per image row with
//! pixel values separated by single spaces. Row `i` is query index `i`.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use crate::masks::AttentionMask;
use crate::numerics::{Matrix, Real};

/// Grayscale image, row-major, one byte per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn write_pgm<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "P2")?;
        writeln!(w, "{} {}", self.width, self.height)?;
        writeln!(w, "255")?;
        for row in self.pixels.chunks(self.width.max(1)) {
            let line: Vec<String> = row.iter().map(u8::to_string).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }

    pub fn to_pgm_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_pgm(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("pgm output is ascii")
    }
}

/// White (255) where attention is allowed, black (0) where forbidden.
pub fn mask_image(mask: &AttentionMask) -> GrayImage {
    let t = mask.size();
    let pixels = (0..t * t)
        .map(|x| if mask.is_allowed(x / t, x % t) { 255 } else { 0 })
        .collect();
    GrayImage {
        width: t,
        height: t,
        pixels,
    }
}

/// `1` where allowed, `0` where forbidden; comma separated, one row per line.
pub fn mask_csv(mask: &AttentionMask) -> String {
    let t = mask.size();
    let mut out = String::with_capacity(t * t * 2);
    for i in 0..t {
        let row: Vec<&str> = (0..t)
            .map(|j| if mask.is_allowed(i, j) { "1" } else { "0" })
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Linear grayscale over `[0, max weight]`; higher weights are lighter and
/// zero weights are black.
pub fn weights_image(weights: &Matrix) -> GrayImage {
    let max = weights.as_slice().iter().copied().fold(0.0, Real::max);
    let pixels = weights
        .as_slice()
        .iter()
        .map(|&w| {
            if max > 0.0 && w > 0.0 {
                (w / max * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect();
    GrayImage {
        width: weights.cols(),
        height: weights.rows(),
        pixels,
    }
}

/// Comma separated values with shortest round-trip float formatting.
pub fn matrix_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Writes `contents` to a temporary file beside `path` and renames it into
/// place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Creates `dir` if needed.
pub fn ensure_dir(dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)
}
