//! Image readers: PGM (P2/P5), plain-text matrices and IDX image files.

use std::path::Path;

use monge_ot::dataset::{parse_idx_images, read_maybe_gzip, to_raw_image, IMAGE_MAGIC};
use monge_ot::RawImage64;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ImageFormat {
    /// Guess from the file contents.
    Auto,
    Pgm,
    Csv,
    Idx,
}

/// Reads one image. `index` selects the image inside an IDX file.
pub fn read_image(path: &Path, format: ImageFormat, index: usize) -> Result<RawImage64, CliError> {
    let bytes = read_maybe_gzip(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let format = match format {
        ImageFormat::Auto => sniff(&bytes),
        f => f,
    };
    let parsed = match format {
        ImageFormat::Pgm => parse_pgm(&bytes),
        ImageFormat::Csv => parse_matrix(&bytes),
        ImageFormat::Idx => parse_idx(&bytes, index),
        ImageFormat::Auto => unreachable!(),
    };
    parsed.map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn sniff(bytes: &[u8]) -> ImageFormat {
    if bytes.len() >= 4 && u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) == IMAGE_MAGIC {
        ImageFormat::Idx
    } else if bytes.starts_with(b"P2") || bytes.starts_with(b"P5") {
        ImageFormat::Pgm
    } else {
        ImageFormat::Csv
    }
}

fn parse_idx(bytes: &[u8], index: usize) -> Result<RawImage64, String> {
    let imgs = parse_idx_images(bytes).map_err(|e| e.to_string())?;
    if index >= imgs.len() {
        return Err(format!("index {index} out of range, file holds {} images", imgs.len()));
    }
    to_raw_image(imgs.rows, imgs.cols, imgs.image(index)).map_err(|e| e.to_string())
}

/// Header tokens of a PGM file, skipping `#` comments. Returns the tokens and
/// the offset just past the single whitespace byte after the last one.
fn pgm_header(bytes: &[u8], count: usize) -> Result<(Vec<String>, usize), String> {
    let mut tokens = Vec::with_capacity(count);
    let mut pos = 0;
    while tokens.len() < count {
        match bytes.get(pos) {
            None => return Err("truncated PGM header".into()),
            Some(b'#') => {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            }
            Some(c) if c.is_ascii_whitespace() => pos += 1,
            Some(_) => {
                let start = pos;
                while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
                    pos += 1;
                }
                tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
            }
        }
    }
    Ok((tokens, pos + 1))
}

/// Intensities are divided by the declared maximum, so they lie in `[0, 1]`.
pub fn parse_pgm(bytes: &[u8]) -> Result<RawImage64, String> {
    let (head, body) = pgm_header(bytes, 4)?;
    let num = |k: usize, what: &str| {
        head[k]
            .parse::<usize>()
            .map_err(|_| format!("bad PGM {what} {:?}", head[k]))
    };
    let (cols, rows, maxval) = (num(1, "width")?, num(2, "height")?, num(3, "maxval")?);
    if maxval == 0 || maxval > 65535 {
        return Err(format!("PGM maxval {maxval} outside 1..=65535"));
    }
    let n = rows * cols;
    let raw: Vec<usize> = match head[0].as_str() {
        "P2" => {
            let text = std::str::from_utf8(bytes.get(body.min(bytes.len())..).unwrap_or_default())
                .map_err(|_| "PGM body is not text".to_string())?;
            text.split_whitespace()
                .take_while(|t| !t.starts_with('#'))
                .map(|t| t.parse::<usize>().map_err(|_| format!("bad PGM sample {t:?}")))
                .collect::<Result<_, _>>()?
        }
        "P5" => {
            let width = if maxval < 256 { 1 } else { 2 };
            let data = bytes.get(body..).unwrap_or_default();
            if data.len() < n * width {
                return Err(format!("PGM body holds {} bytes, expected {}", data.len(), n * width));
            }
            data.chunks_exact(width)
                .take(n)
                .map(|c| if width == 1 { c[0] as usize } else { u16::from_be_bytes([c[0], c[1]]) as usize })
                .collect()
        }
        other => return Err(format!("unsupported PGM magic {other:?}")),
    };
    if raw.len() < n {
        return Err(format!("PGM holds {} samples, expected {n}", raw.len()));
    }
    if let Some(v) = raw.iter().find(|&&v| v > maxval) {
        return Err(format!("PGM sample {v} exceeds maxval {maxval}"));
    }
    let m = maxval as f64;
    RawImage64::from_vec(rows, cols, raw[..n].iter().map(|&v| v as f64 / m).collect()).map_err(|e| e.to_string())
}

/// One image row per line, values separated by commas and/or whitespace.
/// Values are used as given.
pub fn parse_matrix(bytes: &[u8]) -> Result<RawImage64, String> {
    let text = std::str::from_utf8(bytes).map_err(|_| "matrix file is not UTF-8".to_string())?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f64>().map_err(|_| format!("line {}: bad number {t:?}", ln + 1)))
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(format!("line {}: {} values, expected {}", ln + 1, row.len(), first.len()));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err("empty matrix".into());
    }
    let (r, c) = (rows.len(), rows[0].len());
    RawImage64::from_vec(r, c, rows.into_iter().flatten().collect()).map_err(|e| e.to_string())
}
