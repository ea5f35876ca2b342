//! 16-bit PAM (`P7`) frames.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io;

const MAXVAL: u32 = 65535;

/// Channel layout of a PAM file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TupleType {
    Grayscale,
    Rgb,
    RgbAlpha,
}

impl TupleType {
    pub fn depth(self) -> usize {
        match self {
            TupleType::Grayscale => 1,
            TupleType::Rgb => 3,
            TupleType::RgbAlpha => 4,
        }
    }

    fn name(self) -> &'static str {
        match self {
            TupleType::Grayscale => "GRAYSCALE",
            TupleType::Rgb => "RGB",
            TupleType::RgbAlpha => "RGB_ALPHA",
        }
    }

    fn parse(name: &str) -> Option<Self> {
        [TupleType::Grayscale, TupleType::Rgb, TupleType::RgbAlpha].into_iter().find(|t| t.name() == name)
    }
}

/// Decoded image, samples in `[0,1]`, channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct PamImage {
    pub width: usize,
    pub height: usize,
    pub tuple_type: TupleType,
    pub samples: Vec<f64>,
}

pub fn quantize(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * MAXVAL as f64).round() as u16
}

pub fn encode(img: &PamImage) -> Result<Vec<u8>> {
    let depth = img.tuple_type.depth();
    if img.samples.len() != img.width * img.height * depth {
        return Err(Error::Dimension(format!(
            "{} samples for a {}x{}x{depth} image",
            img.samples.len(),
            img.height,
            img.width
        )));
    }
    let mut out = format!(
        "P7\nWIDTH {}\nHEIGHT {}\nDEPTH {depth}\nMAXVAL {MAXVAL}\nTUPLTYPE {}\nENDHDR\n",
        img.width,
        img.height,
        img.tuple_type.name()
    )
    .into_bytes();
    out.reserve(img.samples.len() * 2);
    for &v in &img.samples {
        out.extend_from_slice(&quantize(v).to_be_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<PamImage> {
    let bad = |reason: String| Error::format(origin, reason);
    let mut pos = 0;
    let mut next_line = || -> Option<&[u8]> {
        let rest = bytes.get(pos..)?;
        let end = rest.iter().position(|&b| b == b'\n')?;
        pos += end + 1;
        Some(&rest[..end])
    };
    if next_line() != Some(b"P7".as_slice()) {
        return Err(bad("missing P7 magic".into()));
    }
    let (mut width, mut height, mut depth, mut maxval, mut tuple) = (None, None, None, None, None);
    loop {
        let line = next_line().ok_or_else(|| bad("header ends before ENDHDR".into()))?;
        let line = std::str::from_utf8(line).map_err(|_| bad("header is not ASCII".into()))?.trim();
        if line == "ENDHDR" {
            break;
        }
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once(' ').ok_or_else(|| bad(format!("malformed header line `{line}`")))?;
        let num = || value.trim().parse::<usize>().map_err(|_| bad(format!("bad {key} value `{value}`")));
        match key {
            "WIDTH" => width = Some(num()?),
            "HEIGHT" => height = Some(num()?),
            "DEPTH" => depth = Some(num()?),
            "MAXVAL" => maxval = Some(num()?),
            "TUPLTYPE" => {
                tuple =
                    Some(TupleType::parse(value.trim()).ok_or_else(|| bad(format!("unsupported TUPLTYPE `{value}`")))?)
            }
            _ => return Err(bad(format!("unknown header field `{key}`"))),
        }
    }
    let (Some(width), Some(height), Some(depth), Some(maxval), Some(tuple_type)) =
        (width, height, depth, maxval, tuple)
    else {
        return Err(bad("incomplete header".into()));
    };
    if maxval != MAXVAL as usize {
        return Err(bad(format!("MAXVAL {maxval}, expected {MAXVAL}")));
    }
    if depth != tuple_type.depth() {
        return Err(bad(format!("DEPTH {depth} does not match {}", tuple_type.name())));
    }
    let body = &bytes[pos..];
    let n = width * height * depth;
    if body.len() != n * 2 {
        return Err(bad(format!("{} data bytes, expected {}", body.len(), n * 2)));
    }
    let samples = body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / MAXVAL as f64).collect();
    Ok(PamImage { width, height, tuple_type, samples })
}

pub fn write(path: &Path, img: &PamImage) -> Result<()> {
    io::write_atomic(path, &encode(img)?)
}

pub fn read(path: &Path) -> Result<PamImage> {
    decode(&io::read(path)?, path)
}
