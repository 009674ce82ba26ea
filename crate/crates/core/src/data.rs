//! On-disk data: the AMRI image format (exact little-endian floats, no codec
//! dependence), a PGM import path for external grayscale data, synthetic
//! piecewise-constant phantoms, and the dataset manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::Image;

pub const AMRI_MAGIC: &[u8; 4] = b"AMRI";
pub const AMRI_VERSION: u16 = 1;

fn fmt_err(path: &Path, what: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        what: what.into(),
    }
}

/// Write an image as AMRI: magic, version u16, height u32, width u32,
/// channels u16 (all little-endian), then height*width*channels f32 values,
/// row-major with the channel index fastest. Values are stored as f32;
/// callers that need exact round trips should hold f32-representable data.
pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + img.values().len() * 4);
    bytes.extend_from_slice(AMRI_MAGIC);
    bytes.extend_from_slice(&AMRI_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(img.height() as u32).to_le_bytes());
    bytes.extend_from_slice(&(img.width() as u32).to_le_bytes());
    bytes.extend_from_slice(&(img.channels() as u16).to_le_bytes());
    for &v in img.values() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_image(path: &Path) -> Result<Image> {
    let bytes =
        fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if bytes.len() < 4 || &bytes[..4] != AMRI_MAGIC {
        return Err(fmt_err(path, "bad magic: expected \"AMRI\""));
    }
    if bytes.len() < 16 {
        return Err(fmt_err(path, "truncated header"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != AMRI_VERSION {
        return Err(fmt_err(path, format!("unsupported version {version}")));
    }
    let height = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let channels = u16::from_le_bytes([bytes[14], bytes[15]]) as usize;
    let expected = height * width * channels;
    let payload = &bytes[16..];
    if payload.len() != expected * 4 {
        return Err(fmt_err(
            path,
            format!(
                "payload holds {} floats, header declares {expected}",
                payload.len() / 4
            ),
        ));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Image::new(height, width, channels, values)
}

/// Import a binary PGM (P5) file, maxval 255 or 65535, scaled into [0, 1].
pub fn import_pgm(path: &Path) -> Result<Image> {
    let bytes =
        fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut cursor = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        // Skip whitespace and '#' comments between header tokens.
        loop {
            while cursor < bytes.len() && bytes[cursor].is_ascii_whitespace() {
                cursor += 1;
            }
            if cursor < bytes.len() && bytes[cursor] == b'#' {
                while cursor < bytes.len() && bytes[cursor] != b'\n' {
                    cursor += 1;
                }
            } else {
                break;
            }
        }
        let start = cursor;
        while cursor < bytes.len() && !bytes[cursor].is_ascii_whitespace() {
            cursor += 1;
        }
        if start == cursor {
            return Err(fmt_err(path, "unexpected end of header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..cursor]).into_owned())
    };
    if token(&bytes)? != "P5" {
        return Err(fmt_err(path, "not a binary PGM (P5) file"));
    }
    let width: usize = token(&bytes)?
        .parse()
        .map_err(|_| fmt_err(path, "bad width"))?;
    let height: usize = token(&bytes)?
        .parse()
        .map_err(|_| fmt_err(path, "bad height"))?;
    let maxval: usize = token(&bytes)?
        .parse()
        .map_err(|_| fmt_err(path, "bad maxval"))?;
    cursor += 1; // single whitespace after maxval
    let pixels = height * width;
    let values: Vec<f64> = match maxval {
        255 => {
            if bytes.len() < cursor + pixels {
                return Err(fmt_err(path, "truncated pixel data"));
            }
            bytes[cursor..cursor + pixels]
                .iter()
                .map(|&b| b as f64 / 255.0)
                .collect()
        }
        65535 => {
            if bytes.len() < cursor + 2 * pixels {
                return Err(fmt_err(path, "truncated pixel data"));
            }
            bytes[cursor..cursor + 2 * pixels]
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
                .collect()
        }
        other => return Err(fmt_err(path, format!("unsupported maxval {other}"))),
    };
    Image::new(height, width, 1, values)
}

/// Dataset description stored next to the image files.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    /// Image directory relative to the manifest file.
    pub root: String,
    pub side: usize,
    pub channels: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl DatasetManifest {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serializing manifest: {e}")))?;
        fs::write(path, json.as_bytes())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| fmt_err(path, format!("bad manifest: {e}")))?;
        let mut seen = std::collections::BTreeSet::new();
        for id in manifest
            .train
            .iter()
            .chain(&manifest.val)
            .chain(&manifest.test)
        {
            if !seen.insert(id) {
                return Err(fmt_err(path, format!("duplicate image id {id:?}")));
            }
        }
        Ok(manifest)
    }

    /// Load every image of a split, verifying the shared shape.
    pub fn load_split(&self, manifest_path: &Path, split: Split) -> Result<Vec<(String, Image)>> {
        let dir = manifest_path
            .parent()
            .map(|p| p.join(&self.root))
            .unwrap_or_else(|| PathBuf::from(&self.root));
        let mut out = Vec::new();
        for id in self.ids(split) {
            let img = load_image(&dir.join(format!("{id}.amri")))?;
            if img.side() != self.side || img.channels() != self.channels {
                return Err(Error::dim(format!(
                    "image {id} has side {} channels {}, manifest declares {}x{}",
                    img.side(),
                    img.channels(),
                    self.side,
                    self.channels
                )));
            }
            out.push((id.clone(), img));
        }
        Ok(out)
    }
}

/// Random piecewise-constant phantom: axis-aligned ellipses and rectangles
/// painted over a flat background, every level quantized to f32 so the AMRI
/// round trip is exact. Values stay within [0, 1].
pub fn phantom(side: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = |v: f64| v as f32 as f64;
    let mut values = vec![q(0.05); side * side];
    let shapes = rng.random_range(2..=4);
    for _ in 0..shapes {
        let level = q(rng.random_range(0.15..1.0));
        if rng.random_bool(0.5) {
            // Ellipse.
            let cy = rng.random_range(side as f64 * 0.25..side as f64 * 0.75);
            let cx = rng.random_range(side as f64 * 0.25..side as f64 * 0.75);
            let ry = rng.random_range(side as f64 * 0.1..side as f64 * 0.35).max(1.0);
            let rx = rng.random_range(side as f64 * 0.1..side as f64 * 0.35).max(1.0);
            for y in 0..side {
                for x in 0..side {
                    let dy = (y as f64 - cy) / ry;
                    let dx = (x as f64 - cx) / rx;
                    if dy * dy + dx * dx <= 1.0 {
                        values[y * side + x] = level;
                    }
                }
            }
        } else {
            // Rectangle.
            let y0 = rng.random_range(0..side);
            let x0 = rng.random_range(0..side);
            let h = rng.random_range(side / 8..=side / 2).max(1);
            let w = rng.random_range(side / 8..=side / 2).max(1);
            for y in y0..(y0 + h).min(side) {
                for x in x0..(x0 + w).min(side) {
                    values[y * side + x] = level;
                }
            }
        }
    }
    Image::new(side, side, 1, values).expect("square by construction")
}

/// Generate a phantom dataset on disk: `count` AMRI files plus a manifest.
/// Ids are assigned to train/val/test by the given fractions in order.
pub fn generate_phantoms(
    dir: &Path,
    count: usize,
    side: usize,
    seed: u64,
    train_fraction: f64,
    val_fraction: f64,
) -> Result<DatasetManifest> {
    if !side.is_power_of_two() {
        return Err(Error::dim(format!("side must be a power of two, got {side}")));
    }
    if !(0.0..=1.0).contains(&train_fraction)
        || !(0.0..=1.0).contains(&val_fraction)
        || train_fraction + val_fraction > 1.0
    {
        return Err(Error::Config("split fractions must be in [0,1] and sum <= 1".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let n_train = (count as f64 * train_fraction).round() as usize;
    let n_val = (count as f64 * val_fraction).round() as usize;
    let mut manifest = DatasetManifest {
        root: ".".into(),
        side,
        channels: 1,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for i in 0..count {
        let id = format!("phantom_{i:05}");
        let img = phantom(side, seed.wrapping_add(i as u64));
        save_image(&dir.join(format!("{id}.amri")), &img)?;
        if i < n_train {
            manifest.train.push(id);
        } else if i < n_train + n_val {
            manifest.val.push(id);
        } else {
            manifest.test.push(id);
        }
    }
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Write evaluation rows as CSV with the fixed header.
pub fn write_eval_csv(path: &Path, rows: &[(String, String, f64)]) -> Result<()> {
    let file = fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut out = std::io::BufWriter::new(file);
    let werr = |e| Error::io(format!("writing {}", path.display()), e);
    writeln!(out, "image_id,method,psnr_db").map_err(werr)?;
    for (id, method, psnr) in rows {
        writeln!(out, "{id},{method},{psnr}").map_err(werr)?;
    }
    out.flush().map_err(werr)
}

/// Read an AMRI or PGM image depending on the extension.
pub fn load_any_image(path: &Path) -> Result<Image> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => import_pgm(path),
        _ => load_image(path),
    }
}
