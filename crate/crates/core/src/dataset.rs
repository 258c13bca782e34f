//! On-disk dataset layout:
//!
//! ```text
//! manifest.txt      count, lane count K, then one `id,labeled,exist_bits` line per sample
//! images/<id>.pgm   P5 grayscale, round(v·255)
//! masks/<id>.pgm    P5, raw labels 0..K
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::mask::IntMask;
use crate::model::MAX_LANES;
use crate::pnm::{dequantize, quantize, Raster};
use crate::synth::Sample;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Dataset { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(height, width)` of the images, if any.
    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.samples
            .first()
            .map(|s| (s.mask.height(), s.mask.width()))
    }
}

fn image_path(dir: &Path, id: u64) -> PathBuf {
    dir.join("images").join(format!("{id}.pgm"))
}

fn mask_path(dir: &Path, id: u64) -> PathBuf {
    dir.join("masks").join(format!("{id}.pgm"))
}

fn bits(exist: &[bool]) -> String {
    exist.iter().map(|&e| if e { '1' } else { '0' }).collect()
}

pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut manifest = format!("{}\n{MAX_LANES}\n", data.len());
    for s in &data.samples {
        let (h, w) = (s.mask.height(), s.mask.width());
        let img = s.image.data().iter().map(|&v| quantize(v)).collect();
        Raster::gray(w, h, img).write(&image_path(dir, s.id))?;
        Raster::gray(w, h, s.mask.data().to_vec()).write(&mask_path(dir, s.id))?;
        manifest.push_str(&format!("{},{},{}\n", s.id, u8::from(s.labeled), bits(&s.exist)));
    }
    let p = dir.join(MANIFEST);
    fs::write(&p, manifest).map_err(|e| Error::io(&p, e))
}

fn parse_manifest(path: &Path, text: &str) -> Result<Vec<(u64, bool, Vec<bool>)>> {
    let bad = |line: usize, msg: &str| Error::format(path, format!("line {line}: {msg}"));
    let mut lines = text.lines();
    let count: usize = lines
        .next()
        .and_then(|l| l.trim().parse().ok())
        .ok_or_else(|| bad(1, "expected the sample count"))?;
    let lanes: usize = lines
        .next()
        .and_then(|l| l.trim().parse().ok())
        .ok_or_else(|| bad(2, "expected the lane count"))?;
    if lanes != MAX_LANES {
        return Err(bad(2, &format!("lane count {lanes} is not supported, expected {MAX_LANES}")));
    }
    let mut entries = Vec::with_capacity(count);
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let n = i + 3;
        let parts: Vec<&str> = line.trim().split(',').collect();
        let [id, labeled, exist] = parts[..] else {
            return Err(bad(n, "expected id,labeled,exist_bits"));
        };
        let id: u64 = id.parse().map_err(|_| bad(n, "bad id"))?;
        let labeled = match labeled {
            "0" => false,
            "1" => true,
            _ => return Err(bad(n, "labeled flag must be 0 or 1")),
        };
        if exist.len() != lanes || !exist.bytes().all(|b| b == b'0' || b == b'1') {
            return Err(bad(n, &format!("exist bits must be {lanes} binary digits")));
        }
        entries.push((id, labeled, exist.bytes().map(|b| b == b'1').collect()));
    }
    if entries.len() != count {
        return Err(Error::format(
            path,
            format!("header says {count} samples but {} are listed", entries.len()),
        ));
    }
    Ok(entries)
}

fn count_files(dir: &Path) -> Result<usize> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut n = 0;
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.path().extension().is_some_and(|x| x == "pgm") {
            n += 1;
        }
    }
    Ok(n)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let entries = parse_manifest(&mpath, &text)?;
    for sub in ["images", "masks"] {
        let found = count_files(&dir.join(sub))?;
        if found != entries.len() {
            return Err(Error::format(
                &mpath,
                format!("manifest lists {} samples but {sub}/ holds {found}", entries.len()),
            ));
        }
    }

    let mut samples = Vec::with_capacity(entries.len());
    let mut size = None;
    for (id, labeled, exist) in entries {
        let ipath = image_path(dir, id);
        let img = Raster::read_gray(&ipath)?;
        let mpath_i = mask_path(dir, id);
        let m = Raster::read_gray(&mpath_i)?;
        if (m.width, m.height) != (img.width, img.height) {
            return Err(Error::format(&mpath_i, "mask size differs from its image"));
        }
        if *size.get_or_insert((img.width, img.height)) != (img.width, img.height) {
            return Err(Error::format(&ipath, "image size differs from the first sample"));
        }
        if m.data.iter().any(|&v| v as usize > MAX_LANES) {
            return Err(Error::format(&mpath_i, format!("labels must lie in 0..={MAX_LANES}")));
        }
        samples.push(Sample {
            id,
            image: Tensor::new(
                &[1, img.height, img.width],
                img.data.iter().map(|&b| dequantize(b)).collect(),
            )?,
            mask: IntMask::new(m.height, m.width, m.data)?,
            exist,
            labeled,
        });
    }
    Ok(Dataset { samples })
}
