//! PNG and manifest persistence for dataset splits.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, ImageFormat, Luma, Rgb};
use ndarray::{Array2, Array3};

use super::{u8_from_unit, unit_from_u8, Dataset, Manifest, Sample};
use crate::{Error, Result};

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Save an RGB image given in `[-1, 1]` channel-first layout.
pub fn save_image(path: &Path, image: &Array3<f32>) -> Result<()> {
    let (c, h, w) = image.dim();
    assert_eq!(c, 3, "expected an RGB image");
    let buf = ImageBuffer::<Rgb<u8>, Vec<u8>>::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([
            u8_from_unit(image[[0, y, x]]),
            u8_from_unit(image[[1, y, x]]),
            u8_from_unit(image[[2, y, x]]),
        ])
    });
    buf.save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))
}

fn save_gray(path: &Path, data: &Array2<u8>) -> Result<()> {
    let (h, w) = data.dim();
    let buf = ImageBuffer::<Luma<u8>, Vec<u8>>::from_fn(w as u32, h as u32, |x, y| {
        Luma([data[[y as usize, x as usize]]])
    });
    buf.save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    match image::ImageReader::open(path) {
        Ok(r) => r
            .decode()
            .map_err(|e| Error::Data(format!("decoding {}: {e}", path.display()))),
        Err(e) if e.kind() == ErrorKind::NotFound => Err(Error::MissingFile {
            path: path.to_path_buf(),
        }),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn check_size(path: &Path, got: (u32, u32), want: (usize, usize)) -> Result<()> {
    if got.1 as usize != want.0 || got.0 as usize != want.1 {
        return Err(Error::SizeMismatch {
            path: path.to_path_buf(),
            expected: format!("{}x{}", want.0, want.1),
            found: format!("{}x{}", got.1, got.0),
        });
    }
    Ok(())
}

/// Load an RGB image to `[-1, 1]`, checking it matches the split's size.
pub fn load_image(path: &Path, height: usize, width: usize) -> Result<Array3<f32>> {
    let img = open_image(path)?.to_rgb8();
    check_size(path, img.dimensions(), (height, width))?;
    let mut out = Array3::<f32>::zeros((3, height, width));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = unit_from_u8(px.0[c]);
        }
    }
    Ok(out)
}

fn load_gray(path: &Path, height: usize, width: usize) -> Result<Array2<u8>> {
    let img = open_image(path)?.to_luma8();
    check_size(path, img.dimensions(), (height, width))?;
    let mut out = Array2::<u8>::zeros((height, width));
    for (x, y, px) in img.enumerate_pixels() {
        out[[y as usize, x as usize]] = px.0[0];
    }
    Ok(out)
}

/// Write one record's image, parsing, and mask under a split directory,
/// creating the layout as needed. Masks are stored as 0/255.
pub fn write_record(
    split_dir: &Path,
    stem: &str,
    image: &Array3<f32>,
    parsing: &Array2<u8>,
    mask: &Array2<u8>,
) -> Result<()> {
    for sub in ["images", "parsing", "masks"] {
        create_dir(&split_dir.join(sub))?;
    }
    save_image(&split_dir.join("images").join(format!("{stem}.png")), image)?;
    save_gray(
        &split_dir.join("parsing").join(format!("{stem}.png")),
        parsing,
    )?;
    save_gray(
        &split_dir.join("masks").join(format!("{stem}.png")),
        &mask.mapv(|v| v * 255),
    )
}

pub fn write_manifest(split_dir: &Path, manifest: &Manifest) -> Result<()> {
    create_dir(split_dir)?;
    let path = split_dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Data(format!("encoding manifest: {e}")))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(split_dir: &Path) -> Result<Manifest> {
    let path = split_dir.join("manifest.json");
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == ErrorKind::NotFound => {
            return Err(Error::MissingFile { path })
        }
        Err(e) => return Err(Error::io(&path, e)),
    };
    serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("parsing {}: {e}", path.display())))
}

/// Load a split: manifest plus each record's three files, with size, label
/// range, and mask binarity validated on the way in.
pub fn load_dataset(root: &Path, split: &str) -> Result<Dataset> {
    let split_dir = root.join(split);
    let manifest = read_manifest(&split_dir)?;
    let (h, w) = (manifest.height, manifest.width);
    let mut samples = Vec::with_capacity(manifest.records.len());
    for rec in &manifest.records {
        let img_path = split_dir.join("images").join(format!("{}.png", rec.stem));
        let par_path = split_dir.join("parsing").join(format!("{}.png", rec.stem));
        let mask_path = split_dir.join("masks").join(format!("{}.png", rec.stem));
        let image = load_image(&img_path, h, w)?;
        let parsing = load_gray(&par_path, h, w)?;
        for (pos, &l) in parsing.indexed_iter() {
            if (l as usize) >= manifest.labels {
                return Err(Error::LabelOutOfRange {
                    label: l as usize,
                    labels: manifest.labels,
                    x: pos.1,
                    y: pos.0,
                    context: par_path.display().to_string(),
                });
            }
        }
        let raw_mask = load_gray(&mask_path, h, w)?;
        for &v in raw_mask.iter() {
            if v != 0 && v != 255 {
                return Err(Error::MaskNotBinary {
                    path: mask_path.clone(),
                    value: v,
                });
            }
        }
        samples.push(Sample {
            image,
            parsing,
            mask: raw_mask.mapv(|v| u8::from(v == 255)),
        });
    }
    Ok(Dataset {
        labels: manifest.labels,
        seed: manifest.seed,
        height: h,
        width: w,
        records: manifest.records,
        samples,
    })
}

/// The three file paths belonging to a record stem, for tools that copy
/// records between splits.
pub fn record_paths(split_dir: &Path, stem: &str) -> [PathBuf; 3] {
    [
        split_dir.join("images").join(format!("{stem}.png")),
        split_dir.join("parsing").join(format!("{stem}.png")),
        split_dir.join("masks").join(format!("{stem}.png")),
    ]
}
