use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toyshape::raster::RasterImage;
use crate::toyshape::{CountVector, SceneSpec};

fn to_byte(p: f32) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit binary PGM (P5).
pub fn write_pgm(img: &RasterImage, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{} {}\n255\n", img.width, img.height)?;
    let bytes: Vec<u8> = img.pixels.iter().map(|&p| to_byte(p)).collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<RasterImage> {
    let bad = |reason: &str| Error::BadImage { path: path.to_path_buf(), reason: reason.into() };
    let mut data = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut data)?;
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < data.len() && data[pos] == b'#' {
            while pos < data.len() && data[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&data[start..pos]).into_owned());
    }
    pos += 1; // single whitespace byte before the raster
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    let body = data.get(pos..pos + width * height).ok_or_else(|| bad("truncated raster"))?;
    let pixels = body.iter().map(|&b| b as f32 / maxval as f32).collect();
    RasterImage::new(height, width, pixels)
}

pub fn write_png(img: &RasterImage, path: &Path) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(w, img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = img.pixels.iter().map(|&p| to_byte(p)).collect();
    let mut writer = enc.write_header().map_err(|e| Error::BadImage { path: path.to_path_buf(), reason: e.to_string() })?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::BadImage { path: path.to_path_buf(), reason: e.to_string() })?;
    Ok(())
}

fn read_png(path: &Path) -> Result<RasterImage> {
    let bad = |reason: String| Error::BadImage { path: path.to_path_buf(), reason };
    let mut dec = png::Decoder::new(BufReader::new(File::open(path)?));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(|e| bad(e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    let channels = info.color_type.samples();
    let (w, h) = (info.width as usize, info.height as usize);
    let pixels = buf[..info.buffer_size()]
        .chunks_exact(channels)
        .map(|px| match channels {
            1 | 2 => px[0] as f32 / 255.0,
            _ => (0.299 * px[0] as f32 + 0.587 * px[1] as f32 + 0.114 * px[2] as f32) / 255.0,
        })
        .collect();
    RasterImage::new(h, w, pixels)
}

/// Reads a PGM or PNG by extension.
pub fn read_image(path: &Path) -> Result<RasterImage> {
    match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref() {
        Some("pgm") => read_pgm(path),
        Some("png") => read_png(path),
        _ => Err(Error::BadImage { path: path.to_path_buf(), reason: "unsupported extension".into() }),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub filename: String,
    pub n_triangle: u32,
    pub n_square: u32,
    pub n_pentagon: u32,
}

impl ManifestRow {
    pub fn counts(&self) -> CountVector {
        CountVector([self.n_triangle, self.n_square, self.n_pentagon])
    }
}

pub fn write_manifest(rows: &[ManifestRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Writes `img_NNNNN.pgm` files plus `manifest.csv` into `dir`.
pub fn write_dataset(dir: &Path, images: &[RasterImage], scenes: &[SceneSpec], png: bool) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut rows = Vec::with_capacity(images.len());
    for (i, (img, scene)) in images.iter().zip(scenes).enumerate() {
        let name = format!("img_{i:05}.pgm");
        write_pgm(img, &dir.join(&name))?;
        if png {
            write_png(img, &dir.join(format!("img_{i:05}.png")))?;
        }
        let c = scene.counts();
        rows.push(ManifestRow { filename: name, n_triangle: c.0[0], n_square: c.0[1], n_pentagon: c.0[2] });
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&rows, &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_and_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = RasterImage::new(2, 3, vec![0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let p = dir.path().join("a.pgm");
        write_pgm(&img, &p).unwrap();
        assert_eq!(read_image(&p).unwrap(), img);
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        let q = dir.path().join("a.png");
        write_png(&img, &q).unwrap();
        assert_eq!(read_image(&q).unwrap(), img);
        fs::write(dir.path().join("b.pgm"), b"P2\n1 1\n255\n0").unwrap();
        assert!(read_image(&dir.path().join("b.pgm")).is_err());
        fs::write(dir.path().join("c.pgm"), b"P5\n# note\n4 4\n255\n\x00").unwrap();
        assert!(read_image(&dir.path().join("c.pgm")).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![ManifestRow { filename: "x.pgm".into(), n_triangle: 1, n_square: 0, n_pentagon: 1 }];
        let p = dir.path().join("m.csv");
        write_manifest(&rows, &p).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), rows);
        assert!(fs::read_to_string(&p).unwrap().starts_with("filename,n_triangle,n_square,n_pentagon"));
    }
}
