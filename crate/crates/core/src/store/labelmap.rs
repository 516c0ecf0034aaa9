//! Segment-id label maps: one PNG per image, id = R + 256·G + 65536·B.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

pub const MAX_SEGMENT_ID: u64 = 1 << 24;

pub fn encode_segment_id(id: u64) -> Result<[u8; 3]> {
    if id >= MAX_SEGMENT_ID {
        return Err(Error::SegmentIdOutOfRange(id));
    }
    Ok([(id & 0xff) as u8, ((id >> 8) & 0xff) as u8, ((id >> 16) & 0xff) as u8])
}

pub fn decode_segment_id(rgb: [u8; 3]) -> u64 {
    rgb[0] as u64 + 256 * rgb[1] as u64 + 65536 * rgb[2] as u64
}

/// Decoded label map: one id per pixel, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub ids: Vec<u64>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize) -> Self {
        LabelMap {
            width,
            height,
            ids: vec![0; width * height],
        }
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let img = image::open(path)
            .map_err(|e| Error::parse(path, e))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let ids = img.pixels().map(|p| decode_segment_id(p.0)).collect();
        Ok(LabelMap {
            width: w as usize,
            height: h as usize,
            ids,
        })
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let mut img = RgbImage::new(self.width as u32, self.height as u32);
        for (i, &id) in self.ids.iter().enumerate() {
            let x = (i % self.width) as u32;
            let y = (i / self.width) as u32;
            img.put_pixel(x, y, Rgb(encode_segment_id(id)?));
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        img.save(path)
            .map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: std::io::Error::other(e),
            })
    }
}
