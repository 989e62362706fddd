use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Grayscale digit images with their class labels, as stored in an IDX pair.
#[derive(Clone, Debug)]
pub struct IdxDigits {
    pub rows: usize,
    pub cols: usize,
    /// `count × rows × cols` bytes.
    pub pixels: Vec<u8>,
    pub digits: Vec<u8>,
}

impl IdxDigits {
    pub fn len(&self) -> usize {
        self.digits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.digits.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let sz = self.rows * self.cols;
        &self.pixels[i * sz..(i + 1) * sz]
    }

    pub fn load(images_path: &Path, labels_path: &Path) -> Result<Self> {
        let img = fs::read(images_path)?;
        let lab = fs::read(labels_path)?;
        Self::parse(&img, images_path, &lab, labels_path)
    }

    pub fn parse(img: &[u8], images_path: &Path, lab: &[u8], labels_path: &Path) -> Result<Self> {
        let fmt = |path: &Path, reason: String| Error::Format { path: path.to_path_buf(), reason };
        let be = |b: &[u8], off: usize| -> Option<u32> {
            b.get(off..off + 4).map(|s| u32::from_be_bytes([s[0], s[1], s[2], s[3]]))
        };

        let magic = be(img, 0).ok_or_else(|| fmt(images_path, "truncated header".into()))?;
        if magic != IMAGES_MAGIC {
            return Err(fmt(images_path, format!("bad magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}")));
        }
        let (count, rows, cols) = match (be(img, 4), be(img, 8), be(img, 12)) {
            (Some(n), Some(r), Some(c)) => (n as usize, r as usize, c as usize),
            _ => return Err(fmt(images_path, "truncated header".into())),
        };
        let body = &img[16..];
        if body.len() != count * rows * cols {
            return Err(fmt(
                images_path,
                format!("{} pixel bytes for {count} images of {rows}x{cols}", body.len()),
            ));
        }

        let magic = be(lab, 0).ok_or_else(|| fmt(labels_path, "truncated header".into()))?;
        if magic != LABELS_MAGIC {
            return Err(fmt(labels_path, format!("bad magic {magic:#010x}, expected {LABELS_MAGIC:#010x}")));
        }
        let n_labels = be(lab, 4).ok_or_else(|| fmt(labels_path, "truncated header".into()))? as usize;
        let digits = &lab[8..];
        if digits.len() != n_labels {
            return Err(fmt(labels_path, format!("{} label bytes for {n_labels} labels", digits.len())));
        }
        if n_labels != count {
            return Err(Error::LengthMismatch(format!("{count} images vs {n_labels} labels")));
        }
        if let Some(d) = digits.iter().find(|&&d| d > 9) {
            return Err(fmt(labels_path, format!("label {d} is not a digit")));
        }
        Ok(Self { rows, cols, pixels: body.to_vec(), digits: digits.to_vec() })
    }

    /// Serializes back to the two IDX byte streams.
    pub fn to_bytes(&self) -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::with_capacity(16 + self.pixels.len());
        img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&(self.len() as u32).to_be_bytes());
        img.extend_from_slice(&(self.rows as u32).to_be_bytes());
        img.extend_from_slice(&(self.cols as u32).to_be_bytes());
        img.extend_from_slice(&self.pixels);
        let mut lab = Vec::with_capacity(8 + self.digits.len());
        lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&(self.len() as u32).to_be_bytes());
        lab.extend_from_slice(&self.digits);
        (img, lab)
    }
}
