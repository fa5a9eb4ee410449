//! Image containers and benchmark ingestion (IDX, binary PGM).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: bad magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("{images} holds {image_count} images but {labels} holds {label_count} labels")]
    CountMismatch {
        images: PathBuf,
        labels: PathBuf,
        image_count: usize,
        label_count: usize,
    },
    #[error("{path}: truncated, expected {expected} bytes, found {found}")]
    TruncatedFile {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("requested zero-sized image {width}x{height}")]
    ZeroDimension { width: usize, height: usize },
    #[error("{path}: unsupported PGM maxval {maxval}, only 255 is accepted")]
    UnsupportedMaxval { path: PathBuf, maxval: u32 },
    #[error("{path}: malformed PGM header: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },
    #[error("{0} pixel values for a {1}x{2} image")]
    PixelCount(usize, usize, usize),
    #[error("dataset is inconsistent: {0}")]
    Inconsistent(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// 8-bit grayscale raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, DatasetError> {
        if width == 0 || height == 0 {
            return Err(DatasetError::ZeroDimension { width, height });
        }
        if pixels.len() != width * height {
            return Err(DatasetError::PixelCount(pixels.len(), width, height));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self, DatasetError> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }
}

/// Images with class labels. All images share one size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledDataset {
    images: Vec<Image>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(
        images: Vec<Image>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self, DatasetError> {
        if images.len() != labels.len() {
            return Err(DatasetError::Inconsistent(format!(
                "{} images, {} labels",
                images.len(),
                labels.len()
            )));
        }
        if num_classes == 0 {
            return Err(DatasetError::Inconsistent("zero classes".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DatasetError::Inconsistent(format!(
                "label {bad} outside 0..{num_classes}"
            )));
        }
        if let Some(first) = images.first() {
            let dims = (first.width, first.height);
            if images.iter().any(|im| (im.width, im.height) != dims) {
                return Err(DatasetError::Inconsistent("mixed image sizes".into()));
            }
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `(width, height)` of the images, `None` when empty.
    pub fn dims(&self) -> Option<(usize, usize)> {
        self.images.first().map(|im| (im.width, im.height))
    }

    /// First `n` samples (all of them if `n` exceeds the length).
    pub fn take(&self, n: usize) -> Self {
        self.slice(0, n)
    }

    /// Samples `start..start + n`, clamped to the dataset length.
    pub fn slice(&self, start: usize, n: usize) -> Self {
        let start = start.min(self.len());
        let end = (start + n).min(self.len());
        Self {
            images: self.images[start..end].to_vec(),
            labels: self.labels[start..end].to_vec(),
            num_classes: self.num_classes,
        }
    }

    /// Apply `f` to every image, keeping labels and order.
    pub fn map_images<E>(
        &self,
        mut f: impl FnMut(&Image) -> Result<Image, E>,
    ) -> Result<Self, E> {
        let images = self.images.iter().map(&mut f).collect::<Result<Vec<_>, E>>()?;
        Ok(Self {
            images,
            labels: self.labels.clone(),
            num_classes: self.num_classes,
        })
    }
}

fn read_u32_be(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ])
}

fn read_idx(path: &Path, magic: u32, header_len: usize) -> Result<Vec<u8>, DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() < 4 {
        return Err(DatasetError::TruncatedFile {
            path: path.into(),
            expected: header_len,
            found: bytes.len(),
        });
    }
    let found = read_u32_be(&bytes, 0);
    if found != magic {
        return Err(DatasetError::BadMagic {
            path: path.into(),
            found,
            expected: magic,
        });
    }
    if bytes.len() < header_len {
        return Err(DatasetError::TruncatedFile {
            path: path.into(),
            expected: header_len,
            found: bytes.len(),
        });
    }
    Ok(bytes)
}

/// Load an IDX image file and its IDX label file (MNIST layout).
pub fn load_idx(image_path: &Path, label_path: &Path) -> Result<LabeledDataset, DatasetError> {
    let img_bytes = read_idx(image_path, IDX_IMAGES_MAGIC, 16)?;
    let lbl_bytes = read_idx(label_path, IDX_LABELS_MAGIC, 8)?;

    let count = read_u32_be(&img_bytes, 4) as usize;
    let rows = read_u32_be(&img_bytes, 8) as usize;
    let cols = read_u32_be(&img_bytes, 12) as usize;
    let label_count = read_u32_be(&lbl_bytes, 4) as usize;

    if count != label_count {
        return Err(DatasetError::CountMismatch {
            images: image_path.into(),
            labels: label_path.into(),
            image_count: count,
            label_count,
        });
    }
    let img_expected = 16 + count * rows * cols;
    if img_bytes.len() < img_expected {
        return Err(DatasetError::TruncatedFile {
            path: image_path.into(),
            expected: img_expected,
            found: img_bytes.len(),
        });
    }
    if lbl_bytes.len() < 8 + count {
        return Err(DatasetError::TruncatedFile {
            path: label_path.into(),
            expected: 8 + count,
            found: lbl_bytes.len(),
        });
    }

    let images = img_bytes[16..img_expected]
        .chunks_exact(rows * cols)
        .map(|px| Image::new(cols, rows, px.to_vec()))
        .collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<usize> = lbl_bytes[8..8 + count].iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(1, |&m| m + 1).max(10);
    LabeledDataset::new(images, labels, num_classes)
}

/// Write a dataset as an IDX image/label pair.
pub fn write_idx(
    ds: &LabeledDataset,
    image_path: &Path,
    label_path: &Path,
) -> Result<(), DatasetError> {
    let (w, h) = ds.dims().unwrap_or((0, 0));
    let mut img = Vec::with_capacity(16 + ds.len() * w * h);
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    img.extend_from_slice(&(h as u32).to_be_bytes());
    img.extend_from_slice(&(w as u32).to_be_bytes());
    for im in ds.images() {
        img.extend_from_slice(im.pixels());
    }
    let mut lbl = Vec::with_capacity(8 + ds.len());
    lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lbl.extend(ds.labels().iter().map(|&l| l as u8));
    fs::write(image_path, img).map_err(io_err(image_path))?;
    fs::write(label_path, lbl).map_err(io_err(label_path))
}

/// Nearest-neighbor resampling. Source index is `floor(dst * src_len / dst_len)`.
pub fn resize_nearest(
    img: &Image,
    new_width: usize,
    new_height: usize,
) -> Result<Image, DatasetError> {
    if new_width == 0 || new_height == 0 {
        return Err(DatasetError::ZeroDimension {
            width: new_width,
            height: new_height,
        });
    }
    let xs: Vec<usize> = (0..new_width)
        .map(|x| x * img.width / new_width)
        .collect();
    let mut pixels = Vec::with_capacity(new_width * new_height);
    for y in 0..new_height {
        let row = &img.pixels[(y * img.height / new_height) * img.width..][..img.width];
        pixels.extend(xs.iter().map(|&sx| row[sx]));
    }
    Image::new(new_width, new_height, pixels)
}

/// Resize every image of a dataset.
pub fn resize_dataset(
    ds: &LabeledDataset,
    new_width: usize,
    new_height: usize,
) -> Result<LabeledDataset, DatasetError> {
    ds.map_images(|im| resize_nearest(im, new_width, new_height))
}

/// Encode as binary PGM (`P5`, maxval 255).
pub fn encode_pgm(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn write_pgm(img: &Image, path: &Path) -> Result<(), DatasetError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&encode_pgm(img)).map_err(io_err(path))
}

pub fn read_pgm(path: &Path) -> Result<Image, DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_pgm(&bytes, path)
}

/// Decode binary PGM bytes; `path` is only used in error messages.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Image, DatasetError> {
    let malformed = |reason: &str| DatasetError::MalformedHeader {
        path: path.into(),
        reason: reason.into(),
    };
    let mut pos = 0;
    // Header tokens are separated by whitespace; '#' starts a comment line.
    let next_token = |pos: &mut usize| -> Option<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };

    if next_token(&mut pos).as_deref() != Some("P5") {
        return Err(malformed("missing P5 magic"));
    }
    let mut field = |name: &str| -> Result<u32, DatasetError> {
        next_token(&mut pos)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| malformed(&format!("bad {name}")))
    };
    let width = field("width")? as usize;
    let height = field("height")? as usize;
    let maxval = field("maxval")?;
    if maxval != 255 {
        return Err(DatasetError::UnsupportedMaxval {
            path: path.into(),
            maxval,
        });
    }
    // Exactly one whitespace byte separates maxval from the raster.
    pos += 1;
    let need = width * height;
    let data = bytes.get(pos..).unwrap_or(&[]);
    if data.len() < need {
        return Err(DatasetError::TruncatedFile {
            path: path.into(),
            expected: pos + need,
            found: bytes.len(),
        });
    }
    Image::new(width, height, data[..need].to_vec())
}
