//! Feature bundles, trained weights, and their binary file formats.
//!
//! Both formats are little-endian and self-describing.
//!
//! Feature bundle (`CALF`):
//!
//! ```text
//! "CALF" | u32 version=1 | u32 K | u32 C | u32 N | u32 H | u32 W
//! K x ( u16 name_len | name_len bytes UTF-8 )
//! K*C f32 text features, row-major
//! N x ( u32 label | H*W*C f32, (h, w, c) order )
//! ```
//!
//! Weights (`CALW`):
//!
//! ```text
//! "CALW" | u32 version=1 | u32 C | u64 seed | u32 epochs | f32 lr
//! w_q b_q w_k b_k w_v b_v w_post b_post   (row-major f32)
//! ```
//!
//! Decoding never trusts a header count before checking it against the
//! bytes actually present, so hostile headers cannot trigger huge
//! allocations. Every rejection carries the byte offset it was detected at.

use std::collections::HashSet;
use std::hash::{Hash, Hasher};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CalipError, Result};
use crate::parametric::ProjectionParams;
use crate::tensor::{Mat, SpatialMap};

pub const BUNDLE_MAGIC: &[u8; 4] = b"CALF";
pub const WEIGHTS_MAGIC: &[u8; 4] = b"CALW";
pub const FORMAT_VERSION: u32 = 1;

/// Allowed deviation of a text feature row from unit norm.
pub const TEXT_NORM_TOLERANCE: f64 = 1e-4;

const BUNDLE_HEADER_LEN: u64 = 28;
const WEIGHTS_HEADER_LEN: u64 = 28;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub label: u32,
    pub spatial: SpatialMap,
}

/// A dataset's class text features and per-image spatial feature maps.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    class_names: Vec<String>,
    text: Mat,
    images: Vec<LabeledImage>,
    h: usize,
    w: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleDims {
    pub classes: usize,
    pub channels: usize,
    pub images: usize,
    pub h: usize,
    pub w: usize,
}

impl FeatureBundle {
    /// Validates every bundle invariant: non-empty unique class names,
    /// unit-norm text rows, consistent image shapes, labels in range.
    pub fn new(
        class_names: Vec<String>,
        text: Mat,
        images: Vec<LabeledImage>,
        h: usize,
        w: usize,
    ) -> Result<Self> {
        let k = class_names.len();
        if k == 0 || text.cols() == 0 || h == 0 || w == 0 {
            return Err(CalipError::param(
                "bundle",
                format!(
                    "needs K, C, H, W >= 1 (got K={k}, C={}, H={h}, W={w})",
                    text.cols()
                ),
            ));
        }
        if text.rows() != k {
            return Err(CalipError::dim(
                "FeatureBundle::new",
                format!("{k} class names"),
                format!("{} text rows", text.rows()),
            ));
        }
        let mut seen = HashSet::new();
        for name in &class_names {
            if name.len() > u16::MAX as usize {
                return Err(CalipError::param("class_names", format!("name too long: {} bytes", name.len())));
            }
            if !seen.insert(name.as_str()) {
                return Err(CalipError::param("class_names", format!("duplicate class {name:?}")));
            }
        }
        for (r, n) in text.row_norms().into_iter().enumerate() {
            if (n - 1.0).abs() > TEXT_NORM_TOLERANCE {
                return Err(CalipError::param(
                    "text_features",
                    format!("row {r} has norm {n}, expected 1 within {TEXT_NORM_TOLERANCE}"),
                ));
            }
        }
        for (i, img) in images.iter().enumerate() {
            let s = &img.spatial;
            if (s.h(), s.w(), s.c()) != (h, w, text.cols()) {
                return Err(CalipError::dim(
                    "FeatureBundle::new",
                    format!("bundle {h}x{w}x{}", text.cols()),
                    format!("image {i} is {}x{}x{}", s.h(), s.w(), s.c()),
                ));
            }
            if img.label as usize >= k {
                return Err(CalipError::param(
                    "label",
                    format!("image {i} has label {} but K = {k}", img.label),
                ));
            }
        }
        Ok(FeatureBundle {
            class_names,
            text,
            images,
            h,
            w,
        })
    }

    pub fn dims(&self) -> BundleDims {
        BundleDims {
            classes: self.class_names.len(),
            channels: self.text.cols(),
            images: self.images.len(),
            h: self.h,
            w: self.w,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn channels(&self) -> usize {
        self.text.cols()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn text(&self) -> &Mat {
        &self.text
    }

    pub fn images(&self) -> &[LabeledImage] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Indices of the images of each class, in bundle order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes()];
        for (i, img) in self.images.iter().enumerate() {
            out[img.label as usize].push(i);
        }
        out
    }

    /// The same classes with only the selected images, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut images = Vec::with_capacity(indices.len());
        for &i in indices {
            let img = self.images.get(i).ok_or_else(|| {
                CalipError::Protocol(format!("image index {i} out of range (N = {})", self.len()))
            })?;
            images.push(img.clone());
        }
        Ok(FeatureBundle {
            class_names: self.class_names.clone(),
            text: self.text.clone(),
            images,
            h: self.h,
            w: self.w,
        })
    }

    /// Hash over every float bit pattern, label and name.
    pub fn checksum(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.class_names.hash(&mut h);
        for v in self.text.data() {
            v.to_bits().hash(&mut h);
        }
        for img in &self.images {
            img.label.hash(&mut h);
            for v in img.spatial.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Trained projection parameters plus the metadata stored alongside them.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightsFile {
    pub params: ProjectionParams,
    pub seed: u64,
    pub epochs: u32,
    pub lr: f32,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, vs: &[f32]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| CalipError::param(what, format!("{v} does not fit in u32")))
}

pub fn encode_bundle(bundle: &FeatureBundle) -> Result<Vec<u8>> {
    let d = bundle.dims();
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(BUNDLE_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u32(to_u32(d.classes, "K")?);
    w.u32(to_u32(d.channels, "C")?);
    w.u32(to_u32(d.images, "N")?);
    w.u32(to_u32(d.h, "H")?);
    w.u32(to_u32(d.w, "W")?);
    for name in &bundle.class_names {
        w.u16(name.len() as u16);
        w.0.extend_from_slice(name.as_bytes());
    }
    w.f32s(bundle.text.data());
    for img in &bundle.images {
        w.u32(img.label);
        w.f32s(img.spatial.data());
    }
    Ok(w.0)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CalipError::Truncated {
                expected: self.pos as u64 + n as u64,
                actual: self.buf.len() as u64,
            }),
        }
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// `n` finite floats; the caller has already checked the length.
    fn finite_f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let start = self.pos;
        let bytes = self.take(n * 4)?;
        let mut out = Vec::with_capacity(n);
        for (i, chunk) in bytes.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(CalipError::Integrity {
                    offset: (start + i * 4) as u64,
                    reason: format!("non-finite {what} value {v}"),
                });
            }
            out.push(v);
        }
        Ok(out)
    }
}

fn check_magic(buf: &[u8], magic: &[u8; 4], kind: &str) -> Result<()> {
    let n = buf.len().min(4);
    if buf[..n] != magic[..n] {
        return Err(CalipError::Format {
            offset: 0,
            reason: format!(
                "bad magic {:?}, expected {:?} ({kind})",
                String::from_utf8_lossy(&buf[..n]),
                std::str::from_utf8(magic).unwrap()
            ),
        });
    }
    Ok(())
}

fn check_version(r: &mut Reader<'_>) -> Result<()> {
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CalipError::Format {
            offset: 4,
            reason: format!("unsupported version {version}, expected {FORMAT_VERSION}"),
        });
    }
    Ok(())
}

fn overflow(offset: u64) -> CalipError {
    CalipError::Format {
        offset,
        reason: "header dimensions overflow the addressable file size".into(),
    }
}

pub fn decode_bundle(buf: &[u8]) -> Result<FeatureBundle> {
    check_magic(buf, BUNDLE_MAGIC, "feature bundle")?;
    if (buf.len() as u64) < BUNDLE_HEADER_LEN {
        // Report version problems before length problems when the bytes exist.
        if buf.len() >= 8 {
            check_version(&mut Reader { buf, pos: 4 })?;
        }
        return Err(CalipError::Truncated {
            expected: BUNDLE_HEADER_LEN,
            actual: buf.len() as u64,
        });
    }
    let mut r = Reader { buf, pos: 4 };
    check_version(&mut r)?;
    let mut dims = [0usize; 5];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = r.u32()? as usize;
        // N (index 2) may be zero; the rest must not be.
        if i != 2 && *d == 0 {
            let name = ["K", "C", "N", "H", "W"][i];
            return Err(CalipError::Format {
                offset: 8 + 4 * i as u64,
                reason: format!("{name} must be >= 1"),
            });
        }
    }
    let [k, c, n, h, w] = dims;

    // Each name needs at least its 2-byte length prefix.
    let remaining = buf.len() - r.pos;
    if (k as u64) * 2 > remaining as u64 {
        return Err(CalipError::Truncated {
            expected: r.pos as u64 + k as u64 * 2,
            actual: buf.len() as u64,
        });
    }
    let mut names = Vec::with_capacity(k);
    let mut seen = HashSet::new();
    for _ in 0..k {
        let at = r.pos as u64;
        let len = r.u16()? as usize;
        let bytes = r.take(len)?;
        let name = std::str::from_utf8(bytes).map_err(|e| CalipError::Format {
            offset: at + 2 + e.valid_up_to() as u64,
            reason: "class name is not valid UTF-8".into(),
        })?;
        if !seen.insert(name) {
            return Err(CalipError::Integrity {
                offset: at,
                reason: format!("duplicate class name {name:?}"),
            });
        }
        names.push(name.to_owned());
    }

    let text_len = (k as u64).checked_mul(c as u64).and_then(|v| v.checked_mul(4)).ok_or_else(|| overflow(8))?;
    let pixel_floats = (h as u64)
        .checked_mul(w as u64)
        .and_then(|v| v.checked_mul(c as u64))
        .ok_or_else(|| overflow(20))?;
    let image_len = pixel_floats.checked_mul(4).and_then(|v| v.checked_add(4)).ok_or_else(|| overflow(20))?;
    let expected = (n as u64)
        .checked_mul(image_len)
        .and_then(|v| v.checked_add(text_len))
        .and_then(|v| v.checked_add(r.pos as u64))
        .ok_or_else(|| overflow(16))?;
    let actual = buf.len() as u64;
    if actual < expected {
        return Err(CalipError::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(CalipError::Integrity {
            offset: expected,
            reason: format!("{} trailing bytes after the last image", actual - expected),
        });
    }

    let text_start = r.pos as u64;
    let text = Mat::new(k, c, r.finite_f32s(k * c, "text feature")?)?;
    for (row, norm) in text.row_norms().into_iter().enumerate() {
        if (norm - 1.0).abs() > TEXT_NORM_TOLERANCE {
            return Err(CalipError::Integrity {
                offset: text_start + (row * c * 4) as u64,
                reason: format!("text row {row} has norm {norm:.6}, expected 1"),
            });
        }
    }

    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let at = r.pos as u64;
        let label = r.u32()?;
        if label as usize >= k {
            return Err(CalipError::Integrity {
                offset: at,
                reason: format!("image {i} label {label} >= K = {k}"),
            });
        }
        let data = r.finite_f32s(pixel_floats as usize, "spatial feature")?;
        images.push(LabeledImage {
            label,
            spatial: SpatialMap::new(h, w, c, data)?,
        });
    }

    FeatureBundle::new(names, text, images, h, w)
}

pub fn save_bundle(bundle: &FeatureBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_bundle(bundle)?).map_err(|e| CalipError::io(path, e))
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<FeatureBundle> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| CalipError::io(path, e))?;
    decode_bundle(&buf)
}

pub fn encode_weights(file: &WeightsFile) -> Result<Vec<u8>> {
    let p = &file.params;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(WEIGHTS_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u32(to_u32(p.channels(), "C")?);
    w.u64(file.seed);
    w.u32(file.epochs);
    w.f32s(&[file.lr]);
    for (weight, bias) in p.tensors() {
        w.f32s(weight.data());
        w.f32s(bias);
    }
    Ok(w.0)
}

pub fn decode_weights(buf: &[u8]) -> Result<WeightsFile> {
    check_magic(buf, WEIGHTS_MAGIC, "weights")?;
    if (buf.len() as u64) < WEIGHTS_HEADER_LEN {
        if buf.len() >= 8 {
            check_version(&mut Reader { buf, pos: 4 })?;
        }
        return Err(CalipError::Truncated {
            expected: WEIGHTS_HEADER_LEN,
            actual: buf.len() as u64,
        });
    }
    let mut r = Reader { buf, pos: 4 };
    check_version(&mut r)?;
    let c = r.u32()? as usize;
    if c == 0 {
        return Err(CalipError::Format {
            offset: 8,
            reason: "C must be >= 1".into(),
        });
    }
    let seed = r.u64()?;
    let epochs = r.u32()?;
    let lr_at = r.pos as u64;
    let lr = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if !lr.is_finite() {
        return Err(CalipError::Integrity {
            offset: lr_at,
            reason: format!("non-finite learning rate {lr}"),
        });
    }
    let expected = (c as u64)
        .checked_mul(c as u64)
        .and_then(|v| v.checked_add(c as u64))
        .and_then(|v| v.checked_mul(16))
        .and_then(|v| v.checked_add(WEIGHTS_HEADER_LEN))
        .ok_or_else(|| overflow(8))?;
    let actual = buf.len() as u64;
    if actual < expected {
        return Err(CalipError::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(CalipError::Integrity {
            offset: expected,
            reason: format!("{} trailing bytes after b_post", actual - expected),
        });
    }
    let mut parts = Vec::with_capacity(4);
    for name in ["w_q", "w_k", "w_v", "w_post"] {
        let weight = Mat::new(c, c, r.finite_f32s(c * c, name)?)?;
        let bias = r.finite_f32s(c, name)?;
        parts.push((weight, bias));
    }
    let mut it = parts.into_iter();
    let mut next = || it.next().unwrap();
    let params = ProjectionParams::from_parts(next(), next(), next(), next())?;
    Ok(WeightsFile {
        params,
        seed,
        epochs,
        lr,
    })
}

pub fn save_weights(file: &WeightsFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_weights(file)?).map_err(|e| CalipError::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightsFile> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| CalipError::io(path, e))?;
    decode_weights(&buf)
}
