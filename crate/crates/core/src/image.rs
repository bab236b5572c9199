//! Canonical image, deformation-field, mask, and feature-map types plus
//! the file formats shared by every other module.
//!
//! Pixel data is stored height-major as `(H, W, C)` in `f32`. Two value
//! ranges are supported: `Unit` (`[0, 1]`, used for file I/O and metrics)
//! and `Signed` (`[-1, 1]`, used for network computation). Range membership
//! is enforced on construction.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView3, Axis};

use crate::error::{Error, Result};

/// Declared pixel value range of an [`Image`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueRange {
    /// Values in `[0, 1]`.
    Unit,
    /// Values in `[-1, 1]`.
    Signed,
}

impl ValueRange {
    pub fn bounds(self) -> (f32, f32) {
        match self {
            ValueRange::Unit => (0.0, 1.0),
            ValueRange::Signed => (-1.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorSpace {
    Rgb,
    Gray,
}

/// An `(H, W, C)` raster with a declared value range.
///
/// Invariants: `H >= 8`, `W >= 8`, `C` is 1 or 3, and every pixel lies
/// within the declared range.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pixels: Array3<f32>,
    range: ValueRange,
    color: ColorSpace,
}

pub const MIN_DIM: usize = 8;

impl Image {
    /// Build an image, validating the range and dimension invariants.
    pub fn new(pixels: Array3<f32>, range: ValueRange, color: ColorSpace) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h < MIN_DIM || w < MIN_DIM {
            return Err(Error::InvalidArgument(format!(
                "image must be at least {MIN_DIM}x{MIN_DIM}, got {h}x{w}"
            )));
        }
        if c != 1 && c != 3 {
            return Err(Error::InvalidArgument(format!(
                "image must have 1 or 3 channels, got {c}"
            )));
        }
        match (color, c) {
            (ColorSpace::Gray, 1) | (ColorSpace::Rgb, 3) => {}
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "color space {color:?} does not match {c} channels"
                )))
            }
        }
        let (lo, hi) = range.bounds();
        for &v in pixels.iter() {
            if !v.is_finite() || v < lo || v > hi {
                return Err(Error::RangeViolation(format!(
                    "pixel value {v} outside {range:?} range [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { pixels, range, color })
    }

    /// Build an image after clamping values into the declared range.
    ///
    /// Used by operations whose exact arithmetic stays in range but whose
    /// floating-point rounding may overshoot a bound by an ulp.
    pub fn new_clamped(mut pixels: Array3<f32>, range: ValueRange, color: ColorSpace) -> Result<Self> {
        let (lo, hi) = range.bounds();
        pixels.mapv_inplace(|v| v.clamp(lo, hi));
        Self::new(pixels, range, color)
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.pixels
    }

    pub fn view(&self) -> ArrayView3<'_, f32> {
        self.pixels.view()
    }

    pub fn into_pixels(self) -> Array3<f32> {
        self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn color_space(&self) -> ColorSpace {
        self.color
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.pixels.dim() == other.pixels.dim()
    }

    /// Channel-first `(C, H, W)` copy in the requested float precision,
    /// the layout used by the network stack.
    pub fn to_chw<A: crate::autodiff::Scalar>(&self) -> ndarray::ArrayD<A> {
        let (h, w, c) = self.pixels.dim();
        let mut out = ndarray::ArrayD::<A>::zeros(ndarray::IxDyn(&[c, h, w]));
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[[ch, i, j]] = A::lit(self.pixels[[i, j, ch]] as f64);
                }
            }
        }
        out
    }

    /// Rebuild an image from a channel-first `(C, H, W)` array, clamping
    /// into the declared range.
    pub fn from_chw<A: crate::autodiff::Scalar>(
        data: &ndarray::ArrayD<A>,
        range: ValueRange,
        color: ColorSpace,
    ) -> Result<Image> {
        let shape = data.shape();
        if shape.len() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "expected 3-d channel-first array, got {shape:?}"
            )));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let mut pixels = Array3::<f32>::zeros((h, w, c));
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    pixels[[i, j, ch]] = data[[ch, i, j]].to_f64_lossy() as f32;
                }
            }
        }
        Image::new_clamped(pixels, range, color)
    }
}

/// Affine remap of an image into a target value range.
///
/// The map is computed in double precision so that a signed/unit round
/// trip reproduces the original pixels.
pub fn convert_range(img: &Image, target: ValueRange) -> Image {
    if img.range == target {
        return img.clone();
    }
    let pixels = img.pixels.mapv(|v| {
        let v = v as f64;
        let out = match (img.range, target) {
            (ValueRange::Unit, ValueRange::Signed) => 2.0 * v - 1.0,
            (ValueRange::Signed, ValueRange::Unit) => (v + 1.0) / 2.0,
            _ => v,
        };
        out as f32
    });
    Image {
        pixels,
        range: target,
        color: img.color,
    }
}

/// Load an 8-bit PNG or JPEG as an [`Image`] in the requested range.
pub fn load_image(path: &Path, range: ValueRange) -> Result<Image> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let dynimg = image::open(path).map_err(|e| match e {
        image::ImageError::Unsupported(u) => Error::UnsupportedFormat(u.to_string()),
        image::ImageError::Decoding(d) => Error::CorruptData(d.to_string()),
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::CorruptData(other.to_string()),
    })?;
    let (color, w, h, bytes, c) = match dynimg {
        image::DynamicImage::ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            (ColorSpace::Gray, w, h, buf.into_raw(), 1usize)
        }
        image::DynamicImage::ImageRgb8(buf) => {
            let (w, h) = buf.dimensions();
            (ColorSpace::Rgb, w, h, buf.into_raw(), 3usize)
        }
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "only 8-bit gray/RGB without alpha is supported, got {:?}",
                other.color()
            )))
        }
    };
    let (h, w) = (h as usize, w as usize);
    let mut pixels = Array3::<f32>::zeros((h, w, c));
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                let byte = bytes[(i * w + j) * c + ch] as f32;
                pixels[[i, j, ch]] = match range {
                    ValueRange::Unit => byte / 255.0,
                    ValueRange::Signed => byte / 255.0 * 2.0 - 1.0,
                };
            }
        }
    }
    Image::new(pixels, range, color)
}

/// Quantize a pixel to a byte: clip into range, remap to `[0, 255]`, round.
fn quantize(v: f32, range: ValueRange) -> u8 {
    let unit = match range {
        ValueRange::Unit => v.clamp(0.0, 1.0),
        ValueRange::Signed => (v.clamp(-1.0, 1.0) + 1.0) / 2.0,
    };
    (unit * 255.0).round() as u8
}

/// Write an image as an 8-bit PNG, clipping then rounding each value.
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let (h, w, c) = img.pixels.dim();
    let mut bytes = Vec::with_capacity(h * w * c);
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                bytes.push(quantize(img.pixels[[i, j, ch]], img.range));
            }
        }
    }
    let color = match img.color {
        ColorSpace::Gray => image::ExtendedColorType::L8,
        ColorSpace::Rgb => image::ExtendedColorType::Rgb8,
    };
    image::save_buffer(path, &bytes, w as u32, h as u32, color)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

/// Dense per-pixel 2-vector displacement map, `(H, W, 2)` with `dx`
/// at channel 0 and `dy` at channel 1, in pixel units.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    data: Array3<f32>,
}

impl DeformationField {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        if data.dim().2 != 2 {
            return Err(Error::ShapeMismatch(format!(
                "deformation field needs 2 displacement channels, got {}",
                data.dim().2
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "deformation field contains non-finite values".into(),
            ));
        }
        Ok(Self { data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: Array3::zeros((height, width, 2)),
        }
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    /// Largest per-pixel displacement magnitude.
    pub fn max_magnitude(&self) -> f32 {
        let mut best = 0.0f32;
        for row in self.data.axis_iter(Axis(0)) {
            for p in row.axis_iter(Axis(0)) {
                let m = (p[0] * p[0] + p[1] * p[1]).sqrt();
                best = best.max(m);
            }
        }
        best
    }

    /// Channel-first `(2, H, W)` copy for the network stack.
    pub fn to_chw<A: crate::autodiff::Scalar>(&self) -> ndarray::ArrayD<A> {
        let (h, w, _) = self.data.dim();
        let mut out = ndarray::ArrayD::<A>::zeros(ndarray::IxDyn(&[2, h, w]));
        for i in 0..h {
            for j in 0..w {
                out[[0, i, j]] = A::lit(self.data[[i, j, 0]] as f64);
                out[[1, i, j]] = A::lit(self.data[[i, j, 1]] as f64);
            }
        }
        out
    }

    pub fn from_chw<A: crate::autodiff::Scalar>(data: &ndarray::ArrayD<A>) -> Result<Self> {
        let shape = data.shape();
        if shape.len() != 3 || shape[0] != 2 {
            return Err(Error::ShapeMismatch(format!(
                "expected (2, H, W) array, got {shape:?}"
            )));
        }
        let (h, w) = (shape[1], shape[2]);
        let mut out = Array3::<f32>::zeros((h, w, 2));
        for i in 0..h {
            for j in 0..w {
                out[[i, j, 0]] = data[[0, i, j]].to_f64_lossy() as f32;
                out[[i, j, 1]] = data[[1, i, j]].to_f64_lossy() as f32;
            }
        }
        Self::new(out)
    }
}

const DFLD_MAGIC: &[u8; 4] = b"DFLD";
const DFLD_VERSION: u32 = 1;

/// Write the sidecar deformation-field container: 16-byte header
/// (magic, version, H, W as little-endian u32) followed by `H*W*2`
/// little-endian f32 values, row-major, `dx` then `dy` per pixel.
pub fn save_field(field: &DeformationField, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(DFLD_MAGIC)?;
    f.write_all(&DFLD_VERSION.to_le_bytes())?;
    f.write_all(&(field.height() as u32).to_le_bytes())?;
    f.write_all(&(field.width() as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(field.height() * field.width() * 8);
    for i in 0..field.height() {
        for j in 0..field.width() {
            buf.extend_from_slice(&field.data[[i, j, 0]].to_le_bytes());
            buf.extend_from_slice(&field.data[[i, j, 1]].to_le_bytes());
        }
    }
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_field(path: &Path) -> Result<DeformationField> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut f = std::fs::File::open(path)?;
    let mut header = [0u8; 16];
    f.read_exact(&mut header)
        .map_err(|_| Error::CorruptData("field file shorter than header".into()))?;
    if &header[0..4] != DFLD_MAGIC {
        return Err(Error::CorruptData("bad DFLD magic".into()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != DFLD_VERSION {
        return Err(Error::CorruptData(format!(
            "unsupported DFLD version {version}"
        )));
    }
    let h = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let mut buf = vec![0u8; h * w * 2 * 4];
    f.read_exact(&mut buf)
        .map_err(|_| Error::CorruptData("field file truncated".into()))?;
    let mut data = Array3::<f32>::zeros((h, w, 2));
    let mut k = 0;
    for i in 0..h {
        for j in 0..w {
            data[[i, j, 0]] = f32::from_le_bytes(buf[k..k + 4].try_into().unwrap());
            data[[i, j, 1]] = f32::from_le_bytes(buf[k + 4..k + 8].try_into().unwrap());
            k += 8;
        }
    }
    DeformationField::new(data)
}

/// Binary per-pixel map of identity-critical facial regions.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMask {
    data: Array2<u8>,
}

impl SemanticMask {
    pub fn new(data: Array2<u8>) -> Result<Self> {
        if data.iter().any(|&v| v > 1) {
            return Err(Error::NonBinaryMask(
                "mask values must be exactly 0 or 1".into(),
            ));
        }
        Ok(Self { data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: Array2::zeros((height, width)),
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            data: Array2::from_elem((height, width), 1),
        }
    }

    pub fn data(&self) -> &Array2<u8> {
        &self.data
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }
}

/// Load a 1-channel mask PNG; bytes must be exactly 0 or 255.
pub fn load_mask(path: &Path) -> Result<SemanticMask> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let dynimg = image::open(path).map_err(|e| Error::CorruptData(e.to_string()))?;
    let buf = match dynimg {
        image::DynamicImage::ImageLuma8(buf) => buf,
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "mask must be an 8-bit gray PNG, got {:?}",
                other.color()
            )))
        }
    };
    let (w, h) = buf.dimensions();
    let mut data = Array2::<u8>::zeros((h as usize, w as usize));
    for (j, i, p) in buf.enumerate_pixels() {
        data[[i as usize, j as usize]] = match p[0] {
            0 => 0,
            255 => 1,
            other => {
                return Err(Error::NonBinaryMask(format!(
                    "mask byte {other} at ({i}, {j}) is neither 0 nor 255"
                )))
            }
        };
    }
    SemanticMask::new(data)
}

pub fn save_mask(mask: &SemanticMask, path: &Path) -> Result<()> {
    let (h, w) = mask.data.dim();
    let bytes: Vec<u8> = mask.data.iter().map(|&v| v * 255).collect();
    image::save_buffer(
        path,
        &bytes,
        w as u32,
        h as u32,
        image::ExtendedColorType::L8,
    )
    .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

/// An `(m, n, d)` activation block: spatial rows, spatial columns, channels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    data: Array3<f32>,
}

impl FeatureMap {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "feature map contains non-finite values".into(),
            ));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    /// (rows, cols, channels)
    pub fn dim(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn from_chw<A: crate::autodiff::Scalar>(data: &ndarray::ArrayD<A>) -> Result<Self> {
        let shape = data.shape();
        if shape.len() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "expected (C, H, W) array, got {shape:?}"
            )));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let mut out = Array3::<f32>::zeros((h, w, c));
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[[i, j, ch]] = data[[ch, i, j]].to_f64_lossy() as f32;
                }
            }
        }
        Self::new(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn unit_img(h: usize, w: usize, v: f32) -> Image {
        Image::new(Array3::from_elem((h, w, 1), v), ValueRange::Unit, ColorSpace::Gray).unwrap()
    }

    #[test]
    fn range_endpoints_map_to_extremes() {
        // byte 255 at unit range -> 1.0, byte 0 at signed range -> -1.0
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("extremes.png");
        let mut px = Array3::zeros((8, 8, 1));
        px[[0, 0, 0]] = 1.0f32;
        let img = Image::new(px, ValueRange::Unit, ColorSpace::Gray).unwrap();
        save_image(&img, &path).unwrap();

        let unit = load_image(&path, ValueRange::Unit).unwrap();
        assert_eq!(unit.pixels()[[0, 0, 0]], 1.0);
        assert_eq!(unit.pixels()[[1, 1, 0]], 0.0);

        let signed = load_image(&path, ValueRange::Signed).unwrap();
        assert_eq!(signed.pixels()[[0, 0, 0]], 1.0);
        assert_eq!(signed.pixels()[[1, 1, 0]], -1.0);
    }

    #[test]
    fn quantization_rounds_and_clips() {
        assert_eq!(quantize(0.5, ValueRange::Unit), 128); // round(127.5)
        assert_eq!(quantize(1.2, ValueRange::Unit), 255);
        assert_eq!(quantize(-0.1, ValueRange::Unit), 0);
        assert_eq!(quantize(-1.0, ValueRange::Signed), 0);
        assert_eq!(quantize(1.0, ValueRange::Signed), 255);
    }

    #[test]
    fn save_load_roundtrip_within_one_quantization_step() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        let px = Array3::from_shape_fn((16, 16, 3), |_| rng.gen_range(0.0f32..=1.0));
        let img = Image::new(px, ValueRange::Unit, ColorSpace::Rgb).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.png");
        save_image(&img, &path).unwrap();
        let back = load_image(&path, ValueRange::Unit).unwrap();
        let max_diff = img
            .pixels()
            .iter()
            .zip(back.pixels().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff <= 1.0 / 255.0, "max diff {max_diff}");
    }

    #[test]
    fn convert_range_midpoint_and_endpoint() {
        let img = unit_img(8, 8, 0.5);
        let signed = convert_range(&img, ValueRange::Signed);
        assert_eq!(signed.pixels()[[0, 0, 0]], 0.0);
        let img = unit_img(8, 8, 0.0);
        let signed = convert_range(&img, ValueRange::Signed);
        assert_eq!(signed.pixels()[[0, 0, 0]], -1.0);
    }

    #[test]
    fn convert_range_roundtrip_exact_on_quantized_values() {
        // Every 8-bit-derived value must survive unit -> signed -> unit.
        for k in 0u16..=255 {
            let v = k as f32 / 255.0;
            let img = unit_img(8, 8, v);
            let back = convert_range(&convert_range(&img, ValueRange::Signed), ValueRange::Unit);
            assert_eq!(back.pixels()[[0, 0, 0]], v, "k = {k}");
        }
    }

    #[test]
    fn missing_file_and_corrupt_data_are_distinct_errors() {
        let err = load_image(Path::new("/nonexistent/x.png"), ValueRange::Unit).unwrap_err();
        assert!(matches!(err, Error::MissingFile(_)));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("garbage.png");
        std::fs::write(&path, b"\x89PNG\r\n\x1a\nnot really a png").unwrap();
        let err = load_image(&path, ValueRange::Unit).unwrap_err();
        assert!(matches!(err, Error::CorruptData(_) | Error::UnsupportedFormat(_)));
    }

    #[test]
    fn image_invariants_rejected() {
        let px = Array3::from_elem((4, 8, 1), 0.5f32);
        assert!(Image::new(px, ValueRange::Unit, ColorSpace::Gray).is_err());
        let px = Array3::from_elem((8, 8, 2), 0.5f32);
        assert!(Image::new(px, ValueRange::Unit, ColorSpace::Gray).is_err());
        let px = Array3::from_elem((8, 8, 1), 1.5f32);
        assert!(Image::new(px, ValueRange::Unit, ColorSpace::Gray).is_err());
    }

    #[test]
    fn dfld_roundtrip_preserves_bytes() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);
        let data = Array3::from_shape_fn((12, 9, 2), |_| rng.gen_range(-4.0f32..4.0));
        let field = DeformationField::new(data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.dfld");
        save_field(&field, &path).unwrap();
        let back = load_field(&path).unwrap();
        assert_eq!(field, back);

        let raw = std::fs::read(&path).unwrap();
        assert_eq!(&raw[0..4], b"DFLD");
        assert_eq!(raw.len(), 16 + 12 * 9 * 2 * 4);
    }

    #[test]
    fn mask_png_roundtrip_and_nonbinary_rejected() {
        let mut m = Array2::zeros((9, 8));
        m[[2, 3]] = 1;
        let mask = SemanticMask::new(m).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        save_mask(&mask, &path).unwrap();
        assert_eq!(load_mask(&path).unwrap(), mask);

        let gray = image::GrayImage::from_pixel(8, 8, image::Luma([6u8]));
        let path2 = dir.path().join("bad.png");
        gray.save(&path2).unwrap();
        assert!(matches!(load_mask(&path2).unwrap_err(), Error::NonBinaryMask(_)));
    }
}
