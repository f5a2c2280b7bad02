//! Channel-major rasters with values in `[0, 1]`.
//!
//! Every raster in the pipeline (input frames, garment layers, masks,
//! garment-invariant and hybrid encodings) is carried by [`FrameImage`].
//! Constructors reject out-of-range values; clamping is a separate,
//! explicit operation ([`FrameImage::clamped`]).

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage, Rgba, RgbaImage};

use crate::error::{Error, Result};

/// Spatial dimensions must survive three exact stride-2 halvings.
pub const SPATIAL_MULTIPLE: usize = 8;

/// Channel counts accepted by [`FrameImage::new`]: mask, RGB, RGBA, and the
/// 6-channel garment-invariant / hybrid encodings.
pub const ALLOWED_CHANNELS: [usize; 4] = [1, 3, 4, 6];

pub fn check_resolution(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::shape(format!("empty raster {height}x{width}")));
    }
    if height % SPATIAL_MULTIPLE != 0 || width % SPATIAL_MULTIPLE != 0 {
        return Err(Error::shape(format!(
            "resolution {height}x{width} is not divisible by {SPATIAL_MULTIPLE}"
        )));
    }
    Ok(())
}

#[derive(Clone, PartialEq)]
pub struct FrameImage {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl std::fmt::Debug for FrameImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FrameImage")
            .field("channels", &self.channels)
            .field("height", &self.height)
            .field("width", &self.width)
            .finish_non_exhaustive()
    }
}

impl FrameImage {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if !ALLOWED_CHANNELS.contains(&channels) {
            return Err(Error::shape(format!(
                "channel count {channels} is not one of {ALLOWED_CHANNELS:?}"
            )));
        }
        Self::with_any_channels(channels, height, width, data)
    }

    /// Like [`FrameImage::new`] but accepts any positive channel count. Used
    /// for label one-hot encodings whose depth is the palette size.
    pub fn with_any_channels(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::shape("zero channels"));
        }
        check_resolution(height, width)?;
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(Error::shape(format!(
                "buffer holds {} values, {channels}x{height}x{width} needs {expected}",
                data.len()
            )));
        }
        if let Some((i, v)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::Range(format!("value {v} at flat index {i} outside [0, 1]")));
        }
        Ok(Self { channels, height, width, data })
    }

    /// Builds a raster from arbitrary reals, clamping each into `[0, 1]`.
    /// NaN maps to 0.
    pub fn clamped(channels: usize, height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in data.iter_mut() {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(channels, height, width, data)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self, channel: usize) -> &[f32] {
        let n = self.pixels();
        &self.data[channel * n..(channel + 1) * n]
    }

    pub fn get(&self, channel: usize, y: usize, x: usize) -> f32 {
        self.data[(channel * self.height + y) * self.width + x]
    }

    /// Rounds every value to the nearest multiple of 1/255, the set of
    /// values an 8-bit PNG can hold exactly.
    pub fn quantized(&self) -> Self {
        Self {
            data: self.data.iter().map(|v| quantize_u8(*v) as f32 / 255.0).collect(),
            ..self.clone()
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f32> {
        if self.channels != other.channels || self.resolution() != other.resolution() {
            return Err(Error::shape(format!(
                "cannot compare {}x{}x{} with {}x{}x{}",
                self.channels, self.height, self.width, other.channels, other.height, other.width
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    /// Returns a `(1, C, H, W)` tensor.
    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (1, self.channels, self.height, self.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Reads a `(1, C, H, W)` or `(C, H, W)` tensor. Values must already lie
    /// in `[0, 1]`; the bounded network heads guarantee this.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            r => return Err(Error::shape(format!("expected rank 3 or 4 tensor, got rank {r}"))),
        };
        let (c, h, w) = t.dims3()?;
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::with_any_channels(c, h, w, data)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let (h, w) = (self.height as u32, self.width as u32);
        let px = |c: usize, y: u32, x: u32| quantize_u8(self.get(c, y as usize, x as usize));
        let img = match self.channels {
            1 => DynamicImage::ImageLuma8(GrayImage::from_fn(w, h, |x, y| Luma([px(0, y, x)]))),
            3 => DynamicImage::ImageRgb8(RgbImage::from_fn(w, h, |x, y| {
                Rgb([px(0, y, x), px(1, y, x), px(2, y, x)])
            })),
            4 => DynamicImage::ImageRgba8(RgbaImage::from_fn(w, h, |x, y| {
                Rgba([px(0, y, x), px(1, y, x), px(2, y, x), px(3, y, x)])
            })),
            c => return Err(Error::shape(format!("{c}-channel raster has no PNG form"))),
        };
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Loads a PNG (or any format `image` decodes) as a raster with the
    /// requested channel count (1, 3 or 4).
    pub fn load_image(path: impl AsRef<Path>, channels: usize) -> Result<Self> {
        let img = image::open(path)?;
        Self::from_dynamic(&img, channels)
    }

    pub fn decode(bytes: &[u8], channels: usize) -> Result<Self> {
        let img = image::load_from_memory(bytes)?;
        Self::from_dynamic(&img, channels)
    }

    pub fn from_dynamic(img: &DynamicImage, channels: usize) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let planes: Vec<u8> = match channels {
            1 => img.to_luma8().into_raw(),
            3 => img.to_rgb8().into_raw(),
            4 => img.to_rgba8().into_raw(),
            c => return Err(Error::shape(format!("cannot decode an image into {c} channels"))),
        };
        let mut data = vec![0.0f32; channels * h * w];
        for (i, chunk) in planes.chunks_exact(channels).enumerate() {
            for (c, v) in chunk.iter().enumerate() {
                data[c * h * w + i] = *v as f32 / 255.0;
            }
        }
        Self::new(channels, h, w, data)
    }

    /// Encodes a 1/3/4-channel raster as PNG bytes.
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let (h, w) = (self.height as u32, self.width as u32);
        let mut raw = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    raw.push(quantize_u8(self.get(c, y, x)));
                }
            }
        }
        let img = match self.channels {
            1 => DynamicImage::ImageLuma8(
                ImageBuffer::from_raw(w, h, raw).expect("buffer sized from raster"),
            ),
            3 => DynamicImage::ImageRgb8(
                ImageBuffer::from_raw(w, h, raw).expect("buffer sized from raster"),
            ),
            4 => DynamicImage::ImageRgba8(
                ImageBuffer::from_raw(w, h, raw).expect("buffer sized from raster"),
            ),
            c => return Err(Error::shape(format!("{c}-channel raster has no PNG form"))),
        };
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }
}

pub fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Channel-wise concatenation: `a`'s channels first, then `b`'s.
pub fn concat_channels(a: &FrameImage, b: &FrameImage) -> Result<FrameImage> {
    if a.resolution() != b.resolution() {
        return Err(Error::shape(format!(
            "concat of {}x{}x{} and {}x{}x{}: spatial sizes differ",
            a.channels, a.height, a.width, b.channels, b.height, b.width
        )));
    }
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    FrameImage::with_any_channels(a.channels + b.channels, a.height, a.width, data)
}

/// Inverse of [`concat_channels`]: the first `at` channels and the rest.
pub fn split_channels(img: &FrameImage, at: usize) -> Result<(FrameImage, FrameImage)> {
    if at == 0 || at >= img.channels {
        return Err(Error::shape(format!(
            "split point {at} outside 1..{} for a {}-channel raster",
            img.channels, img.channels
        )));
    }
    let n = at * img.pixels();
    let (h, w) = img.resolution();
    Ok((
        FrameImage::with_any_channels(at, h, w, img.data[..n].to_vec())?,
        FrameImage::with_any_channels(img.channels - at, h, w, img.data[n..].to_vec())?,
    ))
}

/// Single-channel soft mask in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskImage(FrameImage);

impl MaskImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        Ok(Self(FrameImage::new(1, height, width, data)?))
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn from_bools(height: usize, width: usize, bits: &[bool]) -> Result<Self> {
        Self::new(height, width, bits.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect())
    }

    pub fn from_frame(frame: FrameImage) -> Result<Self> {
        if frame.channels() != 1 {
            return Err(Error::shape(format!(
                "a mask has one channel, got {}",
                frame.channels()
            )));
        }
        Ok(Self(frame))
    }

    pub fn as_frame(&self) -> &FrameImage {
        &self.0
    }

    pub fn into_frame(self) -> FrameImage {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.0.resolution()
    }

    pub fn data(&self) -> &[f32] {
        self.0.data()
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.0.get(0, y, x)
    }

    /// Thresholds at 0.5.
    pub fn binarized(&self) -> Vec<bool> {
        self.0.data().iter().map(|v| *v >= 0.5).collect()
    }

    pub fn area(&self) -> usize {
        self.binarized().iter().filter(|b| **b).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(channels: usize) -> FrameImage {
        let n = channels * 96 * 72;
        FrameImage::new(channels, 96, 72, (0..n).map(|i| (i % 251) as f32 / 250.0).collect())
            .unwrap()
    }

    #[test]
    fn concat_rgb_pair_gives_six_channels() {
        let out = concat_channels(&ramp(3), &ramp(3)).unwrap();
        assert_eq!((out.channels(), out.height(), out.width()), (6, 96, 72));
    }

    #[test]
    fn concat_with_zero_image_keeps_first_block() {
        let x = ramp(3);
        let out = concat_channels(&x, &FrameImage::zeros(3, 96, 72).unwrap()).unwrap();
        assert_eq!(&out.data()[..x.data().len()], x.data());
        assert!(out.data()[x.data().len()..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn concat_then_split_round_trips() {
        let (a, b) = (ramp(3), ramp(1));
        let (a2, b2) = split_channels(&concat_channels(&a, &b).unwrap(), 3).unwrap();
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }

    #[test]
    fn concat_rejects_resolution_mismatch() {
        let err = concat_channels(&ramp(3), &FrameImage::zeros(3, 48, 72).unwrap()).unwrap_err();
        assert!(err.to_string().contains("3x96x72"), "{err}");
        assert!(err.to_string().contains("3x48x72"), "{err}");
    }

    #[test]
    fn constructor_rejects_out_of_range_instead_of_clamping() {
        let mut data = vec![0.5; 3 * 8 * 8];
        data[17] = 1.5;
        assert!(matches!(FrameImage::new(3, 8, 8, data.clone()), Err(Error::Range(_))));
        data[17] = f32::NAN;
        assert!(matches!(FrameImage::new(3, 8, 8, data.clone()), Err(Error::Range(_))));
        let clamped = FrameImage::clamped(3, 8, 8, data).unwrap();
        assert_eq!(clamped.data()[17], 0.0);
    }

    #[test]
    fn constructor_rejects_bad_geometry() {
        assert!(FrameImage::zeros(3, 12, 8).is_err());
        assert!(FrameImage::zeros(2, 8, 8).is_err());
        assert!(FrameImage::new(3, 8, 8, vec![0.0; 10]).is_err());
    }

    #[test]
    fn png_round_trip_is_exact_for_quantized_rasters() {
        let dir = tempfile::tempdir().unwrap();
        for c in [1, 3, 4] {
            let img = ramp(c).quantized();
            let path = dir.path().join(format!("x{c}.png"));
            img.save_png(&path).unwrap();
            assert_eq!(FrameImage::load_image(&path, c).unwrap(), img);
            assert_eq!(FrameImage::decode(&img.encode_png().unwrap(), c).unwrap(), img);
        }
    }

    #[test]
    fn mask_binarizes_at_half() {
        let m = MaskImage::new(8, 8, (0..64).map(|i| i as f32 / 63.0).collect()).unwrap();
        let bits = m.binarized();
        assert!(!bits[31] && bits[32]);
    }
}
