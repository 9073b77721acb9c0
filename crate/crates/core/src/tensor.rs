//! Dense channel-major maps, bilinear sampling, resize and integer crop.
//!
//! Map coordinates put the center of cell `(y, x)` at the integer point
//! `(y, x)`. Image pixel coordinates put the same cell over `[x, x + 1)`, so a
//! pixel coordinate `u` corresponds to map coordinate `u / stride - 0.5`.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::geometry::{BBox, ImageExtent};
use crate::math;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("map dimensions must be positive, got {channels}x{height}x{width}")]
    EmptyShape {
        channels: usize,
        height: usize,
        width: usize,
    },
    #[error("data length {actual} does not match shape ({expected} expected)")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("map contains a non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("stride must be positive and finite, got {0}")]
    InvalidStride(f64),
    #[error("images need 1 or 3 channels, got {0}")]
    ImageChannels(usize),
    #[error("image value {value} at flat index {index} outside [0, 1]")]
    ImageRange { index: usize, value: f32 },
    #[error("output size must be positive, got {0}x{1}")]
    EmptyResize(usize, usize),
    #[error("crop selects no pixel centers")]
    DegenerateCrop,
}

/// Rank-3 array `channels x height x width` plus the image-to-map stride.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    stride: f64,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
        stride: f64,
    ) -> Result<Self, TensorError> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(TensorError::EmptyShape {
                channels,
                height,
                width,
            });
        }
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                expected,
                actual: data.len(),
            });
        }
        if !(stride > 0.0 && stride.is_finite()) {
            return Err(TensorError::InvalidStride(stride));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            stride,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize, stride: f64) -> Result<Self, TensorError> {
        Self::new(channels, height, width, vec![0.0; channels * height * width], stride)
    }

    /// Build from a per-cell function `f(c, y, x)`.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        stride: f64,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self, TensorError> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, data, stride)
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

    pub fn stride(&self) -> f64 {
        self.stride
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn with_stride(mut self, stride: f64) -> Result<Self, TensorError> {
        if !(stride > 0.0 && stride.is_finite()) {
            return Err(TensorError::InvalidStride(stride));
        }
        self.stride = stride;
        Ok(self)
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Bilinear value of every channel at map coordinate `(x, y)`.
    pub fn bilinear_sample(&self, x: f64, y: f64) -> Vec<f32> {
        let mut out = vec![0.0f64; self.channels];
        self.accumulate_sample(x, y, 1.0, &mut out);
        out.into_iter().map(|v| v as f32).collect()
    }

    /// Adds `weight * sample(x, y)` to `acc` per channel.
    pub(crate) fn accumulate_sample(&self, x: f64, y: f64, weight: f64, acc: &mut [f64]) {
        let tx = Tap::new(x, self.width);
        let ty = Tap::new(y, self.height);
        let n = self.height * self.width;
        let (r0, r1) = (ty.lo * self.width, ty.hi * self.width);
        let w00 = (1.0 - ty.frac) * (1.0 - tx.frac) * weight;
        let w01 = (1.0 - ty.frac) * tx.frac * weight;
        let w10 = ty.frac * (1.0 - tx.frac) * weight;
        let w11 = ty.frac * tx.frac * weight;
        for (c, a) in acc.iter_mut().enumerate() {
            let p = &self.data[c * n..(c + 1) * n];
            *a += w00 * f64::from(p[r0 + tx.lo])
                + w01 * f64::from(p[r0 + tx.hi])
                + w10 * f64::from(p[r1 + tx.lo])
                + w11 * f64::from(p[r1 + tx.hi]);
        }
    }

    /// Half-pixel aligned bilinear resample; aspect ratio is not preserved.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<FeatureMap, TensorError> {
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::EmptyResize(out_h, out_w));
        }
        let sy = self.height as f64 / out_h as f64;
        let sx = self.width as f64 / out_w as f64;
        let rows: Vec<Tap> = (0..out_h)
            .map(|i| Tap::new((i as f64 + 0.5) * sy - 0.5, self.height))
            .collect();
        let cols: Vec<Tap> = (0..out_w)
            .map(|j| Tap::new((j as f64 + 0.5) * sx - 0.5, self.width))
            .collect();
        let mut data = Vec::with_capacity(self.channels * out_h * out_w);
        for c in 0..self.channels {
            let p = self.plane(c);
            for ty in &rows {
                let r0 = &p[ty.lo * self.width..(ty.lo + 1) * self.width];
                let r1 = &p[ty.hi * self.width..(ty.hi + 1) * self.width];
                for tx in &cols {
                    let top = (1.0 - tx.frac) * f64::from(r0[tx.lo]) + tx.frac * f64::from(r0[tx.hi]);
                    let bot = (1.0 - tx.frac) * f64::from(r1[tx.lo]) + tx.frac * f64::from(r1[tx.hi]);
                    data.push(((1.0 - ty.frac) * top + ty.frac * bot) as f32);
                }
            }
        }
        let stride = self.stride * sy.max(sx);
        FeatureMap::new(self.channels, out_h, out_w, data, stride)
    }

    /// Integer crop of the cells whose centers lie inside `b` (pixel
    /// coordinates relative to this map's grid, stride ignored).
    pub fn crop(&self, b: &BBox) -> Result<FeatureMap, TensorError> {
        let (c0, c1) = center_range(b.x1, b.x2, self.width).ok_or(TensorError::DegenerateCrop)?;
        let (r0, r1) = center_range(b.y1, b.y2, self.height).ok_or(TensorError::DegenerateCrop)?;
        let (h, w) = (r1 - r0 + 1, c1 - c0 + 1);
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            let p = self.plane(c);
            for y in r0..=r1 {
                data.extend_from_slice(&p[y * self.width + c0..=y * self.width + c1]);
            }
        }
        FeatureMap::new(self.channels, h, w, data, self.stride)
    }
}

/// Inclusive index range of cells `i` with `lo <= i + 0.5 <= hi`, clamped to
/// `0..len`.
fn center_range(lo: f64, hi: f64, len: usize) -> Option<(usize, usize)> {
    let first = math::ceil(lo - 0.5).max(0.0);
    let last = math::floor(hi - 0.5).min(len as f64 - 1.0);
    if !(first <= last) {
        return None;
    }
    Some((first as usize, last as usize))
}

/// Two neighbouring indices and the interpolation weight of the upper one,
/// with border clamping.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

impl Tap {
    fn new(coord: f64, len: usize) -> Tap {
        let max = (len - 1) as f64;
        let c = coord.clamp(0.0, max);
        let lo = math::floor(c);
        let lo_i = lo as usize;
        let hi_i = (lo_i + 1).min(len - 1);
        Tap {
            lo: lo_i,
            hi: hi_i,
            frac: if hi_i == lo_i { 0.0 } else { c - lo },
        }
    }
}

/// An RGB or grayscale image with values in `[0, 1]` and stride 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Image(FeatureMap);

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self, TensorError> {
        Self::from_map(FeatureMap::new(channels, height, width, data, 1.0)?)
    }

    pub fn from_map(map: FeatureMap) -> Result<Self, TensorError> {
        if map.channels != 1 && map.channels != 3 {
            return Err(TensorError::ImageChannels(map.channels));
        }
        if let Some(index) = map.data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(TensorError::ImageRange {
                index,
                value: map.data[index],
            });
        }
        Ok(Image(map.with_stride(1.0)?))
    }

    pub fn as_map(&self) -> &FeatureMap {
        &self.0
    }

    pub fn into_map(self) -> FeatureMap {
        self.0
    }

    pub fn extent(&self) -> ImageExtent {
        ImageExtent {
            width: self.0.width as u32,
            height: self.0.height as u32,
        }
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn channels(&self) -> usize {
        self.0.channels
    }

    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Image, TensorError> {
        let m = self.0.resize_bilinear(out_h, out_w)?;
        // Convex weights keep values in range; only the stride changes.
        Ok(Image(m.with_stride(1.0)?))
    }

    pub fn crop(&self, b: &BBox) -> Result<Image, TensorError> {
        Ok(Image(self.0.crop(b)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;
    use proptest::prelude::*;

    fn random_map(rng: &mut Prng, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::from_fn(c, h, w, 1.0, |_, _, _| rng.unit_f32()).unwrap()
    }

    fn ramp(h: usize, w: usize) -> FeatureMap {
        FeatureMap::from_fn(1, h, w, 1.0, |_, _, x| x as f32).unwrap()
    }

    #[test]
    fn construction_errors() {
        assert!(matches!(
            FeatureMap::new(1, 2, 2, vec![0.0; 3], 1.0),
            Err(TensorError::LengthMismatch { .. })
        ));
        assert!(FeatureMap::new(1, 1, 1, vec![f32::NAN], 1.0).is_err());
        assert!(FeatureMap::new(1, 1, 1, vec![0.0], 0.0).is_err());
        assert!(FeatureMap::new(0, 1, 1, vec![], 1.0).is_err());
        assert!(matches!(Image::new(2, 1, 1, vec![0.0; 2]), Err(TensorError::ImageChannels(2))));
        assert!(matches!(Image::new(1, 1, 1, vec![1.5]), Err(TensorError::ImageRange { .. })));
    }

    #[test]
    fn sample_at_centers_and_constant() {
        let mut rng = Prng::new(1);
        let m = random_map(&mut rng, 3, 5, 6);
        for y in 0..5 {
            for x in 0..6 {
                let v = m.bilinear_sample(x as f64, y as f64);
                for (c, &got) in v.iter().enumerate() {
                    assert_eq!(got, m.get(c, y, x));
                }
            }
        }
        let k = FeatureMap::from_fn(2, 4, 4, 1.0, |_, _, _| 0.375).unwrap();
        for &(x, y) in &[(0.3, 2.9), (-5.0, 1.0), (10.0, 10.0), (1.5, 1.5)] {
            assert_eq!(k.bilinear_sample(x, y), vec![0.375, 0.375]);
        }
    }

    #[test]
    fn sample_ramp_and_border_clamp() {
        let m = ramp(3, 4);
        assert_eq!(m.bilinear_sample(1.5, 1.0), vec![1.5]);
        assert_eq!(m.bilinear_sample(-2.0, 0.0), vec![0.0]);
        assert_eq!(m.bilinear_sample(7.0, 0.0), vec![3.0]);
    }

    /// Half-pixel bilinear evaluated pixel by pixel from first principles.
    fn resize_oracle_1d(src: &[f32], out_w: usize) -> Vec<f64> {
        let w = src.len();
        (0..out_w)
            .map(|j| {
                let s = ((j as f64 + 0.5) * w as f64 / out_w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(w - 1);
                let t = s - i0 as f64;
                (1.0 - t) * src[i0] as f64 + t * src[i1] as f64
            })
            .collect()
    }

    #[test]
    fn resize_examples() {
        let mut rng = Prng::new(2);
        let m = random_map(&mut rng, 3, 7, 5);
        let same = m.resize_bilinear(7, 5).unwrap();
        for (a, b) in same.data().iter().zip(m.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
        let k = FeatureMap::from_fn(1, 3, 3, 1.0, |_, _, _| 0.25).unwrap();
        assert!(k.resize_bilinear(11, 2).unwrap().data().iter().all(|&v| v == 0.25));

        let r = ramp(1, 6);
        let up = r.resize_bilinear(1, 12).unwrap();
        let oracle = resize_oracle_1d(r.data(), 12);
        for (a, b) in up.data().iter().zip(&oracle) {
            assert_eq!(*a, *b as f32);
        }
        // Hand-evaluated: output 0 clamps to the border, then steps of 0.5.
        assert_eq!(&up.data()[..4], &[0.0, 0.25, 0.75, 1.25]);
        assert_eq!(r.resize_bilinear(0, 3), Err(TensorError::EmptyResize(0, 3)));
    }

    #[test]
    fn crop_examples() {
        let mut rng = Prng::new(4);
        let img = Image::from_map(random_map(&mut rng, 3, 6, 8)).unwrap();
        let full = img.crop(&img.extent().full_box()).unwrap();
        assert_eq!(full, img);
        let tl = img.crop(&BBox::new(0.0, 0.0, 1.0, 1.0).unwrap()).unwrap();
        assert_eq!(tl.as_map().shape(), [3, 1, 1]);
        for c in 0..3 {
            assert_eq!(tl.as_map().get(c, 0, 0), img.as_map().get(c, 0, 0));
        }
        let k = Image::new(1, 9, 9, vec![0.5; 81]).unwrap();
        let cr = k.crop(&BBox::new(2.0, 3.0, 7.0, 5.0).unwrap()).unwrap().resize_bilinear(13, 4).unwrap();
        assert!(cr.as_map().data().iter().all(|&v| v == 0.5));
        assert_eq!(
            img.crop(&BBox::new(1.6, 1.0, 1.9, 3.0).unwrap()),
            Err(TensorError::DegenerateCrop)
        );
    }

    proptest! {
        #[test]
        fn sample_no_overshoot(seed in 0u64..1000, x in -2.0..9.0f64, y in -2.0..9.0f64) {
            let mut rng = Prng::new(seed);
            let m = random_map(&mut rng, 1, 7, 7);
            let xc = x.clamp(0.0, 6.0);
            let yc = y.clamp(0.0, 6.0);
            let (x0, y0) = (xc.floor() as usize, yc.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(6), (y0 + 1).min(6));
            let n = [m.get(0, y0, x0), m.get(0, y0, x1), m.get(0, y1, x0), m.get(0, y1, x1)];
            let lo = n.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = n.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let v = m.bilinear_sample(x, y)[0];
            prop_assert!(v >= lo && v <= hi);
        }

        #[test]
        fn resize_commutes_with_channel_permutation_and_offset(
            seed in 0u64..1000, oh in 1usize..12, ow in 1usize..12, k in -1.0f32..1.0,
        ) {
            let mut rng = Prng::new(seed);
            let m = random_map(&mut rng, 3, 5, 6);
            let r = m.resize_bilinear(oh, ow).unwrap();
            let perm = FeatureMap::from_fn(3, 5, 6, 1.0, |c, y, x| m.get((c + 1) % 3, y, x)).unwrap();
            let rp = perm.resize_bilinear(oh, ow).unwrap();
            let shifted = FeatureMap::from_fn(3, 5, 6, 1.0, |c, y, x| m.get(c, y, x) + k).unwrap();
            let rs = shifted.resize_bilinear(oh, ow).unwrap();
            for c in 0..3 {
                for y in 0..oh {
                    for x in 0..ow {
                        prop_assert_eq!(rp.get(c, y, x), r.get((c + 1) % 3, y, x));
                        prop_assert!((rs.get(c, y, x) - (r.get(c, y, x) + k)).abs() < 1e-5);
                    }
                }
            }
        }

        #[test]
        fn nested_crop_composes(
            seed in 0u64..500,
            ax in 0.0..6.0f64, ay in 0.0..6.0f64, aw in 3.0..10.0f64, ah in 3.0..10.0f64,
            bx in -1.0..4.0f64, by in -1.0..4.0f64, bw in 0.5..6.0f64, bh in 0.5..6.0f64,
        ) {
            let mut rng = Prng::new(seed);
            let img = random_map(&mut rng, 2, 16, 16);
            let outer = BBox::new(ax, ay, ax + aw, ay + ah).unwrap();
            let Ok(first) = img.crop(&outer) else { return Ok(()) };
            let inner = BBox::new(bx, by, bx + bw, by + bh).unwrap();
            let c0 = (ax - 0.5).ceil().max(0.0);
            let r0 = (ay - 0.5).ceil().max(0.0);
            let shifted = inner.translate(c0, r0);
            let composed = BBox {
                x1: shifted.x1.max(outer.x1),
                y1: shifted.y1.max(outer.y1),
                x2: shifted.x2.min(outer.x2),
                y2: shifted.y2.min(outer.y2),
            };
            let twice = first.crop(&inner);
            if composed.x2 < composed.x1 || composed.y2 < composed.y1 {
                prop_assert!(twice.is_err());
            } else {
                prop_assert_eq!(twice, img.crop(&composed));
            }
        }
    }
}
