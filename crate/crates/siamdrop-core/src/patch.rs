//! 8-bit RGB frames and the crop-and-resample step that turns a frame region
//! into a normalized network input patch.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::FeatureMap;

/// Interleaved RGB, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize) -> Self {
        Frame {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i] = rgb[0];
        self.data[i + 1] = rgb[1];
        self.data[i + 2] = rgb[2];
    }

    /// Per-channel mean in [0,1]; the fill value for out-of-frame crop taps.
    pub fn channel_means(&self) -> [f32; 3] {
        let mut sums = [0.0f64; 3];
        for px in self.data.chunks_exact(3) {
            sums[0] += px[0] as f64;
            sums[1] += px[1] as f64;
            sums[2] += px[2] as f64;
        }
        let n = (self.width * self.height) as f64 * 255.0;
        [
            (sums[0] / n) as f32,
            (sums[1] / n) as f32,
            (sums[2] / n) as f32,
        ]
    }
}

/// Crops a square window of `side` frame pixels centered at `center`
/// (fractional pixel coordinates) and resamples it to `out_size` with
/// bilinear interpolation. Taps outside the frame read the frame's channel
/// mean. Output values are in [0,1].
///
/// Pixel centers align: output pixel i samples source coordinate
/// left + (i + 0.5) * side/out - 0.5, so side == out_size with an aligned
/// center reproduces source pixels exactly.
pub fn crop_resize(frame: &Frame, center: (f32, f32), side: f32, out_size: usize) -> FeatureMap {
    let means = frame.channel_means();
    let scale = side / out_size as f32;
    let left = center.0 - side / 2.0;
    let top = center.1 - side / 2.0;
    let tap = |c: usize, xi: i64, yi: i64| -> f32 {
        if xi < 0 || yi < 0 || xi >= frame.width as i64 || yi >= frame.height as i64 {
            means[c]
        } else {
            frame.pixel(xi as usize, yi as usize)[c] as f32 / 255.0
        }
    };
    FeatureMap::from_fn(3, out_size, out_size, |c, oy, ox| {
        let sx = left + (ox as f32 + 0.5) * scale - 0.5;
        let sy = top + (oy as f32 + 0.5) * scale - 0.5;
        let x0 = libm::floorf(sx) as i64;
        let y0 = libm::floorf(sy) as i64;
        let fx = sx - x0 as f32;
        let fy = sy - y0 as f32;
        let v00 = tap(c, x0, y0);
        let v01 = tap(c, x0 + 1, y0);
        let v10 = tap(c, x0, y0 + 1);
        let v11 = tap(c, x0 + 1, y0 + 1);
        let top_row = v00 + (v01 - v00) * fx;
        let bot_row = v10 + (v11 - v10) * fx;
        top_row + (bot_row - top_row) * fy
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_frame(w: usize, h: usize) -> Frame {
        let mut f = Frame::new(w, h);
        for y in 0..h {
            for x in 0..w {
                f.set_pixel(x, y, [(x * 7 % 256) as u8, (y * 11 % 256) as u8, 128]);
            }
        }
        f
    }

    #[test]
    fn aligned_unit_crop_reproduces_pixels() {
        let f = gradient_frame(16, 16);
        let patch = crop_resize(&f, (8.0, 8.0), 16.0, 16);
        for y in 0..16 {
            for x in 0..16 {
                let px = f.pixel(x, y);
                for c in 0..3 {
                    let want = px[c] as f32 / 255.0;
                    assert!(
                        (patch.at(c, y, x) - want).abs() < 1e-6,
                        "pixel ({x},{y}) channel {c}"
                    );
                }
            }
        }
    }

    #[test]
    fn constant_image_survives_any_rescale() {
        let mut f = Frame::new(20, 20);
        for y in 0..20 {
            for x in 0..20 {
                f.set_pixel(x, y, [60, 120, 180]);
            }
        }
        for (side, out) in [(10.0, 7), (20.0, 13), (5.5, 8)] {
            let patch = crop_resize(&f, (10.0, 10.0), side, out);
            for c in 0..3 {
                let want = [60.0, 120.0, 180.0][c] / 255.0;
                assert!(patch
                    .channel(c)
                    .iter()
                    .all(|v| (v - want).abs() < 1e-6));
            }
        }
    }

    #[test]
    fn fully_outside_crop_is_mean_fill() {
        let f = gradient_frame(12, 12);
        let means = f.channel_means();
        let patch = crop_resize(&f, (-100.0, -100.0), 8.0, 4);
        for c in 0..3 {
            assert!(patch.channel(c).iter().all(|&v| v == means[c]));
        }
    }

    #[test]
    fn halfway_sample_interpolates() {
        let mut f = Frame::new(2, 1);
        f.set_pixel(0, 0, [0, 0, 0]);
        f.set_pixel(1, 0, [255, 255, 255]);
        // one output pixel centered between the two source pixels
        let patch = crop_resize(&f, (1.0, 0.5), 1.0, 1);
        assert!((patch.at(0, 0, 0) - 0.5).abs() < 1e-6);
    }
}
