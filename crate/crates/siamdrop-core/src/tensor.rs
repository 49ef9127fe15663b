//! Rank-3 feature maps and the shape errors shared by the array operations.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

/// A dense rank-3 array of `f32` in row-major `(channel, y, x)` order.
///
/// This is the one tensor type of the engine: image patches (3 channels),
/// latent codes, and correlation response maps (1 channel) are all
/// `FeatureMap`s.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    /// Wraps an existing buffer; `data.len()` must equal `c*h*w`.
    pub fn from_vec(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
    ) -> Result<Self, TensorError> {
        if data.len() != channels * height * width {
            return Err(TensorError::LengthMismatch {
                expected: channels * height * width,
                got: data.len(),
            });
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        FeatureMap {
            channels,
            height,
            width,
            data,
        }
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

    /// `(channels, height, width)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    /// Row-major view of one channel plane.
    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let plane = self.height * self.width;
        &mut self.data[c * plane..(c + 1) * plane]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Largest value with its `(c, y, x)` position; first occurrence wins.
    pub fn argmax(&self) -> (f32, (usize, usize, usize)) {
        let mut best = f32::NEG_INFINITY;
        let mut pos = (0, 0, 0);
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    let v = self.at(c, y, x);
                    if v > best {
                        best = v;
                        pos = (c, y, x);
                    }
                }
            }
        }
        (best, pos)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        FeatureMap {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Elementwise `max(0, x)`.
pub fn relu(input: &FeatureMap) -> FeatureMap {
    input.map(|v| v.max(0.0))
}

/// Shape violations reported by the array operations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TensorError {
    LengthMismatch {
        expected: usize,
        got: usize,
    },
    ChannelMismatch {
        expected: usize,
        got: usize,
    },
    /// Kernel spatial extent exceeds the input's at application time.
    KernelLargerThanInput {
        kernel: (usize, usize),
        input: (usize, usize),
    },
    /// in/out channel counts not divisible by the group count.
    GroupMismatch {
        in_channels: usize,
        out_channels: usize,
        groups: usize,
    },
    TargetLargerThanSearch {
        target: (usize, usize),
        search: (usize, usize),
    },
    EmptyBatch,
    /// A batch element's shape differs from the first element's.
    BatchShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::LengthMismatch { expected, got } => {
                write!(f, "buffer length {got} does not match shape product {expected}")
            }
            TensorError::ChannelMismatch { expected, got } => {
                write!(f, "channel count mismatch: expected {expected}, got {got}")
            }
            TensorError::KernelLargerThanInput { kernel, input } => write!(
                f,
                "kernel {}x{} larger than input {}x{}",
                kernel.0, kernel.1, input.0, input.1
            ),
            TensorError::GroupMismatch {
                in_channels,
                out_channels,
                groups,
            } => write!(
                f,
                "channels (in {in_channels}, out {out_channels}) not divisible by groups {groups}"
            ),
            TensorError::TargetLargerThanSearch { target, search } => write!(
                f,
                "target {}x{} larger than search {}x{}",
                target.0, target.1, search.0, search.1
            ),
            TensorError::EmptyBatch => write!(f, "empty batch"),
            TensorError::BatchShapeMismatch { expected, got } => write!(
                f,
                "batch element shape {:?} differs from first element {:?}",
                got, expected
            ),
        }
    }
}

impl core::error::Error for TensorError {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(FeatureMap::from_vec(2, 2, 2, vec![0.0; 8]).is_ok());
        let err = FeatureMap::from_vec(2, 2, 2, vec![0.0; 7]).unwrap_err();
        assert_eq!(err, TensorError::LengthMismatch { expected: 8, got: 7 });
    }

    #[test]
    fn indexing_is_row_major_by_channel() {
        let m = FeatureMap::from_fn(2, 3, 4, |c, y, x| (c * 100 + y * 10 + x) as f32);
        assert_eq!(m.at(0, 0, 0), 0.0);
        assert_eq!(m.at(1, 2, 3), 123.0);
        assert_eq!(m.channel(1)[2 * 4 + 3], 123.0);
    }

    #[test]
    fn argmax_first_occurrence() {
        let mut m = FeatureMap::zeros(1, 2, 2);
        *m.at_mut(0, 0, 1) = 5.0;
        *m.at_mut(0, 1, 1) = 5.0;
        assert_eq!(m.argmax(), (5.0, (0, 0, 1)));
    }

    #[test]
    fn relu_clamps_negatives() {
        let m = FeatureMap::from_vec(1, 1, 3, vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&m).data(), &[0.0, 0.0, 2.0]);
    }
}
