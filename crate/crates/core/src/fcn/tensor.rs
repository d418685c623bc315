use super::real::Real;

/// Batch activation tensor stored channel-major: `data[((c * B + b) * H + y) * W + x]`.
///
/// Keeping the batch inside the channel makes every per-channel reduction
/// (batch normalization, bias gradients) a contiguous slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<R> {
    pub channels: usize,
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    pub fn zeros(channels: usize, batch: usize, h: usize, w: usize) -> Self {
        Self {
            channels,
            batch,
            h,
            w,
            data: vec![R::zero(); channels * batch * h * w],
        }
    }

    #[inline]
    pub fn spatial(&self) -> usize {
        self.h * self.w
    }

    /// Elements per channel across the whole batch.
    #[inline]
    pub fn per_channel(&self) -> usize {
        self.batch * self.h * self.w
    }

    pub fn channel(&self, c: usize) -> &[R] {
        let n = self.per_channel();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [R] {
        let n = self.per_channel();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// The spatial map of channel `c` for sample `b`.
    pub fn map(&self, c: usize, b: usize) -> &[R] {
        let p = self.spatial();
        let start = (c * self.batch + b) * p;
        &self.data[start..start + p]
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.channels, self.batch, self.h, self.w]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }
}
