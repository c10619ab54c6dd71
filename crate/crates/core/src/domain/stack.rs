use std::fmt;
use std::marker::PhantomData;

use super::annotation::BBox;
use super::fdi::{FdiCode, FlipAxis, NUM_TEETH};
use crate::error::{Error, Result};

/// Marker for ground-truth or predicted tooth masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToothMask;

/// Marker for rasterized bounding-box priors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoxPrior;

/// An `H x W x 32` binary tensor with one channel per FDI tooth, stored
/// channel-major (`data[c * H * W + y * W + x]`), each entry 0 or 1.
pub struct ChannelStack<K> {
    height: usize,
    width: usize,
    data: Vec<u8>,
    _kind: PhantomData<K>,
}

pub type MaskStack = ChannelStack<ToothMask>;
pub type BBoxMap = ChannelStack<BoxPrior>;

impl<K> Clone for ChannelStack<K> {
    fn clone(&self) -> Self {
        ChannelStack {
            height: self.height,
            width: self.width,
            data: self.data.clone(),
            _kind: PhantomData,
        }
    }
}

impl<K> PartialEq for ChannelStack<K> {
    fn eq(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width && self.data == other.data
    }
}

impl<K> Eq for ChannelStack<K> {}

impl<K> fmt::Debug for ChannelStack<K> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let counts: Vec<usize> = (0..NUM_TEETH).map(|c| self.count(c)).collect();
        f.debug_struct("ChannelStack")
            .field("height", &self.height)
            .field("width", &self.width)
            .field("counts", &counts)
            .finish()
    }
}

impl<K> ChannelStack<K> {
    pub fn new(height: usize, width: usize) -> Self {
        ChannelStack {
            height,
            width,
            data: vec![0; NUM_TEETH * height * width],
            _kind: PhantomData,
        }
    }

    pub fn from_raw(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != NUM_TEETH * height * width {
            return Err(Error::shape("channel stack", NUM_TEETH * height * width, data.len()));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Dataset("channel stack values must be 0 or 1".into()));
        }
        Ok(ChannelStack {
            height,
            width,
            data,
            _kind: PhantomData,
        })
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

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[u8] {
        let n = self.plane();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [u8] {
        let n = self.plane();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn tooth(&self, fdi: FdiCode) -> &[u8] {
        self.channel(fdi.channel())
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> bool {
        self.data[c * self.plane() + y * self.width + x] != 0
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, on: bool) {
        let i = c * self.plane() + y * self.width + x;
        self.data[i] = on as u8;
    }

    pub fn count(&self, c: usize) -> usize {
        self.channel(c).iter().map(|&v| v as usize).sum()
    }

    pub fn total_count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_channel_empty(&self, c: usize) -> bool {
        self.channel(c).iter().all(|&v| v == 0)
    }

    pub fn nonempty_channels(&self) -> Vec<usize> {
        (0..NUM_TEETH).filter(|&c| !self.is_channel_empty(c)).collect()
    }

    /// ORs a single-channel binary mask into channel `c`.
    pub fn union_channel(&mut self, c: usize, mask: &[u8]) -> Result<()> {
        if mask.len() != self.plane() {
            return Err(Error::shape("union_channel", self.plane(), mask.len()));
        }
        for (dst, &src) in self.channel_mut(c).iter_mut().zip(mask) {
            *dst |= (src != 0) as u8;
        }
        Ok(())
    }

    /// Tight pixel rectangle of channel `c`: `x` is the first column,
    /// `w` the number of covered columns.
    pub fn channel_bbox(&self, c: usize) -> Option<BBox> {
        let ch = self.channel(c);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if ch[y * self.width + x] != 0 {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        (x0 != usize::MAX).then(|| BBox::new(x0 as f64, y0 as f64, (x1 - x0 + 1) as f64, (y1 - y0 + 1) as f64))
    }

    /// Spatial mirror plus the FDI channel permutation, so channel `c` keeps
    /// holding the anatomy labelled `c` in the flipped frame.
    pub fn flipped(&self, axis: FlipAxis) -> Self {
        let (h, w) = (self.height, self.width);
        let mut out = Self::new(h, w);
        for fdi in FdiCode::all() {
            let src = self.channel(fdi.channel());
            let dst = out.channel_mut(fdi.flip(axis).channel());
            flip_plane(src, dst, h, w, axis);
        }
        out
    }

    /// 2x2 max pooling (floor on odd sizes). Stays binary.
    pub fn max_pool2(&self) -> Self {
        let (h, w) = (self.height / 2, self.width / 2);
        let mut out = Self::new(h, w);
        for c in 0..NUM_TEETH {
            let src = self.channel(c);
            let dst = out.channel_mut(c);
            for y in 0..h {
                let r0 = &src[(2 * y) * self.width..];
                let r1 = &src[(2 * y + 1) * self.width..];
                for x in 0..w {
                    dst[y * w + x] = r0[2 * x] | r0[2 * x + 1] | r1[2 * x] | r1[2 * x + 1];
                }
            }
        }
        out
    }

    /// Writes the stack as `f32` 0/1 values into a `32 * H * W` slice.
    pub fn write_f32(&self, dst: &mut [f32]) {
        for (d, &s) in dst.iter_mut().zip(&self.data) {
            *d = s as f32;
        }
    }
}

pub(crate) fn flip_plane<T: Copy>(src: &[T], dst: &mut [T], h: usize, w: usize, axis: FlipAxis) {
    match axis {
        FlipAxis::Horizontal => {
            for y in 0..h {
                let s = &src[y * w..(y + 1) * w];
                let d = &mut dst[y * w..(y + 1) * w];
                for x in 0..w {
                    d[x] = s[w - 1 - x];
                }
            }
        }
        FlipAxis::Vertical => {
            for y in 0..h {
                dst[y * w..(y + 1) * w].copy_from_slice(&src[(h - 1 - y) * w..(h - y) * w]);
            }
        }
    }
}
