//! Minimal planar RGB image buffer shared by the scene generator, the
//! segmentation pipeline, and disk io. Channel-major (3 planes of h*w),
//! values in [0, 1].

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    /// 3 * height * width, planes R then G then B.
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize) -> Self {
        RgbImage {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut img = RgbImage::new(height, width);
        for c in 0..3 {
            img.data[c * height * width..(c + 1) * height * width].fill(rgb[c]);
        }
        img
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        let hw = self.height * self.width;
        let i = y * self.width + x;
        [self.data[i], self.data[hw + i], self.data[2 * hw + i]]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let hw = self.height * self.width;
        let i = y * self.width + x;
        self.data[i] = rgb[0];
        self.data[hw + i] = rgb[1];
        self.data[2 * hw + i] = rgb[2];
    }

    /// Mirror left-right.
    pub fn flip_horizontal(&self) -> RgbImage {
        let mut out = self.clone();
        for c in 0..3 {
            for y in 0..self.height {
                let base = c * self.height * self.width + y * self.width;
                out.data[base..base + self.width].reverse();
            }
        }
        out
    }
}
