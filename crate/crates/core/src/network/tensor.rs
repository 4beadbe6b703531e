//! Dense CHW tensor. All network math is f64; see the workspace notes on
//! precision in the crate docs.

use crate::imgbuf::RgbImage;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data does not match shape");
        Tensor { c, h, w, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Channel plane as a slice.
    pub fn plane(&self, c: usize) -> &[f64] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let hw = self.h * self.w;
        &mut self.data[c * hw..(c + 1) * hw]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Zero-pad on the bottom/right to the given spatial size.
    pub fn pad_to(&self, h: usize, w: usize) -> Tensor {
        assert!(h >= self.h && w >= self.w);
        if h == self.h && w == self.w {
            return self.clone();
        }
        let mut out = Tensor::zeros(self.c, h, w);
        for c in 0..self.c {
            for y in 0..self.h {
                let src = &self.data[(c * self.h + y) * self.w..][..self.w];
                out.data[(c * h + y) * w..][..self.w].copy_from_slice(src);
            }
        }
        out
    }

    pub fn from_image(img: &RgbImage) -> Tensor {
        Tensor {
            c: 3,
            h: img.height,
            w: img.width,
            data: img.data.clone(),
        }
    }
}
