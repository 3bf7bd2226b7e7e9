//! Binary segmentation masks.

use crate::tensor::Tensor;

/// Two-valued H x W mask; 1 marks the primary object.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), h * w, "mask data length mismatch");
        debug_assert!(data.iter().all(|&v| v <= 1));
        Self { h, w, data }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        debug_assert!(v <= 1);
        self.data[y * self.w + x] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Float view in {0.0, 1.0}, shape `[h, w]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.h, self.w],
            self.data.iter().map(|&v| v as f32).collect(),
        )
        .expect("mask dims agree")
    }

    /// Thresholds a probability/indicator tensor at 0.5.
    pub fn from_tensor(t: &Tensor) -> Self {
        let [h, w] = *t.shape() else {
            panic!("expected rank-2 tensor, got {:?}", t.shape());
        };
        Self {
            h,
            w,
            data: t.data().iter().map(|&v| u8::from(v >= 0.5)).collect(),
        }
    }
}
