use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-pixel integer labels: 0 is background, `c ≥ 1` is lane `c`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl IntMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "IntMask::new",
                format!("{height}x{width} mask needs {} labels, got {}", height * width, data.len()),
            ));
        }
        Ok(IntMask {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        IntMask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, label: u8) {
        self.data[row * self.width + col] = label;
    }

    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&v| v == label).count()
    }

    pub fn max_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// `[H,W]` tensor that is 1 where the label equals `label`.
    pub fn indicator<T: Scalar>(&self, label: u8) -> Tensor<T> {
        Tensor::new(
            &[self.height, self.width],
            self.data
                .iter()
                .map(|&v| if v == label { T::one() } else { T::zero() })
                .collect(),
        )
        .expect("mask dims are non-zero")
    }

    /// Per-pixel argmax over the channels of `[C,H,W]`, lowest channel on ties.
    pub fn argmax_of<T: Scalar>(probs: &Tensor<T>) -> Result<Self> {
        Self::argmax_over(probs, &(0..probs.dims()[0]).collect::<Vec<_>>())
    }

    /// Per-pixel argmax restricted to `channels` (ascending order expected).
    pub fn argmax_over<T: Scalar>(probs: &Tensor<T>, channels: &[usize]) -> Result<Self> {
        probs.expect_rank("IntMask::argmax_over", "probabilities", 3)?;
        let (h, w) = (probs.dims()[1], probs.dims()[2]);
        let Some((&first, rest)) = channels.split_first() else {
            return Err(Error::shape("IntMask::argmax_over", "no channels given"));
        };
        let mut best = probs.outer(first).to_vec();
        let mut labels = vec![first as u8; h * w];
        for &c in rest {
            for (i, &v) in probs.outer(c).iter().enumerate() {
                if v > best[i] {
                    best[i] = v;
                    labels[i] = c as u8;
                }
            }
        }
        IntMask::new(h, w, labels)
    }
}
