//! Integer class maps and their conversions to and from dense tensors.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// `H x W` map of class indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidShape {
                op: "label_map",
                msg: format!("{height}x{width} map with {} labels", data.len()),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self {
            height,
            width,
            data: vec![label; height * width],
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

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn max_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        match self.data.iter().find(|&&l| l as usize >= classes) {
            Some(&l) => Err(Error::LabelOutOfRange {
                label: l as usize,
                classes,
            }),
            None => Ok(()),
        }
    }

    fn as_tensor(&self) -> Tensor<f64> {
        Tensor::new(
            vec![self.height, self.width],
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("consistent shape")
    }

    fn from_tensor(t: &Tensor<f64>) -> Self {
        let (h, w) = t.dims2().expect("2-d");
        Self {
            height: h,
            width: w,
            data: t.data().iter().map(|&v| v as u8).collect(),
        }
    }

    pub fn rot90(&self, k: u8) -> Self {
        Self::from_tensor(&self.as_tensor().rot90(k))
    }

    pub fn flip_w(&self) -> Self {
        Self::from_tensor(&self.as_tensor().flip_w())
    }

    pub fn flip_h(&self) -> Self {
        Self::from_tensor(&self.as_tensor().flip_h())
    }

    /// Pixel count per class.
    pub fn histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for &l in &self.data {
            if (l as usize) < classes {
                h[l as usize] += 1;
            }
        }
        h
    }
}

/// Stacks maps into a `[N, C, H, W]` one-hot tensor.
pub fn one_hot<T: Scalar>(maps: &[LabelMap], classes: usize) -> Result<Tensor<T>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Empty("one_hot of zero maps".into()))?;
    let (h, w) = (first.height, first.width);
    let plane = h * w;
    let mut out = Tensor::zeros(vec![maps.len(), classes, h, w]);
    let data = out.data_mut();
    for (n, m) in maps.iter().enumerate() {
        if (m.height, m.width) != (h, w) {
            return Err(Error::shape("one_hot", &[h, w], &[m.height, m.width]));
        }
        m.validate(classes)?;
        for (k, &l) in m.data.iter().enumerate() {
            data[(n * classes + l as usize) * plane + k] = T::one();
        }
    }
    Ok(out)
}

/// Per-pixel arg max over axis 1 of `[N, C, H, W]`; ties go to the lowest index.
pub fn argmax_channels<T: Scalar>(scores: &Tensor<T>) -> Result<Vec<LabelMap>> {
    let (n, c, h, w) = scores.dims4()?;
    if c > u8::MAX as usize + 1 {
        return Err(Error::InvalidArgument(format!("{c} classes exceed the 8-bit label range")));
    }
    let plane = h * w;
    let d = scores.data();
    Ok((0..n)
        .map(|i| {
            let data = (0..plane)
                .map(|k| {
                    let mut best = 0;
                    for ch in 1..c {
                        if d[(i * c + ch) * plane + k] > d[(i * c + best) * plane + k] {
                            best = ch;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMap {
                height: h,
                width: w,
                data,
            }
        })
        .collect())
}
