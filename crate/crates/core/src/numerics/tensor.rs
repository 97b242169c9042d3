use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major array of scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                msg: format!("shape {shape:?} holds {n} values, data has {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::InvalidShape {
                op: "reshape",
                msg: format!("cannot view {:?} as {shape:?}", self.shape),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::lit(v.to_f64_lossy()))
                .collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::lit(self.data.len() as f64)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().fold(true, |ok, v| ok & v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max)
    }

    /// Interprets the tensor as `[N, C, H, W]`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::InvalidShape {
                op: "dims4",
                msg: format!("expected a 4-d tensor, got {:?}", self.shape),
            }),
        }
    }

    /// Interprets the tensor as `[H, W]`.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [h, w] => Ok((h, w)),
            _ => Err(Error::InvalidShape {
                op: "dims2",
                msg: format!("expected a 2-d tensor, got {:?}", self.shape),
            }),
        }
    }

    /// Element `[n, c, y, x]` of a 4-d tensor.
    pub fn at4(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        let (_, cc, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.data[((n * cc + c) * h + y) * w + x]
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Empty("stack of zero tensors".into()))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape("stack", &first.shape, &t.shape));
            }
            data.extend_from_slice(&t.data);
        }
        Ok(Self { shape, data })
    }

    /// Concatenates tensors along axis 0.
    pub fn concat0(items: &[&Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Empty("concat of zero tensors".into()))?;
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for t in items {
            if &t.shape[1..] != tail {
                return Err(Error::shape("concat0", &first.shape, &t.shape));
            }
            lead += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        Ok(Self { shape, data })
    }

    /// Slice `[start, start + count)` along axis 0.
    pub fn narrow0(&self, start: usize, count: usize) -> Result<Self> {
        let lead = *self.shape.first().unwrap_or(&0);
        if start + count > lead {
            return Err(Error::InvalidShape {
                op: "narrow0",
                msg: format!("rows {start}..{} exceed {lead}", start + count),
            });
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = count;
        Ok(Self {
            shape,
            data: self.data[start * inner..(start + count) * inner].to_vec(),
        })
    }

    /// Reverses the last axis.
    pub fn flip_w(&self) -> Self {
        let w = *self.shape.last().unwrap_or(&1);
        let mut out = self.data.clone();
        for row in out.chunks_mut(w.max(1)) {
            row.reverse();
        }
        Self {
            shape: self.shape.clone(),
            data: out,
        }
    }

    /// Reverses the second-to-last axis.
    pub fn flip_h(&self) -> Self {
        let nd = self.shape.len();
        let (h, w) = (self.shape[nd - 2], self.shape[nd - 1]);
        let plane = h * w;
        let mut out = Vec::with_capacity(self.data.len());
        for p in self.data.chunks(plane.max(1)) {
            for y in (0..h).rev() {
                out.extend_from_slice(&p[y * w..(y + 1) * w]);
            }
        }
        Self {
            shape: self.shape.clone(),
            data: out,
        }
    }

    /// Rotates the trailing two axes by `k` quarter turns counter-clockwise.
    pub fn rot90(&self, k: u8) -> Self {
        let mut t = self.clone();
        for _ in 0..(k % 4) {
            t = t.rot90_once();
        }
        t
    }

    fn rot90_once(&self) -> Self {
        let nd = self.shape.len();
        let (h, w) = (self.shape[nd - 2], self.shape[nd - 1]);
        let plane = h * w;
        let mut shape = self.shape.clone();
        shape[nd - 2] = w;
        shape[nd - 1] = h;
        let mut out = vec![T::zero(); self.data.len()];
        for (pi, p) in self.data.chunks(plane.max(1)).enumerate() {
            let o = &mut out[pi * plane..(pi + 1) * plane];
            // counter-clockwise: out[w-1-x][y] = in[y][x]
            for y in 0..h {
                for x in 0..w {
                    o[(w - 1 - x) * h + y] = p[y * w + x];
                }
            }
        }
        Self { shape, data: out }
    }
}
