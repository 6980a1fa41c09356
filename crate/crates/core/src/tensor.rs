//! Dense `(N, C, H, W)` arrays of `f64`, row-major with `W` fastest.
//!
//! Flat feature vectors are stored as `(N, F, 1, 1)`; scalars as `(1, 1, 1, 1)`.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    /// Rank after dropping trailing unit extents (at least 1).
    pub fn rank(&self) -> usize {
        let d = self.dims();
        let mut r = 4;
        while r > 1 && d[r - 1] == 1 {
            r -= 1;
        }
        r
    }

    pub fn from_dims(dims: &[usize]) -> Result<Shape> {
        if dims.len() > 4 {
            return Err(invalid("shape", format!("rank {} exceeds 4", dims.len())));
        }
        let mut d = [1usize; 4];
        d[..dims.len()].copy_from_slice(dims);
        Ok(Shape::new(d[0], d[1], d[2], d[3]))
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Tensor> {
        if data.len() != shape.numel() {
            return Err(invalid(
                "tensor",
                format!("{} values for shape {shape}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: Shape) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: Shape, value: f64) -> Tensor {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::full(Shape::scalar(), value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Tensor {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Tensor {
        let data = (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect();
        Tensor { shape, data }
    }

    pub fn normal<R: Rng + ?Sized>(shape: Shape, std: f64, rng: &mut R) -> Tensor {
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..shape.numel()).map(|_| dist.sample(rng)).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.shape.index(n, c, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        let i = self.shape.index(n, c, y, x);
        &mut self.data[i]
    }

    /// The `H×W` plane for batch item `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Tensor> {
        if shape.numel() != self.shape.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bilinear resize (align-corners-false, clamped) outside any tape.
    pub fn upsample_bilinear(&self, oh: usize, ow: usize) -> Result<Tensor> {
        if oh == 0 || ow == 0 || oh < self.shape.h || ow < self.shape.w {
            return Err(invalid(
                "upsample_bilinear",
                format!("target {oh}x{ow} must be non-zero and not smaller than {}x{}", self.shape.h, self.shape.w),
            ));
        }
        Ok(crate::kernels::upsample_forward(self, oh, ow))
    }

    /// Single batch item as a `(1, C, H, W)` tensor.
    pub fn item(&self, n: usize) -> Tensor {
        let per = self.shape.c * self.shape.plane();
        Tensor {
            shape: Shape::new(1, self.shape.c, self.shape.h, self.shape.w),
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Stacks `(1, C, H, W)` tensors (or any equal `C, H, W`) along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| invalid("stack", "no tensors to stack"))?
            .shape;
        let mut data = Vec::with_capacity(items.len() * first.numel());
        let mut n = 0;
        for t in items {
            let s = t.shape;
            if (s.c, s.h, s.w) != (first.c, first.h, first.w) {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    left: first,
                    right: s,
                });
            }
            n += s.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape::new(n, first.c, first.h, first.w),
            data,
        })
    }
}
