use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Rank-4 convolution kernel laid out as `[c_out][c_in][h][w]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TensorRepr")]
pub struct Tensor4 {
    pub c_out: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    #[serde(with = "super::blob")]
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct TensorRepr {
    c_out: usize,
    c_in: usize,
    h: usize,
    w: usize,
    #[serde(with = "super::blob")]
    data: Vec<f64>,
}

impl TryFrom<TensorRepr> for Tensor4 {
    type Error = Error;
    fn try_from(r: TensorRepr) -> Result<Self> {
        Tensor4::new(r.c_out, r.c_in, r.h, r.w, r.data)
    }
}

impl Tensor4 {
    pub fn new(c_out: usize, c_in: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != c_out * c_in * h * w {
            return Err(Error::dims(format!(
                "tensor {c_out}x{c_in}x{h}x{w} needs {} values, got {}",
                c_out * c_in * h * w,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor data".into()));
        }
        Ok(Self { c_out, c_in, h, w, data })
    }

    pub fn zeros(c_out: usize, c_in: usize, h: usize, w: usize) -> Self {
        Self { c_out, c_in, h, w, data: vec![0.0; c_out * c_in * h * w] }
    }

    pub fn from_fn(
        c_out: usize,
        c_in: usize,
        h: usize,
        w: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(c_out * c_in * h * w);
        for o in 0..c_out {
            for i in 0..c_in {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(o, i, y, x));
                    }
                }
            }
        }
        Self { c_out, c_in, h, w, data }
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.c_out, self.c_in, self.h, self.w)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn index(&self, o: usize, i: usize, y: usize, x: usize) -> usize {
        ((o * self.c_in + i) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn get(&self, o: usize, i: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(o, i, y, x)]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sub(&self, other: &Tensor4) -> Result<Tensor4> {
        if self.dims() != other.dims() {
            return Err(Error::dims("tensor shapes differ"));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Tensor4 { data, ..*self })
    }

    /// Mode-1 unfolding: `c_out × (c_in·h·w)`.
    pub fn unfold_out(&self) -> Matrix {
        Matrix::new(self.c_out, self.c_in * self.h * self.w, self.data.clone())
            .expect("unfolding preserves length")
    }

    /// Mode-2 unfolding: `c_in × (c_out·h·w)`.
    pub fn unfold_in(&self) -> Matrix {
        let hw = self.h * self.w;
        Matrix::from_fn(self.c_in, self.c_out * hw, |i, col| {
            let o = col / hw;
            let s = col % hw;
            self.data[(o * self.c_in + i) * hw + s]
        })
    }

    /// Multiplies the output-channel mode by `m` (`r × c_out`).
    pub fn mode_out_product(&self, m: &Matrix) -> Result<Tensor4> {
        if m.cols() != self.c_out {
            return Err(Error::dims("mode-out product"));
        }
        let prod = m.matmul(&self.unfold_out())?;
        Tensor4::new(m.rows(), self.c_in, self.h, self.w, prod.into_data())
    }

    /// Multiplies the input-channel mode by `m` (`r × c_in`).
    pub fn mode_in_product(&self, m: &Matrix) -> Result<Tensor4> {
        if m.cols() != self.c_in {
            return Err(Error::dims("mode-in product"));
        }
        let hw = self.h * self.w;
        let r = m.rows();
        let mut data = vec![0.0; self.c_out * r * hw];
        for o in 0..self.c_out {
            for a in 0..r {
                let dst = &mut data[(o * r + a) * hw..(o * r + a + 1) * hw];
                for i in 0..self.c_in {
                    let c = m.get(a, i);
                    if c == 0.0 {
                        continue;
                    }
                    let src = &self.data[(o * self.c_in + i) * hw..(o * self.c_in + i + 1) * hw];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += c * s;
                    }
                }
            }
        }
        Tensor4::new(self.c_out, r, self.h, self.w, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unfoldings_hold_every_entry() {
        let t = Tensor4::from_fn(2, 3, 2, 2, |o, i, y, x| (o * 100 + i * 10 + y * 2 + x) as f64);
        let u1 = t.unfold_out();
        let u2 = t.unfold_in();
        assert_eq!(u1.shape(), (2, 12));
        assert_eq!(u2.shape(), (3, 8));
        assert_eq!(u1.get(1, 4 + 3), t.get(1, 1, 1, 1));
        assert_eq!(u2.get(2, 4 + 1), t.get(1, 2, 0, 1));
    }

    #[test]
    fn identity_mode_products_are_noops() {
        let t = Tensor4::from_fn(2, 3, 1, 2, |o, i, y, x| (o + 2 * i + y + 3 * x) as f64);
        assert_eq!(t.mode_out_product(&Matrix::identity(2)).unwrap(), t);
        assert_eq!(t.mode_in_product(&Matrix::identity(3)).unwrap(), t);
    }
}
