//! Stride-1, zero-padded "same" 2D convolution over channel-major feature
//! maps (`[c][y][x]`). Kernel sizes must be odd.

use super::{spectral_norm_exact, Matrix, Tensor4};
use crate::error::{Error, Result};

/// Spatial size of the feature maps a conv layer runs on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvGeometry {
    pub height: usize,
    pub width: usize,
}

impl ConvGeometry {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

fn check(kernel: &Tensor4, geom: ConvGeometry, input_len: usize) -> Result<()> {
    if kernel.h % 2 == 0 || kernel.w % 2 == 0 {
        return Err(Error::Unsupported("even conv kernel sizes".into()));
    }
    if input_len != kernel.c_in * geom.pixels() {
        return Err(Error::dims(format!(
            "conv input length {input_len}, expected {}",
            kernel.c_in * geom.pixels()
        )));
    }
    Ok(())
}

pub fn conv2d(kernel: &Tensor4, geom: ConvGeometry, input: &[f64]) -> Result<Vec<f64>> {
    check(kernel, geom, input.len())?;
    let (co, ci, kh, kw) = kernel.dims();
    let (h, w) = (geom.height as isize, geom.width as isize);
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut out = vec![0.0; co * geom.pixels()];
    for o in 0..co {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for i in 0..ci {
                    for dy in 0..kh as isize {
                        let iy = y + dy - ph;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        for dx in 0..kw as isize {
                            let ix = x + dx - pw;
                            if ix < 0 || ix >= w {
                                continue;
                            }
                            acc += kernel.get(o, i, dy as usize, dx as usize)
                                * input[(i * h as usize + iy as usize) * w as usize + ix as usize];
                        }
                    }
                }
                out[(o * h as usize + y as usize) * w as usize + x as usize] = acc;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`conv2d`] with respect to its input.
pub fn conv2d_transpose(kernel: &Tensor4, geom: ConvGeometry, grad_out: &[f64]) -> Result<Vec<f64>> {
    let (co, ci, kh, kw) = kernel.dims();
    if grad_out.len() != co * geom.pixels() {
        return Err(Error::dims("conv adjoint length"));
    }
    let (h, w) = (geom.height as isize, geom.width as isize);
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut out = vec![0.0; ci * geom.pixels()];
    for o in 0..co {
        for y in 0..h {
            for x in 0..w {
                let g = grad_out[(o * h as usize + y as usize) * w as usize + x as usize];
                if g == 0.0 {
                    continue;
                }
                for i in 0..ci {
                    for dy in 0..kh as isize {
                        let iy = y + dy - ph;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        for dx in 0..kw as isize {
                            let ix = x + dx - pw;
                            if ix < 0 || ix >= w {
                                continue;
                            }
                            out[(i * h as usize + iy as usize) * w as usize + ix as usize] +=
                                g * kernel.get(o, i, dy as usize, dx as usize);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of `⟨grad_out, conv2d(kernel, input)⟩` with respect to the kernel.
pub fn conv2d_kernel_grad(
    dims: (usize, usize, usize, usize),
    geom: ConvGeometry,
    input: &[f64],
    grad_out: &[f64],
) -> Tensor4 {
    let (co, ci, kh, kw) = dims;
    let (h, w) = (geom.height as isize, geom.width as isize);
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    Tensor4::from_fn(co, ci, kh, kw, |o, i, dy, dx| {
        let mut acc = 0.0;
        for y in 0..h {
            let iy = y + dy as isize - ph;
            if iy < 0 || iy >= h {
                continue;
            }
            for x in 0..w {
                let ix = x + dx as isize - pw;
                if ix < 0 || ix >= w {
                    continue;
                }
                acc += grad_out[(o * h as usize + y as usize) * w as usize + x as usize]
                    * input[(i * h as usize + iy as usize) * w as usize + ix as usize];
            }
        }
        acc
    })
}

/// Dense matrix of the linear map `input ↦ conv2d(kernel, input)`.
pub fn conv_operator_matrix(kernel: &Tensor4, geom: ConvGeometry) -> Result<Matrix> {
    let n_in = kernel.c_in * geom.pixels();
    let n_out = kernel.c_out * geom.pixels();
    let mut m = Matrix::zeros(n_out, n_in);
    let mut e = vec![0.0; n_in];
    for j in 0..n_in {
        e[j] = 1.0;
        let col = conv2d(kernel, geom, &e)?;
        for (i, v) in col.into_iter().enumerate() {
            if v != 0.0 {
                m.set(i, j, v);
            }
        }
        e[j] = 0.0;
    }
    Ok(m)
}

/// Exact operator 2-norm of the conv map on `geom`-sized inputs.
pub fn conv_operator_norm(kernel: &Tensor4, geom: ConvGeometry) -> Result<f64> {
    spectral_norm_exact(&conv_operator_matrix(kernel, geom)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::dot;

    fn kernel() -> Tensor4 {
        Tensor4::from_fn(2, 3, 3, 3, |o, i, y, x| ((o * 7 + i * 5 + y * 3 + x) % 11) as f64 / 5.0 - 1.0)
    }

    #[test]
    fn adjoint_identity() {
        let k = kernel();
        let g = ConvGeometry { height: 4, width: 5 };
        let x: Vec<f64> = (0..3 * 20).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let y: Vec<f64> = (0..2 * 20).map(|i| ((i * 5) % 9) as f64 - 4.0).collect();
        let lhs = dot(&conv2d(&k, g, &x).unwrap(), &y);
        let rhs = dot(&x, &conv2d_transpose(&k, g, &y).unwrap());
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn kernel_grad_matches_directional_derivative() {
        let k = kernel();
        let g = ConvGeometry { height: 3, width: 3 };
        let x: Vec<f64> = (0..27).map(|i| (i as f64 * 0.37).sin()).collect();
        let up: Vec<f64> = (0..18).map(|i| (i as f64 * 0.11).cos()).collect();
        let kg = conv2d_kernel_grad(k.dims(), g, &x, &up);
        // the map is linear in the kernel, so ⟨grad, K⟩ equals the output pairing
        let lhs = dot(kg.data(), k.data());
        let rhs = dot(&conv2d(&k, g, &x).unwrap(), &up);
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn one_by_one_identity_kernel() {
        let k = Tensor4::from_fn(2, 2, 1, 1, |o, i, _, _| if o == i { 1.0 } else { 0.0 });
        let g = ConvGeometry { height: 2, width: 2 };
        let x: Vec<f64> = (0..8).map(|i| i as f64).collect();
        assert_eq!(conv2d(&k, g, &x).unwrap(), x);
        assert!((conv_operator_norm(&k, g).unwrap() - 1.0).abs() < 1e-12);
    }
}
