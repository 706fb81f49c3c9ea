//! Minimal convolutional building blocks with hand-written backward passes.
//!
//! Tensors are single images laid out channel-major (`c x h x w`).
//! Convolutions are 3x3, stride 1, zero padding 1, lowered to a matrix
//! product through `im2col`.

use crate::scalar::matmul;
use crate::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor3<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![T::zero(); c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length mismatch");
        Self { c, h, w, data }
    }

    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    pub fn channel(&self, k: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.c == other.c && self.h == other.h && self.w == other.w
    }
}

/// `(c * 9) x (h * w)` patch matrix.
pub fn im2col<T: Scalar>(x: &Tensor3<T>) -> Vec<T> {
    let (h, w) = (x.h, x.w);
    let hw = h * w;
    let mut cols = vec![T::zero(); x.c * 9 * hw];
    for ci in 0..x.c {
        let src = x.channel(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &src[sy as usize * w..][..w];
                    let drow = &mut row[y * w..][..w];
                    match kx {
                        0 => drow[1..].copy_from_slice(&srow[..w - 1]),
                        1 => drow.copy_from_slice(srow),
                        _ => drow[..w - 1].copy_from_slice(&srow[1..]),
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
pub fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize) -> Tensor3<T> {
    let hw = h * w;
    let mut out = Tensor3::zeros(c, h, w);
    for ci in 0..c {
        let dst = &mut out.data[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[sy as usize * w..][..w];
                    let srow = &row[y * w..][..w];
                    match kx {
                        0 => drow[..w - 1].iter_mut().zip(&srow[1..]).for_each(|(d, &s)| *d += s),
                        1 => drow.iter_mut().zip(srow).for_each(|(d, &s)| *d += s),
                        _ => drow[1..].iter_mut().zip(&srow[..w - 1]).for_each(|(d, &s)| *d += s),
                    }
                }
            }
        }
    }
    out
}

/// 3x3 convolution; `weight` is `cout x (cin * 9)`.
pub fn conv3x3<T: Scalar>(x: &Tensor3<T>, weight: &[T], bias: &[T], cout: usize) -> Tensor3<T> {
    let k = x.c * 9;
    assert_eq!(weight.len(), cout * k, "conv weight shape");
    let hw = x.plane_len();
    let cols = im2col(x);
    let mut out = Tensor3::zeros(cout, x.h, x.w);
    for (o, &b) in bias.iter().enumerate() {
        out.data[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v = b);
    }
    matmul(false, false, cout, k, hw, T::one(), weight, &cols, T::one(), &mut out.data);
    out
}

/// Accumulates weight and bias gradients; returns the input gradient when asked.
pub fn conv3x3_backward<T: Scalar>(
    x: &Tensor3<T>,
    weight: &[T],
    dout: &Tensor3<T>,
    dweight: &mut [T],
    dbias: &mut [T],
    want_dx: bool,
) -> Option<Tensor3<T>> {
    let cout = dout.c;
    let k = x.c * 9;
    let hw = x.plane_len();
    let cols = im2col(x);
    matmul(false, true, cout, hw, k, T::one(), &dout.data, &cols, T::one(), dweight);
    for (o, db) in dbias.iter_mut().enumerate() {
        *db += dout.channel(o).iter().copied().sum::<T>();
    }
    if !want_dx {
        return None;
    }
    let mut dcols = cols;
    matmul(true, false, k, cout, hw, T::one(), weight, &dout.data, T::zero(), &mut dcols);
    Some(col2im(&dcols, x.c, x.h, x.w))
}

pub fn relu_inplace<T: Scalar>(x: &mut Tensor3<T>) {
    x.data.iter_mut().for_each(|v| *v = v.max(T::zero()));
}

/// Zero `grad` wherever the post-activation value is not positive.
pub fn relu_backward_inplace<T: Scalar>(grad: &mut Tensor3<T>, activation: &Tensor3<T>) {
    for (g, &a) in grad.data.iter_mut().zip(&activation.data) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

pub fn avg_pool2<T: Scalar>(x: &Tensor3<T>) -> Tensor3<T> {
    let (h, w) = (x.h / 2, x.w / 2);
    let quarter = T::of(0.25);
    let mut out = Tensor3::zeros(x.c, h, w);
    for c in 0..x.c {
        let src = x.channel(c);
        for y in 0..h {
            for xx in 0..w {
                let s = src[2 * y * x.w + 2 * xx]
                    + src[2 * y * x.w + 2 * xx + 1]
                    + src[(2 * y + 1) * x.w + 2 * xx]
                    + src[(2 * y + 1) * x.w + 2 * xx + 1];
                out.data[c * h * w + y * w + xx] = s * quarter;
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Scalar>(dy: &Tensor3<T>) -> Tensor3<T> {
    let (h, w) = (dy.h * 2, dy.w * 2);
    let quarter = T::of(0.25);
    let mut out = Tensor3::zeros(dy.c, h, w);
    for c in 0..dy.c {
        for y in 0..h {
            for x in 0..w {
                out.data[c * h * w + y * w + x] = dy.data[c * dy.h * dy.w + (y / 2) * dy.w + x / 2] * quarter;
            }
        }
    }
    out
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<T: Scalar>(x: &Tensor3<T>) -> Tensor3<T> {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Tensor3::zeros(x.c, h, w);
    for c in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                out.data[c * h * w + y * w + xx] = x.data[c * x.h * x.w + (y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Scalar>(dy: &Tensor3<T>) -> Tensor3<T> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut out = Tensor3::zeros(dy.c, h, w);
    for c in 0..dy.c {
        for y in 0..dy.h {
            for x in 0..dy.w {
                out.data[c * h * w + (y / 2) * w + x / 2] += dy.data[c * dy.h * dy.w + y * dy.w + x];
            }
        }
    }
    out
}

pub fn concat<T: Scalar>(a: &Tensor3<T>, b: &Tensor3<T>) -> Tensor3<T> {
    assert!(a.h == b.h && a.w == b.w, "concat spatial mismatch");
    let mut data = a.data.clone();
    data.extend_from_slice(&b.data);
    Tensor3::from_vec(a.c + b.c, a.h, a.w, data)
}

/// Split a gradient of `concat(a, b)` back into the two parts.
pub fn split<T: Scalar>(g: &Tensor3<T>, ca: usize) -> (Tensor3<T>, Tensor3<T>) {
    let n = ca * g.plane_len();
    (
        Tensor3::from_vec(ca, g.h, g.w, g.data[..n].to_vec()),
        Tensor3::from_vec(g.c - ca, g.h, g.w, g.data[n..].to_vec()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(c: usize, h: usize, w: usize, seed: u64) -> Tensor3<f64> {
        let mut rng = crate::rng::seeded(seed);
        Tensor3::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_matches_direct_loop() {
        let x = random(2, 5, 4, 1);
        let wt = random(3, 2, 9, 2).data;
        let b = vec![0.1, -0.2, 0.3];
        let out = conv3x3(&x, &wt, &b, 3);
        for o in 0..3 {
            for y in 0..5 {
                for xx in 0..4 {
                    let mut s = b[o];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                if sy >= 0 && sy < 5 && sx >= 0 && sx < 4 {
                                    s += wt[o * 18 + ci * 9 + ky * 3 + kx] * x.data[ci * 20 + sy as usize * 4 + sx as usize];
                                }
                            }
                        }
                    }
                    assert!((out.data[o * 20 + y * 4 + xx] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let x = random(3, 6, 5, 3);
        let cols = random(27, 6, 5, 4).data;
        let lhs = dot(&im2col(&x), &cols);
        let rhs = dot(&x.data, &col2im(&cols, 3, 6, 5).data);
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn pooling_and_upsampling_adjoints() {
        let x = random(2, 8, 6, 5);
        let y = random(2, 4, 3, 6);
        assert!((dot(&avg_pool2(&x).data, &y.data) - dot(&x.data, &avg_pool2_backward(&y).data)).abs() < 1e-12);
        assert!((dot(&upsample2(&y).data, &x.data) - dot(&y.data, &upsample2_backward(&x).data)).abs() < 1e-12);
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let x = random(2, 4, 4, 7);
        let wt = random(3, 2, 9, 8).data;
        let b = vec![0.0; 3];
        let probe = random(3, 4, 4, 9);
        let f = |x: &Tensor3<f64>, w: &[f64]| dot(&conv3x3(x, w, &b, 3).data, &probe.data);
        let mut dw = vec![0.0; wt.len()];
        let mut db = vec![0.0; 3];
        let dx = conv3x3_backward(&x, &wt, &probe, &mut dw, &mut db, true).unwrap();
        let h = 1e-6;
        for i in [0, 5, 17, 40] {
            let mut wp = wt.clone();
            wp[i] += h;
            let mut wm = wt.clone();
            wm[i] -= h;
            assert!(((f(&x, &wp) - f(&x, &wm)) / (2.0 * h) - dw[i]).abs() < 1e-6);
        }
        for i in [0, 9, 31] {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            assert!(((f(&xp, &wt) - f(&xm, &wt)) / (2.0 * h) - dx.data[i]).abs() < 1e-6);
        }
        assert!((db[1] - probe.channel(1).iter().sum::<f64>()).abs() < 1e-12);
    }
}
