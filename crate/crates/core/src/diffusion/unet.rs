//! Three-stage convolutional U-Net `F(x, c_noise)` with FiLM noise
//! conditioning.
//!
//! ```text
//! in(2) -> A*(w) -> B(w) ─────────────────────────────── skip ──┐
//!            pool -> C*(2w) -> D(2w) ──────── skip ──┐          │
//!                      pool -> E*(2w) -> F(2w) -> up ┴ G*(2w) -> up ┴ H(w) -> out(2)
//! ```
//! Starred convolutions are modulated by a per-channel scale and shift
//! computed from an embedding of `c_noise`.

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::checkpoint::Manifest;
use crate::container::{load_real, save_real};
use crate::error::{invalid, Error, Result};
use crate::nn::{self, Tensor3};
use crate::rng;
use crate::scalar::matmul;
use crate::Scalar;

const FREQS: [f64; 6] = [0.5, 1.0, 2.0, 4.0, 8.0, 16.0];
const EMB_DIM: usize = 1 + 2 * FREQS.len();
const EMB_HIDDEN: usize = 32;
const NUM_CONVS: usize = 9;
const NUM_FILM: usize = 4;
const CONV_NAMES: [&str; NUM_CONVS] = ["a", "b", "c", "d", "e", "f", "g", "h", "out"];
/// Convolutions carrying FiLM modulation, in FiLM-block order.
const FILM_CONVS: [usize; NUM_FILM] = [0, 2, 4, 6];

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    width: usize,
    conv_dims: [(usize, usize); NUM_CONVS],
    conv_w: Vec<Range<usize>>,
    conv_b: Vec<Range<usize>>,
    emb_w: Range<usize>,
    emb_b: Range<usize>,
    film_w: Vec<Range<usize>>,
    film_b: Vec<Range<usize>>,
    total: usize,
}

impl Layout {
    fn new(width: usize) -> Self {
        let w = width;
        let conv_dims = [(2, w), (w, w), (w, 2 * w), (2 * w, 2 * w), (2 * w, 2 * w), (2 * w, 2 * w), (4 * w, 2 * w), (3 * w, w), (w, 2)];
        let mut off = 0;
        let mut take = |n: usize| {
            let r = off..off + n;
            off += n;
            r
        };
        let emb_w = take(EMB_HIDDEN * EMB_DIM);
        let emb_b = take(EMB_HIDDEN);
        let mut film_w = Vec::new();
        let mut film_b = Vec::new();
        for &ci in &FILM_CONVS {
            let ch = conv_dims[ci].1;
            film_w.push(take(2 * ch * EMB_HIDDEN));
            film_b.push(take(2 * ch));
        }
        let mut conv_w = Vec::new();
        let mut conv_b = Vec::new();
        for &(cin, cout) in &conv_dims {
            conv_w.push(take(cout * cin * 9));
            conv_b.push(take(cout));
        }
        Self { width, conv_dims, conv_w, conv_b, emb_w, emb_b, film_w, film_b, total: off }
    }
}

/// Denoiser weights, stored flat.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams<T> {
    layout: Layout,
    theta: Vec<T>,
}

/// Everything the backward pass needs from one forward evaluation.
pub struct UnetCache<T> {
    x: Tensor3<T>,
    emb: Vec<T>,
    he: Vec<T>,
    film: Vec<Vec<T>>,
    a_z: Tensor3<T>,
    a: Tensor3<T>,
    s1: Tensor3<T>,
    p1: Tensor3<T>,
    c_z: Tensor3<T>,
    c: Tensor3<T>,
    s2: Tensor3<T>,
    p2: Tensor3<T>,
    e_z: Tensor3<T>,
    e: Tensor3<T>,
    f: Tensor3<T>,
    cat1: Tensor3<T>,
    g_z: Tensor3<T>,
    g: Tensor3<T>,
    cat2: Tensor3<T>,
    h: Tensor3<T>,
}

fn embed<T: Scalar>(c_noise: T) -> Vec<T> {
    let mut e = Vec::with_capacity(EMB_DIM);
    e.push(c_noise);
    for &f in &FREQS {
        e.push((c_noise * T::of(f)).cos());
        e.push((c_noise * T::of(f)).sin());
    }
    e
}

fn film_apply<T: Scalar>(z: &Tensor3<T>, film: &[T]) -> Tensor3<T> {
    let n = z.plane_len();
    let mut y = z.clone();
    for c in 0..z.c {
        let (s, t) = (T::one() + film[c], film[z.c + c]);
        y.data[c * n..(c + 1) * n].iter_mut().for_each(|v| *v = *v * s + t);
    }
    y
}

/// Returns `dz` and writes `d(scale, shift)` into `dfilm`.
fn film_backward<T: Scalar>(dy: &Tensor3<T>, z: &Tensor3<T>, film: &[T], dfilm: &mut [T]) -> Tensor3<T> {
    let n = z.plane_len();
    let mut dz = dy.clone();
    for c in 0..z.c {
        let gy = &dy.data[c * n..(c + 1) * n];
        dfilm[c] = gy.iter().zip(&z.data[c * n..(c + 1) * n]).map(|(&g, &v)| g * v).sum();
        dfilm[z.c + c] = gy.iter().copied().sum();
        let s = T::one() + film[c];
        dz.data[c * n..(c + 1) * n].iter_mut().for_each(|v| *v = *v * s);
    }
    dz
}

fn add_into<T: Scalar>(a: &mut Tensor3<T>, b: &Tensor3<T>) {
    a.data.iter_mut().zip(&b.data).for_each(|(x, &y)| *x += y);
}

impl<T: Scalar> DenoiserParams<T> {
    /// He-initialized convolutions, zero output convolution and zero FiLM
    /// projections, so an untrained network leaves the skip path alone.
    pub fn new(width: usize, seed: u64) -> Result<Self> {
        if width < 1 {
            return Err(invalid("denoiser width must be positive"));
        }
        let layout = Layout::new(width);
        let mut theta = vec![T::zero(); layout.total];
        let mut r = rng::seeded(rng::derive(seed, rng::label("denoiser-init")));
        for k in 0..NUM_CONVS - 1 {
            let std = (2.0 / (layout.conv_dims[k].0 * 9) as f64).sqrt();
            for v in &mut theta[layout.conv_w[k].clone()] {
                *v = T::of(std * r.sample::<f64, _>(StandardNormal));
            }
        }
        let std = (1.0 / EMB_DIM as f64).sqrt();
        for v in &mut theta[layout.emb_w.clone()] {
            *v = T::of(std * r.sample::<f64, _>(StandardNormal));
        }
        Ok(Self { layout, theta })
    }

    pub fn width(&self) -> usize {
        self.layout.width
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self) -> &[T] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [T] {
        &mut self.theta
    }

    fn conv(&self, k: usize, x: &Tensor3<T>) -> Tensor3<T> {
        let l = &self.layout;
        nn::conv3x3(x, &self.theta[l.conv_w[k].clone()], &self.theta[l.conv_b[k].clone()], l.conv_dims[k].1)
    }

    fn conv_back(&self, k: usize, x: &Tensor3<T>, dout: &Tensor3<T>, grad: &mut [T], want_dx: bool) -> Option<Tensor3<T>> {
        let l = &self.layout;
        let (wr, br) = (l.conv_w[k].clone(), l.conv_b[k].clone());
        // weight and bias ranges are adjacent: split the gradient slice once
        let (gw, gb) = grad[wr.start..br.end].split_at_mut(wr.len());
        nn::conv3x3_backward(x, &self.theta[wr], dout, gw, gb, want_dx)
    }

    /// Raw network output for input `x` (2 channels, sides divisible by 4).
    pub fn forward(&self, x: &Tensor3<T>, c_noise: T) -> (Tensor3<T>, UnetCache<T>) {
        assert_eq!(x.c, 2, "denoiser input has two channels");
        assert!(x.h % 4 == 0 && x.w % 4 == 0, "denoiser input sides must be divisible by 4");
        let l = &self.layout;
        let emb = embed(c_noise);
        let mut he = self.theta[l.emb_b.clone()].to_vec();
        matmul(false, false, EMB_HIDDEN, EMB_DIM, 1, T::one(), &self.theta[l.emb_w.clone()], &emb, T::one(), &mut he);
        he.iter_mut().for_each(|v| *v = v.max(T::zero()));
        let film: Vec<Vec<T>> = (0..NUM_FILM)
            .map(|i| {
                let mut out = self.theta[l.film_b[i].clone()].to_vec();
                let rows = out.len();
                matmul(false, false, rows, EMB_HIDDEN, 1, T::one(), &self.theta[l.film_w[i].clone()], &he, T::one(), &mut out);
                out
            })
            .collect();

        let modulated = |z: &Tensor3<T>, i: usize| {
            let mut y = film_apply(z, &film[i]);
            nn::relu_inplace(&mut y);
            y
        };
        let relu = |mut t: Tensor3<T>| {
            nn::relu_inplace(&mut t);
            t
        };

        let a_z = self.conv(0, x);
        let a = modulated(&a_z, 0);
        let s1 = relu(self.conv(1, &a));
        let p1 = nn::avg_pool2(&s1);
        let c_z = self.conv(2, &p1);
        let c = modulated(&c_z, 1);
        let s2 = relu(self.conv(3, &c));
        let p2 = nn::avg_pool2(&s2);
        let e_z = self.conv(4, &p2);
        let e = modulated(&e_z, 2);
        let f = relu(self.conv(5, &e));
        let cat1 = nn::concat(&nn::upsample2(&f), &s2);
        let g_z = self.conv(6, &cat1);
        let g = modulated(&g_z, 3);
        let cat2 = nn::concat(&nn::upsample2(&g), &s1);
        let h = relu(self.conv(7, &cat2));
        let out = self.conv(8, &h);
        let cache = UnetCache {
            x: x.clone(),
            emb,
            he,
            film,
            a_z,
            a,
            s1,
            p1,
            c_z,
            c,
            s2,
            p2,
            e_z,
            e,
            f,
            cat1,
            g_z,
            g,
            cat2,
            h,
        };
        (out, cache)
    }

    /// Parameter gradient plus (optionally) the input gradient for an
    /// output cotangent `dout`.
    pub fn backward(&self, cache: &UnetCache<T>, dout: &Tensor3<T>, want_dx: bool) -> (Vec<T>, Option<Tensor3<T>>) {
        let l = &self.layout;
        let mut grad = vec![T::zero(); self.theta.len()];
        let mut dfilm: Vec<Vec<T>> = cache.film.iter().map(|f| vec![T::zero(); f.len()]).collect();
        let wide = 2 * l.width;

        let mut dh = self.conv_back(8, &cache.h, dout, &mut grad, true).expect("dx requested");
        nn::relu_backward_inplace(&mut dh, &cache.h);
        let dcat2 = self.conv_back(7, &cache.cat2, &dh, &mut grad, true).expect("dx requested");
        let (du2, ds1_skip) = nn::split(&dcat2, wide);
        let mut dg = nn::upsample2_backward(&du2);
        nn::relu_backward_inplace(&mut dg, &cache.g);
        let dg_z = film_backward(&dg, &cache.g_z, &cache.film[3], &mut dfilm[3]);
        let dcat1 = self.conv_back(6, &cache.cat1, &dg_z, &mut grad, true).expect("dx requested");
        let (du1, ds2_skip) = nn::split(&dcat1, wide);
        let mut df = nn::upsample2_backward(&du1);
        nn::relu_backward_inplace(&mut df, &cache.f);
        let mut de = self.conv_back(5, &cache.e, &df, &mut grad, true).expect("dx requested");
        nn::relu_backward_inplace(&mut de, &cache.e);
        let de_z = film_backward(&de, &cache.e_z, &cache.film[2], &mut dfilm[2]);
        let dp2 = self.conv_back(4, &cache.p2, &de_z, &mut grad, true).expect("dx requested");
        let mut ds2 = nn::avg_pool2_backward(&dp2);
        add_into(&mut ds2, &ds2_skip);
        nn::relu_backward_inplace(&mut ds2, &cache.s2);
        let mut dc = self.conv_back(3, &cache.c, &ds2, &mut grad, true).expect("dx requested");
        nn::relu_backward_inplace(&mut dc, &cache.c);
        let dc_z = film_backward(&dc, &cache.c_z, &cache.film[1], &mut dfilm[1]);
        let dp1 = self.conv_back(2, &cache.p1, &dc_z, &mut grad, true).expect("dx requested");
        let mut ds1 = nn::avg_pool2_backward(&dp1);
        add_into(&mut ds1, &ds1_skip);
        nn::relu_backward_inplace(&mut ds1, &cache.s1);
        let mut da = self.conv_back(1, &cache.a, &ds1, &mut grad, true).expect("dx requested");
        nn::relu_backward_inplace(&mut da, &cache.a);
        let da_z = film_backward(&da, &cache.a_z, &cache.film[0], &mut dfilm[0]);
        let dx = self.conv_back(0, &cache.x, &da_z, &mut grad, want_dx);

        // conditioning path
        let mut dhe = vec![T::zero(); EMB_HIDDEN];
        for i in 0..NUM_FILM {
            let rows = dfilm[i].len();
            matmul(false, false, rows, 1, EMB_HIDDEN, T::one(), &dfilm[i], &cache.he, T::one(), &mut grad[l.film_w[i].clone()]);
            grad[l.film_b[i].clone()].iter_mut().zip(&dfilm[i]).for_each(|(g, &d)| *g += d);
            matmul(true, false, EMB_HIDDEN, rows, 1, T::one(), &self.theta[l.film_w[i].clone()], &dfilm[i], T::one(), &mut dhe);
        }
        for (d, &h) in dhe.iter_mut().zip(&cache.he) {
            if h <= T::zero() {
                *d = T::zero();
            }
        }
        matmul(false, false, EMB_HIDDEN, 1, EMB_DIM, T::one(), &dhe, &cache.emb, T::one(), &mut grad[l.emb_w.clone()]);
        grad[l.emb_b.clone()].iter_mut().zip(&dhe).for_each(|(g, &d)| *g += d);
        (grad, dx)
    }

    pub fn save(&self, dir: &Path, extra: &Manifest) -> Result<()> {
        fs::create_dir_all(dir)?;
        let l = &self.layout;
        let mut m = Manifest::default();
        m.set("kind", "denoiser");
        m.set("width", l.width);
        m.set("num_params", self.num_params());
        for (k, v) in extra.entries() {
            m.set(k, v);
        }
        let mut tensor = |name: &str, r: &Range<usize>, shape: &[usize]| -> Result<()> {
            m.set(&format!("tensor.{name}"), shape.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("x"));
            save_real(dir.join(format!("{name}.cpxa")), shape, &self.theta[r.clone()])
        };
        tensor("emb_w", &l.emb_w, &[EMB_HIDDEN, EMB_DIM])?;
        tensor("emb_b", &l.emb_b, &[EMB_HIDDEN])?;
        for i in 0..NUM_FILM {
            let rows = l.film_b[i].len();
            tensor(&format!("film{i}_w"), &l.film_w[i], &[rows, EMB_HIDDEN])?;
            tensor(&format!("film{i}_b"), &l.film_b[i], &[rows])?;
        }
        for k in 0..NUM_CONVS {
            let (cin, cout) = l.conv_dims[k];
            tensor(&format!("conv_{}_w", CONV_NAMES[k]), &l.conv_w[k], &[cout, cin, 3, 3])?;
            tensor(&format!("conv_{}_b", CONV_NAMES[k]), &l.conv_b[k], &[cout])?;
        }
        m.write(dir)
    }

    pub fn load(dir: &Path) -> Result<(Self, Manifest)> {
        let m = Manifest::read(dir)?;
        if m.require("kind")? != "denoiser" {
            return Err(Error::Config(format!("{} is not a denoiser checkpoint", dir.display())));
        }
        let width: usize = m.parse_num("width")?;
        let layout = Layout::new(width);
        let mut theta = vec![T::zero(); layout.total];
        let mut fill = |name: &str, r: &Range<usize>| -> Result<()> {
            let (_, v) = load_real::<T>(dir.join(format!("{name}.cpxa")))?;
            if v.len() != r.len() {
                return Err(Error::Config(format!("tensor {name} has {} values, expected {}", v.len(), r.len())));
            }
            theta[r.clone()].copy_from_slice(&v);
            Ok(())
        };
        fill("emb_w", &layout.emb_w)?;
        fill("emb_b", &layout.emb_b)?;
        for i in 0..NUM_FILM {
            fill(&format!("film{i}_w"), &layout.film_w[i])?;
            fill(&format!("film{i}_b"), &layout.film_b[i])?;
        }
        for k in 0..NUM_CONVS {
            fill(&format!("conv_{}_w", CONV_NAMES[k]), &layout.conv_w[k])?;
            fill(&format!("conv_{}_b", CONV_NAMES[k]), &layout.conv_b[k])?;
        }
        Ok((Self { layout, theta }, m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_tensor(c: usize, h: usize, w: usize, seed: u64) -> Tensor3<f64> {
        let mut r = rng::seeded(seed);
        Tensor3::from_vec(c, h, w, (0..c * h * w).map(|_| r.random_range(-1.0..1.0)).collect())
    }

    /// Perturb all parameters so zero-initialized parts are exercised too.
    fn scrambled(width: usize) -> DenoiserParams<f64> {
        let mut p = DenoiserParams::<f64>::new(width, 1).unwrap();
        let mut r = rng::seeded(2);
        for v in p.theta_mut() {
            *v += 0.2 * r.random_range(-1.0..1.0);
        }
        p
    }

    #[test]
    fn preserves_spatial_shape() {
        let p = DenoiserParams::<f32>::new(4, 0).unwrap();
        let x = Tensor3::zeros(2, 16, 12);
        let (y, _) = p.forward(&x, 0.1);
        assert_eq!((y.c, y.h, y.w), (2, 16, 12));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let p = scrambled(2);
        let x = random_tensor(2, 8, 8, 3);
        let probe = random_tensor(2, 8, 8, 4);
        let c_noise = 0.3;
        let f = |p: &DenoiserParams<f64>, x: &Tensor3<f64>| -> f64 {
            p.forward(x, c_noise).0.data.iter().zip(&probe.data).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = p.forward(&x, c_noise);
        let (grad, dx) = p.backward(&cache, &probe, true);
        let dx = dx.unwrap();
        let h = 1e-6;
        let mut r = rng::seeded(5);
        let mut worst = 0.0f64;
        for _ in 0..150 {
            let i = r.random_range(0..p.num_params());
            let mut pp = p.clone();
            pp.theta_mut()[i] += h;
            let mut pm = p.clone();
            pm.theta_mut()[i] -= h;
            let fd = (f(&pp, &x) - f(&pm, &x)) / (2.0 * h);
            worst = worst.max((fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-4));
        }
        for i in [0, 17, 64, 100, 127] {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (f(&p, &xp) - f(&p, &xm)) / (2.0 * h);
            worst = worst.max((fd - dx.data[i]).abs() / fd.abs().max(dx.data[i].abs()).max(1e-4));
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = DenoiserParams::<f32>::new(3, 7).unwrap();
        let dir = std::env::temp_dir().join(format!("unet-ckpt-{}", std::process::id()));
        let mut extra = Manifest::default();
        extra.set("train.steps", 10);
        p.save(&dir, &extra).unwrap();
        let (q, m) = DenoiserParams::<f32>::load(&dir).unwrap();
        assert_eq!(p, q);
        assert_eq!(m.get("train.steps"), Some("10"));
        assert_eq!(m.parse_num::<usize>("num_params").unwrap(), p.num_params());
        std::fs::remove_dir_all(&dir).ok();
    }
}
