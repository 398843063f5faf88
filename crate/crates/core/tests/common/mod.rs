//! Independent reference implementations used by the integration tests.
//! Everything here is plain nested loops over `f64`, sharing no code with the
//! library beyond tensor construction.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FLOOR: f64 = 1e-12;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Dense NCHW array.
#[derive(Clone, Debug, PartialEq)]
pub struct Arr4 {
    pub dims: [usize; 4],
    pub data: Vec<f64>,
}

impl Arr4 {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn random(dims: [usize; 4], r: &mut ChaCha8Rng, scale: f64) -> Self {
        let n = dims.iter().product();
        Self {
            dims,
            data: (0..n).map(|_| r.random_range(-scale..scale)).collect(),
        }
    }

    fn idx(&self, a: usize, b: usize, y: usize, x: usize) -> usize {
        let [_, c, h, w] = self.dims;
        ((a * c + b) * h + y) * w + x
    }

    pub fn at(&self, a: usize, b: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(a, b, y, x)]
    }

    pub fn add_at(&mut self, a: usize, b: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(a, b, y, x);
        self.data[i] += v;
    }

    pub fn tensor(&self, dtype: DType) -> Tensor {
        Tensor::from_vec(self.data.clone(), self.dims.to_vec(), &Device::Cpu)
            .unwrap()
            .to_dtype(dtype)
            .unwrap()
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let d = t.dims4().unwrap();
        Self {
            dims: [d.0, d.1, d.2, d.3],
            data: t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap(),
        }
    }

    pub fn plus(&self, other: &Arr4) -> Arr4 {
        assert_eq!(self.dims, other.dims);
        Arr4 {
            dims: self.dims,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Arr4) -> f64 {
        assert_eq!(self.dims, other.dims);
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// "Same" convolution: output extent `H / stride`, total padding
/// `max(k - stride, 0)` with the smaller half on the leading side.
/// Weight layout `(out, in, k, k)`.
pub fn conv2d(x: &Arr4, w: &Arr4, stride: usize) -> Arr4 {
    let [n, cin, h, wd] = x.dims;
    let [cout, cin_w, k, _] = w.dims;
    assert_eq!(cin, cin_w);
    let lead = k.saturating_sub(stride) / 2;
    let (ho, wo) = (h / stride, wd / stride);
    let mut out = Arr4::zeros([n, cout, ho, wo]);
    for b in 0..n {
        for o in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for c in 0..cin {
                        for i in 0..k {
                            for j in 0..k {
                                let y = (oy * stride + i) as isize - lead as isize;
                                let xx = (ox * stride + j) as isize - lead as isize;
                                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                    s += w.at(o, c, i, j) * x.at(b, c, y as usize, xx as usize);
                                }
                            }
                        }
                    }
                    out.add_at(b, o, oy, ox, s);
                }
            }
        }
    }
    out
}

/// Transposed convolution with output extent `H * stride`: every input pixel
/// scatters its kernel starting at `y * stride - crop`, where `crop` centres
/// the `k - stride` overhang (rounded up). Weight layout `(in, out, k, k)`.
pub fn conv_transpose2d(x: &Arr4, w: &Arr4, stride: usize) -> Arr4 {
    let [n, cin, h, wd] = x.dims;
    let [cin_w, cout, k, _] = w.dims;
    assert_eq!(cin, cin_w);
    let overhang = k - stride;
    let crop = overhang.div_ceil(2);
    let (ho, wo) = (h * stride, wd * stride);
    let mut out = Arr4::zeros([n, cout, ho, wo]);
    for b in 0..n {
        for c in 0..cin {
            for y in 0..h {
                for xx in 0..wd {
                    let v = x.at(b, c, y, xx);
                    for o in 0..cout {
                        for i in 0..k {
                            for j in 0..k {
                                let oy = (y * stride + i) as isize - crop as isize;
                                let ox = (xx * stride + j) as isize - crop as isize;
                                if oy >= 0 && ox >= 0 && (oy as usize) < ho && (ox as usize) < wo {
                                    out.add_at(b, o, oy as usize, ox as usize, v * w.at(c, o, i, j));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn avg_pool2(x: &Arr4) -> Arr4 {
    let [n, c, h, w] = x.dims;
    let mut out = Arr4::zeros([n, c, h / 2, w / 2]);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h / 2 {
                for xx in 0..w / 2 {
                    let s = x.at(b, ch, 2 * y, 2 * xx)
                        + x.at(b, ch, 2 * y + 1, 2 * xx)
                        + x.at(b, ch, 2 * y, 2 * xx + 1)
                        + x.at(b, ch, 2 * y + 1, 2 * xx + 1);
                    out.add_at(b, ch, y, xx, s / 4.0);
                }
            }
        }
    }
    out
}

pub fn upsample2(x: &Arr4) -> Arr4 {
    let [n, c, h, w] = x.dims;
    let mut out = Arr4::zeros([n, c, 2 * h, 2 * w]);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out.add_at(b, ch, y, xx, x.at(b, ch, y / 2, xx / 2));
                }
            }
        }
    }
    out
}

/// Kernels of the four octave paths; `None` when a branch is empty.
pub struct OctKernels {
    pub hh: Option<Arr4>,
    pub hl: Option<Arr4>,
    pub lh: Option<Arr4>,
    pub ll: Option<Arr4>,
}

/// Assembles the four cross-paths explicitly:
/// high = hh(u_h) + up(lh(u_l)), low = hl(pool(u_h)) + ll(u_l).
pub fn octconv(
    high: Option<&Arr4>,
    low: Option<&Arr4>,
    k: &OctKernels,
    stride: usize,
    transposed: bool,
) -> (Option<Arr4>, Option<Arr4>) {
    let op = |x: &Arr4, w: &Arr4| {
        if transposed {
            conv_transpose2d(x, w, stride)
        } else {
            conv2d(x, w, stride)
        }
    };
    let sum = |a: Option<Arr4>, b: Option<Arr4>| match (a, b) {
        (Some(a), Some(b)) => Some(a.plus(&b)),
        (a, b) => a.or(b),
    };
    let h_from_h = high.zip(k.hh.as_ref()).map(|(x, w)| op(x, w));
    let h_from_l = low.zip(k.lh.as_ref()).map(|(x, w)| upsample2(&op(x, w)));
    let l_from_h = high.zip(k.hl.as_ref()).map(|(x, w)| op(&avg_pool2(x), w));
    let l_from_l = low.zip(k.ll.as_ref()).map(|(x, w)| op(x, w));
    (sum(h_from_h, h_from_l), sum(l_from_h, l_from_l))
}

// ---- scalar loss oracles ----

pub fn random_distribution(r: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..c).map(|_| r.random_range(0.01..1.0f64).powi(3)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

pub fn one_hot(c: usize, j: usize) -> Vec<f64> {
    (0..c).map(|i| if i == j { 1.0 } else { 0.0 }).collect()
}

fn flog(p: f64) -> f64 {
    p.max(FLOOR).ln()
}

pub fn compat(y_tilde: &[Vec<f64>], y_h: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for (t, h) in y_tilde.iter().zip(y_h) {
        for c in 0..t.len() {
            s -= t[c] * flog(h[c]);
        }
    }
    s / y_tilde.len() as f64
}

pub fn kl_rows(p: &[Vec<f64>], q: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for (a, b) in p.iter().zip(q) {
        for c in 0..a.len() {
            if a[c] > 0.0 {
                s += a[c] * (flog(a[c]) - flog(b[c]));
            }
        }
    }
    s / p.len() as f64
}

pub fn entropy_rows(p: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for row in p {
        for &v in row {
            if v > 0.0 {
                s -= v * flog(v);
            }
        }
    }
    s / p.len() as f64
}

pub fn head(pred: &[Vec<f64>], y_tilde: &[Vec<f64>], y_h: &[Vec<f64>], taus: [f64; 3]) -> f64 {
    taus[0] * kl_rows(pred, y_h) + taus[1] * compat(y_tilde, y_h) + taus[2] * entropy_rows(pred)
}

pub fn softmax_row(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Mean over samples and positions of the hinge terms at each sample's class
/// channel.
pub fn hinge_d(real: &Arr4, lr: &[usize], fake: &Arr4, lf: &[usize]) -> f64 {
    let term = |m: &Arr4, l: &[usize], sign: f64| {
        let [n, _, h, w] = m.dims;
        let mut s = 0.0;
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    s += (1.0 + sign * m.at(b, l[b], y, x)).max(0.0);
                }
            }
        }
        s / (n * h * w) as f64
    };
    term(real, lr, -1.0) + term(fake, lf, 1.0)
}

pub fn hinge_g(fake: &Arr4, l: &[usize]) -> f64 {
    let [n, _, h, w] = fake.dims;
    let mut s = 0.0;
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                s += fake.at(b, l[b], y, x);
            }
        }
    }
    -s / (n * h * w) as f64
}

pub fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Channel-softmax entropy averaged over samples and positions.
pub fn pose_entropy(m: &Arr4) -> f64 {
    let [n, c, h, w] = m.dims;
    let mut s = 0.0;
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let z: Vec<f64> = (0..c).map(|ch| m.at(b, ch, y, x)).collect();
                let p = softmax_row(&z);
                s -= p.iter().map(|v| if *v > 0.0 { v * v.ln() } else { 0.0 }).sum::<f64>();
            }
        }
    }
    s / (n * h * w) as f64
}

/// Spatial mean of each class map, shape `(n, C)`.
pub fn spatial_mean(m: &Arr4) -> Vec<Vec<f64>> {
    let [n, c, h, w] = m.dims;
    (0..n)
        .map(|b| {
            (0..c)
                .map(|ch| {
                    let mut s = 0.0;
                    for y in 0..h {
                        for x in 0..w {
                            s += m.at(b, ch, y, x);
                        }
                    }
                    s / (h * w) as f64
                })
                .collect()
        })
        .collect()
}

// ---- tensor helpers ----

pub fn matrix(rows: &[Vec<f64>]) -> Tensor {
    let c = rows[0].len();
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::from_vec(flat, (rows.len(), c), &Device::Cpu).unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-12)
}

/// Relative L2 error between the analytic gradient of `f` at `x` and central
/// differences with step `h`, over at most `max_coords` coordinates chosen
/// with `r`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, max_coords: usize, r: &mut ChaCha8Rng) -> f64
where
    F: Fn(&Tensor) -> Tensor,
{
    let var = Var::from_tensor(x).unwrap();
    let loss = f(var.as_tensor());
    let grads = loss.backward().unwrap();
    let analytic: Vec<f64> = grads
        .get(var.as_tensor())
        .map(|g| g.flatten_all().unwrap().to_vec1().unwrap())
        .unwrap_or_else(|| vec![0.0; x.elem_count()]);
    let base: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
    let mut coords: Vec<usize> = (0..base.len()).collect();
    if coords.len() > max_coords {
        use rand::seq::SliceRandom;
        coords.shuffle(r);
        coords.truncate(max_coords);
    }
    let eval = |data: &[f64]| scalar(&f(&Tensor::from_vec(data.to_vec(), x.dims(), &Device::Cpu).unwrap()));
    let (mut num2, mut a2, mut d2) = (0.0, 0.0, 0.0);
    for &i in &coords {
        let mut p = base.clone();
        p[i] += h;
        let up = eval(&p);
        p[i] -= 2.0 * h;
        let down = eval(&p);
        let numeric = (up - down) / (2.0 * h);
        num2 += numeric * numeric;
        a2 += analytic[i] * analytic[i];
        d2 += (numeric - analytic[i]).powi(2);
    }
    let scale = num2.sqrt().max(a2.sqrt());
    if scale < 1e-12 {
        d2.sqrt()
    } else {
        d2.sqrt() / scale
    }
}
