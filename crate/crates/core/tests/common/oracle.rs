//! Independent oracles for the noise model, programming distortion and the
//! Hessian-vector regularizers.

use msnn::clip;
use msnn::noise::{self, PhysicalConstants, Vmm, NANOAMP};
use msnn::rng;
use msnn::stats;
use msnn::Tensor;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};
use rand::Rng as _;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn exact(v: f64) -> BigRational {
    BigRational::from_float(v).expect("finite input")
}

fn shot(c: &PhysicalConstants) -> BigRational {
    exact(c.q) * exact(c.b0) * BigRational::from_integer(BigInt::from(2))
}

/// Layer-1 variance of a valid convolution in exact rational arithmetic.
pub fn exact_layer1(x: &Tensor, w: &Tensor, i_max: f64, c: &PhysicalConstants) -> Vec<f64> {
    let (n, ch, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (f, k) = (w.shape()[0], w.shape()[2]);
    let w_max = w.data().iter().map(|&v| exact(v).abs()).max().unwrap();
    let factor = shot(c) * w_max / exact(i_max);
    let (oh, ow) = (h - k + 1, wd - k + 1);
    let mut out = Vec::new();
    for i in 0..n {
        for o in 0..f {
            for y in 0..oh {
                for z in 0..ow {
                    let mut acc = BigRational::zero();
                    for cc in 0..ch {
                        for dy in 0..k {
                            for dx in 0..k {
                                let xv = x.data()[((i * ch + cc) * h + y + dy) * wd + z + dx];
                                let wv = w.data()[((o * ch + cc) * k + dy) * k + dx];
                                acc += exact(xv) * exact(wv).abs();
                            }
                        }
                    }
                    out.push((&factor * acc).to_f64().unwrap());
                }
            }
        }
    }
    out
}

/// Analog-layer variance of a dense layer `[N, D] x [D, M]` in exact
/// rational arithmetic.
pub fn exact_analog(x: &Tensor, w: &Tensor, x_max: f64, i_max: f64, c: &PhysicalConstants) -> Vec<f64> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let m = w.shape()[1];
    let factor = shot(c) * exact(x_max) / exact(i_max);
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..m {
            let mut acc = BigRational::zero();
            for k in 0..d {
                let wv = exact(w.data()[k * m + j]);
                acc += exact(x.data()[i * d + k]) * (wv.abs() + &wv * &wv);
            }
            out.push((&factor * acc).to_f64().unwrap());
        }
    }
    out
}

pub fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let s = x.abs().max(y.abs());
            if s == 0.0 {
                0.0
            } else {
                (x - y).abs() / s
            }
        })
        .fold(0.0, f64::max)
}

/// Layer-1 fixture: a 3-channel image whose right third is black.
pub fn layer1_fixture() -> (Tensor, Tensor) {
    let mut r = rng::stream(7, 40);
    let x = Tensor::from_fn(&[1, 3, 6, 9], |i| {
        let col = i % 9;
        if col >= 6 {
            0.0
        } else {
            (r.random_range(0..16) as f64) / 15.0
        }
    });
    let w = Tensor::from_fn(&[2, 3, 3, 3], |_| r.random_range(-0.4..0.4));
    (x, w)
}

/// Layer-2 fixture: dense inputs, the second row all zero.
pub fn analog_fixture() -> (Tensor, Tensor) {
    let mut r = rng::stream(7, 41);
    let x = Tensor::from_fn(&[2, 24], |i| if i < 24 { r.random_range(0.0..2.0) } else { 0.0 });
    let w = Tensor::from_fn(&[24, 5], |_| r.random_range(-0.3..0.3));
    (x, w)
}

pub struct Fidelity {
    /// Worst per-unit relative gap between empirical and closed-form variance.
    pub layer1_dev: f64,
    pub analog_dev: f64,
    /// Closed forms against the rational oracle.
    pub layer1_exact: f64,
    pub analog_exact: f64,
    /// Every zero-input unit has zero variance and zero draws.
    pub zero_units_exact: bool,
    pub zero_units: usize,
}

fn empirical(variance: &Tensor, draws: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng::stream(seed, 42);
    let n = variance.len();
    let mut sum = vec![0.0; n];
    let mut sq = vec![0.0; n];
    for _ in 0..draws {
        let d = noise::gaussian_offsets(variance, &mut rng).unwrap();
        for (i, &v) in d.data().iter().enumerate() {
            sum[i] += v;
            sq[i] += v * v;
        }
    }
    let k = draws as f64;
    (0..n).map(|i| (sq[i] - sum[i] * sum[i] / k) / (k - 1.0)).collect()
}

pub fn noise_fidelity(draws: usize) -> Fidelity {
    let c = PhysicalConstants::default();
    let i_max = 5.0 * NANOAMP;
    let (x1, w1) = layer1_fixture();
    let v1 = noise::variance_layer1(&x1, Vmm::Conv(&w1), i_max, &c).unwrap();
    let (x2, w2) = analog_fixture();
    let x_max = x2.max_abs();
    let v2 = noise::variance_analog(&x2, Vmm::Dense(&w2), x_max, i_max, &c).unwrap();

    let e1 = empirical(&v1, draws, 1);
    let e2 = empirical(&v2, draws, 2);
    let dev = |emp: &[f64], v: &Tensor| {
        emp.iter()
            .zip(v.data())
            .filter(|(_, &s)| s > 0.0)
            .map(|(e, s)| (e - s).abs() / s)
            .fold(0.0, f64::max)
    };

    // Units fed only by the black region (conv) or the zero row (dense).
    let zero1: Vec<usize> = (0..v1.len()).filter(|&i| i % 7 >= 6).collect();
    let zero2: Vec<usize> = (5..10).collect();
    let mut ok = zero1.iter().all(|&i| v1.data()[i] == 0.0 && e1[i] == 0.0)
        && zero2.iter().all(|&i| v2.data()[i] == 0.0 && e2[i] == 0.0);
    let mut r = rng::stream(3, 43);
    let y = Tensor::from_fn(v2.shape(), |_| r.random_range(-1.0..1.0));
    let noisy = noise::inject(&y, &v2, &mut r).unwrap();
    ok &= zero2.iter().all(|&i| noisy.data()[i] == y.data()[i]);

    Fidelity {
        layer1_dev: dev(&e1, &v1),
        analog_dev: dev(&e2, &v2),
        layer1_exact: max_rel(v1.data(), &exact_layer1(&x1, &w1, i_max, &c)),
        analog_exact: max_rel(v2.data(), &exact_analog(&x2, &w2, x_max, i_max, &c)),
        zero_units_exact: ok,
        zero_units: zero1.len() + zero2.len(),
    }
}

pub struct Scaling {
    /// Worst relative departure from exact proportionality.
    pub algebraic: f64,
    /// std(I) / std(4I) of sampled offsets; 2 in theory.
    pub std_ratio: f64,
}

pub fn scaling_laws(draws: usize) -> Scaling {
    let c = PhysicalConstants::default();
    let mut r = rng::stream(5, 44);
    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let sums = Tensor::from_fn(&[16], |_| r.random_range(0.0..10.0));
        let w_max = r.random_range(0.05..2.0);
        let x_max = r.random_range(0.05..5.0);
        let i = (1.0 + case as f64) * NANOAMP;
        let k = r.random_range(1.5..8.0);
        let l1 = |w: f64, i: f64| noise::variance_layer1_from_sums(&sums, w, i, &c).unwrap().into_data();
        let an = |x: f64, i: f64| noise::variance_analog_from_sums(&sums, x, i, &c).unwrap().into_data();
        let scaled = |v: Vec<f64>, f: f64| v.into_iter().map(|a| a * f).collect::<Vec<_>>();
        worst = worst
            .max(max_rel(&l1(w_max, i / k), &scaled(l1(w_max, i), k)))
            .max(max_rel(&l1(w_max * k, i), &scaled(l1(w_max, i), k)))
            .max(max_rel(&an(x_max, i / k), &scaled(an(x_max, i), k)))
            .max(max_rel(&an(x_max * k, i), &scaled(an(x_max, i), k)));
    }

    let (x, w) = layer1_fixture();
    // Offsets in units of the 1 nA standard deviation of their own unit.
    let unit = noise::variance_layer1(&x, Vmm::Conv(&w), NANOAMP, &c).unwrap();
    let draw = |i_max: f64, seed: u64| {
        let v = noise::variance_layer1(&x, Vmm::Conv(&w), i_max, &c).unwrap();
        let mut rng = rng::stream(seed, 45);
        let mut all = Vec::with_capacity(draws);
        while all.len() < draws {
            let d = noise::gaussian_offsets(&v, &mut rng).unwrap();
            all.extend(d.data().iter().zip(unit.data()).filter(|(_, &s)| s > 0.0).map(|(d, s)| d / s.sqrt()));
        }
        stats::std_dev(&all)
    };
    Scaling {
        algebraic: worst,
        std_ratio: draw(1.0 * NANOAMP, 1) / draw(4.0 * NANOAMP, 2),
    }
}

pub struct Programming {
    pub samples: usize,
    pub violations: usize,
    pub bound_3na: f64,
    /// Chi-square p-value of the normalized offsets against U(-1, 1).
    pub uniform_p: f64,
}

pub fn programming_bound(samples: usize) -> Programming {
    let i_res = 0.1 * NANOAMP;
    let currents = [1.0, 3.0, 7.0, 100.0].map(|n| n * NANOAMP);
    let chunk = 1_000_000.min(samples);
    let mut r = rng::stream(8, 46);
    let mut violations = 0;
    let mut done = 0;
    const BINS: usize = 50;
    let mut hist = [0usize; BINS];
    let mut hist_n = 0;
    while done < samples {
        let len = chunk.min(samples - done);
        let i_max = currents[(done / chunk) % currents.len()];
        let bound = i_res / i_max;
        let w = Tensor::from_fn(&[len], |_| r.random_range(-3.0..3.0));
        let p = noise::program_weights(&w, i_res, i_max, &mut r);
        for (a, b) in p.data().iter().zip(w.data()) {
            let d = a - b;
            if d.abs() > bound {
                violations += 1;
            }
            if i_max == currents[1] {
                let u = (d / bound + 1.0) / 2.0;
                hist[((u * BINS as f64) as usize).min(BINS - 1)] += 1;
                hist_n += 1;
            }
        }
        done += len;
    }
    let expected = hist_n as f64 / BINS as f64;
    let chi2: f64 = hist.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    let dist = ChiSquared::new((BINS - 1) as f64).unwrap();
    Programming {
        samples,
        violations,
        bound_3na: i_res / (3.0 * NANOAMP),
        uniform_p: 1.0 - dist.cdf(chi2),
    }
}

/// Quadratic `C(w) = 0.5 w'Aw + b'w`, with `A` symmetric positive definite.
pub struct Quadratic {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl Quadratic {
    pub fn random(n: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, 47);
        let m: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let a = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| (0..n).map(|k| m[i][k] * m[j][k]).sum::<f64>() + if i == j { 0.5 } else { 0.0 })
                    .collect()
            })
            .collect();
        let b = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        Quadratic { a, b }
    }

    pub fn times(&self, v: &[f64]) -> Vec<f64> {
        self.a.iter().map(|row| row.iter().zip(v).map(|(x, y)| x * y).sum()).collect()
    }

    pub fn grad(&self, w: &[f64]) -> Vec<f64> {
        self.times(w).iter().zip(&self.b).map(|(a, b)| a + b).collect()
    }
}

pub struct HvpCheck {
    pub e2_err: f64,
    pub e3_grad_err: f64,
    pub e3_value_err: f64,
}

pub fn hvp_regularizers(cases: u64) -> HvpCheck {
    let mut out = HvpCheck {
        e2_err: 0.0,
        e3_grad_err: 0.0,
        e3_value_err: 0.0,
    };
    for case in 0..cases {
        let n = 3 + case as usize % 10;
        let q = Quadratic::random(n, case);
        let mut r = rng::stream(case, 48);
        let w: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        let lambda = r.random_range(0.01..1.0);
        let g = q.grad(&w);
        let mut grad_at = |p: &[f64]| Ok(q.grad(p));

        let e2 = clip::grad_e2(&mut grad_at, &w, &g, lambda, 1e-3).unwrap().unwrap();
        let want: Vec<f64> = q.times(&g).iter().map(|x| 2.0 * lambda * x).collect();
        out.e2_err = out.e2_err.max(max_rel(&e2, &want));

        let e3 = clip::grad_e3prime(&mut grad_at, &w, lambda, 1e-3).unwrap().unwrap();
        let h1 = q.times(&vec![1.0; n]);
        let want: Vec<f64> = q.times(&h1).iter().map(|x| 2.0 * lambda * x).collect();
        out.e3_grad_err = out.e3_grad_err.max(max_rel(&e3.gradient, &want));
        let value: f64 = h1.iter().map(|x| x * x).sum();
        out.e3_value_err = out.e3_value_err.max((e3.value - value).abs() / value);
    }
    out
}
