//! Finite-difference checks for every taped op.

use msnn::model::{self, ForwardOptions, NetworkConfig};
use msnn::noise::NoiseConfig;
use msnn::rng;
use msnn::tensor::{BnMode, Tape, Var};
use msnn::Tensor;
use rand::Rng as _;

pub const H: f64 = 1e-6;
pub const TOL: f64 = 1e-5;
pub const CASES_PER_OP: u64 = 16;

pub fn random(shape: &[usize], rng: &mut rng::Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-8 {
        (a - n).abs()
    } else {
        (a - n).abs() / scale
    }
}

/// Builds a scalar from the inputs on a fresh tape.
type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> msnn::Result<Var> + 'a;

/// Returns the worst relative error over every coordinate of every input.
pub fn check(inputs: &[Tensor], build: &Build<'_>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = build(&mut tape, &vars).unwrap();
        tape.value(out).data()[0]
    };

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] = input.data()[i] + H;
            let up = eval(&xs);
            xs[k].data_mut()[i] = input.data()[i] - H;
            let down = eval(&xs);
            let numeric = (up - down) / (2.0 * H);
            worst = worst.max(rel_err(analytic[k].data()[i], numeric));
        }
    }
    worst
}

/// Sum of `out * r` for a fixed random weighting `r`.
pub fn weighted(tape: &mut Tape, out: Var, r: &Tensor) -> msnn::Result<Var> {
    let m = tape.mul_const(out, r.clone())?;
    Ok(tape.sum(m))
}

/// Values at least `gap` away from zero, so `+-H` never crosses a ReLU kink.
pub fn away_from_zero(shape: &[usize], gap: f64, rng: &mut rng::Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(gap..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

pub fn worst(errors: &[f64]) -> f64 {
    errors.iter().cloned().fold(0.0, f64::max)
}

/// Every op family with its per-case errors.
pub fn gradient_suite() -> Vec<(&'static str, Vec<f64>)> {
    vec![
        ("conv2d", conv2d_errors()),
        ("linear", linear_errors()),
        ("maxpool2", maxpool_errors()),
        ("batchnorm", batchnorm_errors()),
        ("relu", relu_errors()),
        ("softmax_ce", softmax_cross_entropy_errors()),
        ("clip_max", clip_errors()),
        ("add/scale/flatten", elementwise_helper_errors()),
        ("network", full_network_errors()),
    ]
}

pub fn conv2d_errors() -> Vec<f64> {
    let errs: Vec<f64> = (0..CASES_PER_OP)
        .map(|case| {
            let mut rng = rng::stream(case, 11);
            let c = rng.random_range(1..3);
            let f = rng.random_range(1..4);
            let k = rng.random_range(1..4);
            let h = k + rng.random_range(0..3);
            let x = random(&[2, c, h, h + 1], &mut rng);
            let w = random(&[f, c, k, k], &mut rng);
            let b = random(&[f], &mut rng);
            let r = random(&[2, f, h - k + 1, h - k + 2], &mut rng);
            check(&[x, w, b], &|t, v| {
                let y = t.conv2d(v[0], v[1], v[2])?;
                weighted(t, y, &r)
            })
        })
        .collect();
    errs
}

pub fn linear_errors() -> Vec<f64> {
    let errs: Vec<f64> = (0..CASES_PER_OP)
        .map(|case| {
            let mut rng = rng::stream(case, 12);
            let n = rng.random_range(1..5);
            let d = rng.random_range(1..8);
            let m = rng.random_range(1..6);
            let x = random(&[n, d], &mut rng);
            let w = random(&[d, m], &mut rng);
            let b = random(&[m], &mut rng);
            let r = random(&[n, m], &mut rng);
            check(&[x, w, b], &|t, v| {
                let y = t.linear(v[0], v[1], v[2])?;
                weighted(t, y, &r)
            })
        })
        .collect();
    errs
}

pub fn maxpool_errors() -> Vec<f64> {
    let errs: Vec<f64> = (0..CASES_PER_OP)
        .map(|case| {
            let mut rng = rng::stream(case, 13);
            let h = 2 * rng.random_range(1..4);
            // A shuffled ladder keeps every window free of near ties.
            let len = 2 * 2 * h * h;
            let mut ladder: Vec<f64> = (0..len).map(|i| i as f64 * 0.01).collect();
            for i in (1..len).rev() {
                ladder.swap(i, rng.random_range(0..=i));
            }
            let x = Tensor::new(vec![2, 2, h, h], ladder).unwrap();
            let r = random(&[2, 2, h / 2, h / 2], &mut rng);
            check(&[x], &|t, v| {
                let y = t.maxpool2(v[0])?;
                weighted(t, y, &r)
            })
        })
        .collect();
    errs
}

pub fn batchnorm_errors() -> Vec<f64> {
    let mut errs = Vec::new();
    for case in 0..CASES_PER_OP {
        let mut rng = rng::stream(case, 14);
        let c = rng.random_range(1..4);
        let x = random(&[4, c, 3, 2], &mut rng);
        let gamma = random(&[c], &mut rng);
        let beta = random(&[c], &mut rng);
        let r = random(&[4, c, 3, 2], &mut rng);
        errs.push(check(&[x.clone(), gamma.clone(), beta.clone()], &|t, v| {
            let y = t.batchnorm(v[0], v[1], v[2], BnMode::Batch)?;
            weighted(t, y.out, &r)
        }));
        let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
        let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.1..2.0)).collect();
        errs.push(check(&[x, gamma, beta], &|t, v| {
            let mode = BnMode::Running {
                mean: mean.clone(),
                var: var.clone(),
            };
            let y = t.batchnorm(v[0], v[1], v[2], mode)?;
            weighted(t, y.out, &r)
        }));
    }
    // Dense inputs `[N, D]`.
    for case in 0..CASES_PER_OP {
        let mut rng = rng::stream(case, 15);
        let x = random(&[5, 3], &mut rng);
        let gamma = random(&[3], &mut rng);
        let beta = random(&[3], &mut rng);
        let r = random(&[5, 3], &mut rng);
        errs.push(check(&[x, gamma, beta], &|t, v| {
            let y = t.batchnorm(v[0], v[1], v[2], BnMode::Batch)?;
            weighted(t, y.out, &r)
        }));
    }
    errs
}

pub fn relu_errors() -> Vec<f64> {
    let errs: Vec<f64> = (0..CASES_PER_OP)
        .map(|case| {
            let mut rng = rng::stream(case, 16);
            let x = away_from_zero(&[3, 7], 1e-3, &mut rng);
            let r = random(&[3, 7], &mut rng);
            check(&[x], &|t, v| {
                let y = t.relu(v[0]);
                weighted(t, y, &r)
            })
        })
        .collect();
    errs
}

pub fn softmax_cross_entropy_errors() -> Vec<f64> {
    let errs: Vec<f64> = (0..CASES_PER_OP)
        .map(|case| {
            let mut rng = rng::stream(case, 17);
            let n = rng.random_range(1..6);
            let k = rng.random_range(2..11);
            let logits = Tensor::from_fn(&[n, k], |_| rng.random_range(-4.0..4.0));
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            check(&[logits], &|t, v| t.softmax_cross_entropy(v[0], &labels))
        })
        .collect();
    errs
}

pub fn clip_errors() -> Vec<f64> {
    let errs: Vec<f64> = (0..CASES_PER_OP)
        .map(|case| {
            let mut rng = rng::stream(case, 18);
            let thr = rng.random_range(0.2..0.8);
            // Keep inputs clear of the threshold.
            let x = Tensor::from_fn(&[4, 6], |_| {
                let d = rng.random_range(1e-3..1.0);
                if rng.random::<bool>() {
                    thr + d
                } else {
                    thr - d
                }
            });
            let r = random(&[4, 6], &mut rng);
            check(&[x, Tensor::new(vec![1], vec![thr]).unwrap()], &|t, v| {
                let y = t.clip_max(v[0], v[1])?;
                weighted(t, y, &r)
            })
        })
        .collect();
    errs
}

pub fn elementwise_helper_errors() -> Vec<f64> {
    let errs: Vec<f64> = (0..CASES_PER_OP)
        .map(|case| {
            let mut rng = rng::stream(case, 19);
            let a = random(&[2, 3, 2, 2], &mut rng);
            let b = random(&[2, 3, 2, 2], &mut rng);
            let offset = random(&[2, 3, 2, 2], &mut rng);
            let r = random(&[2, 12], &mut rng);
            check(&[a, b], &|t, v| {
                let s = t.add(v[0], v[1])?;
                let s = t.add_const(s, &offset)?;
                let s = t.scale(s, 1.7);
                let f = t.flatten(s)?;
                weighted(t, f, &r)
            })
        })
        .collect();
    errs
}

pub fn tiny_config() -> NetworkConfig {
    NetworkConfig {
        conv1_filters: 3,
        conv2_filters: 4,
        fc1_units: 6,
        bn_output: true,
        ..NetworkConfig::default()
    }
}

/// End-to-end: cross-entropy of the whole network, clipping on, batch BN.
pub fn full_network_errors() -> Vec<f64> {
    let mut state = model::build_network(&tiny_config(), 3).unwrap();
    let mut r = rng::stream(9, 20);
    let batch = Tensor::from_fn(&[3, 3, 32, 32], |_| r.random_range(0.0..1.0));
    let labels = [1, 4, 7];
    state.clip.enabled = true;
    state.clip.initialized = true;
    state.clip.y_thr = [0.9, 1.1, 0.8];
    let noise = NoiseConfig::none();
    let opts = ForwardOptions {
        observe: false,
        ..ForwardOptions::train(&noise)
    };

    let loss_at = |s: &model::NetworkState| {
        let mut pass = model::forward(s, &batch, &opts, &mut rng::stream(0, 0)).unwrap();
        let l = pass.cross_entropy(&labels).unwrap();
        pass.tape.value(l).data()[0]
    };
    let mut pass = model::forward(&state, &batch, &opts, &mut rng::stream(0, 0)).unwrap();
    let l = pass.cross_entropy(&labels).unwrap();
    let grads = pass.gradients(l).unwrap();

    let names = state.param_names();
    let mut pick = rng::stream(1, 21);
    let mut errs = Vec::new();
    for (g, name) in names.iter().enumerate() {
        let len = grads.0[g].len();
        let coords: Vec<usize> = if len <= 24 {
            (0..len).collect()
        } else {
            (0..24).map(|_| pick.random_range(0..len)).collect()
        };
        for i in coords {
            let base = state.params()[g][i];
            let mut s = state.clone();
            s.params_mut()[g][i] = base + H;
            let up = loss_at(&s);
            s.params_mut()[g][i] = base - H;
            let down = loss_at(&s);
            let numeric = (up - down) / (2.0 * H);
            let e = rel_err(grads.0[g][i], numeric);
            if e >= TOL {
                eprintln!("{name}[{i}]: analytic {} numeric {numeric}", grads.0[g][i]);
            }
            errs.push(e);
        }
    }
    // Some threshold must actually clip, or its gradient is trivially zero.
    if !grads.0[state.threshold_group()].iter().any(|g| g.abs() > 1e-6) {
        errs.push(f64::INFINITY);
    }
    errs
}

