#![allow(dead_code)]

use dfkd::kdloss::{self, inter_bases, inter_loss_with};
use dfkd::tensor::gradcheck::check;
use dfkd::tensor::{BatchNormMode, Graph, Tensor, Var};
use dfkd::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-3;
const EPS: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduce `y` to a scalar with fixed random weights so every output element
/// receives a distinct upstream gradient.
fn weighted(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(shape.iter().product::<usize>() as u64);
    let w = rand_tensor(&mut rng, &shape);
    let p = g.mul_const(y, &w)?;
    Ok(g.sum(p))
}

/// Named worst-case relative errors collected by one group of checks.
pub type Cases = Vec<(&'static str, f64)>;

fn record<F>(out: &mut Cases, name: &'static str, inputs: &[Tensor<f64>], f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let r = check(inputs, EPS, f).unwrap();
    out.push((name, r.max_error()));
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

pub fn elementwise_ops() -> Cases {
    let mut out = Cases::new();
    let mut r = rng();
    let a = rand_tensor(&mut r, &[3, 4]);
    let b = rand_tensor(&mut r, &[3, 4]);
    let c = rand_tensor(&mut r, &[3, 4]);
    let two = vec![a.clone(), b.clone()];
    record(&mut out, "add", &two, |g, v| {
        let y = g.add(v[0], v[1])?;
        weighted(g, y)
    });
    record(&mut out, "sub", &two, |g, v| {
        let y = g.sub(v[0], v[1])?;
        weighted(g, y)
    });
    record(&mut out, "mul", &two, |g, v| {
        let y = g.mul(v[0], v[1])?;
        weighted(g, y)
    });
    let one = vec![a.clone()];
    record(&mut out, "mul_const", &one, |g, v| {
        let y = g.mul_const(v[0], &c)?;
        weighted(g, y)
    });
    record(&mut out, "sub_const", &one, |g, v| {
        let y = g.sub_const(v[0], &c)?;
        weighted(g, y)
    });
    record(&mut out, "scale", &one, |g, v| {
        let y = g.scale(v[0], -1.7);
        weighted(g, y)
    });
    record(&mut out, "div_const", &one, |g, v| {
        let y = g.div_const(v[0], 3.0);
        weighted(g, y)
    });
    record(&mut out, "shift", &one, |g, v| {
        let y = g.shift(v[0], 0.25);
        weighted(g, y)
    });
    record(&mut out, "relu", &one, |g, v| {
        let y = g.relu(v[0]);
        weighted(g, y)
    });
    record(&mut out, "tanh", &one, |g, v| {
        let y = g.tanh(v[0]);
        weighted(g, y)
    });
    record(&mut out, "clamp", &one, |g, v| {
        let y = g.clamp(v[0], -0.5, 0.5);
        weighted(g, y)
    });
    record(&mut out, "exp", &one, |g, v| {
        let y = g.exp(v[0]);
        weighted(g, y)
    });
    record(&mut out, "square", &one, |g, v| {
        let y = g.square(v[0]);
        weighted(g, y)
    });
    record(&mut out, "huber", &one, |g, v| {
        let s = g.scale(v[0], 2.0);
        let y = g.huber(s, 1.0);
        weighted(g, y)
    });
    record(&mut out, "mean", &one, |g, v| {
        let y = g.square(v[0]);
        Ok(g.mean(y))
    });
    record(&mut out, "mean_nonzero", &one, |g, v| {
        let y = g.relu(v[0]);
        let y = g.square(y);
        Ok(g.mean_nonzero(y))
    });
    let s = vec![a, Tensor::new(vec![1], vec![1.3]).unwrap()];
    record(&mut out, "div_scalar", &s, |g, v| {
        let y = g.div_scalar(v[0], v[1])?;
        weighted(g, y)
    });
    out
}

pub fn linear_ops() -> Cases {
    let mut out = Cases::new();
    let mut r = rng();
    let a = rand_tensor(&mut r, &[3, 5]);
    let b = rand_tensor(&mut r, &[5, 2]);
    let bias = rand_tensor(&mut r, &[2]);
    record(&mut out, "matmul", &[a.clone(), b.clone()], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        weighted(g, y)
    });
    record(&mut out, "add_bias", &[a.clone(), b, bias], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        let y = g.add_bias(y, v[2])?;
        weighted(g, y)
    });
    record(&mut out, "transpose", &[a.clone()], |g, v| {
        let y = g.transpose(v[0])?;
        weighted(g, y)
    });
    record(&mut out, "reshape", &[a.clone()], |g, v| {
        let y = g.reshape(v[0], vec![5, 3])?;
        weighted(g, y)
    });
    record(&mut out, "select", &[a], |g, v| {
        let y = g.select(v[0], 1)?;
        weighted(g, y)
    });
    out
}

pub fn conv_and_pooling() -> Cases {
    let mut out = Cases::new();
    let mut r = rng();
    let x = rand_tensor(&mut r, &[2, 3, 6, 6]);
    let k = rand_tensor(&mut r, &[4, 3, 3, 3]);
    let cbias = rand_tensor(&mut r, &[4]);
    record(&mut out, "conv2d pad 1", &[x.clone(), k.clone()], |g, v| {
        let y = g.conv2d(v[0], v[1], 1, 1)?;
        weighted(g, y)
    });
    record(&mut out, "conv2d stride 2", &[x.clone(), k.clone()], |g, v| {
        let y = g.conv2d(v[0], v[1], 2, 0)?;
        weighted(g, y)
    });
    record(&mut out, "conv2d + channel bias", &[x.clone(), k, cbias], |g, v| {
        let y = g.conv2d(v[0], v[1], 1, 1)?;
        let y = g.add_bias(y, v[2])?;
        weighted(g, y)
    });
    record(&mut out, "max_pool2", &[x.clone()], |g, v| {
        let y = g.max_pool2(v[0])?;
        weighted(g, y)
    });
    record(&mut out, "avg_pool", &[x.clone()], |g, v| {
        let y = g.avg_pool(v[0], 3)?;
        weighted(g, y)
    });
    record(&mut out, "global_avg_pool", &[x.clone()], |g, v| {
        let y = g.global_avg_pool(v[0])?;
        weighted(g, y)
    });
    record(&mut out, "flatten", &[x], |g, v| {
        let y = g.flatten(v[0])?;
        weighted(g, y)
    });
    out
}

pub fn batch_norm_modes() -> Cases {
    let mut out = Cases::new();
    let mut r = rng();
    let x = rand_tensor(&mut r, &[4, 3, 2, 2]);
    let gamma = rand_tensor(&mut r, &[3]);
    let beta = rand_tensor(&mut r, &[3]);
    let inputs = [x.clone(), gamma.clone(), beta.clone()];
    record(&mut out, "batch_norm train", &inputs, |g, v| {
        let (y, _) = g.batch_norm(v[0], v[1], v[2], BatchNormMode::Train { eps: 1e-5 })?;
        weighted(g, y)
    });
    let mean = [0.1, -0.2, 0.3];
    let var = [0.5, 1.5, 2.0];
    record(&mut out, "batch_norm eval", &inputs, |g, v| {
        let (y, _) = g.batch_norm(
            v[0],
            v[1],
            v[2],
            BatchNormMode::Eval {
                mean: &mean,
                var: &var,
                eps: 1e-5,
            },
        )?;
        weighted(g, y)
    });
    let flat = rand_tensor(&mut r, &[5, 3]);
    record(&mut out, "batch_norm 2d", &[flat, gamma, beta], |g, v| {
        let (y, _) = g.batch_norm(v[0], v[1], v[2], BatchNormMode::Train { eps: 1e-5 })?;
        weighted(g, y)
    });
    out
}

pub fn losses_and_geometry() -> Cases {
    let mut out = Cases::new();
    let mut r = rng();
    let logits = rand_tensor(&mut r, &[4, 3]);
    let mut t = vec![0.0; 12];
    for (i, p) in [0.2, 0.5, 0.3, 1.0, 0.0, 0.0, 0.1, 0.1, 0.8, 0.0, 0.4, 0.6].iter().enumerate() {
        t[i] = *p;
    }
    let targets = Tensor::new(vec![4, 3], t).unwrap();
    record(&mut out, "softmax_cross_entropy", &[logits], |g, v| g.softmax_cross_entropy(v[0], &targets));
    let x = rand_tensor(&mut r, &[4, 3]);
    record(&mut out, "pairwise_distance", &[x.clone()], |g, v| {
        let y = g.pairwise_distance(v[0])?;
        weighted(g, y)
    });
    record(&mut out, "normalize_columns", &[x.clone()], |g, v| {
        let y = g.normalize_columns(v[0])?;
        weighted(g, y)
    });
    let y = rand_tensor(&mut r, &[4, 2]);
    record(&mut out, "column_sq_distance", &[x, y], |g, v| {
        let d = g.column_sq_distance(v[0], v[1])?;
        weighted(g, d)
    });
    out
}

fn taps(r: &mut ChaCha8Rng, n: usize) -> Vec<Tensor<f64>> {
    vec![
        rand_tensor(r, &[n, 3, 4, 4]),
        rand_tensor(r, &[n, 4, 2, 2]),
        rand_tensor(r, &[n, 5, 1, 1]),
    ]
}

/// Teacher inputs are detached inside every distillation term, so they
/// enter as constants and only the student side is checked.
fn constants(g: &mut Graph<f64>, ts: &[Tensor<f64>]) -> Vec<Var> {
    ts.iter().map(|t| g.constant(t.clone())).collect()
}

pub fn kd_soft_label() -> Cases {
    let mut out = Cases::new();
    let mut r = rng();
    let t = rand_tensor(&mut r, &[4, 3]);
    let s = rand_tensor(&mut r, &[4, 3]);
    record(&mut out, "soft label", &[s], |g, v| {
        let tv = g.constant(t.clone());
        kdloss::soft_label_loss(g, tv, v[0], 2.0)
    });
    out
}

pub fn kd_intra() -> Cases {
    let mut out = Cases::new();
    let mut r = rng();
    let teacher = taps(&mut r, 4);
    let student = taps(&mut r, 4);
    record(&mut out, "intra", &student, |g, v| {
        let t = constants(g, &teacher);
        kdloss::intra_loss(g, &t, v)
    });
    out
}

pub fn kd_inter_with_fixed_directions() -> Cases {
    let mut out = Cases::new();
    let mut r = rng();
    let teacher = taps(&mut r, 3);
    let student = taps(&mut r, 3);
    let bases = {
        let mut g = Graph::<f64>::new();
        let t = constants(&mut g, &teacher);
        let s = constants(&mut g, &student);
        inter_bases(&g, &t, &s, 2).unwrap()
    };
    record(&mut out, "inter", &student, |g, v| {
        let t = constants(g, &teacher);
        inter_loss_with(g, &t, v, &bases)
    });
    out
}

/// Every group, in a fixed order.
pub fn all() -> Vec<(&'static str, Cases)> {
    vec![
        ("elementwise", elementwise_ops()),
        ("linear", linear_ops()),
        ("conv and pooling", conv_and_pooling()),
        ("batch norm", batch_norm_modes()),
        ("losses and geometry", losses_and_geometry()),
        ("soft label", kd_soft_label()),
        ("intra", kd_intra()),
        ("inter", kd_inter_with_fixed_directions()),
    ]
}
