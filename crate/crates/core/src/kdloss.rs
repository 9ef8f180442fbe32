//! Distillation losses: task cross-entropy, soft labels, sample-relation
//! (intra) and layer-relation (inter) terms, and their weighted combination.
//!
//! Every function is generic over the element type so gradients can be
//! checked in `f64`. Teacher inputs are always cut from the tape first.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::tensor::{Element, Graph, Tensor, Var};

const HUBER_DELTA: f64 = 1.0;

/// Which distillation terms are active. Missing fields default to the
/// intra + inter combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KdTerms {
    pub soft: bool,
    pub intra: bool,
    pub inter: bool,
}

impl KdTerms {
    pub const NONE: KdTerms = KdTerms {
        soft: false,
        intra: false,
        inter: false,
    };
    pub const II: KdTerms = KdTerms {
        soft: false,
        intra: true,
        inter: true,
    };

    pub fn any(&self) -> bool {
        self.soft || self.intra || self.inter
    }
}

impl Default for KdTerms {
    fn default() -> Self {
        Self::II
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KdConfig {
    pub lambda0: f64,
    pub decay_factor: f64,
    pub decay_interval: usize,
    pub kd_grad_clip: f64,
    pub svd_rank: usize,
    pub temperature: f64,
    pub terms: KdTerms,
}

impl KdConfig {
    /// Intra + inter terms, λ0 = 0.4, halving every 30% of `total_epochs`.
    pub fn ii_kd(total_epochs: usize) -> Self {
        Self {
            lambda0: 0.4,
            decay_factor: 0.5,
            decay_interval: default_decay_interval(total_epochs),
            kd_grad_clip: 1.0,
            svd_rank: 4,
            temperature: 1.0,
            terms: KdTerms::II,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(m.to_string()));
        if !(self.lambda0 >= 0.0 && self.lambda0.is_finite()) {
            return bad("lambda0 must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.decay_factor) {
            return bad("decay_factor must lie in [0, 1]");
        }
        if self.decay_interval == 0 {
            return bad("decay_interval must be positive");
        }
        if self.kd_grad_clip.is_nan() || self.kd_grad_clip <= 0.0 {
            return bad("kd_grad_clip must be positive");
        }
        if self.svd_rank == 0 {
            return bad("svd_rank must be at least 1");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        Ok(())
    }

    /// `λ0 · decay^⌊epoch / interval⌋`.
    pub fn lambda(&self, epoch: usize) -> f64 {
        self.lambda0 * self.decay_factor.powi((epoch / self.decay_interval) as i32)
    }
}

pub fn default_decay_interval(total_epochs: usize) -> usize {
    ((0.3 * total_epochs as f64).ceil() as usize).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub task: f64,
    pub kd_soft: f64,
    pub kd_intra: f64,
    pub kd_inter: f64,
    pub total: f64,
    pub lambda_used: f64,
}

/// `total = task + λ(epoch)·(soft + intra + inter)`; disabled terms are
/// passed as zero.
pub fn ii_kd_total(task: f64, soft: f64, intra: f64, inter: f64, cfg: &KdConfig, epoch: usize) -> LossReport {
    let lambda = cfg.lambda(epoch);
    LossReport {
        task,
        kd_soft: soft,
        kd_intra: intra,
        kd_inter: inter,
        total: task + lambda * (soft + intra + inter),
        lambda_used: lambda,
    }
}

/// Mean cross-entropy of `logits` (N×C) against integer labels.
pub fn task_loss<E: Element>(g: &mut Graph<E>, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::dim(format!(
            "logits {s:?} against {} labels",
            labels.len()
        )));
    }
    let c = s[1];
    let mut onehot = Tensor::zeros(&[s[0], c]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(Error::Validation(format!("label {l} outside {c} classes")));
        }
        onehot.data_mut()[i * c + l] = E::one();
    }
    g.softmax_cross_entropy(logits, &onehot)
}

fn softmax_rows<E: Element>(logits: &Tensor<E>, temperature: E) -> Tensor<E> {
    let c = logits.shape()[1];
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks(c) {
        let scaled: Vec<E> = row.iter().map(|&v| v / temperature).collect();
        let mx = scaled.iter().copied().fold(E::neg_infinity(), E::max);
        let z: E = scaled.iter().map(|&v| (v - mx).exp()).sum();
        out.extend(scaled.iter().map(|&v| (v - mx).exp() / z));
    }
    Tensor::new(logits.shape().to_vec(), out).unwrap()
}

/// Soft-label loss at temperature `T`: mean over rows of
/// `KL(softmax(t/T) ‖ softmax(s/T))`, which is the cross-entropy
/// `H(p_t, p_s)` minus the teacher entropy. The offset is constant in the
/// student, so gradients equal those of the cross-entropy, and the loss is
/// zero when the logits agree.
pub fn soft_label_loss<E: Element>(g: &mut Graph<E>, teacher: Var, student: Var, temperature: E) -> Result<Var> {
    let (ts, ss) = (g.shape(teacher).to_vec(), g.shape(student).to_vec());
    if ts != ss || ts.len() != 2 {
        return Err(Error::dim(format!(
            "soft labels: teacher {ts:?} vs student {ss:?}"
        )));
    }
    let probs = softmax_rows(g.value(teacher), temperature);
    let entropy = probs
        .data()
        .iter()
        .filter(|&&p| p > E::zero())
        .map(|&p| -p * p.ln())
        .sum::<E>()
        / E::from_usize(ts[0]).unwrap();
    let scaled = g.div_const(student, temperature);
    let ce = g.softmax_cross_entropy(scaled, &probs)?;
    Ok(g.shift(ce, -entropy))
}

fn pooled<E: Element>(g: &mut Graph<E>, tap: Var) -> Result<Var> {
    match g.shape(tap).len() {
        2 => Ok(tap),
        4 => g.global_avg_pool(tap),
        r => Err(Error::dim(format!("tap of rank {r}"))),
    }
}

fn relation_matrix<E: Element>(g: &mut Graph<E>, tap: Var) -> Result<Var> {
    let v = pooled(g, tap)?;
    let d = g.pairwise_distance(v)?;
    let m = g.mean_nonzero(d);
    g.div_scalar(d, m)
}

/// Sample-relation loss over the paired taps.
///
/// Each tap is pooled to one vector per sample; the N×N distance matrix is
/// divided by its mean nonzero entry; teacher and student matrices are
/// compared with a Huber penalty averaged over off-diagonal entries, then
/// averaged over taps.
pub fn intra_loss<E: Element>(g: &mut Graph<E>, teacher: &[Var], student: &[Var]) -> Result<Var> {
    check_pairs(teacher, student)?;
    let mut total: Option<Var> = None;
    for (&t, &s) in teacher.iter().zip(student) {
        let n = g.shape(s)[0];
        if n < 2 || g.shape(t)[0] != n {
            return Err(Error::Validation(format!(
                "relation loss needs matching batches of at least 2 (teacher {}, student {n})",
                g.shape(t)[0]
            )));
        }
        let t = g.detach(t);
        let phi_t = relation_matrix(g, t)?;
        let phi_s = relation_matrix(g, s)?;
        let diff = g.sub(phi_s, phi_t)?;
        let h = g.huber(diff, E::from_f64_lossy(HUBER_DELTA));
        // diagonals are zero on both sides and contribute nothing
        let sum = g.sum(h);
        let term = g.div_const(sum, E::from_usize(n * (n - 1)).unwrap());
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    let total = total.unwrap();
    Ok(g.div_const(total, E::from_usize(teacher.len()).unwrap()))
}

fn check_pairs(teacher: &[Var], student: &[Var]) -> Result<()> {
    if teacher.len() != student.len() || teacher.is_empty() {
        return Err(Error::Validation(format!(
            "{} teacher taps against {} student taps",
            teacher.len(),
            student.len()
        )));
    }
    Ok(())
}

/// Singular directions held fixed while differentiating the inter loss.
#[derive(Debug, Clone)]
pub struct InterBases<E> {
    pub rank: usize,
    /// Per consecutive tap pair, per sample.
    pub pairs: Vec<Vec<SampleBases<E>>>,
}

#[derive(Debug, Clone)]
pub struct SampleBases<E> {
    pub teacher: (Tensor<E>, Tensor<E>),
    pub student: (Tensor<E>, Tensor<E>),
    /// Kernel bandwidth shared by both networks.
    pub bandwidth: E,
}

/// Rows are spatial positions, columns channels.
fn sample_matrix<E: Element>(t: &Tensor<E>, sample: usize, factor: usize) -> Matrix {
    let s = t.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let (oh, ow) = (h / factor, w / factor);
    let mut m = Matrix::zeros(oh * ow, c);
    let inv = 1.0 / (factor * factor) as f64;
    let base = sample * c * h * w;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let r = (y / factor) * ow + x / factor;
                let v = m.get(r, ch) + t.data()[base + (ch * h + y) * w + x].as_f64() * inv;
                m.set(r, ch, v);
            }
        }
    }
    m
}

fn top_right_vectors(m: &Matrix, k: usize) -> Matrix {
    let d = linalg::svd(m);
    let mut v = Matrix::zeros(m.cols, k);
    for j in 0..k {
        for r in 0..m.cols {
            v.set(r, j, d.v.get(r, j));
        }
    }
    v
}

fn project(m: &Matrix, v: &Matrix) -> Matrix {
    let mut p = Matrix::zeros(m.rows, v.cols);
    for i in 0..m.rows {
        for j in 0..v.cols {
            p.set(i, j, (0..m.cols).map(|c| m.get(i, c) * v.get(c, j)).sum());
        }
    }
    for j in 0..p.cols {
        let n = p.column(j).iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            for i in 0..p.rows {
                p.set(i, j, p.get(i, j) / n);
            }
        }
    }
    p
}

fn flip_column(v: &mut Matrix, j: usize) {
    for r in 0..v.rows {
        v.set(r, j, -v.get(r, j));
    }
}

/// Flip each direction so its projection's largest-magnitude entry is
/// positive.
fn canonical_signs(m: &Matrix, v: &mut Matrix) {
    let p = project(m, v);
    for j in 0..v.cols {
        let col = p.column(j);
        let peak = col
            .iter()
            .copied()
            .fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if peak < 0.0 {
            flip_column(v, j);
        }
    }
}

/// Flip each student direction so its projection has a non-negative dot
/// product with the teacher's.
fn align_signs(m: &Matrix, v: &mut Matrix, reference: &Matrix) {
    let p = project(m, v);
    for j in 0..v.cols {
        let dot: f64 = p.column(j).iter().zip(reference.column(j)).map(|(a, b)| a * b).sum();
        if dot < 0.0 {
            flip_column(v, j);
        }
    }
}

fn to_tensor<E: Element>(m: &Matrix) -> Tensor<E> {
    Tensor::new(
        vec![m.rows, m.cols],
        m.data.iter().map(|&v| E::from_f64_lossy(v)).collect(),
    )
    .unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn pool_factor(shallow: &[usize], deep: &[usize]) -> Result<usize> {
    if shallow.len() != 4 || deep.len() != 4 || shallow[0] != deep[0] {
        return Err(Error::dim(format!(
            "layer relation needs N×C×H×W taps, got {shallow:?} and {deep:?}"
        )));
    }
    let f = shallow[2] / deep[2].max(1);
    if f == 0 || shallow[2] != deep[2] * f || shallow[3] != deep[3] * f {
        return Err(Error::dim(format!(
            "spatial size {:?} is not an integer multiple of {:?}",
            &shallow[2..],
            &deep[2..]
        )));
    }
    Ok(f)
}

/// Top-`k` right singular vectors of every sample's spatial×channel matrix
/// for each consecutive tap pair, with signs fixed and the kernel bandwidth
/// taken as the median distance among the teacher's projected directions.
/// `k` is reduced, with a warning, to the smallest matrix dimension.
pub fn inter_bases<E: Element>(g: &Graph<E>, teacher: &[Var], student: &[Var], k: usize) -> Result<InterBases<E>> {
    check_pairs(teacher, student)?;
    if teacher.len() < 2 {
        return Err(Error::Validation("layer relation needs at least two taps".into()));
    }
    if k == 0 {
        return Err(Error::Validation("rank must be at least 1".into()));
    }
    let mut rank = k;
    let mut factors = Vec::new();
    for j in 0..teacher.len() - 1 {
        let ft = pool_factor(g.shape(teacher[j]), g.shape(teacher[j + 1]))?;
        let fs = pool_factor(g.shape(student[j]), g.shape(student[j + 1]))?;
        for (net, f) in [(teacher, ft), (student, fs)] {
            let (a, b) = (g.shape(net[j]), g.shape(net[j + 1]));
            let hw = b[2] * b[3];
            rank = rank.min(hw).min(a[1]).min(b[1]);
            let _ = f;
        }
        factors.push((ft, fs));
    }
    if rank < k {
        warn!("layer-relation rank reduced from {k} to {rank}");
    }
    let n = g.shape(teacher[0])[0];
    if g.shape(student[0])[0] != n {
        return Err(Error::dim("teacher and student batch sizes differ"));
    }
    let mut pairs = Vec::new();
    for (j, &(ft, fs)) in factors.iter().enumerate() {
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let ta = sample_matrix(g.value(teacher[j]), i, ft);
            let tb = sample_matrix(g.value(teacher[j + 1]), i, 1);
            let sa = sample_matrix(g.value(student[j]), i, fs);
            let sb = sample_matrix(g.value(student[j + 1]), i, 1);
            let mut vta = top_right_vectors(&ta, rank);
            let mut vtb = top_right_vectors(&tb, rank);
            canonical_signs(&ta, &mut vta);
            canonical_signs(&tb, &mut vtb);
            let (pta, ptb) = (project(&ta, &vta), project(&tb, &vtb));
            let mut vsa = top_right_vectors(&sa, rank);
            let mut vsb = top_right_vectors(&sb, rank);
            if sa.rows == ta.rows {
                align_signs(&sa, &mut vsa, &pta);
                align_signs(&sb, &mut vsb, &ptb);
            } else {
                canonical_signs(&sa, &mut vsa);
                canonical_signs(&sb, &mut vsb);
            }
            let cols: Vec<Vec<f64>> = (0..rank)
                .map(|c| pta.column(c))
                .chain((0..rank).map(|c| ptb.column(c)))
                .collect();
            let mut dists = Vec::new();
            for a in 0..cols.len() {
                for b in (a + 1)..cols.len() {
                    let d2: f64 = cols[a].iter().zip(&cols[b]).map(|(x, y)| (x - y).powi(2)).sum();
                    dists.push(d2.sqrt());
                }
            }
            let h = median(dists);
            samples.push(SampleBases {
                teacher: (to_tensor(&vta), to_tensor(&vtb)),
                student: (to_tensor(&vsa), to_tensor(&vsb)),
                bandwidth: E::from_f64_lossy(if h > 1e-12 { h } else { 1.0 }),
            });
        }
        pairs.push(samples);
    }
    Ok(InterBases { rank, pairs })
}

/// Per-sample k×k similarity `exp(-‖p_a - p_b‖² / (2h²))` between the
/// normalized projections of the shallow and the deep map, averaged over the
/// batch.
fn similarity<E: Element>(
    g: &mut Graph<E>,
    shallow: Var,
    deep: Var,
    samples: &[SampleBases<E>],
    pick: impl Fn(&SampleBases<E>) -> &(Tensor<E>, Tensor<E>),
) -> Result<Var> {
    let f = pool_factor(g.shape(shallow), g.shape(deep))?;
    let pooled = g.avg_pool(shallow, f)?;
    let mut acc: Option<Var> = None;
    for (i, sb) in samples.iter().enumerate() {
        let (va, vb) = pick(sb);
        let mut proj = Vec::with_capacity(2);
        for (x, v) in [(pooled, va), (deep, vb)] {
            let xi = g.select(x, i)?;
            let s = g.shape(xi).to_vec();
            let flat = g.reshape(xi, vec![s[0], s[1] * s[2]])?;
            let m = g.transpose(flat)?;
            let vc = g.constant(v.clone());
            let p = g.matmul(m, vc)?;
            proj.push(g.normalize_columns(p)?);
        }
        let d2 = g.column_sq_distance(proj[0], proj[1])?;
        let h = sb.bandwidth;
        let scaled = g.scale(d2, -E::one() / (E::from_f64_lossy(2.0) * h * h));
        let phi = g.exp(scaled);
        acc = Some(match acc {
            None => phi,
            Some(a) => g.add(a, phi)?,
        });
    }
    Ok(g.div_const(acc.unwrap(), E::from_usize(samples.len()).unwrap()))
}

/// Layer-relation loss with the singular directions in `bases` held fixed:
/// squared Frobenius distance between teacher and student batch-averaged
/// similarity matrices, averaged over consecutive tap pairs.
pub fn inter_loss_with<E: Element>(
    g: &mut Graph<E>,
    teacher: &[Var],
    student: &[Var],
    bases: &InterBases<E>,
) -> Result<Var> {
    check_pairs(teacher, student)?;
    if bases.pairs.len() + 1 != teacher.len() {
        return Err(Error::Usage("bases were computed for a different tap list".into()));
    }
    let teacher: Vec<Var> = teacher.iter().map(|&t| g.detach(t)).collect();
    let mut total: Option<Var> = None;
    for (j, samples) in bases.pairs.iter().enumerate() {
        let phi_t = similarity(g, teacher[j], teacher[j + 1], samples, |s| &s.teacher)?;
        let phi_s = similarity(g, student[j], student[j + 1], samples, |s| &s.student)?;
        let diff = g.sub(phi_s, phi_t)?;
        let sq = g.square(diff);
        let term = g.sum(sq);
        total = Some(match total {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    Ok(g.div_const(total.unwrap(), E::from_usize(bases.pairs.len()).unwrap()))
}

/// [`inter_loss_with`] using bases computed from the current values.
pub fn inter_loss<E: Element>(g: &mut Graph<E>, teacher: &[Var], student: &[Var], k: usize) -> Result<Var> {
    let bases = inter_bases(g, teacher, student, k)?;
    inter_loss_with(g, teacher, student, &bases)
}

/// Scale each parameter's gradient so its L2 norm is at most `max_norm`.
pub fn clip_kd_gradients(grads: &mut [Option<Vec<f32>>], max_norm: f64) {
    for g in grads.iter_mut().flatten() {
        let norm = g.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        if norm > max_norm {
            let s = (max_norm / norm) as f32;
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn lambda_schedule() {
        let cfg = KdConfig::ii_kd(100);
        assert_eq!(cfg.decay_interval, 30);
        assert_eq!(cfg.lambda(0), 0.4);
        assert_eq!(cfg.lambda(29), 0.4);
        assert_eq!(cfg.lambda(30), 0.2);
        assert_eq!(cfg.lambda(60), 0.1);
        let r = ii_kd_total(1.0, 0.0, 0.5, 0.5, &cfg, 0);
        assert!((r.total - 1.4).abs() < 1e-12);
        let r = ii_kd_total(1.0, 0.0, 0.5, 0.5, &cfg, 30);
        assert!((r.total - 1.2).abs() < 1e-12);
        assert_eq!(ii_kd_total(0.7, 0.0, 0.0, 0.0, &cfg, 3).total, 0.7);
    }

    #[test]
    fn soft_label_fixed_point_and_formula() {
        let t = rand_t(&[3, 4], 1);
        let mut g = Graph::<f64>::new();
        let tv = g.constant(t.clone());
        let sv = g.param(t.clone());
        let l = soft_label_loss(&mut g, tv, sv, 1.0).unwrap();
        assert!(g.value(l).data()[0].abs() < 1e-12);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(sv).unwrap().iter().all(|v| v.abs() < 1e-12));

        let mut g = Graph::<f64>::new();
        let tv = g.constant(Tensor::new(vec![1, 4], vec![0.0; 4]).unwrap());
        let sv = g.param(Tensor::new(vec![1, 4], vec![10.0, 0.0, 0.0, 0.0]).unwrap());
        let l = soft_label_loss(&mut g, tv, sv, 1.0).unwrap();
        let z = 10f64.exp() + 3.0;
        let ce: f64 = [10.0f64, 0.0, 0.0, 0.0].iter().map(|v| -(v.exp() / z).ln()).sum::<f64>() / 4.0;
        let want = ce - 4f64.ln();
        assert!((g.value(l).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn soft_label_high_temperature_is_near_uniform() {
        let mut g = Graph::<f64>::new();
        let tv = g.constant(rand_t(&[2, 5], 3));
        let sv = g.param(rand_t(&[2, 5], 4));
        let l = soft_label_loss(&mut g, tv, sv, 100.0).unwrap();
        assert!(g.value(l).data()[0].abs() < 1e-2);
    }

    #[test]
    fn intra_zero_and_scale_invariance() {
        let t = rand_t(&[4, 3, 2, 2], 5);
        let mut g = Graph::<f64>::new();
        let tv = g.constant(t.clone());
        let mut doubled = t.clone();
        doubled.data_mut().iter_mut().for_each(|v| *v *= 2.0);
        let sv = g.param(doubled);
        let l = intra_loss(&mut g, &[tv], &[sv]).unwrap();
        assert!(g.value(l).data()[0].abs() < 1e-12);
        let one = g.constant(rand_t(&[1, 3], 1));
        assert!(matches!(intra_loss(&mut g, &[one], &[one]), Err(Error::Validation(_))));
    }

    #[test]
    fn intra_matches_direct_formula() {
        let t = rand_t(&[3, 4], 6);
        let s = rand_t(&[3, 4], 7);
        let mut g = Graph::<f64>::new();
        let tv = g.constant(t.clone());
        let sv = g.param(s.clone());
        let l = intra_loss(&mut g, &[tv], &[sv]).unwrap();
        let phi = |x: &Tensor<f64>| {
            let mut d = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    d[i][j] = (0..4)
                        .map(|k| (x.data()[i * 4 + k] - x.data()[j * 4 + k]).powi(2))
                        .sum::<f64>()
                        .sqrt();
                }
            }
            let mean = (d[0][1] + d[0][2] + d[1][2]) / 3.0;
            d.map(|r| r.map(|v| v / mean))
        };
        let (pt, ps) = (phi(&t), phi(&s));
        let mut want = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    let a: f64 = (ps[i][j] - pt[i][j]).abs();
                    want += if a <= 1.0 { 0.5 * a * a } else { a - 0.5 };
                }
            }
        }
        want /= 6.0;
        assert!((g.value(l).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn inter_zero_for_identical_taps() {
        let a = rand_t(&[2, 3, 4, 4], 8);
        let b = rand_t(&[2, 5, 2, 2], 9);
        let mut g = Graph::<f64>::new();
        let (ta, tb) = (g.constant(a.clone()), g.constant(b.clone()));
        let (sa, sb) = (g.param(a), g.param(b));
        let l = inter_loss(&mut g, &[ta, tb], &[sa, sb], 2).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(sa).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn inter_rank_is_truncated() {
        let a = rand_t(&[2, 2, 2, 2], 10);
        let b = rand_t(&[2, 3, 1, 1], 11);
        let mut g = Graph::<f64>::new();
        let (ta, tb) = (g.constant(a.clone()), g.constant(b.clone()));
        let bases = inter_bases(&g, &[ta, tb], &[ta, tb], 4).unwrap();
        assert_eq!(bases.rank, 1);
        assert!(inter_bases(&g, &[ta], &[ta], 1).is_err());
    }

    #[test]
    fn clipping() {
        let mut g = vec![Some(vec![0.3f32, 0.4]), Some(vec![3.0, 4.0]), None];
        clip_kd_gradients(&mut g, 1.0);
        assert_eq!(g[0].as_ref().unwrap(), &[0.3, 0.4]);
        let c = g[1].as_ref().unwrap();
        assert!((c[0] - 0.6).abs() < 1e-7 && (c[1] - 0.8).abs() < 1e-7);
        let mut h = vec![Some(vec![30.0f32, 40.0])];
        clip_kd_gradients(&mut h, f64::INFINITY);
        assert_eq!(h[0].as_ref().unwrap(), &[30.0, 40.0]);
    }
}
