//! The fifteen image operators and policy application.
//!
//! Images are `C×H×W` tensors with values in `[0, 1]`. Operator strengths
//! are given on a 0..=9 magnitude grid and mapped linearly onto parameter
//! ranges expressed for 32×32 images; pixel quantities scale with the actual
//! image side.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_MAGNITUDE: u8 = 9;
pub const PROBABILITY_STEPS: u8 = 10;
pub const SLOTS_PER_OPERATOR: usize = 2;
pub const POLICY_LEN: usize = Operator::ALL.len() * SLOTS_PER_OPERATOR;
/// Operators applied to one image at most.
pub const MAX_APPLIED: usize = 2;

const REFERENCE_SIDE: f32 = 32.0;
const CUTOUT_FILL: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Operator {
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    Rotate,
    AutoContrast,
    Invert,
    Equalize,
    Solarize,
    Posterize,
    Contrast,
    Color,
    Brightness,
    Sharpness,
    Cutout,
}

impl Operator {
    pub const ALL: [Operator; 15] = [
        Operator::ShearX,
        Operator::ShearY,
        Operator::TranslateX,
        Operator::TranslateY,
        Operator::Rotate,
        Operator::AutoContrast,
        Operator::Invert,
        Operator::Equalize,
        Operator::Solarize,
        Operator::Posterize,
        Operator::Contrast,
        Operator::Color,
        Operator::Brightness,
        Operator::Sharpness,
        Operator::Cutout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Operator::ShearX => "shear_x",
            Operator::ShearY => "shear_y",
            Operator::TranslateX => "translate_x",
            Operator::TranslateY => "translate_y",
            Operator::Rotate => "rotate",
            Operator::AutoContrast => "auto_contrast",
            Operator::Invert => "invert",
            Operator::Equalize => "equalize",
            Operator::Solarize => "solarize",
            Operator::Posterize => "posterize",
            Operator::Contrast => "contrast",
            Operator::Color => "color",
            Operator::Brightness => "brightness",
            Operator::Sharpness => "sharpness",
            Operator::Cutout => "cutout",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&o| o == self).unwrap()
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Operator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown operator {s:?}")))
    }
}

/// One `(operator, probability, magnitude)` clause. The probability is held
/// in tenths so it is exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PolicyEntry {
    op: Operator,
    prob_tenths: u8,
    magnitude: u8,
}

impl PolicyEntry {
    pub fn new(op: Operator, prob_tenths: u8, magnitude: u8) -> Result<Self> {
        if prob_tenths > PROBABILITY_STEPS {
            return Err(Error::Validation(format!(
                "probability {}/10 above 1",
                prob_tenths
            )));
        }
        if magnitude > MAX_MAGNITUDE {
            return Err(Error::Validation(format!(
                "magnitude {magnitude} outside 0..=9"
            )));
        }
        Ok(Self {
            op,
            prob_tenths,
            magnitude,
        })
    }

    /// Parse a probability given as a decimal on the 0.1 grid.
    pub fn with_probability(op: Operator, probability: f64, magnitude: u8) -> Result<Self> {
        let scaled = probability * f64::from(PROBABILITY_STEPS);
        let tenths = scaled.round();
        if !(0.0..=10.0).contains(&tenths) || (scaled - tenths).abs() > 1e-6 {
            return Err(Error::Validation(format!(
                "probability {probability} is not on the 0.1 grid"
            )));
        }
        Self::new(op, tenths as u8, magnitude)
    }

    pub fn op(&self) -> Operator {
        self.op
    }

    pub fn prob_tenths(&self) -> u8 {
        self.prob_tenths
    }

    pub fn probability(&self) -> f64 {
        f64::from(self.prob_tenths) / f64::from(PROBABILITY_STEPS)
    }

    pub fn magnitude(&self) -> u8 {
        self.magnitude
    }

    pub fn with_values(self, prob_tenths: u8, magnitude: u8) -> Result<Self> {
        Self::new(self.op, prob_tenths, magnitude)
    }
}

/// Thirty entries, every operator exactly twice. Entry `2·i + slot` belongs
/// to `Operator::ALL[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PolicyList {
    entries: Vec<PolicyEntry>,
}

impl PolicyList {
    /// Every entry at probability 0 and magnitude 0.
    pub fn null() -> Self {
        Self {
            entries: Operator::ALL
                .iter()
                .flat_map(|&op| {
                    std::iter::repeat(PolicyEntry {
                        op,
                        prob_tenths: 0,
                        magnitude: 0,
                    })
                    .take(SLOTS_PER_OPERATOR)
                })
                .collect(),
        }
    }

    pub fn from_entries(entries: Vec<PolicyEntry>) -> Result<Self> {
        if entries.len() != POLICY_LEN {
            return Err(Error::Validation(format!(
                "policy has {} entries, expected {POLICY_LEN}",
                entries.len()
            )));
        }
        for (i, e) in entries.iter().enumerate() {
            let want = Operator::ALL[i / SLOTS_PER_OPERATOR];
            if e.op != want {
                return Err(Error::Validation(format!(
                    "policy slot {i} holds {} but belongs to {want}",
                    e.op
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[PolicyEntry] {
        &self.entries
    }

    pub fn entry(&self, op: Operator, slot: usize) -> &PolicyEntry {
        &self.entries[op.index() * SLOTS_PER_OPERATOR + slot]
    }

    pub fn set(&mut self, op: Operator, slot: usize, prob_tenths: u8, magnitude: u8) -> Result<()> {
        assert!(slot < SLOTS_PER_OPERATOR, "slot {slot} out of range");
        let idx = op.index() * SLOTS_PER_OPERATOR + slot;
        self.entries[idx] = self.entries[idx].with_values(prob_tenths, magnitude)?;
        Ok(())
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [PolicyEntry] {
        &mut self.entries
    }

    pub fn is_null(&self) -> bool {
        self.entries.iter().all(|e| e.prob_tenths == 0)
    }
}

/// Operator parameter derived from a magnitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpParam {
    None,
    Degrees(f32),
    Shear(f32),
    /// Pixels on a 32×32 reference image.
    Pixels(f32),
    Threshold(f32),
    Bits(u32),
    Factor(f32),
}

pub fn magnitude_to_param(op: Operator, magnitude: u8) -> Result<OpParam> {
    if magnitude > MAX_MAGNITUDE {
        return Err(Error::Validation(format!(
            "magnitude {magnitude} outside 0..=9"
        )));
    }
    let frac = f32::from(magnitude) / f32::from(MAX_MAGNITUDE);
    Ok(match op {
        Operator::Rotate => OpParam::Degrees(30.0 * frac),
        Operator::ShearX | Operator::ShearY => OpParam::Shear(0.3 * frac),
        Operator::TranslateX | Operator::TranslateY => OpParam::Pixels(10.0 * frac),
        Operator::Solarize => OpParam::Threshold(1.0 - frac),
        Operator::Posterize => OpParam::Bits(8 - (4.0 * frac).round() as u32),
        Operator::Contrast | Operator::Color | Operator::Brightness | Operator::Sharpness => {
            OpParam::Factor(0.1 + 1.8 * frac)
        }
        Operator::Cutout => OpParam::Pixels(16.0 * frac),
        Operator::AutoContrast | Operator::Invert | Operator::Equalize => OpParam::None,
    })
}

/// [`magnitude_to_param`] keyed by the operator's schedule-file name.
pub fn magnitude_to_param_named(op: &str, magnitude: u8) -> Result<OpParam> {
    magnitude_to_param(op.parse()?, magnitude)
}

struct Dims {
    c: usize,
    h: usize,
    w: usize,
}

fn dims(image: &Tensor<f32>) -> Dims {
    let s = image.shape();
    assert_eq!(s.len(), 3, "image must be C×H×W, got {s:?}");
    Dims {
        c: s[0],
        h: s[1],
        w: s[2],
    }
}

fn pixel_scale(d: &Dims) -> f32 {
    d.h.max(d.w) as f32 / REFERENCE_SIDE
}

fn signed<R: Rng + ?Sized>(v: f32, rng: &mut R) -> f32 {
    if rng.gen::<bool>() {
        -v
    } else {
        v
    }
}

/// Nearest-neighbour resampling with zero fill; `src` maps an output pixel
/// `(y, x)` to a source location.
fn resample(image: &Tensor<f32>, src: impl Fn(f32, f32) -> (f32, f32)) -> Tensor<f32> {
    let d = dims(image);
    let inp = image.data();
    let mut out = vec![0.0; inp.len()];
    for y in 0..d.h {
        for x in 0..d.w {
            let (sy, sx) = src(y as f32, x as f32);
            let (iy, ix) = (sy.round(), sx.round());
            if iy < 0.0 || ix < 0.0 || iy >= d.h as f32 || ix >= d.w as f32 {
                continue;
            }
            let (iy, ix) = (iy as usize, ix as usize);
            for c in 0..d.c {
                out[(c * d.h + y) * d.w + x] = inp[(c * d.h + iy) * d.w + ix];
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out).unwrap()
}

fn map_pixels(image: &Tensor<f32>, f: impl Fn(f32) -> f32) -> Tensor<f32> {
    Tensor::new(
        image.shape().to_vec(),
        image.data().iter().map(|&v| f(v)).collect(),
    )
    .unwrap()
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn luminance(image: &Tensor<f32>) -> Vec<f32> {
    let d = dims(image);
    let p = image.data();
    let hw = d.h * d.w;
    if d.c < 3 {
        return p[..hw].to_vec();
    }
    (0..hw)
        .map(|i| 0.299 * p[i] + 0.587 * p[hw + i] + 0.114 * p[2 * hw + i])
        .collect()
}

fn blend(image: &Tensor<f32>, base: impl Fn(usize, usize) -> f32, factor: f32) -> Tensor<f32> {
    let d = dims(image);
    let hw = d.h * d.w;
    let data = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let b = base(i / hw, i % hw);
            b + factor * (v - b)
        })
        .collect();
    Tensor::new(image.shape().to_vec(), data).unwrap()
}

fn equalize_channel(plane: &mut [f32]) {
    let mut hist = [0usize; 256];
    for &v in plane.iter() {
        hist[to_u8(v) as usize] += 1;
    }
    let last = hist.iter().rposition(|&c| c > 0).map_or(0, |i| hist[i]);
    let step = (plane.len() - last) / 255;
    if step == 0 {
        return;
    }
    let mut lut = [0u8; 256];
    let mut n = step / 2;
    for (i, entry) in lut.iter_mut().enumerate() {
        *entry = (n / step).min(255) as u8;
        n += hist[i];
    }
    for v in plane.iter_mut() {
        *v = f32::from(lut[to_u8(*v) as usize]) / 255.0;
    }
}

fn smooth(image: &Tensor<f32>) -> Tensor<f32> {
    let d = dims(image);
    let p = image.data();
    let mut out = p.to_vec();
    for c in 0..d.c {
        for y in 1..d.h.saturating_sub(1) {
            for x in 1..d.w.saturating_sub(1) {
                let mut acc = 0.0;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let wgt = if dy == 1 && dx == 1 { 5.0 } else { 1.0 };
                        acc += wgt * p[(c * d.h + y + dy - 1) * d.w + x + dx - 1];
                    }
                }
                out[(c * d.h + y) * d.w + x] = acc / 13.0;
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out).unwrap()
}

/// Apply one operator at `magnitude`. Geometric operators draw one random
/// sign; cutout draws its centre row then column.
pub fn apply_operator<R: Rng + ?Sized>(
    image: &Tensor<f32>,
    op: Operator,
    magnitude: u8,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    let d = dims(image);
    let (cy, cx) = ((d.h as f32 - 1.0) / 2.0, (d.w as f32 - 1.0) / 2.0);
    let param = magnitude_to_param(op, magnitude)?;
    let out = match (op, param) {
        (Operator::ShearX, OpParam::Shear(s)) => {
            let s = signed(s, rng);
            resample(image, |y, x| (y, x + s * (y - cy)))
        }
        (Operator::ShearY, OpParam::Shear(s)) => {
            let s = signed(s, rng);
            resample(image, |y, x| (y + s * (x - cx), x))
        }
        (Operator::TranslateX, OpParam::Pixels(px)) => {
            let t = signed(px * pixel_scale(&d), rng);
            resample(image, |y, x| (y, x + t))
        }
        (Operator::TranslateY, OpParam::Pixels(px)) => {
            let t = signed(px * pixel_scale(&d), rng);
            resample(image, |y, x| (y + t, x))
        }
        (Operator::Rotate, OpParam::Degrees(deg)) => {
            let theta = signed(deg, rng).to_radians();
            let (sin, cos) = theta.sin_cos();
            resample(image, |y, x| {
                let (dy, dx) = (y - cy, x - cx);
                (cy + cos * dy - sin * dx, cx + sin * dy + cos * dx)
            })
        }
        (Operator::AutoContrast, _) => {
            let mut out = image.clone();
            let hw = d.h * d.w;
            for plane in out.data_mut().chunks_mut(hw) {
                let lo = plane.iter().copied().fold(f32::INFINITY, f32::min);
                let hi = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                if hi > lo {
                    plane.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
                }
            }
            out
        }
        (Operator::Invert, _) => map_pixels(image, |v| 1.0 - v),
        (Operator::Equalize, _) => {
            let mut out = image.clone();
            for plane in out.data_mut().chunks_mut(d.h * d.w) {
                equalize_channel(plane);
            }
            out
        }
        (Operator::Solarize, OpParam::Threshold(t)) => {
            map_pixels(image, |v| if v > t { 1.0 - v } else { v })
        }
        (Operator::Posterize, OpParam::Bits(bits)) => {
            let mask = 0xFFu8 << (8 - bits);
            map_pixels(image, |v| f32::from(to_u8(v) & mask) / 255.0)
        }
        (Operator::Contrast, OpParam::Factor(f)) => {
            let lum = luminance(image);
            let mean = lum.iter().sum::<f32>() / lum.len() as f32;
            blend(image, |_, _| mean, f)
        }
        (Operator::Color, OpParam::Factor(f)) => {
            let lum = luminance(image);
            blend(image, |_, i| lum[i], f)
        }
        (Operator::Brightness, OpParam::Factor(f)) => map_pixels(image, |v| f * v),
        (Operator::Sharpness, OpParam::Factor(f)) => {
            let base = smooth(image);
            let hw = d.h * d.w;
            blend(image, |c, i| base.data()[c * hw + i], f)
        }
        (Operator::Cutout, OpParam::Pixels(px)) => {
            let side = (px * pixel_scale(&d)).round() as usize;
            let y0 = rng.gen_range(0..d.h);
            let x0 = rng.gen_range(0..d.w);
            let mut out = image.clone();
            if side > 0 {
                let (ylo, yhi) = (y0.saturating_sub(side / 2), (y0 + side - side / 2).min(d.h));
                let (xlo, xhi) = (x0.saturating_sub(side / 2), (x0 + side - side / 2).min(d.w));
                let data = out.data_mut();
                for c in 0..d.c {
                    for y in ylo..yhi {
                        for x in xlo..xhi {
                            data[(c * d.h + y) * d.w + x] = CUTOUT_FILL;
                        }
                    }
                }
            }
            out
        }
        (op, p) => unreachable!("{op} paired with {p:?}"),
    };
    Ok(map_pixels(&out, |v| v.clamp(0.0, 1.0)))
}

/// [`apply_policy`] that also reports which operators fired, in order.
///
/// RNG protocol: the 30 entry indices are shuffled; entries are then visited
/// in that order, each drawing one uniform `f64` and firing when it falls
/// below the entry's probability, with the operator drawing its own
/// randomness right after. Visiting stops once [`MAX_APPLIED`] operators
/// have fired.
pub fn apply_policy_traced<R: Rng + ?Sized>(
    image: &Tensor<f32>,
    policy: &PolicyList,
    rng: &mut R,
) -> (Tensor<f32>, Vec<Operator>) {
    let mut order: Vec<usize> = (0..POLICY_LEN).collect();
    order.shuffle(rng);
    let mut out = image.clone();
    let mut fired = Vec::with_capacity(MAX_APPLIED);
    for idx in order {
        if fired.len() == MAX_APPLIED {
            break;
        }
        let e = policy.entries()[idx];
        if rng.gen::<f64>() < e.probability() {
            out = apply_operator(&out, e.op, e.magnitude, rng)
                .expect("policy entries carry valid magnitudes");
            fired.push(e.op);
        }
    }
    (out, fired)
}

pub fn apply_policy<R: Rng + ?Sized>(
    image: &Tensor<f32>,
    policy: &PolicyList,
    rng: &mut R,
) -> Tensor<f32> {
    apply_policy_traced(image, policy, rng).0
}

/// Random crop from a zero-padded copy followed by a horizontal flip with
/// probability 1/2. Padding is 4 px on a 32×32 image, scaled with the side.
pub fn baseline_augment<R: Rng + ?Sized>(image: &Tensor<f32>, rng: &mut R) -> Tensor<f32> {
    let d = dims(image);
    let pad = ((4.0 * pixel_scale(&d)).round() as usize).max(1);
    let dy = rng.gen_range(0..=2 * pad) as isize - pad as isize;
    let dx = rng.gen_range(0..=2 * pad) as isize - pad as isize;
    let flip = rng.gen::<bool>();
    let inp = image.data();
    let mut out = vec![0.0; inp.len()];
    for y in 0..d.h {
        let sy = y as isize + dy;
        if sy < 0 || sy >= d.h as isize {
            continue;
        }
        for x in 0..d.w {
            let xo = if flip { d.w - 1 - x } else { x };
            let sx = x as isize + dx;
            if sx < 0 || sx >= d.w as isize {
                continue;
            }
            for c in 0..d.c {
                out[(c * d.h + y) * d.w + xo] = inp[(c * d.h + sy as usize) * d.w + sx as usize];
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out).unwrap()
}
