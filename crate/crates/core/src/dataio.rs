//! Datasets: CIFAR binary loading, stratified subsets, and procedurally
//! rendered shapes.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const CIFAR_PIXELS: usize = 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Images as an N×C×H×W tensor in `[0, 1]` with one label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::dim(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Validation(format!("label {l} outside {classes} classes")));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Range("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// C×H×W shape of one image.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn image(&self, i: usize) -> Tensor<f32> {
        self.images.select(i).expect("index within dataset")
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Self> {
        let per: usize = self.image_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Validation(format!("index {i} outside {} images", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Self::new(Tensor::new(shape, data)?, labels, self.classes, split)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarVariant {
    /// One label byte per record.
    Cifar10,
    /// Coarse then fine label byte per record; the fine label is used.
    Cifar100,
}

impl CifarVariant {
    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    fn classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + CIFAR_PIXELS
    }
}

pub fn parse_cifar_binary(bytes: &[u8], variant: CifarVariant, split: Split) -> Result<Dataset> {
    let rec = variant.record_len();
    if bytes.len() % rec != 0 {
        let offset = bytes.len() - bytes.len() % rec;
        return Err(Error::format(
            format!("byte {offset}"),
            format!("truncated record: {} bytes left, records are {rec}", bytes.len() % rec),
        ));
    }
    let n = bytes.len() / rec;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * CIFAR_PIXELS);
    for (r, chunk) in bytes.chunks(rec).enumerate() {
        let label = chunk[variant.label_bytes() - 1] as usize;
        if label >= variant.classes() {
            return Err(Error::format(
                format!("byte {}", r * rec + variant.label_bytes() - 1),
                format!("label {label} outside {} classes", variant.classes()),
            ));
        }
        labels.push(label);
        data.extend(chunk[variant.label_bytes()..].iter().map(|&b| f32::from(b) / 255.0));
    }
    Dataset::new(
        Tensor::new(vec![n, 3, 32, 32], data)?,
        labels,
        variant.classes(),
        split,
    )
}

pub fn load_cifar_binary(path: &Path, variant: CifarVariant, split: Split) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar_binary(&bytes, variant, split).map_err(|e| match e {
        Error::Format { location, message } => Error::Format {
            location: format!("{}: {location}", path.display()),
            message,
        },
        other => other,
    })
}

/// Split `total` across groups in proportion to `weights` by largest
/// remainder; ties go to the lower index.
fn apportion(total: usize, weights: &[usize]) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut quota: Vec<usize> = weights.iter().map(|&w| total * w / sum).collect();
    let mut rema: Vec<(usize, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| (total * w % sum, i))
        .collect();
    rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = total - quota.iter().sum::<usize>();
    for &(_, i) in rema.iter().take(short) {
        quota[i] += 1;
    }
    quota
}

/// Disjoint class-stratified train and validation subsets.
pub fn make_reduced(ds: &Dataset, train_size: usize, val_size: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if train_size + val_size > ds.len() {
        return Err(Error::Validation(format!(
            "{train_size} + {val_size} images requested from {}",
            ds.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes()];
    for (i, &l) in ds.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    for idx in &mut by_class {
        idx.shuffle(&mut rng);
    }
    let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let train_q = apportion(train_size, &counts);
    let left: Vec<usize> = counts.iter().zip(&train_q).map(|(c, t)| c - t).collect();
    let val_q = apportion(val_size, &left);
    let mut train = Vec::with_capacity(train_size);
    let mut val = Vec::with_capacity(val_size);
    for (c, idx) in by_class.iter().enumerate() {
        if train_q[c] + val_q[c] > idx.len() {
            return Err(Error::Validation(format!("class {c} has too few images")));
        }
        train.extend_from_slice(&idx[..train_q[c]]);
        val.extend_from_slice(&idx[train_q[c]..train_q[c] + val_q[c]]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((ds.subset(&train, Split::Train)?, ds.subset(&val, Split::Val)?))
}

pub const MAX_SHAPE_CLASSES: usize = 10;

fn inside(class: usize, u: f32, v: f32) -> bool {
    let r2 = u * u + v * v;
    let d1 = (u - v).abs() / std::f32::consts::SQRT_2;
    let d2 = (u + v).abs() / std::f32::consts::SQRT_2;
    match class {
        0 => r2 <= 1.0,
        1 => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        2 => v.abs() <= 0.3 && u.abs() <= 1.0,
        3 => u.abs() <= 0.3 && v.abs() <= 1.0,
        4 => (-0.8..=0.8).contains(&v) && u.abs() <= 0.9 * (v + 0.8) / 1.6,
        5 => (0.35..=1.0).contains(&r2),
        6 => u.abs().max(v.abs()) <= 0.8,
        7 => d1 <= 0.25 && d2 <= 1.0,
        8 => (d1 <= 0.22 || d2 <= 0.22) && r2 <= 1.0,
        _ => {
            ((-0.8..=-0.3).contains(&u) && v.abs() <= 0.8)
                || ((0.3..=0.8).contains(&v) && u.abs() <= 0.8)
        }
    }
}

/// `n` images of `classes` distinct shapes drawn at random position, size,
/// tilt and colour over a noisy background. Image `i` has label
/// `i % classes`.
pub fn synth_shapes(n: usize, classes: usize, size: usize, seed: u64) -> Result<Dataset> {
    if !(2..=MAX_SHAPE_CLASSES).contains(&classes) {
        return Err(Error::Validation(format!(
            "shape classes must lie in 2..={MAX_SHAPE_CLASSES}, got {classes}"
        )));
    }
    if size < 4 {
        return Err(Error::Validation(format!("image size {size} below 4")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hw = size * size;
    let s = size as f32;
    let mut data = Vec::with_capacity(n * 3 * hw);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let dark = rng.gen::<bool>();
        let contrast = rng.gen_range(0.15..0.6);
        let bg: [f32; 3] = std::array::from_fn(|_| {
            let b = rng.gen_range(0.0..0.4);
            if dark { 1.0 - b } else { b }
        });
        let fg: [f32; 3] = std::array::from_fn(|c| {
            let step = if dark { -contrast } else { contrast };
            (bg[c] + step).clamp(0.0, 1.0)
        });
        let radius = rng.gen_range(0.25..0.42) * s;
        let cx = rng.gen_range(0.3..0.7) * s;
        let cy = rng.gen_range(0.3..0.7) * s;
        let (sin, cos) = rng.gen_range(-0.35f32..0.35).sin_cos();
        let noise = 0.25;
        let mut img = vec![0.0f32; 3 * hw];
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = ((x as f32 + 0.5 - cx) / radius, (y as f32 + 0.5 - cy) / radius);
                let (u, v) = (cos * dx + sin * dy, -sin * dx + cos * dy);
                let hit = inside(class, u, v);
                for c in 0..3 {
                    let base = if hit { fg[c] } else { bg[c] };
                    img[c * hw + y * size + x] = (base + rng.gen_range(-noise..noise)).clamp(0.0, 1.0);
                }
            }
        }
        data.extend(img);
        labels.push(class);
    }
    Dataset::new(Tensor::new(vec![n, 3, size, size], data)?, labels, classes, Split::Train)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cifar_bytes(records: &[(u8, u8)], variant: CifarVariant) -> Vec<u8> {
        let mut out = Vec::new();
        for &(label, fill) in records {
            if variant == CifarVariant::Cifar100 {
                out.push(0);
            }
            out.push(label);
            out.extend((0..CIFAR_PIXELS).map(|p| fill.wrapping_add(p as u8)));
        }
        out
    }

    #[test]
    fn parses_hand_built_records() {
        let bytes = cifar_bytes(&[(3, 0), (9, 100)], CifarVariant::Cifar10);
        let ds = parse_cifar_binary(&bytes, CifarVariant::Cifar10, Split::Train).unwrap();
        assert_eq!(ds.labels(), &[3, 9]);
        assert_eq!(ds.images().shape(), &[2, 3, 32, 32]);
        let px = ds.images().data();
        assert_eq!(px[0], 0.0);
        assert_eq!(px[1], 1.0 / 255.0);
        // channel-major: second channel starts at byte 1024 of the record
        assert_eq!(px[1024], f32::from(1024u32 as u8) / 255.0);
        assert_eq!(px[CIFAR_PIXELS], 100.0 / 255.0);
    }

    #[test]
    fn cifar100_uses_fine_label() {
        let bytes = cifar_bytes(&[(57, 0)], CifarVariant::Cifar100);
        let ds = parse_cifar_binary(&bytes, CifarVariant::Cifar100, Split::Test).unwrap();
        assert_eq!(ds.labels(), &[57]);
        assert_eq!(ds.classes(), 100);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let mut bytes = cifar_bytes(&[(1, 0), (2, 0)], CifarVariant::Cifar10);
        bytes.truncate(bytes.len() - 10);
        match parse_cifar_binary(&bytes, CifarVariant::Cifar10, Split::Train) {
            Err(Error::Format { location, .. }) => assert_eq!(location, "byte 3073"),
            r => panic!("{r:?}"),
        }
    }

    #[test]
    fn zero_pixels() {
        let mut bytes = vec![0u8; 3073];
        bytes[0] = 4;
        let ds = parse_cifar_binary(&bytes, CifarVariant::Cifar10, Split::Train).unwrap();
        assert!(ds.images().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn apportion_is_proportional() {
        assert_eq!(apportion(10, &[5, 5]), vec![5, 5]);
        assert_eq!(apportion(3, &[1, 1, 1, 1]), vec![1, 1, 1, 0]);
        assert_eq!(apportion(7, &[10, 20, 40]), vec![1, 2, 4]);
    }

    #[test]
    fn reduced_split_is_disjoint_and_stratified() {
        let ds = synth_shapes(60, 3, 8, 1).unwrap();
        let (tr, va) = make_reduced(&ds, 12, 30, 5).unwrap();
        assert_eq!(tr.class_counts(), vec![4, 4, 4]);
        assert_eq!(va.class_counts(), vec![10, 10, 10]);
        assert!(make_reduced(&ds, 40, 30, 5).is_err());
        let (tr2, _) = make_reduced(&ds, 12, 30, 5).unwrap();
        assert_eq!(tr, tr2);
    }

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let a = synth_shapes(40, 4, 8, 3).unwrap();
        let b = synth_shapes(40, 4, 8, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_counts(), vec![10; 4]);
        assert!(a.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(synth_shapes(4, 11, 8, 0).is_err());
        assert!(synth_shapes(4, 1, 8, 0).is_err());
    }
}
