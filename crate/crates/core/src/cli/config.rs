//! Run configuration: a TOML file, `--set` overrides and the `DFKD_SEED`
//! environment variable, resolved into one fully materialized value.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::CifarVariant;
use crate::error::{Error, Result};
use crate::kdloss::{KdConfig, KdTerms};
use crate::nets::ArchDescriptor;
use crate::pipeline::{AlphaConfig, BetaConfig, OptimConfig, SearchSettings};
use crate::quant::QuantConfig;

pub const SEED_ENV: &str = "DFKD_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synth,
    Cifar10,
    Cifar100,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// CIFAR training batch files.
    pub train_files: Vec<PathBuf>,
    /// CIFAR file used as the validation split.
    pub val_file: PathBuf,
    pub synth_train: usize,
    pub synth_val: usize,
    pub classes: usize,
    pub image_size: usize,
    /// Seed of the synthetic images, independent of the run seed.
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synth,
            train_files: Vec::new(),
            val_file: PathBuf::new(),
            synth_train: 4000,
            synth_val: 1000,
            classes: 4,
            image_size: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSection {
    pub channels: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub search: SearchSettings,
}

impl Default for TeacherSection {
    fn default() -> Self {
        Self {
            channels: vec![8, 16, 32],
            epochs: 10,
            batch_size: 64,
            optim: OptimConfig::FULL_PRECISION,
            search: default_search(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentSection {
    pub channels: Vec<usize>,
    /// 0 keeps the student in full precision.
    pub quant_bits: u32,
    pub quantize_first_layer: bool,
    pub quantize_last_layer: bool,
    pub init_from_teacher: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub search: SearchSettings,
}

impl Default for StudentSection {
    fn default() -> Self {
        Self {
            channels: vec![8, 16, 32],
            quant_bits: 2,
            quantize_first_layer: false,
            quantize_last_layer: false,
            init_from_teacher: true,
            epochs: 10,
            batch_size: 64,
            optim: OptimConfig::QUANTIZED,
            search: default_search(),
        }
    }
}

fn default_search() -> SearchSettings {
    SearchSettings {
        population: 4,
        epochs: 10,
        exploit_interval: crate::pba::DEFAULT_EXPLOIT_INTERVAL,
        train_size: 1000,
        val_size: 500,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KdSection {
    pub lambda0: f64,
    pub decay_factor: f64,
    /// 0 means 30% of the student's retrain epochs.
    pub decay_interval: usize,
    pub kd_grad_clip: f64,
    pub svd_rank: usize,
    pub temperature: f64,
    pub terms: KdTerms,
}

impl Default for KdSection {
    fn default() -> Self {
        let k = KdConfig::ii_kd(1);
        Self {
            lambda0: k.lambda0,
            decay_factor: k.decay_factor,
            decay_interval: 0,
            kd_grad_clip: k.kd_grad_clip,
            svd_rank: k.svd_rank,
            temperature: k.temperature,
            terms: k.terms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Required by the student commands, rejected by the teacher commands.
    pub teacher_checkpoint: Option<PathBuf>,
    pub data: DataSection,
    pub teacher: TeacherSection,
    pub student: StudentSection,
    pub kd: KdSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("run"),
            teacher_checkpoint: None,
            data: DataSection::default(),
            teacher: TeacherSection::default(),
            student: StudentSection::default(),
            kd: KdSection::default(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Parse `key=value`; the value is read as a TOML literal, falling back to
/// a bare string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| config_err(format!("override {spec:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("override key {key:?} is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| config_err(format!("override {key}: {p} is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Build from optional file text, overrides and an optional seed
    /// string from the environment.
    pub fn resolve(text: Option<&str>, overrides: &[String], env_seed: Option<&str>) -> Result<Self> {
        let mut table: toml::Table = match text {
            Some(t) => toml::from_str(t).map_err(|e| config_err(e.to_string()))?,
            None => toml::Table::new(),
        };
        if let Some(s) = env_seed {
            let seed: u64 = s
                .trim()
                .parse()
                .map_err(|_| config_err(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
            table.insert("seed".into(), toml::Value::Integer(seed as i64));
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let env = std::env::var(SEED_ENV).ok();
        Self::resolve(Some(&text), overrides, env.as_deref())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 || self.data.seed > i64::MAX as u64 {
            return Err(config_err("seed and data.seed must fit in a signed 64-bit integer"));
        }
        let d = &self.data;
        match d.source {
            DataSource::Synth => {
                if !(2..=crate::dataio::MAX_SHAPE_CLASSES).contains(&d.classes) {
                    return Err(config_err(format!(
                        "data.classes must be in 2..={}",
                        crate::dataio::MAX_SHAPE_CLASSES
                    )));
                }
                if d.image_size < 8 {
                    return Err(config_err("data.image_size must be at least 8"));
                }
                if d.synth_train == 0 || d.synth_val == 0 {
                    return Err(config_err("data.synth_train and data.synth_val must be positive"));
                }
            }
            DataSource::Cifar10 | DataSource::Cifar100 => {
                if d.train_files.is_empty() {
                    return Err(config_err("data.train_files must list at least one file"));
                }
                if d.val_file.as_os_str().is_empty() {
                    return Err(config_err("data.val_file is required for CIFAR data"));
                }
            }
        }
        for (name, ch) in [("teacher.channels", &self.teacher.channels), ("student.channels", &self.student.channels)] {
            if ch.is_empty() || ch.contains(&0) {
                return Err(config_err(format!("{name} must be a non-empty list of positive widths")));
            }
        }
        let s = &self.student;
        if s.quant_bits != 0 {
            QuantConfig::new(s.quant_bits).map_err(|e| config_err(format!("student.quant_bits: {e}")))?;
        }
        if s.init_from_teacher && s.channels != self.teacher.channels {
            return Err(config_err(
                "student.init_from_teacher needs student.channels equal to teacher.channels",
            ));
        }
        for (name, epochs, batch) in [
            ("teacher", self.teacher.epochs, self.teacher.batch_size),
            ("student", s.epochs, s.batch_size),
        ] {
            if epochs == 0 {
                return Err(config_err(format!("{name}.epochs must be positive")));
            }
            if batch < 2 {
                return Err(config_err(format!("{name}.batch_size must be at least 2")));
            }
        }
        for (name, o) in [("teacher.optim", self.teacher.optim), ("student.optim", s.optim)] {
            if !(o.lr > 0.0 && o.lr.is_finite()) || !(0.0..1.0).contains(&o.momentum) || o.weight_decay < 0.0 {
                return Err(config_err(format!(
                    "{name}: lr must be positive, momentum in [0, 1), weight_decay non-negative"
                )));
            }
        }
        for (name, se) in [("teacher.search", &self.teacher.search), ("student.search", &s.search)] {
            let pc = crate::pba::PbaConfig {
                population: se.population,
                epochs: se.epochs,
                exploit_interval: se.exploit_interval,
                seed: 0,
            };
            pc.validate().map_err(|e| config_err(format!("{name}: {e}")))?;
            if se.train_size == 0 || se.val_size == 0 {
                return Err(config_err(format!("{name}: train_size and val_size must be positive")));
            }
        }
        self.kd_config().validate().map_err(|e| config_err(format!("kd: {e}")))?;
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        3
    }

    pub fn image_size(&self) -> usize {
        match self.data.source {
            DataSource::Synth => self.data.image_size,
            _ => 32,
        }
    }

    pub fn classes(&self) -> usize {
        match self.data.source {
            DataSource::Synth => self.data.classes,
            DataSource::Cifar10 => 10,
            DataSource::Cifar100 => 100,
        }
    }

    pub fn cifar_variant(&self) -> Option<CifarVariant> {
        match self.data.source {
            DataSource::Synth => None,
            DataSource::Cifar10 => Some(CifarVariant::Cifar10),
            DataSource::Cifar100 => Some(CifarVariant::Cifar100),
        }
    }

    pub fn quant(&self) -> Option<QuantConfig> {
        (self.student.quant_bits != 0).then_some(QuantConfig {
            n_bits: self.student.quant_bits,
            quantize_first_layer: self.student.quantize_first_layer,
            quantize_last_layer: self.student.quantize_last_layer,
        })
    }

    pub fn kd_config(&self) -> KdConfig {
        let k = &self.kd;
        KdConfig {
            lambda0: k.lambda0,
            decay_factor: k.decay_factor,
            decay_interval: if k.decay_interval == 0 {
                crate::kdloss::default_decay_interval(self.student.epochs)
            } else {
                k.decay_interval
            },
            kd_grad_clip: k.kd_grad_clip,
            svd_rank: k.svd_rank,
            temperature: k.temperature,
            terms: k.terms,
        }
    }

    pub fn alpha(&self) -> Result<AlphaConfig> {
        if let Some(p) = &self.teacher_checkpoint {
            return Err(config_err(format!(
                "teacher_checkpoint ({}) must not be set for teacher commands",
                p.display()
            )));
        }
        Ok(AlphaConfig {
            teacher: ArchDescriptor::tapcnn(
                self.in_channels(),
                self.image_size(),
                self.teacher.channels.clone(),
                self.classes(),
            )
            .map_err(|e| config_err(format!("teacher: {e}")))?,
            search: self.teacher.search,
            retrain_epochs: self.teacher.epochs,
            batch_size: self.teacher.batch_size,
            optim: self.teacher.optim,
            seed: self.seed,
        })
    }

    pub fn teacher_path(&self) -> Result<&Path> {
        self.teacher_checkpoint
            .as_deref()
            .ok_or_else(|| config_err("teacher_checkpoint is required for student commands"))
    }

    pub fn beta(&self) -> Result<BetaConfig> {
        self.teacher_path()?;
        Ok(BetaConfig {
            student: ArchDescriptor::tapcnn(
                self.in_channels(),
                self.image_size(),
                self.student.channels.clone(),
                self.classes(),
            )
            .map_err(|e| config_err(format!("student: {e}")))?,
            quant: self.quant(),
            init_from_teacher: self.student.init_from_teacher,
            kd: self.kd_config(),
            search: self.student.search,
            retrain_epochs: self.student.epochs,
            batch_size: self.student.batch_size,
            optim: self.student.optim,
            seed: self.seed,
        })
    }
}
