//! Population-based search over augmentation policies.
//!
//! A fixed-size population trains in lock step. Every `exploit_interval`
//! epochs the bottom quartile copies weights and policy from a random member
//! of the top quartile (only when strictly worse) and then perturbs its
//! policy. The per-epoch policy history of the best final trial, following
//! its ancestry back through every copy, is the resulting schedule.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::augment::{Operator, PolicyEntry, PolicyList, MAX_MAGNITUDE, PROBABILITY_STEPS, SLOTS_PER_OPERATOR};
use crate::error::{Error, Result};

pub const SCHEDULE_VERSION: u32 = 1;
pub const RESAMPLE_PROBABILITY: f64 = 0.2;
pub const DEFAULT_EXPLOIT_INTERVAL: usize = 3;

const STREAM_EXPLOIT: u64 = 0x4558_504c;
const STREAM_EXPLORE: u64 = 0x4558_5052;
const STREAM_START: u64 = 0x5354_5254;

/// Independent generator for a tuple of stream coordinates.
pub fn derive_rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update(p.to_le_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PbaConfig {
    pub population: usize,
    pub epochs: usize,
    pub exploit_interval: usize,
    pub seed: u64,
}

impl PbaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 2 {
            return Err(Error::Validation("population must be at least 2".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Validation("search needs at least one epoch".into()));
        }
        if self.exploit_interval == 0 {
            return Err(Error::Validation("exploit interval must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineageEntry {
    pub epoch: usize,
    pub policy: PolicyList,
    /// Trial copied from at the barrier just before this epoch.
    pub parent: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Trial<M> {
    pub id: usize,
    pub model: M,
    pub policy: PolicyList,
    pub fitness: f64,
    pub lineage: Vec<LineageEntry>,
    pending_parent: Option<usize>,
}

impl<M> Trial<M> {
    pub fn new(id: usize, model: M, policy: PolicyList) -> Self {
        Self {
            id,
            model,
            policy,
            fitness: 0.0,
            lineage: Vec::new(),
            pending_parent: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Replacement {
    pub epoch: usize,
    pub child: usize,
    pub parent: usize,
}

/// Per-epoch policies found by a search.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    pub per_epoch: Vec<PolicyList>,
}

impl Schedule {
    pub fn len(&self) -> usize {
        self.per_epoch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_epoch.is_empty()
    }

    /// Policy for `epoch` of a run lasting `total` epochs, mapping
    /// linearly onto the searched epochs: index `⌊epoch · len / total⌋`.
    pub fn policy_for(&self, epoch: usize, total: usize) -> &PolicyList {
        let idx = (epoch * self.len() / total.max(1)).min(self.len() - 1);
        &self.per_epoch[idx]
    }

    pub fn to_text(&self, seed: u64, population: usize) -> String {
        let mut out = format!(
            "# dfkd-schedule version={SCHEDULE_VERSION} seed={seed} population={population} epochs={}\n",
            self.len()
        );
        out.push_str("# epoch op slot probability magnitude\n");
        for (e, p) in self.per_epoch.iter().enumerate() {
            for (i, entry) in p.entries().iter().enumerate() {
                let t = entry.prob_tenths();
                let _ = writeln!(
                    out,
                    "{e} {} {} {}.{} {}",
                    entry.op(),
                    i % SLOTS_PER_OPERATOR,
                    t / 10,
                    t % 10,
                    entry.magnitude()
                );
            }
        }
        out
    }

    /// Parse a schedule file; returns the schedule with the header's seed
    /// and population.
    pub fn from_text(text: &str) -> Result<(Self, u64, usize)> {
        let err = |line: usize, msg: String| Error::format(format!("line {line}"), msg);
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty schedule".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() < 2 || fields[0] != "#" || fields[1] != "dfkd-schedule" {
            return Err(err(1, "missing schedule header".into()));
        }
        let mut version = None;
        let (mut seed, mut population, mut epochs) = (None, None, None);
        for f in &fields[2..] {
            let (k, v) = f
                .split_once('=')
                .ok_or_else(|| err(1, format!("bad header field {f:?}")))?;
            let num = v
                .parse::<u64>()
                .map_err(|_| err(1, format!("header field {k} is not an integer")))?;
            match k {
                "version" => version = Some(num),
                "seed" => seed = Some(num),
                "population" => population = Some(num as usize),
                "epochs" => epochs = Some(num as usize),
                _ => return Err(err(1, format!("unknown header field {k:?}"))),
            }
        }
        if version != Some(u64::from(SCHEDULE_VERSION)) {
            return Err(err(1, format!("unsupported schedule version {version:?}")));
        }
        let (seed, population, epochs) = match (seed, population, epochs) {
            (Some(s), Some(p), Some(e)) => (s, p, e),
            _ => return Err(err(1, "header lacks seed, population or epochs".into())),
        };
        let mut per_epoch: Vec<Vec<Option<PolicyEntry>>> = vec![vec![None; crate::augment::POLICY_LEN]; epochs];
        for (i, line) in lines {
            let ln = i + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() != 5 {
                return Err(err(ln, format!("expected 5 columns, found {}", cols.len())));
            }
            let epoch: usize = cols[0].parse().map_err(|_| err(ln, "bad epoch".into()))?;
            let op: Operator = cols[1].parse().map_err(|e: Error| err(ln, e.to_string()))?;
            let slot: usize = cols[2].parse().map_err(|_| err(ln, "bad slot".into()))?;
            let prob: f64 = cols[3].parse().map_err(|_| err(ln, "bad probability".into()))?;
            let mag: u8 = cols[4].parse().map_err(|_| err(ln, "bad magnitude".into()))?;
            if epoch >= epochs || slot >= SLOTS_PER_OPERATOR {
                return Err(err(ln, format!("epoch {epoch} or slot {slot} out of range")));
            }
            let entry = PolicyEntry::with_probability(op, prob, mag).map_err(|e| err(ln, e.to_string()))?;
            let cell = &mut per_epoch[epoch][op.index() * SLOTS_PER_OPERATOR + slot];
            if cell.is_some() {
                return Err(err(ln, format!("duplicate row for epoch {epoch} {op} slot {slot}")));
            }
            *cell = Some(entry);
        }
        let per_epoch = per_epoch
            .into_iter()
            .enumerate()
            .map(|(e, row)| {
                let entries: Option<Vec<PolicyEntry>> = row.into_iter().collect();
                let entries = entries.ok_or_else(|| {
                    Error::format("end of file", format!("epoch {e} is missing rows"))
                })?;
                PolicyList::from_entries(entries)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((Self { per_epoch }, seed, population))
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.to_text(0, 0).as_bytes()))
    }
}

fn clamp_step(v: i32, delta: i32, max: i32) -> u8 {
    (v + delta).clamp(0, max) as u8
}

/// Perturb every entry independently: with probability 0.2 draw fresh
/// probability and magnitude, otherwise shift the probability by `±0.1·u`
/// and the magnitude by `±u` with `u` uniform in {1, 2, 3}, clamped to the
/// grids.
pub fn explore<R: Rng + ?Sized>(policy: &PolicyList, rng: &mut R) -> PolicyList {
    let mut out = policy.clone();
    for e in out.entries_mut() {
        let (p, m) = if rng.gen::<f64>() < RESAMPLE_PROBABILITY {
            (
                rng.gen_range(0..=PROBABILITY_STEPS),
                rng.gen_range(0..=MAX_MAGNITUDE),
            )
        } else {
            let up: i32 = if rng.gen::<bool>() { 1 } else { -1 };
            let dp = up * rng.gen_range(1..=3);
            let up: i32 = if rng.gen::<bool>() { 1 } else { -1 };
            let dm = up * rng.gen_range(1..=3);
            (
                clamp_step(i32::from(e.prob_tenths()), dp, i32::from(PROBABILITY_STEPS)),
                clamp_step(i32::from(e.magnitude()), dm, i32::from(MAX_MAGNITUDE)),
            )
        };
        *e = e.with_values(p, m).expect("clamped onto the grids");
    }
    out
}

/// Quartile size `⌈n/4⌉`.
pub fn quartile(n: usize) -> usize {
    n.div_ceil(4)
}

/// Bottom-quartile trials paired with a uniformly drawn top-quartile trial,
/// kept only where the bottom trial is strictly worse. Ranking is by fitness
/// with ties broken by id.
pub fn plan_exploit<R: Rng + ?Sized>(fitness: &[f64], rng: &mut R) -> (Vec<usize>, Vec<(usize, usize)>) {
    let n = fitness.len();
    let q = quartile(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| fitness[a].total_cmp(&fitness[b]).then(a.cmp(&b)));
    let bottom = order[..q].to_vec();
    let top = &order[n - q..];
    let mut pairs = Vec::new();
    for &child in &bottom {
        let parent = top[rng.gen_range(0..q)];
        if fitness[child] < fitness[parent] {
            pairs.push((child, parent));
        }
    }
    (bottom, pairs)
}

/// Walk ancestry back from `best`; epochs before a copy come from the trial
/// copied from.
pub fn reconstruct_schedule<M>(best: usize, trials: &[Trial<M>]) -> Result<Schedule> {
    let find = |id: usize| {
        trials
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| Error::Integrity(format!("lineage names missing trial {id}")))
    };
    let epochs = find(best)?.lineage.len();
    let mut per_epoch = vec![None; epochs];
    let mut current = best;
    for e in (0..epochs).rev() {
        let t = find(current)?;
        let entry = t.lineage.get(e).filter(|l| l.epoch == e).ok_or_else(|| {
            Error::Integrity(format!("trial {current} has no snapshot for epoch {e}"))
        })?;
        per_epoch[e] = Some(entry.policy.clone());
        if let Some(p) = entry.parent {
            current = p;
        }
    }
    Ok(Schedule {
        per_epoch: per_epoch.into_iter().map(Option::unwrap).collect(),
    })
}

#[derive(Debug, Clone)]
pub struct SearchOutcome<M> {
    pub schedule: Schedule,
    pub trials: Vec<Trial<M>>,
    pub best: usize,
    pub replacements: Vec<Replacement>,
    /// Fitness of every trial after every epoch.
    pub history: Vec<Vec<f64>>,
}

/// Each trial starts from one explore step away from the null policy, so
/// the population covers distinct policies before the first barrier.
pub fn starting_policy(seed: u64, trial: usize) -> PolicyList {
    explore(&PolicyList::null(), &mut derive_rng(seed, &[STREAM_START, trial as u64]))
}

/// Run the search. `fitness` trains a trial's model for one epoch under the
/// given policy and returns its validation accuracy; it receives the trial
/// id and epoch so it can derive its own random streams.
pub fn run_search<M, I, F>(cfg: &PbaConfig, init: I, fitness: F) -> Result<SearchOutcome<M>>
where
    M: Clone + Send,
    I: Fn(usize) -> M,
    F: Fn(&mut M, &PolicyList, usize, usize) -> Result<f64> + Sync,
{
    cfg.validate()?;
    let mut trials: Vec<Trial<M>> = (0..cfg.population)
        .map(|id| Trial::new(id, init(id), starting_policy(cfg.seed, id)))
        .collect();
    let mut replacements = Vec::new();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let results: Vec<Result<f64>> = trials
            .par_iter_mut()
            .map(|t| {
                t.lineage.push(LineageEntry {
                    epoch,
                    policy: t.policy.clone(),
                    parent: t.pending_parent.take(),
                });
                let acc = fitness(&mut t.model, &t.policy, t.id, epoch)?;
                if !(0.0..=1.0).contains(&acc) {
                    return Err(Error::Range(format!("fitness {acc} outside [0, 1]")));
                }
                t.fitness = acc;
                Ok(acc)
            })
            .collect();
        for (t, r) in trials.iter().zip(results) {
            if let Err(e) = r {
                return Err(Error::Search {
                    trial: t.id,
                    epoch,
                    source: Box::new(e),
                });
            }
        }
        history.push(trials.iter().map(|t| t.fitness).collect());
        let boundary = epoch + 1;
        if boundary % cfg.exploit_interval == 0 && boundary < cfg.epochs {
            let fit: Vec<f64> = trials.iter().map(|t| t.fitness).collect();
            let mut rng = derive_rng(cfg.seed, &[STREAM_EXPLOIT, epoch as u64]);
            let (bottom, pairs) = plan_exploit(&fit, &mut rng);
            for &(child, parent) in &pairs {
                trials[child].model = trials[parent].model.clone();
                trials[child].policy = trials[parent].policy.clone();
                trials[child].fitness = trials[parent].fitness;
                trials[child].pending_parent = Some(parent);
                replacements.push(Replacement {
                    epoch: boundary,
                    child,
                    parent,
                });
            }
            for &child in &bottom {
                let mut rng = derive_rng(cfg.seed, &[STREAM_EXPLORE, epoch as u64, child as u64]);
                trials[child].policy = explore(&trials[child].policy, &mut rng);
            }
        }
    }
    let best = trials
        .iter()
        .max_by(|a, b| a.fitness.total_cmp(&b.fitness).then(b.id.cmp(&a.id)))
        .map(|t| t.id)
        .unwrap();
    let schedule = reconstruct_schedule(best, &trials)?;
    Ok(SearchOutcome {
        schedule,
        trials,
        best,
        replacements,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quartiles() {
        assert_eq!(quartile(4), 1);
        assert_eq!(quartile(16), 4);
        assert_eq!(quartile(2), 1);
        assert_eq!(quartile(5), 2);
    }

    #[test]
    fn truncation_selection() {
        let mut rng = derive_rng(1, &[]);
        let (bottom, pairs) = plan_exploit(&[0.1, 0.2, 0.9, 0.8], &mut rng);
        assert_eq!(bottom, vec![0]);
        assert_eq!(pairs, vec![(0, 2)]);
        let (_, pairs) = plan_exploit(&[0.5; 4], &mut rng);
        assert!(pairs.is_empty());
        let fit: Vec<f64> = (0..16).map(|i| i as f64 / 16.0).collect();
        let (_, pairs) = plan_exploit(&fit, &mut rng);
        assert_eq!(pairs.len(), 4);
        assert!(pairs.iter().all(|&(c, p)| c < 4 && p >= 12));
    }

    #[test]
    fn explore_clamps_and_is_seeded() {
        let mut p = PolicyList::null();
        for op in Operator::ALL {
            p.set(op, 0, 10, 9).unwrap();
        }
        let a = explore(&p, &mut derive_rng(7, &[1]));
        let b = explore(&p, &mut derive_rng(7, &[1]));
        assert_eq!(a, b);
        for (x, y) in a.entries().iter().zip(p.entries()) {
            assert_eq!(x.op(), y.op());
            assert!(x.prob_tenths() <= 10 && x.magnitude() <= 9);
        }
    }

    #[test]
    fn splice_at_replacement() {
        let mk = |tenths: u8| {
            let mut p = PolicyList::null();
            p.set(Operator::Rotate, 0, tenths, 0).unwrap();
            p
        };
        let mut parent = Trial::new(0, (), mk(0));
        let mut child = Trial::new(1, (), mk(0));
        for e in 0..4 {
            parent.lineage.push(LineageEntry { epoch: e, policy: mk(1), parent: None });
            child.lineage.push(LineageEntry {
                epoch: e,
                policy: mk(5),
                parent: (e == 2).then_some(0),
            });
        }
        let s = reconstruct_schedule(1, &[parent.clone(), child.clone()]).unwrap();
        let tenths: Vec<u8> = s
            .per_epoch
            .iter()
            .map(|p| p.entry(Operator::Rotate, 0).prob_tenths())
            .collect();
        assert_eq!(tenths, vec![1, 1, 5, 5]);
        let s = reconstruct_schedule(0, &[parent.clone(), child.clone()]).unwrap();
        assert!(s.per_epoch.iter().all(|p| p.entry(Operator::Rotate, 0).prob_tenths() == 1));
        assert!(matches!(
            reconstruct_schedule(1, &[child]),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn schedule_text_round_trip() {
        let mut p = PolicyList::null();
        p.set(Operator::Posterize, 1, 3, 7).unwrap();
        let s = Schedule { per_epoch: vec![PolicyList::null(), p] };
        let text = s.to_text(42, 4);
        let (back, seed, pop) = Schedule::from_text(&text).unwrap();
        assert_eq!((back, seed, pop), (s, 42, 4));
        let broken = text.replace("posterize 1 0.3 7", "posterize 1 0.35 7");
        match Schedule::from_text(&broken) {
            Err(Error::Format { location, .. }) => assert!(location.starts_with("line ")),
            r => panic!("{r:?}"),
        }
    }

    #[test]
    fn schedule_index_scaling() {
        let s = Schedule { per_epoch: (0..5).map(|_| PolicyList::null()).collect() };
        assert!(std::ptr::eq(s.policy_for(7, 10), &s.per_epoch[3]));
        assert!(std::ptr::eq(s.policy_for(4, 5), &s.per_epoch[4]));
    }

    #[test]
    fn constant_fitness_never_replaces() {
        let cfg = PbaConfig { population: 2, epochs: 7, exploit_interval: 3, seed: 3 };
        let out = run_search(&cfg, |_| 0u32, |_, _, _, _| Ok(0.5)).unwrap();
        assert!(out.replacements.is_empty());
        assert_eq!(out.schedule.len(), 7);
        assert!(!out.schedule.per_epoch[6].is_null());
        assert_eq!(out.schedule.per_epoch[0], starting_policy(3, out.best));
    }

    #[test]
    fn trials_start_from_distinct_policies() {
        let starts: Vec<PolicyList> = (0..4).map(|i| starting_policy(5, i)).collect();
        assert!(starts.iter().all(|p| !p.is_null()));
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(starts[i], starts[j]);
            }
        }
        assert_eq!(starting_policy(5, 2), starts[2]);
    }

    #[test]
    fn fitness_failure_names_trial_and_epoch() {
        let cfg = PbaConfig { population: 3, epochs: 4, exploit_interval: 3, seed: 0 };
        let r = run_search(&cfg, |_| (), |_, _, t, e| {
            if t == 2 && e == 1 {
                Err(Error::Validation("boom".into()))
            } else {
                Ok(0.1)
            }
        });
        assert!(matches!(r, Err(Error::Search { trial: 2, epoch: 1, .. })));
    }
}
