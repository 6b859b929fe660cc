//! Density-ratio proposals over observed configurations: a "good" and a
//! "bad" kernel density estimate per budget, with a uniform fallback.

use std::collections::BTreeMap;
use std::f64::consts::{PI, SQRT_2};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hyperband::Proposer;
use crate::searchspace::{decode, encode, repair, sample_uniform, ConfigVector, DimKind, HeadConfig, DIM_KINDS, VECTOR_DIMS};
use crate::trainer::Trial;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerParams {
    /// Fraction of observations labelled good.
    pub gamma: f64,
    pub min_points: usize,
    pub n_candidates: usize,
    pub random_fraction: f64,
    pub bandwidth_floor: f64,
}

impl Default for SamplerParams {
    fn default() -> Self {
        Self {
            gamma: 0.15,
            min_points: VECTOR_DIMS + 1,
            n_candidates: 64,
            random_fraction: 1.0 / 3.0,
            bandwidth_floor: 1e-3,
        }
    }
}

impl SamplerParams {
    pub fn check(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::precondition("sampler", detail));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma {} outside (0, 1)", self.gamma));
        }
        if self.n_candidates == 0 {
            return bad("n_candidates must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.random_fraction) {
            return bad(format!("random_fraction {} outside [0, 1]", self.random_fraction));
        }
        if self.min_points < 2 {
            return bad("min_points must be at least 2".into());
        }
        if self.bandwidth_floor <= 0.0 {
            return bad("bandwidth_floor must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub vector: ConfigVector,
    pub val_acc: f64,
}

/// Append-only observations grouped by budget.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ObservationStore {
    by_budget: BTreeMap<u32, Vec<Observation>>,
}

impl ObservationStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe(&mut self, trial: &Trial) {
        self.push(trial.budget_epochs, encode(&trial.config), trial.val_acc);
    }

    pub fn push(&mut self, budget: u32, vector: ConfigVector, val_acc: f64) {
        self.by_budget.entry(budget).or_default().push(Observation { vector, val_acc });
    }

    pub fn at_budget(&self, budget: u32) -> &[Observation] {
        self.by_budget.get(&budget).map_or(&[], Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.by_budget.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Largest budget holding at least `min_points` observations.
    pub fn model_budget(&self, min_points: usize) -> Option<u32> {
        self.by_budget
            .iter()
            .rev()
            .find(|(_, obs)| obs.len() >= min_points)
            .map(|(&b, _)| b)
    }
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z / SQRT_2))
}

/// Product density over `[0, 1]^d`. Numeric dimensions use Gaussian
/// kernels truncated to the unit interval; categorical dimensions use
/// add-one smoothed bin frequencies, independent of the numeric part.
#[derive(Clone, Debug, PartialEq)]
pub struct Kde {
    kinds: Vec<DimKind>,
    points: Vec<Vec<f64>>,
    bandwidths: Vec<f64>,
    /// Bin probabilities per categorical dimension (empty for numeric).
    tables: Vec<Vec<f64>>,
}

fn bin_of(v: f64, n: usize) -> usize {
    ((v.clamp(0.0, 1.0) * n as f64) as usize).min(n - 1)
}

impl Kde {
    /// Scott's rule `σ · N^(-1/(d+4))` over the `d` numeric dimensions,
    /// floored at `floor`.
    pub fn fit(points: &[Vec<f64>], kinds: &[DimKind], floor: f64) -> Result<Self> {
        if let Some(p) = points.iter().find(|p| p.len() != kinds.len()) {
            return Err(Error::shape(
                "kde fit",
                format!("point of {} dims for {} kinds", p.len(), kinds.len()),
            ));
        }
        let n = points.len();
        let numeric = kinds.iter().filter(|k| **k == DimKind::Numeric).count();
        let factor = (n.max(1) as f64).powf(-1.0 / (numeric as f64 + 4.0));
        let mut bandwidths = vec![0.0; kinds.len()];
        let mut tables = vec![Vec::new(); kinds.len()];
        for (d, kind) in kinds.iter().enumerate() {
            match *kind {
                DimKind::Numeric => {
                    let sigma = if n > 1 {
                        let mean = points.iter().map(|p| p[d]).sum::<f64>() / n as f64;
                        (points.iter().map(|p| (p[d] - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
                    } else {
                        0.0
                    };
                    bandwidths[d] = (sigma * factor).max(floor);
                }
                DimKind::Categorical(bins) => {
                    let mut counts = vec![1.0; bins];
                    for p in points {
                        let v = p[d];
                        // An imputed midpoint on a two-way flag counts half
                        // toward each side.
                        if bins == 2 && v == 0.5 {
                            counts[0] += 0.5;
                            counts[1] += 0.5;
                        } else {
                            counts[bin_of(v, bins)] += 1.0;
                        }
                    }
                    let total = (n + bins) as f64;
                    tables[d] = counts.into_iter().map(|c| c / total).collect();
                }
            }
        }
        Ok(Self {
            kinds: kinds.to_vec(),
            points: points.to_vec(),
            bandwidths,
            tables,
        })
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut log_cat = 0.0;
        for (d, kind) in self.kinds.iter().enumerate() {
            if let DimKind::Categorical(bins) = *kind {
                log_cat += (self.tables[d][bin_of(x[d], bins)] * bins as f64).ln();
            }
        }
        if self.points.is_empty() {
            return log_cat;
        }
        let log_kernels: Vec<f64> = self
            .points
            .iter()
            .map(|c| {
                let mut s = 0.0;
                for (d, kind) in self.kinds.iter().enumerate() {
                    if *kind != DimKind::Numeric {
                        continue;
                    }
                    let h = self.bandwidths[d];
                    let z = (x[d] - c[d]) / h;
                    let mass = normal_cdf((1.0 - c[d]) / h) - normal_cdf(-c[d] / h);
                    s += -0.5 * z * z - 0.5 * (2.0 * PI).ln() - h.ln() - mass.ln();
                }
                s
            })
            .collect();
        let max = log_kernels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = log_kernels.iter().map(|l| (l - max).exp()).sum();
        log_cat + max + (sum / self.points.len() as f64).ln()
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        self.log_density(x).exp()
    }

    /// Numeric dimensions from the kernel of a random point, categorical
    /// ones from the frequency tables.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let center = (!self.points.is_empty()).then(|| &self.points[rng.random_range(0..self.points.len())]);
        self.kinds
            .iter()
            .enumerate()
            .map(|(d, kind)| match *kind {
                DimKind::Numeric => match center {
                    Some(c) => truncated_normal(c[d], self.bandwidths[d], rng),
                    None => rng.random(),
                },
                DimKind::Categorical(bins) => {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut pick = bins - 1;
                    for (i, p) in self.tables[d].iter().enumerate() {
                        acc += p;
                        if u < acc {
                            pick = i;
                            break;
                        }
                    }
                    (pick as f64 + 0.5) / bins as f64
                }
            })
            .collect()
    }
}

fn truncated_normal(mean: f64, sd: f64, rng: &mut impl Rng) -> f64 {
    for _ in 0..1000 {
        let z: f64 = rng.sample(StandardNormal);
        let x = mean + sd * z;
        if (0.0..=1.0).contains(&x) {
            return x;
        }
    }
    mean.clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KdePair {
    pub good: Kde,
    pub bad: Kde,
}

impl KdePair {
    /// `log good(x) - log bad(x)`.
    pub fn score(&self, x: &[f64]) -> f64 {
        self.good.log_density(x) - self.bad.log_density(x)
    }
}

/// Uniform sampling until a budget has enough observations, then the
/// candidate maximizing the good/bad density ratio.
#[derive(Clone, Debug)]
pub struct BohbSampler {
    params: SamplerParams,
    base_dim: usize,
    store: ObservationStore,
}

impl BohbSampler {
    pub fn new(params: SamplerParams, base_dim: usize) -> Result<Self> {
        params.check()?;
        Ok(Self {
            params,
            base_dim,
            store: ObservationStore::new(),
        })
    }

    pub fn with_store(params: SamplerParams, base_dim: usize, store: ObservationStore) -> Result<Self> {
        let mut s = Self::new(params, base_dim)?;
        s.store = store;
        Ok(s)
    }

    pub fn params(&self) -> &SamplerParams {
        &self.params
    }

    pub fn store(&self) -> &ObservationStore {
        &self.store
    }

    pub fn observe(&mut self, trial: &Trial) {
        self.store.observe(trial);
    }

    /// Good set: the `ceil(gamma · N)` highest accuracies, ties to the
    /// earlier observation. Bad set: the rest.
    pub fn fit_kdes(&self, budget: u32) -> Result<KdePair> {
        let obs = self.store.at_budget(budget);
        if obs.len() < self.params.min_points {
            return Err(Error::InsufficientData {
                needed: self.params.min_points,
                have: obs.len(),
            });
        }
        let mut order: Vec<usize> = (0..obs.len()).collect();
        order.sort_by(|&a, &b| obs[b].val_acc.total_cmp(&obs[a].val_acc));
        let n_good = ((self.params.gamma * obs.len() as f64).ceil() as usize).clamp(1, obs.len());
        let pick = |idx: &[usize]| -> Vec<Vec<f64>> { idx.iter().map(|&i| obs[i].vector.values.to_vec()).collect() };
        let floor = self.params.bandwidth_floor;
        Ok(KdePair {
            good: Kde::fit(&pick(&order[..n_good]), &DIM_KINDS, floor)?,
            bad: Kde::fit(&pick(&order[n_good..]), &DIM_KINDS, floor)?,
        })
    }

    pub fn propose(&self, rng: &mut ChaCha8Rng) -> HeadConfig {
        if rng.random::<f64>() < self.params.random_fraction {
            return sample_uniform(rng, self.base_dim);
        }
        let Some(budget) = self.store.model_budget(self.params.min_points) else {
            return sample_uniform(rng, self.base_dim);
        };
        let kdes = self.fit_kdes(budget).expect("budget has enough points");
        let mut best: Option<(f64, HeadConfig)> = None;
        for _ in 0..self.params.n_candidates {
            let raw = kdes.good.sample(rng);
            let mut vector = ConfigVector {
                values: raw.try_into().expect("vector width"),
                active: [true; VECTOR_DIMS],
            };
            let config = repair(decode(&vector), self.base_dim);
            vector = encode(&config);
            let score = kdes.score(&vector.values);
            if best.as_ref().is_none_or(|(s, _)| score > *s) {
                best = Some((score, config));
            }
        }
        best.expect("at least one candidate").1
    }
}

impl Proposer for BohbSampler {
    fn propose(&mut self, rng: &mut ChaCha8Rng) -> HeadConfig {
        BohbSampler::propose(self, rng)
    }

    fn observe(&mut self, trial: &Trial) {
        BohbSampler::observe(self, trial);
    }
}
