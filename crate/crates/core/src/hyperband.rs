//! Hyperband bracket planning and synchronous successive halving over
//! epoch budgets.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::searchspace::HeadConfig;
use crate::trainer::Trial;

/// `configs` trained for `budget` epochs each.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Round {
    pub configs: usize,
    pub budget: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bracket {
    pub s: u32,
    pub rounds: Vec<Round>,
}

impl Bracket {
    pub fn trial_count(&self) -> usize {
        self.rounds.iter().map(|r| r.configs).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HyperbandPlan {
    pub max_budget: u32,
    pub eta: u32,
    /// Ordered from the most exploratory bracket (`s = s_max`) down to 0.
    pub brackets: Vec<Bracket>,
}

impl HyperbandPlan {
    pub fn trial_count(&self) -> usize {
        self.brackets.iter().map(Bracket::trial_count).sum()
    }
}

/// Brackets for maximum budget `max_budget` and reduction factor `eta`.
///
/// `s_max = floor(log_eta R)`; bracket `s` starts with
/// `ceil((s_max + 1) · eta^s / (s + 1))` configs, keeps `floor(n / eta)`
/// per round, and round `i` trains for `ceil(R / eta^(s - i))` epochs
/// (at least 1), so the last round of every bracket runs at `R`.
pub fn plan(max_budget: u32, eta: u32) -> Result<HyperbandPlan> {
    if max_budget < 1 {
        return Err(Error::precondition("plan", "maximum budget must be at least 1"));
    }
    if eta < 2 {
        return Err(Error::precondition("plan", format!("eta must be at least 2, got {eta}")));
    }
    let (r, eta64) = (max_budget as u64, eta as u64);
    let mut s_max = 0u32;
    while eta64.pow(s_max + 1) <= r {
        s_max += 1;
    }
    let brackets = (0..=s_max)
        .rev()
        .map(|s| {
            let first = ((s_max as u64 + 1) * eta64.pow(s)).div_ceil(s as u64 + 1);
            let rounds = (0..=s)
                .map(|i| Round {
                    configs: (first / eta64.pow(i)) as usize,
                    budget: r.div_ceil(eta64.pow(s - i)).max(1) as u32,
                })
                .collect();
            Bracket { s, rounds }
        })
        .collect();
    Ok(HyperbandPlan {
        max_budget,
        eta,
        brackets,
    })
}

/// Indices of the `keep` best trials by validation accuracy; ties go to
/// the smaller trial id. Returned in rank order.
pub fn promote(trials: &[Trial], keep: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..trials.len()).collect();
    idx.sort_by(|&a, &b| {
        trials[b]
            .val_acc
            .total_cmp(&trials[a].val_acc)
            .then(trials[a].trial_id.cmp(&trials[b].trial_id))
    });
    idx.truncate(keep);
    idx
}

/// Best trial trained at `budget`, by validation accuracy with ties to the
/// earlier id.
pub fn best_trial(trials: &[Trial], budget: u32) -> Option<&Trial> {
    trials
        .iter()
        .filter(|t| t.budget_epochs == budget)
        .max_by(|a, b| a.val_acc.total_cmp(&b.val_acc).then(b.trial_id.cmp(&a.trial_id)))
}

/// Source of new configurations, fed back with every finished trial.
pub trait Proposer {
    fn propose(&mut self, rng: &mut ChaCha8Rng) -> HeadConfig;
    fn observe(&mut self, trial: &Trial);
}

/// Trains one configuration. Called concurrently within a round.
pub trait Evaluator: Sync {
    fn evaluate(&self, config: &HeadConfig, budget_epochs: u32, seed: u64) -> Result<Trial>;
}

/// Training seed of a trial: a fixed function of the search seed and the
/// trial id, independent of scheduling.
pub fn trial_seed(search_seed: u64, trial_id: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(search_seed);
    rng.set_stream(trial_id + 1);
    rng.next_u64()
}

type TrialSink<'a> = Box<dyn FnMut(&Trial) -> Result<()> + 'a>;

/// Mutable state threaded through the brackets of one search.
pub struct SearchState<'a> {
    pub seed: u64,
    pub next_trial_id: u64,
    pub rng: ChaCha8Rng,
    pool: rayon::ThreadPool,
    sink: TrialSink<'a>,
}

impl<'a> SearchState<'a> {
    /// `sink` receives every trial in id order once its round finishes.
    pub fn new(seed: u64, parallel: usize, sink: impl FnMut(&Trial) -> Result<()> + 'a) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallel.max(1))
            .build()
            .map_err(|e| Error::precondition("search", e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        Ok(Self {
            seed,
            next_trial_id: 0,
            rng,
            pool,
            sink: Box::new(sink),
        })
    }

    fn run_round<E: Evaluator>(
        &mut self,
        configs: &[HeadConfig],
        budget: u32,
        tags: (u32, u32),
        evaluator: &E,
    ) -> Result<Vec<Trial>> {
        let jobs: Vec<(u64, HeadConfig)> = configs
            .iter()
            .map(|c| {
                let id = self.next_trial_id;
                self.next_trial_id += 1;
                (id, *c)
            })
            .collect();
        let seed = self.seed;
        let trials: Vec<Trial> = self.pool.install(|| {
            jobs.par_iter()
                .map(|&(id, config)| {
                    let trial_seed = trial_seed(seed, id);
                    let mut trial = evaluator.evaluate(&config, budget, trial_seed).unwrap_or_else(|e| {
                        log::warn!("trial {id} failed: {e}");
                        Trial {
                            trial_id: id,
                            config,
                            budget_epochs: budget,
                            seed: trial_seed,
                            val_acc: 0.0,
                            test_acc: 0.0,
                            train_steps: 0,
                            wall_ms: 0,
                            bracket: None,
                            rung: None,
                        }
                    });
                    trial.trial_id = id;
                    trial.bracket = Some(tags.0);
                    trial.rung = Some(tags.1);
                    trial
                })
                .collect()
        });
        for t in &trials {
            (self.sink)(t)?;
        }
        Ok(trials)
    }
}

/// Successive halving within one bracket. Survivors are retrained from
/// scratch at the next budget under new trial ids.
pub fn run_bracket<E: Evaluator>(
    bracket: &Bracket,
    proposer: &mut dyn Proposer,
    evaluator: &E,
    state: &mut SearchState<'_>,
) -> Result<Vec<Trial>> {
    let Some(first) = bracket.rounds.first() else {
        return Ok(Vec::new());
    };
    let mut configs: Vec<HeadConfig> = (0..first.configs).map(|_| proposer.propose(&mut state.rng)).collect();
    let mut all = Vec::with_capacity(bracket.trial_count());
    for (rung, round) in bracket.rounds.iter().enumerate() {
        let trials = state.run_round(&configs, round.budget, (bracket.s, rung as u32), evaluator)?;
        for t in &trials {
            proposer.observe(t);
        }
        if let Some(next) = bracket.rounds.get(rung + 1) {
            configs = promote(&trials, next.configs).into_iter().map(|i| trials[i].config).collect();
        }
        all.extend(trials);
    }
    Ok(all)
}

/// Every bracket of `plan`, most exploratory first.
pub fn run_search<E: Evaluator>(
    plan: &HyperbandPlan,
    proposer: &mut dyn Proposer,
    evaluator: &E,
    state: &mut SearchState<'_>,
) -> Result<Vec<Trial>> {
    let mut all = Vec::with_capacity(plan.trial_count());
    for bracket in &plan.brackets {
        log::info!("bracket s={} ({} trials)", bracket.s, bracket.trial_count());
        all.extend(run_bracket(bracket, proposer, evaluator, state)?);
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::searchspace::{baseline_config, sample_uniform, MlpSpec};

    fn rounds(p: &HyperbandPlan) -> Vec<Vec<(usize, u32)>> {
        p.brackets
            .iter()
            .map(|b| b.rounds.iter().map(|r| (r.configs, r.budget)).collect())
            .collect()
    }

    #[test]
    fn nine_by_three() {
        let p = plan(9, 3).unwrap();
        assert_eq!(
            rounds(&p),
            vec![vec![(9, 1), (3, 3), (1, 9)], vec![(5, 3), (1, 9)], vec![(3, 9)]]
        );
        assert_eq!(p.trial_count(), 22);
        assert_eq!(p.brackets[0].trial_count(), 13);
    }

    #[test]
    fn degenerate_and_invalid() {
        assert_eq!(rounds(&plan(1, 3).unwrap()), vec![vec![(1, 1)]]);
        assert_eq!(rounds(&plan(1, 2).unwrap()), vec![vec![(1, 1)]]);
        assert!(plan(0, 3).is_err());
        assert!(plan(9, 1).is_err());
    }

    #[test]
    fn non_power_budget_ends_at_max() {
        let p = plan(10, 3).unwrap();
        assert_eq!(
            rounds(&p),
            vec![vec![(9, 2), (3, 4), (1, 10)], vec![(5, 4), (1, 10)], vec![(3, 10)]]
        );
    }

    fn trial(id: u64, val: f64) -> Trial {
        Trial {
            trial_id: id,
            config: baseline_config(),
            budget_epochs: 1,
            seed: 0,
            val_acc: val,
            test_acc: 0.0,
            train_steps: 0,
            wall_ms: 0,
            bracket: None,
            rung: None,
        }
    }

    #[test]
    fn promotion_ties_prefer_earlier_ids() {
        let ts = vec![trial(4, 0.5), trial(2, 0.7), trial(3, 0.7), trial(1, 0.5)];
        assert_eq!(promote(&ts, 2), vec![1, 2]);
        assert_eq!(promote(&ts, 3), vec![1, 2, 3]);
        assert_eq!(promote(&ts, 10).len(), 4);
    }

    struct Uniform;

    impl Proposer for Uniform {
        fn propose(&mut self, rng: &mut ChaCha8Rng) -> HeadConfig {
            sample_uniform(rng, 32)
        }
        fn observe(&mut self, _: &Trial) {}
    }

    /// Scores a config by its MLP hidden width; layer-1 heads score 0.
    struct ByWidth;

    impl Evaluator for ByWidth {
        fn evaluate(&self, config: &HeadConfig, budget: u32, seed: u64) -> Result<Trial> {
            if config.mlp == MlpSpec::deep(2, 7) {
                return Err(Error::Data("boom".into()));
            }
            let val = config.mlp.hidden.unwrap_or(0) as f64 / 200.0;
            Ok(Trial {
                config: *config,
                budget_epochs: budget,
                seed,
                val_acc: val,
                ..trial(0, val)
            })
        }
    }

    #[test]
    fn survivors_are_the_top_of_each_round() {
        let p = plan(9, 3).unwrap();
        let mut seen = Vec::new();
        let mut state = SearchState::new(5, 1, |t: &Trial| {
            seen.push(t.trial_id);
            Ok(())
        })
        .unwrap();
        let trials = run_bracket(&p.brackets[0], &mut Uniform, &ByWidth, &mut state).unwrap();
        drop(state);
        assert_eq!(trials.len(), 13);
        assert_eq!(seen, (0..13).collect::<Vec<u64>>());
        let first: Vec<&Trial> = trials.iter().filter(|t| t.rung == Some(0)).collect();
        let second: Vec<&Trial> = trials.iter().filter(|t| t.rung == Some(1)).collect();
        let mut scores: Vec<f64> = first.iter().map(|t| t.val_acc).collect();
        scores.sort_by(|a, b| b.total_cmp(a));
        let mut kept: Vec<f64> = second.iter().map(|t| t.val_acc).collect();
        kept.sort_by(|a, b| b.total_cmp(a));
        assert_eq!(kept, scores[..3].to_vec());
        assert!(second.iter().all(|t| t.budget_epochs == 3 && t.bracket == Some(2)));
    }

    #[test]
    fn failures_are_recorded_as_zero() {
        struct Fixed(Vec<HeadConfig>);
        impl Proposer for Fixed {
            fn propose(&mut self, _: &mut ChaCha8Rng) -> HeadConfig {
                self.0.remove(0)
            }
            fn observe(&mut self, _: &Trial) {}
        }
        let bracket = Bracket {
            s: 1,
            rounds: vec![Round { configs: 2, budget: 1 }, Round { configs: 1, budget: 3 }],
        };
        let bad = HeadConfig {
            mlp: MlpSpec::deep(2, 7),
            ..baseline_config()
        };
        let good = HeadConfig {
            mlp: MlpSpec::deep(2, 100),
            ..baseline_config()
        };
        let mut state = SearchState::new(0, 1, |_: &Trial| Ok(())).unwrap();
        let trials = run_bracket(&bracket, &mut Fixed(vec![bad, good]), &ByWidth, &mut state).unwrap();
        assert_eq!(trials.len(), 3);
        assert_eq!(trials[0].val_acc, 0.0);
        assert_eq!(trials[2].config, good);
        assert_eq!(trials[2].trial_id, 2);
    }

    #[test]
    fn seeds_do_not_depend_on_parallelism() {
        let p = plan(9, 3).unwrap();
        let run = |parallel| {
            let mut state = SearchState::new(9, parallel, |_: &Trial| Ok(())).unwrap();
            run_search(&p, &mut Uniform, &ByWidth, &mut state).unwrap()
        };
        let a = run(1);
        assert_eq!(a.len(), 22);
        assert_eq!(a, run(3));
        assert_ne!(trial_seed(9, 0), trial_seed(9, 1));
    }
}
