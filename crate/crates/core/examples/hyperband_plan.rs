//! Print a Hyperband schedule, then run it with density-ratio proposals
//! against a cheap synthetic objective instead of real training.
//!
//!     cargo run --example hyperband_plan -- 27 3

use headsearch::bohb::{BohbSampler, SamplerParams};
use headsearch::hyperband::{best_trial, plan, run_search, Evaluator, SearchState};
use headsearch::searchspace::{encode, HeadConfig, PoolingKind};
use headsearch::trainer::Trial;

/// Rewards max pooling and wide conv stacks, plus a little per epoch.
struct Synthetic;

impl Evaluator for Synthetic {
    fn evaluate(&self, config: &HeadConfig, budget_epochs: u32, seed: u64) -> headsearch::Result<Trial> {
        let v = encode(config).values;
        let pool = if config.pooling == PoolingKind::Max { 0.3 } else { 0.0 };
        let acc = (0.4 + pool + 0.2 * v[5] + 0.01 * budget_epochs as f64).min(1.0);
        Ok(Trial {
            trial_id: 0,
            config: *config,
            budget_epochs,
            seed,
            val_acc: acc,
            test_acc: acc,
            train_steps: 0,
            wall_ms: 0,
            bracket: None,
            rung: None,
        })
    }
}

fn main() -> headsearch::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<u32>());
    let r = args.next().transpose().ok().flatten().unwrap_or(9);
    let eta = args.next().transpose().ok().flatten().unwrap_or(3);

    let p = plan(r, eta)?;
    for b in &p.brackets {
        let rounds: Vec<String> = b.rounds.iter().map(|x| format!("{}@{}", x.configs, x.budget)).collect();
        println!("s={}: {}", b.s, rounds.join(" -> "));
    }
    println!("{} trials", p.trial_count());

    let mut sampler = BohbSampler::new(SamplerParams::default(), 32)?;
    let mut state = SearchState::new(0, 1, |_: &Trial| Ok(()))?;
    let trials = run_search(&p, &mut sampler, &Synthetic, &mut state)?;
    let max_pool = trials.iter().filter(|t| t.config.pooling == PoolingKind::Max).count();
    println!("{max_pool} of {} trials used max pooling", trials.len());
    if let Some(best) = best_trial(&trials, r) {
        println!("best at R: trial {} val {:.3}", best.trial_id, best.val_acc);
    }
    Ok(())
}
