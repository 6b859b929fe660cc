//! Feed the density-ratio sampler observations whose good region is wide
//! MLP layers and watch its proposals move there.
//!
//!     cargo run --example bohb_sampler

use headsearch::bohb::{BohbSampler, ObservationStore, SamplerParams};
use headsearch::searchspace::{encode, sample_uniform, HeadConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn wide(c: &HeadConfig) -> bool {
    c.mlp.layers > 1 && c.mlp.hidden.is_some_and(|h| h >= 140)
}

fn share(sampler: &BohbSampler, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..500).filter(|_| wide(&sampler.propose(&mut rng))).count() as f64 / 500.0
}

fn main() -> headsearch::Result<()> {
    let base_dim = 32;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ObservationStore::new();
    for _ in 0..200 {
        let c = sample_uniform(&mut rng, base_dim);
        let good = c.mlp.hidden.is_some_and(|h| (150..=200).contains(&h));
        store.push(1, encode(&c), if good { 0.9 } else { 0.5 });
    }

    let prior = BohbSampler::new(SamplerParams::default(), base_dim)?;
    let fitted = BohbSampler::with_store(SamplerParams::default(), base_dim, store)?;
    let kdes = fitted.fit_kdes(1)?;
    println!("good KDE bandwidths: {:.3?}", kdes.good.bandwidths());
    println!("share of proposals with hidden >= 140");
    println!("  uniform prior: {:.2}", share(&prior, 1));
    println!("  fitted:        {:.2}", share(&fitted, 1));
    Ok(())
}
