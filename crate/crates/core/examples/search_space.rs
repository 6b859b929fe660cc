//! Sample the head space, round-trip configs through the surrogate's
//! vector encoding, and validate a hand-written config.
//!
//!     cargo run --example search_space

use headsearch::searchspace::{
    cardinality, decode, encode, sample_uniform, ArchitectureColumn, PoolingKind,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> headsearch::Result<()> {
    let base_dim = 32;
    println!("discretized space size: {}", cardinality());

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..3 {
        let c = sample_uniform(&mut rng, base_dim);
        let v = encode(&c);
        assert_eq!(decode(&v), c);
        println!("{}", serde_json::to_string(&c)?);
        let values: Vec<String> = v.values.iter().map(|x| format!("{x:.2}")).collect();
        println!("  -> [{}]", values.join(", "));
    }

    // Six attention heads cannot split a 100-wide conv output; building the
    // config moves the conv width to the nearest multiple.
    let column = ArchitectureColumn {
        pooling: PoolingKind::Max,
        linear_layers: 2,
        hidden: Some(64),
        conv_layers: 2,
        conv_heads: Some(100),
        kernel: Some(5),
        skip: Some(true),
        attention_layers: 1,
        attention_heads: Some(6),
    };
    let (config, adjustments) = column.to_config(false, base_dim)?;
    for a in &adjustments {
        println!("adjusted {}: {} -> {}", a.field, a.from, a.to);
    }
    println!("valid: {}", config.is_valid(base_dim));
    Ok(())
}
