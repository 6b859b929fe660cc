//! Compare reverse-mode gradients of an assembled head with central
//! finite differences.
//!
//!     cargo run --release --example gradient_check

use std::sync::Arc;

use headsearch::head::build_head;
use headsearch::nn::{check_gradients, SeqLayout, Tensor};
use headsearch::searchspace::{ConvSpec, EncoderSpec, HeadConfig, MlpSpec, PoolingKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> headsearch::Result<()> {
    let (base_dim, classes) = (8, 3);
    let config = HeadConfig {
        pooling: PoolingKind::Mean,
        freeze_base: false,
        mlp: MlpSpec::deep(2, 6),
        conv: ConvSpec::new(6, 3, 2, true),
        encoder: EncoderSpec::new(2, 1),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let head = build_head(&config, base_dim, classes, &mut rng)?;
    // Two sequences of lengths 5 and 3, padded to 5.
    let layout = Arc::new(SeqLayout::new(2, 5, vec![5, 3])?);
    let features = Tensor::uniform(&[10, base_dim], 1.0, &mut rng);
    let labels = [2, 0];

    let mut inputs = vec![features];
    inputs.extend(head.store().tensors().iter().cloned());
    let report = check_gradients(&inputs, 1e-5, |g, vars| {
        let logits = head.forward(g, &vars[1..], vars[0], &layout)?;
        g.softmax_cross_entropy(logits, &labels)
    })?;
    println!(
        "{} parameters and inputs checked, max relative error {:.2e}",
        report.checked, report.max_rel_error
    );
    Ok(())
}
