//! Fine-tune the single dense layer baseline and a convolutional head on
//! the trigram task, with and without a frozen base.
//!
//!     cargo run --release --example fine_tune

use headsearch::encoder::{pretrain, EncoderDims, PretrainSettings, SyntheticCorpus};
use headsearch::searchspace::{baseline_config, ConvSpec, HeadConfig, MlpSpec, PoolingKind};
use headsearch::tasks::{generate, TaskKind};
use headsearch::trainer::{fine_tune, TrainSettings};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> headsearch::Result<()> {
    let settings = PretrainSettings::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (base, _) = pretrain(&SyntheticCorpus::standard(0), EncoderDims::default(), &settings, &mut rng)?;

    let task = generate(TaskKind::Trigram, 0);
    let conv = HeadConfig {
        pooling: PoolingKind::Max,
        freeze_base: false,
        mlp: MlpSpec::single(),
        conv: ConvSpec::new(32, 5, 2, true),
        ..baseline_config()
    };
    for (name, config) in [("baseline", baseline_config()), ("conv", conv)] {
        for freeze_base in [false, true] {
            let config = HeadConfig { freeze_base, ..config };
            let t = fine_tune(&config, &task, &base, 5, 0, &TrainSettings::default())?;
            println!(
                "{name:8} frozen={freeze_base:5}  val {:.3}  test {:.3}  ({} steps)",
                t.val_acc, t.test_acc, t.train_steps
            );
        }
    }
    Ok(())
}
