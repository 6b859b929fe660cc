//! Pretrain the base encoder and save it.
//!
//!     cargo run --release --example pretrain -- 2000 weights/base.hsw

use std::path::PathBuf;

use headsearch::encoder::{EncoderDims, PretrainSettings};
use headsearch::run::{cmd_pretrain, PretrainOptions};

fn main() -> headsearch::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().and_then(|s| s.parse().ok()).unwrap_or(300);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("headsearch-example.hsw"));

    let report = cmd_pretrain(&PretrainOptions {
        out: out.clone(),
        seed: 0,
        dims: EncoderDims::default(),
        settings: PretrainSettings {
            steps,
            ..PretrainSettings::default()
        },
    })?;
    println!("{steps} steps, saved to {}", out.display());
    println!("masked-token loss {:.3} -> {:.3}", report.initial_mlm_loss, report.final_mlm_loss);
    println!("shuffle detection {:.3} -> {:.3}", report.initial_order_acc, report.final_order_acc);
    Ok(())
}
