//! The two ablation tables: which logit terms to fuse, and where to place
//! the learned projections.
//!
//! ```text
//! cargo run --release --example ablation
//! ```

use calip::eval::{ablation_logits, ablation_projections};
use calip::{sample_split, synth, CalipHyper, TrainConfig};

fn main() -> calip::Result<()> {
    let bundle = synth::noisy_bundle(5, 6, 16, 240, 3, 3, 0.4);
    println!("terms      accuracy");
    for row in ablation_logits(&bundle, &CalipHyper::default())? {
        println!("{:<10} {:6.2}%", row.terms.to_string(), row.accuracy);
    }

    let bundle = synth::noisy_bundle(2, 4, 16, 160, 2, 2, 0.3);
    let split = sample_split(&bundle, 8, 0)?;
    let config = TrainConfig {
        epochs: 60,
        ..TrainConfig::default()
    };
    println!("\n{:<44} accuracy  train loss", "projections");
    for row in ablation_projections(&bundle, &split, &config)? {
        let loss = row.final_train_loss.map_or("-".to_string(), |l| format!("{l:.4}"));
        println!("{:<44} {:6.2}%   {loss}", row.mask.to_string(), row.accuracy);
    }
    Ok(())
}
