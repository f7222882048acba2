//! Few-shot training of the projection layers on a 16-shot split, then
//! validation on the held-out images.
//!
//! ```text
//! cargo run --release --example fewshot_train
//! ```

use calip::parametric::ProjectionMask;
use calip::store::{load_weights, save_weights, WeightsFile};
use calip::{evaluate_fewshot, evaluate_zeroshot, fs_train, sample_split, synth, LogitTerms, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // 24 images per class: 16 train, 8 validation.
    let bundle = synth::latent_separable_bundle(1, 4, 16, 24, 2, 2, 0.5, 0.05);
    let split = sample_split(&bundle, 16, 0)?;
    let train = split.train_bundle(&bundle)?;
    let val = split.val_bundle(&bundle)?;

    let config = TrainConfig::default();
    let outcome = fs_train(&train, &config)?;
    for (epoch, loss) in outcome.loss_trace.iter().enumerate().step_by(25) {
        println!("epoch {epoch:>3}  loss {loss:.5}  lr {:.2e}", config.lr_at(epoch));
    }
    println!("loss {:.5} -> {:.5}", outcome.initial_loss, outcome.final_loss);
    println!("train accuracy {:.2}%", outcome.train_accuracy);

    let zs = evaluate_zeroshot(&val, &config.hyper, &LogitTerms::default())?;
    let fs = evaluate_fewshot(&val, &outcome.params, &config.hyper, &LogitTerms::default(), ProjectionMask::ALL)?;
    println!("validation: zero-shot {:.2}%  few-shot {:.2}%", zs.accuracy, fs.accuracy);

    let dir = std::env::temp_dir().join("calip-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("weights.calw");
    let file = WeightsFile {
        params: outcome.params,
        seed: config.seed,
        epochs: config.epochs as u32,
        lr: config.lr,
    };
    save_weights(&file, &path)?;
    assert_eq!(load_weights(&path)?, file);
    println!("weights written to {}", path.display());
    Ok(())
}
