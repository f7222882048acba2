//! Zero-shot classification of a synthetic bundle, with and without the
//! attention terms, plus a look at a single image's logits.
//!
//! ```text
//! cargo run --example zeroshot
//! ```

use calip::eval::presets;
use calip::{calip_forward, evaluate_zeroshot, predict, synth, CalipHyper, LogitTerms};

fn main() -> calip::Result<()> {
    let bundle = synth::noisy_bundle(7, 6, 32, 240, 4, 4, 0.4);

    let clip = evaluate_zeroshot(&bundle, &CalipHyper::clip_only(), &LogitTerms::clip_only())?;
    let full = evaluate_zeroshot(&bundle, &CalipHyper::default(), &LogitTerms::default())?;
    let tuned = presets::preset("ImageNet")?.zeroshot_hyper();
    let preset = evaluate_zeroshot(&bundle, &tuned, &LogitTerms::default())?;
    println!("cosine baseline   {:6.2}%", clip.accuracy);
    println!("default weights   {:6.2}%", full.accuracy);
    println!("ImageNet preset   {:6.2}%", preset.accuracy);
    println!("{}", full.to_json_line());

    let first = &bundle.images()[0];
    let out = calip_forward(&first.spatial, bundle.text(), &CalipHyper::default())?;
    println!("\nimage 0 (label {}):", first.label);
    println!("  clip     {:?}", out.logits_clip.data());
    println!("  textual  {:?}", out.logits_textual.data());
    println!("  visual   {:?}", out.logits_visual.data());
    println!("  fused    {:?}", out.logits_fused.data());
    println!("  predicted class {}", predict(&out));
    Ok(())
}
