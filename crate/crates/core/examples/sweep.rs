//! Grid search over the fusion weights, using the same range syntax as the
//! command-line tool.
//!
//! ```text
//! cargo run --example sweep
//! ```

use calip::eval::parse_grid_spec;
use calip::{evaluate_zeroshot, sweep, synth, LogitTerms, SweepMode};

fn main() -> calip::Result<()> {
    let bundle = synth::noisy_bundle(3, 5, 16, 200, 3, 3, 0.4);
    let grid = parse_grid_spec("beta2=0.08:0.02:0.18,beta3=0|0.05|0.1,alpha_t=1|2,alpha_s=2")?;
    println!("{} grid points", grid.len());

    let result = sweep(&bundle, &grid, &SweepMode::ZeroShot)?;
    print!("{}", result.to_table());

    let best = result.best;
    println!(
        "\nbest: beta2={} beta3={} alpha_t={} -> {:.2}%",
        best.hyper.beta2, best.hyper.beta3, best.hyper.alpha_t, best.accuracy
    );

    // The sweep reuses cached logits; a fresh evaluation agrees exactly.
    let again = evaluate_zeroshot(&bundle, &best.hyper, &LogitTerms::default())?;
    assert_eq!(again.n_correct, best.n_correct);

    match parse_grid_spec("beta2=0.1:oops:0.3") {
        Err(e) => println!("malformed spec: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
