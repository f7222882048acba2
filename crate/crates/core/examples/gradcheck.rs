//! Analytic gradients of the projection layers against central finite
//! differences, on a few instance sizes.
//!
//! ```text
//! cargo run --release --example gradcheck
//! ```

use calip::grad_check;

fn main() -> calip::Result<()> {
    for (seed, dims) in [(0, (4, 3, 8)), (1, (8, 4, 16)), (2, (1, 2, 3))] {
        let report = grad_check(seed, dims)?;
        println!("{report}\n");
        assert!(report.pass);
    }
    Ok(())
}
