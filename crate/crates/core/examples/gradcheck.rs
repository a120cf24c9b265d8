//! Finite-difference check of every layer, both losses and a small network.

use locaug::gradcheck::{run_gradchecks, stock_cases};

fn main() -> locaug::Result<()> {
    let report = run_gradchecks(&stock_cases(), 20, 7)?;
    print!("{}", report.to_text());
    if !report.all_passed() {
        eprintln!("failing cases: {}", report.failures().join(", "));
        std::process::exit(1);
    }
    Ok(())
}
