//! Finite-difference check of every differentiable op and both losses.

use pshield::gradcheck;

fn main() -> pshield::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut worst: f64 = 0.0;
    for r in gradcheck::run(seed)? {
        println!("{:<24} {:>6} coords  max rel err {:.2e}", r.name, r.checked, r.max_rel_err);
        worst = worst.max(r.max_rel_err);
    }
    println!("worst {worst:.2e} (tolerance {:.0e})", gradcheck::TOLERANCE);
    Ok(())
}
