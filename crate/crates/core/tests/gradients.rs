//! Finite-difference verification of every differentiable block: 20
//! randomized small instances per block at relative tolerance 1e-4.

use std::time::Instant;
use tinyseg_core::gradcheck::{run_suite, BLOCKS, TOL};

#[test]
fn every_block_passes_twenty_random_instances() {
    let start = Instant::now();
    let results = run_suite(None, 20, 7).unwrap();
    assert_eq!(results.len(), BLOCKS.len());
    for r in &results {
        assert_eq!(r.instances, 20);
        assert!(r.checked >= 20, "{}: swept only {} scalars", r.name, r.checked);
        assert!(
            r.pass,
            "{}: max rel err {:.3e} exceeds {TOL:.0e} ({})",
            r.name,
            r.max_rel_err,
            r.detail.as_deref().unwrap_or("no detail")
        );
        println!("block={} checked={} max_rel_err={:.3e}", r.name, r.checked, r.max_rel_err);
    }
    let secs = start.elapsed().as_secs_f64();
    println!("suite wall time: {secs:.1}s");
    assert!(secs < 180.0, "suite took {secs:.1}s, budget is 180s");
}
