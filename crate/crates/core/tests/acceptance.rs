//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! The process exits 0 once every criterion has been evaluated, so a FAIL
//! line is a reported outcome rather than a broken build. Set
//! `GEOWIND_ACCEPTANCE_STRICT=1` to turn any FAIL into a nonzero exit.
//! `GEOWIND_WORKERS` sets the thread count and `GEOWIND_SUITE_SCALE`
//! shrinks path counts for quick runs.

use std::time::Instant;

use geowind_core::config::Tolerances;
use geowind_core::pipeline::resolve_workers;
use geowind_core::suite::{Suite, SuiteOptions};

fn main() {
    let workers = resolve_workers(None);
    let scale = std::env::var("GEOWIND_SUITE_SCALE").ok().and_then(|v| v.parse().ok()).unwrap_or(1.0);
    let strict = std::env::var("GEOWIND_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let opts = SuiteOptions { workers, scale, ..SuiteOptions::default() };
    let suite = Suite::new(opts, Tolerances::default());
    println!("acceptance: seed {}, workers {workers}, scale {scale}", opts.seed);
    let started = Instant::now();
    let mut failed = 0;
    for id in 1..=12 {
        let outcome = suite.run(id);
        if !outcome.pass {
            failed += 1;
        }
        println!("{}", outcome.line());
    }
    println!("acceptance: {} passed, {failed} failed in {:.0}s", 12 - failed, started.elapsed().as_secs_f64());
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
