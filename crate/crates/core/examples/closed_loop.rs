//! Builds the aircraft experiment and runs one closed loop from y2 = -10.

use ddspc::experiment::{Experiment, ExperimentConfig};

fn main() -> ddspc::Result<()> {
    let exp = Experiment::build(ExperimentConfig::default())?;
    println!("estimated order {}, alpha {:.2}", exp.order.order, exp.alpha);
    let z0 = exp
        .config
        .simulation
        .initial
        .sample(&exp.model, &mut rand::thread_rng())?;
    let trace = exp.controller().run_closed_loop(z0, 20, 0, 0);
    for r in &trace.rows {
        println!(
            "k={:2} u={:8.4} y=[{:8.4} {:8.4} {:8.4}] mu={:.3} V={:10.2}",
            r.k, r.u[0], r.y[0], r.y[1], r.y[2], r.mu, r.value
        );
    }
    if let Some(f) = trace.failure {
        eprintln!("stopped: {f}");
    }
    Ok(())
}
