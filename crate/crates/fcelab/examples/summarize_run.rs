//! Probe: emit the acceptance-cache summary JSON for a finished run directory.

use fcelab::data::GroundTruth;
use fcelab::eval::{density_mse, EVAL_SEED};
use fcelab::runner::RunState;
use fcelab::train::jsd_diagnostic;

fn main() {
    let dir = std::env::args().nth(1).expect("usage: summarize_run RUN_DIR");
    let state = RunState::load(format!("{dir}/final.ckpt")).unwrap();
    let gm = GroundTruth::by_name("rings8").unwrap().gaussians().unwrap().clone();

    let mut mse_trace: Vec<(u64, u64, f64)> = Vec::new();
    let mut updates = 0u64;
    let text = std::fs::read_to_string(format!("{dir}/history.csv")).unwrap();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f[1] == "ebm" {
            updates += 1;
        }
        if !f[4].is_empty() {
            mse_trace.push((f[0].parse().unwrap(), updates, f[4].parse().unwrap()));
        }
    }

    let ebm = state.ebm.as_ref().unwrap();
    let final_mse = density_mse(|p| ebm.log_unnormalized_batch(p, 0), &gm).unwrap();
    let flow = state.flow.as_ref().unwrap();
    let final_jsd = jsd_diagnostic(flow, &gm, 2000, EVAL_SEED).unwrap();

    let (half, n) = (6.0, 400usize);
    let cell = 2.0 * half / n as f64;
    let mut mass = 0.0;
    for iy in 0..n {
        let y = -half + (iy as f64 + 0.5) * cell;
        let row: Vec<[f64; 2]> = (0..n).map(|ix| [-half + (ix as f64 + 0.5) * cell, y]).collect();
        mass += ebm
            .log_unnormalized_batch(&row, 0)
            .unwrap()
            .iter()
            .map(|l| l.exp())
            .sum::<f64>()
            * cell
            * cell;
    }

    let out = serde_json::json!({
        "final_mse": final_mse,
        "final_jsd": final_jsd,
        "mse_trace": mse_trace,
        "ebm_quadrature": mass,
    });
    println!("{}", serde_json::to_string(&out).unwrap());
}
