//! Probe: replicate the acceptance harness's semisup run exactly.

use fcelab::config::{FlowInit, Method, RunConfig};
use fcelab::runner::{semisup_data, RunState};
use fcelab::semisup::classification_accuracy;

fn main() {
    let seed: u64 = std::env::args().nth(1).unwrap().parse().unwrap();
    let mut cfg = RunConfig::minimal(Method::Semisup, "spirals");
    cfg.seed = seed;
    cfg.flow_init = FlowInit::Trained;
    let mut state = RunState::fresh(cfg.clone()).unwrap();
    state.run_to(cfg.iterations).unwrap();
    let ebm = state.ebm.as_ref().unwrap();
    let (_, heldout) = semisup_data(&cfg).unwrap();
    println!("acc {}", classification_accuracy(ebm, &heldout).unwrap());
}
