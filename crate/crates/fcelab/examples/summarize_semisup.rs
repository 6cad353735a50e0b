//! Probe: emit the acceptance-cache semisup summary JSON for a finished run.

use fcelab::runner::{semisup_data, RunState};
use fcelab::semisup::{classification_accuracy, predict};

fn main() {
    let dir = std::env::args().nth(1).expect("usage: summarize_semisup RUN_DIR");
    let state = RunState::load(format!("{dir}/final.ckpt")).unwrap();
    let ebm = state.ebm.as_ref().unwrap();
    let (_, heldout) = semisup_data(&state.cfg).unwrap();
    let heldout_acc = classification_accuracy(ebm, &heldout).unwrap();
    let post = predict(ebm, &heldout.points).unwrap();
    let k = state.cfg.n_classes;
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in post.iter().zip(&heldout.labels) {
        sums[l as usize] += p[l as usize];
        counts[l as usize] += 1;
    }
    let own: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    let out = serde_json::json!({
        "heldout_acc": heldout_acc,
        "own_class_posterior": own,
    });
    println!("{}", serde_json::to_string(&out).unwrap());
}
