//! Probe: train the EBM by pure NCE against a frozen flow noise model
//! (no alternation gate), reporting density MSE every 1000 updates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fcelab::data::GroundTruth;
use fcelab::ebm::EnergyModel;
use fcelab::eval::density_mse;
use fcelab::flow::draw_base;
use fcelab::optim::Optimizer;
use fcelab::runner::RunState;
use fcelab::train::fce_ebm_step;

fn main() {
    let ckpt = std::env::args().nth(1).expect("usage: flow_noise_probe FLOW_CKPT [ITERS]");
    let iters: u64 =
        std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(20_000);
    let state = RunState::load(&ckpt).unwrap();
    let flow = state.flow.as_ref().unwrap();
    let truth = GroundTruth::by_name("rings8").unwrap();
    let gm = truth.gaussians().unwrap();
    let data = truth.sample(20_000, 0x0da7a).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut ebm = EnergyModel::new(&[128, 128, 128], 1, &mut rng);
    let mut opt = Optimizer::adam(3e-4);
    use rand::seq::SliceRandom;
    for it in 1..=iters {
        let batch: Vec<[f64; 2]> = data.choose_multiple(&mut rng, 500).cloned().collect();
        let z = draw_base(500, &mut rng);
        let (v, acc) = fce_ebm_step(&mut ebm, flow, &batch, &z, &mut opt, 0.0).unwrap();
        if it % 1000 == 0 {
            let mse = density_mse(|p| ebm.log_unnormalized_batch(p, 0), gm).unwrap();
            println!("{it} value {v:.4} acc {acc:.3} mse {mse:.4}");
        }
    }
}
