mod common;

use common::{ccr_case, ccs_case, check_gradient, rank_case, tiny_world, total_case, Check, GradCase};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn run(make: impl Fn(&mut ChaCha8Rng) -> GradCase, seed: u64, settings: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut done, mut nonzero, mut kinks) = (0, 0, 0);
    while done < settings {
        let case = make(&mut rng);
        match check_gradient(&case, H) {
            Check::Kink => kinks += 1,
            Check::Done { rel_err, nonzero: nz } => {
                assert!(rel_err < TOL, "{}: relative error {rel_err:e} at setting {done}", case.name);
                done += 1;
                nonzero += usize::from(nz);
            }
        }
    }
    assert!(nonzero * 2 >= settings, "only {nonzero} of {settings} settings had a nonzero gradient");
    assert!(kinks < settings, "{kinks} settings straddled a kink");
}

#[test]
fn ranking_loss_gradient() {
    run(rank_case, 1, 25);
}

#[test]
fn ccr_loss_gradient() {
    run(ccr_case, 2, 25);
}

#[test]
fn ccs_loss_gradient() {
    run(ccs_case, 3, 25);
}

#[test]
fn training_objective_gradient() {
    let world = tiny_world(5);
    run(|rng| total_case(rng, &world), 4, 25);
}
