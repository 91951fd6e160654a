//! Writes a synthetic pairwise count matrix in the loader's CSV format.
//!
//! Usage: `cargo run --example synth_counts -- K D PER_PAIR SEED > counts.csv`

use duelbench::dataset::sample_counts;
use duelbench::env::{make_instance, sphere_arms, DuelRng};
use duelbench::glm::Link;
use rand::SeedableRng;

fn main() {
    let args: Vec<u64> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("arguments are nonnegative integers"))
        .collect();
    let [k, d, per_pair, seed] = args[..] else {
        eprintln!("usage: synth_counts K D PER_PAIR SEED");
        std::process::exit(1);
    };
    let mut rng = DuelRng::seed_from_u64(seed);
    // Items on a sphere of radius 2 give preference probabilities spread over
    // roughly (0.02, 0.98), similar to crowd-sourced ordering data.
    let arms: Vec<_> = sphere_arms(k as usize, d as usize, &mut rng)
        .expect("valid sizes")
        .into_iter()
        .map(|a| a * 2.0)
        .collect();
    let inst = make_instance(d as usize, 1.0, Link::Logistic, seed ^ 0x5eed, false)
        .expect("valid instance")
        .with_arm_bound(2.0);
    let counts = sample_counts(&inst, &arms, per_pair, &mut rng);
    print!("{}", counts.to_csv());
}
