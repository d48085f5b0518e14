//! Monte Carlo KL estimate against the closed form for two Gaussians.

use cmuzero::model::GaussianPolicy;
use cmuzero::training::kl_estimator;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let p = GaussianPolicy::new(vec![0.0], vec![0.0]);
    let q = GaussianPolicy::new(vec![1.0], vec![0.0]);
    println!("closed form KL = 0.5");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for n in [100, 1_000, 10_000, 100_000] {
        let (mean, var) = kl_estimator(&p, &q, n, &mut rng);
        println!("N {n:>6}: estimate {mean:.5}  std. error {:.5}", var.sqrt());
    }
}
