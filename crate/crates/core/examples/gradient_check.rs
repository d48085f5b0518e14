//! Analytic policy-loss gradients against central finite differences.

use cmuzero::model::GaussianPolicy;
use cmuzero::training::{policy_objective, PolicyGradient};

fn main() -> cmuzero::Result<()> {
    let actions = vec![vec![-0.4, 0.1], vec![0.2, 0.6], vec![0.7, -0.3]];
    let counts = vec![5, 12, 3];
    let policy = GaussianPolicy::new(vec![0.1, -0.2], vec![-0.5, -1.0]);
    let h = 1e-6;
    for mode in [PolicyGradient::Pathwise, PolicyGradient::ScoreFunction] {
        let (value, _, d_mean, d_log_std) = policy_objective(&policy, &actions, &counts, 1.0, mode)?;
        println!("{mode:?}: objective {value:.6}");
        for d in 0..2 {
            let shifted = |dm: f64, ds: f64| -> cmuzero::Result<f64> {
                let mut p = policy.clone();
                p.mean[d] += dm;
                p.log_std[d] += ds;
                Ok(policy_objective(&p, &actions, &counts, 1.0, mode)?.0)
            };
            let fd_mean = (shifted(h, 0.0)? - shifted(-h, 0.0)?) / (2.0 * h);
            let fd_std = (shifted(0.0, h)? - shifted(0.0, -h)?) / (2.0 * h);
            println!("  d/dmean[{d}] {:+.6} fd {fd_mean:+.6}   d/dlogstd[{d}] {:+.6} fd {fd_std:+.6}", d_mean[d], d_log_std[d]);
        }
    }
    Ok(())
}
