//! Value transform and two-hot support encoding.

use cmuzero::model::{inverse_transform_scalar, scalar_to_support, support_to_scalar, transform_scalar};

fn main() {
    for x in [-250.0, -3.0, 0.0, 0.5, 3.0, 99.0, 316.0] {
        let y = transform_scalar(x);
        let support = scalar_to_support(y);
        let (lo, hi) = support
            .probabilities()
            .iter()
            .enumerate()
            .filter(|(_, p)| **p > 0.0)
            .fold((usize::MAX, 0), |(lo, hi), (i, _)| (lo.min(i), hi.max(i)));
        println!(
            "x {x:>8.2}  h(x) {y:>8.4}  bins {lo}..={hi}  decoded {:>8.4}  h^-1 {:>9.4}",
            support_to_scalar(&support),
            inverse_transform_scalar(support_to_scalar(&support)),
        );
    }
}
