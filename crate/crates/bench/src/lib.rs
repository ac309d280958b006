//! Shared fixtures for the criterion benches.

use pcaps_core::model::{msra_init, preset, Network};
use pcaps_core::{FeatureMap, FeatureMapShape, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform `[0, 1)` values of the given shape.
pub fn random_map<T: Scalar>(shape: FeatureMapShape, seed: u64) -> FeatureMap<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.len()).map(|_| T::lit(rng.random_range(0.0..1.0))).collect();
    FeatureMap::new(shape, data).expect("sized from shape")
}

/// A freshly initialized preset network, a random batch and labels.
pub fn network_fixture<T: Scalar>(name: &str, batch: usize) -> (Network<T>, FeatureMap<T>, Vec<usize>) {
    let config = preset(name).expect("built-in preset");
    let net = Network::new(config.clone(), msra_init::<T>(&config, 0)).expect("valid preset");
    let x = random_map(config.input_shape.with_batch(batch), 1);
    let labels = (0..batch).map(|i| i % config.classes()).collect();
    (net, x, labels)
}
