use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::grid::{Dims, DisplacementField, Volume};

pub(crate) fn random_volume(dims: Dims, seed: u64) -> Volume<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..dims.len()).map(|_| rng.random::<f64>()).collect();
    Volume::intensity(dims, data).unwrap()
}

pub(crate) fn random_field(dims: Dims, amplitude: f64, seed: u64) -> DisplacementField<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vectors = (0..dims.len())
        .map(|_| std::array::from_fn(|_| rng.random_range(-amplitude..amplitude)))
        .collect();
    DisplacementField::new(dims, [1.0; 3], vectors).unwrap()
}
