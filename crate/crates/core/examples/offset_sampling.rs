//! Learnable offset sampling around reference points: bilinear reads at
//! fractional positions, slot weighting, and the gradients that move the
//! offsets.

use ndarray::{Array1, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sspnet::nn::{Grads, ParamStore};
use sspnet::ple::{bilinear_sample, OffsetBank};

fn main() -> sspnet::Result<()> {
    // one channel rising to the right, one rising downwards
    let map = Array3::from_shape_fn((8, 6, 2), |(y, x, c)| if c == 0 { x as f64 } else { y as f64 });
    println!("map at (2.5, 3.25): {}", bilinear_sample(&map.view(), 2.5, 3.25));

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let bank = OffsetBank::new(&mut store, "demo", 2, 3, 2, &mut rng)?;
    let points = [(1.5, 2.0), (4.0, 5.5)];
    println!("offsets (points, slots, dx/dy):\n{}", store.get(&bank.offsets));
    let (pooled, means) = bank.pooled(&store, &map.view(), &points);
    println!("pooled feature {pooled}");

    // gradient of the first channel of the pooled feature
    let d_out = Array1::from(vec![1.0, 0.0]);
    let mut d_map = Array3::zeros(map.raw_dim());
    let mut grads = Grads::new();
    bank.pooled_backward(&store, &map.view(), &points, &means, &d_out.view(), &mut d_map.view_mut(), Some(&mut grads));
    println!("d/d offsets:\n{}", grads.get(&bank.offsets).unwrap());
    println!("d/d slot weights: {}", grads.get(&bank.attention).unwrap());
    Ok(())
}
