//! A CAM layer fed one pattern at a time: its read-out tracks exact discounted
//! softmax attention while the state stays the same size.
//!
//! cargo run --release --example cam_streaming -- [steps] [features]

use mnemosyne::cam::{CamConfig, CamLayer, ExactKernelMemory};
use mnemosyne::rf::Mechanism;
use mnemosyne::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> mnemosyne::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(500);
    let features: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(256);
    let dim = 8;
    let cfg = CamConfig {
        input_dim: dim,
        qk_dim: dim,
        features,
        discount: 0.05,
        mechanism: Mechanism::FavorPlusPlus,
        num_layers: 1,
        ..CamConfig::default()
    };
    let layer = CamLayer::new(&cfg, 1)?;
    let mut state = layer.init_state(1);
    let mut exact = ExactKernelMemory::new(cfg.discount);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut row = |scale: f64| {
        (0..dim)
            .map(|_| scale * rng.random_range(-1.0..1.0))
            .collect::<Vec<f64>>()
    };
    for t in 1..=steps {
        let (k, v, q) = (row(0.4), row(1.0), row(0.4));
        layer.update(
            &mut state,
            &Tensor::matrix(1, dim, k.clone())?,
            &Tensor::matrix(1, dim, v.clone())?,
        )?;
        exact.update(&k, &v);
        let got = layer.read(&mut state, &Tensor::matrix(1, dim, q.clone())?)?;
        let want = exact.read(&q)?;
        if t.is_power_of_two() || t == steps {
            let err = got
                .data()
                .iter()
                .zip(&want)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            let floats: usize = state.to_sections("s").iter().map(|(_, t)| t.numel()).sum();
            println!("t {t:>5}  max |cam - exact| {err:.4}  state floats {floats}  exact memory {} patterns", exact.len());
        }
    }
    Ok(())
}
