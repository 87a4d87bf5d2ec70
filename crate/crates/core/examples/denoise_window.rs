//! A freshly built denoiser is the identity map; this shows the window shapes and
//! the per-sensor fusion weights.
//!
//! ```bash
//! cargo run --release --example denoise_window
//! ```

use gid::gidnet::{Gid, GidConfig};
use gid::numerics::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> gid::Result<()> {
    let cfg = GidConfig::default();
    let gid = Gid::new(&cfg, 1)?;
    println!("parameters: {}", gid.params.count());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::<f32>::randn(&[2, cfg.window, cfg.sensors, cfg.channels], 1.0, &mut rng);
    let y = gid.forward_windows(&x, false)?;
    let diff = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    println!("input {:?} -> output {:?}, max |y - x| = {diff}", x.shape(), y.shape());
    println!("fusion weights at init: {:?}", gid.net.alpha(&gid.params));
    Ok(())
}
