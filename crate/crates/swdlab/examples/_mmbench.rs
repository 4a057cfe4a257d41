use swdlab::tensor::{Rng, Tensor};
use std::time::Instant;

fn main() {
    // typical shapes: tokens(N*L) x C x C-ish products
    for &(m, k, n) in &[(2048usize, 64usize, 192usize), (2048, 64, 64), (512, 256, 256), (1024, 1024, 1024)] {
        let mut rng = Rng::new(1, 0);
        let a = Tensor::gaussian(&[m, k], &mut rng).unwrap();
        let b = Tensor::gaussian(&[k, n], &mut rng).unwrap();
        let reps = (2e9 / (m * k * n) as f64).max(1.0) as usize;
        let t0 = Instant::now();
        for _ in 0..reps {
            let c = a.matmul(&b).unwrap();
            std::hint::black_box(c.data()[0]);
        }
        let dt = t0.elapsed().as_secs_f64();
        let gf = 2.0 * (m * k * n * reps) as f64 / dt / 1e9;
        println!("{m}x{k}x{n}: {gf:.2} GFLOP/s ({reps} reps, {dt:.2}s)");
    }
}
