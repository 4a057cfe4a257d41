use swdlab::diffusion::*;
use swdlab::network::{DenoiserNet, NetConfig, Role};
use swdlab::tensor::{Adam, Rng, Tensor};

fn main() {
    let cfg = NetConfig { patch: 4, temporal_patch: 1, width: 64, depth: 2, heads: 4, num_classes: 1, max_grid: (8, 8, 8) };
    let mut net = DenoiserNet::init(cfg, Role::Teacher, &mut Rng::new(15, 0)).unwrap();
    let mut opt = Adam::new(2e-3);
    let mut rng = Rng::new(16, 0);
    let n = 512;
    let x0_all = Tensor::gaussian(&[n, 8, 8], &mut rng).unwrap();
    let t0 = std::time::Instant::now();
    for step in 0..3001 {
        let idx: Vec<usize> = (0..32).map(|_| rng.uniform_usize(n)).collect();
        let mut batch = Vec::with_capacity(32 * 64);
        for &i in &idx { batch.extend_from_slice(&x0_all.data()[i * 64..(i + 1) * 64]); }
        let x0 = Tensor::from_vec(batch, &[32, 8, 8]).unwrap();
        let loss = fm_train_step(&mut net, &mut opt, &x0, &vec![0usize; 32], &mut rng).unwrap();
        if step % 500 == 0 {
            let mut worst = 0.0f64;
            for tau in [0.2, 0.5, 0.8] {
                let xt = noise_to(&Tensor::gaussian(&[64, 8, 8], &mut Rng::new(18, 0)).unwrap(), tau, &Tensor::gaussian(&[64, 8, 8], &mut Rng::new(17, 0)).unwrap()).unwrap();
                let (v_hat, _) = net.forward(&xt, &vec![tau; 64], &vec![Some(0); 64], false).unwrap();
                let v_star = analytic_gaussian_v(&xt, tau, 0.0, 1.0).unwrap();
                worst = worst.max(v_hat.mse(&v_star).unwrap().item().sqrt());
            }
            println!("step {step}: loss {loss:.4}, worst rmse vs analytic {worst:.4}, elapsed {:.1}s", t0.elapsed().as_secs_f64());
        }
    }
}
