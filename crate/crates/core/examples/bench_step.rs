//! Scratch micro-benchmark for pretrainer step cost.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reldiff_core::nn::Parameterized;
use reldiff_core::vfm::{PretrainConfig, VfmPretrainer};
use std::time::Instant;

fn main() {
    let mut cfg = PretrainConfig::default();
    cfg.vfm.video = (8, 3, 32, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = VfmPretrainer::<f32>::new(&cfg, &mut rng).unwrap();
    let clip = ndarray::Array4::<f32>::from_shape_fn((8, 3, 32, 32), |_| 0.1);
    let mask = model.sample_mask(0.9, &mut rng);

    // forward-only
    let t = Instant::now();
    for _ in 0..20 {
        model.loss_and_grad(&clip, &mask, false).unwrap();
    }
    println!("forward only: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / 20.0);

    let t = Instant::now();
    for _ in 0..20 {
        model.zero_grads();
        model.loss_and_grad(&clip, &mask, true).unwrap();
    }
    println!("fwd+bwd:      {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / 20.0);

    // raw gemm reference: 256x128 x 128x128, 100 reps
    let a = ndarray::Array2::<f32>::ones((256, 128));
    let b = ndarray::Array2::<f32>::ones((128, 128));
    let t = Instant::now();
    let mut acc = 0.0f32;
    for _ in 0..100 {
        acc += a.dot(&b)[[0, 0]];
    }
    println!("gemm 256x128x128: {:.3} ms (acc {acc})", t.elapsed().as_secs_f64() * 1000.0 / 100.0);

    // tanh throughput
    let mut x = ndarray::Array2::<f32>::ones((256, 512));
    let t = Instant::now();
    for _ in 0..100 {
        x.mapv_inplace(|v| v.tanh());
    }
    println!("tanh 256x512: {:.3} ms per call", t.elapsed().as_secs_f64() * 1000.0 / 100.0);
}
