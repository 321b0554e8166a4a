//! Scratch diagnostic: held-out learning curve for masked pretraining.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reldiff_core::dataset::{clip_path, load_clip, load_manifest, Split};
use reldiff_core::nn::Parameterized;
use reldiff_core::optim::AdamW;
use reldiff_core::vfm::{PretrainConfig, VfmPretrainer};
use std::path::Path;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(20000);
    let mask: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.9);
    let lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(2e-3);
    let ncap: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(usize::MAX);

    let root = Path::new("target/tmp/acceptance/data");
    let manifest = load_manifest(root).unwrap();
    let mut cfg = PretrainConfig::default();
    cfg.mask_ratio = mask;
    cfg.vfm.video = (8, 3, 32, 32);
    cfg.optim.lr = lr;
    cfg.decoder_layers = args
        .get(5)
        .map(|s| s.parse().unwrap())
        .unwrap_or(cfg.decoder_layers);

    let train: Vec<_> = manifest.split(Split::Train).collect();
    let clips: Vec<_> = train
        .iter()
        .take(ncap)
        .map(|r| load_clip(&clip_path(root, r), 8).unwrap().into_data())
        .collect();
    let val: Vec<_> = manifest
        .split(Split::Val)
        .take(32)
        .map(|r| load_clip(&clip_path(root, r), 8).unwrap().into_data())
        .collect();
    let mean = {
        let mut acc = 0.0f64;
        let mut n = 0usize;
        for c in &clips {
            acc += c.iter().map(|&v| v as f64).sum::<f64>();
            n += c.len();
        }
        (acc / n as f64) as f32
    };
    println!("train clips {} val clips {} mean {mean:.4}", clips.len(), val.len());

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = VfmPretrainer::<f32>::new(&cfg, &mut rng).unwrap();
    let mut opt = AdamW::new(cfg.optim);
    let warmup = 200usize;
    for step in 0..steps {
        opt.cfg.lr = if step < warmup {
            lr * (step + 1) as f64 / warmup as f64
        } else {
            let t = (step - warmup) as f64 / (steps - warmup).max(1) as f64;
            lr * (0.55 + 0.45 * (std::f64::consts::PI * t).cos())
        };
        model.zero_grads();
        let mut bl = 0.0;
        for _ in 0..cfg.batch {
            let clip = &clips[rng.gen_range(0..clips.len())];
            let code: u8 = rng.gen_range(0..16);
            let mut v = clip.clone();
            if code & 1 != 0 {
                v.invert_axis(ndarray::Axis(2));
            }
            if code & 2 != 0 {
                v.invert_axis(ndarray::Axis(3));
            }
            if code & 4 != 0 {
                v.swap_axes(2, 3);
                v = v.as_standard_layout().to_owned();
            }
            if code & 8 != 0 {
                v.invert_axis(ndarray::Axis(0));
            }
            let v = v.as_standard_layout().to_owned();
            let rows = model.sample_mask(mask, &mut rng);
            bl += model.loss_and_grad(&v, &rows, true).unwrap();
        }
        bl /= cfg.batch as f64;
        let s = 1.0 / cfg.batch as f32;
        model.visit_params(&mut |p| p.grad.mapv_inplace(|g| g * s));
        opt.clip_grads(&mut model);
        opt.update(&mut model);

        if (step + 1) % 500 == 0 {
            let mut erng = ChaCha8Rng::seed_from_u64(123);
            let mut ev = 0.0;
            let mut base = 0.0;
            for clip in &val {
                let rows = model.sample_mask(mask, &mut erng);
                ev += model.eval_mse(clip, &rows).unwrap();
                let patches = model.vfm.patchify(clip).unwrap();
                let mut acc = 0.0;
                for &n in &rows {
                    for k in 0..patches.ncols() {
                        let d = (patches[[n, k]] - mean) as f64;
                        acc += d * d;
                    }
                }
                base += acc / (rows.len() * patches.ncols()) as f64;
            }
            ev /= val.len() as f64;
            base /= val.len() as f64;
            println!(
                "step {:>6} train {bl:.5} eval {ev:.5} baseline {base:.5} ratio {:.3}",
                step + 1,
                ev / base
            );
        }
    }
}
