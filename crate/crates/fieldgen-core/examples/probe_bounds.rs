// Dev probe: quality bounds — blurred-target oracle, prior-decode, sample sharpness.
use fieldgen_core::boundary::SampleSplit;
use fieldgen_core::diffusion::SamplerConfig;
use fieldgen_core::metrics;
use fieldgen_core::tensor::{Tape, Tensor};
use fieldgen_core::train::{load_models_from_checkpoint, load_split, Profile, RunConfig};

fn gaussian_blur(img: &Tensor<f32>, sigma: f64) -> Tensor<f32> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let ksum: f64 = kernel.iter().sum();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0f64; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let sx = clamp(x as isize + ki as isize - r, w);
                    acc += kv * img.data()[(ch * h + y) * w + sx] as f64;
                }
                tmp[(ch * h + y) * w + x] = acc / ksum;
            }
        }
    }
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let sy = clamp(y as isize + ki as isize - r, h);
                    acc += kv * tmp[(ch * h + sy) * w + x];
                }
                out[(ch * h + y) * w + x] = (acc / ksum) as f32;
            }
        }
    }
    Tensor::from_vec(img.shape(), out).unwrap()
}

fn hf_energy(img: &Tensor<f32>) -> f64 {
    // variance removed by a sigma=3 blur = fringe-band energy
    let blurred = gaussian_blur(img, 3.0);
    img.data().iter().zip(blurred.data()).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>()
        / img.numel() as f64
}

fn main() {
    let cfg = RunConfig::for_profile(Profile::Desk);
    let heldout = load_split(std::path::Path::new("/tmp/trend_trial/data"), SampleSplit::Heldout).unwrap();
    let models = load_models_from_checkpoint(
        &cfg,
        std::path::Path::new("/tmp/trend_trial/out/checkpoint_ep0020.ckpt"),
    )
    .unwrap();

    let mut blur_ssim = 0.0;
    let mut blur_mse = 0.0;
    let mut prior_ssim = 0.0;
    let mut prior_mse = 0.0;
    let mut hf_t = 0.0;
    let mut hf_g = 0.0;
    let mut gen_ssim = 0.0;
    for (i, item) in heldout.iter().enumerate() {
        let t = &item.sample.target;
        let b = gaussian_blur(t, 5.0);
        blur_ssim += metrics::ssim(&b, t).unwrap();
        blur_mse += metrics::mse_psnr(&b, t).unwrap().0;

        let mut tape = Tape::<f32>::inference();
        let bind = models.store.bind_all(&mut tape);
        let cn = tape.constant(item.cond.clone());
        let zp = models.prior.encode(&mut tape, &bind, cn).unwrap();
        let zp_raw = tape.scale(zp, 1.0 / models.latent_scale).unwrap();
        let dec = models.vae.decode(&mut tape, &bind, zp_raw).unwrap();
        prior_ssim += metrics::ssim(tape.value(dec), t).unwrap();
        prior_mse += metrics::mse_psnr(tape.value(dec), t).unwrap().0;

        let sampler = SamplerConfig { seed: 1000 + i as u64, ..cfg.sample.sampler };
        let (img, _) = fieldgen_core::diffusion::sample(
            &models.store, &models.vae, &models.dit, &item.cond, &sampler, &models.sched,
            models.latent_scale,
        )
        .unwrap();
        hf_t += hf_energy(t);
        hf_g += hf_energy(&img);
        gen_ssim += metrics::ssim(&img, t).unwrap();
    }
    let n = heldout.len() as f64;
    println!("blurred-target oracle: ssim {:.4} mse {:.5}", blur_ssim / n, blur_mse / n);
    println!("prior-decode:          ssim {:.4} mse {:.5}", prior_ssim / n, prior_mse / n);
    println!("hf energy target {:.5} vs generated {:.5}", hf_t / n, hf_g / n);
    println!("generated ssim (ep20): {:.4}", gen_ssim / n);
}
