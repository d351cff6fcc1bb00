// Dev probe: where does sampling diverge? (deleted before ship)
use fieldgen_core::boundary::SampleSplit;
use fieldgen_core::diffusion::{
    cfg_combine, ddim_step, predict_x0, q_sample, timestep_subsequence, SamplerConfig,
};
use fieldgen_core::metrics;
use fieldgen_core::rng;
use fieldgen_core::tensor::{Tape, Tensor};
use fieldgen_core::train::{load_models_from_checkpoint, load_split, Profile, RunConfig};

fn stats(t: &Tensor<f32>) -> (f64, f64) {
    let n = t.numel() as f64;
    let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn main() {
    let cfg = RunConfig::for_profile(Profile::Desk);
    let models = load_models_from_checkpoint(
        &cfg,
        std::path::Path::new("/tmp/trend_trial/out/checkpoint_ep0010.ckpt"),
    )
    .unwrap();
    let gamma = models.latent_scale;
    println!("latent scale {gamma:.4}");
    let heldout = load_split(std::path::Path::new("/tmp/trend_trial/data"), SampleSplit::Heldout).unwrap();
    let item = &heldout[0];

    // 1. Single-step denoising on a training-style z_t (true latent + noise).
    let mut tape = Tape::<f32>::inference();
    let bind = models.store.bind_all(&mut tape);
    let x = tape.constant(item.sample.target.clone());
    let (mu, _) = models.vae.encode(&mut tape, &bind, x).unwrap();
    let z_true = tape.value(mu).map(|v| v * gamma as f32);
    println!("z_true(scaled) stats {:?}", stats(&z_true));
    let cond_node = tape.constant(item.cond.clone());
    let ctok = models.dit.encode_condition_tokens(&mut tape, &bind, cond_node).unwrap();
    let null = models.dit.null_condition_tokens(&tape, &bind);

    let mut r = rng::stream(5, "probe", &[]);
    for t in [100usize, 400, 700, 950] {
        let eps = Tensor::from_vec(z_true.shape(), rng::normal_vec(&mut r, z_true.numel())).unwrap();
        let zt = q_sample(&z_true, t, &eps, &models.sched).unwrap();
        let ztn = tape.constant(zt.clone());
        let (eh, _) = models.dit.forward(&mut tape, &bind, ztn, t, ctok).unwrap();
        let eps_err = tape.value(eh).max_abs_diff(&eps);
        let mse: f64 = tape.value(eh).data().iter().zip(eps.data())
            .map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>() / eps.numel() as f64;
        let z0h = predict_x0(&zt, t, tape.value(eh), &models.sched).unwrap();
        let z0n = tape.constant(z0h.map(|v| v / gamma as f32));
        let dec = models.vae.decode(&mut tape, &bind, z0n).unwrap();
        let ss = metrics::ssim(tape.value(dec), &item.sample.target).unwrap();
        println!("t={t}: eps mse {mse:.4} max {eps_err:.3}; single-step decode ssim {ss:.4} z0hat std {:.3}", stats(&z0h).1);
    }

    // 2. Full DDIM chains at w in {1.0, 2.5}, tracking latent scale drift.
    for w in [1.0f64, 2.5] {
        let mut z = Tensor::from_vec(
            &[64, 8, 8],
            rng::normal_vec(&mut rng::stream(7, "probe-z", &[]), 64 * 64),
        )
        .unwrap();
        let seq = timestep_subsequence(1000, 25);
        for (i, &t) in seq.iter().enumerate() {
            let tp: isize = if i + 1 < seq.len() { seq[i + 1] as isize } else { -1 };
            let zn = tape.constant(z.clone());
            let (ec, _) = models.dit.forward(&mut tape, &bind, zn, t, ctok).unwrap();
            let (eu, _) = models.dit.forward(&mut tape, &bind, zn, t, null).unwrap();
            let eg = cfg_combine(tape.value(eu), tape.value(ec), w).unwrap();
            z = ddim_step(&z, &eg, t, tp, &models.sched).unwrap();
            if i % 6 == 0 || i == 24 {
                let (eg_m, eg_s) = stats(&eg);
                println!("  w={w} step {i} t={t}: z std {:.3}, eps_g mean {eg_m:.3} std {eg_s:.3}", stats(&z).1);
            }
        }
        let zn = tape.constant(z.map(|v| v / gamma as f32));
        let dec = models.vae.decode(&mut tape, &bind, zn).unwrap();
        let ss = metrics::ssim(tape.value(dec), &item.sample.target).unwrap();
        let (mse, _) = metrics::mse_psnr(tape.value(dec), &item.sample.target).unwrap();
        println!("w={w}: final z std {:.3}; decode ssim {ss:.4} mse {mse:.4}", stats(&z).1);
    }
}
