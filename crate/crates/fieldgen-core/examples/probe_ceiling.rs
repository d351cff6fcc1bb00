// Dev probe: VAE reconstruction ceiling + per-checkpoint sampling quality.
use fieldgen_core::boundary::SampleSplit;
use fieldgen_core::metrics;
use fieldgen_core::tensor::Tape;
use fieldgen_core::train::{evaluate, load_models_from_checkpoint, load_split, Profile, RunConfig};

fn main() {
    let cfg = RunConfig::for_profile(Profile::Desk);
    let heldout = load_split(std::path::Path::new("/tmp/trend_trial/data"), SampleSplit::Heldout).unwrap();

    // VAE reconstruction ceiling from the final checkpoint.
    let models = load_models_from_checkpoint(
        &cfg,
        std::path::Path::new("/tmp/trend_trial/out/checkpoint_final.ckpt"),
    )
    .unwrap();
    let mut ssim_sum = 0.0;
    let mut mse_sum = 0.0;
    for item in &heldout {
        let mut tape = Tape::<f32>::inference();
        let bind = models.store.bind_all(&mut tape);
        let x = tape.constant(item.sample.target.clone());
        let (mu, _) = models.vae.encode(&mut tape, &bind, x).unwrap();
        let rec = models.vae.decode(&mut tape, &bind, mu).unwrap();
        ssim_sum += metrics::ssim(tape.value(rec), &item.sample.target).unwrap();
        mse_sum += metrics::mse_psnr(tape.value(rec), &item.sample.target).unwrap().0;
    }
    println!(
        "VAE recon ceiling: ssim {:.4} mse {:.5}",
        ssim_sum / heldout.len() as f64,
        mse_sum / heldout.len() as f64
    );

    for name in ["checkpoint_ep0010.ckpt", "checkpoint_ep0020.ckpt", "checkpoint_ep0030.ckpt"] {
        let path = std::path::PathBuf::from("/tmp/trend_trial/out").join(name);
        if !path.exists() {
            continue;
        }
        let m = load_models_from_checkpoint(&cfg, &path).unwrap();
        let r = evaluate(&m, &heldout, 1234).unwrap();
        println!("{name}: ssim {:.4} mse {:.5}", r.mean_ssim(), r.mean_mse());
    }
}
