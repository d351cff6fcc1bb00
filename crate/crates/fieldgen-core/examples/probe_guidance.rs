// Dev probe: guidance-scale sweep on the trained checkpoint.
use fieldgen_core::boundary::SampleSplit;
use fieldgen_core::train::{evaluate, load_models_from_checkpoint, load_split, Profile, RunConfig};

fn main() {
    let heldout = load_split(std::path::Path::new("/tmp/trend_trial/data"), SampleSplit::Heldout).unwrap();
    for w in [1.0f64, 1.5, 2.5] {
        let mut cfg = RunConfig::for_profile(Profile::Desk);
        cfg.sample.sampler.guidance = w;
        let models = load_models_from_checkpoint(
            &cfg,
            std::path::Path::new("/tmp/trend_trial/out/checkpoint_final.ckpt"),
        );
        // guidance lives outside the digest, so the checkpoint loads fine
        let models = models.unwrap();
        let r = evaluate(&models, &heldout, 1234).unwrap();
        println!("w={w}: ssim {:.4} mse {:.5}", r.mean_ssim(), r.mean_mse());
    }
}
