// Dev probe: final-checkpoint eval with the current sampler (deleted before ship).
use fieldgen_core::boundary::SampleSplit;
use fieldgen_core::train::{evaluate, init_models, load_models_from_checkpoint, load_split, Profile, RunConfig};

fn main() {
    let cfg = RunConfig::for_profile(Profile::Desk);
    let heldout = load_split(std::path::Path::new("/tmp/trend_trial/data"), SampleSplit::Heldout).unwrap();
    let fresh = init_models(&cfg).unwrap();
    let before = evaluate(&fresh, &heldout, 1234).unwrap();
    println!("epoch-0: ssim {:.4} mse {:.5}", before.mean_ssim(), before.mean_mse());
    let models = load_models_from_checkpoint(
        &cfg,
        std::path::Path::new("/tmp/trend_trial/out/checkpoint_final.ckpt"),
    )
    .unwrap();
    let after = evaluate(&models, &heldout, 1234).unwrap();
    for (name, mean, std, n) in after.aggregates() {
        println!("trained {name}: {mean:.4} +- {std:.4} (n={n})");
    }
    println!(
        "delta ssim {:+.4} (need >= +0.10), mse ratio {:.3} (need <= 0.7)",
        after.mean_ssim() - before.mean_ssim(),
        after.mean_mse() / before.mean_mse()
    );
}
