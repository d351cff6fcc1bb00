// Dev trial of the desk-scale training trend (deleted before ship).
use std::time::Instant;

use fieldgen_core::boundary::SampleSplit;
use fieldgen_core::train::{
    evaluate, generate_dataset, init_models, load_models_from_checkpoint, load_split,
    run_training, Profile, RunConfig,
};

fn main() {
    let t0 = Instant::now();
    let mut cfg = RunConfig::for_profile(Profile::Desk);
    let args: Vec<String> = std::env::args().collect();
    if args.len() > 1 {
        cfg.train.lr = args[1].parse().unwrap();
    }
    if args.len() > 2 {
        cfg.train.epochs = args[2].parse().unwrap();
    }
    let base = std::path::PathBuf::from("/tmp/trend_trial");
    let _ = std::fs::remove_dir_all(&base);
    let data_dir = base.join("data");
    let out_dir = base.join("out");
    std::fs::create_dir_all(&data_dir).unwrap();

    generate_dataset(&cfg, &data_dir).unwrap();
    println!("[{:?}] dataset done", t0.elapsed());

    let heldout = load_split(&data_dir, SampleSplit::Heldout).unwrap();
    println!("heldout n = {}", heldout.len());

    let fresh = init_models(&cfg).unwrap();
    let before = evaluate(&fresh, &heldout, 1234).unwrap();
    println!(
        "[{:?}] epoch-0: ssim {:.4} mse {:.4}",
        t0.elapsed(),
        before.mean_ssim(),
        before.mean_mse()
    );

    let outcome = run_training(&cfg, &data_dir, &out_dir, None).unwrap();
    println!("[{:?}] training done", t0.elapsed());
    let csv = std::fs::read_to_string(&outcome.metrics_csv).unwrap();
    for line in csv.lines().rev().take(3) {
        println!("tail: {line}");
    }

    let models = load_models_from_checkpoint(&cfg, &outcome.final_checkpoint).unwrap();
    println!("latent scale {:.4}", models.latent_scale);
    let after = evaluate(&models, &heldout, 1234).unwrap();
    println!(
        "[{:?}] trained: ssim {:.4} mse {:.4}",
        t0.elapsed(),
        after.mean_ssim(),
        after.mean_mse()
    );
    println!(
        "delta ssim {:+.4} (need >= +0.10), mse ratio {:.3} (need <= 0.7)",
        after.mean_ssim() - before.mean_ssim(),
        after.mean_mse() / before.mean_mse()
    );
}
