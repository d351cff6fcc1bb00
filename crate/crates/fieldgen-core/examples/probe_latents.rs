// Dev probe: latent statistics under a trained checkpoint (deleted before ship).
use fieldgen_core::boundary::SampleSplit;
use fieldgen_core::tensor::Tape;
use fieldgen_core::train::{load_models_from_checkpoint, load_split, Profile, RunConfig};

fn main() {
    let cfg = RunConfig::for_profile(Profile::Desk);
    let models = load_models_from_checkpoint(
        &cfg,
        std::path::Path::new("/tmp/trend_trial/out/checkpoint_ep0010.ckpt"),
    )
    .unwrap();
    let data = load_split(std::path::Path::new("/tmp/trend_trial/data"), SampleSplit::Train).unwrap();

    let mut all = Vec::new();
    for item in data.iter().take(12) {
        let mut tape = Tape::<f32>::inference();
        let bind = models.store.bind_all(&mut tape);
        let x = tape.constant(item.sample.target.clone());
        let (mu, logvar) = models.vae.encode(&mut tape, &bind, x).unwrap();
        all.extend_from_slice(tape.value(mu).data());
        let lv = tape.value(logvar).data();
        let lv_mean = lv.iter().map(|&v| v as f64).sum::<f64>() / lv.len() as f64;
        let mu_abs = tape.value(mu).data().iter().map(|v| v.abs()).fold(0.0f32, f32::max);
        println!("sample: mu max|.| {mu_abs:.3} logvar mean {lv_mean:.3}");
    }
    let n = all.len() as f64;
    let mean = all.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = all.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    println!("latent mu: mean {mean:.4} std {:.4} over {} values", var.sqrt(), all.len());

    // Prior latent stats too.
    let mut tape = Tape::<f32>::inference();
    let bind = models.store.bind_all(&mut tape);
    let c = tape.constant(data[0].cond.clone());
    let zp = models.prior.encode(&mut tape, &bind, c).unwrap();
    let zp_d = tape.value(zp).data();
    let zp_mean = zp_d.iter().map(|&v| v as f64).sum::<f64>() / zp_d.len() as f64;
    let zp_var = zp_d.iter().map(|&v| (v as f64 - zp_mean).powi(2)).sum::<f64>() / zp_d.len() as f64;
    println!("prior z: mean {zp_mean:.4} std {:.4}", zp_var.sqrt());
}
