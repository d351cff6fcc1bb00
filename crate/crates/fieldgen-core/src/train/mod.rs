//! Run orchestration: dataset generation, two-phase training (VAE
//! pretraining, then diffusion with the frozen VAE), periodic checkpoints,
//! evaluation, and the sampling entry point used by the CLI.
//!
//! Every random draw is derived from (master seed, purpose, epoch, step,
//! item), so a resumed run replays exactly the stream an uninterrupted run
//! would have consumed.

pub mod checkpoint;
mod config;

pub use config::{
    DatasetConfig, EvalCommand, ModelSpec, Profile, RunConfig, SampleCommand, TrainConfig,
};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand_core::RngCore;
use rayon::prelude::*;

use crate::boundary::{
    self, assemble_condition_tensor, canny_edges, rasterize_sketch, read_manifest,
    read_sample_verified, spatial_reference, write_manifest, write_sample, BoundarySample,
    DatasetManifest, ManifestEntry, SampleSplit, SourceGeometrySpec,
};
use crate::diffusion::{
    self, build_schedule, total_loss, BatchItem, ItemDraw, LossBreakdown, NoiseSchedule,
    RandomFeaturePyramid, SamplerConfig, FEATURE_PYRAMID_SEED,
};
use crate::dit::Dit;
use crate::error::{FieldgenError, Result};
use crate::metrics::{self, MetricReport, SampleMetrics};
use crate::params::{ParamId, ParamStore};
use crate::prior::{alpha, PriorEncoder};
use crate::rng;
use crate::tensor::{AdamW, AdamWConfig, Tape, Tensor};
use crate::vae::{kl_divergence, reparameterize, Vae};
use checkpoint::{read_checkpoint, write_checkpoint, CheckpointData, OptState};

/// Cap the rayon worker pool (the `FIELDGEN_THREADS` environment variable at
/// the CLI). Safe to call more than once; later calls are ignored.
pub fn configure_threads(limit: Option<usize>) {
    if let Some(n) = limit {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

/// All trainable components plus the shared parameter store and schedule.
pub struct Models {
    pub cfg: RunConfig,
    pub store: ParamStore,
    pub vae: Vae,
    pub prior: PriorEncoder,
    pub dit: Dit,
    pub perc: RandomFeaturePyramid,
    pub sched: NoiseSchedule,
    /// Multiplier standardizing VAE latents for the diffusion stage;
    /// calibrated after VAE pretraining and persisted in checkpoints.
    pub latent_scale: f64,
}

/// Fresh models for a config, seeded from `train.seed`.
pub fn init_models(cfg: &RunConfig) -> Result<Models> {
    let mut store = ParamStore::new();
    let mut r = rng::stream(cfg.train.seed, "model-init", &[]);
    let vae = Vae::init(&mut store, &mut r, cfg.model.vae)?;
    let prior = PriorEncoder::init(
        &mut store,
        &mut r,
        cfg.model.prior_base_width,
        cfg.model.vae.latent_channels,
    );
    let dit = Dit::init(&mut store, &mut r, cfg.model.dit.clone())?;
    let perc = RandomFeaturePyramid::new(FEATURE_PYRAMID_SEED);
    let sched = build_schedule(cfg.model.diffusion_steps);
    Ok(Models { cfg: cfg.clone(), store, vae, prior, dit, perc, sched, latent_scale: 1.0 })
}

impl Models {
    fn param_ids_where(&self, pred: impl Fn(&str) -> bool) -> Vec<ParamId> {
        self.store.ids().filter(|&id| pred(self.store.name(id))).collect()
    }

    pub fn vae_param_ids(&self) -> Vec<ParamId> {
        self.param_ids_where(|n| n.starts_with("vae."))
    }

    /// Everything trained in the diffusion phase (DiT, condition encoders,
    /// null tokens, spatial bias, prior).
    pub fn main_param_ids(&self) -> Vec<ParamId> {
        self.param_ids_where(|n| !n.starts_with("vae."))
    }

    fn latent_shape(&self) -> [usize; 3] {
        let d = &self.cfg.model.dit;
        [d.latent_channels, d.latent_side, d.latent_side]
    }

    /// Standard deviation of encoder means over (a capped prefix of) the
    /// training split, inverted into the diffusion-space scale. Deterministic
    /// in the dataset order.
    pub fn calibrate_latent_scale(&mut self, data: &[LoadedSample]) -> Result<f64> {
        let take = data.len().min(64);
        if take == 0 {
            return Err(FieldgenError::Config("cannot calibrate on an empty split".into()));
        }
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        let mut count = 0usize;
        for item in &data[..take] {
            let mut tape = Tape::<f32>::inference();
            let bind = self.store.bind_all(&mut tape);
            let x = tape.constant(item.sample.target.clone());
            let (mu, _) = self.vae.encode(&mut tape, &bind, x)?;
            for &v in tape.value(mu).data() {
                let v = v as f64;
                sum += v;
                sum_sq += v * v;
                count += 1;
            }
        }
        let mean = sum / count as f64;
        let var = (sum_sq / count as f64 - mean * mean).max(1e-12);
        let scale = (1.0 / var.sqrt()).clamp(0.05, 50.0);
        self.latent_scale = scale;
        Ok(scale)
    }

    fn apply_checkpoint(&mut self, data: &CheckpointData) -> Result<()> {
        if data.params.len() != self.store.len() {
            return Err(FieldgenError::Config(format!(
                "checkpoint has {} parameters, model has {}",
                data.params.len(),
                self.store.len()
            )));
        }
        for (name, value) in &data.params {
            let id = self
                .store
                .ids()
                .find(|&id| self.store.name(id) == name)
                .ok_or_else(|| {
                    FieldgenError::Config(format!("checkpoint parameter {name} unknown to model"))
                })?;
            self.store.set_value(id, value.clone())?;
        }
        Ok(())
    }
}

fn derive_u64(seed: u64, tag: &str, indices: &[u64]) -> u64 {
    rng::stream(seed, tag, indices).next_u64()
}

// ── dataset generation ───────────────────────────────────────────────

const SOURCE_MIN_SIDE: usize = 1;
const SOURCE_MAX_SIDE: usize = 6;
const SOURCE_MARGIN: usize = 2;
/// Range of amplitude x area. Steady-state field contrast scales with the
/// product, so normalizing the per-cell drive by the rectangle area keeps
/// target images comparably exposed across geometries.
const SOURCE_POWER_RANGE: (f64, f64) = (11.0, 28.0);
const SOURCE_WAVELENGTH: f64 = 20.0;
const CANNY_SIGMA: f64 = 1.0;
const CANNY_LO: f64 = 0.1;
const CANNY_HI: f64 = 0.3;

fn random_geometry(cfg: &RunConfig, index: u64) -> SourceGeometrySpec {
    let size = cfg.model.image_size;
    let mut r = rng::stream(cfg.dataset.seed, "geometry", &[index]);
    let width = SOURCE_MIN_SIDE + rng::below(&mut r, SOURCE_MAX_SIDE - SOURCE_MIN_SIDE + 1);
    let height = SOURCE_MIN_SIDE + rng::below(&mut r, SOURCE_MAX_SIDE - SOURCE_MIN_SIDE + 1);
    // Interior excludes the absorbing layer plus a safety margin.
    let lo = 10 + SOURCE_MARGIN;
    let hi_x = size - lo - width;
    let hi_y = size - lo - height;
    let x = lo + rng::below(&mut r, hi_x - lo + 1);
    let y = lo + rng::below(&mut r, hi_y - lo + 1);
    let power = rng::uniform_in(&mut r, SOURCE_POWER_RANGE.0, SOURCE_POWER_RANGE.1);
    let amplitude = power / (width * height) as f64;
    SourceGeometrySpec { x, y, width, height, amplitude, wavelength: SOURCE_WAVELENGTH }
}

/// Build one dataset record end to end: run the FDTD oracle for the sampled
/// geometry and derive the conditioning images.
///
/// Every sample shares one dataset-level FDTD seed (and therefore one source
/// phase), keeping the sketch-to-field mapping deterministic; target
/// diversity comes from the sampled geometry and drive power.
pub fn build_sample(cfg: &RunConfig, index: u64) -> Result<BoundarySample> {
    let size = cfg.model.image_size;
    let geometry = random_geometry(cfg, index);
    let sim = crate::fdtd::SimulationConfig::sized(size, size, cfg.dataset.fdtd_steps, geometry);
    let phase_seed = derive_u64(cfg.dataset.seed, "fdtd-seed", &[]);
    let snapshot = crate::fdtd::run(&sim, phase_seed)?;
    let target = crate::fdtd::snapshot_to_image(&snapshot, cfg.dataset.clip_amplitude as f32);
    let sketch = rasterize_sketch(&geometry, size, size)?;
    let edge = canny_edges(&sketch, CANNY_SIGMA, CANNY_LO, CANNY_HI);
    let spatial_ref = spatial_reference(size, size);
    Ok(BoundarySample { sketch, edge, spatial_ref, target, geometry, seed: phase_seed })
}

/// Generate `dataset.samples` records plus the manifest with digests and a
/// seeded train/heldout split.
pub fn generate_dataset(cfg: &RunConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let samples_dir = out_dir.join("samples");
    fs::create_dir_all(&samples_dir)?;
    let n = cfg.dataset.samples;

    // Seeded split: shuffle indices once, earmark the tail as held out.
    let mut order: Vec<usize> = (0..n).collect();
    let mut split_rng = rng::stream(cfg.dataset.seed, "split", &[]);
    rng::shuffle(&mut split_rng, &mut order);
    let heldout_count = (n as f64 * cfg.dataset.heldout_fraction).round() as usize;
    let mut split = vec![SampleSplit::Train; n];
    for &idx in order.iter().take(heldout_count) {
        split[idx] = SampleSplit::Heldout;
    }

    let entries: Vec<ManifestEntry> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<ManifestEntry> {
            let sample = build_sample(cfg, i as u64)?;
            let file = format!("samples/{i:06}.bin");
            let digest = write_sample(&sample, &out_dir.join(&file))
                .map_err(FieldgenError::Data)?;
            Ok(ManifestEntry { file, sha256: digest, split: split[i] })
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = DatasetManifest {
        format_version: boundary::FORMAT_VERSION,
        height: cfg.model.image_size,
        width: cfg.model.image_size,
        sample_count: n,
        samples: entries,
    };
    write_manifest(&manifest, out_dir).map_err(FieldgenError::Data)?;
    Ok(manifest)
}

/// A dataset record with its assembled 9-channel condition tensor.
#[derive(Debug)]
pub struct LoadedSample {
    pub sample: BoundarySample,
    pub cond: Tensor<f32>,
}

/// Load and verify one split of a dataset.
pub fn load_split(dataset_dir: &Path, split: SampleSplit) -> Result<Vec<LoadedSample>> {
    let manifest = read_manifest(dataset_dir).map_err(FieldgenError::Data)?;
    check_split_disjoint(&manifest)?;
    manifest
        .samples
        .iter()
        .filter(|e| e.split == split)
        .map(|e| {
            let sample = read_sample_verified(dataset_dir, e).map_err(FieldgenError::Data)?;
            let cond = assemble_condition_tensor(&sample).map_err(FieldgenError::Data)?;
            Ok(LoadedSample { sample, cond })
        })
        .collect()
}

fn check_split_disjoint(manifest: &DatasetManifest) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for e in &manifest.samples {
        if !seen.insert(&e.file) {
            return Err(FieldgenError::Config(format!(
                "sample file {} appears in more than one split entry",
                e.file
            )));
        }
    }
    Ok(())
}

// ── training ─────────────────────────────────────────────────────────

#[derive(Debug)]
pub struct TrainOutcome {
    pub vae_epochs_done: u64,
    pub epochs_done: u64,
    pub final_checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
}

struct Trainer {
    models: Models,
    opt_vae: AdamW<f32>,
    opt_main: AdamW<f32>,
    vae_ids: Vec<ParamId>,
    main_ids: Vec<ParamId>,
    vae_epochs_done: u64,
    epochs_done: u64,
}

impl Trainer {
    fn new(models: Models) -> Self {
        let vae_ids = models.vae_param_ids();
        let main_ids = models.main_param_ids();
        let vae_shapes: Vec<Vec<usize>> =
            vae_ids.iter().map(|&id| models.store.value(id).shape().to_vec()).collect();
        let main_shapes: Vec<Vec<usize>> =
            main_ids.iter().map(|&id| models.store.value(id).shape().to_vec()).collect();
        let t = &models.cfg.train;
        let opt_vae = AdamW::new(
            AdamWConfig { lr: t.vae_lr, weight_decay: t.weight_decay, ..Default::default() },
            &vae_shapes,
        );
        let opt_main = AdamW::new(
            AdamWConfig { lr: t.lr, weight_decay: t.weight_decay, ..Default::default() },
            &main_shapes,
        );
        Self { models, opt_vae, opt_main, vae_ids, main_ids, vae_epochs_done: 0, epochs_done: 0 }
    }

    fn to_checkpoint(&self) -> CheckpointData {
        let store = &self.models.store;
        let names = |ids: &[ParamId]| ids.iter().map(|&id| store.name(id).to_string()).collect();
        let opt_state = |opt: &AdamW<f32>, ids: &[ParamId]| {
            let (m, v) = opt.moments();
            OptState {
                cfg: opt.cfg,
                step: opt.step_count(),
                param_names: names(ids),
                m: m.to_vec(),
                v: v.to_vec(),
            }
        };
        CheckpointData {
            config_digest: self.models.cfg.digest(),
            master_seed: self.models.cfg.train.seed,
            latent_scale: self.models.latent_scale,
            vae_epochs_done: self.vae_epochs_done,
            epochs_done: self.epochs_done,
            params: store
                .ids()
                .map(|id| (store.name(id).to_string(), store.value(id).clone()))
                .collect(),
            opt_vae: opt_state(&self.opt_vae, &self.vae_ids),
            opt_main: opt_state(&self.opt_main, &self.main_ids),
        }
    }

    fn restore(&mut self, data: &CheckpointData) -> Result<()> {
        let want = self.models.cfg.digest();
        if data.config_digest != want {
            return Err(FieldgenError::Config(format!(
                "checkpoint config digest {} does not match current config {}; refusing to resume",
                data.config_digest, want
            )));
        }
        self.models.apply_checkpoint(data)?;
        self.models.latent_scale = data.latent_scale;
        self.opt_vae
            .restore(data.opt_vae.step, data.opt_vae.m.clone(), data.opt_vae.v.clone())?;
        self.opt_main
            .restore(data.opt_main.step, data.opt_main.m.clone(), data.opt_main.v.clone())?;
        self.vae_epochs_done = data.vae_epochs_done;
        self.epochs_done = data.epochs_done;
        Ok(())
    }

    fn shuffled_indices(&self, tag: &str, epoch: u64, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut r = rng::stream(self.models.cfg.train.seed, tag, &[epoch]);
        rng::shuffle(&mut r, &mut order);
        order
    }

    /// One VAE pretraining epoch (reconstruction L1 + 1e-4 KL).
    fn vae_epoch(&mut self, epoch: u64, data: &[LoadedSample], log: &mut impl Write) -> Result<()> {
        let cfg = &self.models.cfg;
        let order = self.shuffled_indices("vae-order", epoch, data.len());
        let batch = cfg.train.batch_size;
        for (step, chunk) in order.chunks(batch).enumerate() {
            let mut tape = Tape::<f32>::new();
            let bind = self.models.store.bind(&mut tape, |n| n.starts_with("vae."));
            let mut loss_terms = Vec::new();
            let mut l1_sum = 0.0f64;
            let mut kl_sum = 0.0f64;
            for (k, &idx) in chunk.iter().enumerate() {
                let target = tape.constant(data[idx].sample.target.clone());
                let (mu, logvar) = self.models.vae.encode(&mut tape, &bind, target)?;
                let mut nrng = rng::stream(
                    cfg.train.seed,
                    "vae-noise",
                    &[epoch, step as u64, k as u64],
                );
                let noise_t =
                    Tensor::from_vec(tape.shape(mu), rng::normal_vec(&mut nrng, tape.value(mu).numel()))?;
                let noise = tape.constant(noise_t);
                let z = reparameterize(&mut tape, mu, logvar, noise)?;
                let decoded = self.models.vae.decode(&mut tape, &bind, z)?;
                let l1 = tape.l1(decoded, target)?;
                let kl = kl_divergence(&mut tape, mu, logvar)?;
                let kl_w = tape.scale(kl, 1e-4)?;
                let item_loss = tape.add(l1, kl_w)?;
                loss_terms.push(item_loss);
                l1_sum += tape.value(l1).item() as f64;
                kl_sum += tape.value(kl).item() as f64;
            }
            let mut total = loss_terms[0];
            for &t in &loss_terms[1..] {
                total = tape.add(total, t)?;
            }
            let total = tape.scale(total, 1.0 / chunk.len() as f64)?;
            let grads = tape
                .backward(total)
                .map_err(|e| FieldgenError::Numeric(format!("vae epoch {epoch} step {step}: {e}")))?;
            let g = self.models.store.collect_grads(&bind, &grads, &self.vae_ids);
            let mut params: Vec<Tensor<f32>> =
                self.vae_ids.iter().map(|&id| self.models.store.value(id).clone()).collect();
            self.opt_vae
                .step(&mut params, &g)
                .map_err(|e| FieldgenError::Numeric(format!("vae epoch {epoch} step {step}: {e}")))?;
            for (&id, p) in self.vae_ids.iter().zip(params) {
                self.models.store.set_value(id, p)?;
            }
            writeln!(
                log,
                "{epoch},{step},{},{}",
                l1_sum / chunk.len() as f64,
                kl_sum / chunk.len() as f64
            )?;
        }
        self.vae_epochs_done = epoch + 1;
        Ok(())
    }

    /// One diffusion epoch over the composite objective with the frozen VAE.
    fn diffusion_epoch(
        &mut self,
        epoch: u64,
        data: &[LoadedSample],
        log: &mut impl Write,
    ) -> Result<Vec<LossBreakdown>> {
        let cfg = self.models.cfg.clone();
        let order = self.shuffled_indices("order", epoch, data.len());
        let a = alpha(epoch, &cfg.train.blend);
        let latent_shape = self.models.latent_shape();
        let latent_n: usize = latent_shape.iter().product();
        let mut breakdowns = Vec::new();
        for (step, chunk) in order.chunks(cfg.train.batch_size).enumerate() {
            let mut tape = Tape::<f32>::new();
            let bind = self.models.store.bind(&mut tape, |n| !n.starts_with("vae."));
            let items: Vec<BatchItem<'_>> = chunk
                .iter()
                .map(|&idx| BatchItem { target: &data[idx].sample.target, cond: &data[idx].cond })
                .collect();
            let draws: Vec<ItemDraw> = chunk
                .iter()
                .enumerate()
                .map(|(k, _)| {
                    let mut r = rng::stream(
                        cfg.train.seed,
                        "draw",
                        &[epoch, step as u64, k as u64],
                    );
                    let t = rng::below(&mut r, self.models.sched.steps);
                    let noise =
                        Tensor::from_vec(&latent_shape, rng::normal_vec(&mut r, latent_n))
                            .expect("noise shape");
                    let drop_condition = rng::uniform(&mut r) < cfg.train.cfg_drop_prob;
                    ItemDraw { t, noise, drop_condition }
                })
                .collect();
            let (total, breakdown) = total_loss(
                &mut tape,
                &bind,
                &self.models.vae,
                &self.models.prior,
                &self.models.dit,
                &self.models.perc,
                &self.models.sched,
                &cfg.train.weights,
                a,
                self.models.latent_scale,
                &items,
                &draws,
            )
            .map_err(|e| FieldgenError::Numeric(format!("epoch {epoch} step {step}: {e}")))?;
            if !breakdown.total.is_finite() {
                return Err(FieldgenError::Numeric(format!(
                    "epoch {epoch} step {step}: non-finite loss {}",
                    breakdown.total
                )));
            }
            let grads = tape
                .backward(total)
                .map_err(|e| FieldgenError::Numeric(format!("epoch {epoch} step {step}: {e}")))?;
            let g = self.models.store.collect_grads(&bind, &grads, &self.main_ids);
            let mut params: Vec<Tensor<f32>> =
                self.main_ids.iter().map(|&id| self.models.store.value(id).clone()).collect();
            self.opt_main
                .step(&mut params, &g)
                .map_err(|e| FieldgenError::Numeric(format!("epoch {epoch} step {step}: {e}")))?;
            for (&id, p) in self.main_ids.iter().zip(params) {
                self.models.store.set_value(id, p)?;
            }
            writeln!(
                log,
                "{epoch},{},{},{},{},{},{},{},{}",
                self.opt_main.step_count(),
                breakdown.diff,
                breakdown.recon,
                breakdown.edge,
                breakdown.perc,
                breakdown.prior,
                breakdown.total,
                breakdown.alpha
            )?;
            breakdowns.push(breakdown);
        }
        self.epochs_done = epoch + 1;
        Ok(breakdowns)
    }
}

/// Train (both phases) with periodic checkpoints. `resume` restores an
/// earlier checkpoint after verifying the config digest.
pub fn run_training(
    cfg: &RunConfig,
    dataset_dir: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir)?;
    let train_data = load_split(dataset_dir, SampleSplit::Train)?;
    if train_data.is_empty() {
        return Err(FieldgenError::Config("training split is empty".into()));
    }
    let heldout = if cfg.train.eval_every > 0 {
        load_split(dataset_dir, SampleSplit::Heldout)?
    } else {
        Vec::new()
    };

    let mut trainer = Trainer::new(init_models(cfg)?);
    if let Some(path) = resume {
        let data = read_checkpoint(path)?;
        trainer.restore(&data)?;
    }

    let metrics_csv = out_dir.join("metrics.csv");
    let mut log = fs::File::create(&metrics_csv)?;
    writeln!(log, "epoch,step,l_diff,l_recon,l_edge,l_perc,l_prior,total,alpha")?;
    let vae_csv = out_dir.join("vae_pretrain.csv");
    let mut vae_log = fs::File::create(&vae_csv)?;
    writeln!(vae_log, "epoch,step,l1,kl")?;
    let mut eval_log = if cfg.train.eval_every > 0 {
        let f = fs::File::create(out_dir.join("eval_history.csv"))?;
        Some(f)
    } else {
        None
    };
    if let Some(f) = eval_log.as_mut() {
        writeln!(f, "epoch,ssim,mse")?;
    }

    for epoch in trainer.vae_epochs_done..cfg.train.vae_epochs {
        trainer.vae_epoch(epoch, &train_data, &mut vae_log)?;
    }
    if trainer.epochs_done == 0 {
        trainer.models.calibrate_latent_scale(&train_data)?;
    }

    let ckpt_name = |epoch: u64| format!("checkpoint_ep{epoch:04}.ckpt");
    for epoch in trainer.epochs_done..cfg.train.epochs {
        trainer.diffusion_epoch(epoch, &train_data, &mut log)?;
        log.flush()?;
        let done = epoch + 1;
        if cfg.train.checkpoint_every > 0 && done % cfg.train.checkpoint_every == 0 {
            write_checkpoint(&trainer.to_checkpoint(), &out_dir.join(ckpt_name(done)))?;
        }
        if cfg.train.eval_every > 0 && done % cfg.train.eval_every == 0 && !heldout.is_empty() {
            let n = cfg.train.eval_samples.min(heldout.len());
            let report = evaluate(&trainer.models, &heldout[..n], cfg.train.seed)?;
            if let Some(f) = eval_log.as_mut() {
                writeln!(f, "{},{},{}", done, report.mean_ssim(), report.mean_mse())?;
                f.flush()?;
            }
        }
    }

    let final_path = out_dir.join("checkpoint_final.ckpt");
    write_checkpoint(&trainer.to_checkpoint(), &final_path)?;
    Ok(TrainOutcome {
        vae_epochs_done: trainer.vae_epochs_done,
        epochs_done: trainer.epochs_done,
        final_checkpoint: final_path,
        metrics_csv,
    })
}

// ── evaluation & sampling ────────────────────────────────────────────

/// Sample every record and score it against its ground truth. Rows keep the
/// input order; per-sample seeds derive from `base_seed` and the index, so
/// reports are reproducible and independent of worker scheduling.
pub fn evaluate(models: &Models, samples: &[LoadedSample], base_seed: u64) -> Result<MetricReport> {
    let rows: Vec<SampleMetrics> = samples
        .par_iter()
        .enumerate()
        .map(|(i, item)| -> Result<SampleMetrics> {
            let sampler = SamplerConfig {
                seed: derive_u64(base_seed, "eval-sample", &[i as u64]),
                ..models.cfg.sample.sampler
            };
            let (img, _) = diffusion::sample(
                &models.store,
                &models.vae,
                &models.dit,
                &item.cond,
                &sampler,
                &models.sched,
                models.latent_scale,
            )?;
            let target = &item.sample.target;
            let ssim = metrics::ssim(&img, target)?;
            let (mse, psnr_db) = metrics::mse_psnr(&img, target)?;
            let edge_fidelity = metrics::edge_fidelity(&img, target)?;
            let boundary_accuracy =
                metrics::boundary_accuracy(&img, target, &item.sample.sketch)?;
            Ok(SampleMetrics { ssim, mse, psnr_db, edge_fidelity, boundary_accuracy })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = MetricReport::default();
    for row in rows {
        report.push(row);
    }
    Ok(report)
}

/// Rebuild models for a config and load a checkpoint into them (digest
/// checked).
pub fn load_models_from_checkpoint(cfg: &RunConfig, ckpt: &Path) -> Result<Models> {
    let data = read_checkpoint(ckpt)?;
    let want = cfg.digest();
    if data.config_digest != want {
        return Err(FieldgenError::Config(format!(
            "checkpoint config digest {} does not match current config {}",
            data.config_digest, want
        )));
    }
    let mut models = init_models(cfg)?;
    models.apply_checkpoint(&data)?;
    models.latent_scale = data.latent_scale;
    Ok(models)
}

pub struct SampleOutcome {
    pub image_path: PathBuf,
    pub sidecar_path: PathBuf,
    pub image_sha256: String,
}

/// The `sample` command: build a condition tensor from the configured source
/// geometry (or a dataset sample file), run the sampler, write the image and
/// a JSON sidecar.
pub fn sample_command(cfg: &RunConfig, out_dir: &Path) -> Result<SampleOutcome> {
    let ckpt = cfg.sample.checkpoint.as_ref().ok_or_else(|| {
        FieldgenError::Config("sample.checkpoint must be set for the sample command".into())
    })?;
    let models = load_models_from_checkpoint(cfg, ckpt)?;
    let size = cfg.model.image_size;

    let (cond, geometry) = if let Some(file) = &cfg.sample.sample_file {
        let sample = boundary::read_sample(file).map_err(FieldgenError::Data)?;
        (assemble_condition_tensor(&sample).map_err(FieldgenError::Data)?, Some(sample.geometry))
    } else if let Some(source) = &cfg.sample.source {
        let sketch = rasterize_sketch(source, size, size).map_err(FieldgenError::Data)?;
        let edge = canny_edges(&sketch, CANNY_SIGMA, CANNY_LO, CANNY_HI);
        let synthetic = BoundarySample {
            sketch,
            edge,
            spatial_ref: spatial_reference(size, size),
            target: Tensor::zeros(&[3, size, size]),
            geometry: *source,
            seed: cfg.sample.sampler.seed,
        };
        (assemble_condition_tensor(&synthetic).map_err(FieldgenError::Data)?, Some(*source))
    } else {
        return Err(FieldgenError::Config(
            "sample command needs sample.source or sample.sample_file".into(),
        ));
    };

    fs::create_dir_all(out_dir)?;
    let (img, audit) = diffusion::sample(
        &models.store,
        &models.vae,
        &models.dit,
        &cond,
        &cfg.sample.sampler,
        &models.sched,
        models.latent_scale,
    )?;
    let image_path = out_dir.join("sample.pgm");
    boundary::io::write_pgm(&img, &image_path).map_err(FieldgenError::Data)?;
    let image_bytes = fs::read(&image_path)?;
    let image_sha256 = boundary::sha256_hex(&image_bytes);

    #[derive(serde::Serialize)]
    struct Sidecar<'a> {
        steps: usize,
        guidance: f64,
        eta: f64,
        seed: u64,
        checkpoint: &'a Path,
        condition_encodes: usize,
        injections_per_forward: usize,
        geometry: Option<SourceGeometrySpec>,
        image_sha256: &'a str,
    }
    let sidecar_path = out_dir.join("sample.json");
    let sidecar = Sidecar {
        steps: audit.denoise_steps,
        guidance: audit.guidance,
        eta: cfg.sample.sampler.eta,
        seed: cfg.sample.sampler.seed,
        checkpoint: ckpt,
        condition_encodes: audit.condition_encodes,
        injections_per_forward: audit.injections_per_forward,
        geometry,
        image_sha256: &image_sha256,
    };
    fs::write(
        &sidecar_path,
        serde_json::to_vec_pretty(&sidecar)
            .map_err(|e| FieldgenError::Config(format!("sidecar: {e}")))?,
    )?;
    Ok(SampleOutcome { image_path, sidecar_path, image_sha256 })
}

/// The `eval` command: sample every held-out record, write per-sample and
/// aggregate CSVs.
pub fn eval_command(cfg: &RunConfig, out_dir: &Path) -> Result<MetricReport> {
    let ckpt = cfg.eval.checkpoint.as_ref().ok_or_else(|| {
        FieldgenError::Config("eval.checkpoint must be set for the eval command".into())
    })?;
    let dataset_dir = cfg.eval.dataset.clone().unwrap_or_else(|| cfg.dataset.dir.clone());
    let models = load_models_from_checkpoint(cfg, ckpt)?;
    let heldout = load_split(&dataset_dir, SampleSplit::Heldout)?;
    if heldout.is_empty() {
        return Err(FieldgenError::Config("held-out split is empty".into()));
    }
    let report = evaluate(&models, &heldout, cfg.eval.seed)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("metrics_per_sample.csv"), report.per_sample_csv())?;
    fs::write(out_dir.join("metrics_aggregate.csv"), report.aggregate_csv())?;
    Ok(report)
}
