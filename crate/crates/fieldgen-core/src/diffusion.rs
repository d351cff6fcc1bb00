//! Diffusion machinery: noise schedule, forward corruption, classifier-free
//! guidance, the deterministic DDIM sampler, and the composite training
//! loss.

use serde::{Deserialize, Serialize};

use crate::dit::{Dit, ForwardAudit};
use crate::params::{kaiming_uniform, Binding, ParamStore};
use crate::prior::PriorEncoder;
use crate::rng;
use crate::tensor::{NodeId, Result, Scalar, Tape, Tensor, TensorError};
use crate::vae::Vae;

/// Linear-beta forward process tables.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;

/// Beta linear from 1e-4 to 2e-2 over `t_max` steps, with the derived alpha
/// and cumulative-product tables.
pub fn build_schedule(t_max: usize) -> NoiseSchedule {
    assert!(t_max >= 2, "schedule needs at least 2 steps");
    let mut betas = Vec::with_capacity(t_max);
    let mut alphas = Vec::with_capacity(t_max);
    let mut alpha_bar = Vec::with_capacity(t_max);
    let mut product = 1.0f64;
    for t in 0..t_max {
        let beta = BETA_START + (BETA_END - BETA_START) * t as f64 / (t_max - 1) as f64;
        let alpha = 1.0 - beta;
        product *= alpha;
        betas.push(beta);
        alphas.push(alpha);
        alpha_bar.push(product);
    }
    NoiseSchedule { steps: t_max, betas, alphas, alpha_bar }
}

impl NoiseSchedule {
    /// Cumulative alpha at `t`; the conceptual step before the chain
    /// (t = -1) has alpha_bar = 1.
    pub fn alpha_bar_at(&self, t: isize) -> f64 {
        if t < 0 {
            1.0
        } else {
            self.alpha_bar[t as usize]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps {
            return Err(TensorError::Parameter(format!(
                "timestep {t} out of range for {}-step schedule",
                self.steps
            )));
        }
        Ok(())
    }
}

/// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.
pub fn q_sample<S: Scalar>(
    z0: &Tensor<S>,
    t: usize,
    eps: &Tensor<S>,
    sched: &NoiseSchedule,
) -> Result<Tensor<S>> {
    sched.check_t(t)?;
    if z0.shape() != eps.shape() {
        return Err(TensorError::Dimension(format!(
            "q_sample: z0 {:?} vs eps {:?}",
            z0.shape(),
            eps.shape()
        )));
    }
    let ab = sched.alpha_bar[t];
    let c0 = S::from_f64(ab.sqrt());
    let c1 = S::from_f64((1.0 - ab).sqrt());
    let data = z0
        .data()
        .iter()
        .zip(eps.data().iter())
        .map(|(&z, &e)| c0 * z + c1 * e)
        .collect();
    Tensor::from_vec(z0.shape(), data)
}

/// z0_hat = (z_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t).
pub fn predict_x0<S: Scalar>(
    z_t: &Tensor<S>,
    t: usize,
    eps_hat: &Tensor<S>,
    sched: &NoiseSchedule,
) -> Result<Tensor<S>> {
    sched.check_t(t)?;
    if z_t.shape() != eps_hat.shape() {
        return Err(TensorError::Dimension(format!(
            "predict_x0: z_t {:?} vs eps_hat {:?}",
            z_t.shape(),
            eps_hat.shape()
        )));
    }
    let ab = sched.alpha_bar[t];
    let c1 = S::from_f64((1.0 - ab).sqrt());
    let inv = S::from_f64(1.0 / ab.sqrt());
    let data = z_t
        .data()
        .iter()
        .zip(eps_hat.data().iter())
        .map(|(&z, &e)| (z - c1 * e) * inv)
        .collect();
    Tensor::from_vec(z_t.shape(), data)
}

/// Same recovery expressed on the tape, for loss paths that decode z0_hat.
pub fn predict_x0_node(
    tape: &mut Tape<f32>,
    z_t: NodeId,
    t: usize,
    eps_hat: NodeId,
    sched: &NoiseSchedule,
) -> Result<NodeId> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar[t];
    let scaled_eps = tape.scale(eps_hat, (1.0 - ab).sqrt())?;
    let num = tape.sub(z_t, scaled_eps)?;
    tape.scale(num, 1.0 / ab.sqrt())
}

/// eps_guided = eps_uncond + w (eps_cond - eps_uncond). The w = 0 and w = 1
/// endpoints return the branch inputs exactly.
pub fn cfg_combine<S: Scalar>(
    eps_uncond: &Tensor<S>,
    eps_cond: &Tensor<S>,
    w: f64,
) -> Result<Tensor<S>> {
    if eps_uncond.shape() != eps_cond.shape() {
        return Err(TensorError::Dimension(format!(
            "cfg_combine: {:?} vs {:?}",
            eps_uncond.shape(),
            eps_cond.shape()
        )));
    }
    if w == 0.0 {
        return Ok(eps_uncond.clone());
    }
    if w == 1.0 {
        return Ok(eps_cond.clone());
    }
    let wf = S::from_f64(w);
    let data = eps_uncond
        .data()
        .iter()
        .zip(eps_cond.data().iter())
        .map(|(&u, &c)| u + wf * (c - u))
        .collect();
    Tensor::from_vec(eps_uncond.shape(), data)
}

/// Widest plausible magnitude of a standardized clean latent. At high t the
/// 1/sqrt(abar) factor in predict_x0 turns small noise-prediction errors
/// into arbitrarily large z0 estimates and the trajectory leaves the data
/// manifold; clamping the intermediate estimate keeps the chain bounded
/// without touching estimates that are already in range.
pub const DDIM_Z0_CLIP: f64 = 4.0;

/// One deterministic DDIM update from `t` down to `t_prev` (t_prev = -1 ends
/// the chain and returns z0_hat exactly). The intermediate clean-latent
/// estimate is clamped to [-DDIM_Z0_CLIP, DDIM_Z0_CLIP].
pub fn ddim_step<S: Scalar>(
    z_t: &Tensor<S>,
    eps_hat: &Tensor<S>,
    t: usize,
    t_prev: isize,
    sched: &NoiseSchedule,
) -> Result<Tensor<S>> {
    if t_prev >= t as isize {
        return Err(TensorError::Parameter(format!(
            "ddim_step: t_prev {t_prev} must be below t {t}"
        )));
    }
    let z0 = predict_x0(z_t, t, eps_hat, sched)?;
    let ab_prev = sched.alpha_bar_at(t_prev);
    let c0 = S::from_f64(ab_prev.sqrt());
    let c1 = S::from_f64((1.0 - ab_prev).sqrt());
    let clip = S::from_f64(DDIM_Z0_CLIP);
    let data = z0
        .data()
        .iter()
        .zip(eps_hat.data().iter())
        .map(|(&z, &e)| c0 * z.maximum(-clip).minimum(clip) + c1 * e)
        .collect();
    Tensor::from_vec(z_t.shape(), data)
}

/// Evenly spaced descending timestep subsequence; with T = 1000 and 25 steps
/// this is 999, 959, ..., 39 and the final step lands on t_prev = -1.
pub fn timestep_subsequence(t_max: usize, steps: usize) -> Vec<usize> {
    assert!(steps >= 1 && steps <= t_max);
    let stride = t_max / steps;
    (0..steps).map(|i| t_max - 1 - i * stride).collect()
}

/// Weights of the composite objective. Defaults are the published
/// coefficients (1, 0.3, 0.1, 0.3, 0.4).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub diff: f64,
    pub recon: f64,
    pub edge: f64,
    pub perc: f64,
    pub prior: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { diff: 1.0, recon: 0.3, edge: 0.1, perc: 0.3, prior: 0.4 }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance: f64,
    /// Stochasticity knob; only the deterministic eta = 0 variant is
    /// implemented.
    pub eta: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 25, guidance: 2.5, eta: 0.0, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self, t_max: usize) -> Result<()> {
        if self.steps < 1 || self.steps > t_max {
            return Err(TensorError::Parameter(format!(
                "sampler steps {} outside [1, {t_max}]",
                self.steps
            )));
        }
        if self.eta != 0.0 {
            return Err(TensorError::Parameter(
                "only deterministic sampling (eta = 0) is supported".into(),
            ));
        }
        Ok(())
    }
}

/// Frozen random convolutional pyramid standing in for a pretrained
/// perceptual network: three stride-2 stages whose activations define a
/// multi-scale feature distance. Weights are fixed by a constant seed and
/// never trained.
pub struct RandomFeaturePyramid {
    kernels: Vec<Tensor<f32>>,
}

pub const FEATURE_PYRAMID_SEED: u64 = 7777;
const FEATURE_WIDTHS: [usize; 3] = [8, 16, 32];

impl RandomFeaturePyramid {
    pub fn new(seed: u64) -> Self {
        let mut r = rng::stream(seed, "feature-pyramid", &[]);
        let mut kernels = Vec::new();
        let mut cin = 3;
        for &cout in FEATURE_WIDTHS.iter() {
            kernels.push(kaiming_uniform(&mut r, &[cout, cin, 3, 3], cin * 9));
            cin = cout;
        }
        Self { kernels }
    }

    fn features(&self, tape: &mut Tape<f32>, image: NodeId) -> Result<Vec<NodeId>> {
        let mut feats = Vec::with_capacity(self.kernels.len());
        let mut x = image;
        for k in &self.kernels {
            let kn = tape.constant(k.clone());
            x = tape.conv2d(x, kn, 1, 1)?;
            x = tape.silu(x)?;
            x = tape.avg_pool2(x)?;
            feats.push(x);
        }
        Ok(feats)
    }

    /// Sum of stage-wise mean squared feature distances.
    pub fn distance(&self, tape: &mut Tape<f32>, a: NodeId, b: NodeId) -> Result<NodeId> {
        let fa = self.features(tape, a)?;
        let fb = self.features(tape, b)?;
        let mut total: Option<NodeId> = None;
        for (na, nb) in fa.into_iter().zip(fb) {
            let d = tape.mse(na, nb)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, d)?,
                None => d,
            });
        }
        Ok(total.expect("pyramid has stages"))
    }
}

/// Sobel gradient magnitude of a `[c, h, w]` image, per channel, on the
/// tape (differentiable edge operator for the edge-consistency loss).
pub fn sobel_magnitude_node(tape: &mut Tape<f32>, image: NodeId) -> Result<NodeId> {
    let shape = tape.shape(image).to_vec();
    if shape.len() != 3 {
        return Err(TensorError::Dimension(format!(
            "sobel_magnitude: image {shape:?}"
        )));
    }
    let gx_k = tape.constant(
        Tensor::from_vec(
            &[1, 1, 3, 3],
            vec![-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0],
        )
        .expect("sobel kernel"),
    );
    let gy_k = tape.constant(
        Tensor::from_vec(
            &[1, 1, 3, 3],
            vec![-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0],
        )
        .expect("sobel kernel"),
    );
    let mut mags = Vec::with_capacity(shape[0]);
    for c in 0..shape[0] {
        let ch = tape.slice_channels(image, c, 1)?;
        let gx = tape.conv2d(ch, gx_k, 1, 1)?;
        let gy = tape.conv2d(ch, gy_k, 1, 1)?;
        let gx2 = tape.mul(gx, gx)?;
        let gy2 = tape.mul(gy, gy)?;
        let s = tape.add(gx2, gy2)?;
        let s = tape.add_scalar(s, 1e-12)?;
        mags.push(tape.sqrt(s)?);
    }
    tape.concat_channels(&mags)
}

/// Per-term values of one training step.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossBreakdown {
    pub diff: f64,
    pub recon: f64,
    pub edge: f64,
    pub perc: f64,
    pub prior: f64,
    pub total: f64,
    pub alpha: f64,
}

/// One batch item: ground-truth field image and its 9-channel conditions.
pub struct BatchItem<'a> {
    pub target: &'a Tensor<f32>,
    pub cond: &'a Tensor<f32>,
}

/// Pre-drawn randomness for one batch item.
pub struct ItemDraw {
    pub t: usize,
    pub noise: Tensor<f32>,
    /// Replace the condition tokens by the learned null tokens
    /// (classifier-free guidance training).
    pub drop_condition: bool,
}

/// Build the composite objective on a tape:
/// total = w_diff L_diff + w_recon L_recon + w_edge L_edge + w_perc L_perc
///       + w_prior L_prior, each term averaged over the batch.
///
/// The diffusion runs in standardized latent space: encoder means are
/// multiplied by `latent_scale` (calibrated once after VAE pretraining so
/// their standard deviation is ~1, matching the sampler's unit-normal
/// start) and divided back out before decoding. The blended latent fed to
/// the forward process is a constant (training data), so diffusion
/// gradients do not leak into the VAE or the prior; the prior trains
/// through its own alignment term against a gradient-isolated copy of the
/// scaled VAE mean.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape<f32>,
    bind: &Binding,
    vae: &Vae,
    prior_enc: &PriorEncoder,
    dit: &Dit,
    perc: &RandomFeaturePyramid,
    sched: &NoiseSchedule,
    weights: &LossWeights,
    alpha: f64,
    latent_scale: f64,
    items: &[BatchItem<'_>],
    draws: &[ItemDraw],
) -> Result<(NodeId, LossBreakdown)> {
    if items.is_empty() || items.len() != draws.len() {
        return Err(TensorError::Parameter(format!(
            "total_loss: {} items vs {} draws",
            items.len(),
            draws.len()
        )));
    }
    if latent_scale <= 0.0 {
        return Err(TensorError::Parameter(format!(
            "latent_scale {latent_scale} must be positive"
        )));
    }
    let mut terms: Vec<[NodeId; 5]> = Vec::with_capacity(items.len());
    for (item, draw) in items.iter().zip(draws.iter()) {
        let target = tape.constant(item.target.clone());
        let cond = tape.constant(item.cond.clone());

        let (mu, _logvar) = vae.encode(tape, bind, target)?;
        let mu_scaled = tape.scale(mu, latent_scale)?;
        let z_prior = prior_enc.encode(tape, bind, cond)?;
        let z_true_frozen = tape.detach(mu_scaled);
        let l_prior = tape.mse(z_prior, z_true_frozen)?;

        let z_mixed =
            crate::prior::blend_latents(tape.value(mu_scaled), tape.value(z_prior), alpha)?;
        let z_t_value = q_sample(&z_mixed, draw.t, &draw.noise, sched)?;
        let z_t = tape.constant(z_t_value);

        let cond_tokens = if draw.drop_condition {
            dit.null_condition_tokens(tape, bind)
        } else {
            dit.encode_condition_tokens(tape, bind, cond)?
        };
        let (eps_hat, _audit) = dit.forward(tape, bind, z_t, draw.t, cond_tokens)?;
        let eps = tape.constant(draw.noise.clone());
        let l_diff = tape.mse(eps_hat, eps)?;

        // The decode path clamps the clean-latent estimate exactly like the
        // sampler, so the pixel-space terms stay informative at high t where
        // the 1/sqrt(abar) amplification would otherwise swamp them.
        let z0_hat = predict_x0_node(tape, z_t, draw.t, eps_hat, sched)?;
        let z0_clamped = tape.clamp(z0_hat, -DDIM_Z0_CLIP, DDIM_Z0_CLIP)?;
        let z0_unscaled = tape.scale(z0_clamped, 1.0 / latent_scale)?;
        let decoded = vae.decode(tape, bind, z0_unscaled)?;
        let l_recon = tape.l1(decoded, target)?;

        let edges_hat = sobel_magnitude_node(tape, decoded)?;
        let edges_ref = sobel_magnitude_node(tape, target)?;
        let l_edge = tape.l1(edges_hat, edges_ref)?;

        let l_perc = perc.distance(tape, decoded, target)?;

        terms.push([l_diff, l_recon, l_edge, l_perc, l_prior]);
    }

    let inv_b = 1.0 / items.len() as f64;
    let mut mean_terms = [None::<NodeId>; 5];
    for item_terms in &terms {
        for (k, &t) in item_terms.iter().enumerate() {
            mean_terms[k] = Some(match mean_terms[k] {
                Some(acc) => tape.add(acc, t)?,
                None => t,
            });
        }
    }
    let mut means = Vec::with_capacity(5);
    for m in mean_terms.into_iter() {
        means.push(tape.scale(m.expect("non-empty batch"), inv_b)?);
    }

    let w = [weights.diff, weights.recon, weights.edge, weights.perc, weights.prior];
    let mut total: Option<NodeId> = None;
    for (k, &mean) in means.iter().enumerate() {
        let scaled = tape.scale(mean, w[k])?;
        total = Some(match total {
            Some(acc) => tape.add(acc, scaled)?,
            None => scaled,
        });
    }
    let total = total.expect("loss terms");

    let breakdown = LossBreakdown {
        diff: tape.value(means[0]).item() as f64,
        recon: tape.value(means[1]).item() as f64,
        edge: tape.value(means[2]).item() as f64,
        perc: tape.value(means[3]).item() as f64,
        prior: tape.value(means[4]).item() as f64,
        total: tape.value(total).item() as f64,
        alpha,
    };
    Ok((total, breakdown))
}

/// Counters recorded while sampling one field.
#[derive(Clone, Copy, Debug)]
pub struct SampleAudit {
    /// How many times the condition tokens were computed (must be 1).
    pub condition_encodes: usize,
    pub denoise_steps: usize,
    pub guidance: f64,
    pub injections_per_forward: usize,
}

/// Generate one field image from a 9-channel condition tensor: start from a
/// seeded unit-normal latent, run the DDIM subsequence with classifier-free
/// guidance (condition tokens computed once, reused at every step), then
/// decode the final z0 (divided by `latent_scale` back into the VAE's raw
/// latent space).
#[allow(clippy::too_many_arguments)]
pub fn sample(
    store: &ParamStore,
    vae: &Vae,
    dit: &Dit,
    cond: &Tensor<f32>,
    sampler: &SamplerConfig,
    sched: &NoiseSchedule,
    latent_scale: f64,
) -> Result<(Tensor<f32>, SampleAudit)> {
    sampler.validate(sched.steps)?;
    if latent_scale <= 0.0 {
        return Err(TensorError::Parameter(format!(
            "latent_scale {latent_scale} must be positive"
        )));
    }
    let mut tape = Tape::<f32>::inference();
    let bind = store.bind_all(&mut tape);

    let cond_node = tape.constant(cond.clone());
    let cond_tokens = dit.encode_condition_tokens(&mut tape, &bind, cond_node)?;
    let null_tokens = dit.null_condition_tokens(&tape, &bind);
    let mut audit = SampleAudit {
        condition_encodes: 1,
        denoise_steps: 0,
        guidance: sampler.guidance,
        injections_per_forward: dit.cfg.injection_points(),
    };

    let side = dit.cfg.latent_side;
    let shape = [dit.cfg.latent_channels, side, side];
    let n: usize = shape.iter().product();
    let mut r = rng::stream(sampler.seed, "sample-init", &[]);
    let mut z = Tensor::from_vec(&shape, rng::normal_vec(&mut r, n))?;

    let seq = timestep_subsequence(sched.steps, sampler.steps);
    for (i, &t) in seq.iter().enumerate() {
        let t_prev: isize = if i + 1 < seq.len() { seq[i + 1] as isize } else { -1 };
        let z_node = tape.constant(z.clone());
        let (eps_c, fwd_audit) = dit.forward(&mut tape, &bind, z_node, t, cond_tokens)?;
        debug_assert_eq!(fwd_audit.injection_points, dit.cfg.injection_points());
        let (eps_u, _) = dit.forward(&mut tape, &bind, z_node, t, null_tokens)?;
        let guided = cfg_combine(tape.value(eps_u), tape.value(eps_c), sampler.guidance)?;
        z = ddim_step(&z, &guided, t, t_prev, sched)?;
        audit.denoise_steps += 1;
    }

    let z_node = tape.constant(z);
    let z_raw = tape.scale(z_node, 1.0 / latent_scale)?;
    let image = vae.decode(&mut tape, &bind, z_raw)?;
    Ok((tape.value(image).clone(), audit))
}

/// Noise prediction audit hook used by tests: a single instrumented forward
/// pass at a given profile.
pub fn audited_forward(
    store: &ParamStore,
    dit: &Dit,
    z: &Tensor<f32>,
    t: usize,
    cond_tokens_value: &Tensor<f32>,
) -> Result<ForwardAudit> {
    let mut tape = Tape::<f32>::inference();
    let bind = store.bind_all(&mut tape);
    let z_node = tape.constant(z.clone());
    let c_node = tape.constant(cond_tokens_value.clone());
    let (_, audit) = dit.forward(&mut tape, &bind, z_node, t, c_node)?;
    Ok(audit)
}
