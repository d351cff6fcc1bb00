//! Variational autoencoder over field images at 8x spatial compression.
//!
//! Three stride-2 convolution stages with channel doubling encode a
//! `[3, H, W]` field into latent mean/log-variance maps; decoding mirrors
//! them with nearest-upsample + convolution stages and a final sigmoid
//! squash into [0, 1].

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::params::{Binding, Conv2d, ParamStore};
use crate::tensor::{NodeId, Result, Scalar, Tape, Tensor, TensorError};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub latent_channels: usize,
    /// Number of stride-2 stages; must give the 8x compression.
    pub stages: usize,
}

impl VaeConfig {
    pub fn desk() -> Self {
        Self { in_channels: 3, base_width: 32, latent_channels: 64, stages: 3 }
    }

    pub fn paper() -> Self {
        Self { in_channels: 3, base_width: 128, latent_channels: 1024, stages: 3 }
    }

    pub fn compression(&self) -> usize {
        1 << self.stages
    }

    pub fn validate(&self) -> Result<()> {
        if self.compression() != 8 {
            return Err(TensorError::Parameter(format!(
                "{} stages give {}x compression, need 8x",
                self.stages,
                self.compression()
            )));
        }
        Ok(())
    }
}

pub struct Vae {
    pub cfg: VaeConfig,
    enc: Vec<Conv2d>,
    enc_head: Conv2d,
    dec_in: Conv2d,
    dec: Vec<Conv2d>,
    dec_head: Conv2d,
}

impl Vae {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: VaeConfig) -> Result<Self> {
        cfg.validate()?;
        let b = cfg.base_width;
        let widths = [b, 2 * b, 4 * b];
        let mut enc = Vec::new();
        let mut cin = cfg.in_channels;
        for (i, &cout) in widths.iter().enumerate() {
            enc.push(Conv2d::init(store, rng, &format!("vae.enc{i}"), cin, cout, 3, 1, 1));
            cin = cout;
        }
        let enc_head = Conv2d::init(
            store,
            rng,
            "vae.enc_head",
            4 * b,
            2 * cfg.latent_channels,
            3,
            1,
            1,
        );
        let dec_in = Conv2d::init(store, rng, "vae.dec_in", cfg.latent_channels, 4 * b, 3, 1, 1);
        let mut dec = Vec::new();
        let dec_widths = [(4 * b, 2 * b), (2 * b, b), (b, b)];
        for (i, &(ci, co)) in dec_widths.iter().enumerate() {
            dec.push(Conv2d::init(store, rng, &format!("vae.dec{i}"), ci, co, 3, 1, 1));
        }
        let dec_head = Conv2d::init(store, rng, "vae.dec_head", b, cfg.in_channels, 3, 1, 1);
        Ok(Self { cfg, enc, enc_head, dec_in, dec, dec_head })
    }

    /// Field image `[3, H, W]` to latent mean/log-variance, each
    /// `[latent_channels, H/8, W/8]`. The log-variance head is softly bounded
    /// to (-10, 10) so the reparameterized scale stays finite.
    pub fn encode<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bind: &Binding,
        field: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let shape = tape.shape(field).to_vec();
        if shape.len() != 3 || shape[0] != self.cfg.in_channels {
            return Err(TensorError::Dimension(format!(
                "vae encode: input {shape:?}, expected [{}, H, W]",
                self.cfg.in_channels
            )));
        }
        let c = self.cfg.compression();
        if !shape[1].is_multiple_of(c) || !shape[2].is_multiple_of(c) {
            return Err(TensorError::Dimension(format!(
                "vae encode: extents {}x{} not divisible by {c}",
                shape[1], shape[2]
            )));
        }
        let mut x = field;
        for conv in &self.enc {
            x = conv.forward(tape, bind, x)?;
            x = tape.silu(x)?;
            x = tape.avg_pool2(x)?;
        }
        let heads = self.enc_head.forward(tape, bind, x)?;
        let lc = self.cfg.latent_channels;
        let mu = tape.slice_channels(heads, 0, lc)?;
        let logvar_raw = tape.slice_channels(heads, lc, lc)?;
        // soft clamp: 20 * sigmoid(x / 5) - 10 (identity slope at 0).
        let scaled = tape.scale(logvar_raw, 1.0 / 5.0)?;
        let sig = tape.sigmoid(scaled)?;
        let stretched = tape.scale(sig, 20.0)?;
        let logvar = tape.add_scalar(stretched, -10.0)?;
        Ok((mu, logvar))
    }

    /// Latent `[latent_channels, h, w]` to field image `[3, 8h, 8w]` in
    /// [0, 1].
    pub fn decode<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bind: &Binding,
        z: NodeId,
    ) -> Result<NodeId> {
        let shape = tape.shape(z).to_vec();
        if shape.len() != 3 || shape[0] != self.cfg.latent_channels {
            return Err(TensorError::Dimension(format!(
                "vae decode: latent {shape:?}, expected [{}, h, w]",
                self.cfg.latent_channels
            )));
        }
        let mut x = self.dec_in.forward(tape, bind, z)?;
        x = tape.silu(x)?;
        for conv in &self.dec {
            x = tape.upsample_nearest2(x)?;
            x = conv.forward(tape, bind, x)?;
            x = tape.silu(x)?;
        }
        let out = self.dec_head.forward(tape, bind, x)?;
        tape.sigmoid(out)
    }
}

/// z = mu + exp(logvar / 2) * noise. Caller supplies the noise tensor so the
/// draw is testable and seedable.
pub fn reparameterize<S: Scalar>(
    tape: &mut Tape<S>,
    mu: NodeId,
    logvar: NodeId,
    noise: NodeId,
) -> Result<NodeId> {
    if tape.shape(mu) != tape.shape(logvar) || tape.shape(mu) != tape.shape(noise) {
        return Err(TensorError::Dimension(format!(
            "reparameterize: mu {:?}, logvar {:?}, noise {:?}",
            tape.shape(mu),
            tape.shape(logvar),
            tape.shape(noise)
        )));
    }
    let half = tape.scale(logvar, 0.5)?;
    let sigma = tape.exp(half)?;
    let scaled = tape.mul(sigma, noise)?;
    tape.add(mu, scaled)
}

/// KL divergence against the unit normal: 0.5 * sum(mu^2 + e^logvar - 1 -
/// logvar), summed over latent coordinates of one sample.
pub fn kl_divergence<S: Scalar>(
    tape: &mut Tape<S>,
    mu: NodeId,
    logvar: NodeId,
) -> Result<NodeId> {
    if tape.shape(mu) != tape.shape(logvar) {
        return Err(TensorError::Dimension(format!(
            "kl_divergence: mu {:?} vs logvar {:?}",
            tape.shape(mu),
            tape.shape(logvar)
        )));
    }
    let mu2 = tape.mul(mu, mu)?;
    let ev = tape.exp(logvar)?;
    let a = tape.add(mu2, ev)?;
    let b = tape.add_scalar(a, -1.0)?;
    let c = tape.sub(b, logvar)?;
    let s = tape.sum_all(c)?;
    tape.scale(s, 0.5)
}

/// Value-level KL for tests and logging.
pub fn kl_divergence_value(mu: &Tensor<f32>, logvar: &Tensor<f32>) -> f64 {
    mu.data()
        .iter()
        .zip(logvar.data().iter())
        .map(|(&m, &lv)| {
            let (m, lv) = (m as f64, lv as f64);
            m * m + lv.exp() - 1.0 - lv
        })
        .sum::<f64>()
        * 0.5
}
