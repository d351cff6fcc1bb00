//! Conditional prior: physics-aware initial latents from boundary conditions
//! and the training-time latent blending schedule.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::params::{Binding, Conv2d, ParamStore};
use crate::tensor::{NodeId, Result, Scalar, Tape, Tensor, TensorError};

/// Linear decay of the ground-truth share: alpha(n) = clamp(1 - n/N).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlendSchedule {
    /// Decay horizon in epochs.
    pub horizon: u64,
    pub floor: f64,
    pub ceiling: f64,
}

impl Default for BlendSchedule {
    fn default() -> Self {
        Self { horizon: 1000, floor: 0.0, ceiling: 1.0 }
    }
}

/// Ground-truth blending weight at epoch `n`; exactly 0 for all n >= horizon.
pub fn alpha(n: u64, schedule: &BlendSchedule) -> f64 {
    let raw = 1.0 - n as f64 / schedule.horizon as f64;
    raw.clamp(schedule.floor, schedule.ceiling)
}

/// z_mixed = a * z_true + (1 - a) * z_prior.
pub fn blend_latents(
    z_true: &Tensor<f32>,
    z_prior: &Tensor<f32>,
    a: f64,
) -> Result<Tensor<f32>> {
    if z_true.shape() != z_prior.shape() {
        return Err(TensorError::Dimension(format!(
            "blend_latents: {:?} vs {:?}",
            z_true.shape(),
            z_prior.shape()
        )));
    }
    if !(0.0..=1.0).contains(&a) {
        return Err(TensorError::Parameter(format!(
            "blend weight {a} outside [0, 1]"
        )));
    }
    // Endpoints return the inputs exactly; the interior form p + a(t - p)
    // keeps blend(z, z, a) == z bitwise for every weight.
    if a == 1.0 {
        return Ok(z_true.clone());
    }
    if a == 0.0 {
        return Ok(z_prior.clone());
    }
    let af = a as f32;
    let data = z_true
        .data()
        .iter()
        .zip(z_prior.data().iter())
        .map(|(&t, &p)| p + af * (t - p))
        .collect();
    Tensor::from_vec(z_true.shape(), data)
}

/// Multi-channel encoder mapping the 9-channel condition tensor straight to
/// a latent (same architecture family as the VAE encoder, non-variational
/// head).
pub struct PriorEncoder {
    pub latent_channels: usize,
    convs: Vec<Conv2d>,
    head: Conv2d,
}

impl PriorEncoder {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        base_width: usize,
        latent_channels: usize,
    ) -> Self {
        let widths = [base_width, 2 * base_width, 4 * base_width];
        let mut convs = Vec::new();
        let mut cin = 9;
        for (i, &cout) in widths.iter().enumerate() {
            convs.push(Conv2d::init(store, rng, &format!("prior.enc{i}"), cin, cout, 3, 1, 1));
            cin = cout;
        }
        let head = Conv2d::init(store, rng, "prior.head", cin, latent_channels, 3, 1, 1);
        Self { latent_channels, convs, head }
    }

    /// `[9, H, W]` conditions to a `[latent_channels, H/8, W/8]` latent.
    pub fn encode<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bind: &Binding,
        cond: NodeId,
    ) -> Result<NodeId> {
        let shape = tape.shape(cond).to_vec();
        if shape.len() != 3 || shape[0] != 9 {
            return Err(TensorError::Dimension(format!(
                "prior encode: input {shape:?}, expected [9, H, W]"
            )));
        }
        if !shape[1].is_multiple_of(8) || !shape[2].is_multiple_of(8) {
            return Err(TensorError::Dimension(format!(
                "prior encode: extents {}x{} not divisible by 8",
                shape[1], shape[2]
            )));
        }
        let mut x = cond;
        for conv in &self.convs {
            x = conv.forward(tape, bind, x)?;
            x = tape.silu(x)?;
            x = tape.avg_pool2(x)?;
        }
        self.head.forward(tape, bind, x)
    }
}
