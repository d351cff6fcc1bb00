//! 2D TE-polarization FDTD solver on a staggered Yee grid.
//!
//! Fields are Hz at cell centers with Ex/Ey on the cell edges, advanced by
//! leapfrog in normalized units (c = 1, dx = 1). Outgoing waves are absorbed
//! by an unsplit graded-conductivity layer along each boundary; the walls
//! behind it are perfect electric conductors. A continuous-wave source with a
//! raised-cosine turn-on ramp is injected additively into Hz over the source
//! rectangle.
//!
//! Updates per step, in order (mu0 = eps0 = 1):
//!   Ex[j][i] += dt/dx * (Hz[j][i] - Hz[j-1][i]) / eps_r
//!   Ey[j][i] -= dt/dx * (Hz[j][i] - Hz[j][i-1]) / eps_r
//!   Hz[j][i] += dt/dx * ((Ex[j+1][i] - Ex[j][i]) - (Ey[j][i+1] - Ey[j][i]))
//! followed by multiplicative damping where the layer conductivity is
//! nonzero, then source injection.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boundary::SourceGeometrySpec;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum FdtdError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric blow-up at step {step}: non-finite field value")]
    BlowUp { step: usize },
}

pub type Result<T> = std::result::Result<T, FdtdError>;

/// Full description of one simulation.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    /// Grid extent along x (columns).
    pub nx: usize,
    /// Grid extent along y (rows).
    pub ny: usize,
    /// Spatial step in normalized units.
    pub dx: f64,
    /// Time step; must satisfy the 2D Courant bound dt <= dx / sqrt(2).
    pub dt: f64,
    pub n_steps: usize,
    pub source: SourceGeometrySpec,
    /// Absorbing layer thickness in cells.
    pub pml_thickness: usize,
    /// Polynomial grading order of the layer conductivity.
    pub pml_order: f64,
    /// Peak conductivity at the outer wall.
    pub pml_sigma_max: f64,
    /// Per-cell relative permittivity, row-major `[ny, nx]`.
    pub epsilon_r: Vec<f64>,
}

impl SimulationConfig {
    /// Desk-scale defaults: 64x64 cells, 2,000 steps, 10-cell cubic-graded
    /// absorber.
    pub fn desk(source: SourceGeometrySpec) -> Self {
        Self::sized(64, 64, 2_000, source)
    }

    /// Full-scale profile: 256x256 cells, over 10,000 steps.
    pub fn paper(source: SourceGeometrySpec) -> Self {
        Self::sized(256, 256, 12_000, source)
    }

    pub fn sized(nx: usize, ny: usize, n_steps: usize, source: SourceGeometrySpec) -> Self {
        Self {
            nx,
            ny,
            dx: 1.0,
            dt: 0.5,
            n_steps,
            source,
            pml_thickness: 10,
            pml_order: 3.0,
            pml_sigma_max: 1.0,
            epsilon_r: vec![1.0; nx * ny],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 8 || self.ny < 8 {
            return Err(FdtdError::Config(format!(
                "grid {}x{} too small",
                self.nx, self.ny
            )));
        }
        if self.dx <= 0.0 || self.dt <= 0.0 {
            return Err(FdtdError::Config("dx and dt must be positive".into()));
        }
        let courant = self.dx / 2.0f64.sqrt();
        if self.dt > courant {
            return Err(FdtdError::Config(format!(
                "Courant violation: dt = {} exceeds dx/sqrt(2) = {courant}",
                self.dt
            )));
        }
        if self.pml_thickness < 4 || self.pml_thickness >= self.nx.min(self.ny) / 4 {
            return Err(FdtdError::Config(format!(
                "absorber thickness {} outside [4, min(nx,ny)/4)",
                self.pml_thickness
            )));
        }
        if self.pml_sigma_max < 0.0 || self.pml_order < 0.0 {
            return Err(FdtdError::Config(
                "absorber conductivity and order must be non-negative".into(),
            ));
        }
        if self.epsilon_r.len() != self.nx * self.ny {
            return Err(FdtdError::Config(format!(
                "epsilon_r has {} cells, grid needs {}",
                self.epsilon_r.len(),
                self.nx * self.ny
            )));
        }
        if self.epsilon_r.iter().any(|&e| e < 1.0 || !e.is_finite()) {
            return Err(FdtdError::Config("epsilon_r must be >= 1 everywhere".into()));
        }
        let l = self.pml_thickness;
        let s = &self.source;
        if s.width < 1 || s.height < 1 {
            return Err(FdtdError::Config("source rectangle must be at least 1x1".into()));
        }
        if s.x < l || s.y < l || s.x + s.width > self.nx - l || s.y + s.height > self.ny - l {
            return Err(FdtdError::Config(format!(
                "source rectangle ({}, {}) {}x{} not inside the non-absorbing interior",
                s.x, s.y, s.width, s.height
            )));
        }
        if s.wavelength <= 0.0 || !s.amplitude.is_finite() {
            return Err(FdtdError::Config("source wavelength/amplitude invalid".into()));
        }
        Ok(())
    }
}

/// Staggered field state. Hz is `[ny, nx]` at cell centers, Ex `[ny+1, nx]`
/// on horizontal edges, Ey `[ny, nx+1]` on vertical edges.
#[derive(Clone, Debug)]
pub struct YeeGrid {
    pub nx: usize,
    pub ny: usize,
    pub hz: Vec<f64>,
    pub ex: Vec<f64>,
    pub ey: Vec<f64>,
    /// Conductivity along x at cell centers (i + 0.5) and at edges (i).
    pub sigma_x_half: Vec<f64>,
    pub sigma_x_edge: Vec<f64>,
    pub sigma_y_half: Vec<f64>,
    pub sigma_y_edge: Vec<f64>,
    pub time_index: usize,
    // Damping factors derived from the profiles, cached per component.
    damp_hz: Vec<f64>,
    damp_ex: Vec<f64>,
    damp_ey: Vec<f64>,
    has_damping: bool,
    // Source phase offset (seeded by `run`).
    phase: f64,
}

/// sigma(d) = sigma_max * (d / L)^m, d measured from the inner edge of the
/// absorbing layer toward the wall, sampled at `pos` (in cells from the wall
/// on either side).
fn graded_sigma(pos: f64, extent: f64, thickness: f64, order: f64, sigma_max: f64) -> f64 {
    let depth_near = thickness - pos;
    let depth_far = pos - (extent - thickness);
    let depth = depth_near.max(depth_far).max(0.0);
    sigma_max * (depth / thickness).powf(order)
}

impl YeeGrid {
    /// Fix the source phase offset (normally drawn from the run seed).
    pub fn set_source_phase(&mut self, phase: f64) {
        self.phase = phase;
    }

    fn energy_breakdown(&self, config: &SimulationConfig) -> (f64, f64) {
        let (nx, ny) = (self.nx, self.ny);
        let mut e_h = 0.0;
        for &v in &self.hz {
            e_h += v * v;
        }
        let mut e_e = 0.0;
        for j in 0..=ny {
            for i in 0..nx {
                let eps = eps_at_ex(config, i, j);
                let v = self.ex[j * nx + i];
                e_e += eps * v * v;
            }
        }
        for j in 0..ny {
            for i in 0..=nx {
                let eps = eps_at_ey(config, i, j);
                let v = self.ey[j * (nx + 1) + i];
                e_e += eps * v * v;
            }
        }
        (0.5 * e_h, 0.5 * e_e)
    }

    /// Plain sum-of-squares field energy (Hz plus permittivity-weighted E).
    pub fn total_energy(&self, config: &SimulationConfig) -> f64 {
        let (h, e) = self.energy_breakdown(config);
        h + e
    }

    /// Discrete invariant of the leapfrog scheme: E-field energy at integer
    /// time plus the product of the two Hz states bracketing it. Exactly
    /// conserved (up to roundoff) in lossless media with reflecting walls.
    pub fn interleaved_energy(&self, prev_hz: &[f64], config: &SimulationConfig) -> f64 {
        let (_, e_e) = self.energy_breakdown(config);
        let mut e_h = 0.0;
        for (a, b) in self.hz.iter().zip(prev_hz.iter()) {
            e_h += a * b;
        }
        0.5 * e_h + e_e
    }
}

fn eps_at_ex(config: &SimulationConfig, i: usize, j: usize) -> f64 {
    let (nx, ny) = (config.nx, config.ny);
    let below = if j > 0 { config.epsilon_r[(j - 1) * nx + i] } else { config.epsilon_r[i] };
    let above = if j < ny { config.epsilon_r[j.min(ny - 1) * nx + i] } else { below };
    0.5 * (below + above)
}

fn eps_at_ey(config: &SimulationConfig, i: usize, j: usize) -> f64 {
    let nx = config.nx;
    let left = if i > 0 { config.epsilon_r[j * nx + (i - 1)] } else { config.epsilon_r[j * nx] };
    let right = if i < nx { config.epsilon_r[j * nx + i.min(nx - 1)] } else { left };
    0.5 * (left + right)
}

/// Zero-initialized grid with graded absorber profiles.
pub fn build_grid(config: &SimulationConfig) -> Result<YeeGrid> {
    config.validate()?;
    let (nx, ny) = (config.nx, config.ny);
    let l = config.pml_thickness as f64;
    let m = config.pml_order;
    let smax = config.pml_sigma_max;

    let sigma_x_half: Vec<f64> = (0..nx)
        .map(|i| graded_sigma(i as f64 + 0.5, nx as f64, l, m, smax))
        .collect();
    let sigma_x_edge: Vec<f64> = (0..=nx)
        .map(|i| graded_sigma(i as f64, nx as f64, l, m, smax))
        .collect();
    let sigma_y_half: Vec<f64> = (0..ny)
        .map(|j| graded_sigma(j as f64 + 0.5, ny as f64, l, m, smax))
        .collect();
    let sigma_y_edge: Vec<f64> = (0..=ny)
        .map(|j| graded_sigma(j as f64, ny as f64, l, m, smax))
        .collect();

    let dt = config.dt;
    let factor = |s: f64| if s > 0.0 { (-s * dt).exp() } else { 1.0 };
    let mut damp_hz = vec![1.0; ny * nx];
    for j in 0..ny {
        for i in 0..nx {
            damp_hz[j * nx + i] = factor(sigma_x_half[i] + sigma_y_half[j]);
        }
    }
    let mut damp_ex = vec![1.0; (ny + 1) * nx];
    for j in 0..=ny {
        for i in 0..nx {
            damp_ex[j * nx + i] = factor(sigma_x_half[i] + sigma_y_edge[j]);
        }
    }
    let mut damp_ey = vec![1.0; ny * (nx + 1)];
    for j in 0..ny {
        for i in 0..=nx {
            damp_ey[j * (nx + 1) + i] = factor(sigma_x_edge[i] + sigma_y_half[j]);
        }
    }
    let has_damping = smax > 0.0;

    Ok(YeeGrid {
        nx,
        ny,
        hz: vec![0.0; ny * nx],
        ex: vec![0.0; (ny + 1) * nx],
        ey: vec![0.0; ny * (nx + 1)],
        sigma_x_half,
        sigma_x_edge,
        sigma_y_half,
        sigma_y_edge,
        time_index: 0,
        damp_hz,
        damp_ex,
        damp_ey,
        has_damping,
        phase: 0.0,
    })
}

/// Advance one leapfrog step: E from curl of Hz, Hz from curl of E, damping,
/// then source injection.
pub fn step_yee(grid: &mut YeeGrid, config: &SimulationConfig) -> Result<()> {
    let (nx, ny) = (grid.nx, grid.ny);
    let r = config.dt / config.dx;

    // E updates (boundary edges stay zero: PEC walls behind the absorber).
    for j in 1..ny {
        for i in 0..nx {
            let curl = grid.hz[j * nx + i] - grid.hz[(j - 1) * nx + i];
            grid.ex[j * nx + i] += r / eps_at_ex(config, i, j) * curl;
        }
    }
    for j in 0..ny {
        for i in 1..nx {
            let curl = grid.hz[j * nx + i] - grid.hz[j * nx + (i - 1)];
            grid.ey[j * (nx + 1) + i] -= r / eps_at_ey(config, i, j) * curl;
        }
    }
    if grid.has_damping {
        for (v, &d) in grid.ex.iter_mut().zip(grid.damp_ex.iter()) {
            *v *= d;
        }
        for (v, &d) in grid.ey.iter_mut().zip(grid.damp_ey.iter()) {
            *v *= d;
        }
    }

    // Hz update.
    for j in 0..ny {
        for i in 0..nx {
            let curl = (grid.ex[(j + 1) * nx + i] - grid.ex[j * nx + i])
                - (grid.ey[j * (nx + 1) + i + 1] - grid.ey[j * (nx + 1) + i]);
            grid.hz[j * nx + i] += r * curl;
        }
    }
    if grid.has_damping {
        for (v, &d) in grid.hz.iter_mut().zip(grid.damp_hz.iter()) {
            *v *= d;
        }
    }

    // Ramped continuous-wave source into Hz over the source rectangle.
    let s = &config.source;
    if s.amplitude != 0.0 {
        let t = grid.time_index as f64 * config.dt;
        let omega = std::f64::consts::TAU / s.wavelength; // c = 1
        let ramp_span = 3.0 * s.wavelength;
        let ramp = if t < ramp_span {
            0.5 * (1.0 - (std::f64::consts::PI * t / ramp_span).cos())
        } else {
            1.0
        };
        let drive = config.dt * s.amplitude * ramp * (omega * t + grid.phase).sin();
        for j in s.y..s.y + s.height {
            for i in s.x..s.x + s.width {
                grid.hz[j * nx + i] += drive;
            }
        }
    }

    grid.time_index += 1;
    if grid.hz.iter().any(|v| !v.is_finite()) {
        return Err(FdtdError::BlowUp { step: grid.time_index });
    }
    Ok(())
}

/// Final Hz snapshot plus summary statistics.
#[derive(Clone, Debug)]
pub struct FieldSnapshot {
    /// Final Hz values, row-major `[ny, nx]`.
    pub hz_final: Vec<f32>,
    pub nx: usize,
    pub ny: usize,
    pub config: SimulationConfig,
    pub seed: u64,
    /// Sum-of-squares field energy at the final step.
    pub energy: f64,
}

/// Run a full simulation. The seed selects the source phase offset so
/// different samples capture different instants of the steady-state wave.
pub fn run(config: &SimulationConfig, seed: u64) -> Result<FieldSnapshot> {
    let mut grid = build_grid(config)?;
    let mut rng = crate::rng::stream(seed, "fdtd-phase", &[]);
    grid.phase = crate::rng::uniform(&mut rng) * std::f64::consts::TAU;
    for _ in 0..config.n_steps {
        step_yee(&mut grid, config)?;
    }
    let energy = grid.total_energy(config);
    Ok(FieldSnapshot {
        hz_final: grid.hz.iter().map(|&v| v as f32).collect(),
        nx: grid.nx,
        ny: grid.ny,
        config: config.clone(),
        seed,
        energy,
    })
}

/// Map Hz linearly into a 3-channel image: v -> clamp((v + A) / 2A, 0, 1)
/// replicated across channels.
pub fn snapshot_to_image(snapshot: &FieldSnapshot, clip_amplitude: f32) -> Tensor<f32> {
    assert!(clip_amplitude > 0.0, "clip_amplitude must be positive");
    let plane: Vec<f32> = snapshot
        .hz_final
        .iter()
        .map(|&v| ((v + clip_amplitude) / (2.0 * clip_amplitude)).clamp(0.0, 1.0))
        .collect();
    let mut data = Vec::with_capacity(3 * plane.len());
    for _ in 0..3 {
        data.extend_from_slice(&plane);
    }
    Tensor::from_vec(&[3, snapshot.ny, snapshot.nx], data).expect("snapshot image shape")
}

#[cfg(test)]
mod tests;
