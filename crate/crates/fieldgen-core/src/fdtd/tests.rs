use super::*;

fn quiet_source() -> SourceGeometrySpec {
    SourceGeometrySpec { x: 30, y: 30, width: 2, height: 2, amplitude: 0.0, wavelength: 20.0 }
}

fn point_source(x: usize, y: usize, amplitude: f64) -> SourceGeometrySpec {
    SourceGeometrySpec { x, y, width: 1, height: 1, amplitude, wavelength: 20.0 }
}

#[test]
fn build_grid_zero_fields_and_interior_sigma() {
    let config = SimulationConfig::desk(quiet_source());
    let grid = build_grid(&config).unwrap();
    assert!(grid.hz.iter().all(|&v| v == 0.0));
    assert!(grid.ex.iter().all(|&v| v == 0.0));
    assert!(grid.ey.iter().all(|&v| v == 0.0));
    // Conductivity vanishes in the interior.
    for i in 10..54 {
        assert_eq!(grid.sigma_x_half[i], 0.0);
        assert_eq!(grid.sigma_y_half[i], 0.0);
    }
    assert!(grid.sigma_x_half[0] > 0.0);
    assert!(grid.sigma_x_half[63] > 0.0);
}

#[test]
fn sigma_grading_matches_formula_at_outermost_cell() {
    let mut config = SimulationConfig::desk(quiet_source());
    config.pml_sigma_max = 2.0;
    let grid = build_grid(&config).unwrap();
    // Outermost cell center sits 9.5 cells into a 10-cell layer.
    let want = 2.0 * (9.5f64 / 10.0).powi(3);
    assert!((grid.sigma_x_half[0] - want).abs() < 1e-12);
    assert!((grid.sigma_x_half[63] - want).abs() < 1e-12);
    assert!((grid.sigma_y_half[0] - want).abs() < 1e-12);
    // Edge sample at the wall itself carries the full conductivity.
    assert!((grid.sigma_x_edge[0] - 2.0).abs() < 1e-12);
}

#[test]
fn courant_violation_is_a_config_error() {
    let mut config = SimulationConfig::desk(quiet_source());
    config.dt = 0.8 * config.dx;
    let err = build_grid(&config).unwrap_err();
    assert!(matches!(err, FdtdError::Config(_)));
}

#[test]
fn source_inside_absorber_is_rejected() {
    let config = SimulationConfig::desk(point_source(5, 30, 1.0));
    assert!(matches!(build_grid(&config), Err(FdtdError::Config(_))));
}

#[test]
fn epsilon_below_one_is_rejected() {
    let mut config = SimulationConfig::desk(quiet_source());
    config.epsilon_r[100] = 0.5;
    assert!(matches!(build_grid(&config), Err(FdtdError::Config(_))));
}

#[test]
fn zero_fields_stay_zero_without_source() {
    let config = SimulationConfig::desk(quiet_source());
    let mut grid = build_grid(&config).unwrap();
    for _ in 0..50 {
        step_yee(&mut grid, &config).unwrap();
    }
    assert!(grid.hz.iter().all(|&v| v == 0.0));
    assert!(grid.ex.iter().all(|&v| v == 0.0));
    assert!(grid.ey.iter().all(|&v| v == 0.0));
}

#[test]
fn uniform_hz_is_stationary() {
    // Zero curl everywhere, no damping: constant field is a fixed point.
    let mut config = SimulationConfig::desk(quiet_source());
    config.pml_sigma_max = 0.0;
    let mut grid = build_grid(&config).unwrap();
    grid.hz.fill(1.0);
    step_yee(&mut grid, &config).unwrap();
    assert!(grid.ex.iter().all(|&v| v == 0.0));
    assert!(grid.ey.iter().all(|&v| v == 0.0));
    assert!(grid.hz.iter().all(|&v| v == 1.0));
}

#[test]
fn unit_impulse_stencil_hand_evaluation() {
    let mut config = SimulationConfig::desk(quiet_source());
    config.pml_sigma_max = 0.0;
    let mut grid = build_grid(&config).unwrap();
    let (i0, j0, nx) = (32usize, 31usize, 64usize);
    grid.hz[j0 * nx + i0] = 1.0;
    step_yee(&mut grid, &config).unwrap();

    // Hand stencil with r = dt/dx = 0.5, eps_r = 1:
    //   Ex below/above the cell get +-r, Ey left/right get -r/+r.
    let r = 0.5;
    let mut nonzero_e = Vec::new();
    for (idx, &v) in grid.ex.iter().enumerate() {
        if v != 0.0 {
            nonzero_e.push(("ex", idx, v));
        }
    }
    for (idx, &v) in grid.ey.iter().enumerate() {
        if v != 0.0 {
            nonzero_e.push(("ey", idx, v));
        }
    }
    assert_eq!(nonzero_e.len(), 4, "{nonzero_e:?}");
    assert_eq!(grid.ex[j0 * nx + i0], r);
    assert_eq!(grid.ex[(j0 + 1) * nx + i0], -r);
    assert_eq!(grid.ey[j0 * (nx + 1) + i0], -r);
    assert_eq!(grid.ey[j0 * (nx + 1) + i0 + 1], r);
}

#[test]
fn interleaved_energy_is_conserved_without_damping() {
    // Gaussian Hz blob, reflecting walls, sigma = 0: the leapfrog invariant
    // drifts by far less than 0.5% over 1,000 steps.
    let mut config = SimulationConfig::desk(quiet_source());
    config.pml_sigma_max = 0.0;
    let mut grid = build_grid(&config).unwrap();
    for j in 0..64 {
        for i in 0..64 {
            let dx = i as f64 - 31.5;
            let dy = j as f64 - 31.5;
            grid.hz[j * 64 + i] = (-(dx * dx + dy * dy) / 32.0).exp();
        }
    }
    let mut prev = grid.hz.clone();
    step_yee(&mut grid, &config).unwrap();
    let e0 = grid.interleaved_energy(&prev, &config);
    let mut min = e0;
    let mut max = e0;
    for _ in 0..1_000 {
        prev.copy_from_slice(&grid.hz);
        step_yee(&mut grid, &config).unwrap();
        let e = grid.interleaved_energy(&prev, &config);
        min = min.min(e);
        max = max.max(e);
    }
    let drift = (max - min) / e0;
    assert!(drift < 5e-3, "energy drift {drift}");
    assert!(grid.total_energy(&config) >= 0.0);
}

/// Largest distance (in cells) from `(cx, cy)` among cells whose |Hz| is at
/// least `rel_thresh` times the grid maximum.
fn front_radius(grid: &YeeGrid, cx: f64, cy: f64, rel_thresh: f64) -> f64 {
    let max = grid.hz.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let thr = rel_thresh * max;
    let mut best = 0.0f64;
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            if grid.hz[j * grid.nx + i].abs() >= thr {
                let d = ((i as f64 - cx).powi(2) + (j as f64 - cy).powi(2)).sqrt();
                best = best.max(d);
            }
        }
    }
    best
}

#[test]
fn point_source_wavefront_travels_at_c() {
    let mut config = SimulationConfig::sized(96, 96, 0, point_source(48, 48, 1.0));
    config.pml_sigma_max = 0.0;
    let mut grid = build_grid(&config).unwrap();
    let mut rng = crate::rng::stream(0, "fdtd-phase", &[]);
    grid.phase = crate::rng::uniform(&mut rng) * std::f64::consts::TAU;

    // Radius after t steps tracks t * dt within 5%.
    for _ in 0..40 {
        step_yee(&mut grid, &config).unwrap();
    }
    let r1 = front_radius(&grid, 48.0, 48.0, 1e-4);
    let t1 = 40.0 * config.dt;
    assert!((r1 - t1).abs() / t1 < 0.05, "radius {r1} at t {t1}");

    for _ in 0..20 {
        step_yee(&mut grid, &config).unwrap();
    }
    let r2 = front_radius(&grid, 48.0, 48.0, 1e-4);
    let t2 = 60.0 * config.dt;
    assert!((r2 - t2).abs() / t2 < 0.05, "radius {r2} at t {t2}");

    // Front speed between the two instants is c = 1 within 5%.
    let speed = (r2 - r1) / (t2 - t1);
    assert!((speed - 1.0).abs() < 0.05, "front speed {speed}");
}

#[test]
fn half_plane_permittivity_slows_the_front_by_sqrt2() {
    // eps_r = 2 for x >= 56; source on the vacuum side.
    let mut config = SimulationConfig::sized(112, 64, 0, point_source(48, 32, 1.0));
    config.pml_sigma_max = 0.0;
    for j in 0..64 {
        for i in 56..112 {
            config.epsilon_r[j * 112 + i] = 2.0;
        }
    }
    let mut grid = build_grid(&config).unwrap();
    grid.phase = 0.7;

    let extent = |grid: &YeeGrid, rel: f64| -> (f64, f64) {
        let max = grid.hz.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        let thr = rel * max;
        let row = 32usize;
        let mut left = 48.0f64;
        let mut right = 48.0f64;
        for i in 0..112 {
            if grid.hz[row * 112 + i].abs() >= thr {
                left = left.min(i as f64);
                right = right.max(i as f64);
            }
        }
        (48.0 - left, right - 48.0)
    };

    // Let the front get well inside each medium, then measure speeds over a
    // common interval so entry-time offsets cancel.
    for _ in 0..48 {
        step_yee(&mut grid, &config).unwrap();
    }
    let (l1, r1) = extent(&grid, 1e-4);
    for _ in 0..32 {
        step_yee(&mut grid, &config).unwrap();
    }
    let (l2, r2) = extent(&grid, 1e-4);
    let dt_span = 32.0 * config.dt;
    let v_vac = (l2 - l1) / dt_span;
    let v_med = (r2 - r1) / dt_span;
    let ratio = v_vac / v_med;
    let want = 2.0f64.sqrt();
    assert!(
        (ratio - want).abs() / want < 0.05,
        "speed ratio {ratio} (vacuum {v_vac}, medium {v_med})"
    );
}

#[test]
fn non_finite_field_names_the_step() {
    let config = SimulationConfig::desk(quiet_source());
    let mut grid = build_grid(&config).unwrap();
    for _ in 0..3 {
        step_yee(&mut grid, &config).unwrap();
    }
    grid.hz[100] = f64::INFINITY;
    let err = step_yee(&mut grid, &config).unwrap_err();
    match err {
        FdtdError::BlowUp { step } => assert_eq!(step, 4),
        other => panic!("unexpected error {other:?}"),
    }
}

#[test]
fn run_is_bitwise_deterministic() {
    let config = SimulationConfig::sized(48, 48, 300, point_source(20, 24, 1.0));
    let a = run(&config, 99).unwrap();
    let b = run(&config, 99).unwrap();
    assert_eq!(a.hz_final, b.hz_final);
    assert_eq!(a.energy, b.energy);
    let c = run(&config, 100).unwrap();
    assert_ne!(a.hz_final, c.hz_final);
}

#[test]
fn snapshot_image_mapping() {
    let config = SimulationConfig::desk(quiet_source());
    let mut snap = run(&config, 0).unwrap();
    // All-zero Hz maps to a uniform 0.5 image.
    let img = snapshot_to_image(&snap, 1.0);
    assert_eq!(img.shape(), &[3, 64, 64]);
    assert!(img.data().iter().all(|&v| v == 0.5));
    // Hz = +A clamps to 1, Hz = -2A clamps to 0.
    snap.hz_final.fill(1.0);
    assert!(snapshot_to_image(&snap, 1.0).data().iter().all(|&v| v == 1.0));
    snap.hz_final.fill(-2.0);
    assert!(snapshot_to_image(&snap, 1.0).data().iter().all(|&v| v == 0.0));
}

#[test]
fn paper_scale_config_shape() {
    let config = SimulationConfig::paper(point_source(128, 128, 1.0));
    assert_eq!((config.nx, config.ny), (256, 256));
    assert!(config.n_steps > 10_000);
    config.validate().unwrap();
}
