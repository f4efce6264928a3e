use physnet_web::{front_speed, Growth, GrowthSettings, GRID};

#[test]
fn growth_spreads_with_time_and_diffusion() {
    let short = Growth::run(GrowthSettings {
        days: 50.0,
        ..GrowthSettings::default()
    })
    .unwrap();
    let long = Growth::run(GrowthSettings::default()).unwrap();
    assert!(long.burden() > short.burden());
    assert!(long.core_area() > short.core_area());
    assert!(long.field.max() <= long.settings.k);

    let slow = Growth::run(GrowthSettings {
        d: 0.05,
        rho: 0.008,
        ..GrowthSettings::default()
    })
    .unwrap();
    assert!(long.burden() > slow.burden());
}

#[test]
fn zero_days_returns_the_seed() {
    let g = Growth::run(GrowthSettings {
        days: 0.0,
        ..GrowthSettings::default()
    })
    .unwrap();
    assert_eq!(g.steps, 0);
    // The seed peaks at half capacity between grid points.
    assert!(g.field.max() > 0.45 && g.field.max() <= 0.5);
}

#[test]
fn views_have_canvas_layout() {
    let g = Growth::run(GrowthSettings::default()).unwrap();
    let scan = g.scan_rgba(3);
    assert_eq!(scan.len(), GRID * GRID * 4);
    assert_eq!(scan, g.scan_rgba(3));
    assert_ne!(scan, g.scan_rgba(4));

    let (view, band) = g.boundary_rgba(0.9).unwrap();
    assert_eq!(view.len(), GRID * GRID * 4);
    assert!(band > 0 && band <= GRID * GRID / 10);
    let (_, wider) = g.boundary_rgba(0.8).unwrap();
    assert!(wider > band);
    assert!(g.boundary_rgba(1.0).is_err());
}

#[test]
fn invalid_parameters_are_errors() {
    let bad = GrowthSettings {
        d: -1.0,
        ..GrowthSettings::default()
    };
    assert!(Growth::run(bad).is_err());
    assert!(front_speed(0.1, 0.0).is_err());
}

#[test]
fn front_speed_tracks_the_travelling_wave() {
    let fs = front_speed(0.15, 0.025).unwrap();
    assert!((fs.predicted - 2.0 * (0.15f64 * 0.025).sqrt()).abs() < 1e-12);
    assert!(fs.rel_error() < 0.1, "{fs:?}");
}
