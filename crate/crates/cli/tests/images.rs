use cost_cli::image::{heatmap, hot, write_heatmap, Scale};

#[test]
fn constant_matrix_is_one_colour() {
    let img = heatmap(&[0.3; 6], 2, 3, Scale::Auto, 4).unwrap();
    let first = img.get(0, 0);
    assert!(img.rgb.chunks(3).all(|p| p == first));
}

#[test]
fn identical_input_gives_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let m: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
    let (a, b) = (dir.path().join("a.ppm"), dir.path().join("b.ppm"));
    write_heatmap(&a, &m, 3, 4, Scale::Auto, 5).unwrap();
    write_heatmap(&b, &m, 3, 4, Scale::Auto, 5).unwrap();
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn corners_follow_colormap_endpoints() {
    let img = heatmap(&[0.0, 1.0, 1.0, 0.0], 2, 2, Scale::Auto, 3).unwrap();
    let (lo, hi) = (hot(0.0), hot(1.0));
    assert_eq!(lo, [0, 0, 0]);
    assert_eq!(hi, [255, 255, 255]);
    assert_eq!(img.get(0, 0), lo);
    assert_eq!(img.get(5, 0), hi);
    assert_eq!(img.get(0, 5), hi);
    assert_eq!(img.get(5, 5), lo);
    let bytes = img.to_ppm();
    assert!(bytes.starts_with(b"P6\n6 6\n255\n"));
}

#[test]
fn invalid_heatmaps_are_rejected() {
    assert!(heatmap(&[], 0, 0, Scale::Auto, 1).is_err());
    assert!(heatmap(&[f64::NAN], 1, 1, Scale::Auto, 1).is_err());
    let dir = tempfile::tempdir().unwrap();
    assert!(write_heatmap(&dir.path().join("missing/x.ppm"), &[1.0], 1, 1, Scale::Auto, 1).is_err());
}
