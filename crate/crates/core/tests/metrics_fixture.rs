use modroute::metrics::pearson;

#[derive(serde::Deserialize)]
struct Fixture {
    x: Vec<f64>,
    y: Vec<f64>,
    r: f64,
    p: f64,
}

#[test]
fn pearson_matches_recorded_reference() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/pearson_n67.json")).unwrap();
    let f: Fixture = serde_json::from_str(&text).unwrap();
    assert_eq!(f.x.len(), 67);
    let got = pearson(&f.x, &f.y).unwrap();
    assert!((got.r - f.r).abs() < 0.02, "r {} vs {}", got.r, f.r);
    assert!((got.p - f.p).abs() < 0.1 * f.p, "p {} vs {}", got.p, f.p);
    // The reference and this implementation agree far more tightly than the
    // acceptance bound.
    assert!((got.r - f.r).abs() < 1e-12);
    assert!((got.p - f.p).abs() < 1e-9);
}
