use bimac::flops::{flops_analytic, flops_instrumented, flops_instrumented_layer, Widths};
use bimac::data::{synth_samples, DataSpec};
use bimac::mabic::random_hard_mask;
use bimac::net::build_variant;
use bimac::{Bi2MaNet, BiMacConfig, BiMacParams, NetConfig, OpTally, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn cost_grows_with_the_focused_share() {
    let w = Widths::default_for(32);
    let totals: Vec<f64> = (0..=10)
        .map(|n| flops_analytic(32, 32, 3, 64, 64, n as f64 / 10.0, w).unwrap().total())
        .collect();
    assert!(totals.windows(2).all(|p| p[1] > p[0]));
    // Per-pixel focused cost is linear in the share.
    let sparse = flops_analytic(32, 32, 3, 64, 64, 0.15, w).unwrap();
    let dense = flops_analytic(32, 32, 3, 64, 64, 1.0, w).unwrap();
    let ratio = sparse.focused_total() / dense.focused_total();
    assert!((ratio - 0.15).abs() < 1e-9, "{ratio}");
    assert!(dense.total() > sparse.total());
}

#[test]
fn counted_layer_matches_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = BiMacConfig::new(8, 8);
    let p = BiMacParams::<f64>::init(cfg.clone(), &mut rng).unwrap();
    let x = Tensor::<f64>::uniform(&[8, 20, 20], 1.0, &mut rng);
    for f in [0.0, 0.25, 1.0] {
        let hm = random_hard_mask::<f64>(20, 20, f, 3);
        let counted = flops_instrumented_layer(&p, &x, Some(&hm), &mut OpTally::on()).unwrap();
        let model = flops_analytic(8, 8, 3, 20, 20, f, Widths::of(&cfg)).unwrap();
        assert!(counted.max_rel_diff(&model) < 1e-12, "f = {f}");
    }
    assert!(flops_instrumented_layer(&p, &x, None, &mut OpTally::off()).is_err());
}

#[test]
fn whole_network_count_is_positive_and_repeatable() {
    let cfg = NetConfig {
        base_channels: 8,
        depth: 2,
        ..NetConfig::default()
    };
    let net: Bi2MaNet<f64> = build_variant(cfg, 2).unwrap();
    let spec = DataSpec {
        height: 16,
        width: 16,
        ..DataSpec::default()
    };
    let s = synth_samples::<f64>(&spec, 2, 0, 1).unwrap().remove(0);
    let a = flops_instrumented(&net, &s.pan, &s.lrms, &mut OpTally::on()).unwrap();
    let b = flops_instrumented(&net, &s.pan, &s.lrms, &mut OpTally::on()).unwrap();
    assert!(a.total() > 0.0);
    assert_eq!(a.to_csv(), b.to_csv());
}
