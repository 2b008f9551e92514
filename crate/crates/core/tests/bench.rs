use lightseg::bench::{benchmark, benchmark_all, flop_count, format_table, overlay_rgb, summarize, TableRow};
use lightseg::convert::convert_to_dilated;
use lightseg::{build_network, NetworkSpec, ParamStore, Shape, Tensor, Variant};
use proptest::prelude::*;

#[test]
fn stem_and_head_macs_by_hand() {
    let spec = build_network(Variant::Standard, 2).unwrap();
    let r = flop_count(&spec, Shape::new(1, 3, 256, 320)).unwrap();
    let stem = &r.layers[0];
    assert_eq!(stem.name, "stem.conv");
    assert_eq!(stem.macs, 64 * 3 * 49 * 128 * 160);
    let head = r.layers.last().unwrap();
    assert_eq!(head.macs, 2 * 512 * 8 * 10);
    // stage 1 unit: two 3x3 convs at 64x80 with 64 channels
    assert_eq!(r.conv_macs("layer1.0."), 2 * 64 * 64 * 9 * 64 * 80);
    let batch2 = flop_count(&spec, Shape::new(2, 3, 256, 320)).unwrap();
    assert_eq!(batch2.total, 2 * r.total);
}

#[test]
fn conversion_quadruples_stage_four_cost() {
    let plain = build_network(Variant::Standard, 2).unwrap();
    let conv = convert_to_dilated(&plain).unwrap();
    let shape = Shape::new(1, 3, 256, 320);
    let a = flop_count(&plain, shape).unwrap();
    let b = flop_count(&conv, shape).unwrap();
    assert_eq!(a.conv_macs("layer1."), b.conv_macs("layer1."));
    // stage 4 runs at 4x the resolution in each dimension
    assert_eq!(16 * a.conv_macs("layer4."), b.conv_macs("layer4."));
    assert_eq!(4 * a.conv_macs("layer3.1."), b.conv_macs("layer3.1."));
}

#[test]
fn flop_ordering_follows_channel_plans() {
    let shape = Shape::new(1, 3, 256, 320);
    let f: Vec<u64> = Variant::ALL
        .iter()
        .map(|&v| flop_count(&convert_to_dilated(&build_network(v, 2).unwrap()).unwrap(), shape).unwrap().total)
        .collect();
    assert!(f[0] > f[1] && f[1] > f[2], "{f:?}");
}

#[test]
fn summary_statistics() {
    let (mean, median, p95, min) = summarize(&[4.0, 1.0, 3.0, 2.0]);
    assert_eq!((mean, median, p95, min), (2.5, 2.5, 4.0, 1.0));
    let times: Vec<f64> = (1..=100).map(f64::from).collect();
    let (_, median, p95, _) = summarize(&times);
    assert_eq!(median, 50.5);
    assert_eq!(p95, 95.0);
}

proptest! {
    #[test]
    fn summary_is_ordered(times in prop::collection::vec(0.0f64..1e3, 1..64)) {
        let (mean, median, p95, min) = summarize(&times);
        prop_assert!(min <= median && median <= p95);
        prop_assert!(min <= mean && mean <= p95.max(mean));
        let max = times.iter().cloned().fold(f64::MIN, f64::max);
        prop_assert!(p95 <= max && mean <= max + 1e-9);
    }
}

#[test]
fn benchmark_rejects_short_runs() {
    let spec = convert_to_dilated(&NetworkSpec::with_plan(8, [8, 8, 8, 8], 2).unwrap()).unwrap();
    let params = ParamStore::init(&spec, 0);
    let shape = Shape::new(1, 3, 32, 32);
    assert!(benchmark(&spec, &params, shape, 5, 10, 0).is_err());
    assert!(benchmark(&spec, &params, shape, 1, 30, 0).is_err());
    let r = benchmark(&spec, &params, shape, 5, 30, 0).unwrap();
    assert_eq!(r.times_ms.len(), 30);
    assert!(r.min_ms <= r.median_ms && r.median_ms <= r.p95_ms);
    assert!((r.fps - 1000.0 / r.median_ms).abs() < 1e-9);
    let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
    assert_eq!(json["iters"], 30);
}

#[test]
fn overlay_blends_only_foreground() {
    let img = Tensor::zeros(Shape::new(1, 3, 2, 2));
    let rgb = overlay_rgb(&img, &[0, 1, 2, 255]).unwrap();
    assert_eq!(rgb.get_pixel(0, 0).0, [0, 0, 0]);
    assert_eq!(rgb.get_pixel(1, 0).0, [128, 0, 0]);
    assert_eq!(rgb.get_pixel(0, 1).0, [0, 128, 0]);
    assert_eq!(rgb.get_pixel(1, 1).0, [0, 0, 0]);
    assert!(overlay_rgb(&img, &[0, 1]).is_err());
}

#[test]
fn table_has_a_row_per_model() {
    let t = format_table(&[
        TableRow { model: "standard".into(), iou: Some(0.91234), time_ms: Some(12.25) },
        TableRow { model: "light_v2".into(), iou: None, time_ms: Some(3.0) },
    ]);
    assert!(t.contains("0.912") && t.contains("12.2") && t.contains(" - "), "{t}");
    assert_eq!(t.lines().filter(|l| l.contains("standard") || l.contains("light_v2")).count(), 2);
}

#[test]
fn interleaved_benchmark_reports_each_network() {
    let specs: Vec<_> = [Variant::LightV2, Variant::LightV1]
        .into_iter()
        .map(|v| {
            let spec = convert_to_dilated(&build_network(v, 2).unwrap()).unwrap();
            let params = ParamStore::<f32>::init(&spec, 0);
            (spec, params)
        })
        .collect();
    let refs: Vec<_> = specs.iter().map(|(s, p)| (s, p)).collect();
    let shape = Shape::new(1, 3, 32, 32);
    let reports = benchmark_all(&refs, shape, 5, 30, 0).unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!((reports[0].variant.as_str(), reports[1].variant.as_str()), ("light_v2", "light_v1"));
    assert!(reports.iter().all(|r| r.times_ms.len() == 30 && r.median_ms > 0.0));
    assert!(reports[0].flops < reports[1].flops);
}
