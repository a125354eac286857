use masm_core::data::build_splits;
use masm_core::harness::{decompose_inspect, run_pretrain};
use masm_core::network::Projection;
use masm_core::{svd, TrainConfig};

#[test]
fn default_pretrain_is_accurate_reproducible_and_inspectable() {
    let cfg = TrainConfig::default();
    let splits = build_splits(&cfg.data, cfg.dims(), cfg.data_seed()).unwrap();
    let a = run_pretrain(&cfg, &splits).unwrap();
    assert!(a.test_accuracy >= 0.9, "accuracy {}", a.test_accuracy);

    let b = run_pretrain(&cfg, &splits).unwrap();
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());

    let rows = decompose_inspect(&a.checkpoint, &cfg.decomposition).unwrap();
    for (row, p) in rows.iter().zip(a.checkpoint.model.layers()) {
        let Projection::Dense(w) = p else { panic!("pretrained layers are dense") };
        let s = svd(w).unwrap().singular_values;
        let energy: Vec<f64> = s.iter().map(|x| x * x).collect();
        let total: f64 = energy.iter().sum();
        let mut acc = 0.0;
        let hit = energy.iter().position(|e| {
            acc += e;
            acc >= 0.9 * total
        });
        let want = hit.map_or(s.len(), |i| i + 1).clamp(1, s.len() - cfg.decomposition.k);
        assert_eq!(row.r, want, "layer {}", row.layer);
        let sum = row.semantic_energy + row.artifact_energy.iter().sum::<f64>();
        assert!((sum - 1.0).abs() <= 1e-12, "layer {} energy sum {sum}", row.layer);
    }
}
