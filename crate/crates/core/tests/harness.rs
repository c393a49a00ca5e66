use mccl::data::{read_dataset, write_dataset};
use mccl::harness::{
    analysis_views, histogram_of_views, run_ablation, run_gradcheck, run_gradcheck_corrupted, similarity_histogram,
    Arm, GRADCHECK_TERMS,
};
use mccl::segnet::SegNet;
use mccl::trainer::{generate_data, partition, read_checkpoint, read_metrics, train, ExperimentConfig};

fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.image_size = 16;
    cfg.hidden = [4, 8];
    cfg.feature_channels = 8;
    cfg.n_train = 8;
    cfg.n_labeled = 2;
    cfg.n_val = 4;
    cfg.batch = 2;
    cfg.epochs = 2;
    cfg.n_r = 4;
    cfg.n_d = 8;
    cfg
}

fn gradcheck_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.image_size = 8;
    cfg.feature_channels = 8;
    cfg.hidden = [4, 8];
    cfg.n_r = 2;
    cfg.n_d = 4;
    cfg
}

#[test]
fn identical_views_fill_the_top_bin() {
    let cfg = tiny_config();
    let data = generate_data(&cfg).unwrap();
    let net = SegNet::init(&cfg.architecture(), 1, cfg.init_scale).unwrap();
    let pairs: Vec<_> = data.scenes[..3]
        .iter()
        .map(|s| (s.image.clone(), s.image.clone()))
        .collect();
    let h = histogram_of_views(&net, &pairs, 10).unwrap();
    assert_eq!(h.pixel_ratio.len(), 10);
    assert_eq!(h.pixel_ratio[9], 1.0);
    assert_eq!(h.agreement[9], 1.0);
    assert!(h.pixel_ratio[..9].iter().all(|&r| r == 0.0));
}

#[test]
fn histogram_shape_and_normalization() {
    let cfg = tiny_config();
    let data = generate_data(&cfg).unwrap();
    let net = SegNet::init(&cfg.architecture(), 2, cfg.init_scale).unwrap();
    for bins in [1, 7, 10] {
        let h = similarity_histogram(&net, &data.scenes[..4], bins, 5).unwrap();
        assert_eq!(h.pixel_ratio.len(), bins);
        assert_eq!(h.agreement.len(), bins);
        assert_eq!(h.edges.len(), bins + 1);
        assert!((h.pixel_ratio.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(h.agreement.iter().all(|a| (0.0..=1.0).contains(a)));
        // observed extremes land in the first and last bins
        assert!(h.raw_max > h.raw_min);
        assert!(h.counts[0] > 0 && h.counts[bins - 1] > 0);
    }
    assert!(similarity_histogram(&net, &[], 10, 5).is_err());
    let views = analysis_views(&data.scenes[..2], 5).unwrap();
    assert_eq!(views, analysis_views(&data.scenes[..2], 5).unwrap());
}

#[test]
fn untrained_arms_agree() {
    let mut cfg = tiny_config();
    cfg.epochs = 0;
    let data = generate_data(&cfg).unwrap();
    let report = run_ablation(&cfg, &data, &Arm::ALL, &[4], None).unwrap();
    assert_eq!(report.rows.len(), 5);
    let first = report.rows[0].val_miou.unwrap();
    for (row, arm) in report.rows.iter().zip(Arm::ALL) {
        assert_eq!(row.arm, arm);
        assert_eq!(row.toggles, arm.toggles());
        assert_eq!(row.val_miou, Some(first));
    }
}

#[test]
fn ablation_is_reproducible() {
    let cfg = tiny_config();
    let data = generate_data(&cfg).unwrap();
    let arms = [Arm::Baseline, Arm::Full];
    let a = run_ablation(&cfg, &data, &arms, &[1, 2], None).unwrap();
    let b = run_ablation(&cfg, &data, &arms, &[1, 2], None).unwrap();
    assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
    assert_eq!(a.to_table(), b.to_table());
    assert!(a.rows.iter().all(|r| r.error.is_none()));
    let csv = a.to_csv().unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn failed_arm_is_reported() {
    let cfg = tiny_config();
    let data = generate_data(&cfg).unwrap();
    let mut big = cfg.clone();
    big.n_train = 40;
    let report = run_ablation(&big, &data, &[Arm::Baseline, Arm::Full], &[1], None).unwrap();
    for r in &report.rows {
        assert!(r.error.as_deref().is_some_and(|e| e.contains("scenes")), "{:?}", r.error);
        assert!(r.val_miou.is_none());
    }
    assert!(report.to_csv().unwrap().contains("failed"));
    assert_eq!((report.summaries[0].completed, report.summaries[0].failed), (0, 1));
}

#[test]
fn gradcheck_passes_on_tiny_instance() {
    let report = run_gradcheck(&gradcheck_config()).unwrap();
    assert_eq!(report.rows.len(), 7);
    for (row, term) in report.rows.iter().zip(GRADCHECK_TERMS) {
        assert_eq!(row.term, term);
        assert!(row.passed, "{term}: {}", row.max_rel_error);
    }
    assert!(report.passed());
}

#[test]
fn corrupted_gradient_is_flagged() {
    let cfg = gradcheck_config();
    for term in ["L_dt", "L_total"] {
        let report = run_gradcheck_corrupted(&cfg, term).unwrap();
        assert!(!report.passed());
        let bad: Vec<_> = report.rows.iter().filter(|r| !r.passed).map(|r| r.term).collect();
        assert_eq!(bad, [term]);
        assert!(report.to_csv().unwrap().contains("FAIL"));
    }
}

#[test]
fn training_outputs_round_trip() {
    let mut cfg = tiny_config();
    cfg.ckpt_every = 1;
    let data = generate_data(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let run = train(&cfg, &data, Some(dir.path()), &mut |_| {}).unwrap();

    let metrics = read_metrics(&dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics, run.metrics);
    assert_eq!(metrics.len(), 2);
    for e in 1..=2 {
        assert!(dir.path().join(format!("ckpt_epoch_{e:04}")).exists());
    }
    let ck = read_checkpoint(&dir.path().join("final.ckpt")).unwrap();
    assert_eq!(ck.config, cfg);
    assert_eq!(ck.epoch, 2);
    assert_eq!(ck.state, run.state);

    let data_dir = dir.path().join("data");
    write_dataset(&data_dir, &data).unwrap();
    let back = read_dataset(&data_dir).unwrap();
    let part = partition(&cfg, &back).unwrap();
    let miou = mccl::harness::evaluate(&ck.state.net, part.val, cfg.num_classes).unwrap();
    assert_eq!(miou, run.val_miou);
}
