use kpt_core::frontend::KeypointSource;
use kpt_core::harness::checkpoint::Checkpoint;
use kpt_core::harness::model::{forward_batch, keypoint_origin, keypoint_source, prepare, total_loss, KeypointOrigin};
use kpt_core::harness::viz::{attention_radii, attention_svg, keypoint_center, write_all};
use kpt_core::harness::{eval, RunLog, TrainConfig, TrainOptions, Trainer};
use kpt_core::synthgen::{sample_scene, SceneSample};
use kpt_core::KptError;
use kpt_tensor::nn::ParamGroup;
use kpt_tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> TrainConfig {
    TrainConfig { batch_size: 4, gt_keypoint_warmup_epochs: 1, seed: 21, ..TrainConfig::default() }
}

fn dataset(n: u64) -> Vec<SceneSample> {
    (0..n).map(|i| sample_scene(500 + i, &TrainConfig::default().scene).unwrap()).collect()
}

fn losses_csv(cfg: &TrainConfig, data: &[SceneSample], steps: usize) -> String {
    let mut t = Trainer::new(cfg).unwrap();
    t.run(data, &TrainOptions { max_steps: Some(steps), ..Default::default() }).unwrap().to_csv()
}

#[test]
fn total_is_a_strict_sum() {
    let mut g = Graph::<f64>::new();
    let zero = g.constant(Tensor::scalar(0.0));
    let z = total_loss(&mut g, &[Some(zero), Some(zero), None, Some(zero)]).unwrap();
    assert_eq!(g.value(z).item(), 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        let v: [f64; 4] = std::array::from_fn(|_| rng.gen_range(0.0..100.0));
        let nodes: Vec<_> = v.iter().map(|&x| Some(g.constant(Tensor::scalar(x)))).collect();
        let t = total_loss(&mut g, &nodes).unwrap();
        assert_eq!(g.value(t).item(), ((v[0] + v[1]) + v[2]) + v[3]);
        let mut without = nodes.clone();
        without[1] = None;
        let t = total_loss(&mut g, &without).unwrap();
        assert_eq!(g.value(t).item(), (v[0] + v[2]) + v[3]);
    }
}

#[test]
fn warmup_boundary_is_exclusive() {
    let cfg = TrainConfig { gt_keypoint_warmup_epochs: 5, ..TrainConfig::default() };
    assert_eq!(keypoint_origin(0, &cfg), KeypointOrigin::GroundTruth);
    assert_eq!(keypoint_origin(4, &cfg), KeypointOrigin::GroundTruth);
    assert_eq!(keypoint_origin(5, &cfg), KeypointOrigin::Predicted);
}

#[test]
fn gt_keypoints_count_visible_joints_and_object_samples() {
    let cfg = TrainConfig::default();
    for s in dataset(20) {
        let prep = prepare(&s, &cfg, None, 3);
        let kps = keypoint_source(0, &cfg, &prep, None, cfg.nms_threshold_train);
        let visible = s.num_visible().min(cfg.n_hand);
        let has_mask = prep.gt_mask.iter().any(|&v| v >= 0.5);
        let want = visible + if has_mask { cfg.n_obj } else { 0 };
        assert_eq!(kps.len(), want);
        assert_eq!(kps.iter().filter(|k| k.source == KeypointSource::HandHeatmap).count(), visible);
    }
}

#[test]
fn parameter_groups_partition_the_store() {
    let cfg = TrainConfig { ablations: kpt_core::harness::Ablations { detr_style_tokens: true, ..Default::default() }, ..small_config() };
    let t = Trainer::new(&cfg).unwrap();
    let mut names = std::collections::HashSet::new();
    for e in t.model.store.iter() {
        assert!(names.insert(e.name.clone()), "duplicate parameter {}", e.name);
        let backbone = e.name.starts_with("backbone.");
        assert_eq!(e.group == ParamGroup::Backbone, backbone, "{}", e.name);
    }
    assert!(t.model.store.iter().any(|e| e.group == ParamGroup::Transformer));
}

#[test]
fn two_steps_are_bitwise_reproducible() {
    let cfg = small_config();
    let data = dataset(8);
    let a = losses_csv(&cfg, &data, 2);
    assert_eq!(a, losses_csv(&cfg, &data, 2));
    assert_eq!(a.lines().count(), 3);
}

#[test]
fn predicted_keypoints_after_warmup_train() {
    let cfg = small_config();
    let data = dataset(8);
    let mut t = Trainer::new(&cfg).unwrap();
    let log = t.run(&data, &TrainOptions { max_steps: Some(3), ..Default::default() }).unwrap();
    for r in &log.records {
        let l = &r.losses;
        let sum = [Some(l.l_h), l.l_ki, l.l_hand, l.l_obj].iter().flatten().fold(0.0f32, |a, &x| a + x as f32);
        assert_eq!(sum as f64, l.total);
    }
    assert_eq!(log.records.last().unwrap().epoch, 1);
}

#[test]
fn disabled_identity_loss_leaves_no_column() {
    let mut cfg = small_config();
    cfg.ablations.disable_identity_loss = true;
    let data = dataset(4);
    let mut t = Trainer::new(&cfg).unwrap();
    let log = t.run(&data, &TrainOptions { max_steps: Some(1), ..Default::default() }).unwrap();
    assert!(log.records[0].losses.l_ki.is_none());
    let csv = log.to_csv();
    let header = csv.lines().next().unwrap();
    assert!(!header.contains("l_ki"));
    assert_eq!(header.split(',').count(), csv.lines().nth(1).unwrap().split(',').count());
    assert!(RunLog::header(true).contains("l_ki"));
}

#[test]
fn checkpoint_round_trip_and_resume() {
    let cfg = small_config();
    let data = dataset(8);
    let mut straight = Trainer::new(&cfg).unwrap();
    let log = straight.run(&data, &TrainOptions { max_steps: Some(3), ..Default::default() }).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.kpfc");
    let mut first = Trainer::new(&cfg).unwrap();
    first.run(&data, &TrainOptions { max_steps: Some(2), checkpoint: Some(path.clone()), ..Default::default() }).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.to_bytes(), bytes);
    assert_eq!(ck.step, 2);
    assert_eq!(ck.params, first.model.store);
    let mut resumed = Trainer::from_checkpoint(&ck).unwrap();
    let next = resumed.train_step(&data).unwrap();
    let want = &log.records[2];
    assert_eq!(next.step, want.step);
    assert_eq!(next.losses.total.to_bits(), want.losses.total.to_bits());
    assert_eq!(resumed.model.store, straight.model.store);
}

#[test]
fn checkpoint_errors_are_distinct() {
    let cfg = small_config();
    let t = Trainer::new(&cfg).unwrap();
    let bytes = t.checkpoint(8).to_bytes();
    let mut bad = bytes.clone();
    bad[0] = b'Z';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(KptError::BadMagic { .. })));
    let mut ver = bytes.clone();
    ver[4] = 9;
    assert!(matches!(Checkpoint::from_bytes(&ver), Err(KptError::VersionMismatch { .. })));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]), Err(KptError::Truncated { .. })));
    let mut long = bytes.clone();
    long.push(0);
    assert!(Checkpoint::from_bytes(&long).is_err());
    let other = Trainer::new(&TrainConfig { d_app: 32, ..cfg }).unwrap().checkpoint(8);
    let mut mixed = other.clone();
    mixed.config = small_config();
    assert!(Trainer::from_checkpoint(&mixed).is_err());
}

#[test]
fn non_finite_loss_names_the_term_and_keeps_parameters() {
    let cfg = small_config();
    let data = dataset(4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.kpfc");
    let mut t = Trainer::new(&cfg).unwrap();
    t.run(&data, &TrainOptions { max_steps: Some(1), checkpoint: Some(path.clone()), ..Default::default() }).unwrap();
    let bias = t.model.store.iter_mut().find(|e| e.name == "backbone.heatmap.bias").unwrap();
    bias.tensor.data_mut()[0] = f32::NAN;
    let before = t.model.store.clone();
    match t.run(&data, &TrainOptions { max_steps: Some(2), checkpoint: Some(path.clone()), ..Default::default() }) {
        Err(KptError::NonFiniteLoss { term }) => assert_eq!(term, "l_h"),
        other => panic!("expected a non-finite loss, got {:?}", other.map(|l| l.records.len())),
    }
    assert_eq!(t.step, 1);
    for (a, b) in t.model.store.iter().zip(before.iter()) {
        let bits = |x: &[f32]| x.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.tensor.data()), bits(b.tensor.data()));
    }
    assert_eq!(Checkpoint::load(&path).unwrap().step, 1);
}

#[test]
fn detr_style_swaps_only_the_token_source() {
    let data = dataset(2);
    for detr in [false, true] {
        let mut cfg = small_config();
        cfg.ablations.detr_style_tokens = detr;
        let t = Trainer::new(&cfg).unwrap();
        let batch: Vec<_> = data.iter().map(|s| prepare(s, &cfg, None, 1)).collect();
        let mut g = Graph::<f32>::new();
        let p = t.model.store.bind_frozen(&mut g);
        let fwd = forward_batch(&mut g, &t.model, &p, &batch, 0, cfg.nms_threshold_train).unwrap();
        for (kps, prep) in fwd.keypoints.iter().zip(&batch) {
            if detr {
                assert_eq!(kps.len(), 64);
                assert!(kps.iter().all(|k| k.source == KeypointSource::GridCell));
            } else {
                assert_eq!(kps, &keypoint_source(0, &cfg, prep, None, cfg.nms_threshold_train));
            }
        }
        assert_eq!(fwd.decoder.unwrap().poses.len(), cfg.decoder_layers);
    }
}

#[test]
fn evaluation_is_pure_and_counts_every_sample() {
    let cfg = small_config();
    let data = dataset(6);
    let t = Trainer::new(&cfg).unwrap();
    let a = eval::evaluate(&t.model, &data).unwrap();
    let b = eval::evaluate(&t.model, &data).unwrap();
    assert_eq!(a.report.to_json(), b.report.to_json());
    assert_eq!(a.predictions, b.predictions);
    let c = &a.report.counts;
    assert_eq!(c.single + c.interacting, data.len());
}

#[test]
fn visualization_geometry() {
    let k = kpt_core::frontend::Keypoint::from_pixel(3.0, 5.0, 32, 32, 1.0, KeypointSource::HandHeatmap);
    // heatmap pixel centre (3, 5) lands on image pixel centre (6.5, 10.5) at 64×64
    assert_eq!(keypoint_center(&k, 64, 64), [6.5, 10.5]);
    assert_eq!(attention_radii(&[0.0, 0.0], 3.0), vec![0.0, 0.0]);
    let r = attention_radii(&[0.5, 0.25, 0.25, 0.0], 3.0);
    assert_eq!(r, vec![3.0, 1.5, 1.5, 0.0]);

    // an untrained heatmap sits below the usual evaluation threshold
    let cfg = TrainConfig { nms_threshold_eval: 0.0, ..small_config() };
    let data = dataset(1);
    let t = Trainer::new(&cfg).unwrap();
    let tr = eval::trace(&t.model, &data).unwrap().remove(0).unwrap();
    for row in &tr.cross_attention {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
    }
    let mut zeroed = tr.clone();
    zeroed.cross_attention[0] = vec![0.0; zeroed.keypoints.len()];
    zeroed.cross_attention[0][0] = 1.0;
    let svg = attention_svg(&data[0], &zeroed, &[0]);
    let group = svg.split("<g id=\"query-0\"").nth(1).unwrap().split("</g>").next().unwrap();
    assert_eq!(group.matches("<circle").count(), 1);
    assert!(!svg.contains("r=\"0\""));
    let dir = tempfile::tempdir().unwrap();
    let files = write_all(dir.path(), &data[0], &tr, cfg.heatmap_size, &[0, 1]).unwrap();
    assert_eq!(files.len(), 4);
    for f in files {
        assert!(std::fs::metadata(f).unwrap().len() > 0);
    }
}
