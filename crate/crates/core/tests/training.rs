use icm3d::checkpoint::Checkpoint;
use icm3d::train::{train, NetworkShape, TrainConfig, Trainer};
use icm3d::{generate_dataset, generate_scene, HeadKind, SceneSpec};

fn small(paradigm: HeadKind, n_s: usize) -> TrainConfig {
    TrainConfig {
        paradigm,
        n_s,
        batch_size: 1,
        epochs: 200,
        network: NetworkShape { point_widths: vec![3, 32, 32], latent_width: 32, head_width: 16, context_k: 16, ..NetworkShape::default() },
        ..TrainConfig::default()
    }
}

#[test]
fn single_scene_loss_descends() {
    let spec = SceneSpec { total_points: Some(256), rng_seed: 1, ..SceneSpec::default() };
    let scene = vec![generate_scene::<f32>(&spec).unwrap()];
    for head in [HeadKind::Flatten, HeadKind::Project, HeadKind::Discriminative] {
        let (_, log) = train(&scene, &small(head, 4)).unwrap();
        assert_eq!(log.rows.len(), 200);
        let (first, last) = (log.rows[0].1.total, log.rows[199].1.total);
        assert!(last < first, "{head:?}: {first} -> {last}");
    }
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let spec = SceneSpec { total_points: Some(128), ..SceneSpec::default() };
    let data = generate_dataset::<f64>(&spec, 3).unwrap();
    let cfg = TrainConfig { epochs: 4, batch_size: 2, ..small(HeadKind::Project, 4) };
    let run = || {
        let mut t = Trainer::new(&cfg, &data).unwrap();
        t.run().unwrap();
        (t.checkpoint().unwrap().to_json().unwrap(), t.log().to_csv())
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    let back = Checkpoint::from_json(&a).unwrap();
    assert_eq!(back.to_json().unwrap(), a);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let spec = SceneSpec { total_points: Some(128), rng_seed: 3, ..SceneSpec::default() };
    let data = generate_dataset::<f32>(&spec, 4).unwrap();
    let cfg = TrainConfig { epochs: 3, batch_size: 3, ..small(HeadKind::Flatten, 4) };
    let mut full = Trainer::new(&cfg, &data).unwrap();
    full.run().unwrap();
    let mut first = Trainer::new(&cfg, &data).unwrap();
    first.run_until(2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    first.checkpoint().unwrap().save(&path).unwrap();
    let mut resumed = Trainer::resume(&cfg, &data, &Checkpoint::load(&path).unwrap()).unwrap();
    resumed.run().unwrap();
    assert_eq!(resumed.params(), full.params());
    let other = TrainConfig { lr0: 0.01, ..cfg };
    assert!(Trainer::resume(&other, &data, &Checkpoint::load(&path).unwrap()).is_err());
}
