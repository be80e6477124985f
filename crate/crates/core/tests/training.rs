use aum::encoder::{save_checkpoint, BlockVariant, ClsPosition};
use aum::training::{new_model, toy_dataset, train, Dataset, TrainConfig, DATASET_INDEX};

#[test]
fn fobi_mid_memorizes_the_toy_set() {
    let (data, _) = toy_dataset(64, 0).unwrap();
    let cfg = TrainConfig::default();
    assert_eq!((cfg.variant, cfg.cls_position), (BlockVariant::FoBi, ClsPosition::Mid));
    let mut model = new_model::<f32>(&cfg, &data).unwrap();
    let log = train(&mut model, &data, &cfg).unwrap();
    assert_eq!(log.len(), 100);
    assert!(log.last().unwrap().metric >= 0.95, "{:?}", log.last());
}

#[test]
fn fofo_head_cannot_beat_chance() {
    let (data, _) = toy_dataset(64, 0).unwrap();
    let cfg = TrainConfig {
        variant: BlockVariant::FoFo,
        cls_position: ClsPosition::Head,
        epochs: 30,
        ..Default::default()
    };
    let mut model = new_model::<f32>(&cfg, &data).unwrap();
    let log = train(&mut model, &data, &cfg).unwrap();
    assert!(log.iter().all(|r| (r.metric - 0.5).abs() <= 0.05), "{log:?}");
}

#[test]
fn same_seed_gives_identical_log_and_checkpoint() {
    let (data, _) = toy_dataset(16, 1).unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        mixup: 0.3,
        specaug_freq: 8,
        specaug_time: 8,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let mut model = new_model::<f32>(&cfg, &data).unwrap();
        let log = train(&mut model, &data, &cfg).unwrap();
        let path = dir.path().join(name);
        save_checkpoint(&path, &model).unwrap();
        (log, std::fs::read(path).unwrap())
    };
    let (la, ca) = run("a.aumc");
    let (lb, cb) = run("b.aumc");
    assert_eq!(la, lb);
    assert_eq!(ca, cb);

    let other = TrainConfig { seed: 1, ..cfg.clone() };
    let mut model = new_model::<f32>(&other, &data).unwrap();
    assert_ne!(train(&mut model, &data, &other).unwrap(), la);
}

#[test]
fn dataset_loads_from_cached_features() {
    use aum::features::{write_cache, write_manifest, Manifest, ManifestEntry};
    let (data, fc) = toy_dataset(6, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut entries = Vec::new();
    for (i, s) in data.spectrograms.iter().enumerate() {
        let path = dir.path().join(format!("{i}.aumf"));
        write_cache(&path, s).unwrap();
        entries.push(ManifestEntry {
            path,
            labels: data.labels[i].clone(),
        });
    }
    write_manifest(
        &dir.path().join(DATASET_INDEX),
        &Manifest {
            entries,
            multi_label: false,
        },
    )
    .unwrap();
    let loaded = Dataset::load(dir.path(), Some((fc.dataset_mean, fc.dataset_std))).unwrap();
    assert_eq!(loaded, data);
}
