use depthsr::dataio::{build_patchset, write_depth, DatasetManifest, Degradation, ManifestEntry, Split};
use depthsr::dfs::{refine_output, IrlsConfig};
use depthsr::network::{train, CascadeModel, DcnnUnitConfig, ModelConfig, TrainConfig};
use depthsr::optim::LrSchedule;
use depthsr::resample::{downsample, NoiseSpec};
use depthsr::synth::RectangleScene;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn manifest_to_refined_prediction() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = RectangleScene::default().dataset(48, 3);
    let mut entries = Vec::new();
    for (i, (id, map)) in scenes.iter().enumerate() {
        let name = format!("{id}.pfm");
        write_depth(&dir.path().join(&name), map).unwrap();
        let split = if i < 40 { Split::Train } else { Split::Test };
        entries.push(ManifestEntry { gt: name.into(), mask: None, split });
    }
    let path = dir.path().join("manifest.json");
    let deg = Degradation { factor: 2, noise: Some(NoiseSpec::new(651.0, 5).unwrap()) };
    DatasetManifest::new(deg, entries).unwrap().save(&path).unwrap();
    let manifest = DatasetManifest::load(&path).unwrap();
    let patches = build_patchset(&manifest, Some(Split::Train), 32, 16, 0).unwrap();
    assert!(!patches.is_empty());

    let cfg = ModelConfig {
        stage_factors: vec![2],
        unit: DcnnUnitConfig { num_layers: 4, channels: 8, ..DcnnUnitConfig::SUB_TASK },
        msf: None,
        value_shift: 8,
    };
    let mut model = CascadeModel::<f64>::init(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let tc = TrainConfig {
        epochs: 24,
        batch_size: 4,
        schedule: LrSchedule { initial: 1.0, gamma: 0.1, levels: 2 },
        ..TrainConfig::default()
    };
    let trace = train(&mut model, &patches, &tc).unwrap().loss_trace;
    assert_eq!(trace.len(), 24);
    assert!(trace.iter().all(|v| v.is_finite()));
    let averages: Vec<f64> = trace.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    assert!(averages.windows(2).all(|p| p[1] <= p[0]), "{trace:?}");

    for entry in manifest.entries_in(Split::Test) {
        let gt = depthsr::dataio::read_depth(&entry.gt).unwrap();
        let sr = model.infer(&downsample(&gt, 2).unwrap(), false).unwrap();
        assert_eq!(sr.dims(), gt.dims());
        let refined = refine_output(&sr, &IrlsConfig::default()).unwrap();
        assert!(refined.is_finite());
    }
}
