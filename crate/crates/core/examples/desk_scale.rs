//! Desk-scale experiment on synthetic rectangle scenes: trains a x2 single-stage model and
//! compares it with bicubic upsampling, then checks TV refinement on noisy inputs.
//!
//! Knobs (environment): LAYERS, CHANNELS, EPOCHS, BATCH, LR, LEVELS, CLIP, STRIDE, SEED.

use std::time::Instant;

use depthsr::dataio::{Degradation, PatchSet};
use depthsr::dfs::{refine_output, IrlsConfig};
use depthsr::metrics::rmse;
use depthsr::network::{train, CascadeModel, DcnnUnitConfig, ModelConfig, TrainConfig};
use depthsr::optim::LrSchedule;
use depthsr::resample::{add_depth_noise, downsample, upsample, NoiseSpec, DEFAULT_NOISE_DELTA};
use depthsr::synth::RectangleScene;
use rand::SeedableRng;

fn knob<T: std::str::FromStr>(name: &str, default: T) -> T {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> depthsr::Result<()> {
    let (layers, channels) = (knob("LAYERS", 4usize), knob("CHANNELS", 8usize));
    let (epochs, batch, lr) = (knob("EPOCHS", 20usize), knob("BATCH", 4usize), knob("LR", 1.0f64));
    let (stride, seed) = (knob("STRIDE", 16usize), knob("SEED", 0u64));
    let (levels, clip) = (knob("LEVELS", 2usize), knob("CLIP", 0.01f64));

    let data = RectangleScene::default().dataset(200, seed);
    let (train_maps, test_maps) = data.split_at(160);
    let deg = Degradation { factor: 2, noise: None };
    let patches = PatchSet::from_maps(train_maps, &deg, 32, stride, seed)?;
    println!("{} training patches", patches.len());

    let cfg = ModelConfig {
        stage_factors: vec![2],
        unit: DcnnUnitConfig { num_layers: layers, channels, kernel: 3, residual: true, center_input: true },
        msf: None,
        value_shift: 8,
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut model = CascadeModel::<f64>::init(cfg, &mut rng)?;
    let tc = TrainConfig {
        epochs,
        batch_size: batch,
        schedule: LrSchedule { initial: lr, levels, ..LrSchedule::FROM_SCRATCH },
        clip_threshold: clip,
        seed,
        ..TrainConfig::default()
    };
    let t = Instant::now();
    let report = train(&mut model, &patches, &tc)?;
    println!("trained in {:.1}s, loss {:?}", t.elapsed().as_secs_f64(), report.loss_trace);

    let (mut net, mut bic, mut better) = (0.0, 0.0, 0usize);
    for (i, (_, gt)) in test_maps.iter().enumerate() {
        let lr_map = downsample(gt, 2)?;
        net += rmse(&model.infer(&lr_map, false)?, gt)?;
        bic += rmse(&upsample(&lr_map, 2)?, gt)?;
        let noisy = add_depth_noise(&lr_map, &NoiseSpec::new(DEFAULT_NOISE_DELTA, 1000 + i as u64)?)?;
        let sr = model.infer(&noisy, false)?;
        let refined = refine_output(&sr, &IrlsConfig::default())?;
        if rmse(&refined, gt)? <= rmse(&sr, gt)? {
            better += 1;
        }
    }
    let n = test_maps.len() as f64;
    println!(
        "held-out RMSE: network {:.4}, bicubic {:.4}, ratio {:.3}; refinement helps on {}/{}",
        net / n,
        bic / n,
        net / bic,
        better,
        test_maps.len()
    );
    Ok(())
}
