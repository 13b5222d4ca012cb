//! Subcommand flags, resolved settings and implementations.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use log::info;
use serde::{Deserialize, Serialize};

use depthsr::dataio::{build_patchset, read_depth, write_depth, DatasetManifest, DepthFormat, Split};
use depthsr::dfs::{refine_output, IrlsConfig};
use depthsr::gradcheck::{run_gradcheck, GradCheckConfig};
use depthsr::metrics::{evaluate, EvalReport, MetricOptions};
use depthsr::network::{load_model, save_model, train as train_model, CascadeModel, DcnnUnitConfig, ModelConfig, TrainConfig};
use depthsr::optim::LrSchedule;
use depthsr::resample::{add_depth_noise, downsample, NoiseSpec};
use depthsr::{DepthMap, Scalar};

use crate::config::{resolve, write_snapshot};
use crate::CliError;

fn required<T: Clone>(v: &Option<T>, key: &str) -> anyhow::Result<T> {
    v.clone()
        .ok_or_else(|| CliError::Usage(format!("missing required setting `{key}` (flag --{})", key.replace('_', "-"))).into())
}

/// Writes `map`, clamping into `declared` for PGM so 16-bit inputs stay 16-bit outputs.
fn write_like(path: &Path, map: &DepthMap<f64>, declared: (f64, f64)) -> anyhow::Result<()> {
    let out = match DepthFormat::from_path(path)? {
        DepthFormat::Pgm => {
            let (lo, hi) = (declared.0.max(0.0), declared.1.min(65535.0));
            map.map(|v| v.clamp(lo, hi)).with_value_range(lo, hi)?
        }
        DepthFormat::Pfm => map.clone(),
    };
    write_depth(path, &out)?;
    Ok(())
}

#[derive(Args, Serialize)]
pub struct DegradeFlags {
    /// Flat TOML file with the same keys as the flags (underscores for dashes).
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long = "in")]
    #[serde(rename = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    factor: Option<usize>,
    /// Noise strength δ; the standard deviation at depth d is δ/d.
    #[arg(long)]
    noise_delta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct DegradeSettings {
    #[serde(rename = "in")]
    input: Option<PathBuf>,
    factor: Option<usize>,
    noise_delta: Option<f64>,
    seed: u64,
    out: Option<PathBuf>,
}

pub fn degrade(flags: &DegradeFlags) -> anyhow::Result<()> {
    let s: DegradeSettings = resolve(flags, flags.config.as_deref())?;
    let (input, out, factor) = (required(&s.input, "in")?, required(&s.out, "out")?, required(&s.factor, "factor")?);
    if factor < 2 {
        return Err(CliError::Usage(format!("factor must be >= 2, got {factor}")).into());
    }
    let gt = read_depth(&input)?;
    if gt.height() % factor != 0 || gt.width() % factor != 0 {
        return Err(depthsr::Error::Shape(format!(
            "{}x{} is not divisible by the factor {factor}",
            gt.height(),
            gt.width()
        ))
        .into());
    }
    let mut lr = downsample(&gt, factor)?;
    if let Some(delta) = s.noise_delta {
        lr = add_depth_noise(&lr, &NoiseSpec::new(delta, s.seed)?)?;
    }
    write_like(&out, &lr, gt.value_range())?;
    write_snapshot(&s, &out)?;
    info!("wrote {} ({}x{})", out.display(), lr.height(), lr.width());
    Ok(())
}

#[derive(Args, Serialize)]
pub struct TrainFlags {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Must match the manifest's degradation factor.
    #[arg(long)]
    factor: Option<usize>,
    #[arg(long)]
    out_model: Option<PathBuf>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    /// Train a fusion unit (default: only for multi-stage cascades).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    msf: Option<bool>,
    #[arg(long)]
    msf_layers: Option<usize>,
    #[arg(long)]
    msf_channels: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    value_shift: Option<i32>,
    /// Mean-center each unit's conv-branch input (true or false).
    #[arg(long)]
    center_input: Option<bool>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    lr_levels: Option<usize>,
    #[arg(long)]
    lr_gamma: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    clip_threshold: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    /// train, val or test.
    #[arg(long)]
    split: Option<String>,
    /// Trained single-stage model whose stage initializes the first stage.
    #[arg(long)]
    warm_start: Option<PathBuf>,
    /// f64 or f32.
    #[arg(long)]
    precision: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainSettings {
    manifest: Option<PathBuf>,
    factor: Option<usize>,
    out_model: Option<PathBuf>,
    layers: usize,
    channels: usize,
    msf: Option<bool>,
    msf_layers: usize,
    msf_channels: usize,
    value_shift: i32,
    center_input: bool,
    epochs: usize,
    batch_size: usize,
    learning_rate: Option<f64>,
    lr_levels: Option<usize>,
    lr_gamma: f64,
    momentum: f64,
    clip_threshold: f64,
    seed: u64,
    patch_size: usize,
    stride: Option<usize>,
    split: Split,
    warm_start: Option<PathBuf>,
    precision: String,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSettings {
            manifest: None,
            factor: None,
            out_model: None,
            layers: DcnnUnitConfig::SUB_TASK.num_layers,
            channels: DcnnUnitConfig::SUB_TASK.channels,
            msf: None,
            msf_layers: DcnnUnitConfig::FUSION.num_layers,
            msf_channels: DcnnUnitConfig::FUSION.channels,
            value_shift: 8,
            center_input: DcnnUnitConfig::SUB_TASK.center_input,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: None,
            lr_levels: None,
            lr_gamma: t.schedule.gamma,
            momentum: t.momentum,
            clip_threshold: t.clip_threshold,
            seed: t.seed,
            patch_size: 32,
            stride: None,
            split: Split::Train,
            warm_start: None,
            precision: "f64".into(),
        }
    }
}

impl TrainSettings {
    fn model_config(&self, factor: usize) -> anyhow::Result<ModelConfig> {
        let mut cfg = ModelConfig::standard(factor).map_err(|e| CliError::Usage(e.to_string()))?;
        cfg.unit.num_layers = self.layers;
        cfg.unit.channels = self.channels;
        cfg.unit.center_input = self.center_input;
        cfg.value_shift = self.value_shift;
        let with_msf = self.msf.unwrap_or(cfg.stage_factors.len() > 1);
        cfg.msf = with_msf.then_some(DcnnUnitConfig {
            num_layers: self.msf_layers,
            channels: self.msf_channels,
            center_input: self.center_input,
            ..DcnnUnitConfig::FUSION
        });
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    fn train_config(&self) -> TrainConfig {
        let base = if self.warm_start.is_some() {
            LrSchedule::WARM_START
        } else {
            LrSchedule::FROM_SCRATCH
        };
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            schedule: LrSchedule {
                initial: self.learning_rate.unwrap_or(base.initial),
                gamma: self.lr_gamma,
                levels: self.lr_levels.unwrap_or(base.levels),
            },
            momentum: self.momentum,
            clip_threshold: self.clip_threshold,
            seed: self.seed,
        }
    }
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    patches: usize,
    parameters: usize,
    steps: usize,
    loss_trace: &'a [f64],
}

fn train_in<T: Scalar>(s: &TrainSettings, model_cfg: ModelConfig, manifest: &DatasetManifest, out: &Path) -> anyhow::Result<()> {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(s.seed);
    let mut model = CascadeModel::<T>::init(model_cfg, &mut rng)?;
    if let Some(path) = &s.warm_start {
        let from = load_model::<T>(path)?;
        model.warm_start_first_stage(&from)?;
        info!("first stage initialized from {}", path.display());
    }
    let stride = s.stride.unwrap_or(s.patch_size);
    let patches = build_patchset(manifest, Some(s.split), s.patch_size, stride, s.seed)
        .map_err(|e| match e {
            depthsr::Error::InvalidArgument(m) => CliError::Usage(m).into(),
            other => anyhow::Error::from(other),
        })?;
    info!(
        "{} patches ({} flat dropped, {} images too small), {} parameters",
        patches.len(),
        patches.dropped_flat,
        patches.skipped_images,
        model.num_params()
    );
    if patches.is_empty() {
        return Err(depthsr::Error::Shape("the manifest yields no training patches".into()).into());
    }
    let report = train_model(&mut model, &patches, &s.train_config())?;
    save_model(&model, out)?;
    let summary = TrainSummary {
        patches: patches.len(),
        parameters: model.num_params(),
        steps: report.steps,
        loss_trace: &report.loss_trace,
    };
    let mut trace_path = out.as_os_str().to_os_string();
    trace_path.push(".train.json");
    depthsr::dataio::atomic_write(Path::new(&trace_path), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    Ok(())
}

pub fn train(flags: &TrainFlags) -> anyhow::Result<()> {
    let s: TrainSettings = resolve(flags, flags.config.as_deref())?;
    let manifest_path = required(&s.manifest, "manifest")?;
    let out = required(&s.out_model, "out_model")?;
    let manifest = DatasetManifest::load(&manifest_path)?;
    let factor = s.factor.unwrap_or(manifest.degradation.factor);
    if factor != manifest.degradation.factor {
        return Err(CliError::Usage(format!(
            "--factor {factor} disagrees with the manifest's degradation factor {}",
            manifest.degradation.factor
        ))
        .into());
    }
    let model_cfg = s.model_config(factor)?;
    s.train_config().validate().map_err(|e| CliError::Usage(e.to_string()))?;
    match s.precision.as_str() {
        "f64" => train_in::<f64>(&s, model_cfg, &manifest, &out)?,
        "f32" => train_in::<f32>(&s, model_cfg, &manifest, &out)?,
        p => return Err(CliError::Usage(format!("precision must be f64 or f32, got {p}")).into()),
    }
    write_snapshot(&s, &out)?;
    info!("wrote {}", out.display());
    Ok(())
}

#[derive(Args, Serialize)]
pub struct SrFlags {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long = "in")]
    #[serde(rename = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Apply the fusion unit after the cascade.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    msf: Option<bool>,
    /// Apply total-variation refinement last.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    dfs: Option<bool>,
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SrSettings {
    model: Option<PathBuf>,
    #[serde(rename = "in")]
    input: Option<PathBuf>,
    out: Option<PathBuf>,
    msf: bool,
    dfs: bool,
    lambda: f64,
}

impl Default for SrSettings {
    fn default() -> Self {
        SrSettings {
            model: None,
            input: None,
            out: None,
            msf: false,
            dfs: false,
            lambda: IrlsConfig::default().lambda,
        }
    }
}

pub fn sr(flags: &SrFlags) -> anyhow::Result<()> {
    let s: SrSettings = resolve(flags, flags.config.as_deref())?;
    let (model_path, input, out) = (required(&s.model, "model")?, required(&s.input, "in")?, required(&s.out, "out")?);
    let model = load_model::<f64>(&model_path)?;
    if s.msf && model.msf_unit().is_none() {
        return Err(CliError::Usage(format!("{} has no fusion unit; drop --msf", model_path.display())).into());
    }
    let lr = read_depth(&input)?;
    let mut hr = model.infer(&lr, s.msf)?;
    if s.dfs {
        let cfg = IrlsConfig::with_lambda(s.lambda);
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        hr = refine_output(&hr, &cfg)?;
    }
    write_like(&out, &hr, lr.value_range())?;
    write_snapshot(&s, &out)?;
    info!("wrote {} ({}x{})", out.display(), hr.height(), hr.width());
    Ok(())
}

#[derive(Args, Serialize)]
pub struct EvalFlags {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    pred_dir: Option<PathBuf>,
    #[arg(long)]
    gt_dir: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    crop_border: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    quantize_8bit: Option<bool>,
    #[arg(long)]
    dynamic_range: Option<f64>,
    #[arg(long)]
    bad_pixel_threshold: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalSettings {
    pred_dir: Option<PathBuf>,
    gt_dir: Option<PathBuf>,
    csv: Option<PathBuf>,
    crop_border: usize,
    quantize_8bit: bool,
    dynamic_range: f64,
    bad_pixel_threshold: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        let m = MetricOptions::default();
        EvalSettings {
            pred_dir: None,
            gt_dir: None,
            csv: None,
            crop_border: m.crop_border,
            quantize_8bit: m.quantize_8bit,
            dynamic_range: m.dynamic_range,
            bad_pixel_threshold: m.bad_pixel_threshold,
        }
    }
}

fn depth_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_file() && DepthFormat::from_path(&path).is_ok() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub fn eval(flags: &EvalFlags) -> anyhow::Result<()> {
    let s: EvalSettings = resolve(flags, flags.config.as_deref())?;
    let (pred_dir, gt_dir, csv) = (required(&s.pred_dir, "pred_dir")?, required(&s.gt_dir, "gt_dir")?, required(&s.csv, "csv")?);
    let opts = MetricOptions {
        crop_border: s.crop_border,
        quantize_8bit: s.quantize_8bit,
        dynamic_range: s.dynamic_range,
        bad_pixel_threshold: s.bad_pixel_threshold,
    };
    let mut rows = Vec::new();
    for gt_path in depth_files(&gt_dir)? {
        let name = gt_path.file_name().expect("listed files have names");
        let gt = read_depth(&gt_path)?;
        let pred = read_depth(&pred_dir.join(name))?;
        rows.push(evaluate(&name.to_string_lossy(), &pred, &gt, &opts)?);
    }
    if rows.is_empty() {
        return Err(depthsr::Error::Shape(format!("no depth files in {}", gt_dir.display())).into());
    }
    let report = EvalReport::from_rows(rows);
    report.save_csv(&csv)?;
    write_snapshot(&s, &csv)?;
    info!("{} images, mean RMSE {:.4}", report.rows.len(), report.mean_rmse());
    Ok(())
}

#[derive(Args, Serialize)]
pub struct RefineFlags {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long = "in")]
    #[serde(rename = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    max_outer_iters: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RefineSettings {
    #[serde(rename = "in")]
    input: Option<PathBuf>,
    out: Option<PathBuf>,
    lambda: f64,
    max_outer_iters: usize,
}

impl Default for RefineSettings {
    fn default() -> Self {
        let d = IrlsConfig::default();
        RefineSettings {
            input: None,
            out: None,
            lambda: d.lambda,
            max_outer_iters: d.max_outer_iters,
        }
    }
}

pub fn refine(flags: &RefineFlags) -> anyhow::Result<()> {
    let s: RefineSettings = resolve(flags, flags.config.as_deref())?;
    let (input, out) = (required(&s.input, "in")?, required(&s.out, "out")?);
    let cfg = IrlsConfig {
        lambda: s.lambda,
        max_outer_iters: s.max_outer_iters,
        ..IrlsConfig::default()
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let dbar = read_depth(&input)?;
    let d = refine_output(&dbar, &cfg)?;
    write_like(&out, &d, dbar.value_range())?;
    write_snapshot(&s, &out)?;
    info!("wrote {}", out.display());
    Ok(())
}

#[derive(Args, Serialize)]
pub struct GradcheckFlags {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// First seed; the suite runs `seeds` consecutive seeds from here.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    tolerance: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GradcheckSettings {
    seed: u64,
    seeds: usize,
    tolerance: f64,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        let d = GradCheckConfig::default();
        GradcheckSettings {
            seed: d.base_seed,
            seeds: d.seeds,
            tolerance: d.tolerance,
        }
    }
}

pub fn gradcheck(flags: &GradcheckFlags) -> anyhow::Result<()> {
    let s: GradcheckSettings = resolve(flags, flags.config.as_deref())?;
    let cfg = GradCheckConfig {
        seeds: s.seeds,
        base_seed: s.seed,
        tolerance: s.tolerance,
        ..GradCheckConfig::default()
    };
    let report = run_gradcheck(&cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    for (name, worst) in report.summary() {
        let status = if worst < cfg.tolerance { "ok" } else { "FAIL" };
        println!("{name:<12} max rel err {worst:.3e}  {status}");
    }
    if let Some(bad) = report.failures().next() {
        return Err(CliError::Numerical(format!(
            "gradient check failed: {} at seed {} (rel err {:.3e} >= {:.1e})",
            bad.name, bad.seed, bad.max_rel_error, cfg.tolerance
        ))
        .into());
    }
    println!("all {} checks passed over {} seeds", report.cases.len(), cfg.seeds);
    Ok(())
}
