//! Subcommand bodies. Each reads only its inputs and writes only under the
//! run's output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use gvs_core::data::container::{save_grid, save_mask};
use gvs_core::data::{load_all, make_phantom_with, save_phantom_dataset, PhantomConfig};
use gvs_core::enhancement::{enhance_samples, run_downstream_grid};
use gvs_core::evaluation::{adice, counterfeit_meanfill, counterfeit_noisefill, identity_report};
use gvs_core::segfit::{mean, std_dev};
use gvs_core::trainer::{checkpoint_path, load_generator, train_gvs};
use gvs_core::{
    ADiceConfig, DatasetManifest, EnhanceConfig, Error, ImageGrid, LesionMask, MetricReport, Mode, Result,
    Sample, SegFitConfig, Split, TrainConfig,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::RunConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomGenConfig {
    pub phantom: PhantomConfig,
    pub test_fraction: f64,
}

impl Default for PhantomGenConfig {
    fn default() -> Self {
        PhantomGenConfig {
            phantom: PhantomConfig {
                count: 200,
                ..PhantomConfig::default()
            },
            test_fraction: 0.2,
        }
    }
}

/// Shared by commands that just run the generator over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub batch_size: usize,
    /// `None` uses every entry.
    pub split: Option<Split>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            batch_size: 8,
            split: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnhanceCmdConfig {
    pub enhance: EnhanceConfig,
    pub alpha: f64,
    pub batch_size: usize,
    pub split: Option<Split>,
}

impl Default for EnhanceCmdConfig {
    fn default() -> Self {
        EnhanceCmdConfig {
            enhance: EnhanceConfig::default(),
            alpha: 0.7,
            batch_size: 8,
            split: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DownstreamConfig {
    pub enhance: EnhanceConfig,
    pub segfit: SegFitConfig,
    /// One downstream segmentor per seed and alpha.
    pub seeds: Vec<u64>,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        DownstreamConfig {
            enhance: EnhanceConfig::default(),
            segfit: SegFitConfig::default(),
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdentityConfig {
    pub batch_size: usize,
    pub split: Option<Split>,
}

impl Default for IdentityConfig {
    fn default() -> Self {
        IdentityConfig {
            batch_size: 8,
            split: Some(Split::Test),
        }
    }
}

/// Which images the A-Dice segmentor is fit to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageSource {
    /// The pathological inputs.
    Input,
    /// The phantom healthy references.
    Healthy,
    /// Generator outputs; needs a checkpoint.
    #[default]
    Synthesized,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ADiceCmdConfig {
    pub adice: ADiceConfig,
    pub source: ImageSource,
    pub split: Option<Split>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CounterfeitConfig {
    pub adice: ADiceConfig,
    pub noise_seed: u64,
    pub split: Option<Split>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
    pub train: TrainConfig,
    pub adice: ADiceConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            lambdas: vec![5.0, 10.0, 20.0],
            train: TrainConfig::default(),
            adice: ADiceConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportConfig {}

pub const REPORT_FILE: &str = "report.json";

pub fn load_samples(manifest: &Path, split: Option<Split>) -> Result<Vec<Sample>> {
    let m = DatasetManifest::load(manifest)?;
    let m = match split {
        Some(s) => m.filter_split(s),
        None => m,
    };
    let samples = load_all(&m)?;
    if samples.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} has no samples{}",
            manifest.display(),
            split.map(|s| format!(" in split {s:?}")).unwrap_or_default()
        )));
    }
    Ok(samples)
}

/// Slice ids contain `/`; flatten them for file names.
pub fn file_stem(id: &str) -> String {
    id.replace(['/', '\\'], "_")
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_report(out: &Path, report: &MetricReport) -> Result<()> {
    write_file(&out.join(REPORT_FILE), serde_json::to_vec_pretty(report)?)
}

fn synthesize_all(run: &RunConfig, data: &[Sample], batch_size: usize) -> Result<Vec<ImageGrid>> {
    let (gen, g, _) = load_generator(&run.input_path("checkpoint")?)?;
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(batch_size.max(1)) {
        let images: Vec<ImageGrid> = chunk.iter().map(|s| s.image.clone()).collect();
        out.extend(gen.forward(&g, &images, Mode::Eval)?);
    }
    Ok(out)
}

fn masks_of(data: &[Sample]) -> Vec<LesionMask> {
    data.iter().map(|s| s.mask.clone()).collect()
}

fn healthy_of(data: &[Sample]) -> Result<Vec<ImageGrid>> {
    data.iter()
        .map(|s| {
            s.healthy_truth
                .clone()
                .ok_or_else(|| Error::InvalidInput(format!("sample `{}` has no healthy truth", s.id)))
        })
        .collect()
}

pub fn phantom_gen(run: &RunConfig) -> Result<Value> {
    let cfg: PhantomGenConfig = run.typed()?;
    let samples = make_phantom_with(&cfg.phantom)?;
    let m = save_phantom_dataset(&run.out, &samples, cfg.test_fraction)?;
    let n_test = m.entries.iter().filter(|e| e.split == Split::Test).count();
    Ok(json!({
        "manifest": run.out.join("manifest.json"),
        "train": m.entries.len() - n_test,
        "test": n_test,
    }))
}

pub fn train(run: &RunConfig) -> Result<Value> {
    let cfg: TrainConfig = run.typed()?;
    cfg.validate()?;
    let data = load_samples(&run.input_path("data")?, Some(Split::Train))?;
    let trainer = train_gvs(&data, cfg.clone(), Some(&run.out))?;
    let last = checkpoint_path(&run.out, trainer.state.epoch);
    let final_path = run.out.join("generator.ckpt");
    fs::copy(&last, &final_path).map_err(|e| Error::io(&final_path, e))?;
    let h = trainer.state.history.last().copied();
    Ok(json!({
        "checkpoint": final_path,
        "epochs": trainer.state.epoch,
        "steps": trainer.state.step,
        "final": h,
    }))
}

pub fn synthesize(run: &RunConfig) -> Result<Value> {
    let cfg: SynthConfig = run.typed()?;
    let data = load_samples(&run.input_path("data")?, cfg.split)?;
    let synth = synthesize_all(run, &data, cfg.batch_size)?;
    let mut index = String::from("id,synth,diff,mean_abs_diff\n");
    for (s, x_s) in data.iter().zip(&synth) {
        let stem = file_stem(&s.id);
        let diff: Vec<f64> = s.image.pixels().iter().zip(x_s.pixels()).map(|(p, q)| (p - q).abs()).collect();
        let mad = mean(&diff);
        let synth_rel = PathBuf::from("synth").join(format!("{stem}.png"));
        let diff_rel = PathBuf::from("diff").join(format!("{stem}.png"));
        save_grid(&run.out.join(&synth_rel), x_s)?;
        save_grid(&run.out.join(&diff_rel), &ImageGrid::new(s.image.height(), s.image.width(), diff)?)?;
        writeln!(index, "{},{},{},{}", s.id, synth_rel.display(), diff_rel.display(), mad).expect("string write");
    }
    write_file(&run.out.join("index.csv"), index)?;
    Ok(json!({ "count": synth.len(), "index": run.out.join("index.csv") }))
}

pub fn enhance(run: &RunConfig) -> Result<Value> {
    let cfg: EnhanceCmdConfig = run.typed()?;
    cfg.enhance.validate()?;
    let data = load_samples(&run.input_path("data")?, cfg.split)?;
    let (gen, g, _) = load_generator(&run.input_path("checkpoint")?)?;
    let out = enhance_samples(&gen, &g, &data, cfg.alpha, &cfg.enhance, cfg.batch_size)?;
    let mut index = String::from("id,enhanced,mask\n");
    for (s, e) in data.iter().zip(&out) {
        let stem = file_stem(&s.id);
        let img = PathBuf::from("enhanced").join(format!("{stem}.png"));
        let mask = PathBuf::from("masks").join(format!("{stem}.png"));
        save_grid(&run.out.join(&img), e)?;
        save_mask(&run.out.join(&mask), &s.mask)?;
        writeln!(index, "{},{},{}", s.id, img.display(), mask.display()).expect("string write");
    }
    write_file(&run.out.join("index.csv"), index)?;
    Ok(json!({ "count": out.len(), "alpha": cfg.alpha }))
}

pub fn downstream(run: &RunConfig) -> Result<Value> {
    let cfg: DownstreamConfig = run.typed()?;
    if cfg.seeds.is_empty() {
        return Err(Error::InvalidConfig("downstream needs at least one seed".into()));
    }
    let manifest = run.input_path("data")?;
    let train = load_samples(&manifest, Some(Split::Train))?;
    let test = load_samples(&manifest, Some(Split::Test))?;
    let (gen, g, _) = load_generator(&run.input_path("checkpoint")?)?;
    let mut csv = String::from("seed,alpha,mean_dice,delta_vs_baseline\n");
    let mut all = Vec::new();
    for &seed in &cfg.seeds {
        let seg_cfg = SegFitConfig {
            seed,
            ..cfg.segfit.clone()
        };
        for r in run_downstream_grid(&train, &test, &gen, &g, &cfg.enhance, &seg_cfg)? {
            let delta = r.delta_vs_baseline.map(|d| d.to_string()).unwrap_or_default();
            writeln!(csv, "{},{},{},{}", seed, r.alpha, r.mean_dice, delta).expect("string write");
            all.push(r);
        }
    }
    write_file(&run.out.join("downstream.csv"), csv)?;
    let by_alpha: Vec<Value> = cfg
        .enhance
        .alpha_grid
        .iter()
        .map(|&a| {
            let d: Vec<f64> = all.iter().filter(|r| r.alpha == a).map(|r| r.mean_dice).collect();
            json!({ "alpha": a, "mean_dice": mean(&d), "std": std_dev(&d) })
        })
        .collect();
    let report = MetricReport {
        config_hash: run.config_hash.clone(),
        meta: json!({ "by_alpha": by_alpha, "runs": all }),
        ..MetricReport::default()
    };
    write_report(&run.out, &report)?;
    Ok(json!({ "by_alpha": by_alpha }))
}

pub fn eval_identity(run: &RunConfig) -> Result<Value> {
    let cfg: IdentityConfig = run.typed()?;
    let data = load_samples(&run.input_path("data")?, cfg.split)?;
    let (gen, g, _) = load_generator(&run.input_path("checkpoint")?)?;
    let id = identity_report(&gen, &g, &data, cfg.batch_size)?;
    let report = MetricReport {
        mpsnr: Some(id.mpsnr),
        mssim: Some(id.mssim),
        config_hash: run.config_hash.clone(),
        meta: json!({
            "count": id.count,
            "lesion_error_input": id.lesion_error_input,
            "lesion_error_synth": id.lesion_error_synth,
            "lesion_error_reduction": id.lesion_error_reduction(),
        }),
        ..MetricReport::default()
    };
    write_report(&run.out, &report)?;
    Ok(serde_json::to_value(&report)?)
}

pub fn eval_adice(run: &RunConfig) -> Result<Value> {
    let cfg: ADiceCmdConfig = run.typed()?;
    let data = load_samples(&run.input_path("data")?, cfg.split)?;
    let images = match cfg.source {
        ImageSource::Input => data.iter().map(|s| s.image.clone()).collect(),
        ImageSource::Healthy => healthy_of(&data)?,
        ImageSource::Synthesized => synthesize_all(run, &data, cfg.adice.batch_size)?,
    };
    let r = adice(&images, &masks_of(&data), &cfg.adice)?;
    let report = MetricReport {
        adice: Some(r.adice),
        adice_repeats: r.per_repeat.clone(),
        dice_curves: r.curves.clone(),
        config_hash: run.config_hash.clone(),
        meta: json!({ "source": cfg.source, "spread": r.spread() }),
        ..MetricReport::default()
    };
    write_report(&run.out, &report)?;
    Ok(json!({ "adice": r.adice, "per_repeat": r.per_repeat, "spread": r.spread() }))
}

pub fn eval_counterfeit(run: &RunConfig) -> Result<Value> {
    let cfg: CounterfeitConfig = run.typed()?;
    let data = load_samples(&run.input_path("data")?, cfg.split)?;
    let masks = masks_of(&data);
    let healthy = healthy_of(&data)?;
    let meanfill = healthy
        .iter()
        .zip(&masks)
        .map(|(h, m)| counterfeit_meanfill(h, m))
        .collect::<Result<Vec<_>>>()?;
    let noisefill = healthy
        .iter()
        .zip(&masks)
        .enumerate()
        .map(|(i, (h, m))| counterfeit_noisefill(h, m, cfg.noise_seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let pathological: Vec<ImageGrid> = data.iter().map(|s| s.image.clone()).collect();
    let mut csv = String::from("kind,adice,spread\n");
    let mut rows = serde_json::Map::new();
    for (kind, images) in [
        ("pathological", &pathological),
        ("healthy", &healthy),
        ("meanfill", &meanfill),
        ("noisefill", &noisefill),
    ] {
        let r = adice(images, &masks, &cfg.adice)?;
        writeln!(csv, "{kind},{},{}", r.adice, r.spread()).expect("string write");
        rows.insert(kind.into(), serde_json::to_value(&r)?);
    }
    write_file(&run.out.join("counterfeit.csv"), csv)?;
    let report = MetricReport {
        adice: rows["healthy"]["adice"].as_f64(),
        config_hash: run.config_hash.clone(),
        meta: Value::Object(rows.clone()),
        ..MetricReport::default()
    };
    write_report(&run.out, &report)?;
    Ok(json!({
        "kinds": rows.iter().map(|(k, v)| (k.clone(), v["adice"].clone())).collect::<serde_json::Map<_, _>>(),
    }))
}

/// Sorted unique lambdas plus one warning per dropped duplicate.
pub fn dedup_lambdas(lambdas: &[f64]) -> (Vec<f64>, Vec<String>) {
    let mut kept: Vec<f64> = Vec::new();
    let mut warnings = Vec::new();
    for &l in lambdas {
        if kept.contains(&l) {
            warnings.push(format!("duplicate lambda {l} ignored"));
        } else {
            kept.push(l);
        }
    }
    (kept, warnings)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub mpsnr: Option<f64>,
    pub mssim: Option<f64>,
    pub adice: Option<f64>,
    pub error: Option<String>,
}

pub const SWEEP_CSV_HEADER: &str = "lambda,mpsnr,mssim,adice,error";

impl SweepRow {
    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let err = self.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
        format!("{},{},{},{},{}", self.lambda, f(self.mpsnr), f(self.mssim), f(self.adice), err)
    }
}

fn sweep_arm(train: &[Sample], test: &[Sample], cfg: &TrainConfig, adice_cfg: &ADiceConfig, dir: &Path) -> Result<SweepRow> {
    let trainer = train_gvs(train, cfg.clone(), Some(dir))?;
    let bs = cfg.batch_size;
    let id = identity_report(&trainer.gen, &trainer.state.g, test, bs)?;
    let images: Vec<ImageGrid> = test.iter().map(|s| s.image.clone()).collect();
    let mut synth = Vec::with_capacity(images.len());
    for chunk in images.chunks(bs) {
        synth.extend(trainer.gen.forward(&trainer.state.g, chunk, Mode::Eval)?);
    }
    let a = adice(&synth, &masks_of(test), adice_cfg)?;
    Ok(SweepRow {
        lambda: cfg.lambda,
        mpsnr: Some(id.mpsnr),
        mssim: Some(id.mssim),
        adice: Some(a.adice),
        error: None,
    })
}

pub fn sweep_lambda(run: &RunConfig) -> Result<Value> {
    let cfg: SweepConfig = run.typed()?;
    if cfg.lambdas.is_empty() {
        return Err(Error::InvalidConfig("lambda list is empty".into()));
    }
    cfg.adice.validate()?;
    let (lambdas, warnings) = dedup_lambdas(&cfg.lambdas);
    for w in &warnings {
        log::warn!("{w}");
    }
    let manifest = run.input_path("data")?;
    let train = load_samples(&manifest, Some(Split::Train))?;
    let test = load_samples(&manifest, Some(Split::Test))?;
    let mut rows = Vec::new();
    for &lambda in &lambdas {
        let arm = TrainConfig {
            lambda,
            ..cfg.train.clone()
        };
        let dir = run.out.join(format!("lambda_{lambda}"));
        let row = sweep_arm(&train, &test, &arm, &cfg.adice, &dir).unwrap_or_else(|e| {
            log::error!("lambda {lambda} failed: {e}");
            SweepRow {
                lambda,
                mpsnr: None,
                mssim: None,
                adice: None,
                error: Some(e.to_string()),
            }
        });
        rows.push(row);
    }
    let mut csv = format!("{SWEEP_CSV_HEADER}\n");
    for r in &rows {
        writeln!(csv, "{}", r.csv_row()).expect("string write");
    }
    write_file(&run.out.join("sweep.csv"), csv)?;
    Ok(json!({ "rows": rows, "warnings": warnings }))
}

/// One line of the consolidated summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run: String,
    pub mpsnr: Option<f64>,
    pub mssim: Option<f64>,
    pub dice: Option<f64>,
    pub adice_mean: Option<f64>,
    pub adice_std: Option<f64>,
    pub repeats: usize,
    /// `ok`, or why the row is incomplete.
    pub status: String,
}

pub fn summarize(dir: &Path) -> SummaryRow {
    let path = dir.join(REPORT_FILE);
    let parsed = fs::read(&path)
        .map_err(|e| Error::io(&path, e))
        .and_then(|b| Ok(serde_json::from_slice::<MetricReport>(&b)?));
    let run = dir.display().to_string();
    match parsed {
        Ok(r) => {
            let (adice_mean, adice_std) = if r.adice_repeats.is_empty() {
                (r.adice, None)
            } else {
                (Some(mean(&r.adice_repeats)), Some(std_dev(&r.adice_repeats)))
            };
            SummaryRow {
                run,
                mpsnr: r.mpsnr,
                mssim: r.mssim,
                dice: r.dice,
                adice_mean,
                adice_std,
                repeats: r.adice_repeats.len(),
                status: "ok".into(),
            }
        }
        Err(e) => SummaryRow {
            run,
            mpsnr: None,
            mssim: None,
            dice: None,
            adice_mean: None,
            adice_std: None,
            repeats: 0,
            status: format!("missing report: {e}"),
        },
    }
}

pub fn report(run: &RunConfig) -> Result<Value> {
    let dirs = run.input_paths("runs");
    if dirs.is_empty() {
        return Err(Error::InvalidInput("report needs at least one run directory".into()));
    }
    let rows: Vec<SummaryRow> = dirs.iter().map(|d| summarize(d)).collect();
    let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    let mut csv = String::from("run,mpsnr,mssim,dice,adice_mean,adice_std,repeats,status\n");
    let mut md = String::from("| run | MPSNR | MSSIM | Dice | A-Dice | status |\n|---|---|---|---|---|---|\n");
    for r in &rows {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            r.run,
            opt(r.mpsnr),
            opt(r.mssim),
            opt(r.dice),
            opt(r.adice_mean),
            opt(r.adice_std),
            r.repeats,
            r.status.replace([',', '\n'], ";")
        )
        .expect("string write");
        let adice = match (r.adice_mean, r.adice_std) {
            (Some(m), Some(s)) => format!("{m:.4} ± {s:.4}"),
            (m, _) => f(m),
        };
        writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} |",
            r.run,
            f(r.mpsnr),
            f(r.mssim),
            f(r.dice),
            adice,
            r.status
        )
        .expect("string write");
    }
    write_file(&run.out.join("summary.csv"), csv)?;
    write_file(&run.out.join("summary.md"), md)?;
    Ok(json!({ "rows": rows }))
}
