use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Subcommand};
use emap_core::data::{gen_dataset, Dataset, SplitKind};
use emap_core::eval::{
    evaluate, export_fp_fn, histogram_study, overlap_study, stability_study, sweep_decoder_depth, sweep_encoder_depth,
    write_sweep_csv, AttributionMethod, OverlapConfig, StabilityConfig, SweepConfig,
};
use emap_core::io::{
    export_emap, load_checkpoint, load_dataset, save_checkpoint, save_dataset, CheckpointMeta, RunConfig,
};
use emap_core::models::ModelGraph;
use emap_core::train::{
    direct_train_interpretable, distill_interpretable, train_blackbox as fit_blackbox, zero_pad_experiment,
    TrainConfig, TrainReport,
};
use emap_core::{Error, Result};

use crate::output::Staging;
use crate::Global;

#[derive(Args, Debug)]
pub struct DistillArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Trained black-box checkpoint.
    #[arg(long)]
    blackbox: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Black box whose test statistic the checkpoint estimates.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Split to read: train, val or test.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Interpretable checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split to read: train, val or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Comma-separated image indices; defaults to the first `--count` images.
    #[arg(long, value_delimiter = ',')]
    indices: Vec<usize>,
    /// Images exported when `--indices` is empty.
    #[arg(long, default_value_t = 10)]
    count: usize,
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Interpretable checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args, Debug)]
pub struct OverlapArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Interpretable checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Black box used for saliency and integrated gradients.
    #[arg(long)]
    blackbox: PathBuf,
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Experiment {
    /// Distil once per init scheme and compare E-maps by SSIM.
    Stability(DistillArgs),
    /// Zero-padded trivial solution and its perturbation.
    Zeropad(DistillArgs),
    /// Black-box and distilled accuracy per encoder depth.
    SweepEncoder(DataArgs),
    /// Distilled accuracy per decoder depth.
    SweepDecoder(DistillArgs),
    /// Top-k overlap of E-maps, saliency and integrated gradients.
    Overlap(OverlapArgs),
    /// Histogram of positive E-map pixels by class.
    Histogram(ModelArgs),
    /// Export image and E-map pairs per outcome category.
    Fpfn(ModelArgs),
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Finished run directories.
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
}

fn data_in(stage: &mut Staging, dir: &Path) -> Result<Dataset> {
    stage.input(&dir.join("dataset.json"))?;
    stage.input(&dir.join("manifest.csv"))?;
    let data = load_dataset(dir)?;
    log::info!(
        "dataset {}: {}/{}/{} images of {}x{}",
        dir.display(),
        data.train.len(),
        data.val.len(),
        data.test.len(),
        data.image_size(),
        data.image_size()
    );
    Ok(data)
}

fn model_in(stage: &mut Staging, path: &Path) -> Result<ModelGraph> {
    stage.input(path)?;
    Ok(load_checkpoint(path)?.0)
}

fn interpretable_in(stage: &mut Staging, path: &Path) -> Result<ModelGraph> {
    let m = model_in(stage, path)?;
    if !m.is_interpretable() {
        return Err(Error::Config(format!(
            "{} is not an interpretable checkpoint",
            path.display()
        )));
    }
    Ok(m)
}

fn blackbox_in(stage: &mut Staging, path: &Path) -> Result<ModelGraph> {
    let m = model_in(stage, path)?;
    if m.is_interpretable() {
        return Err(Error::Config(format!(
            "{} is not a black-box checkpoint",
            path.display()
        )));
    }
    Ok(m)
}

fn meta(cfg: &RunConfig, train: &TrainConfig, report: &TrainReport, data: &Dataset) -> CheckpointMeta {
    CheckpointMeta {
        train: Some(*train),
        protocol: Some(report.protocol.clone()),
        dataset_hash: Some(data.content_hash()),
        seeds: BTreeMap::from([("master".to_string(), cfg.experiment.seed)]),
        epoch: Some(report.best_epoch),
        timestamps: BTreeMap::new(),
    }
}

fn write_training(stage: &Staging, report: &TrainReport) -> Result<()> {
    report.write_csv(&stage.path("train_log.csv"))?;
    report.write_json(&stage.path("train_report.json"))
}

fn write_eval(
    stage: &Staging,
    model: &ModelGraph,
    data: &Dataset,
    teacher: Option<&ModelGraph>,
    cfg: &RunConfig,
) -> Result<()> {
    let r = evaluate(model, &data.test, teacher, cfg.eval.top_fraction)?;
    log::info!("test accuracy {:.4}, auc {:.4}", r.accuracy, r.auc);
    r.write_metrics_csv(&stage.path("metrics.csv"))?;
    r.write_roc_csv(&stage.path("roc.csv"))?;
    r.write_records_csv(&stage.path("records.csv"))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

pub fn gen_data(g: &Global, cfg: &RunConfig) -> Result<()> {
    let stage = Staging::begin(&g.out)?;
    let data = gen_dataset(&cfg.data)?;
    save_dataset(&data, stage.dir())?;
    let out = stage.commit("gen-data", cfg)?;
    log::info!("dataset {} written to {}", data.content_hash(), out.display());
    Ok(())
}

pub fn train_blackbox(g: &Global, cfg: &RunConfig, data_dir: &Path) -> Result<()> {
    let mut stage = Staging::begin(&g.out)?;
    let data = data_in(&mut stage, data_dir)?;
    let mut bb = ModelGraph::build_blackbox(cfg.blackbox, data.image_size(), cfg.init)?;
    let tc = cfg.blackbox_config();
    let report = fit_blackbox(&mut bb, &data, &tc)?;
    save_checkpoint(&bb, &meta(cfg, &tc, &report, &data), &stage.path("blackbox.emap"))?;
    write_training(&stage, &report)?;
    write_eval(&stage, &bb, &data, None, cfg)?;
    stage.commit("train-blackbox", cfg)?;
    Ok(())
}

pub fn distill(g: &Global, cfg: &RunConfig, a: &DistillArgs) -> Result<()> {
    let mut stage = Staging::begin(&g.out)?;
    let data = data_in(&mut stage, &a.data)?;
    let bb = blackbox_in(&mut stage, &a.blackbox)?;
    let mut m = ModelGraph::build_interpretable(&bb, cfg.decoder, cfg.init)?;
    let tc = cfg.distill_config();
    let report = distill_interpretable(&mut m, &bb, &data, &tc)?;
    save_checkpoint(&m, &meta(cfg, &tc, &report, &data), &stage.path("interpretable.emap"))?;
    write_training(&stage, &report)?;
    write_eval(&stage, &m, &data, Some(&bb), cfg)?;
    stage.commit("distill", cfg)?;
    Ok(())
}

pub fn direct_train(g: &Global, cfg: &RunConfig, data_dir: &Path) -> Result<()> {
    let mut stage = Staging::begin(&g.out)?;
    let data = data_in(&mut stage, data_dir)?;
    let mut m = ModelGraph::build_interpretable_from_scratch(cfg.blackbox, cfg.decoder, data.image_size(), cfg.init)?;
    let tc = cfg.blackbox_config();
    let report = direct_train_interpretable(&mut m, &data, &tc)?;
    save_checkpoint(&m, &meta(cfg, &tc, &report, &data), &stage.path("interpretable.emap"))?;
    write_training(&stage, &report)?;
    write_eval(&stage, &m, &data, None, cfg)?;
    stage.commit("direct-train", cfg)?;
    Ok(())
}

pub fn eval(g: &Global, cfg: &RunConfig, a: &EvalArgs) -> Result<()> {
    let kind = SplitKind::parse(&a.split)?;
    let mut stage = Staging::begin(&g.out)?;
    let data = data_in(&mut stage, &a.data)?;
    let model = model_in(&mut stage, &a.checkpoint)?;
    let teacher = a.teacher.as_deref().map(|p| blackbox_in(&mut stage, p)).transpose()?;
    let r = evaluate(&model, data.split(kind), teacher.as_ref(), cfg.eval.top_fraction)?;
    log::info!("{} accuracy {:.4}, auc {:.4}", kind.name(), r.accuracy, r.auc);
    r.write_metrics_csv(&stage.path("metrics.csv"))?;
    r.write_roc_csv(&stage.path("roc.csv"))?;
    r.write_records_csv(&stage.path("records.csv"))?;
    stage.commit("eval", cfg)?;
    Ok(())
}

pub fn emap_export(g: &Global, cfg: &RunConfig, a: &ExportArgs) -> Result<()> {
    let kind = SplitKind::parse(&a.split)?;
    let mut stage = Staging::begin(&g.out)?;
    let data = data_in(&mut stage, &a.data)?;
    let model = interpretable_in(&mut stage, &a.checkpoint)?;
    let split = data.split(kind);
    let indices: Vec<usize> = if a.indices.is_empty() {
        (0..a.count.min(split.len())).collect()
    } else {
        a.indices.clone()
    };
    for &i in &indices {
        if i >= split.len() {
            return Err(Error::Config(format!("image index {i} out of range ({})", split.len())));
        }
        let emap = model.compute_emap(&split.image_tensor(i))?;
        export_emap(&emap, &stage.path(&format!("emap_{i:05}")), i)?;
    }
    log::info!("exported {} E-maps", indices.len());
    stage.commit("emap-export", cfg)?;
    Ok(())
}

fn sweep_config(cfg: &RunConfig) -> SweepConfig {
    SweepConfig {
        blackbox: cfg.blackbox,
        decoder: cfg.decoder,
        blackbox_train: cfg.blackbox_config(),
        distill: cfg.distill_config(),
        init: cfg.init,
    }
}

pub fn experiment(g: &Global, cfg: &RunConfig, e: &Experiment) -> Result<()> {
    let mut stage = Staging::begin(&g.out)?;
    let name = match e {
        Experiment::Stability(a) => {
            let data = data_in(&mut stage, &a.data)?;
            let bb = blackbox_in(&mut stage, &a.blackbox)?;
            let sc = StabilityConfig {
                decoder: cfg.decoder,
                schemes: cfg.experiment.stability_schemes.clone(),
                init: cfg.init,
                train: cfg.distill_config(),
                eval_images: cfg.eval.ssim_images,
            };
            let (report, models) = stability_study(&bb, &data, &sc)?;
            log::info!("mean pairwise SSIM {:.4}", report.mean_pairwise);
            let arms = stage.path("arms");
            fs::create_dir_all(&arms).map_err(|e| Error::io(&arms, e))?;
            for (arm, m) in report.arms.iter().zip(&models) {
                if let (Some(m), Some(r)) = (m, &arm.report) {
                    let tc = sc.train;
                    save_checkpoint(
                        m,
                        &meta(cfg, &tc, r, &data),
                        &arms.join(format!("{}.emap", arm.scheme.name())),
                    )?;
                }
            }
            report.write_csv(&stage.path("stability.csv"))?;
            write_json(&stage.path("stability.json"), &report)?;
            "experiment stability"
        }
        Experiment::Zeropad(a) => {
            let data = data_in(&mut stage, &a.data)?;
            let bb = blackbox_in(&mut stage, &a.blackbox)?;
            let report = zero_pad_experiment(&bb, &data, &cfg.zero_pad_config())?;
            report.write_csv(&stage.path("zeropad.csv"))?;
            write_json(&stage.path("zeropad.json"), &report)?;
            "experiment zeropad"
        }
        Experiment::SweepEncoder(a) => {
            let data = data_in(&mut stage, &a.data)?;
            let rows = sweep_encoder_depth(&data, &cfg.experiment.encoder_depths, &sweep_config(cfg))?;
            write_sweep_csv(&rows, &stage.path("sweep.csv"))?;
            "experiment sweep-encoder"
        }
        Experiment::SweepDecoder(a) => {
            let data = data_in(&mut stage, &a.data)?;
            let bb = blackbox_in(&mut stage, &a.blackbox)?;
            let rows = sweep_decoder_depth(&bb, &data, &cfg.experiment.decoder_depths, &sweep_config(cfg))?;
            write_sweep_csv(&rows, &stage.path("sweep.csv"))?;
            "experiment sweep-decoder"
        }
        Experiment::Overlap(a) => {
            let data = data_in(&mut stage, &a.data)?;
            let m = interpretable_in(&mut stage, &a.checkpoint)?;
            let bb = blackbox_in(&mut stage, &a.blackbox)?;
            let oc = OverlapConfig {
                top_fraction: cfg.eval.top_fraction,
                methods: AttributionMethod::ALL.to_vec(),
                ig_steps: cfg.eval.ig_steps,
                max_images: cfg.eval.overlap_images,
            };
            let report = overlap_study(&m, &bb, &data.test, &oc)?;
            for (method, mean) in &report.mean {
                log::info!("{}: mean overlap {mean:.2}%", method.name());
            }
            log::info!("random baseline {:.2}%", report.random_baseline);
            report.write_csv(&stage.path("overlap.csv"))?;
            write_json(
                &stage.path("overlap_summary.json"),
                &serde_json::json!({
                    "mean": report.mean.iter().map(|(k, v)| (k.name(), *v)).collect::<BTreeMap<_, _>>(),
                    "random_baseline": report.random_baseline,
                }),
            )?;
            "experiment overlap"
        }
        Experiment::Histogram(a) => {
            let data = data_in(&mut stage, &a.data)?;
            let m = interpretable_in(&mut stage, &a.checkpoint)?;
            let h = histogram_study(&m, &data.test, cfg.eval.histogram_bins)?;
            h.write_csv(&stage.path("histogram.csv"))?;
            "experiment histogram"
        }
        Experiment::Fpfn(a) => {
            let data = data_in(&mut stage, &a.data)?;
            let m = interpretable_in(&mut stage, &a.checkpoint)?;
            let s = export_fp_fn(&m, &data.test, stage.dir(), cfg.eval.fpfn_per_category)?;
            for cat in &s.empty {
                log::info!("category {cat} is empty");
            }
            write_json(&stage.path("fpfn.json"), &s)?;
            "experiment fpfn"
        }
    };
    stage.commit(name, cfg)?;
    Ok(())
}

/// `run,metric,value` over the `metrics.csv` of each run, plus a Markdown table.
pub fn report(g: &Global, cfg: &RunConfig, a: &ReportArgs) -> Result<()> {
    let mut stage = Staging::begin(&g.out)?;
    let mut rows = Vec::new();
    for run in &a.runs {
        let path = run.join("metrics.csv");
        stage.input(&path)?;
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        for line in text.lines().skip(1) {
            let (metric, value) = line.split_once(',').ok_or_else(|| Error::File {
                path: path.clone(),
                message: format!("malformed row `{line}`"),
            })?;
            rows.push((run.display().to_string(), metric.to_string(), value.to_string()));
        }
    }
    let mut csv = String::from("run,metric,value\n");
    let mut md = String::from("| run | metric | value |\n|---|---|---|\n");
    for (run, metric, value) in &rows {
        csv.push_str(&format!("{run},{metric},{value}\n"));
        md.push_str(&format!("| {run} | {metric} | {value} |\n"));
    }
    for (name, text) in [("summary.csv", csv), ("report.md", md)] {
        let p = stage.path(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    stage.commit("report", cfg)?;
    Ok(())
}
