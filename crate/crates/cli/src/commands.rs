use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use resvm::checkpoint;
use resvm::dataset::{
    load_images, scan_image_directory, stratified_split, synth_dataset_generate, AnalysisReport,
    DatasetIndex, Split, SynthConfig,
};
use resvm::model::Model;
use resvm::ssm::{scan_chunked, scan_reference, ScanDims, ScanInputs};
use resvm::training::{
    eval_batch, predict, read_log, top_k_accuracy, train, LabeledImages, Metrics, RunFiles,
};
use resvm::verify::{self, VerifyOptions};
use resvm::Tensor;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::outputs::{plot_curves, write_curves, write_json, RunSummary};

pub const CONFIG_FILE: &str = "config.toml";
pub const SPLIT_FILE: &str = "split.txt";
pub const SUMMARY_FILE: &str = "summary.json";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Builds the split-annotated index a run trains on. With `reuse_split`,
/// an existing split list in the run directory wins over a fresh draw,
/// so `eval` sees exactly the split `train` used.
pub fn prepare_data(cfg: &RunConfig, run_dir: &Path, reuse_split: bool) -> Result<DatasetIndex> {
    let d = &cfg.data;
    let saved = run_dir.join(SPLIT_FILE);
    let index = if d.synth {
        let dir = run_dir.join("synth");
        let index = if reuse_split && dir.is_dir() {
            scan_image_directory(&dir)?
        } else {
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
            }
            synth_dataset_generate(&d.synth_config(), &dir)?
        };
        index.assign_all(Split::Train)
    } else {
        let root = d.root.as_ref().expect("validated: root or synth");
        scan_image_directory(root)?
    };
    let index = if let Some(list) = &d.split_list {
        index.read_split_list(list)?
    } else if reuse_split && saved.is_file() {
        index.read_split_list(&saved)?
    } else {
        match (d.synth, d.split_ratio) {
            (true, None) => index,
            (_, ratio) => {
                let out = stratified_split(&index, ratio.unwrap_or(0.7), d.split_seed)?;
                for class in &out.unsplit {
                    log::warn!("class {class} has fewer than 2 images; all kept for training");
                }
                out.index
            }
        }
    };
    if !reuse_split {
        index.write_split_list(&saved)?;
    }
    Ok(index)
}

pub struct TrainArgs {
    pub config: RunConfig,
    pub run_dir: PathBuf,
}

pub fn cmd_train(args: TrainArgs) -> Result<RunSummary> {
    let TrainArgs { config, run_dir } = args;
    create_dir(&run_dir)?;
    write_text(&run_dir.join(CONFIG_FILE), &config.to_toml())?;
    let index = prepare_data(&config, &run_dir, false)?;
    let model_cfg = config.model_config(index.num_classes())?;
    let size = config.model.input_size;
    let train_set = load_images(&index, Split::Train, size)?;
    let val_set = if index.records_in(Split::Val).next().is_some() {
        load_images(&index, Split::Val, size)?
    } else {
        LabeledImages {
            images: Tensor::zeros([0, 3, size, size]),
            labels: Vec::new(),
        }
    };
    let train_cfg = config.train.to_train_config();
    let mut model = Model::<f32>::new(model_cfg, train_cfg.seed)?;
    println!(
        "training {} {} ({} parameters) on {} images, {} validation, run dir {}",
        config.model.preset,
        config.model.variant,
        model.num_params(),
        train_set.len(),
        val_set.len(),
        run_dir.display()
    );
    let started = Instant::now();
    let files = RunFiles {
        dir: run_dir.clone(),
    };
    let val = (!val_set.is_empty()).then_some(&val_set);
    let summary = train(&mut model, &train_set, val, &train_cfg, Some(&files))?;
    let run = RunSummary::from_train(
        &summary,
        &config.model.preset,
        &config.model.variant,
        model.num_params(),
        index.num_classes(),
        (train_set.len(), val_set.len()),
    );
    write_json(&run, &run_dir.join(SUMMARY_FILE))?;
    let log = read_log(&files.log())?;
    write_curves(&log, &run_dir)?;
    plot_curves(&log, &run_dir.join("loss.png"))?;
    println!(
        "{} steps in {:.1}s; train top-1 {:.4} (EMA {:.4}), loss {:.4} -> {:.4}",
        run.steps,
        started.elapsed().as_secs_f64(),
        run.final_train.top1,
        run.final_ema_train.top1,
        run.initial_train.loss,
        run.final_train.loss
    );
    if let (Some(v), Some(e)) = (run.final_val, run.final_ema_val) {
        println!(
            "val top-1 {:.4} top-5 {:.4}; EMA top-1 {:.4} top-5 {:.4}",
            v.top1, v.top5, e.top1, e.top5
        );
    }
    Ok(run)
}

#[derive(Debug, Serialize)]
pub struct TopK {
    pub k: usize,
    pub accuracy: f64,
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub split: String,
    pub images: usize,
    pub metrics: Metrics,
    pub top_k: Vec<TopK>,
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub config: Option<PathBuf>,
    pub split: Option<Split>,
    pub ks: Vec<usize>,
    pub out: Option<PathBuf>,
}

pub fn cmd_eval(args: EvalArgs) -> Result<EvalReport> {
    let run_dir = args
        .checkpoint
        .parent()
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    let config_path = args.config.unwrap_or_else(|| run_dir.join(CONFIG_FILE));
    let config = RunConfig::load(Some(&config_path), &[])?;
    let model = checkpoint::load(&args.checkpoint)?;
    let index = prepare_data(&config, &run_dir, true)?;
    let expected = config.model_config(index.num_classes())?;
    if model.config() != &expected {
        return Err(resvm::Error::CheckpointMismatch(format!(
            "{} holds {:?}, but {} with this dataset describes {:?}",
            args.checkpoint.display(),
            model.config(),
            config_path.display(),
            expected
        ))
        .into());
    }
    let split = args
        .split
        .unwrap_or(if index.records_in(Split::Val).next().is_some() {
            Split::Val
        } else {
            Split::Train
        });
    let data = load_images(&index, split, config.model.input_size)?;
    if data.is_empty() {
        return Err(resvm::Error::Dataset(format!("the {split} split is empty")).into());
    }
    let train_cfg = config.train.to_train_config();
    let logits = predict(
        &model,
        &data,
        eval_batch(train_cfg.batch_size),
        train_cfg.scan_mode(),
    )?;
    let metrics = Metrics::from_logits(&logits, &data.labels)?;
    let classes = index.num_classes();
    let mut top_k = Vec::with_capacity(args.ks.len());
    for &k in &args.ks {
        if k == 0 {
            return Err(CliError::Config("k must be at least 1".into()));
        }
        // Any k at or beyond the class count ranks every class.
        let accuracy = top_k_accuracy(&logits, &data.labels, k.min(classes))?;
        top_k.push(TopK { k, accuracy });
    }
    let report = EvalReport {
        checkpoint: args.checkpoint.display().to_string(),
        split: split.to_string(),
        images: data.len(),
        metrics,
        top_k,
    };
    let out = args
        .out
        .unwrap_or_else(|| run_dir.join(format!("eval_{split}.json")));
    write_json(&report, &out)?;
    for t in &report.top_k {
        println!("top-{} {:.4}", t.k, t.accuracy);
    }
    println!("loss {:.6} on {} {split} images", metrics.loss, data.len());
    Ok(report)
}

pub fn cmd_analyze(root: &Path, out: &Path) -> Result<()> {
    let index = scan_image_directory(root)?;
    let text = AnalysisReport::build(&index).render();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_text(out, &text)?;
    print!("{text}");
    Ok(())
}

pub fn cmd_split(root: &Path, ratio: f64, seed: u64, out: &Path) -> Result<()> {
    let index = scan_image_directory(root)?;
    let split = stratified_split(&index, ratio, seed)?;
    for class in &split.unsplit {
        log::warn!("class {class} has fewer than 2 images; all kept for training");
    }
    split.index.write_split_list(out)?;
    let train: usize = split.index.split_counts(Split::Train).iter().sum();
    let val: usize = split.index.split_counts(Split::Val).iter().sum();
    println!(
        "{train} train / {val} val over {} classes -> {}",
        index.num_classes(),
        out.display()
    );
    Ok(())
}

pub fn cmd_synth(cfg: &SynthConfig, out: &Path) -> Result<()> {
    let index = synth_dataset_generate(cfg, out)?;
    println!(
        "{} images in {} classes -> {}",
        index.records.len(),
        index.num_classes(),
        out.display()
    );
    Ok(())
}

pub fn cmd_verify(
    opts: &VerifyOptions,
    corrupt_scan: bool,
    json: Option<&Path>,
) -> Result<Vec<verify::SuiteReport>> {
    let kernel: &verify::ScanKernel = if corrupt_scan {
        &verify::carry_dropping_kernel
    } else {
        &verify::chunked_kernel
    };
    let reports = verify::run_all(opts, kernel, |r| println!("{}", r.line()));
    if let Some(path) = json {
        write_json(&reports, path)?;
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!(
        "{} of {} suites passed",
        reports.len() - failed,
        reports.len()
    );
    if failed > 0 {
        return Err(CliError::VerifyFailed {
            failed,
            total: reports.len(),
        });
    }
    Ok(reports)
}

pub struct BenchArgs {
    pub dims: ScanDims,
    pub chunks: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
}

fn best_of<F: FnMut()>(reps: usize, mut f: F) -> f64 {
    (0..reps.max(1))
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64()
        })
        .fold(f64::INFINITY, f64::min)
}

pub fn cmd_bench_scan(args: &BenchArgs) -> Result<()> {
    let [ab, bx, c, d, x] = verify::scan_instance(args.dims, args.seed);
    let s = ScanInputs {
        dims: args.dims,
        a_bar: ab.data(),
        b_bar_x: bx.data(),
        c: c.data(),
        d_skip: d.data(),
        x: x.data(),
    };
    let ScanDims {
        batch,
        len,
        dim,
        state,
    } = args.dims;
    println!(
        "scan batch {batch} len {len} dim {dim} state {state}, best of {}",
        args.reps
    );
    let mut reference = Vec::new();
    let t = best_of(args.reps, || reference = scan_reference(&s).0);
    println!("reference        {:>10.3} ms", t * 1e3);
    for &chunk in &args.chunks {
        let mut y = Vec::new();
        let t = best_of(args.reps, || y = scan_chunked(&s, chunk).0);
        let dev = y
            .iter()
            .zip(&reference)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        println!("chunk {chunk:<10} {:>10.3} ms  max |dy| {dev:.2e}", t * 1e3);
    }
    Ok(())
}
