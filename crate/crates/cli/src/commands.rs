//! The five verbs. Each returns whether its checks passed; hard errors are
//! reported through `Err`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use viewpoint_core::aggregate::{select_bin_integral, select_bin_max_activation, BoundingBox};
use viewpoint_core::avp::{evaluate_classes, mean_avp, GroundTruthObject, ScoredPrediction, VprCurve};
use viewpoint_core::gradcheck::{grad_check, GradCheckOptions, LossKind};
use viewpoint_core::toytrain::synth::TEST_STREAM;
use viewpoint_core::toytrain::{
    evaluate_toy, generate_dataset, predict_sample, BinSelection, Checkpoint, LogRow, LossConfig, ToyModel,
    Trainer, TrainingData,
};
use viewpoint_core::viewgeom::{AzimuthDeg, BinIndex, BinScheme};

use crate::config::{annotation_path, RunConfig};
use crate::dataset::{load_split, write_split, LoadedSplit, SPLITS};
use crate::records::{fmt9, read_jsonl, write_jsonl, AnnotationRecord, PredictionRecord};
use crate::svg::{line_chart, staircase, Series};

/// Result of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    CheckFailed,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))
}

pub fn synth(cfg: &RunConfig) -> Result<Outcome> {
    let dir = cfg.data_dir();
    create_dir(dir)?;
    for (split, stream) in SPLITS {
        let n = write_split(cfg, dir, split, stream)?;
        info!("wrote {n} {split} samples to {}", dir.display());
    }
    Ok(Outcome::Success)
}

/// Controls for interrupting and continuing a training run.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    pub resume: bool,
    /// Halt every class after this many iterations, leaving a checkpoint.
    pub stop_after: Option<u64>,
}

fn checkpoint_path(out: &Path, class: &str) -> PathBuf {
    out.join("checkpoints").join(format!("{class}.json"))
}

struct ClassRun {
    log: Vec<LogRow>,
    model: ToyModel,
    finished: bool,
}

fn train_class(cfg: &RunConfig, data: &TrainingData, class: &str, opts: TrainOptions) -> Result<ClassRun> {
    let tc = cfg.train_config(cfg.loss);
    let fingerprint = format!("{}-{}", cfg.hash(), cfg.seed);
    let ckpt = checkpoint_path(&cfg.out, class);
    let (mut trainer, mut log) = if opts.resume && ckpt.is_file() {
        let c = Checkpoint::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
        if c.config_fingerprint != fingerprint || c.class_id != data.class_id {
            bail!("{} was written by a different configuration", ckpt.display());
        }
        info!("{class}: resuming at iteration {}", c.state.step);
        (Trainer::resume(&tc, data, c.state)?, c.log)
    } else {
        (Trainer::new(&tc, data)?, Vec::new())
    };
    let stop = opts.stop_after.unwrap_or(u64::MAX).min(tc.total_iterations());
    let interval = cfg.train.checkpoint_interval;
    while trainer.state().step < stop {
        let next = trainer
            .state()
            .step
            .checked_div(interval)
            .map_or(stop, |done| ((done + 1) * interval).min(stop));
        log.extend(trainer.run_until(next)?);
        let mut c = Checkpoint::new(trainer.state().clone(), data.class_id, fingerprint.clone());
        c.log = log.clone();
        c.save(&ckpt).with_context(|| format!("writing {}", ckpt.display()))?;
        info!("{class}: iteration {} of {}", trainer.state().step, tc.total_iterations());
    }
    Ok(ClassRun {
        finished: trainer.finished(),
        model: trainer.into_state().model,
        log,
    })
}

fn prediction_records(cfg: &RunConfig, test: &LoadedSplit, models: &[ToyModel]) -> Result<Vec<PredictionRecord>> {
    let bins = cfg.bin_scheme()?;
    let jitter = cfg.jitter();
    test.dataset
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let p = predict_sample(
                &models[s.class_id as usize],
                &s.features,
                s.class_id,
                &test.gt_box(i),
                &jitter,
                cfg.eval.selection,
                &bins,
            )?;
            Ok(PredictionRecord {
                image: test.annotations[i].image.clone(),
                class: test.annotations[i].class.clone(),
                bbox: [p.bbox.x, p.bbox.y, p.bbox.w, p.bbox.h],
                confidence: p.confidence,
                viewpoint_scores: Some(p.score),
                predicted_bin: None,
            })
        })
        .collect()
}

pub fn train(cfg: &RunConfig, opts: TrainOptions) -> Result<Outcome> {
    cfg.require_inputs()?;
    let train = load_split(cfg, "train")?;
    let test = load_split(cfg, "test")?;
    let gen = cfg.generator();
    let tc = cfg.train_config(cfg.loss);
    create_dir(&cfg.out.join("checkpoints"))?;

    let classes = &cfg.generator.classes;
    let data: Vec<TrainingData> = (0..classes.len() as u32)
        .map(|c| TrainingData::build(&gen, &train.dataset, c, &tc).with_context(|| format!("class `{}`", classes[c as usize])))
        .collect::<Result<_>>()?;
    // classes are independent runs with no shared mutable state
    let runs: Vec<ClassRun> = std::thread::scope(|scope| {
        let handles: Vec<_> = data
            .iter()
            .zip(classes)
            .map(|(d, name)| scope.spawn(move || train_class(cfg, d, name, opts)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect::<Result<Vec<_>>>()
    })?;

    let mut rows = Vec::new();
    for (run, name) in runs.iter().zip(classes) {
        for r in &run.log {
            rows.push(vec![name.clone(), r.iteration.to_string(), fmt9(r.loss), r.phase.to_string()]);
        }
    }
    write_file(
        &cfg.out.join("train_log.csv"),
        &csv_bytes(&["class", "iteration", "loss", "phase"], &rows)?,
    )?;
    let series: Vec<Series<'_>> = runs
        .iter()
        .zip(classes)
        .map(|(run, name)| Series {
            label: name,
            points: run.log.iter().map(|r| (r.iteration as f64, r.loss)).collect(),
        })
        .collect();
    let max_loss = runs.iter().flat_map(|r| r.log.iter().map(|l| l.loss)).fold(0.0, f64::max);
    let svg = line_chart(
        "training loss",
        "iteration",
        "loss",
        (0.0, tc.total_iterations().max(1) as f64),
        (0.0, max_loss.max(1e-9)),
        &series,
    );
    write_file(&cfg.out.join("loss_curve.svg"), svg.as_bytes())?;

    if runs.iter().all(|r| r.finished) {
        let models: Vec<ToyModel> = runs.into_iter().map(|r| r.model).collect();
        let preds = prediction_records(cfg, &test, &models)?;
        write_jsonl(&cfg.out.join("predictions.jsonl"), &preds)?;
        info!("wrote {} predictions", preds.len());
    } else {
        info!("stopped early; rerun with --resume to finish");
    }
    Ok(Outcome::Success)
}

/// Options for scoring a prediction file.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub predictions: PathBuf,
    pub ground_truth: PathBuf,
    pub bins: BinScheme,
    pub iou_threshold: f64,
    pub selection: BinSelection,
    pub svg: bool,
    pub out: PathBuf,
}

fn to_box(b: [f64; 4]) -> Result<BoundingBox> {
    Ok(BoundingBox::new(b[0], b[1], b[2], b[3])?)
}

fn predicted_bin(p: &PredictionRecord, bins: &BinScheme, selection: BinSelection) -> Result<BinIndex> {
    match (&p.viewpoint_scores, p.predicted_bin) {
        (Some(s), _) => Ok(match selection {
            BinSelection::Integral => select_bin_integral(s, bins)?.0,
            BinSelection::MaxActivation => select_bin_max_activation(s, bins)?,
        }),
        (None, Some(b)) if b < bins.count => Ok(BinIndex(b)),
        (None, Some(b)) => bail!("predicted_bin {b} out of range for {} bins", bins.count),
        (None, None) => unreachable!("records are validated on read"),
    }
}

fn report_csv(per_class: &[(String, f64)]) -> Result<Vec<u8>> {
    let mut rows: Vec<Vec<String>> = per_class.iter().map(|(c, v)| vec![c.clone(), fmt9(*v)]).collect();
    let values: Vec<f64> = per_class.iter().map(|(_, v)| *v).collect();
    rows.push(vec!["mAVP".into(), fmt9(mean_avp(&values))]);
    csv_bytes(&["class", "avp"], &rows)
}

/// Scores predictions against ground truth and writes `eval.csv`.
pub fn eval(opts: &EvalOptions) -> Result<Outcome> {
    let gt_records: Vec<AnnotationRecord> = read_jsonl(&opts.ground_truth)?;
    let pred_records: Vec<PredictionRecord> = read_jsonl(&opts.predictions)?;
    let mut names: Vec<String> = gt_records.iter().map(|g| g.class.clone()).collect();
    names.sort();
    names.dedup();
    let id_of = |name: &str| names.iter().position(|n| n == name).map(|i| i as u32);

    let gts = gt_records
        .iter()
        .map(|g| {
            Ok(GroundTruthObject {
                image_id: g.image.clone(),
                class_id: id_of(&g.class).expect("name collected above"),
                bbox: to_box(g.bbox)?,
                azimuth: AzimuthDeg::new(g.azimuth),
                difficult: g.difficult,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut preds = Vec::new();
    for (i, p) in pred_records.iter().enumerate() {
        // predictions for classes absent from the ground truth cannot score
        let Some(class_id) = id_of(&p.class) else { continue };
        preds.push(ScoredPrediction {
            image_id: p.image.clone(),
            class_id,
            bbox: to_box(p.bbox)?,
            confidence: p.confidence,
            predicted_bin: predicted_bin(p, &opts.bins, opts.selection)
                .with_context(|| format!("{}:{}", opts.predictions.display(), i + 1))?,
        });
    }
    let avp_opts = viewpoint_core::avp::AvpOptions {
        iou_threshold: opts.iou_threshold,
        bins: opts.bins,
        ..Default::default()
    };
    let curves: BTreeMap<u32, VprCurve> = evaluate_classes(&preds, &gts, &avp_opts);
    let per_class: Vec<(String, f64)> = names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.clone(), curves.get(&(i as u32)).map_or(0.0, |c| c.avp)))
        .collect();

    create_dir(&opts.out)?;
    let csv = report_csv(&per_class)?;
    write_file(&opts.out.join("eval.csv"), &csv)?;
    std::io::stdout().write_all(&csv)?;
    if opts.svg {
        let series: Vec<Series<'_>> = names
            .iter()
            .enumerate()
            .map(|(i, n)| Series {
                label: n,
                points: curves.get(&(i as u32)).map(|c| staircase(&c.points)).unwrap_or_default(),
            })
            .collect();
        let svg = line_chart("viewpoint precision-recall", "recall", "precision", (0.0, 1.0), (0.0, 1.0), &series);
        write_file(&opts.out.join("vpr.svg"), svg.as_bytes())?;
    }
    Ok(Outcome::Success)
}

/// Recomputes the mean from a `class,avp` table, ignoring any existing mAVP row.
pub fn summarize(table: &Path, out: &Path) -> Result<Outcome> {
    let mut rdr = csv::Reader::from_path(table).with_context(|| format!("opening {}", table.display()))?;
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["class", "avp"] {
        bail!("{}: expected header `class,avp`", table.display());
    }
    let mut per_class = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.with_context(|| format!("{}:{}", table.display(), i + 2))?;
        if &rec[0] == "mAVP" {
            continue;
        }
        let v: f64 = rec[1]
            .trim()
            .parse()
            .with_context(|| format!("{}:{}: bad avp `{}`", table.display(), i + 2, &rec[1]))?;
        per_class.push((rec[0].to_string(), v));
    }
    create_dir(out)?;
    let csv = report_csv(&per_class)?;
    write_file(&out.join("eval.csv"), &csv)?;
    std::io::stdout().write_all(&csv)?;
    Ok(Outcome::Success)
}

/// Metrics of one loss configuration on the in-memory toy benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub loss: LossConfig,
    pub mavp: f64,
    pub accuracy: f64,
}

pub fn ablation_rows(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let gen = cfg.generator();
    let train = generate_dataset(&gen, cfg.generator.train_samples)?;
    let test = gen.generate_split(cfg.generator.test_samples, TEST_STREAM, gen.noise_std)?;
    let avp_opts = cfg.avp_options()?;
    let jitter = cfg.jitter();
    let classes = gen.class_count;
    let run_one = |loss: LossConfig| -> Result<AblationRow> {
        let tc = cfg.train_config(loss);
        let mut avps = Vec::new();
        let mut accs = Vec::new();
        for c in 0..classes {
            let data = TrainingData::build(&gen, &train, c, &tc)?;
            let mut t = Trainer::new(&tc, &data)?;
            t.run()?;
            let e = evaluate_toy(t.model(), &test, c, &jitter, cfg.eval.selection, &avp_opts)?;
            avps.push(e.avp);
            accs.push(e.bin_accuracy);
        }
        Ok(AblationRow {
            loss,
            mavp: mean_avp(&avps),
            accuracy: accs.iter().sum::<f64>() / accs.len() as f64,
        })
    };
    std::thread::scope(|scope| {
        let handles: Vec<_> = cfg.ablate.losses.iter().map(|&l| scope.spawn(move || run_one(l))).collect();
        handles.into_iter().map(|h| h.join().expect("ablation thread panicked")).collect()
    })
}

pub fn ablate(cfg: &RunConfig) -> Result<Outcome> {
    let rows = ablation_rows(cfg)?;
    let hash = cfg.hash();
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.loss.to_string(),
                cfg.seed.to_string(),
                hash.clone(),
                fmt9(r.mavp),
                fmt9(r.accuracy),
            ]
        })
        .collect();
    create_dir(&cfg.out)?;
    let csv = csv_bytes(&["loss", "seed", "config_hash", "mavp", "bin_accuracy"], &table)?;
    write_file(&cfg.out.join("ablation.csv"), &csv)?;
    std::io::stdout().write_all(&csv)?;
    Ok(Outcome::Success)
}

pub fn gradcheck(opts: &GradCheckOptions) -> Result<Outcome> {
    let mut rows = Vec::new();
    let mut all_pass = true;
    for kind in LossKind::ALL {
        let r = grad_check(kind, opts);
        all_pass &= r.passed();
        rows.push(vec![
            kind.name().to_string(),
            r.trials.to_string(),
            fmt9(r.max_rel_err),
            fmt9(r.mean_rel_err),
            if r.passed() { "pass" } else { "fail" }.to_string(),
        ]);
    }
    let csv = csv_bytes(&["loss", "trials", "max_rel_err", "mean_rel_err", "status"], &rows)?;
    std::io::stdout().write_all(&csv)?;
    Ok(if all_pass { Outcome::Success } else { Outcome::CheckFailed })
}

/// Ground-truth file of a synthesized split, for wiring `eval` after `train`.
pub fn test_annotations(cfg: &RunConfig) -> PathBuf {
    annotation_path(cfg.data_dir(), "test")
}
