use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::RngCore;
use regionnet::data::store::config_hash;
use regionnet::data::{
    generate_synthetic, load_cub, load_dataset, save_dataset, split, Dataset, PartMergeMap, StoredDataset,
};
use regionnet::detect::{
    detect_all, evaluate_detector, mean_box_sizes, train_heatmap_detector, DetectionReport, Detector, HeatmapDetector,
    OracleDetector,
};
use regionnet::geometry::PostProcess;
use regionnet::model::{
    derived_rng, evaluate, train_epoch, ClassificationReport, EnsembleModel, RegionSource, StepLog,
};
use regionnet::nn::{Checkpoint, ParamStore};
use regionnet::{Error, Result};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{Config, DetectorKind, Source};

const SPLIT: u64 = 10;
const INIT: u64 = 11;
const DETECTOR_INIT: u64 = 12;
const DETECTOR_ORDER: u64 = 13;

const MODEL_FILE: &str = "model.ckpt";
const DETECTOR_FILE: &str = "detector.ckpt";
const LOSS_FILE: &str = "loss.jsonl";
const DETECTOR_LOSS_FILE: &str = "detector_loss.jsonl";
const EVAL_JSON: &str = "eval.json";
const EVAL_TXT: &str = "eval.txt";
const DETECT_JSON: &str = "detect_eval.json";
const DETECT_TXT: &str = "detect_eval.txt";
const DETECTIONS_FILE: &str = "detections.jsonl";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn pretty<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it)?);
        out.push('\n');
    }
    Ok(out)
}

/// Writes a checkpoint next to its destination first so a crash never
/// leaves a truncated file behind.
fn save_atomic(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    ckpt.save(&tmp)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Inputs that determine the dataset contents; the output directory is
/// deliberately absent.
#[derive(Serialize)]
struct DatasetIdentity {
    seed: u64,
    dataset: crate::config::DatasetSection,
    region_scale: f64,
}

fn merge_map(cfg: &Config) -> Result<PartMergeMap> {
    let Some(path) = &cfg.dataset.merge_map else {
        return Ok(PartMergeMap::cub_default());
    };
    let text = read(path)?;
    let map: PartMergeMap = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
    } else {
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
    };
    Ok(map)
}

pub fn gen_data(cfg: &Config, force: bool) -> Result<()> {
    let d = &cfg.dataset;
    let (train, test) = match d.source {
        Source::Synthetic => {
            let full = generate_synthetic(&cfg.synth_config(), cfg.seed)?;
            let frac = d.train_per_class as f64 / (d.train_per_class + d.test_per_class) as f64;
            split(&full, frac, &mut derived_rng(cfg.seed, &[SPLIT]))?
        }
        Source::Cub => {
            let ann = load_cub(&d.cub_root)?;
            ann.to_datasets(
                &d.cub_root,
                &merge_map(cfg)?,
                cfg.augmentation.region_scale,
                d.image_size,
            )?
        }
    };
    let hash = config_hash(&DatasetIdentity {
        seed: cfg.seed,
        dataset: crate::config::DatasetSection {
            dir: Default::default(),
            ..d.clone()
        },
        region_scale: cfg.augmentation.region_scale,
    })?;
    let manifest = save_dataset(&d.dir, &train, &test, cfg.seed, hash, force)?;
    println!(
        "wrote {} train + {} test samples ({} classes, {} regions) to {}",
        manifest.num_train,
        manifest.num_test,
        manifest.num_classes,
        manifest.region_names.len(),
        d.dir.display()
    );
    for (name, set) in [("train", &train), ("test", &test)] {
        let mut counts = vec![0usize; set.num_classes];
        for s in &set.samples {
            counts[s.label.0] += 1;
        }
        let counts: Vec<String> = counts.iter().map(usize::to_string).collect();
        println!("{name} per class: {}", counts.join(" "));
    }
    println!("dataset hash {}", manifest.dataset_hash);
    Ok(())
}

/// Loads the dataset and checks it against the configured C, T and S.
fn load_checked(cfg: &Config) -> Result<StoredDataset> {
    let stored = load_dataset(&cfg.dataset.dir)?;
    let m = &stored.manifest;
    let d = &cfg.dataset;
    if m.num_classes != d.num_classes || m.region_names.len() != d.num_parts || m.image_size != d.image_size {
        return Err(Error::Config(format!(
            "dataset in {} has C={}, T={}, S={} but config has C={}, T={}, S={}",
            d.dir.display(),
            m.num_classes,
            m.region_names.len(),
            m.image_size,
            d.num_classes,
            d.num_parts,
            d.image_size
        )));
    }
    Ok(stored)
}

fn new_model(cfg: &Config, data: &Dataset) -> Result<EnsembleModel<f32>> {
    let ec = cfg.ensemble_config_for(data.num_classes, data.num_regions(), data.image_size);
    EnsembleModel::new(ec, &mut derived_rng(cfg.seed, &[INIT]))
}

fn new_heatmap(cfg: &Config, train: &Dataset) -> Result<HeatmapDetector> {
    HeatmapDetector::new(
        cfg.heatmap_config(),
        train.image_size,
        mean_box_sizes(train),
        &mut derived_rng(cfg.seed, &[DETECTOR_INIT]),
    )
}

pub fn train(cfg: &Config, resume: bool, force: bool) -> Result<()> {
    let stored = load_checked(cfg)?;
    let out = &cfg.output_dir;
    let ckpt_path = out.join(MODEL_FILE);
    let loss_path = out.join(LOSS_FILE);
    let tc = cfg.train_config();
    tc.validate()?;
    let mut model = new_model(cfg, &stored.train)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut log: Vec<String> = Vec::new();
    let start = if resume && ckpt_path.exists() {
        let start = model.load(&ckpt_path)?;
        if loss_path.exists() {
            for line in read(&loss_path)?.lines() {
                let entry: StepLog = serde_json::from_str(line)?;
                if entry.epoch < start {
                    log.push(line.to_owned());
                }
            }
        }
        println!("resuming after epoch {start}");
        start
    } else {
        if ckpt_path.exists() && !force {
            return Err(Error::Config(format!(
                "{} exists; pass --resume to continue or --force to overwrite",
                ckpt_path.display()
            )));
        }
        save_atomic(&model.to_checkpoint(0), &ckpt_path)?;
        write(&loss_path, "")?;
        0
    };

    for epoch in start..tc.epochs {
        let mut steps = Vec::new();
        let stats = train_epoch(&mut model, &stored.train, &tc, cfg.seed, epoch, |s| steps.push(*s))?;
        for s in &steps {
            log.push(serde_json::to_string(s)?);
        }
        write(&loss_path, log.iter().map(|l| format!("{l}\n")).collect::<String>())?;
        save_atomic(&model.to_checkpoint(epoch + 1), &ckpt_path)?;
        println!("epoch {}/{}: mean loss {:.6}", epoch + 1, tc.epochs, stats.mean_loss);
    }

    if cfg.detector.kind == DetectorKind::Heatmap {
        let det_path = out.join(DETECTOR_FILE);
        if resume && det_path.exists() {
            println!("heatmap detector already trained");
        } else {
            let mut det = new_heatmap(cfg, &stored.train)?;
            let losses = train_heatmap_detector(
                &mut det,
                &stored.train,
                cfg.detector.train_steps,
                cfg.detector.batch_size,
                &cfg.heatmap_adam(),
                derived_rng(cfg.seed, &[DETECTOR_ORDER]).next_u64(),
            )?;
            let mut ckpt = Checkpoint::new();
            det.params.export("detector/", &mut ckpt);
            save_atomic(&ckpt, &det_path)?;
            let rows: Vec<Value> = losses
                .iter()
                .enumerate()
                .map(|(i, l)| json!({"step": i, "loss": l}))
                .collect();
            write(&out.join(DETECTOR_LOSS_FILE), jsonl(&rows)?)?;
            if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
                println!("heatmap detector: {} steps, loss {first:.4} -> {last:.4}", losses.len());
            }
        }
    }
    Ok(())
}

fn load_model(cfg: &Config, data: &Dataset) -> Result<EnsembleModel<f32>> {
    let mut model = new_model(cfg, data)?;
    model.load(&cfg.output_dir.join(MODEL_FILE))?;
    Ok(model)
}

fn build_detector(cfg: &Config, stored: &StoredDataset) -> Result<Box<dyn Detector>> {
    let t = stored.manifest.region_names.len();
    match cfg.detector.kind {
        DetectorKind::Oracle => Ok(Box::new(OracleDetector::new(cfg.oracle_config(), t)?)),
        DetectorKind::Heatmap => {
            let mut det = new_heatmap(cfg, &stored.train)?;
            let ckpt = Checkpoint::load(cfg.output_dir.join(DETECTOR_FILE))?;
            det.params = ParamStore::import(&ckpt, "detector/", &det.params)?;
            Ok(Box::new(det))
        }
    }
}

fn all_post_modes(cfg: &Config) -> [PostProcess; 3] {
    [
        PostProcess::None,
        PostProcess::NmsStandard {
            iou_threshold: cfg.eval.nms_threshold,
        },
        PostProcess::NmsSpecial,
    ]
}

fn classification_json(r: &ClassificationReport) -> Value {
    json!({ "per_head": r.per_head, "fused": r.fused })
}

pub fn eval(cfg: &Config) -> Result<()> {
    let stored = load_checked(cfg)?;
    let model = load_model(cfg, &stored.test)?;
    let detector = build_detector(cfg, &stored)?;
    let test = &stored.test;

    let gt = evaluate(test, &model, RegionSource::GroundTruth, None)?;
    let via_det = evaluate(test, &model, RegionSource::Detector, Some(detector.as_ref()))?;
    let mut detection = Vec::new();
    for post in all_post_modes(cfg) {
        detection.push(evaluate_detector(
            detector.as_ref(),
            test,
            cfg.eval.iou_threshold,
            &post,
        )?);
    }

    let report = json!({
        "classification": {
            "ground_truth": classification_json(&gt),
            "detector": classification_json(&via_det),
        },
        "detection": detection
            .iter()
            .map(|r| (r.post.clone(), detection_json(r)))
            .collect::<serde_json::Map<String, Value>>(),
    });
    let mut text = String::new();
    for r in &detection {
        text.push_str(&format!(
            "AP and mAP, post-processing {}, IoU {}\n",
            r.post, r.iou_threshold
        ));
        text.push_str(&r.to_table());
        text.push('\n');
    }
    for (name, r) in [("ground-truth regions", &gt), ("detected regions", &via_det)] {
        text.push_str(&format!("Accuracy of every sub-classifier, {name}\n"));
        text.push_str(&r.to_table());
        text.push('\n');
    }
    write(&cfg.output_dir.join(EVAL_JSON), pretty(&report)?)?;
    write(&cfg.output_dir.join(EVAL_TXT), &text)?;
    print!("{text}");
    Ok(())
}

fn detection_json(r: &DetectionReport) -> Value {
    json!({
        "iou_threshold": r.iou_threshold,
        "per_class": r.per_class.iter().map(|c| (c.name.clone(), json!(c.ap))).collect::<serde_json::Map<_, _>>(),
        "skipped": r.skipped,
        "map": r.map,
    })
}

pub fn detect_eval(cfg: &Config) -> Result<()> {
    let stored = load_checked(cfg)?;
    let detector = build_detector(cfg, &stored)?;
    let post = cfg.post_process()?;
    let report = evaluate_detector(detector.as_ref(), &stored.test, cfg.eval.iou_threshold, &post)?;
    let dets = detect_all(detector.as_ref(), &stored.test, &post)?;
    let mut value = detection_json(&report);
    value["post"] = json!(report.post);
    let text = format!(
        "AP and mAP, post-processing {}, IoU {}\n{}",
        report.post,
        report.iou_threshold,
        report.to_table()
    );
    write(&cfg.output_dir.join(DETECT_JSON), pretty(&value)?)?;
    write(&cfg.output_dir.join(DETECT_TXT), &text)?;
    write(&cfg.output_dir.join(DETECTIONS_FILE), jsonl(&dets)?)?;
    print!("{text}");
    Ok(())
}

/// Per-epoch mean of the logged step losses.
fn epoch_losses(path: &Path) -> Result<BTreeMap<u64, f64>> {
    let mut acc: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for line in read(path)?.lines() {
        let s: StepLog = serde_json::from_str(line)?;
        let e = acc.entry(s.epoch).or_default();
        e.0 += s.loss;
        e.1 += 1;
    }
    Ok(acc.into_iter().map(|(k, (sum, n))| (k, sum / n as f64)).collect())
}

pub fn report(cfg: &Config) -> Result<()> {
    let out = &cfg.output_dir;
    let eval_path = out.join(EVAL_JSON);
    if !eval_path.exists() {
        return Err(Error::Config(format!(
            "{} missing; run eval first",
            eval_path.display()
        )));
    }
    let mut text = String::from("Configuration\n");
    text.push_str(&cfg.to_toml()?);
    text.push('\n');

    let mut json_report = serde_json::Map::new();
    let loss_path = out.join(LOSS_FILE);
    if loss_path.exists() {
        let losses = epoch_losses(&loss_path)?;
        text.push_str("Training loss per epoch\n");
        for (e, l) in &losses {
            text.push_str(&format!("{:>5}  {l:.6}\n", e + 1));
        }
        text.push('\n');
        let rows: Vec<f64> = losses.values().copied().collect();
        json_report.insert("epoch_mean_loss".into(), json!(rows));
    }
    text.push_str(&read(&out.join(EVAL_TXT))?);
    json_report.insert("eval".into(), serde_json::from_str(&read(&eval_path)?)?);
    let detect_path = out.join(DETECT_JSON);
    if detect_path.exists() {
        text.push_str(&read(&out.join(DETECT_TXT))?);
        json_report.insert("detect_eval".into(), serde_json::from_str(&read(&detect_path)?)?);
    }
    write(&out.join("report.txt"), &text)?;
    write(&out.join("report.json"), pretty(&json_report)?)?;
    print!("{text}");
    Ok(())
}
