//! Command bodies. Each returns a [`Failure`] classed for the exit code.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use geopretrain_core::checkpoint::{file_checksum, Checkpoint, CheckpointMeta, Method, Normalization};
use geopretrain_core::dataset::{
    annotation_class_stats, class_pixel_stats, deterministic_split, resolution_profile, AnnotationSet, Category,
    ColorCodeTable, ImageInfo, SegmentationSource, SplitSpec,
};
use geopretrain_core::metrics::ap::EvalParams;
use geopretrain_core::metrics::oracle::{brute_detection_eval, brute_seg_scores};
use geopretrain_core::metrics::{ConfusionMatrix, SegScores};
use geopretrain_nn::backbone::{Backbone, BackboneSpec};
use geopretrain_nn::data::parallel_map;
use geopretrain_nn::detection::{
    ap_table_csv, det_history_csv, export_detection_backbone, finetune_detection, per_class_csv, predict_and_score,
    BackendOptions, BackendRegistry, DetSample, DetTrainConfig, DetectorBackend,
};
use geopretrain_nn::heads::SimSiamDims;
use geopretrain_nn::params::ParamStore;
use geopretrain_nn::segmentation::{
    finetune_segmentation, scores, seg_history_csv, SegHeadSpec, SegModel, SegTrainConfig,
};
use geopretrain_nn::simsiam::{simsiam_history_csv, train_simsiam, SimSiamModel};
use geopretrain_nn::supervised::{sup_history_csv, train_supervised, Classifier};
use image::RgbImage;
use serde_json::json;

use crate::config::{self, Command, DatasetKind, Resolved, Task, TrainSettings};
use crate::inputs;
use crate::manifest::{self, Provenance, Run, Status};
use crate::names::{model_display, pretrain_artifact};
use crate::{Failure, Outcome};

pub const SEG_RESULTS_HEADER: &str = "model,PA,f1,mIoU,PA_macro";
pub const DET_RESULTS_HEADER: &str = "model,AP,AP50,AP75,APs,APm,APl";

/// Flags shared by the config-driven commands.
#[derive(Debug, Clone)]
pub struct RunArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub set: Vec<String>,
    pub print_config: bool,
    pub resume: bool,
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Validation(anyhow!(msg.into()))
}

/// Loads and resolves the config. `None` means there is nothing left to do
/// (printed config, or a completed run under `--resume`).
fn prepare(args: &RunArgs, command: Command) -> Outcome<Option<(Resolved, String)>> {
    let cfg = config::load(&args.config, &args.set)?;
    let resolved = config::resolve(cfg, command)?;
    let text = resolved.to_toml();
    if args.print_config {
        print!("{text}");
        return Ok(None);
    }
    inputs::check_paths(&resolved.config.dataset)?;
    if let Some(prev) = manifest::previous(&args.out) {
        if args.resume {
            if prev.config != text {
                return Err(invalid(format!(
                    "{} holds a run with a different configuration; use another --out or drop --resume",
                    args.out.display()
                )));
            }
            if prev.status == Status::Complete {
                println!("{}: already complete", args.out.display());
                return Ok(None);
            }
        }
    }
    Ok(Some((resolved, text)))
}

fn finish(run: Run, result: Outcome) -> Outcome {
    let saved = run.finish(&result);
    result.and(saved)
}

fn png_bytes(img: &RgbImage) -> Outcome<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png).map_err(Failure::runtime)?;
    Ok(buf.into_inner())
}

fn pct(v: f64) -> String {
    if v.is_finite() && v >= 0.0 {
        format!("{:.2}", 100.0 * v)
    } else {
        "nan".into()
    }
}

/// Replaces the row whose first field is `model`, or appends one. Other
/// rows keep their order.
pub fn upsert_row(existing: Option<&str>, header: &str, model: &str, row: &str) -> Outcome<String> {
    let mut lines: Vec<String> = Vec::new();
    if let Some(text) = existing {
        let mut it = text.lines();
        match it.next() {
            Some(h) if h == header => {}
            Some(h) => return Err(invalid(format!("results file has header `{h}`, expected `{header}`"))),
            None => {}
        }
        lines.extend(it.filter(|l| !l.is_empty()).map(String::from));
    }
    match lines.iter().position(|l| l.split(',').next() == Some(model)) {
        Some(i) => lines[i] = row.to_string(),
        None => lines.push(row.to_string()),
    }
    let mut out = format!("{header}\n");
    for l in lines {
        out.push_str(&l);
        out.push('\n');
    }
    Ok(out)
}

fn write_row(run: &mut Run, file: &str, header: &str, model: &str, row: &str) -> Outcome {
    let existing = std::fs::read_to_string(run.path(file)).ok();
    let text = upsert_row(existing.as_deref(), header, model, row)?;
    run.write(file.trim_end_matches(".csv"), file, text.as_bytes())
}

fn seg_row(model: &str, s: &SegScores) -> String {
    format!("{model},{},{},{},{}", pct(s.pa), pct(s.f1), pct(s.miou), pct(s.pa_macro))
}

fn check_backbone(resolved: &Resolved, ckpt: &Checkpoint, path: &Path) -> Outcome<BackboneSpec> {
    let want = &resolved.config.model.backbone;
    if &ckpt.meta.backbone != want {
        return Err(invalid(format!(
            "{} holds a `{}` backbone but model.backbone is `{want}`",
            path.display(),
            ckpt.meta.backbone
        )));
    }
    Ok(BackboneSpec::from_variant(want)?)
}

fn display_name(resolved: &Resolved, ckpt: &Checkpoint) -> String {
    resolved
        .config
        .model
        .name
        .clone()
        .or_else(|| ckpt.meta.extra.get("display_name").and_then(|v| v.as_str()).map(String::from))
        .unwrap_or_else(|| model_display(&ckpt.meta))
}

pub fn pretrain(args: &RunArgs) -> Outcome {
    let Some((resolved, text)) = prepare(args, Command::Pretrain)? else {
        return Ok(());
    };
    let init = resolved.config.model.init.clone().expect("validated");
    let generalist = inputs::checkpoint(&init)?;
    let spec = check_backbone(&resolved, &generalist, &init)?;
    let provenance = vec![Provenance::of(&init, &generalist)?];
    let mut run = Run::start(&args.out, "pretrain", text, Some(resolved.seeds), provenance)?;
    let result = pretrain_body(&mut run, &resolved, &generalist, &spec);
    finish(run, result)
}

fn pretrain_body(run: &mut Run, r: &Resolved, generalist: &Checkpoint, spec: &BackboneSpec) -> Outcome {
    let ds = &r.config.dataset;
    let parent = run.manifest.provenance[0].sha256.clone();
    let mode = r.config.mode.expect("validated");
    let (mut ckpt, history) = match &r.train {
        TrainSettings::Supervised(t) => {
            let (data, notes) = inputs::labeled(ds, r.seeds.data)?;
            run.manifest.warnings.extend(notes);
            let data = data.as_labeled();
            let mut model = Classifier::new(spec, data.num_classes(), r.seeds.model)?;
            model.normalization = generalist.meta.normalization.clone();
            let out = train_supervised(&model, data, Some(generalist), &ds.name, t)?;
            (out.checkpoint, sup_history_csv(&out.history))
        }
        TrainSettings::Simsiam(t) => {
            let (data, notes) = inputs::unlabeled(ds, r.seeds.data)?;
            run.manifest.warnings.extend(notes);
            let dims = r.config.model.simsiam.unwrap_or_else(|| SimSiamDims::for_variant(&spec.variant));
            let mut model = SimSiamModel::new(spec, dims, r.seeds.model)?;
            model.normalization = generalist.meta.normalization.clone();
            let out = train_simsiam(&model, data.as_unlabeled(), Some(generalist), &ds.name, t)?;
            run.manifest.warnings.extend(out.warnings);
            (out.checkpoint, simsiam_history_csv(&out.history))
        }
        _ => unreachable!("resolved for pretrain"),
    };
    ckpt.meta.parent_checksum = Some(parent);
    run.write("history", "history.csv", history.as_bytes())?;
    run.save_checkpoint("checkpoint", &pretrain_artifact(mode, &ds.name), &ckpt)?;
    Ok(())
}

pub fn finetune(args: &RunArgs) -> Outcome {
    let Some((resolved, text)) = prepare(args, Command::Finetune)? else {
        return Ok(());
    };
    let init = resolved.config.model.init.clone().expect("validated");
    let pretrained = inputs::checkpoint(&init)?;
    let spec = check_backbone(&resolved, &pretrained, &init)?;
    let provenance = vec![Provenance::of(&init, &pretrained)?];
    let mut run = Run::start(&args.out, "finetune", text, Some(resolved.seeds), provenance)?;
    let result = match &resolved.train {
        TrainSettings::Seg(t) => finetune_seg(&mut run, &resolved, &pretrained, &spec, t),
        TrainSettings::Det(t) => finetune_det(&mut run, &resolved, &pretrained, t),
        _ => unreachable!("resolved for finetune"),
    };
    finish(run, result)
}

fn head_spec(r: &Resolved, spec: &BackboneSpec, k: usize) -> Outcome<SegHeadSpec> {
    match &r.config.model.head {
        Some(h) if h.num_classes != k => Err(invalid(format!(
            "model.head.num_classes is {} but the dataset has {k} classes",
            h.num_classes
        ))),
        Some(h) => Ok(h.clone()),
        None if spec.variant == "tiny" => Ok(SegHeadSpec::tiny(k)),
        None => Ok(SegHeadSpec {
            num_classes: k,
            ..SegHeadSpec::default()
        }),
    }
}

fn write_overlays(run: &mut Run, model: &SegModel, data: &dyn SegmentationSource, ids: &[String], indices: &[usize], table: &ColorCodeTable, r: &Resolved) -> Outcome {
    for &i in indices.iter().take(r.config.eval.overlays) {
        let pair = data.load(i)?;
        let map = match r.config.eval.tile {
            Some(t) => model.predict_sliding(&pair.image, t, r.config.eval.overlap)?,
            None => model.predict_mask(&pair.image)?,
        };
        let overlay = geopretrain_core::dataset::encode_mask(&map, table)?;
        let name = format!("{}_pred.png", ids[i]);
        run.write(&format!("overlay:{}", ids[i]), &name, &png_bytes(&overlay)?)?;
    }
    Ok(())
}

fn per_class_seg_csv(names: &[String], s: &SegScores) -> String {
    let mut out = String::from("class,f1,IoU,accuracy\n");
    for (k, name) in names.iter().enumerate() {
        out.push_str(&format!(
            "{name},{},{},{}\n",
            pct(s.per_class_f1[k]),
            pct(s.per_class_iou[k]),
            pct(s.per_class_accuracy[k])
        ));
    }
    out
}

fn finetune_seg(run: &mut Run, r: &Resolved, pretrained: &Checkpoint, spec: &BackboneSpec, t: &SegTrainConfig) -> Outcome {
    let ds = &r.config.dataset;
    let table = inputs::color_table(ds)?;
    let data = inputs::segmentation(ds, &table, r.seeds.data)?;
    let source = data.as_source();
    if source.num_classes() != table.len() {
        return Err(invalid(format!(
            "dataset has {} classes but the color table has {}",
            source.num_classes(),
            table.len()
        )));
    }
    let head = head_spec(r, spec, source.num_classes())?;
    let mut model = SegModel::new(spec, &head, r.seeds.model)?;
    model.normalization = pretrained.meta.normalization.clone();
    let name = display_name(r, pretrained);
    let out = finetune_segmentation(&model, source, Some(pretrained), t)?;

    let mut ckpt = out.checkpoint;
    ckpt.meta.parent_checksum = Some(run.manifest.provenance[0].sha256.clone());
    ckpt.meta.extra.insert("display_name".into(), json!(name));
    run.write("history", "history.csv", seg_history_csv(&out.history).as_bytes())?;
    run.save_checkpoint("checkpoint", "seg.ckpt", &ckpt)?;
    write_row(run, "results.csv", SEG_RESULTS_HEADER, &name, &seg_row(&name, &out.final_scores))?;
    run.write("per_class", "per_class.csv", per_class_seg_csv(&table.names(), &out.final_scores).as_bytes())?;
    write_overlays(run, &model, source, &data.ids(), &out.split.eval, &table, r)?;
    Ok(())
}

fn backend(r: &Resolved) -> Outcome<Box<dyn DetectorBackend>> {
    let mut settings = BTreeMap::new();
    if let Some(c) = &r.config.model.detector_command {
        settings.insert("command".to_string(), c.clone());
    }
    Ok(BackendRegistry::default().create(&r.config.model.detector, &settings)?)
}

fn backend_options(r: &Resolved, num_classes: usize) -> BackendOptions {
    let o = &r.config.model.detector_options;
    BackendOptions {
        num_classes,
        momentum: o.momentum,
        weight_decay: o.weight_decay,
        min_size: o.min_size,
        max_size: o.max_size,
        trainable_stages: o.trainable_stages,
        seed: r.seeds.model,
    }
}

fn predictions_json(samples: &[DetSample], names: &[String], preds: Vec<geopretrain_core::dataset::DetectionRecord>) -> String {
    AnnotationSet {
        images: samples
            .iter()
            .map(|s| ImageInfo {
                id: s.image_id.clone(),
                file_name: s
                    .path
                    .as_ref()
                    .and_then(|p| p.file_name())
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                width: s.width,
                height: s.height,
            })
            .collect(),
        categories: names
            .iter()
            .enumerate()
            .map(|(i, n)| Category {
                id: i as i64 + 1,
                name: n.clone(),
            })
            .collect(),
        records: preds,
    }
    .to_json()
}

fn write_det_scores(
    run: &mut Run,
    name: &str,
    data: &inputs::DetectionData,
    scored: geopretrain_nn::detection::DetScores,
) -> Outcome {
    let table = ap_table_csv(&[(name.to_string(), scored.summary)]);
    let row = table.lines().nth(1).expect("one row");
    write_row(run, "results.csv", DET_RESULTS_HEADER, name, row)?;
    let per_class = per_class_csv(&data.class_names, &[(name.to_string(), scored.per_class_ap)]);
    let header = per_class.lines().next().expect("header").to_string();
    let row = per_class.lines().nth(1).expect("one row");
    write_row(run, "per_class_ap.csv", &header, name, row)?;
    run.write(
        "predictions",
        "predictions.json",
        predictions_json(&data.eval, &data.class_names, scored.predictions).as_bytes(),
    )?;
    Ok(())
}

fn finetune_det(run: &mut Run, r: &Resolved, pretrained: &Checkpoint, t: &DetTrainConfig) -> Outcome {
    let (converted, report) = export_detection_backbone(pretrained, r.seeds.model)?;
    run.write("conversion", "conversion.txt", report.to_text().as_bytes())?;
    let data = inputs::detection(&r.config.dataset, r.config.eval.eval_fraction, r.seeds.data, &run.path("images"))?;
    let k = data.class_names.len();
    let mut backend = backend(r)?;
    let name = display_name(r, pretrained);
    let out = finetune_detection(backend.as_mut(), &converted, &backend_options(r, k), &data.train, t)?;
    let mut ckpt = out.checkpoint;
    ckpt.meta.parent_checksum = Some(run.manifest.provenance[0].sha256.clone());
    ckpt.meta.extra.insert("display_name".into(), json!(name));
    ckpt.meta.extra.insert("num_classes".into(), json!(k));
    run.write("history", "history.csv", det_history_csv(&out.history).as_bytes())?;
    run.save_checkpoint("checkpoint", "det.ckpt", &ckpt)?;
    let scored = predict_and_score(backend.as_mut(), &data.eval, k, r.config.eval.batch_size)?;
    write_det_scores(run, &name, &data, scored)
}

pub fn evaluate(args: &RunArgs, oracle: bool) -> Outcome {
    let Some((resolved, text)) = prepare(args, Command::Evaluate)? else {
        return Ok(());
    };
    let init = resolved.config.model.init.clone().expect("validated");
    let ckpt = inputs::checkpoint(&init)?;
    check_backbone(&resolved, &ckpt, &init)?;
    let provenance = vec![Provenance::of(&init, &ckpt)?];
    let mut run = Run::start(&args.out, "evaluate", text, Some(resolved.seeds), provenance)?;
    let result = match resolved.config.task.expect("validated") {
        Task::Seg => evaluate_seg(&mut run, &resolved, &ckpt, oracle),
        Task::Det => evaluate_det(&mut run, &resolved, &ckpt, oracle),
    };
    finish(run, result)
}

fn evaluate_seg(run: &mut Run, r: &Resolved, ckpt: &Checkpoint, oracle: bool) -> Outcome {
    let TrainSettings::Seg(t) = &r.train else { unreachable!() };
    let ds = &r.config.dataset;
    let table = inputs::color_table(ds)?;
    let data = inputs::segmentation(ds, &table, r.seeds.data)?;
    let source = data.as_source();
    let model = SegModel::from_checkpoint(ckpt)?;
    if model.num_classes() != source.num_classes() {
        return Err(invalid(format!(
            "checkpoint predicts {} classes, dataset has {}",
            model.num_classes(),
            source.num_classes()
        )));
    }
    let split = deterministic_split(
        source.len(),
        SplitSpec {
            fraction: 1.0 - t.eval_fraction,
            seed: t.seed,
        },
    )?;
    let k = source.num_classes();
    let tile = r.config.eval.tile;
    let overlap = r.config.eval.overlap;
    let maps = parallel_map(&split.eval, r.config.eval.workers, |&i| {
        let pair = source.load(i)?;
        let pred = match tile {
            Some(tl) => model.predict_sliding(&pair.image, tl, overlap)?,
            None => model.predict_mask(&pair.image)?,
        };
        Ok::<_, geopretrain_nn::Error>((pred, pair.mask))
    })?;
    let mut cm = ConfusionMatrix::new(k);
    for (pred, gt) in &maps {
        cm.update(pred, gt)?;
    }
    let s = scores(&cm, t.ignore_class)?;
    if oracle {
        let (mut p, mut g) = (Vec::new(), Vec::new());
        for (pred, gt) in &maps {
            for (a, b) in pred.as_slice().iter().zip(gt.as_slice()) {
                if t.ignore_class.map_or(true, |c| *a != c && *b != c) {
                    p.push(*a);
                    g.push(*b);
                }
            }
        }
        check_seg_oracle(&s, &p, &g, k, t.ignore_class)?;
        println!("oracle: streaming and brute-force segmentation scores agree");
    }
    let name = display_name(r, ckpt);
    write_row(run, "results.csv", SEG_RESULTS_HEADER, &name, &seg_row(&name, &s))?;
    run.write("per_class", "per_class.csv", per_class_seg_csv(&table.names(), &s).as_bytes())?;
    write_overlays(run, &model, source, &data.ids(), &split.eval, &table, r)
}

/// Compares the streaming scores with exhaustive per-pixel tallies.
fn check_seg_oracle(s: &SegScores, pred: &[u8], gt: &[u8], k: usize, ignore: Option<u8>) -> Outcome {
    if pred.is_empty() {
        return Err(Failure::runtime(anyhow!("oracle: no pixels left to score")));
    }
    // The brute-force tally runs on the reduced class set when one class is
    // ignored, mirroring the streaming path.
    let (pred, gt, k) = match ignore {
        Some(c) => {
            let squeeze = |v: u8| if v > c { v - 1 } else { v };
            (
                pred.iter().map(|&v| squeeze(v)).collect::<Vec<_>>(),
                gt.iter().map(|&v| squeeze(v)).collect::<Vec<_>>(),
                k - 1,
            )
        }
        None => (pred.to_vec(), gt.to_vec(), k),
    };
    let b = brute_seg_scores(&pred, &gt, k)?;
    let pairs = [("PA", s.pa, b.pa), ("f1", s.f1, b.f1), ("mIoU", s.miou, b.miou), ("PA_macro", s.pa_macro, b.pa_macro)];
    for (name, a, o) in pairs {
        if (a - o).abs() > 1e-12 && !(a.is_nan() && o.is_nan()) {
            return Err(Failure::runtime(anyhow!("oracle mismatch on {name}: streaming {a} vs brute force {o}")));
        }
    }
    Ok(())
}

fn evaluate_det(run: &mut Run, r: &Resolved, ckpt: &Checkpoint, oracle: bool) -> Outcome {
    let data = inputs::detection(&r.config.dataset, r.config.eval.eval_fraction, r.seeds.data, &run.path("images"))?;
    let k = data.class_names.len();
    let mut backend = backend(r)?;
    backend.attach(ckpt, &backend_options(r, k))?;
    let scored = predict_and_score(backend.as_mut(), &data.eval, k, r.config.eval.batch_size)?;
    if oracle {
        let gts: Vec<_> = data.eval.iter().map(|s| s.gt.clone()).collect();
        let (brute, _) = brute_detection_eval(&gts, &scored.predictions, k, &EvalParams::default())?;
        for (a, b) in scored.summary.as_array().iter().zip(brute.as_array()) {
            if (a - b).abs() > 1e-12 {
                return Err(Failure::runtime(anyhow!(
                    "oracle mismatch: greedy {:?} vs exhaustive {:?}",
                    scored.summary,
                    brute
                )));
            }
        }
        println!("oracle: greedy and exhaustive AP tables agree");
    }
    let name = display_name(r, ckpt);
    write_det_scores(run, &name, &data, scored)
}

pub fn profile(args: &RunArgs) -> Outcome {
    let Some((resolved, text)) = prepare(args, Command::Profile)? else {
        return Ok(());
    };
    let mut run = Run::start(&args.out, "profile", text, Some(resolved.seeds), Vec::new())?;
    let result = profile_body(&mut run, &resolved);
    finish(run, result)
}

/// Largest share above which a dataset is flagged as imbalanced.
pub const IMBALANCE_SHARE: f64 = 0.5;

fn profile_body(run: &mut Run, r: &Resolved) -> Outcome {
    let ds = &r.config.dataset;
    let (names, counts): (Vec<String>, Vec<u64>) = match ds.kind {
        DatasetKind::Folder => {
            let (d, notes) = inputs::labeled(ds, r.seeds.data)?;
            run.manifest.warnings.extend(notes);
            let inputs::Labeled::Folder(d) = d else { unreachable!() };
            (d.class_names().to_vec(), d.class_counts().iter().map(|&c| c as u64).collect())
        }
        DatasetKind::Segmentation | DatasetKind::Synthetic => {
            let table = inputs::color_table(ds)?;
            let data = inputs::segmentation(ds, &table, r.seeds.data)?;
            let stats = class_pixel_stats(data.as_source())?;
            (table.names(), stats.counts().to_vec())
        }
        DatasetKind::Detection => {
            let set = AnnotationSet::from_json_file(ds.annotations.as_deref().expect("checked"))?;
            let stats = annotation_class_stats(&set.records, set.num_classes())?;
            (set.class_names(), stats.counts)
        }
    };
    let total: u64 = counts.iter().sum();
    let shares: Vec<f64> = counts
        .iter()
        .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
        .collect();
    let max_share = shares.iter().cloned().fold(0.0, f64::max);
    let resolution = match (ds.min_resolution, ds.max_resolution) {
        (Some(a), Some(b)) => Some(resolution_profile(a, b).map_err(|e| invalid(format!("dataset resolution: {e}")))?),
        (None, None) => None,
        _ => return Err(invalid("set both dataset.min_resolution and dataset.max_resolution")),
    };
    let imbalanced = max_share > IMBALANCE_SHARE;

    let mut csv = String::from("class,count,percent\n");
    for ((n, c), s) in names.iter().zip(&counts).zip(&shares) {
        csv.push_str(&format!("{n},{c},{:.2}\n", 100.0 * s));
    }
    let report = json!({
        "dataset": ds.name,
        "classes": names.iter().zip(&counts).zip(&shares).map(|((n, c), s)| json!({"name": n, "count": c, "share": s})).collect::<Vec<_>>(),
        "total": total,
        "mean_resolution_m": resolution,
        "max_share": max_share,
        "imbalanced": imbalanced,
    });
    run.write("classes", "classes.csv", csv.as_bytes())?;
    run.write(
        "profile",
        "profile.json",
        serde_json::to_string_pretty(&report).map_err(Failure::runtime)?.as_bytes(),
    )?;
    print!("{csv}");
    if let Some(m) = resolution {
        println!("mean resolution: {m} m/pixel");
    }
    if imbalanced {
        println!("imbalanced: largest class holds {:.2}% (> {:.0}%)", 100.0 * max_share, 100.0 * IMBALANCE_SHARE);
        run.manifest.warnings.push("class imbalance".into());
    }
    Ok(())
}

/// Converts a pre-trained checkpoint for the detector and writes the
/// conversion report next to it.
pub fn export_backbone(checkpoint: &Path, out: &Path, seed: u64) -> Outcome {
    let ckpt = inputs::checkpoint(checkpoint)?;
    let provenance = vec![Provenance::of(checkpoint, &ckpt)?];
    let mut run = Run::start(out, "export-backbone", String::new(), None, provenance)?;
    let result = (|| {
        let (mut converted, report) = export_detection_backbone(&ckpt, seed)?;
        converted.meta.parent_checksum = Some(file_checksum(checkpoint)?);
        run.save_checkpoint("checkpoint", "det_backbone.ckpt", &converted)?;
        run.write("conversion", "conversion.txt", report.to_text().as_bytes())?;
        println!(
            "{} keys mapped, {} initialized, {} skipped",
            report.mapping.len(),
            report.initialized.len(),
            report.skipped.len()
        );
        Ok(())
    })();
    finish(run, result)
}

/// Writes a generalist checkpoint: either a seeded random initialization or
/// an imported one (see `scripts/import_torchvision_resnet.py`).
pub fn init_generalist(backbone: &str, seed: u64, out: &Path) -> Outcome {
    let spec = BackboneSpec::from_variant(backbone).map_err(|e| invalid(e.to_string()))?;
    let mut ps = ParamStore::cpu(seed);
    Backbone::new(&mut ps, "backbone", &spec)?;
    let mut meta = CheckpointMeta::new(Method::Generalist, "imagenet", backbone);
    meta.normalization = Normalization::default();
    meta.extra.insert("init".into(), json!("random"));
    let ckpt = ps.to_checkpoint(meta)?;
    let sum = ckpt.save(out)?;
    println!("{} {sum}", out.display());
    Ok(())
}

pub fn results_kind(header: &str) -> Option<Task> {
    match header {
        SEG_RESULTS_HEADER => Some(Task::Seg),
        DET_RESULTS_HEADER => Some(Task::Det),
        _ => None,
    }
}

pub use crate::report::report;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsert_replaces_same_model() {
        let a = upsert_row(None, "model,x", "A", "A,1").unwrap();
        let b = upsert_row(Some(&a), "model,x", "B", "B,2").unwrap();
        let c = upsert_row(Some(&b), "model,x", "A", "A,3").unwrap();
        assert_eq!(c, "model,x\nA,3\nB,2\n");
        assert!(upsert_row(Some("other\n"), "model,x", "A", "A,1").is_err());
    }

    #[test]
    fn oracle_check_ignores_class() {
        let pred = [0u8, 1, 2, 2];
        let gt = [0u8, 1, 1, 2];
        let mut cm = ConfusionMatrix::new(3);
        cm.update_slices(&pred, &gt).unwrap();
        let s = scores(&cm, Some(0)).unwrap();
        let keep: Vec<usize> = (0..4).filter(|&i| pred[i] != 0 && gt[i] != 0).collect();
        let p: Vec<u8> = keep.iter().map(|&i| pred[i]).collect();
        let g: Vec<u8> = keep.iter().map(|&i| gt[i]).collect();
        check_seg_oracle(&s, &p, &g, 3, Some(0)).unwrap();
    }
}
