use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use candle_core::{DType, Device, Tensor};
use geopretrain_core::checkpoint::{Checkpoint, CheckpointMeta, Method};
use geopretrain_core::dataset::detection::{BBox, DetectionRecord};
use geopretrain_core::dataset::synthetic::box_scenes;
use geopretrain_core::metrics::ap::EvalParams;
use geopretrain_core::metrics::oracle::brute_detection_eval;
use geopretrain_nn::backbone::{Backbone, BackboneSpec};
use geopretrain_nn::data::images_to_tensor;
use geopretrain_nn::detection::*;
use geopretrain_nn::heads::{Projector, SimSiamDims};
use geopretrain_nn::layers::Mode;
use geopretrain_nn::params::ParamStore;
use geopretrain_nn::Result;
use serde_json::json;

fn pretrained(spec: &BackboneSpec, seed: u64) -> Checkpoint {
    let mut ps = ParamStore::cpu(seed);
    Backbone::new(&mut ps, "backbone", spec).unwrap();
    Projector::new(&mut ps, spec.out_channels(), SimSiamDims::tiny()).unwrap();
    ps.to_checkpoint(CheckpointMeta::new(Method::Simsiam, "patternnet", spec.variant.clone()))
        .unwrap()
}

fn sample(id: &str, boxes: Vec<BBox>, labels: Vec<usize>) -> DetSample {
    DetSample {
        image_id: id.into(),
        path: None,
        width: 512,
        height: 512,
        gt: DetectionRecord::ground_truth(id, boxes, labels),
    }
}

fn fixture() -> Vec<DetSample> {
    vec![
        sample(
            "a",
            vec![BBox::new(10.0, 10.0, 60.0, 60.0), BBox::new(100.0, 100.0, 300.0, 260.0)],
            vec![0, 1],
        ),
        sample("b", vec![BBox::new(0.0, 0.0, 20.0, 20.0)], vec![0]),
        sample(
            "c",
            vec![BBox::new(50.0, 50.0, 150.0, 120.0), BBox::new(300.0, 300.0, 420.0, 500.0)],
            vec![1, 1],
        ),
    ]
}

/// Returns fixed predictions keyed by image id.
struct Fixed {
    preds: BTreeMap<String, DetectionRecord>,
    ckpt: Option<Checkpoint>,
}

impl DetectorBackend for Fixed {
    fn name(&self) -> &str {
        "fixed"
    }
    fn attach(&mut self, ckpt: &Checkpoint, _: &BackendOptions) -> Result<()> {
        self.ckpt = Some(ckpt.clone());
        Ok(())
    }
    fn train_step(&mut self, _: &[DetSample], _: f64) -> Result<f64> {
        Ok(1.0)
    }
    fn predict(&mut self, samples: &[DetSample]) -> Result<Vec<DetectionRecord>> {
        Ok(samples.iter().map(|s| self.preds[&s.image_id].clone()).collect())
    }
    fn export(&mut self) -> Result<Checkpoint> {
        Ok(self.ckpt.clone().unwrap())
    }
}

/// Records the learning rate of every step.
#[derive(Default)]
struct Recorder {
    lrs: Vec<f64>,
    batches: Vec<Vec<String>>,
    ckpt: Option<Checkpoint>,
}

impl DetectorBackend for Recorder {
    fn name(&self) -> &str {
        "recorder"
    }
    fn attach(&mut self, ckpt: &Checkpoint, _: &BackendOptions) -> Result<()> {
        self.ckpt = Some(ckpt.clone());
        Ok(())
    }
    fn train_step(&mut self, batch: &[DetSample], lr: f64) -> Result<f64> {
        self.lrs.push(lr);
        self.batches.push(batch.iter().map(|s| s.image_id.clone()).collect());
        Ok(2.0 - lr)
    }
    fn predict(&mut self, samples: &[DetSample]) -> Result<Vec<DetectionRecord>> {
        Ok(samples.iter().map(|s| DetectionRecord::empty(s.image_id.clone(), true)).collect())
    }
    fn export(&mut self) -> Result<Checkpoint> {
        Ok(self.ckpt.clone().unwrap())
    }
}

#[test]
fn echo_scores_one_and_empty_scores_zero() {
    let data = fixture();
    let mut echo = EchoBackend::default();
    let s = predict_and_score(&mut echo, &data, 2, 2).unwrap().summary;
    assert_eq!((s.ap, s.ap50, s.ap75), (1.0, 1.0, 1.0));

    let mut empty = EmptyBackend::default();
    let s = predict_and_score(&mut empty, &data, 2, 2).unwrap().summary;
    assert_eq!((s.ap, s.ap50, s.ap75), (0.0, 0.0, 0.0));
    assert!(s.ap_s <= 0.0 && s.ap_m <= 0.0 && s.ap_l <= 0.0);
}

#[test]
fn hand_placed_predictions_match_brute_force() {
    let data = fixture();
    let preds = vec![
        DetectionRecord::prediction(
            "a",
            vec![
                BBox::new(12.0, 8.0, 62.0, 58.0),
                BBox::new(110.0, 95.0, 300.0, 250.0),
                BBox::new(400.0, 400.0, 450.0, 450.0),
            ],
            vec![0, 1, 1],
            vec![0.9, 0.8, 0.7],
        ),
        DetectionRecord::prediction("b", vec![BBox::new(2.0, 1.0, 22.0, 19.0)], vec![0], vec![0.4]),
        DetectionRecord::prediction(
            "c",
            vec![
                BBox::new(55.0, 45.0, 150.0, 125.0),
                BBox::new(310.0, 320.0, 420.0, 490.0),
                BBox::new(50.0, 50.0, 150.0, 120.0),
            ],
            vec![1, 1, 0],
            vec![0.95, 0.3, 0.6],
        ),
    ];
    let mut backend = Fixed {
        preds: preds.iter().map(|p| (p.image_id.clone(), p.clone())).collect(),
        ckpt: None,
    };
    let got = predict_and_score(&mut backend, &data, 2, 1).unwrap();
    let gts: Vec<DetectionRecord> = data.iter().map(|s| s.gt.clone()).collect();
    let (oracle, per_class) = brute_detection_eval(&gts, &preds, 2, &EvalParams::default()).unwrap();
    for (a, b) in got.summary.as_array().iter().zip(oracle.as_array()) {
        assert!((a - b).abs() < 1e-12, "{:?} vs {:?}", got.summary, oracle);
    }
    // Per-class AP averaged over thresholds, all-area bucket.
    for k in 0..2 {
        let v: Vec<f64> = per_class.iter().map(|t| t[0][k]).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        assert!((got.per_class_ap[k] - mean).abs() < 1e-12);
    }
    assert!(got.summary.ap > 0.2 && got.summary.ap < 1.0);
}

#[test]
fn conversion_reports_every_key() {
    let src = pretrained(&BackboneSpec::tiny(), 3);
    let (out, report) = export_detection_backbone(&src, 0).unwrap();
    let backbone_keys = src.keys().filter(|k| k.starts_with("backbone.")).count();
    assert_eq!(report.mapping.len(), backbone_keys);
    for (a, b) in &report.mapping {
        assert_eq!(a.strip_prefix("backbone."), b.strip_prefix("det_backbone."));
        assert_eq!(src.arrays[a], out.arrays[b]);
    }
    assert_eq!(report.initialized.len(), 16);
    assert!(report.initialized.iter().all(|k| k.starts_with("head.fpn.")));
    assert!(report.skipped.iter().all(|k| k.starts_with("projector.")));
    assert!(!report.skipped.is_empty());
    assert_eq!(report.mapping.len() + report.initialized.len(), report.target_count);
    assert_eq!(report.target_count, out.len());
    assert_eq!(out.meta.extra["task"], json!("detection"));
    assert!(report.to_text().contains("init head.fpn.lateral.0.weight"));
}

#[test]
fn converted_c5_matches_encoder() {
    let src = pretrained(&BackboneSpec::tiny(), 5);
    let (converted, _) = export_detection_backbone(&src, 0).unwrap();
    let (_ps, encoder, det) = encoder_pair(&src, &converted).unwrap();
    let mut rng = geopretrain_core::seed::rng(9);
    let v: Vec<f32> = (0..2 * 3 * 64 * 96)
        .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng))
        .collect();
    let x = Tensor::from_vec(v, (2, 3, 64, 96), &Device::Cpu).unwrap();
    let a = encoder.forward(&x, Mode::Eval).unwrap();
    let b = det.features(&x).unwrap();
    for (fa, fb) in a.iter().zip(&b) {
        let diff = (fa - fb).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        let scale = fa.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff <= 1e-6 * scale, "{diff} vs {scale}");
    }
}

#[test]
fn missing_stage_is_fatal_and_named() {
    let mut src = pretrained(&BackboneSpec::tiny(), 1);
    src.arrays.retain(|k, _| !k.starts_with("backbone.stage4."));
    let err = export_detection_backbone(&src, 0).unwrap_err().to_string();
    assert!(err.contains("det_backbone.stage4.0.conv1.weight"), "{err}");
    assert!(err.contains("det_backbone.stage4.0.bn3.running_var"), "{err}");
}

#[test]
fn resnet50_pyramid_at_512() {
    let m = DetectionModel::new(&BackboneSpec::resnet50(), 0).unwrap();
    let x = Tensor::zeros((1, 3, 512, 512), DType::F32, &Device::Cpu).unwrap();
    let p = m.forward(&x).unwrap();
    let sizes: Vec<(usize, usize, usize)> = p.iter().map(|t| (t.dims()[1], t.dims()[2], t.dims()[3])).collect();
    assert_eq!(
        sizes,
        vec![(256, 128, 128), (256, 64, 64), (256, 32, 32), (256, 16, 16), (256, 8, 8)]
    );
}

#[test]
fn warmup_schedule_and_history() {
    let (ckpt, _) = export_detection_backbone(&pretrained(&BackboneSpec::tiny(), 2), 0).unwrap();
    let data = fixture();
    let cfg = DetTrainConfig {
        iterations: 250,
        warmup_iterations: 100,
        base_lr: 0.01,
        batch_size: 2,
        ..DetTrainConfig::ost()
    };
    let mut r = Recorder::default();
    let out = finetune_detection(&mut r, &ckpt, &BackendOptions::default(), &data, &cfg).unwrap();
    assert_eq!(r.lrs.len(), 250);
    assert_eq!(r.lrs[0], 0.0);
    assert!((r.lrs[50] - 0.005).abs() < 1e-9);
    assert!(r.lrs[100..].iter().all(|&lr| lr == 0.01));
    // Every sample appears once per pass over the data.
    let mut first: Vec<String> = r.batches[..2].concat();
    first.sort();
    assert_eq!(first, vec!["a", "b", "c"]);
    let iters: Vec<usize> = out.history.iter().map(|h| h.iteration).collect();
    assert_eq!(iters, vec![100, 200, 250]);
    let expect: f64 = r.lrs[..100].iter().map(|lr| 2.0 - lr).sum::<f64>() / 100.0;
    assert!((out.history[0].loss - expect).abs() < 1e-12);
    assert!(det_history_csv(&out.history).starts_with("iteration,loss,lr\n100,"));
}

#[test]
fn zero_iterations_keep_weights() {
    let (ckpt, _) = export_detection_backbone(&pretrained(&BackboneSpec::tiny(), 4), 0).unwrap();
    let cfg = DetTrainConfig {
        iterations: 0,
        ..DetTrainConfig::ost()
    };
    let mut echo = EchoBackend::default();
    let out = finetune_detection(&mut echo, &ckpt, &BackendOptions::default(), &fixture(), &cfg).unwrap();
    assert!(out.history.is_empty());
    assert_eq!(out.checkpoint.arrays, ckpt.arrays);
}

fn fake_backend() -> Box<dyn DetectorBackend> {
    let script = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/fake_backend.py");
    let mut settings = BTreeMap::new();
    settings.insert("command".to_string(), format!("python3 {script}"));
    BackendRegistry::default().create("external", &settings).unwrap()
}

#[test]
fn external_protocol_round_trip() {
    let (ckpt, _) = export_detection_backbone(&pretrained(&BackboneSpec::tiny(), 6), 0).unwrap();
    let mut b = fake_backend();
    let data = fixture();
    let cfg = DetTrainConfig {
        iterations: 3,
        warmup_iterations: 1,
        log_every: 1,
        ..DetTrainConfig::ost()
    };
    let out = finetune_detection(b.as_mut(), &ckpt, &BackendOptions::default(), &data, &cfg).unwrap();
    assert_eq!(out.history.len(), 3);
    assert!(out.history.iter().all(|h| h.loss >= 3.0));
    assert_eq!(out.checkpoint.arrays, ckpt.arrays);
    let scored = predict_and_score(b.as_mut(), &data, 2, 2).unwrap();
    assert_eq!(scored.predictions.len(), 3);
    assert_eq!(scored.predictions[0].boxes[0], BBox::new(0.0, 0.0, 256.0, 256.0));
    assert_eq!(scored.predictions[0].scores.as_deref(), Some(&[0.5][..]));
}

#[test]
fn external_errors_surface() {
    let mut b = fake_backend();
    let err = b.predict(&fixture()).unwrap_err().to_string();
    assert!(err.contains("no checkpoint attached"), "{err}");

    let mut settings = BTreeMap::new();
    settings.insert("command".to_string(), "/nonexistent/detector".to_string());
    let err = BackendRegistry::default().create("external", &settings).err().unwrap().to_string();
    assert!(err.contains("cannot start"), "{err}");
}

fn torchvision_available() -> bool {
    Command::new("python3")
        .args(["-c", "import torch, torchvision"])
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn torchvision_backend() -> ExternalBackend {
    let script = concat!(env!("CARGO_MANIFEST_DIR"), "/../../scripts/torchvision_backend.py");
    ExternalBackend::spawn("torchvision", "python3", &[script.to_string()]).unwrap()
}

fn write_scenes(dir: &Path, n: usize, size: u32, seed: u64) -> Vec<(image::RgbImage, DetSample)> {
    box_scenes(n, size, 2, seed)
        .into_iter()
        .map(|(img, gt)| {
            let path: PathBuf = dir.join(format!("{}.png", gt.image_id));
            img.save(&path).unwrap();
            let s = DetSample {
                image_id: gt.image_id.clone(),
                path: Some(path),
                width: size,
                height: size,
                gt,
            };
            (img, s)
        })
        .collect()
}

#[test]
fn torchvision_backend_sees_the_same_pyramid() {
    if !torchvision_available() {
        eprintln!("skipped: python3 with torch and torchvision not found");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let scenes = write_scenes(dir.path(), 1, 64, 1);
    let (ckpt, _) = export_detection_backbone(&pretrained(&BackboneSpec::tiny(), 8), 3).unwrap();
    let mut b = torchvision_backend();
    b.attach(&ckpt, &BackendOptions { num_classes: 2, min_size: 64, max_size: 64, ..Default::default() })
        .unwrap();
    let reply = b.request(json!({"cmd": "features", "sample": {"path": scenes[0].1.path}})).unwrap();

    let det = DetectionModel::from_checkpoint(&ckpt).unwrap();
    let x = images_to_tensor(&[scenes[0].0.clone()], &det.normalization, DType::F32, &Device::Cpu).unwrap();
    let ours = det.forward(&x).unwrap();
    let levels = reply["levels"].as_array().unwrap();
    assert_eq!(levels.len(), 5);
    for (mine, theirs) in ours.iter().zip(levels) {
        let shape: Vec<usize> = serde_json::from_value(theirs["shape"].clone()).unwrap();
        assert_eq!(mine.dims(), shape.as_slice());
        let data: Vec<f32> = serde_json::from_value(theirs["data"].clone()).unwrap();
        let mine: Vec<f32> = mine.flatten_all().unwrap().to_vec1().unwrap();
        let scale = mine.iter().fold(0f32, |m, v| m.max(v.abs()));
        let diff = mine.iter().zip(&data).fold(0f32, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff <= 1e-4 * scale, "diff {diff} scale {scale}");
    }
}

#[test]
fn torchvision_backend_trains_and_exports() {
    if !torchvision_available() {
        eprintln!("skipped: python3 with torch and torchvision not found");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let data: Vec<DetSample> = write_scenes(dir.path(), 6, 128, 2).into_iter().map(|(_, s)| s).collect();
    let (ckpt, _) = export_detection_backbone(&pretrained(&BackboneSpec::tiny(), 9), 1).unwrap();
    let opts = BackendOptions {
        num_classes: 2,
        min_size: 128,
        max_size: 128,
        ..Default::default()
    };

    let mut b = torchvision_backend();
    let zero = DetTrainConfig {
        iterations: 0,
        ..DetTrainConfig::ost()
    };
    let out = finetune_detection(&mut b, &ckpt, &opts, &data, &zero).unwrap();
    for (k, v) in &ckpt.arrays {
        assert_eq!(&out.checkpoint.arrays[k], v, "{k}");
    }
    assert!(out.checkpoint.keys().any(|k| k.starts_with("head.roi_heads.")));

    let cfg = DetTrainConfig {
        iterations: 4,
        warmup_iterations: 2,
        log_every: 2,
        ..DetTrainConfig::ost()
    };
    let out = finetune_detection(&mut b, &ckpt, &opts, &data, &cfg).unwrap();
    assert_eq!(out.history.len(), 2);
    assert!(out.history.iter().all(|h| h.loss.is_finite() && h.loss > 0.0));
    let changed = |prefix: &str| {
        ckpt.arrays
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .any(|(k, v)| &out.checkpoint.arrays[k] != v)
    };
    assert!(changed("det_backbone.stage4."));
    assert!(changed("head.fpn."));
    assert!(!changed("det_backbone.stem."));
    assert!(!changed("det_backbone.stage1."));

    // The exported checkpoint attaches again, heads included.
    let mut again = torchvision_backend();
    again.attach(&out.checkpoint, &opts).unwrap();
    let scored = predict_and_score(&mut again, &data, 2, 3).unwrap();
    assert_eq!(scored.predictions.len(), 6);
    assert!((0.0..=1.0).contains(&scored.summary.ap));
}
