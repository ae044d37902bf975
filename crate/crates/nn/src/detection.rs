//! Feature-pyramid export and the detector backend interface.
//!
//! Region proposal and box heads live behind [`DetectorBackend`]. The crate
//! ships two in-process backends for checking the evaluation path (`echo`,
//! `empty`) and an `external` backend that talks JSON lines to a subprocess.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use candle_core::Tensor;
use geopretrain_core::checkpoint::{transplant_backbone, Checkpoint, Normalization, TransplantMode};
use geopretrain_core::dataset::detection::{BBox, DetectionRecord};
use geopretrain_core::metrics::ap::{evaluate_detections, ApSummary, DetectionEval, EvalParams};
use geopretrain_core::schedule::{LrSchedule, WarmupConstant};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::backbone::{Backbone, BackboneSpec};
use crate::data::epoch_batches;
use crate::layers::{no_grad, Conv2d, ConvCfg, Mode};
use crate::params::{Init, ParamKind, ParamStore};
use crate::train::{check_finite, load_backbone};
use crate::{Error, Result};

pub const DET_PREFIX: &str = "det_backbone";
pub const FPN_PREFIX: &str = "head.fpn";
pub const FPN_CHANNELS: usize = 256;

/// Lateral 1x1 and output 3x3 convolutions over C2..C5, plus P6 as a
/// stride-2 subsample of P5.
pub struct Fpn {
    lateral: Vec<Conv2d>,
    output: Vec<Conv2d>,
}

fn fpn_conv(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize) -> Result<Conv2d> {
    // Uniform with bound sqrt(3 / fan_in), zero bias.
    let bound = (3.0 / (cin * k * k) as f64).sqrt();
    ps.get_or_init(&format!("{name}.weight"), &[cout, cin, k, k], Init::Uniform { bound }, ParamKind::Weight)?;
    Conv2d::new(ps, name, cin, cout, ConvCfg::k(k).bias())
}

impl Fpn {
    pub fn new(ps: &mut ParamStore, in_channels: &[usize; 4], channels: usize) -> Result<Self> {
        let mut lateral = Vec::with_capacity(4);
        let mut output = Vec::with_capacity(4);
        for (i, &c) in in_channels.iter().enumerate() {
            lateral.push(fpn_conv(ps, &format!("{FPN_PREFIX}.lateral.{i}"), c, channels, 1)?);
            output.push(fpn_conv(ps, &format!("{FPN_PREFIX}.output.{i}"), channels, channels, 3)?);
        }
        Ok(Self { lateral, output })
    }

    /// `[C2, C3, C4, C5]` to `[P2, P3, P4, P5, P6]`.
    pub fn forward(&self, feats: &[Tensor]) -> Result<Vec<Tensor>> {
        if feats.len() != 4 {
            return Err(Error::Shape(format!("FPN expects 4 input maps, got {}", feats.len())));
        }
        let mut inner = self.lateral[3].forward(&feats[3])?;
        let mut outs = vec![self.output[3].forward(&inner)?];
        for i in (0..3).rev() {
            let (_, _, h, w) = feats[i].dims4()?;
            let up = inner.upsample_nearest2d(h, w)?;
            inner = (self.lateral[i].forward(&feats[i])? + up)?;
            outs.insert(0, self.output[i].forward(&inner)?);
        }
        let p5 = &outs[3];
        let (_, _, h, w) = p5.dims4()?;
        let p6 = p5.max_pool2d_with_stride((1, 1), (2, 2))?;
        debug_assert_eq!(p6.dims()[2], h.div_ceil(2));
        debug_assert_eq!(p6.dims()[3], w.div_ceil(2));
        outs.push(p6);
        Ok(outs)
    }
}

/// Backbone under `det_backbone.` plus an FPN under `head.fpn.`.
pub struct DetectionModel {
    pub ps: ParamStore,
    pub backbone: Backbone,
    pub fpn: Fpn,
    pub normalization: Normalization,
}

impl DetectionModel {
    pub fn new(spec: &BackboneSpec, seed: u64) -> Result<Self> {
        Self::in_store(ParamStore::cpu(seed), spec)
    }

    pub fn in_store(mut ps: ParamStore, spec: &BackboneSpec) -> Result<Self> {
        let backbone = Backbone::new(&mut ps, DET_PREFIX, spec)?;
        let fpn = Fpn::new(&mut ps, &spec.stage_channels, FPN_CHANNELS)?;
        Ok(Self {
            ps,
            backbone,
            fpn,
            normalization: Normalization::default(),
        })
    }

    /// Builds the model and fills it from a converted checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let spec = BackboneSpec::from_variant(&ckpt.meta.backbone)?;
        let mut model = Self::new(&spec, 0)?;
        model.ps.load_complete(ckpt)?;
        model.normalization = ckpt.meta.normalization.clone();
        Ok(model)
    }

    /// `[C2, C3, C4, C5]`.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        no_grad(|| self.backbone.forward(x, Mode::Eval))
    }

    /// `[P2, P3, P4, P5, P6]`.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        no_grad(|| self.fpn.forward(&self.features(x)?))
    }
}

/// Key mapping produced by [`export_detection_backbone`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConversionReport {
    /// `(source key, target key)`.
    pub mapping: Vec<(String, String)>,
    /// Target keys with fresh weights (the FPN).
    pub initialized: Vec<String>,
    /// Source keys outside the backbone namespace, left behind.
    pub skipped: Vec<String>,
    pub target_count: usize,
}

impl ConversionReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (a, b) in &self.mapping {
            s.push_str(&format!("map {a} -> {b}\n"));
        }
        for k in &self.initialized {
            s.push_str(&format!("init {k}\n"));
        }
        for k in &self.skipped {
            s.push_str(&format!("skip {k}\n"));
        }
        s
    }
}

/// Renames the backbone of `ckpt` into `det_backbone.` and adds freshly
/// initialized FPN weights. Every target backbone key must be present in
/// the source.
pub fn export_detection_backbone(ckpt: &Checkpoint, seed: u64) -> Result<(Checkpoint, ConversionReport)> {
    let spec = BackboneSpec::from_variant(&ckpt.meta.backbone)?;
    let model = DetectionModel::new(&spec, seed)?;
    let mut meta = ckpt.meta.clone();
    meta.extra.insert("task".into(), json!("detection"));
    let target = model.ps.to_checkpoint(meta)?;
    let (out, report) = transplant_backbone(ckpt, &target, TransplantMode::Strict)?;
    let report = ConversionReport {
        target_count: out.len(),
        mapping: report.matched,
        initialized: report.newly_initialized,
        skipped: report.skipped,
    };
    Ok((out, report))
}

/// One training or evaluation image.
#[derive(Debug, Clone, PartialEq)]
pub struct DetSample {
    pub image_id: String,
    /// Image file, for backends that read pixels.
    pub path: Option<PathBuf>,
    pub width: u32,
    pub height: u32,
    pub gt: DetectionRecord,
}

/// Settings passed to a backend when it attaches to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendOptions {
    pub num_classes: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Shorter-side resize target used by the detector.
    pub min_size: u32,
    pub max_size: u32,
    pub trainable_stages: usize,
    pub seed: u64,
}

impl Default for BackendOptions {
    fn default() -> Self {
        Self {
            num_classes: 1,
            momentum: 0.9,
            weight_decay: 1e-4,
            min_size: 512,
            max_size: 512,
            trainable_stages: 3,
            seed: 0,
        }
    }
}

pub trait DetectorBackend {
    fn name(&self) -> &str;

    /// Loads a converted checkpoint (`det_backbone.` and `head.fpn.` keys).
    fn attach(&mut self, ckpt: &Checkpoint, options: &BackendOptions) -> Result<()>;

    /// One optimizer step on `batch`; returns the total loss.
    fn train_step(&mut self, batch: &[DetSample], lr: f64) -> Result<f64>;

    /// Scored predictions, one record per sample.
    fn predict(&mut self, samples: &[DetSample]) -> Result<Vec<DetectionRecord>>;

    /// Current weights as a checkpoint.
    fn export(&mut self) -> Result<Checkpoint>;
}

fn attached(ckpt: &Option<Checkpoint>, name: &str) -> Result<Checkpoint> {
    ckpt.clone()
        .ok_or_else(|| Error::Backend(format!("{name}: no checkpoint attached")))
}

/// Returns the ground truth with score 1. Never learns.
#[derive(Default)]
pub struct EchoBackend {
    ckpt: Option<Checkpoint>,
}

impl DetectorBackend for EchoBackend {
    fn name(&self) -> &str {
        "echo"
    }

    fn attach(&mut self, ckpt: &Checkpoint, _: &BackendOptions) -> Result<()> {
        self.ckpt = Some(ckpt.clone());
        Ok(())
    }

    fn train_step(&mut self, _: &[DetSample], _: f64) -> Result<f64> {
        Ok(0.0)
    }

    fn predict(&mut self, samples: &[DetSample]) -> Result<Vec<DetectionRecord>> {
        Ok(samples
            .iter()
            .map(|s| {
                let n = s.gt.boxes.len();
                DetectionRecord::prediction(s.image_id.clone(), s.gt.boxes.clone(), s.gt.labels.clone(), vec![1.0; n])
            })
            .collect())
    }

    fn export(&mut self) -> Result<Checkpoint> {
        attached(&self.ckpt, "echo")
    }
}

/// Predicts nothing.
#[derive(Default)]
pub struct EmptyBackend {
    ckpt: Option<Checkpoint>,
}

impl DetectorBackend for EmptyBackend {
    fn name(&self) -> &str {
        "empty"
    }

    fn attach(&mut self, ckpt: &Checkpoint, _: &BackendOptions) -> Result<()> {
        self.ckpt = Some(ckpt.clone());
        Ok(())
    }

    fn train_step(&mut self, _: &[DetSample], _: f64) -> Result<f64> {
        Ok(0.0)
    }

    fn predict(&mut self, samples: &[DetSample]) -> Result<Vec<DetectionRecord>> {
        Ok(samples.iter().map(|s| DetectionRecord::empty(s.image_id.clone(), true)).collect())
    }

    fn export(&mut self) -> Result<Checkpoint> {
        attached(&self.ckpt, "empty")
    }
}

/// A subprocess speaking one JSON object per line.
///
/// Requests carry a `cmd` field (`attach`, `train_step`, `predict`,
/// `export`, `shutdown`); replies carry `ok` and either the result fields or
/// `error`. Checkpoints travel as archive files in a scratch directory.
pub struct ExternalBackend {
    name: String,
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
    scratch: tempfile::TempDir,
}

impl ExternalBackend {
    pub fn spawn(name: &str, program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Backend(format!("cannot start `{program}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let scratch = tempfile::tempdir().map_err(|e| Error::Backend(format!("scratch directory: {e}")))?;
        Ok(Self {
            name: name.to_string(),
            child,
            stdin,
            stdout,
            scratch,
        })
    }

    fn call(&mut self, request: Value) -> Result<Value> {
        let cmd = request["cmd"].as_str().unwrap_or("?").to_string();
        let fail = |e: String| Error::Backend(format!("{cmd}: {e}"));
        let mut line = serde_json::to_string(&request).map_err(|e| fail(e.to_string()))?;
        line.push('\n');
        self.stdin.write_all(line.as_bytes()).map_err(|e| fail(e.to_string()))?;
        self.stdin.flush().map_err(|e| fail(e.to_string()))?;
        let mut reply = String::new();
        let n = self.stdout.read_line(&mut reply).map_err(|e| fail(e.to_string()))?;
        if n == 0 {
            return Err(fail("backend process closed its output".into()));
        }
        let value: Value = serde_json::from_str(&reply).map_err(|e| fail(format!("bad reply `{}`: {e}", reply.trim())))?;
        if value["ok"].as_bool() != Some(true) {
            let msg = value["error"].as_str().unwrap_or("unspecified error");
            return Err(fail(msg.to_string()));
        }
        Ok(value)
    }

    fn sample_json(s: &DetSample, with_targets: bool) -> Value {
        let mut v = json!({
            "image_id": s.image_id,
            "path": s.path,
            "width": s.width,
            "height": s.height,
        });
        if with_targets {
            v["boxes"] = json!(s.gt.boxes.iter().map(|b| [b.x_min, b.y_min, b.x_max, b.y_max]).collect::<Vec<_>>());
            v["labels"] = json!(s.gt.labels);
        }
        v
    }

    /// Sends an arbitrary request; used for backend-specific probes.
    pub fn request(&mut self, request: Value) -> Result<Value> {
        self.call(request)
    }
}

#[derive(Deserialize)]
struct WireDetections {
    image_id: String,
    boxes: Vec<[f64; 4]>,
    labels: Vec<usize>,
    scores: Vec<f64>,
}

impl DetectorBackend for ExternalBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn attach(&mut self, ckpt: &Checkpoint, options: &BackendOptions) -> Result<()> {
        let path = self.scratch.path().join("attach.ckpt");
        ckpt.save(&path)?;
        self.call(json!({"cmd": "attach", "checkpoint": path, "options": options}))?;
        Ok(())
    }

    fn train_step(&mut self, batch: &[DetSample], lr: f64) -> Result<f64> {
        let samples: Vec<Value> = batch.iter().map(|s| Self::sample_json(s, true)).collect();
        let reply = self.call(json!({"cmd": "train_step", "lr": lr, "samples": samples}))?;
        reply["loss"]
            .as_f64()
            .ok_or_else(|| Error::Backend("train_step: reply has no numeric `loss`".into()))
    }

    fn predict(&mut self, samples: &[DetSample]) -> Result<Vec<DetectionRecord>> {
        let wire: Vec<Value> = samples.iter().map(|s| Self::sample_json(s, false)).collect();
        let reply = self.call(json!({"cmd": "predict", "samples": wire}))?;
        let dets: Vec<WireDetections> = serde_json::from_value(reply["detections"].clone())
            .map_err(|e| Error::Backend(format!("predict: {e}")))?;
        Ok(dets
            .into_iter()
            .map(|d| {
                let boxes = d.boxes.iter().map(|b| BBox::new(b[0], b[1], b[2], b[3])).collect();
                DetectionRecord::prediction(d.image_id, boxes, d.labels, d.scores)
            })
            .collect())
    }

    fn export(&mut self) -> Result<Checkpoint> {
        let path = self.scratch.path().join("export.ckpt");
        self.call(json!({"cmd": "export", "path": path}))?;
        Ok(Checkpoint::load(&path)?)
    }
}

impl Drop for ExternalBackend {
    fn drop(&mut self) {
        let _ = writeln!(self.stdin, "{}", json!({"cmd": "shutdown"}));
        let _ = self.stdin.flush();
        let _ = self.child.wait();
    }
}

type Factory = Box<dyn Fn(&BTreeMap<String, String>) -> Result<Box<dyn DetectorBackend>> + Send + Sync>;

/// Named backend constructors. `echo` and `empty` are built in; `external`
/// needs a `command` setting (program followed by arguments, space
/// separated).
pub struct BackendRegistry {
    factories: BTreeMap<String, Factory>,
}

impl Default for BackendRegistry {
    fn default() -> Self {
        let mut r = Self {
            factories: BTreeMap::new(),
        };
        r.register("echo", |_| Ok(Box::new(EchoBackend::default())));
        r.register("empty", |_| Ok(Box::new(EmptyBackend::default())));
        r.register("external", |settings| {
            let command = settings.get("command").ok_or_else(|| {
                Error::config("the external detector backend needs `command`, e.g. \"python3 scripts/torchvision_backend.py\"")
            })?;
            let mut parts = command.split_whitespace().map(String::from);
            let program = parts.next().ok_or_else(|| Error::config("empty backend command"))?;
            let args: Vec<String> = parts.collect();
            Ok(Box::new(ExternalBackend::spawn("external", &program, &args)?))
        });
        r
    }
}

impl BackendRegistry {
    pub fn register(
        &mut self,
        name: &str,
        factory: impl Fn(&BTreeMap<String, String>) -> Result<Box<dyn DetectorBackend>> + Send + Sync + 'static,
    ) {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn names(&self) -> Vec<String> {
        self.factories.keys().cloned().collect()
    }

    pub fn create(&self, name: &str, settings: &BTreeMap<String, String>) -> Result<Box<dyn DetectorBackend>> {
        match self.factories.get(name) {
            Some(f) => f(settings),
            None => Err(Error::BackendMissing {
                name: name.to_string(),
                available: self.names(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_iterations: usize,
    pub seed: u64,
    /// Iterations per history row.
    pub log_every: usize,
}

impl Default for DetTrainConfig {
    fn default() -> Self {
        Self::ost()
    }
}

impl DetTrainConfig {
    /// 5000 iterations, batch 2, lr 0.01, 500 warm-up iterations.
    pub fn ost() -> Self {
        Self {
            iterations: 5000,
            batch_size: 2,
            base_lr: 0.01,
            warmup_iterations: 500,
            seed: 0,
            log_every: 100,
        }
    }

    /// 2000 iterations, batch 2, lr 0.015, 300 warm-up iterations.
    pub fn dior() -> Self {
        Self {
            iterations: 2000,
            base_lr: 0.015,
            warmup_iterations: 300,
            ..Self::ost()
        }
    }

    /// A zero-iteration run is allowed and leaves the weights untouched.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::config("batch_size and log_every must be positive"));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if self.iterations > 0 && self.warmup_iterations >= self.iterations {
            return Err(Error::config(format!(
                "warmup_iterations ({}) must be below iterations ({})",
                self.warmup_iterations, self.iterations
            )));
        }
        Ok(())
    }

    pub fn schedule(&self) -> WarmupConstant {
        WarmupConstant {
            base_lr: self.base_lr,
            warmup: self.warmup_iterations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetLog {
    /// Iterations completed.
    pub iteration: usize,
    /// Mean loss over the logged window.
    pub loss: f64,
    pub lr: f64,
}

pub fn det_history_csv(history: &[DetLog]) -> String {
    let mut s = String::from("iteration,loss,lr\n");
    for h in history {
        s.push_str(&format!(
            "{},{},{}\n",
            h.iteration,
            crate::train::fmt_f64(h.loss),
            crate::train::fmt_f64(h.lr)
        ));
    }
    s
}

pub struct DetOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<DetLog>,
}

/// Attaches `ckpt` to the backend and runs `cfg.iterations` steps over
/// seeded shuffles of `samples`.
pub fn finetune_detection(
    backend: &mut dyn DetectorBackend,
    ckpt: &Checkpoint,
    options: &BackendOptions,
    samples: &[DetSample],
    cfg: &DetTrainConfig,
) -> Result<DetOutcome> {
    cfg.validate()?;
    if cfg.iterations > 0 && samples.is_empty() {
        return Err(Error::config("no training samples"));
    }
    backend.attach(ckpt, options)?;
    let schedule = cfg.schedule();
    let indices: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::new();
    let mut window = (0.0, 0usize);
    let mut epoch = 0;
    let mut queue: Vec<Vec<usize>> = Vec::new();
    for it in 0..cfg.iterations {
        if queue.is_empty() {
            queue = epoch_batches(&indices, cfg.batch_size, cfg.seed, epoch, false);
            queue.reverse();
            epoch += 1;
        }
        let batch: Vec<DetSample> = queue.pop().expect("refilled").iter().map(|&i| samples[i].clone()).collect();
        let lr = schedule.lr(it);
        let loss = backend.train_step(&batch, lr)?;
        check_finite(loss, it)?;
        window.0 += loss;
        window.1 += 1;
        if (it + 1) % cfg.log_every == 0 || it + 1 == cfg.iterations {
            history.push(DetLog {
                iteration: it + 1,
                loss: window.0 / window.1 as f64,
                lr,
            });
            log::info!("det iter {} loss {:.4} lr {:.5}", it + 1, window.0 / window.1 as f64, lr);
            window = (0.0, 0);
        }
    }
    let mut checkpoint = backend.export()?;
    checkpoint.meta.extra.insert("task".into(), json!("detection"));
    checkpoint.meta.extra.insert("iterations".into(), json!(cfg.iterations));
    Ok(DetOutcome { checkpoint, history })
}

pub struct DetScores {
    pub predictions: Vec<DetectionRecord>,
    pub eval: DetectionEval,
    pub summary: ApSummary,
    pub per_class_ap: Vec<f64>,
}

/// Runs the backend on `samples` in chunks of `batch` and scores the
/// predictions against their ground truth.
pub fn predict_and_score(
    backend: &mut dyn DetectorBackend,
    samples: &[DetSample],
    num_classes: usize,
    batch: usize,
) -> Result<DetScores> {
    let mut predictions = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let got = backend.predict(chunk)?;
        if got.len() != chunk.len() {
            return Err(Error::Backend(format!(
                "{}: {} predictions for {} images",
                backend.name(),
                got.len(),
                chunk.len()
            )));
        }
        predictions.extend(got);
    }
    let gts: Vec<DetectionRecord> = samples.iter().map(|s| s.gt.clone()).collect();
    let eval = evaluate_detections(&gts, &predictions, num_classes, &EvalParams::default())?;
    let summary = eval.summary();
    let per_class_ap = eval.per_class_ap();
    Ok(DetScores {
        predictions,
        eval,
        summary,
        per_class_ap,
    })
}

/// `model,AP,AP50,AP75,APs,APm,APl` rows, values in percent.
pub fn ap_table_csv(rows: &[(String, ApSummary)]) -> String {
    let mut s = String::from("model,AP,AP50,AP75,APs,APm,APl\n");
    for (name, a) in rows {
        let v = a.as_array().map(|x| if x < 0.0 { "nan".to_string() } else { format!("{:.2}", 100.0 * x) });
        s.push_str(&format!("{name},{}\n", v.join(",")));
    }
    s
}

/// One row per model, one column per class name, AP in percent.
pub fn per_class_csv(class_names: &[String], rows: &[(String, Vec<f64>)]) -> String {
    let mut s = format!("model,{}\n", class_names.join(","));
    for (name, aps) in rows {
        let v: Vec<String> = aps
            .iter()
            .map(|&x| if x < 0.0 { "nan".to_string() } else { format!("{:.2}", 100.0 * x) })
            .collect();
        s.push_str(&format!("{name},{}\n", v.join(",")));
    }
    s
}

/// Source checkpoint C5 versus converted checkpoint C5: the pair of models
/// used to check that conversion preserves activations.
pub fn encoder_pair(source: &Checkpoint, converted: &Checkpoint) -> Result<(ParamStore, Backbone, DetectionModel)> {
    let spec = BackboneSpec::from_variant(&source.meta.backbone)?;
    let mut ps = ParamStore::cpu(0);
    let bb = Backbone::new(&mut ps, "backbone", &spec)?;
    load_backbone(&ps, source, TransplantMode::Strict)?;
    Ok((ps, bb, DetectionModel::from_checkpoint(converted)?))
}

pub fn samples_from_records(records: &[DetectionRecord], images: &[(u32, u32, Option<PathBuf>)]) -> Vec<DetSample> {
    records
        .iter()
        .zip(images)
        .map(|(r, (w, h, p))| DetSample {
            image_id: r.image_id.clone(),
            path: p.clone(),
            width: *w,
            height: *h,
            gt: r.clone(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn pyramid_sizes_halve() {
        let m = DetectionModel::new(&BackboneSpec::tiny(), 0).unwrap();
        let x = Tensor::zeros((1, 3, 128, 96), DType::F32, &Device::Cpu).unwrap();
        let p = m.forward(&x).unwrap();
        let dims: Vec<_> = p.iter().map(|t| t.dims().to_vec()).collect();
        assert_eq!(
            dims,
            vec![
                vec![1, 256, 32, 24],
                vec![1, 256, 16, 12],
                vec![1, 256, 8, 6],
                vec![1, 256, 4, 3],
                vec![1, 256, 2, 2]
            ]
        );
    }

    #[test]
    fn config_rules() {
        DetTrainConfig::ost().validate().unwrap();
        DetTrainConfig::dior().validate().unwrap();
        let zero = DetTrainConfig { iterations: 0, ..DetTrainConfig::ost() };
        zero.validate().unwrap();
        let bad = DetTrainConfig { iterations: 500, ..DetTrainConfig::ost() };
        assert!(bad.validate().is_err());
        let s = DetTrainConfig::ost().schedule();
        assert!((s.lr(250) - 0.005).abs() < 1e-9);
    }

    #[test]
    fn registry_lists_builtins_on_miss() {
        let r = BackendRegistry::default();
        let err = r.create("mmdet", &BTreeMap::new()).err().unwrap().to_string();
        assert!(err.contains("`mmdet`") && err.contains("echo, empty, external"), "{err}");
        assert!(r.create("external", &BTreeMap::new()).is_err());
    }
}
