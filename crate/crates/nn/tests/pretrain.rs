use geopretrain_core::augment::{AugmentOp, AugmentSpec};
use geopretrain_core::dataset::synthetic::{separable_classification, textured_images};
use geopretrain_nn::backbone::BackboneSpec;
use geopretrain_nn::heads::SimSiamDims;
use geopretrain_nn::simsiam::{collapse_threshold, train_simsiam, SimSiamConfig, SimSiamModel};
use geopretrain_nn::supervised::{evaluate_accuracy, train_supervised, Classifier, SupTrainConfig};

#[test]
fn supervised_toy_reaches_high_train_accuracy() {
    let data = separable_classification(4, 16, 32, 3);
    let model = Classifier::new(&BackboneSpec::tiny(), 4, 3).unwrap();
    let cfg = SupTrainConfig {
        batch_size: 16,
        epochs: 50,
        peak_lr: 5e-3,
        seed: 3,
        max_steps: Some(200),
        ..Default::default()
    };
    let out = train_supervised(&model, &data, None, "toy", &cfg).unwrap();
    assert_eq!(out.steps, 200);
    assert_eq!(out.history.len(), 50);
    let acc = evaluate_accuracy(&model, &data, &out.split.train, &AugmentSpec::identity(), 32, 1).unwrap();
    eprintln!("train acc {} eval {}", acc.global, out.best_eval.global);
    assert!(acc.global >= 0.9, "train accuracy {}", acc.global);
}

#[test]
fn simsiam_toy_loss_drops_without_collapse() {
    let data = textured_images(64, 48, 5);
    let model = SimSiamModel::new(&BackboneSpec::tiny(), SimSiamDims::tiny(), 5).unwrap();
    let cfg = SimSiamConfig {
        batch_size: 16,
        base_lr: 0.1,
        scale_lr: false,
        epochs: 50,
        milestones: Some(vec![]),
        view_size: 32,
        seed: 5,
        augment: Some(toy_views(5)),
        ..Default::default()
    };
    let out = train_simsiam(&model, &data, None, "toy", &cfg).unwrap();
    for h in &out.history {
        eprintln!("{} {:.4} {:.4}", h.epoch, h.loss, h.collapse_metric);
    }
    assert_eq!(out.steps, 200);
    let first = out.history.first().unwrap().loss;
    let last = out.history.last().unwrap().loss;
    assert!(first > -0.3, "first epoch loss {first}");
    assert!(last <= -0.5, "last epoch loss {last}");
    let thr = collapse_threshold(model.dims.out);
    assert!(out.history.iter().all(|h| h.collapse_metric > thr));
}

fn toy_views(seed: u64) -> AugmentSpec {
    AugmentSpec {
        ops: vec![
            AugmentOp::ResizedCrop {
                size: 32,
                scale: [0.4, 1.0],
                ratio: [0.75, 4.0 / 3.0],
            },
            AugmentOp::ColorJitter {
                brightness: 0.4,
                contrast: 0.4,
                saturation: 0.4,
                hue: 0.1,
                p: 0.8,
            },
            AugmentOp::FlipH { p: 0.5 },
        ],
        seed,
    }
}
