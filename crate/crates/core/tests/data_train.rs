use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use focusalpha::data::{gen_synth, Dataset, SynthSpec, FG_FRACTION};
use focusalpha::evaluate::{evaluate, evaluate_predictions, roc_path, write_report, REPORT_SCHEMA};
use focusalpha::fnt1;
use focusalpha::loss::{LossConfig, LossWrapper};
use focusalpha::model::{Model, ModelConfig};
use focusalpha::optim::{adam_step, AdamConfig, AdamState};
use focusalpha::train::{
    read_history, train, Checkpointing, TrainConfig, BEST_FILE, HISTORY_FILE, LAST_FILE,
};
use focusalpha::Tensor;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        scales: 3,
        widths: vec![8, 16, 32],
        ..ModelConfig::alpha_tiny()
    }
}

fn tiny_data(val_fraction: f64) -> Dataset {
    gen_synth(&SynthSpec {
        count: 6,
        height: 16,
        width: 16,
        radius: (2.0, 5.0),
        val_fraction,
        seed: 3,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn train_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        max_epochs: epochs,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn run(dir: &Path, epochs: usize, resume: bool, data: &Dataset) -> Vec<u8> {
    let mut model = Model::build(&tiny_model(), 1).unwrap();
    let ck = Checkpointing {
        dir: dir.to_path_buf(),
        resume,
    };
    train(
        &mut model,
        data,
        &train_cfg(epochs),
        &LossConfig::default(),
        Some(&ck),
    )
    .unwrap();
    fs::read(dir.join(LAST_FILE)).unwrap()
}

#[test]
fn synthetic_data_is_reproducible_and_well_formed() {
    let spec = SynthSpec {
        count: 12,
        height: 32,
        width: 32,
        seed: 9,
        ..SynthSpec::default()
    };
    let a = gen_synth(&spec).unwrap();
    let b = gen_synth(&spec).unwrap();
    assert_eq!(a, b);
    assert_ne!(
        a,
        gen_synth(&SynthSpec {
            seed: 10,
            ..spec.clone()
        })
        .unwrap()
    );
    assert_eq!(a.images.shape(), &[12, 3, 32, 32]);
    assert_eq!(a.masks.shape(), &[12, 1, 32, 32]);
    assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(a.masks.data().iter().all(|&v| v == 0.0 || v == 1.0));
    for mask in a.masks.data().chunks(32 * 32) {
        let frac = mask.iter().sum::<f64>() / mask.len() as f64;
        assert!((FG_FRACTION.0..=FG_FRACTION.1).contains(&frac), "{frac}");
    }
    let split = &a.meta.split;
    assert_eq!(split.val.len(), 3);
    let all: BTreeSet<usize> = split.train.iter().chain(&split.val).copied().collect();
    assert_eq!(all.len(), 12);
}

#[test]
fn dataset_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(0.34);
    data.save(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.meta, data.meta);
    assert_eq!(back.masks, data.masks);
    assert!(back.images.max_abs_diff(&data.images) < 1e-7);
    assert!(Dataset::load(&dir.path().join("nope")).is_err());
}

#[test]
fn synth_spec_validation() {
    for bad in [
        SynthSpec {
            count: 0,
            ..SynthSpec::default()
        },
        SynthSpec {
            blobs: (3, 1),
            ..SynthSpec::default()
        },
        SynthSpec {
            val_fraction: 1.0,
            ..SynthSpec::default()
        },
        SynthSpec {
            radius: (4.0, 2.0),
            ..SynthSpec::default()
        },
    ] {
        assert!(gen_synth(&bad).is_err(), "{bad:?}");
    }
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut p = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
    let g = Tensor::new(&[3], vec![0.3, -4.0, 0.0]).unwrap();
    let cfg = AdamConfig::default();
    let mut state = AdamState::zeros_like(&[&p]);
    adam_step(&mut [&mut p], &[&g], &mut state, &cfg, 0.1).unwrap();
    assert_eq!(state.step, 1);
    let want = [1.0 - 0.1, -2.0 + 0.1, 0.5];
    for (a, b) in p.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
    assert!((state.slots[0].m.data()[0] - 0.03).abs() < 1e-15);
    assert!((state.slots[0].v.data()[1] - 0.016).abs() < 1e-15);
}

#[test]
fn adam_constant_gradient_keeps_unit_steps() {
    let mut p = Tensor::zeros(&[1]);
    let g = Tensor::full(&[1], 2.5);
    let mut state = AdamState::zeros_like(&[&p]);
    for _ in 0..10 {
        adam_step(
            &mut [&mut p],
            &[&g],
            &mut state,
            &AdamConfig::default(),
            0.01,
        )
        .unwrap();
    }
    assert!((p.data()[0] + 0.1).abs() < 1e-6);
    let bad = Tensor::zeros(&[2]);
    assert!(adam_step(
        &mut [&mut p],
        &[&bad],
        &mut state,
        &AdamConfig::default(),
        0.01
    )
    .is_err());
}

#[test]
fn learning_rate_schedule() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.lr_at(0), 1e-3);
    assert_eq!(cfg.lr_at(29), 1e-3);
    assert_eq!(cfg.lr_at(30), 1e-3 * 0.1);
    assert_eq!(TrainConfig::reference().batch_size, 8);
    assert!(TrainConfig {
        batch_size: 0,
        ..cfg
    }
    .validate()
    .is_err());
}

#[test]
fn training_is_deterministic() {
    let data = tiny_data(0.34);
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(
        run(d1.path(), 2, false, &data),
        run(d2.path(), 2, false, &data)
    );
    for f in [BEST_FILE, HISTORY_FILE] {
        assert_eq!(
            fs::read(d1.path().join(f)).unwrap(),
            fs::read(d2.path().join(f)).unwrap()
        );
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let data = tiny_data(0.34);
    let (whole, split) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let full = run(whole.path(), 3, false, &data);
    run(split.path(), 1, false, &data);
    let resumed = run(split.path(), 3, true, &data);
    assert_eq!(full, resumed);
    assert_eq!(
        read_history(&whole.path().join(HISTORY_FILE)).unwrap(),
        read_history(&split.path().join(HISTORY_FILE)).unwrap()
    );
}

#[test]
fn history_and_best_checkpoint_agree() {
    let data = tiny_data(0.34);
    let dir = tempfile::tempdir().unwrap();
    let mut model = Model::build(&tiny_model(), 2).unwrap();
    let ck = Checkpointing {
        dir: dir.path().to_path_buf(),
        resume: false,
    };
    let out = train(
        &mut model,
        &data,
        &train_cfg(3),
        &LossConfig::default(),
        Some(&ck),
    )
    .unwrap();
    let hist = read_history(&dir.path().join(HISTORY_FILE)).unwrap();
    assert_eq!(hist, out.history);
    assert_eq!(
        hist.iter().map(|r| r.epoch).collect::<Vec<_>>(),
        vec![0, 1, 2]
    );
    assert!(hist.windows(2).all(|w| w[0].steps < w[1].steps));
    assert_eq!(hist.last().unwrap().steps, out.steps);
    assert_eq!(
        out.steps,
        3 * data.meta.split.train.len().div_ceil(2) as u64
    );
    let min = hist
        .iter()
        .map(|r| r.monitored_loss())
        .fold(f64::INFINITY, f64::min);
    assert_eq!(out.best_loss, min);
    assert!(hist.iter().all(|r| r.val_loss.is_some()));

    let best_epoch = hist.iter().rposition(|r| r.best).unwrap();
    assert_eq!(hist[best_epoch].monitored_loss(), min);
    let best = Model::load(&dir.path().join(BEST_FILE), &tiny_model()).unwrap();
    let sidecar = Model::load_with_sidecar(&dir.path().join(BEST_FILE)).unwrap();
    assert_eq!(best.config, sidecar.config);
    if best_epoch + 1 == hist.len() {
        for (name, p) in model.params.iter() {
            assert_eq!(
                p.value.data(),
                best.params.get(name).unwrap().data(),
                "{name}"
            );
        }
    }
}

#[test]
fn max_steps_cuts_the_epoch_short() {
    let data = tiny_data(0.0);
    let mut model = Model::build(&tiny_model(), 0).unwrap();
    let cfg = TrainConfig {
        max_steps: Some(4),
        ..train_cfg(10)
    };
    let out = train(&mut model, &data, &cfg, &LossConfig::default(), None).unwrap();
    assert_eq!(out.steps, 4);
    assert_eq!(out.history.len(), 2);
    assert!(out.history.iter().all(|r| r.val_loss.is_none()));
}

#[test]
fn first_epoch_loss_decreases() {
    let data = gen_synth(&SynthSpec {
        count: 8,
        height: 16,
        width: 16,
        radius: (3.0, 6.0),
        val_fraction: 0.0,
        seed: 4,
        ..SynthSpec::default()
    })
    .unwrap();
    let mut model = Model::build(&tiny_model(), 0).unwrap();
    let cfg = TrainConfig {
        batch_size: 8,
        ..train_cfg(8)
    };
    let out = train(&mut model, &data, &cfg, &LossConfig::default(), None).unwrap();
    let first = out.history.first().unwrap().train_loss;
    let last = out.history.last().unwrap().train_loss;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn loss_wrapper_does_not_change_parameter_names() {
    let data = tiny_data(0.0);
    let names = |wrapper| {
        let dir = tempfile::tempdir().unwrap();
        let mut model = Model::build(&tiny_model(), 0).unwrap();
        let ck = Checkpointing {
            dir: dir.path().to_path_buf(),
            resume: false,
        };
        let loss = LossConfig {
            wrapper,
            ..LossConfig::default()
        };
        train(&mut model, &data, &train_cfg(1), &loss, Some(&ck)).unwrap();
        fnt1::load(&dir.path().join(BEST_FILE))
            .unwrap()
            .into_iter()
            .map(|(n, _)| n)
            .collect::<Vec<_>>()
    };
    assert_eq!(names(LossWrapper::All), names(LossWrapper::None));
}

#[test]
fn scoring_masks_against_themselves_is_perfect() {
    let data = tiny_data(0.0);
    let r = evaluate_predictions(&data.masks, &data.masks, 0.5).unwrap();
    for v in [
        r.global.precision,
        r.global.recall,
        r.global.dice,
        r.global.jaccard,
        r.global.f1,
    ] {
        assert_eq!(v, 1.0);
    }
    assert_eq!(r.auc, Some(1.0));
    assert_eq!(r.images, 6);
    assert_eq!(r.pixels, 6 * 256);
}

#[test]
fn single_image_global_equals_per_image() {
    let data = tiny_data(0.0);
    let m = Model::build(&tiny_model(), 3).unwrap();
    let one = Dataset {
        images: data.images.batch_slice(0, 1).unwrap(),
        masks: data.masks.batch_slice(0, 1).unwrap(),
        meta: focusalpha::data::Meta {
            spec: data.meta.spec.clone(),
            split: focusalpha::data::Split::all_train(1),
        },
    };
    let r = evaluate(&m, &one, 0.5).unwrap();
    assert_eq!(r.global, r.per_image_mean);
    assert_eq!(r.per_image.len(), 1);
    assert_eq!(r.per_image[0].counts, r.counts);
    assert!(evaluate(&m, &one, 1.0).is_err());
}

#[test]
fn report_files() {
    let data = tiny_data(0.0);
    let m = Model::build(&tiny_model(), 4).unwrap();
    let r = evaluate(&m, &data, 0.5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    write_report(&r, &path).unwrap();
    let json: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
    assert_eq!(json["schema"], REPORT_SCHEMA);
    for key in [
        "threshold",
        "images",
        "pixels",
        "global",
        "counts",
        "per_image_mean",
        "auc",
        "per_image",
        "model",
        "data",
    ] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
    assert!(json["counts"].get("fn").is_some());
    assert_eq!(json["per_image"].as_array().unwrap().len(), 6);
    let csv = fs::read_to_string(roc_path(&path)).unwrap();
    assert!(csv.starts_with("fpr,tpr\n"));
    assert_eq!(roc_path(&path).file_name().unwrap(), "report.json.roc.csv");
}
