mod common;

use common::{model_config, small_data};
use pag_core::error::Error;
use pag_core::eval::masked_phrase_accuracy;
use pag_core::model::{read_checkpoint, write_checkpoint, Model, OutputVars};
use pag_core::nn::{Rng, Tape, Tensor};
use pag_core::prepared::PreparedSample;
use pag_core::training::{
    accumulate_sample, draw_phrase, finetune_step, loss_total, lr_at, metrics_csv, pretrain_step, run_stage,
    run_training, LossMode, LossWeights, RunOptions, Stage, StagePlan, TrainConfig,
};

fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    xs.iter().map(|x| x - lse).collect()
}

fn ce(logits: &[f64], target: usize) -> f64 {
    -log_softmax(logits)[target]
}

struct Oracle {
    ground: f64,
    objcls: f64,
    clscls: f64,
    poa: f64,
    mask: f64,
}

/// Scalar-loop recomputation of every loss term from forward values.
fn oracle(tape: &Tape<f64>, out: &OutputVars, s: &PreparedSample, ground_obj: usize, cls_target: usize) -> Oracle {
    let m = s.num_objects();
    let scores = tape.value(out.scores).to_vec();
    let obj = tape.value(out.obj_class_logits).to_vec();
    let c = obj.len() / m;
    let objcls = (0..m).map(|i| ce(&obj[i * c..(i + 1) * c], s.obj_labels[i])).sum::<f64>() / m as f64;
    let poa = tape.value(out.poa).to_vec();
    let cols = s.soft_gt.cols();
    let mut soft = 0.0;
    for i in 0..m {
        for j in 0..cols {
            let t = s.soft_gt.at(i, j) as f64;
            if t > 0.0 {
                soft -= t * poa[i * cols + j].max(1e-9).ln();
            }
        }
    }
    let logits = tape.value(out.target_mask_logits).to_vec();
    let mut bce = 0.0;
    for (z, y) in logits.iter().zip(&s.target_mask) {
        let p = 1.0 / (1.0 + (-z).exp());
        bce -= *y as f64 * p.ln() + (1.0 - *y as f64) * (1.0 - p).ln();
    }
    Oracle {
        ground: ce(&scores, ground_obj),
        objcls,
        clscls: ce(tape.value(out.cls_target_logits), cls_target),
        poa: soft / m as f64,
        mask: bce / logits.len() as f64,
    }
}

#[test]
fn loss_terms_match_loop_oracle() {
    let data = small_data(6, 21);
    let model: Model<f64> = Model::<f32>::new(model_config(&data, 32)).unwrap().cast();
    let w = LossWeights { ground: 1.0, poa: 0.7, objcls: 0.3, clscls: 0.4, mask: 0.9 };
    for s in &data.samples {
        let mut tape = Tape::new();
        let out = model.forward_tape(&mut tape, &s.input).unwrap();
        let (total, bd) = loss_total(&mut tape, &out, s, LossMode::Finetune { poa: true }, &w).unwrap();
        let o = oracle(&tape, &out, s, s.target_id, s.target_class());
        assert!((bd.ground - o.ground).abs() < 1e-6);
        assert!((bd.objcls - o.objcls).abs() < 1e-6);
        assert!((bd.clscls - o.clscls).abs() < 1e-6);
        assert!((bd.poa.unwrap() - o.poa).abs() < 1e-6);
        assert!((bd.mask.unwrap() - o.mask).abs() < 1e-6);
        let sum = w.ground * o.ground + w.poa * o.poa + w.objcls * o.objcls + w.clscls * o.clscls + w.mask * o.mask;
        assert!((tape.scalar(total) - sum).abs() < 1e-6);
        assert!((bd.total - sum).abs() < 1e-6);

        let phrase = s.phrases.len() - 1;
        let masked = s.input.with_mask(&s.masks[phrase]).unwrap();
        let mut tape = Tape::new();
        let out = model.forward_tape(&mut tape, &masked).unwrap();
        let (_, bd) = loss_total(&mut tape, &out, s, LossMode::Pretrain { phrase }, &w).unwrap();
        let obj = s.phrases[phrase].object_id;
        let o = oracle(&tape, &out, s, obj, s.obj_labels[obj]);
        assert!((bd.ground - o.ground).abs() < 1e-6);
        assert!((bd.clscls - o.clscls).abs() < 1e-6);
        assert_eq!(bd.poa, None);
        assert_eq!(bd.mask, None);
        assert!((bd.total - (w.ground * o.ground + w.objcls * o.objcls + w.clscls * o.clscls)).abs() < 1e-6);
    }
}

#[test]
fn perfect_outputs_leave_only_alignment_entropy() {
    let data = small_data(4, 22);
    let w = LossWeights::default();
    for s in &data.samples {
        let m = s.num_objects();
        let c = data.classes.len();
        let l = s.target_mask.len();
        let big = 60.0;
        let mut tape: Tape<f64> = Tape::new();
        let one_hot = |n: usize, hot: usize| (0..n).map(|i| if i == hot { big } else { 0.0 }).collect::<Vec<f64>>();
        let scores = tape.input_matrix(m, 1, one_hot(m, s.target_id)).unwrap();
        let poa = tape.input(&s.soft_gt.cast());
        let obj: Vec<f64> = s.obj_labels.iter().flat_map(|&k| one_hot(c, k)).collect();
        let obj = tape.input_matrix(m, c, obj).unwrap();
        let cls = tape.input_matrix(1, c, one_hot(c, s.target_class())).unwrap();
        let mask = tape.input_matrix(l, 1, s.target_mask.iter().map(|&b| if b > 0.5 { big } else { -big }).collect()).unwrap();
        let out = OutputVars {
            scores,
            poa,
            obj_class_logits: obj,
            cls_target_logits: cls,
            target_mask_logits: mask,
            objects: scores,
            text: scores,
        };
        let (_, bd) = loss_total(&mut tape, &out, s, LossMode::Finetune { poa: true }, &w).unwrap();
        let mut entropy = 0.0;
        for i in 0..m {
            for &t in s.soft_gt.row(i) {
                if t > 0.0 {
                    entropy -= t as f64 * (t as f64).ln();
                }
            }
        }
        entropy /= m as f64;
        assert!((bd.total - w.poa * entropy).abs() < 1e-6, "{} vs {}", bd.total, entropy);
    }
}

fn grads(model: &Model, s: &PreparedSample, mode: LossMode, w: &LossWeights) -> Vec<Vec<f32>> {
    let mut m = model.clone();
    m.store.zero_grads();
    accumulate_sample(&mut m, s, mode, w, 1.0).unwrap();
    m.store.iter().map(|p| p.grad.clone()).collect()
}

#[test]
fn zero_weight_terms_leave_no_gradient() {
    let data = small_data(4, 23);
    let model: Model = Model::new(model_config(&data, 32)).unwrap();
    let s = &data.samples[0];
    let off = LossWeights { poa: 0.0, mask: 0.0, ..LossWeights::default() };
    assert_eq!(
        grads(&model, s, LossMode::Finetune { poa: true }, &off),
        grads(&model, s, LossMode::Baseline, &LossWeights::default())
    );
    let no_poa = LossWeights { poa: 0.0, ..LossWeights::default() };
    assert_eq!(
        grads(&model, s, LossMode::Finetune { poa: true }, &no_poa),
        grads(&model, s, LossMode::Finetune { poa: false }, &LossWeights::default())
    );
    let mut tape = Tape::new();
    let out = model.forward_tape(&mut tape, &s.input).unwrap();
    let (_, bd) = loss_total(&mut tape, &out, s, LossMode::Finetune { poa: true }, &no_poa).unwrap();
    assert_eq!(bd.poa, None);
}

#[test]
fn alignment_targets_must_match_the_map() {
    let data = small_data(4, 24);
    let model: Model = Model::new(model_config(&data, 32)).unwrap();
    let mut s = data.samples[0].clone();
    s.soft_gt = Tensor::zeros(vec![1, 2]);
    let mut tape = Tape::new();
    let out = model.forward_tape(&mut tape, &s.input).unwrap();
    let r = loss_total(&mut tape, &out, &s, LossMode::Finetune { poa: true }, &LossWeights::default());
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn phrase_draws_are_uniform() {
    let data = small_data(40, 25);
    let three = data.samples.iter().find(|s| s.phrases.len() == 3).expect("a three-phrase sample");
    let mut rng = Rng::new(5);
    let mut counts = [0usize; 3];
    for _ in 0..10_000 {
        counts[draw_phrase(&mut rng, three)] += 1;
    }
    for c in counts {
        assert!((c as f64 / 10_000.0 - 1.0 / 3.0).abs() < 0.015, "{counts:?}");
    }
    let single = three.with_phrases(vec![three.phrases.iter().find(|p| p.is_target).unwrap().clone()]).unwrap();
    assert!((0..100).all(|_| draw_phrase(&mut rng, &single) == 0));
}

#[test]
fn learning_rate_schedule() {
    assert_eq!(lr_at(0, 1e-4, 0.65, 10), 1e-4);
    assert!((lr_at(10, 1e-4, 0.65, 10) - 6.5e-5).abs() < 1e-18);
    assert!((lr_at(25, 1e-4, 0.65, 10) - 4.225e-5).abs() < 1e-18);
    assert_eq!(lr_at(9, 1e-4, 0.65, 10), 1e-4);
    for e in 0..200 {
        assert!(lr_at(e + 1, 1e-4, 0.65, 10) <= lr_at(e, 1e-4, 0.65, 10));
    }
}

fn quick_config(seed: u64) -> TrainConfig {
    TrainConfig { epochs: 1, pretrain_epochs: 1, lr_pretrain: 1e-3, lr_finetune: 1e-4, seed, ..TrainConfig::default() }
}

#[test]
fn one_epoch_gives_one_row_and_runs_repeat_exactly() {
    let data = small_data(24, 26);
    let (train, val) = data.samples.split_at(16);
    let run = || {
        let model: Model = Model::new(model_config(&data, 16)).unwrap();
        run_training(model, false, train, val, &quick_config(3), &RunOptions::default()).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.finetune.rows.len(), 1);
    assert_eq!(a.pretrain.as_ref().unwrap().rows.len(), 1);
    let csv = metrics_csv(&a.finetune.rows);
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.starts_with("epoch,loss_total,loss_ground,loss_poa,loss_aux,loss_mask,acc_vg,acc_pag,acc_pg,lr\n"));
    assert_eq!(csv, metrics_csv(&b.finetune.rows));
    assert_eq!(write_checkpoint(&a.model, &serde_json::Value::Null).unwrap(), write_checkpoint(&b.model, &serde_json::Value::Null).unwrap());
}

#[test]
fn resumed_step_matches_uninterrupted_training() {
    let data = small_data(16, 27);
    let batch: Vec<&PreparedSample> = data.samples.iter().collect();
    let w = LossWeights::default();
    let mode = LossMode::Finetune { poa: true };
    let mut model: Model = Model::new(model_config(&data, 32)).unwrap();
    for _ in 0..3 {
        finetune_step(&mut model, &batch, mode, &w, 1e-3).unwrap();
    }
    let bytes = write_checkpoint(&model, &serde_json::Value::Null).unwrap();
    let mut resumed = read_checkpoint(&bytes).unwrap().model;
    finetune_step(&mut model, &batch, mode, &w, 1e-3).unwrap();
    finetune_step(&mut resumed, &batch, mode, &w, 1e-3).unwrap();
    assert_eq!(
        write_checkpoint(&model, &serde_json::Value::Null).unwrap(),
        write_checkpoint(&resumed, &serde_json::Value::Null).unwrap()
    );
}

#[test]
fn non_finite_loss_aborts_with_a_dump() {
    let data = small_data(8, 28);
    let mut model: Model = Model::new(model_config(&data, 16)).unwrap();
    let id = model.store.id("score.out.weight").unwrap();
    model.store.get_mut(id).value.data_mut()[0] = f32::NAN;
    let dir = tempfile::tempdir().unwrap();
    let plan = StagePlan { stage: Stage::Finetune, mode: LossMode::Baseline, epochs: 1, lr0: 1e-3 };
    let opts = RunOptions { dump_dir: Some(dir.path().to_path_buf()), verbose: false };
    let r = run_stage(model, &data.samples, &data.samples, &plan, &quick_config(0), &opts);
    let Err(Error::NonFinite(msg)) = r else { panic!("expected a non-finite error") };
    assert!(msg.contains("nan_dump.json"));
    let dump: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("nan_dump.json")).unwrap()).unwrap();
    assert_eq!(dump["stage"], "finetune");
    assert!(!dump["samples"].as_array().unwrap().is_empty());
}

#[test]
fn pretraining_overfits_sixteen_samples() {
    let data = small_data(16, 29);
    let batch: Vec<&PreparedSample> = data.samples.iter().collect();
    let mut model: Model = Model::new(model_config(&data, 64)).unwrap();
    let mut rng = Rng::new(1);
    let w = LossWeights::default();
    let mut reached = None;
    for step in 0..500 {
        pretrain_step(&mut model, &batch, &w, 1e-3, &mut rng).unwrap();
        if step % 10 == 9 && masked_phrase_accuracy(&model, &data.samples).unwrap() == 1.0 {
            reached = Some(step + 1);
            break;
        }
    }
    assert!(reached.is_some(), "phrase accuracy {}", masked_phrase_accuracy(&model, &data.samples).unwrap());
}

#[test]
fn finetuning_loss_decreases_on_a_fixed_batch() {
    let data = small_data(16, 30);
    let batch: Vec<&PreparedSample> = data.samples.iter().collect();
    let mut model: Model = Model::new(model_config(&data, 32)).unwrap();
    let w = LossWeights::default();
    let mut losses = Vec::new();
    for _ in 0..100 {
        losses.push(finetune_step(&mut model, &batch, LossMode::Finetune { poa: true }, &w, 1e-3).unwrap().total);
    }
    assert!(losses.iter().all(|l| l.is_finite()));
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[90..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.5 * head, "{head} -> {tail}");
}
