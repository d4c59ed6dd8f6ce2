use me_mhacl::data::Split;
use me_mhacl::eval::evaluate;
use me_mhacl::sampler::batches_per_epoch;
use me_mhacl::synth::{generate, SynthSpec};
use me_mhacl::train::{
    ensure_split, finetune, pretrain, read_telemetry, Checkpoint, EncoderInit, ExperimentConfig, RunSink, Stage,
    Telemetry,
};
use me_mhacl::Error;

fn toy() -> me_mhacl::data::LabeledDataset {
    ensure_split(generate(&SynthSpec::new(16, 4, 4, 32, 3)).unwrap(), 3).unwrap()
}

fn pre_cfg(epochs: usize) -> ExperimentConfig {
    ExperimentConfig {
        epochs,
        p: 4,
        q: 2,
        seed: 9,
        ..ExperimentConfig::preset("desk_pretrain").unwrap()
    }
}

fn ft_cfg(epochs: usize) -> ExperimentConfig {
    ExperimentConfig {
        stage: Stage::Finetune,
        epochs,
        batch_size: 16,
        seed: 9,
        ..ExperimentConfig::preset("desk_finetune").unwrap()
    }
}

#[test]
fn toy_pretrain_loss_falls_below_uniform_within_five_epochs() {
    let ds = toy();
    let cfg = pre_cfg(5);
    let mut sink = RunSink::in_memory();
    pretrain(&cfg, &ds, None, &mut sink).unwrap();
    let recs = sink.telemetry.records();
    let last_epoch: Vec<f64> = recs.iter().filter(|r| r.epoch == 4).map(|r| r.loss).collect();
    let mean = last_epoch.iter().sum::<f64>() / last_epoch.len() as f64;
    assert!(mean < ((2 * cfg.p - 1) as f64).ln(), "epoch-5 mean loss {mean}");
}

#[test]
fn one_record_per_iteration_and_floor_batches_per_epoch() {
    let ds = toy();
    let cfg = pre_cfg(3);
    let mut sink = RunSink::in_memory();
    let ck = pretrain(&cfg, &ds, None, &mut sink).unwrap();
    let per_epoch = batches_per_epoch(ds.clips_in(Split::Train).len(), cfg.p);
    assert_eq!(per_epoch, 11 / 4);
    assert_eq!(sink.telemetry.records().len(), 3 * per_epoch);
    assert_eq!(ck.header.iteration, 3 * per_epoch);
    assert_eq!(ck.header.epoch, 3);
    for (i, r) in sink.telemetry.records().iter().enumerate() {
        assert_eq!(r.iteration, i);
        assert_eq!(r.epoch, i / per_epoch);
        assert!(r.accuracy.is_none());
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let ds = toy();
    let full = pretrain(&pre_cfg(4), &ds, None, &mut RunSink::in_memory()).unwrap();
    let half = pretrain(&pre_cfg(2), &ds, None, &mut RunSink::in_memory()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    half.save(dir.path().join("half.ckpt")).unwrap();
    let loaded = Checkpoint::load(dir.path().join("half.ckpt")).unwrap();
    let mut sink = RunSink::in_memory();
    let resumed = pretrain(&pre_cfg(4), &ds, Some(loaded), &mut sink).unwrap();
    assert_eq!(sink.telemetry.records().first().unwrap().epoch, 2);
    assert_eq!(resumed.to_bytes(), full.to_bytes());
}

#[test]
fn checkpoint_files_written_on_schedule() {
    let ds = toy();
    let dir = tempfile::tempdir().unwrap();
    let mut sink = RunSink {
        telemetry: Telemetry::to_file(dir.path().join("telemetry.jsonl")).unwrap(),
        checkpoint_dir: Some(dir.path().to_path_buf()),
    };
    let cfg = ExperimentConfig {
        checkpoint_every: 1,
        ..pre_cfg(3)
    };
    pretrain(&cfg, &ds, None, &mut sink).unwrap();
    for f in ["epoch_00001.ckpt", "epoch_00002.ckpt", "last.ckpt", "pretrained.ckpt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert!(!dir.path().join("epoch_00003.ckpt").exists());
    let enc = Checkpoint::load(dir.path().join("pretrained.ckpt")).unwrap();
    assert!(enc.projector.is_none());
    let lines = read_telemetry(dir.path().join("telemetry.jsonl")).unwrap();
    assert_eq!(lines.len(), sink.telemetry.records().len());
}

#[test]
fn frozen_encoder_weights_do_not_move() {
    let ds = toy();
    let pre = pretrain(&pre_cfg(1), &ds, None, &mut RunSink::in_memory()).unwrap();
    let cfg = ExperimentConfig {
        freeze_encoder: true,
        ..ft_cfg(2)
    };
    let res = finetune(&cfg, &ds, EncoderInit::Pretrained(&pre), &mut RunSink::in_memory()).unwrap();
    let before = &pre.encoder.store;
    let after = &res.last.encoder.store;
    let mut moved_buffers = 0;
    for (a, b) in before.entries().iter().zip(after.entries()) {
        if before.trainable_ids().any(|id| before.entries()[id.index()].name == a.name) {
            assert_eq!(a.value.data(), b.value.data(), "{} moved", a.name);
        } else if a.value.data() != b.value.data() {
            moved_buffers += 1;
        }
    }
    assert!(moved_buffers > 0, "batch-norm running statistics should follow the fine-tune data");
    let unfrozen = finetune(&ft_cfg(1), &ds, EncoderInit::Pretrained(&pre), &mut RunSink::in_memory()).unwrap();
    let w = before.find("encoder.stem.conv.weight").unwrap();
    assert_ne!(before.get(w).data(), unfrozen.last.encoder.store.get(w).data());
}

#[test]
fn freezing_leaves_strictly_fewer_trainable_parameters() {
    let ds = toy();
    let res = finetune(&ft_cfg(1), &ds, EncoderInit::Random, &mut RunSink::in_memory()).unwrap();
    let model = me_mhacl::train::FinetuneModel {
        encoder: res.last.encoder.clone(),
        classifier: res.last.classifier.clone().unwrap(),
    };
    let (frozen, full) = (model.trainable_parameters(true), model.trainable_parameters(false));
    assert!(0 < frozen && frozen < full, "{frozen} vs {full}");
}

#[test]
fn finetune_logs_validation_accuracy_and_keeps_best() {
    let ds = toy();
    let mut sink = RunSink::in_memory();
    let res = finetune(&ft_cfg(3), &ds, EncoderInit::Random, &mut sink).unwrap();
    let recs = sink.telemetry.records();
    assert_eq!(recs.len(), 3);
    let best = recs.iter().filter_map(|r| r.accuracy).fold(f64::MIN, f64::max);
    assert_eq!(res.best_val_accuracy, Some(best));
    assert_eq!(recs[res.best_epoch].accuracy, Some(best));
    let report = evaluate(&res.best, &ds, Split::Val, ft_cfg(3).task).unwrap();
    assert_eq!(report.accuracy, best);
}

#[test]
fn binary_task_against_four_class_checkpoint_is_rejected() {
    let ds = toy();
    let four = finetune(&ft_cfg(1), &ds, EncoderInit::Random, &mut RunSink::in_memory()).unwrap();
    let cfg = ExperimentConfig {
        task: me_mhacl::data::LabelTask::Valence,
        ..ft_cfg(1)
    };
    match finetune(&cfg, &ds, EncoderInit::Pretrained(&four.best), &mut RunSink::in_memory()) {
        Err(Error::Config(msg)) => assert!(msg.contains("needs 2 outputs"), "{msg}"),
        other => panic!("expected config error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn diverging_learning_rate_is_reported() {
    let ds = toy();
    let cfg = ExperimentConfig {
        learning_rate: 1e30,
        ..pre_cfg(5)
    };
    match pretrain(&cfg, &ds, None, &mut RunSink::in_memory()) {
        Err(Error::Diverged(msg)) => assert!(msg.contains("iteration"), "{msg}"),
        Ok(_) => panic!("lr 1e30 should diverge"),
        Err(e) => panic!("unexpected error {e}"),
    }
}
