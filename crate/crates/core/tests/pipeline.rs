use me_mhacl::data::{load_container, save_container, LabelTask, Split};
use me_mhacl::eval::{evaluate, export_embeddings, repeat_finetune_eval, ExportStage, EXPORT_ID_COLUMNS};
use me_mhacl::synth::{generate, self_check, SynthSpec};
use me_mhacl::train::{ensure_split, finetune, pretrain, EncoderInit, ExperimentConfig, RunSink, Stage};

fn small() -> me_mhacl::data::LabeledDataset {
    ensure_split(generate(&SynthSpec::new(12, 4, 4, 32, 8)).unwrap(), 8).unwrap()
}

#[test]
fn synthetic_dataset_survives_container_round_trip() {
    let spec = SynthSpec::new(8, 3, 4, 16, 2);
    let ds = generate(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_container(&ds, dir.path()).unwrap();
    let back = load_container(dir.path()).unwrap();
    assert_eq!(back.dims(), ds.dims());
    assert_eq!(back.raw(), ds.raw());
    assert_eq!(back.ratings(), ds.ratings());
    assert_eq!(back.sample_rate, ds.sample_rate);
    assert!(self_check(&spec, &back).passed());
}

#[test]
fn export_schema_and_row_counts() {
    let ds = small();
    let cfg = ExperimentConfig {
        epochs: 1,
        p: 2,
        q: 2,
        ..ExperimentConfig::preset("desk_pretrain").unwrap()
    };
    let ck = pretrain(&cfg, &ds, None, &mut RunSink::in_memory()).unwrap();
    let test_clips = ds.clips_in(Split::Test).len();
    for (stage, rows, width) in [
        (ExportStage::Encoder, test_clips * 4, ck.encoder.output_dim()),
        (ExportStage::ProjectorInput, test_clips * 4, ck.projector.as_ref().unwrap().latent_dim()),
        (ExportStage::Group, test_clips, ck.projector.as_ref().unwrap().latent_dim()),
    ] {
        let mut buf = Vec::new();
        let n = export_embeddings(&ck, &ds, Split::Test, stage, &mut buf).unwrap();
        assert_eq!(n, rows);
        let mut rd = csv::Reader::from_reader(buf.as_slice());
        let header: Vec<String> = rd.headers().unwrap().iter().map(String::from).collect();
        assert_eq!(&header[..5], EXPORT_ID_COLUMNS);
        assert_eq!(header.len(), 5 + width);
        assert_eq!(header[5], "f0");
        let records: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
        assert_eq!(records.len(), rows);
        for r in &records {
            assert_eq!(r[1].is_empty(), stage == ExportStage::Group);
            let four: u8 = r[4].parse().unwrap();
            let v: u8 = r[2].parse().unwrap();
            let a: u8 = r[3].parse().unwrap();
            assert_eq!(four, 2 * a + v);
            assert!(r.iter().skip(5).all(|x| x.parse::<f32>().unwrap().is_finite()));
        }
    }
    let mut buf = Vec::new();
    export_embeddings(&ck, &ds, Split::Test, ExportStage::Encoder, &mut buf).unwrap();
    let mut rd = csv::Reader::from_reader(buf.as_slice());
    let first = rd.records().next().unwrap().unwrap();
    let clip: usize = first[0].parse().unwrap();
    let subject: usize = first[1].parse().unwrap();
    let direct = ck.encoder.encode(&ds.sample(clip, subject), me_mhacl::params::Mode::Eval).unwrap();
    let parsed: Vec<f32> = first.iter().skip(5).map(|x| x.parse().unwrap()).collect();
    assert_eq!(parsed, direct);
    let enc_only = ck.encoder_only();
    assert!(export_embeddings(&enc_only, &ds, Split::Test, ExportStage::Group, Vec::new()).is_err());
}

#[test]
fn eval_report_counts_every_test_sample() {
    let ds = small();
    let cfg = ExperimentConfig {
        stage: Stage::Finetune,
        epochs: 2,
        batch_size: 8,
        ..ExperimentConfig::preset("desk_finetune").unwrap()
    };
    let res = finetune(&cfg, &ds, EncoderInit::Random, &mut RunSink::in_memory()).unwrap();
    let r = evaluate(&res.best, &ds, Split::Test, LabelTask::FourClass).unwrap();
    assert_eq!(r.n_samples, ds.clips_in(Split::Test).len() * ds.subjects());
    assert_eq!(r.confusion.iter().flatten().sum::<usize>(), r.n_samples);
    let diag: usize = (0..4).map(|i| r.confusion[i][i]).sum();
    assert_eq!(r.accuracy, diag as f64 / r.n_samples as f64);
    assert_eq!(evaluate(&res.best, &ds, Split::Test, LabelTask::FourClass).unwrap(), r);
    assert!(evaluate(&res.best, &ds, Split::Test, LabelTask::Valence).is_err());
}

#[test]
fn repeats_use_consecutive_seeds() {
    let ds = small();
    let cfg = ExperimentConfig {
        stage: Stage::Finetune,
        epochs: 1,
        batch_size: 8,
        seed: 40,
        ..ExperimentConfig::preset("desk_finetune").unwrap()
    };
    let mut seen = Vec::new();
    let rep = repeat_finetune_eval(None, &cfg, &ds, 3, |i, _, _| seen.push(i)).unwrap();
    assert_eq!(seen, [0, 1, 2]);
    assert_eq!(rep.runs.iter().map(|r| r.seed).collect::<Vec<_>>(), [40, 41, 42]);
    let accs: Vec<f64> = rep.runs.iter().map(|r| r.report.accuracy).collect();
    assert!((rep.mean - accs.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    assert!(repeat_finetune_eval(None, &cfg, &ds, 0, |_, _, _| {}).is_err());
}
