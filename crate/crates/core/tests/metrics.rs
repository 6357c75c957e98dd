mod common;

use std::fs::OpenOptions;
use std::io::Write;

use coboost::metrics::{load_checkpoint, read_records, save_checkpoint, MetricValue, MetricsSink};
use coboost::model_zoo::{Arch, ModelSpec};
use coboost::Error;

use common::{blobs, spec, trained_clients};

#[test]
fn duplicates_are_rejected_and_vectors_stay_arrays() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.jsonl");
    let mut sink = MetricsSink::open(&path, "run").unwrap();
    sink.append(0, "kd_loss", 1.5).unwrap();
    assert!(matches!(sink.append(0, "kd_loss", 2.0), Err(Error::DuplicateMetric { .. })));
    sink.append(1, "kd_loss", 1.0).unwrap();
    sink.append(1, "weights", vec![0.25, 0.75]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.lines().last().unwrap().contains("\"value\":[0.25,0.75]"));
    let records = read_records(&path).unwrap();
    assert_eq!(records.len(), 3);
    assert_eq!(records[2].value, MetricValue::Vector(vec![0.25, 0.75]));
    let stamps: Vec<u64> = records.iter().map(|r| r.timestamp).collect();
    assert_eq!(stamps, vec![0, 1, 2]);
    assert!(sink.append(2, "bad", f64::NAN).is_err());
}

#[test]
fn flushed_records_survive_a_torn_write() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.jsonl");
    {
        let mut sink = MetricsSink::open(&path, "run").unwrap();
        for e in 0..5 {
            sink.append(e, "acc", e as f64 / 10.0).unwrap();
        }
        // simulate a crash in the middle of the next line
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"run_id\":\"run\",\"epoch\":5,\"na").unwrap();
    }
    let records = read_records(&path).unwrap();
    assert_eq!(records.len(), 5);
    let mut sink = MetricsSink::open(&path, "run").unwrap();
    assert!(sink.append(4, "acc", 0.0).is_err());
    let r = sink.append(5, "acc", 0.5).unwrap();
    assert_eq!(r.timestamp, 5);
    assert_eq!(read_records(&path).unwrap().len(), 6);
}

#[test]
fn checkpoints_round_trip_and_check_the_spec() {
    let h = blobs();
    let clients = trained_clients(&h, 2, 0.5, 3, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt").join("client_0.json");
    save_checkpoint(&clients[0], &path).unwrap();
    let back = load_checkpoint(&path, Some(&spec(Arch::MlpTiny, &h))).unwrap();
    assert_eq!(back.checksum(), clients[0].checksum());
    assert!(back.is_frozen());
    assert_eq!(back.metadata, clients[0].metadata);
    let wrong = ModelSpec::new(Arch::Cnn2, 10, [1, 8, 8]);
    assert!(matches!(load_checkpoint(&path, Some(&wrong)), Err(Error::Checkpoint(_))));
    // no temp files are left behind
    assert_eq!(std::fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
}
