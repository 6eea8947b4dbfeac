use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
corpus.train_size=30
corpus.test_size=8
corpus.len_max=100
train.epochs=1
train.nar_epochs=1
lm.external_multiplier=1
lm.epochs=1
";

fn sarstream(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sarstream"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("spawn sarstream")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn stages_in_order_produce_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("small.conf");
    std::fs::write(&conf, SMALL).unwrap();
    let conf = conf.to_str().unwrap();
    for stage in [
        "gen-data",
        "train-nar",
        "align",
        "pretrain-lm",
        "train-sar",
        "decode",
        "eval",
    ] {
        let o = sarstream(&[stage, "--config", conf], dir.path());
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    // later stages pick the config up from run.conf
    let o = sarstream(&["report", "--csv"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = String::from_utf8(o.stdout).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("system,decoder,wer,mean_latency_s,p_vs_baseline,config_hash")
    );
    assert_eq!(lines.count(), 12);
    assert!(dir.path().join("report.txt").exists());
    assert!(dir.path().join("decode/sar.align.emit.csv").exists());
}

#[test]
fn missing_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("small.conf");
    std::fs::write(&conf, SMALL).unwrap();
    let o = sarstream(
        &["gen-data", "--config", conf.to_str().unwrap()],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));

    let o = sarstream(&["decode"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("missing checkpoint"), "{}", stderr(&o));

    let o = sarstream(&["train-sar"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(
        stderr(&o).contains("missing alignments: align/train.align (run align)"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn missing_dataset_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let o = sarstream(&["train-nar"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("missing dataset"), "{}", stderr(&o));
}

#[test]
fn bad_config_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "corpus.noise=0.2\nblock.l_hop=abc\n").unwrap();
    let o = sarstream(
        &["gen-data", "--config", conf.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}
