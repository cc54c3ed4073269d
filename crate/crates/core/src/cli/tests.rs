use std::fs;
use std::path::Path;

use clap::CommandFactory;

use super::*;
use crate::dataset::{Manifest, Split};
use crate::wav::read_wav_8k;

fn tse(args: &[&str]) -> Result<()> {
    let argv = std::iter::once("tse").chain(args.iter().copied()).chain(["--log-level", "warn"]);
    run(&Cli::try_parse_from(argv).expect("arguments parse"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_lists_every_flag() {
    let mut cmd = Cli::command();
    let text = cmd.find_subcommand_mut("train").unwrap().render_long_help().to_string();
    for f in ["--data", "--out", "--config", "--model", "--ablation", "--max-steps", "--resume", "--workers"] {
        assert!(text.contains(f), "missing {f}");
    }
    let text = cmd.find_subcommand_mut("evaluate").unwrap().render_long_help().to_string();
    for f in ["--strict", "--pesq-csv", "--split", "--workers"] {
        assert!(text.contains(f), "missing {f}");
    }
    assert_eq!(main_with(["tse", "train", "--help"]), 0);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(main_with(["tse", "gen-dataset", "--bogus"]), 1);
    assert_eq!(main_with(["tse", "frobnicate"]), 1);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "n_train = 2\nnot_a_key = 3\n").unwrap();
    let err = tse(&["gen-dataset", "--out", s(&dir.path().join("d")), "--config", s(&cfg)]).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("not_a_key"), "{err}");
}

#[test]
fn missing_data_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let err = tse(&["train", "--data", s(&dir.path().join("nope")), "--out", s(&dir.path().join("o"))]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn end_to_end_commands() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");

    // File says three training scenes and seed 7; the flag wins on the count.
    let gen_cfg = dir.path().join("gen.toml");
    fs::write(&gen_cfg, "seed = 7\nn_train = 3\nn_valid = 1\nn_test = 2\nsynthetic_speakers = 4\n\n[scene]\nsnr_db = [0.0, 3.0]\n").unwrap();
    tse(&["gen-dataset", "--out", s(&data), "--config", s(&gen_cfg), "--n-train", "2"]).unwrap();
    let effective: toml::Table = fs::read_to_string(data.join("dataset_config.toml")).unwrap().parse().unwrap();
    assert_eq!(effective["n_train"].as_integer(), Some(2));
    assert_eq!(effective["seed"].as_integer(), Some(7));
    assert_eq!(effective["scene"]["snr_db"].as_array().unwrap()[0].as_float(), Some(0.0));
    let manifest = Manifest::load(&data).unwrap();
    assert_eq!(manifest.records.len(), 5);

    let run_dir = dir.path().join("run");
    let train_cfg = dir.path().join("train.toml");
    fs::write(&train_cfg, "model = \"micro\"\nbatch_size = 2\ncrop_secs = [0.25, 0.5]\nmax_steps = 50\n").unwrap();
    tse(&["train", "--data", s(&data), "--out", s(&run_dir), "--config", s(&train_cfg), "--max-steps", "3"]).unwrap();
    let effective: toml::Table = fs::read_to_string(run_dir.join("train_config.toml")).unwrap().parse().unwrap();
    assert_eq!(effective["model"].as_str(), Some("micro"));
    assert_eq!(effective["max_steps"].as_integer(), Some(3));
    assert_eq!(effective["batch_size"].as_integer(), Some(2));
    let ckpt = run_dir.join("last.ckpt");
    assert!(ckpt.is_file());
    assert_eq!(fs::read_to_string(run_dir.join("train_log.csv")).unwrap().lines().count(), 4);

    let rec = manifest.split(Split::Test).next().unwrap();
    let mix = manifest.path(rec, "mixture").unwrap();
    let reference = manifest.path(rec, "reference_desired").unwrap();
    let extract = |out: &Path| {
        tse(&["extract", "--checkpoint", s(&ckpt), "--mixture", s(&mix), "--reference", s(&reference), "--out", s(out)])
    };
    let (a, b) = (dir.path().join("ex_a"), dir.path().join("ex_b"));
    extract(&a).unwrap();
    extract(&b).unwrap();
    let mix_len = read_wav_8k(&mix).unwrap().len();
    for name in ["stage1.wav", "stage2.wav"] {
        assert_eq!(read_wav_8k(&a.join(name)).unwrap().len(), mix_len);
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
    }
    let sidecar: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("extract.json")).unwrap()).unwrap();
    assert!(sidecar["inference_secs"].as_f64().unwrap() > 0.0);
    assert_eq!(sidecar["model"]["embed_dim"], 8);

    // A 16 kHz reference is rejected, naming the expected rate.
    let wrong = dir.path().join("ref16k.wav");
    let w = crate::signal::Waveform::new(vec![0.1; 16000], 16000).unwrap();
    crate::wav::write_wav(&wrong, &w).unwrap();
    let err = tse(&["extract", "--checkpoint", s(&ckpt), "--mixture", s(&mix), "--reference", s(&wrong), "--out", s(&a)])
        .unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("8000"), "{err}");

    let ev = dir.path().join("eval");
    tse(&["evaluate", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&ev), "--workers", "2"]).unwrap();
    let csv = fs::read_to_string(ev.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 + 1);
    assert!(fs::read_to_string(ev.join("metrics.txt")).unwrap().contains("SI-SDR"));
    assert!(ev.join("estimates").join(format!("{}.stage2.wav", rec.id)).is_file());

    // Scores from the estimates on disk agree with the in-memory report.
    let report = crate::metrics::report(&manifest, Split::Test, &ev.join("estimates"), 1).unwrap();
    assert_eq!(report.rows.len(), 2);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    let mem = json["aggregate"]["processed"]["si_sdr"].as_f64().unwrap();
    let disk = report.aggregate.unwrap().processed.si_sdr;
    assert!((mem - disk).abs() < 0.1, "{mem} vs {disk}");

    let missing = dir.path().join("none.csv");
    let err = tse(&["evaluate", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&ev), "--strict", "--pesq-csv", s(&missing)])
        .unwrap_err();
    assert_eq!(err.exit_code(), 2);
}
