use std::path::Path;
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vqdiff::midi::{write_midi, DEFAULT_TEMPO};
use vqdiff_core::music::{from_pianoroll, Pianoroll};
use vqdiff_core::synth::{motif_corpus, SynthConfig};

fn vqdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vqdiff")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let text = format!(
        "midi_dir = {}\nout_dir = {}\nsegment_frames = 64\n{extra}",
        dir.join("midi").display(),
        dir.join("run").display()
    );
    let path = dir.join("run.cfg");
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

/// Two labels, two 128-frame pieces each.
fn write_corpus(dir: &Path) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let synth = SynthConfig { labels: 2, segments_per_label: 4, ..SynthConfig::default() };
    let corpus = motif_corpus(&synth, &mut rng).unwrap();
    for label in 0..2 {
        let segs: Vec<&Pianoroll> = corpus.items().iter().filter(|(_, l)| *l == label).map(|(r, _)| r).collect();
        let sub = dir.join("midi").join(format!("composer{label}"));
        std::fs::create_dir_all(&sub).unwrap();
        for (i, pair) in segs.chunks(2).enumerate() {
            let mut roll = Pianoroll::new(128, 32.0).unwrap();
            for (j, seg) in pair.iter().enumerate() {
                for p in 0..128 {
                    for f in 0..64 {
                        roll.set(p, j * 64 + f, seg.get(p, f));
                    }
                }
            }
            let bytes = write_midi(&from_pianoroll(&roll), roll.duration(), 480, DEFAULT_TEMPO).unwrap();
            std::fs::write(sub.join(format!("p{i}.mid")), bytes).unwrap();
        }
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&vqdiff(&["--help"])), 0);
    assert_eq!(code(&vqdiff(&["no-such-command"])), 2);
    assert_eq!(code(&vqdiff(&["generate", "--mode", "sideways"])), 2);

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "seed = 1\nlearning_rate = 3\n").unwrap();
    let out = vqdiff(&["show-config", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("unknown key learning_rate"), "{}", stderr(&out));
}

#[test]
fn show_config_echoes_every_key_with_overrides() {
    let out = vqdiff(&["show-config", "--seed", "42", "--out", "elsewhere"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("seed = 42\n") && text.contains("out_dir = elsewhere\n"));
    assert_eq!(text.lines().count(), vqdiff::config::RunConfig::KEYS.len());
}

#[test]
fn ingest_reports_empty_and_unparsable_directories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    std::fs::create_dir_all(dir.path().join("midi/someone")).unwrap();
    let out = vqdiff(&["ingest", "--config", &cfg]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));

    std::fs::write(dir.path().join("midi/someone/broken.mid"), b"MThd\0\0\0\x06garbage").unwrap();
    let out = vqdiff(&["ingest", "--config", &cfg]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("broken.mid"), "{}", stderr(&out));
}

#[test]
fn later_stages_name_the_missing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = vqdiff(&["train-vqvae", "--config", &cfg]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("run `ingest` first"), "{}", stderr(&out));
    let out = vqdiff(&["generate", "--config", &cfg]);
    assert!(stderr(&out).contains("run `train-vqvae` first"), "{}", stderr(&out));
}

#[test]
fn dump_schedule_writes_all_steps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "diffusion_steps = 7\n");
    let out = vqdiff(&["dump-schedule", "--config", &cfg]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("run/schedule.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9);
    assert!(csv.starts_with("t,alpha,beta,gamma,alpha_bar,beta_bar,gamma_bar\n"));
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path());
    std::fs::write(dir.path().join("midi/composer1/corrupt.mid"), b"not a midi file").unwrap();
    let cfg = write_config(
        dir.path(),
        "vq_steps = 30\ndiffusion_steps = 5\ndenoiser_steps = 20\nclassifier_steps = 10\nholdout_stride = 2\n",
    );
    let run = |args: &[&str]| {
        let mut full = args.to_vec();
        full.extend(["--config", &cfg]);
        let out = vqdiff(&full);
        assert_eq!(code(&out), 0, "{args:?}: {}", stderr(&out));
        String::from_utf8(out.stdout).unwrap()
    };

    let ingest = run(&["ingest"]);
    assert!(ingest.contains("composer0: 4 segments") && ingest.contains("composer1: 4 segments"), "{ingest}");
    assert!(ingest.contains("1 skipped"), "{ingest}");
    run(&["train-vqvae"]);
    run(&["train-diffusion"]);
    let generated = run(&["generate", "--style", "1", "--count", "2", "--mode", "random"]);
    assert_eq!(generated.lines().count(), 2);
    for name in ["style1_000", "style1_001"] {
        assert!(dir.path().join(format!("run/generated/{name}.mid")).is_file());
        assert!(dir.path().join(format!("run/generated/{name}.pgm")).is_file());
    }
    let eval = run(&["evaluate"]);
    assert!(eval.contains("overlap average"), "{eval}");

    let report = std::fs::read_to_string(dir.path().join("run/report.csv")).unwrap();
    assert_eq!(report.lines().filter(|l| l.starts_with("overlap,")).count(), 7);
    assert!(report.contains("style_accuracy,overall,"));
    let manifest = std::fs::read_to_string(dir.path().join("run/manifest.txt")).unwrap();
    for key in [
        "config.sha256",
        "corpus.bin.sha256",
        "vqvae.ckpt.sha256",
        "denoiser.ckpt.sha256",
        "classifier.ckpt.sha256",
        "generated.style1_000.mid = 1",
        "metric.style_accuracy",
    ] {
        assert!(manifest.contains(key), "manifest lacks {key}:\n{manifest}");
    }

    let out = vqdiff(&["generate", "--style", "5", "--config", &cfg]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("style 5 out of range"), "{}", stderr(&out));
}
