//! The staged pipeline. Every stage reads its inputs from and writes its
//! outputs to `out_dir`, so stages can be rerun independently:
//!
//! | stage | reads | writes |
//! |---|---|---|
//! | ingest | `midi_dir/<label>/*.mid` | `corpus.bin` |
//! | train-vqvae | `corpus.bin` | `vqvae.ckpt`, `tokens.csv`, `vqvae_loss.csv` |
//! | train-diffusion | `corpus.bin`, `vqvae.ckpt` | `denoiser.ckpt`, `diffusion_loss.csv` |
//! | generate | `vqvae.ckpt`, `denoiser.ckpt` | `generated/style<y>_<n>.{mid,pgm}` |
//! | evaluate | all of the above | `classifier.ckpt`, `report.csv`, `confusion.pgm` |
//!
//! `manifest.txt` is updated by every stage.

use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vqdiff_core::denoiser::train_denoiser;
use vqdiff_core::diffusion::{sample_batch, InitMode, SampleOptions};
use vqdiff_core::eval::{extract_features, overlap_report, style_accuracy, train_classifier, FeatureVector};
use vqdiff_core::eval::{Gaussian, OverlapReport, StyleReport};
use vqdiff_core::music::{from_pianoroll, to_pianoroll, Corpus, Pianoroll};
use vqdiff_core::vqvae::{train_vqvae, TokenSequence, VqVae};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::manifest::Manifest;
use crate::midi::{parse_midi, write_midi};
use crate::{corpus_file, export, models};

pub const CORPUS_FILE: &str = "corpus.bin";
pub const VQVAE_FILE: &str = "vqvae.ckpt";
pub const DENOISER_FILE: &str = "denoiser.ckpt";
pub const CLASSIFIER_FILE: &str = "classifier.ckpt";
pub const GENERATED_DIR: &str = "generated";

// Independent random streams per stage, so rerunning one stage leaves the others unchanged.
const STREAM_VQVAE: u64 = 1;
const STREAM_DIFFUSION: u64 = 2;
const STREAM_GENERATE: u64 = 3;
const STREAM_CLASSIFIER: u64 = 4;

fn stage_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn create_out_dir(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(Error::io(&cfg.out_dir))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(Error::io(path))
}

fn require(cfg: &RunConfig, file: &str, stage: &'static str) -> Result<PathBuf> {
    let path = cfg.out_dir.join(file);
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::MissingStage { stage, path })
    }
}

fn is_midi(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(Error::io(dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .map_err(Error::io(dir))?;
    out.sort();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IngestSummary {
    pub labels: Vec<String>,
    pub segments_per_label: Vec<usize>,
    pub files_parsed: usize,
    /// Files that failed to parse or produced no segment, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

/// Reads `midi_dir/<label>/*.mid`, windows every piece into segments and writes the corpus.
pub fn ingest(cfg: &RunConfig) -> Result<IngestSummary> {
    let root = &cfg.midi_dir;
    if !root.is_dir() {
        return Err(Error::Config(format!("midi_dir {} is not a directory", root.display())));
    }
    let mut labelled: Vec<(String, Vec<PathBuf>)> = Vec::new();
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let files: Vec<PathBuf> = sorted_entries(&dir)?.into_iter().filter(|p| is_midi(p)).collect();
        if !files.is_empty() {
            let name = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
            labelled.push((name, files));
        }
    }
    if labelled.is_empty() {
        return Err(Error::Config(format!(
            "no .mid files found in any subdirectory of {}",
            root.display()
        )));
    }

    let mut corpus = Corpus::new(labelled.iter().map(|(n, _)| n.clone()).collect());
    let mut files_parsed = 0;
    let mut skipped = Vec::new();
    for (label, (_, files)) in labelled.iter().enumerate() {
        for path in files {
            let bytes = std::fs::read(path).map_err(Error::io(path))?;
            let parsed = match parse_midi(&bytes) {
                Ok(p) => p,
                Err(e) => {
                    warn!("skipping {}: {e}", path.display());
                    skipped.push((path.clone(), e.to_string()));
                    continue;
                }
            };
            files_parsed += 1;
            for w in &parsed.warnings {
                log::debug!("{}: {w:?}", path.display());
            }
            let end = parsed.events.iter().map(|e| e.end()).fold(parsed.length, f64::max);
            let frames = (end * cfg.frame_rate).ceil() as usize;
            let added = if frames >= cfg.segment_frames {
                let roll = to_pianoroll(&parsed.events, cfg.frame_rate, frames)?;
                corpus.push_piece(&roll, label, cfg.segment_frames)?
            } else {
                0
            };
            if added == 0 {
                warn!(
                    "{}: {frames} frames is shorter than one {}-frame segment",
                    path.display(),
                    cfg.segment_frames
                );
                skipped.push((path.clone(), format!("only {frames} frames")));
            }
        }
    }
    if corpus.is_empty() {
        let details: Vec<String> = skipped.iter().map(|(p, m)| format!("  {}: {m}", p.display())).collect();
        return Err(Error::NothingParsed {
            path: root.clone(),
            details: details.join("\n"),
        });
    }

    create_out_dir(cfg)?;
    let path = cfg.out_dir.join(CORPUS_FILE);
    corpus_file::save(&path, &corpus, cfg.frame_rate)?;
    let mut manifest = Manifest::open(&cfg.out_dir)?;
    manifest.record_config(cfg);
    manifest.record_file(CORPUS_FILE, &path)?;
    manifest.set("metric.corpus_segments", corpus.len());
    manifest.save(&cfg.out_dir)?;
    let summary = IngestSummary {
        labels: corpus.label_names().to_vec(),
        segments_per_label: corpus.label_counts(),
        files_parsed,
        skipped,
    };
    info!("ingested {} segments from {} files", corpus.len(), summary.files_parsed);
    Ok(summary)
}

/// Loads `corpus.bin` and checks it matches the configured segmentation.
pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let path = require(cfg, CORPUS_FILE, "ingest")?;
    let (corpus, rate) = corpus_file::load(&path)?;
    if rate != cfg.frame_rate || corpus.segment_frames() != Some(cfg.segment_frames) {
        return Err(Error::Config(format!(
            "{} holds {:?} frames at {rate} fps but the configuration asks for {} at {}; rerun ingest",
            path.display(),
            corpus.segment_frames(),
            cfg.segment_frames,
            cfg.frame_rate
        )));
    }
    Ok(corpus)
}

/// Corpus segments as style-labelled token sequences.
pub fn tokenize_corpus(vq: &VqVae, corpus: &Corpus) -> Result<Vec<TokenSequence>> {
    corpus
        .items()
        .iter()
        .map(|(roll, label)| Ok(vq.tokenize(roll, Some(*label))?))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqSummary {
    pub final_loss: f64,
    pub train_accuracy: f64,
    /// Reconstruction accuracy on segments held out from training; NaN when none were.
    pub heldout_accuracy: f64,
    /// Share of held-out active cells reconstructed; NaN when none.
    pub heldout_recall: f64,
    pub heldout_segments: usize,
    /// Distinct codebook entries used across the whole corpus.
    pub codes_used: usize,
    pub history: Vec<f64>,
}

fn segment_rolls(c: &Corpus) -> Vec<&Pianoroll> {
    c.items().iter().map(|(r, _)| r).collect()
}

/// Trains on all but every `holdout_stride`-th segment of each label.
pub fn train_vqvae_stage(cfg: &RunConfig) -> Result<VqSummary> {
    let corpus = load_corpus(cfg)?;
    let (train, held) = corpus.split_every(cfg.holdout_stride);
    let mut rng = stage_rng(cfg.seed, STREAM_VQVAE);
    let (vq, history) = train_vqvae(&train, cfg.vqvae(), &cfg.vq_train(), &mut rng)?;
    let path = cfg.out_dir.join(VQVAE_FILE);
    models::save_vqvae(&path, &vq)?;
    let tokens = tokenize_corpus(&vq, &corpus)?;
    write_file(&cfg.out_dir.join("tokens.csv"), export::tokens_csv(&tokens))?;
    write_file(&cfg.out_dir.join("vqvae_loss.csv"), export::loss_csv(&history))?;

    let accuracy = |c: &Corpus| -> Result<f64> {
        if c.is_empty() {
            return Ok(f64::NAN);
        }
        Ok(vq.reconstruction_accuracy(&segment_rolls(c))?)
    };
    let summary = VqSummary {
        final_loss: history.last().copied().unwrap_or(f64::NAN),
        train_accuracy: accuracy(&train)?,
        heldout_accuracy: accuracy(&held)?,
        heldout_recall: vq.reconstruction_recall(&segment_rolls(&held))?,
        heldout_segments: held.len(),
        codes_used: vq.codebook_usage(&corpus)?.iter().filter(|&&c| c > 0).count(),
        history,
    };
    let mut manifest = Manifest::open(&cfg.out_dir)?;
    manifest.record_config(cfg);
    manifest.record_file(VQVAE_FILE, &path)?;
    manifest.set("metric.vqvae_final_loss", summary.final_loss);
    manifest.set("metric.vqvae_train_accuracy", summary.train_accuracy);
    manifest.set("metric.vqvae_heldout_accuracy", summary.heldout_accuracy);
    manifest.set("metric.vqvae_heldout_recall", summary.heldout_recall);
    manifest.set("metric.vqvae_codes_used", summary.codes_used);
    manifest.save(&cfg.out_dir)?;
    info!(
        "vqvae: loss {:.4}, held-out reconstruction accuracy {:.4}, note recall {:.4}, {} codes used",
        summary.final_loss, summary.heldout_accuracy, summary.heldout_recall, summary.codes_used
    );
    Ok(summary)
}

/// Returns the per-step training loss.
pub fn train_diffusion_stage(cfg: &RunConfig) -> Result<Vec<f64>> {
    let corpus = load_corpus(cfg)?;
    let vq = models::load_vqvae(&require(cfg, VQVAE_FILE, "train-vqvae")?)?;
    let tokens = tokenize_corpus(&vq, &corpus)?;
    let schedule = cfg.schedule()?;
    let mut model_config = cfg.denoiser(corpus.num_labels());
    model_config.seq_len = vq.latent_len(cfg.segment_frames)?;
    let mut rng = stage_rng(cfg.seed, STREAM_DIFFUSION);
    let (model, history) = train_denoiser(&tokens, model_config, &schedule, &cfg.denoiser_train(), &mut rng)?;
    let path = cfg.out_dir.join(DENOISER_FILE);
    models::save_denoiser(&path, &model, &schedule)?;
    write_file(&cfg.out_dir.join("diffusion_loss.csv"), export::loss_csv(&history))?;
    let last = history.last().copied().unwrap_or(f64::NAN);
    let mut manifest = Manifest::open(&cfg.out_dir)?;
    manifest.record_config(cfg);
    manifest.record_file(DENOISER_FILE, &path)?;
    manifest.set("metric.diffusion_final_loss", last);
    manifest.save(&cfg.out_dir)?;
    info!("diffusion: final loss {last:.4}");
    Ok(history)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedPiece {
    pub midi: PathBuf,
    pub image: PathBuf,
    pub style: usize,
    pub tokens: TokenSequence,
    pub roll: Pianoroll,
}

pub fn generated_name(style: usize, index: usize) -> String {
    format!("style{style}_{index:03}")
}

/// Parses a file stem written by [`generated_name`] back into its style.
pub fn style_from_name(stem: &str) -> Option<usize> {
    let (style, index) = stem.strip_prefix("style")?.split_once('_')?;
    index.parse::<usize>().ok()?;
    style.parse().ok()
}

/// Samples `count` pieces for each requested style (all styles when `style` is `None`).
pub fn generate(cfg: &RunConfig, style: Option<usize>, count: usize, mode: InitMode) -> Result<Vec<GeneratedPiece>> {
    let vq = models::load_vqvae(&require(cfg, VQVAE_FILE, "train-vqvae")?)?;
    let (denoiser, schedule) = models::load_denoiser(&require(cfg, DENOISER_FILE, "train-diffusion")?)?;
    let styles_total = denoiser.config().styles;
    let styles: Vec<usize> = match style {
        Some(s) if s >= styles_total => {
            return Err(Error::Config(format!("style {s} out of range; the model knows {styles_total} styles")))
        }
        Some(s) => vec![s; count],
        None => (0..styles_total).flat_map(|s| std::iter::repeat_n(s, count)).collect(),
    };
    let options = SampleOptions {
        mode,
        top_k: (cfg.top_k > 0).then_some(cfg.top_k),
    };
    let mut rng = stage_rng(cfg.seed, STREAM_GENERATE);
    let seqs = sample_batch(&denoiser, &styles, denoiser.config().seq_len, &schedule, &mut rng, options)?;

    let dir = cfg.out_dir.join(GENERATED_DIR);
    std::fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
    let mut manifest = Manifest::open(&cfg.out_dir)?;
    manifest.record_config(cfg);
    let mut out = Vec::with_capacity(seqs.len());
    let mut index = vec![0usize; styles_total];
    for (seq, &y) in seqs.into_iter().zip(&styles) {
        let name = generated_name(y, index[y]);
        index[y] += 1;
        let roll = vq.decode(&seq, cfg.frame_rate)?;
        let midi = dir.join(format!("{name}.mid"));
        let bytes = write_midi(&from_pianoroll(&roll), roll.duration(), cfg.ticks_per_quarter, cfg.tempo)
            .map_err(|e| Error::Midi { path: midi.clone(), source: e })?;
        write_file(&midi, bytes)?;
        let image = dir.join(format!("{name}.pgm"));
        write_file(&image, export::pianoroll_pgm(&roll))?;
        manifest.set(format!("generated.{name}.mid"), y);
        out.push(GeneratedPiece { midi, image, style: y, tokens: seq, roll });
    }
    manifest.save(&cfg.out_dir)?;
    info!("generated {} pieces in {}", out.len(), dir.display());
    Ok(out)
}

/// Reads every `style<y>_<n>.mid` under `generated/` back into a labelled pianoroll.
pub fn load_generated(cfg: &RunConfig) -> Result<Vec<(Pianoroll, usize)>> {
    let dir = cfg.out_dir.join(GENERATED_DIR);
    if !dir.is_dir() {
        return Err(Error::MissingStage { stage: "generate", path: dir });
    }
    let mut out = Vec::new();
    for path in sorted_entries(&dir)?.into_iter().filter(|p| is_midi(p)) {
        let Some(style) = path.file_stem().and_then(|s| s.to_str()).and_then(style_from_name) else {
            continue;
        };
        let bytes = std::fs::read(&path).map_err(Error::io(&path))?;
        let parsed = parse_midi(&bytes).map_err(|e| Error::Midi { path: path.clone(), source: e })?;
        out.push((to_pianoroll(&parsed.events, cfg.frame_rate, cfg.segment_frames)?, style));
    }
    if out.is_empty() {
        return Err(Error::MissingStage { stage: "generate", path: dir });
    }
    Ok(out)
}

pub fn features(items: &[(Pianoroll, usize)]) -> Result<Vec<FeatureVector>> {
    items
        .iter()
        .map(|(roll, _)| Ok(extract_features(&from_pianoroll(roll), roll.duration())?))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub overlap: OverlapReport,
    pub style: StyleReport,
    /// Classifier accuracy on held-out corpus segments.
    pub classifier_holdout_accuracy: f64,
}

pub fn evaluate(cfg: &RunConfig) -> Result<Evaluation> {
    let corpus = load_corpus(cfg)?;
    let generated = load_generated(cfg)?;
    let (train, held) = corpus.split_every(cfg.holdout_stride);
    let clf_path = cfg.out_dir.join(CLASSIFIER_FILE);
    let classifier = match models::load_classifier(&clf_path) {
        Ok(c) if c.config().classes == corpus.num_labels() => c,
        _ => {
            info!("training style classifier on {} segments", train.len());
            let mut rng = stage_rng(cfg.seed, STREAM_CLASSIFIER);
            let (c, _) = train_classifier(&train, cfg.classifier(corpus.num_labels()), &cfg.classifier_train(), &mut rng)?;
            models::save_classifier(&clf_path, &c)?;
            c
        }
    };
    let holdout = if held.is_empty() { f64::NAN } else { classifier.accuracy(held.items())? };
    let overlap = match overlap_report(&features(corpus.items())?, &features(&generated)?) {
        Ok(report) => report,
        Err(vqdiff_core::Error::TooFewSamples { need, got }) => {
            warn!("only {got} non-silent pieces in a population (need {need}); overlap is undefined");
            let nan = Gaussian { mean: f64::NAN, std: f64::NAN };
            OverlapReport {
                reference: [nan; 6],
                generated: [nan; 6],
                overlap: [f64::NAN; 6],
            }
        }
        Err(e) => return Err(e.into()),
    };
    let style = style_accuracy(&generated, &classifier)?;

    write_file(&cfg.out_dir.join("report.csv"), export::report_csv(&overlap, &style, corpus.label_names()))?;
    write_file(&cfg.out_dir.join("confusion.pgm"), export::confusion_pgm(&style, 16))?;
    let mut manifest = Manifest::open(&cfg.out_dir)?;
    manifest.record_config(cfg);
    manifest.record_file(CLASSIFIER_FILE, &clf_path)?;
    manifest.set("metric.overlap_average", overlap.average());
    manifest.set("metric.style_accuracy", style.overall);
    manifest.set("metric.classifier_holdout_accuracy", holdout);
    manifest.save(&cfg.out_dir)?;
    info!(
        "overlap average {:.4}, style accuracy {:.4}, classifier held-out accuracy {holdout:.4}",
        overlap.average(),
        style.overall
    );
    Ok(Evaluation {
        overlap,
        style,
        classifier_holdout_accuracy: holdout,
    })
}

/// Writes `schedule.csv` and returns its path.
pub fn dump_schedule(cfg: &RunConfig) -> Result<PathBuf> {
    create_out_dir(cfg)?;
    let path = cfg.out_dir.join("schedule.csv");
    write_file(&path, export::schedule_csv(&cfg.schedule()?))?;
    Ok(path)
}
