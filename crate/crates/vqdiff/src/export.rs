//! Plain-text and image exports for inspection outside the program.

use std::fmt::Write as _;

use vqdiff_core::diffusion::NoiseSchedule;
use vqdiff_core::eval::{OverlapReport, StyleReport, FEATURE_NAMES};
use vqdiff_core::music::{Pianoroll, PITCHES};
use vqdiff_core::vqvae::TokenSequence;

/// Binary PGM, time on x and pitch on y with high pitches at the top; active cells are black.
pub fn pianoroll_pgm(roll: &Pianoroll) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", roll.frames(), PITCHES).into_bytes();
    for pitch in (0..PITCHES).rev() {
        out.extend((0..roll.frames()).map(|f| if roll.get(pitch, f) { 0u8 } else { 255 }));
    }
    out
}

/// One row per pitch (0 first), one 0/1 column per frame.
pub fn pianoroll_csv(roll: &Pianoroll) -> String {
    let mut out = String::new();
    for pitch in 0..PITCHES {
        let row: Vec<&str> = (0..roll.frames()).map(|f| if roll.get(pitch, f) { "1" } else { "0" }).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// `style,tokens...`, one sequence per row; a missing style is left empty.
pub fn tokens_csv(seqs: &[TokenSequence]) -> String {
    let mut out = String::new();
    for s in seqs {
        if let Some(style) = s.style {
            write!(out, "{style}").unwrap();
        }
        for t in &s.tokens {
            write!(out, ",{t}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn schedule_csv(schedule: &NoiseSchedule) -> String {
    let mut out = String::from("t,alpha,beta,gamma,alpha_bar,beta_bar,gamma_bar\n");
    for t in 0..=schedule.steps() {
        let per_step = if t == 0 {
            [1.0, 0.0, 0.0]
        } else {
            [schedule.alpha(t), schedule.beta(t), schedule.gamma(t)]
        };
        writeln!(
            out,
            "{t},{},{},{},{},{},{}",
            per_step[0],
            per_step[1],
            per_step[2],
            schedule.alpha_bar(t),
            schedule.beta_bar(t),
            schedule.gamma_bar(t)
        )
        .unwrap();
    }
    out
}

pub fn loss_csv(history: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in history.iter().enumerate() {
        writeln!(out, "{},{l}", i + 1).unwrap();
    }
    out
}

/// Feature overlap and style-accuracy tables in a single CSV with a `section` column.
pub fn report_csv(overlap: &OverlapReport, style: &StyleReport, labels: &[String]) -> String {
    let mut out = String::from("section,name,reference_mean,reference_std,generated_mean,generated_std,value\n");
    for (i, name) in FEATURE_NAMES.iter().enumerate() {
        let (r, g) = (overlap.reference[i], overlap.generated[i]);
        writeln!(out, "overlap,{name},{},{},{},{},{}", r.mean, r.std, g.mean, g.std, overlap.overlap[i]).unwrap();
    }
    writeln!(out, "overlap,average,,,,,{}", overlap.average()).unwrap();
    for (i, acc) in style.per_class.iter().enumerate() {
        let name = labels.get(i).map(String::as_str).unwrap_or("?");
        let value = acc.map(|a| a.to_string()).unwrap_or_default();
        writeln!(out, "style_accuracy,{name},,,,,{value}").unwrap();
    }
    writeln!(out, "style_accuracy,overall,,,,,{}", style.overall).unwrap();
    out
}

/// Row-normalized confusion matrix as a PGM, `cell` pixels per entry; darker means more.
pub fn confusion_pgm(style: &StyleReport, cell: usize) -> Vec<u8> {
    let n = style.confusion.len();
    let side = n * cell;
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    for row in &style.confusion {
        let total: usize = row.iter().sum();
        let shades: Vec<u8> = row
            .iter()
            .map(|&c| {
                let frac = if total == 0 { 0.0 } else { c as f64 / total as f64 };
                (255.0 * (1.0 - frac)).round() as u8
            })
            .collect();
        for _ in 0..cell {
            for &s in &shades {
                out.extend(std::iter::repeat_n(s, cell));
            }
        }
    }
    out
}
