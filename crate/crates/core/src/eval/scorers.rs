use std::path::PathBuf;
use std::process::Command;

use serde::{Deserialize, Serialize};

use super::{LoadedCase, Metric};
use crate::error::{Error, Result};
use crate::tensor::Image;

pub trait Scorer: Send + Sync {
    fn metric(&self) -> Metric;
    fn version(&self) -> String;
    fn score(&self, case: &LoadedCase) -> Result<f64>;
}

/// Which image of a case the output is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reference {
    Content,
    Style,
}

impl Reference {
    fn pick(self, case: &LoadedCase) -> &Image {
        match self {
            Reference::Content => &case.content,
            Reference::Style => &case.style_reference,
        }
    }
}

/// Mean absolute pixel difference between the output and a reference,
/// standing in for a perceptual distance.
#[derive(Debug, Clone)]
pub struct MeanAbsDiffScorer {
    metric: Metric,
    reference: Reference,
}

impl MeanAbsDiffScorer {
    pub fn new(metric: Metric, reference: Reference) -> Self {
        Self { metric, reference }
    }
}

impl Scorer for MeanAbsDiffScorer {
    fn metric(&self) -> Metric {
        self.metric
    }

    fn version(&self) -> String {
        "stub-mean-abs-diff/1".into()
    }

    fn score(&self, case: &LoadedCase) -> Result<f64> {
        let reference = self.reference.pick(case);
        if (reference.height(), reference.width()) != (case.output.height(), case.output.width()) {
            return Err(Error::ShapeMismatch("output and reference sizes differ".into()));
        }
        case.output.mean_abs_diff(reference)
    }
}

/// Fixed 48-dimensional embedding: mean RGB over a 4×4 grid of cells,
/// centred per image.
pub fn image_embedding(image: &Image) -> Vec<f64> {
    let (h, w) = (image.height(), image.width());
    let mut sums = vec![0.0f64; 48];
    let mut counts = [0usize; 16];
    for y in 0..h {
        for x in 0..w {
            let cell = (y * 4 / h.max(1)) * 4 + x * 4 / w.max(1);
            counts[cell] += 1;
            for (c, v) in image.pixel(y, x).iter().enumerate() {
                sums[cell * 3 + c] += *v as f64;
            }
        }
    }
    for (i, s) in sums.iter_mut().enumerate() {
        *s /= counts[i / 3].max(1) as f64;
    }
    let mean = sums.iter().sum::<f64>() / sums.len() as f64;
    sums.iter().map(|v| v - mean).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Cosine similarity between [`image_embedding`]s of the output and the
/// style reference.
#[derive(Debug, Clone, Copy)]
pub struct ClipStubScorer;

impl Scorer for ClipStubScorer {
    fn metric(&self) -> Metric {
        Metric::ClipScore
    }

    fn version(&self) -> String {
        "stub-clip-grid4/1".into()
    }

    fn score(&self, case: &LoadedCase) -> Result<f64> {
        Ok(cosine(&image_embedding(&case.output), &image_embedding(&case.style_reference)))
    }
}

/// Runs `<program> <args...> <content> <style_reference> <output> <prompt>`
/// and parses the first line of standard output as the score.
#[derive(Debug, Clone)]
pub struct ExternalScorer {
    metric: Metric,
    program: PathBuf,
    args: Vec<String>,
}

impl ExternalScorer {
    pub fn new(metric: Metric, command: &[String]) -> Result<Self> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| Error::ScorerUnavailable(format!("{}: empty command", metric.name())))?;
        let program = PathBuf::from(program);
        if !is_runnable(&program) {
            return Err(Error::ScorerUnavailable(format!("{}: `{}` not found", metric.name(), program.display())));
        }
        Ok(Self {
            metric,
            program,
            args: args.to_vec(),
        })
    }
}

fn is_runnable(program: &std::path::Path) -> bool {
    if program.components().count() > 1 {
        return program.is_file();
    }
    std::env::var_os("PATH")
        .map(|paths| std::env::split_paths(&paths).any(|dir| dir.join(program).is_file()))
        .unwrap_or(false)
}

impl Scorer for ExternalScorer {
    fn metric(&self) -> Metric {
        self.metric
    }

    fn version(&self) -> String {
        format!("external:{}", self.program.display())
    }

    fn score(&self, case: &LoadedCase) -> Result<f64> {
        let out = Command::new(&self.program)
            .args(&self.args)
            .args(&case.paths)
            .arg(&case.prompt)
            .output()
            .map_err(|e| Error::ScorerUnavailable(format!("{}: {e}", self.program.display())))?;
        if !out.status.success() {
            return Err(Error::ScorerUnavailable(format!(
                "{} exited with {}",
                self.program.display(),
                out.status
            )));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        text.lines()
            .next()
            .and_then(|l| l.trim().parse().ok())
            .ok_or_else(|| Error::format("scorer output", format!("expected a number, got {:?}", text.trim())))
    }
}

/// One recorded judge request/response pair (see [`super::CassetteJudge`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub key: String,
    pub request: String,
    pub response: String,
}
