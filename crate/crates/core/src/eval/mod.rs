//! Evaluation harness: score (content, style reference, output) triples
//! with pluggable scorers and render per-metric summary tables.

mod judge;
mod scorers;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use judge::{CassetteJudge, CommandJudge, JudgeClient, JudgeExchange, JudgeScorer, RecordingJudge, JUDGE_COMMAND_ENV};
pub use scorers::{
    image_embedding, CassetteEntry, ClipStubScorer, ExternalScorer, MeanAbsDiffScorer, Reference, Scorer,
};

use crate::backend::{DiffusionBackend, HookBundle, LatentTensor, Prompt};
use crate::error::{Error, Result};
use crate::tensor::Image;

/// Default instruction sent to the LLM judge; `{prompt}` is replaced by the style prompt.
pub const DEFAULT_JUDGE_PROMPT: &str = include_str!("../../data/judge_prompt.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "LPIPS")]
    Lpips,
    #[serde(rename = "DISTS")]
    Dists,
    #[serde(rename = "CLIP-score")]
    ClipScore,
    #[serde(rename = "LLM-judge")]
    LlmJudge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Lower,
    Higher,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Lpips, Metric::Dists, Metric::ClipScore, Metric::LlmJudge];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Lpips => "LPIPS",
            Metric::Dists => "DISTS",
            Metric::ClipScore => "CLIP-score",
            Metric::LlmJudge => "LLM-judge",
        }
    }

    pub fn direction(self) -> Direction {
        match self {
            Metric::Lpips | Metric::Dists => Direction::Lower,
            Metric::ClipScore | Metric::LlmJudge => Direction::Higher,
        }
    }

    pub fn valid_range(self) -> (f64, f64) {
        match self {
            Metric::Lpips | Metric::Dists => (0.0, f64::INFINITY),
            Metric::ClipScore => (-1.0, 1.0),
            Metric::LlmJudge => (0.0, 5.0),
        }
    }

    /// Decimal places used in rendered tables.
    fn decimals(self) -> usize {
        match self {
            Metric::LlmJudge => 2,
            _ => 4,
        }
    }

    fn header(self) -> String {
        let arrow = match self.direction() {
            Direction::Lower => '↓',
            Direction::Higher => '↑',
        };
        format!("{}{arrow}", self.name())
    }
}

/// One evaluation case. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalCase {
    pub id: String,
    pub content: PathBuf,
    pub prompt: String,
    pub style_reference: PathBuf,
    pub output: PathBuf,
}

/// How to build a scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScorerSpec {
    /// Mean absolute pixel difference, reported under `metric`.
    MeanAbsDiff { metric: Metric, reference: Reference },
    /// Cosine similarity of fixed colour-layout embeddings, reported as CLIP-score.
    ClipStub,
    /// External program printing one number: `<command...> <content> <style_reference> <output> <prompt>`.
    External { metric: Metric, command: Vec<String> },
    /// LLM judge replayed from a cassette, or run through `$GLYPHSTYLE_JUDGE_COMMAND` when `live`.
    Judge {
        cassette: PathBuf,
        #[serde(default)]
        live: bool,
        #[serde(default)]
        prompt_file: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalManifest {
    /// Row label in rendered reports.
    #[serde(default = "default_method")]
    pub method: String,
    pub cases: Vec<EvalCase>,
    pub scorers: Vec<ScorerSpec>,
    /// Report directory, relative to the manifest.
    #[serde(default = "default_report")]
    pub report: PathBuf,
}

fn default_method() -> String {
    "Ours".to_string()
}

fn default_report() -> PathBuf {
    PathBuf::from("report")
}

impl EvalManifest {
    pub fn read(path: &Path) -> Result<(Self, PathBuf)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Self = serde_json::from_str(&text).map_err(|e| Error::format("eval manifest", e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((manifest, base))
    }

    /// Check ids are unique, prompts nonempty and every referenced file exists under `base`.
    pub fn validate(&self, base: &Path) -> Result<()> {
        let mut ids = BTreeSet::new();
        for case in &self.cases {
            if !ids.insert(&case.id) {
                return Err(Error::InvalidConfig(format!("duplicate case id `{}`", case.id)));
            }
            if case.prompt.trim().is_empty() {
                return Err(Error::InvalidConfig(format!("case `{}` has an empty prompt", case.id)));
            }
            for p in [&case.content, &case.style_reference, &case.output] {
                if !base.join(p).is_file() {
                    return Err(Error::InvalidConfig(format!("case `{}`: {} does not exist", case.id, p.display())));
                }
            }
        }
        Ok(())
    }

    /// Instantiate the scorers; missing programs or cassettes are reported by name.
    pub fn build_scorers(&self, base: &Path) -> Result<Vec<Box<dyn Scorer>>> {
        self.scorers.iter().map(|s| build_scorer(s, base)).collect()
    }
}

fn build_scorer(spec: &ScorerSpec, base: &Path) -> Result<Box<dyn Scorer>> {
    Ok(match spec {
        ScorerSpec::MeanAbsDiff { metric, reference } => Box::new(MeanAbsDiffScorer::new(*metric, *reference)),
        ScorerSpec::ClipStub => Box::new(ClipStubScorer),
        ScorerSpec::External { metric, command } => Box::new(ExternalScorer::new(*metric, command)?),
        ScorerSpec::Judge {
            cassette,
            live,
            prompt_file,
        } => {
            let template = match prompt_file {
                Some(p) => {
                    let p = base.join(p);
                    std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?
                }
                None => DEFAULT_JUDGE_PROMPT.to_string(),
            };
            let cassette = base.join(cassette);
            let client: Box<dyn JudgeClient> = if *live {
                Box::new(RecordingJudge::new(CommandJudge::from_env()?, cassette))
            } else {
                Box::new(CassetteJudge::load(&cassette)?)
            };
            Box::new(JudgeScorer::new(client, template))
        }
    })
}

/// A case with its images loaded.
#[derive(Debug, Clone)]
pub struct LoadedCase {
    pub id: String,
    pub prompt: String,
    pub content: Image,
    pub style_reference: Image,
    pub output: Image,
    /// Absolute paths, for scorers that hand files to other programs.
    pub paths: [PathBuf; 3],
}

impl LoadedCase {
    pub fn load(case: &EvalCase, base: &Path) -> Result<Self> {
        let paths = [&case.content, &case.style_reference, &case.output].map(|p| base.join(p));
        Ok(Self {
            id: case.id.clone(),
            prompt: case.prompt.clone(),
            content: crate::io::read_image(&paths[0])?,
            style_reference: crate::io::read_image(&paths[1])?,
            output: crate::io::read_image(&paths[2])?,
            paths,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub case_id: String,
    pub metric: Metric,
    /// `None` when scoring this case failed; see `error`.
    pub value: Option<f64>,
    pub scorer_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Score every case with every scorer, in parallel over cases. Failures of a
/// single case are recorded rather than aborting the run. Records are sorted
/// by case id, then metric.
pub fn score(cases: &[EvalCase], base: &Path, scorers: &[Box<dyn Scorer>]) -> Vec<ScoreRecord> {
    let mut records: Vec<ScoreRecord> = cases
        .par_iter()
        .flat_map_iter(|case| {
            let loaded = LoadedCase::load(case, base);
            scorers
                .iter()
                .map(|s| {
                    let result = loaded.as_ref().map_err(|e| e.to_string()).and_then(|c| {
                        let v = s.score(c).map_err(|e| e.to_string())?;
                        check_range(s.metric(), v).map_err(|e| e.to_string())
                    });
                    ScoreRecord {
                        case_id: case.id.clone(),
                        metric: s.metric(),
                        value: result.as_ref().ok().copied(),
                        scorer_version: s.version(),
                        error: result.err(),
                    }
                })
                .collect::<Vec<_>>()
        })
        .collect();
    records.sort_by(|a, b| a.case_id.cmp(&b.case_id).then(a.metric.cmp(&b.metric)));
    records
}

fn check_range(metric: Metric, v: f64) -> Result<f64> {
    let (lo, hi) = metric.valid_range();
    if v.is_finite() && v >= lo && v <= hi {
        Ok(v)
    } else {
        Err(Error::format("score", format!("{} value {v} outside [{lo}, {hi}]", metric.name())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: Metric,
    pub direction: Direction,
    pub mean: f64,
    pub count: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub method: String,
    pub metrics: Vec<MetricSummary>,
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// A Markdown table: header, separator and one row for the method.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Method |");
        for m in &self.metrics {
            let _ = write!(out, " {} |", m.metric.header());
        }
        out.push_str("\n|---|");
        for _ in &self.metrics {
            out.push_str("---|");
        }
        let _ = write!(out, "\n{}\n", self.row());
        out
    }

    /// `| <method> | <mean> | ... |`.
    pub fn row(&self) -> String {
        let mut out = format!("| {} |", self.method);
        for m in &self.metrics {
            let _ = write!(out, " {:.*} |", m.metric.decimals(), m.mean);
        }
        out
    }
}

/// Per-metric means over successful records, in [`Metric::ALL`] order.
pub fn render_report(records: &[ScoreRecord], method: &str) -> Result<Report> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    let mut by_metric: BTreeMap<Metric, (Vec<f64>, usize)> = BTreeMap::new();
    for r in records {
        let entry = by_metric.entry(r.metric).or_default();
        match r.value {
            Some(v) => entry.0.push(v),
            None => entry.1 += 1,
        }
    }
    let metrics = Metric::ALL
        .iter()
        .filter_map(|m| by_metric.get(m).map(|(values, failures)| (*m, values, *failures)))
        .filter(|(_, values, _)| !values.is_empty())
        .map(|(metric, values, failures)| MetricSummary {
            metric,
            direction: metric.direction(),
            mean: values.iter().sum::<f64>() / values.len() as f64,
            count: values.len(),
            failures,
        })
        .collect::<Vec<_>>();
    if metrics.is_empty() {
        return Err(Error::EmptyRecords);
    }
    Ok(Report {
        method: method.to_string(),
        metrics,
    })
}

/// Write `report.json` and `report.md` into `dir`.
pub fn write_report(dir: &Path, report: &Report) -> Result<[PathBuf; 2]> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join("report.json");
    let md = dir.join("report.md");
    crate::io::atomic_write(&json, report.to_json().as_bytes())?;
    crate::io::atomic_write(&md, report.to_markdown().as_bytes())?;
    Ok([json, md])
}

/// Sample an image for `prompt` from seeded noise, without any injection.
pub fn build_style_reference(
    prompt: &str,
    backend: &dyn DiffusionBackend,
    seed: u64,
    height: usize,
    width: usize,
    guidance: f32,
) -> Result<Image> {
    let shape = backend.descriptor().latent_shape(height, width)?;
    let timesteps = backend.schedule().timesteps().to_vec();
    let embedding = backend.embed_prompt(&Prompt::from_optional(prompt))?;
    let hooks = HookBundle::default();
    let mut z = LatentTensor::gaussian(shape, seed, Some(timesteps[0]));
    for t in timesteps {
        z = backend.denoise_step(&z, t, &embedding, &hooks, guidance)?.latent;
    }
    backend.decode_latent(&z)
}
