use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::scorers::{CassetteEntry, Scorer};
use super::{LoadedCase, Metric};
use crate::error::{Error, Result};
use crate::tensor::Image;

/// Whitespace-separated command used for live judging. It receives a
/// [`JudgeExchange`] request as JSON on stdin and prints the reply. Endpoint
/// and credentials are left to that program's own environment.
pub const JUDGE_COMMAND_ENV: &str = "GLYPHSTYLE_JUDGE_COMMAND";

/// What is sent to the judge for one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeExchange {
    /// Stable lookup key: case id plus a digest of the output pixels.
    pub key: String,
    pub instruction: String,
    pub image: PathBuf,
}

pub trait JudgeClient: Send + Sync {
    fn version(&self) -> String;
    fn ask(&self, request: &JudgeExchange) -> Result<String>;
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Cassette {
    entries: Vec<CassetteEntry>,
}

/// Replays judge replies recorded earlier, keyed by [`JudgeExchange::key`].
#[derive(Debug)]
pub struct CassetteJudge {
    path: PathBuf,
    replies: HashMap<String, CassetteEntry>,
}

impl CassetteJudge {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::ScorerUnavailable(format!("LLM-judge cassette {}: {e}", path.display())))?;
        let cassette: Cassette = serde_json::from_str(&text).map_err(|e| Error::format("judge cassette", e))?;
        Ok(Self {
            path: path.to_path_buf(),
            replies: cassette.entries.into_iter().map(|e| (e.key.clone(), e)).collect(),
        })
    }
}

impl JudgeClient for CassetteJudge {
    fn version(&self) -> String {
        format!("cassette:{}", self.path.file_name().unwrap_or_default().to_string_lossy())
    }

    fn ask(&self, request: &JudgeExchange) -> Result<String> {
        let entry = self
            .replies
            .get(&request.key)
            .ok_or_else(|| Error::ScorerUnavailable(format!("no recorded judge reply for `{}`", request.key)))?;
        if entry.request != request.instruction {
            return Err(Error::ScorerUnavailable(format!(
                "recorded judge instruction for `{}` differs from the current one",
                request.key
            )));
        }
        Ok(entry.response.clone())
    }
}

/// Live judge backed by an external program (see [`JUDGE_COMMAND_ENV`]).
#[derive(Debug, Clone)]
pub struct CommandJudge {
    program: String,
    args: Vec<String>,
}

impl CommandJudge {
    pub fn new(command: &[String]) -> Result<Self> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| Error::ScorerUnavailable("LLM-judge: empty command".into()))?;
        Ok(Self {
            program: program.clone(),
            args: args.to_vec(),
        })
    }

    pub fn from_env() -> Result<Self> {
        let command = std::env::var(JUDGE_COMMAND_ENV)
            .map_err(|_| Error::ScorerUnavailable(format!("LLM-judge: ${JUDGE_COMMAND_ENV} is not set")))?;
        Self::new(&command.split_whitespace().map(str::to_string).collect::<Vec<_>>())
    }
}

impl JudgeClient for CommandJudge {
    fn version(&self) -> String {
        format!("command:{}", self.program)
    }

    fn ask(&self, request: &JudgeExchange) -> Result<String> {
        let unavailable = |e: std::io::Error| Error::ScorerUnavailable(format!("LLM-judge `{}`: {e}", self.program));
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(unavailable)?;
        let body = serde_json::to_vec(request).map_err(|e| Error::format("judge request", e))?;
        child.stdin.take().expect("piped stdin").write_all(&body).map_err(unavailable)?;
        let out = child.wait_with_output().map_err(unavailable)?;
        if !out.status.success() {
            return Err(Error::ScorerUnavailable(format!("LLM-judge `{}` exited with {}", self.program, out.status)));
        }
        Ok(String::from_utf8_lossy(&out.stdout).trim().to_string())
    }
}

/// Forwards to another client and appends every exchange to a cassette.
pub struct RecordingJudge<C> {
    inner: C,
    path: PathBuf,
    recorded: Mutex<Cassette>,
}

impl<C: JudgeClient> RecordingJudge<C> {
    pub fn new(inner: C, path: PathBuf) -> Self {
        let recorded = std::fs::read_to_string(&path)
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or_default();
        Self {
            inner,
            path,
            recorded: Mutex::new(recorded),
        }
    }
}

impl<C: JudgeClient> JudgeClient for RecordingJudge<C> {
    fn version(&self) -> String {
        self.inner.version()
    }

    fn ask(&self, request: &JudgeExchange) -> Result<String> {
        let response = self.inner.ask(request)?;
        let mut cassette = self.recorded.lock().expect("cassette lock");
        cassette.entries.retain(|e| e.key != request.key);
        cassette.entries.push(CassetteEntry {
            key: request.key.clone(),
            request: request.instruction.clone(),
            response: response.clone(),
        });
        cassette.entries.sort_by(|a, b| a.key.cmp(&b.key));
        let text = serde_json::to_string_pretty(&*cassette).map_err(|e| Error::format("judge cassette", e))?;
        crate::io::atomic_write(&self.path, text.as_bytes())?;
        Ok(response)
    }
}

/// Hash of the quantized 8-bit pixels, so re-encoded PNGs keep their key.
fn pixel_digest(image: &Image) -> u64 {
    let bytes: Vec<u8> = image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    crate::backend::fnv1a(&bytes)
}

/// First decimal number in `reply`.
fn parse_score(reply: &str) -> Result<f64> {
    let start = reply.find(|c: char| c.is_ascii_digit());
    let number = start.map(|s| {
        let rest = &reply[s..];
        let end = rest.find(|c: char| !(c.is_ascii_digit() || c == '.')).unwrap_or(rest.len());
        rest[..end].trim_end_matches('.')
    });
    number
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| Error::format("judge reply", format!("no score in {reply:?}")))
}

/// LLM-judge scorer: fills `{prompt}` in the instruction template, asks the
/// client and parses the first number of the reply.
pub struct JudgeScorer {
    client: Box<dyn JudgeClient>,
    template: String,
}

impl JudgeScorer {
    pub fn new(client: Box<dyn JudgeClient>, template: String) -> Self {
        Self { client, template }
    }

    pub fn request(&self, case: &LoadedCase) -> JudgeExchange {
        JudgeExchange {
            key: format!("{}:{:016x}", case.id, pixel_digest(&case.output)),
            instruction: self.template.replace("{prompt}", &case.prompt),
            image: case.paths[2].clone(),
        }
    }
}

impl Scorer for JudgeScorer {
    fn metric(&self) -> Metric {
        Metric::LlmJudge
    }

    fn version(&self) -> String {
        format!("llm-judge/{}", self.client.version())
    }

    fn score(&self, case: &LoadedCase) -> Result<f64> {
        parse_score(&self.client.ask(&self.request(case))?)
    }
}
