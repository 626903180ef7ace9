//! Agents: scripted oracle policies, LLM-backed agents and a terminal human.
//!
//! Every agent answers two questions per month: how much to extract (asked
//! privately, before anyone else's choice is visible) and what to say during
//! the public discussion.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;
use thiserror::Error;

use crate::dynamics::{self, Direction, ResourceState};
use crate::engine::MonthRecord;
use crate::gateway::{ChatBackend, ChatMessage, GatewayError, SamplingParams};
use crate::scenario::{self, PackCatalog, ScenarioConfig, TemplateError, Transcript, TranscriptMonth};

/// Number of clarifying re-asks after an unparseable harvest answer.
pub const DEFAULT_REASKS: u32 = 2;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("aborted by {agent}: {reason}")]
    Aborted { agent: String, reason: String },
}

/// Deterministic policies used as oracles and for plumbing tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum ScriptedPolicy {
    /// Always request the current fair share.
    FairShare,
    /// Always request a fixed amount.
    Greedy {
        amount: f64,
    },
    /// Request `fraction * amount / n`.
    ProportionalGreedy {
        fraction: f64,
    },
    ZeroAction,
    /// Fair share until somebody over-extracted last month, then greedy.
    TitForTat {
        greedy: f64,
    },
    /// Fair share, plus one canned line per discussion.
    TemplateTalker,
}

impl fmt::Display for ScriptedPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScriptedPolicy::FairShare => write!(f, "fairshare"),
            ScriptedPolicy::Greedy { amount } => write!(f, "greedy{}", scenario::format_quantity(*amount)),
            ScriptedPolicy::ProportionalGreedy { fraction } => write!(f, "proportional{fraction}"),
            ScriptedPolicy::ZeroAction => write!(f, "zero"),
            ScriptedPolicy::TitForTat { greedy } => {
                write!(f, "titfortat{}", scenario::format_quantity(*greedy))
            }
            ScriptedPolicy::TemplateTalker => write!(f, "talker"),
        }
    }
}

impl FromStr for ScriptedPolicy {
    type Err = AgentError;

    /// Accepts `fairshare`, `greedy[N]`, `proportional<P>`, `zero`,
    /// `titfortat[N]` and `talker`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        let number = |rest: &str, default: Option<f64>| -> Result<f64, AgentError> {
            if rest.is_empty() {
                return default.ok_or_else(|| AgentError::Config(format!("policy '{s}' needs a parameter")));
            }
            rest.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v >= 0.0)
                .ok_or_else(|| AgentError::Config(format!("bad parameter in policy '{s}'")))
        };
        Ok(match lower.as_str() {
            "fairshare" | "fair" => ScriptedPolicy::FairShare,
            "zero" | "zeroaction" => ScriptedPolicy::ZeroAction,
            "talker" => ScriptedPolicy::TemplateTalker,
            _ => {
                if let Some(rest) = lower.strip_prefix("greedy") {
                    ScriptedPolicy::Greedy {
                        amount: number(rest, Some(20.0))?,
                    }
                } else if let Some(rest) = lower.strip_prefix("proportional") {
                    ScriptedPolicy::ProportionalGreedy {
                        fraction: number(rest, None)?,
                    }
                } else if let Some(rest) = lower.strip_prefix("titfortat") {
                    ScriptedPolicy::TitForTat {
                        greedy: number(rest, Some(20.0))?,
                    }
                } else {
                    return Err(AgentError::Config(format!("unknown policy '{s}'")));
                }
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AgentKind {
    Scripted(ScriptedPolicy),
    LlmBacked { model_key: String },
    Human,
}

impl AgentKind {
    pub fn label(&self) -> String {
        match self {
            AgentKind::Scripted(p) => p.to_string(),
            AgentKind::LlmBacked { model_key } => model_key.clone(),
            AgentKind::Human => "human".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub index: usize,
    pub name: String,
    pub kind: AgentKind,
    pub locale: String,
    pub universalization: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarvestDecision {
    pub agent_index: usize,
    pub requested: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
    /// Set when no quantity could be parsed and the fallback was used.
    #[serde(default)]
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub agent_index: usize,
    pub text: String,
    pub pass: bool,
}

impl Utterance {
    pub fn pass(agent_index: usize) -> Self {
        Self {
            agent_index,
            text: String::new(),
            pass: true,
        }
    }
}

/// What an agent may see when deciding its harvest. Other agents' requests
/// for the current month are not part of it.
pub struct HarvestContext<'a> {
    pub cfg: &'a ScenarioConfig,
    pub catalog: &'a PackCatalog,
    pub state: &'a ResourceState,
    pub history: &'a Transcript,
    pub records: &'a [MonthRecord],
}

pub struct DiscussionContext<'a> {
    pub cfg: &'a ScenarioConfig,
    pub catalog: &'a PackCatalog,
    /// Stock after this month's extraction.
    pub state: &'a ResourceState,
    pub history: &'a Transcript,
    pub current: &'a TranscriptMonth,
}

pub trait Agent: Send + Sync {
    fn spec(&self) -> &AgentSpec;
    fn decide(&self, ctx: &HarvestContext<'_>) -> Result<HarvestDecision, AgentError>;
    fn speak(&self, ctx: &DiscussionContext<'_>) -> Result<Utterance, AgentError>;
}

/// Fair share as a scripted agent would request it: rounded towards
/// sustainability (down for goods, up for bads) under integer quantization.
fn scripted_fair_share(state: &ResourceState, cfg: &ScenarioConfig) -> f64 {
    let share = dynamics::fair_share(state, &cfg.dynamics, cfg.n_agents);
    match (cfg.quantization, cfg.dynamics.direction) {
        (scenario::Quantization::Real, _) => share,
        (_, Direction::HarvestGood) => (share + dynamics::EPS).floor(),
        (_, Direction::RemoveBad) => (share - dynamics::EPS).ceil(),
    }
}

fn exceeded_share(record: &MonthRecord, direction: Direction) -> bool {
    record.requests.iter().any(|&r| match direction {
        Direction::HarvestGood => r > record.fair_share + dynamics::EPS,
        Direction::RemoveBad => r + dynamics::EPS < record.fair_share,
    })
}

/// Pure decision rule for a scripted policy.
pub fn decide_scripted(
    policy: &ScriptedPolicy,
    agent_index: usize,
    state: &ResourceState,
    cfg: &ScenarioConfig,
    records: &[MonthRecord],
) -> HarvestDecision {
    let requested = match policy {
        ScriptedPolicy::FairShare | ScriptedPolicy::TemplateTalker => scripted_fair_share(state, cfg),
        ScriptedPolicy::Greedy { amount } => *amount,
        ScriptedPolicy::ProportionalGreedy { fraction } => fraction * state.amount / cfg.n_agents as f64,
        ScriptedPolicy::ZeroAction => 0.0,
        ScriptedPolicy::TitForTat { greedy } => match records.last() {
            Some(last) if exceeded_share(last, cfg.dynamics.direction) => *greedy,
            _ => scripted_fair_share(state, cfg),
        },
    };
    HarvestDecision {
        agent_index,
        requested,
        raw_text: None,
        flagged: false,
    }
}

pub struct ScriptedAgent {
    spec: AgentSpec,
    policy: ScriptedPolicy,
}

impl ScriptedAgent {
    pub fn new(spec: AgentSpec) -> Result<Self, AgentError> {
        match &spec.kind {
            AgentKind::Scripted(p) => Ok(Self {
                policy: p.clone(),
                spec,
            }),
            other => Err(AgentError::Config(format!(
                "agent {} is not scripted ({})",
                spec.name,
                other.label()
            ))),
        }
    }
}

impl Agent for ScriptedAgent {
    fn spec(&self) -> &AgentSpec {
        &self.spec
    }

    fn decide(&self, ctx: &HarvestContext<'_>) -> Result<HarvestDecision, AgentError> {
        Ok(decide_scripted(
            &self.policy,
            self.spec.index,
            ctx.state,
            ctx.cfg,
            ctx.records,
        ))
    }

    fn speak(&self, ctx: &DiscussionContext<'_>) -> Result<Utterance, AgentError> {
        if self.policy != ScriptedPolicy::TemplateTalker {
            return Ok(Utterance::pass(self.spec.index));
        }
        let already = ctx.current.turns.iter().any(|t| t.speaker == self.spec.name);
        if already {
            return Ok(Utterance::pass(self.spec.index));
        }
        Ok(Utterance {
            agent_index: self.spec.index,
            text: scenario::render_talker_line(ctx.cfg, ctx.catalog, &self.spec, ctx.state)?,
            pass: false,
        })
    }
}

/// An agent whose decisions come from a chat-completion model.
pub struct LlmAgent {
    spec: AgentSpec,
    model_key: String,
    backend: Arc<dyn ChatBackend>,
    sampling: SamplingParams,
    reasks: u32,
}

impl LlmAgent {
    pub fn new(spec: AgentSpec, backend: Arc<dyn ChatBackend>, sampling: SamplingParams) -> Result<Self, AgentError> {
        let model_key = match &spec.kind {
            AgentKind::LlmBacked { model_key } => model_key.clone(),
            other => {
                return Err(AgentError::Config(format!(
                    "agent {} is not model-backed ({})",
                    spec.name,
                    other.label()
                )))
            }
        };
        Ok(Self {
            spec,
            model_key,
            backend,
            sampling,
            reasks: DEFAULT_REASKS,
        })
    }

    pub fn with_reasks(mut self, reasks: u32) -> Self {
        self.reasks = reasks;
        self
    }
}

impl Agent for LlmAgent {
    fn spec(&self) -> &AgentSpec {
        &self.spec
    }

    fn decide(&self, ctx: &HarvestContext<'_>) -> Result<HarvestDecision, AgentError> {
        let prompt = scenario::render_harvest_prompt(ctx.cfg, ctx.catalog, &self.spec, ctx.state, ctx.history)?;
        let mut messages = vec![ChatMessage::system(prompt.system), ChatMessage::user(prompt.user)];
        let capacity = ctx.cfg.dynamics.capacity;
        let mut last = String::new();
        for attempt in 0..=self.reasks {
            if attempt > 0 {
                messages.push(ChatMessage::assistant(last.clone()));
                messages.push(ChatMessage::user(scenario::render_reask(
                    ctx.cfg,
                    ctx.catalog,
                    &self.spec,
                    ctx.state,
                )?));
            }
            last = self.backend.complete(&self.model_key, &messages, &self.sampling)?.text;
            if let Ok(q) = parse_quantity(&last, capacity) {
                return Ok(HarvestDecision {
                    agent_index: self.spec.index,
                    requested: q,
                    raw_text: Some(last),
                    flagged: false,
                });
            }
            log::warn!(
                "{}: no quantity in completion (attempt {})",
                self.spec.name,
                attempt + 1
            );
        }
        Ok(HarvestDecision {
            agent_index: self.spec.index,
            requested: 0.0,
            raw_text: Some(last),
            flagged: true,
        })
    }

    fn speak(&self, ctx: &DiscussionContext<'_>) -> Result<Utterance, AgentError> {
        let prompt =
            scenario::render_discussion_prompt(ctx.cfg, ctx.catalog, &self.spec, ctx.state, ctx.history, ctx.current)?;
        let messages = [ChatMessage::system(prompt.system), ChatMessage::user(prompt.user)];
        let text = self.backend.complete(&self.model_key, &messages, &self.sampling)?.text;
        let pass_token = ctx
            .catalog
            .resolve(
                ctx.cfg.name,
                &self.spec.locale,
                scenario::TemplateKey::DiscussionInstruction,
            )?
            .pass_token();
        let trimmed = text.trim();
        if trimmed == pass_token || trimmed.is_empty() {
            return Ok(Utterance::pass(self.spec.index));
        }
        Ok(Utterance {
            agent_index: self.spec.index,
            text: trimmed.to_string(),
            pass: false,
        })
    }
}

/// Line-oriented terminal used by the human agent.
pub trait HumanConsole: Send {
    fn show(&mut self, text: &str);
    /// `Ok(None)` on end of input.
    fn read_line(&mut self) -> std::io::Result<Option<String>>;
}

/// Console over arbitrary reader/writer pairs, e.g. stdin/stdout.
pub struct StreamConsole<R, W> {
    input: R,
    output: W,
}

impl<R: BufRead + Send, W: Write + Send> StreamConsole<R, W> {
    pub fn new(input: R, output: W) -> Self {
        Self { input, output }
    }

    pub fn output(&self) -> &W {
        &self.output
    }

    pub fn into_output(self) -> W {
        self.output
    }
}

impl<R: BufRead + Send, W: Write + Send> HumanConsole for StreamConsole<R, W> {
    fn show(&mut self, text: &str) {
        let _ = writeln!(self.output, "{text}");
        let _ = self.output.flush();
    }

    fn read_line(&mut self) -> std::io::Result<Option<String>> {
        let mut line = String::new();
        if self.input.read_line(&mut line)? == 0 {
            return Ok(None);
        }
        Ok(Some(line.trim_end_matches(['\r', '\n']).to_string()))
    }
}

pub struct HumanAgent {
    spec: AgentSpec,
    console: Arc<Mutex<dyn HumanConsole>>,
}

impl HumanAgent {
    pub fn new(spec: AgentSpec, console: Arc<Mutex<dyn HumanConsole>>) -> Self {
        Self { spec, console }
    }

    fn read(&self, console: &mut dyn HumanConsole) -> Result<String, AgentError> {
        match console.read_line() {
            Ok(Some(line)) => Ok(line),
            Ok(None) => Err(AgentError::Aborted {
                agent: self.spec.name.clone(),
                reason: "end of input".into(),
            }),
            Err(e) => Err(AgentError::Aborted {
                agent: self.spec.name.clone(),
                reason: e.to_string(),
            }),
        }
    }
}

impl Agent for HumanAgent {
    fn spec(&self) -> &AgentSpec {
        &self.spec
    }

    fn decide(&self, ctx: &HarvestContext<'_>) -> Result<HarvestDecision, AgentError> {
        let prompt = scenario::render_harvest_prompt(ctx.cfg, ctx.catalog, &self.spec, ctx.state, ctx.history)?;
        let mut console = self.console.lock().expect("console lock poisoned");
        console.show(&prompt.full_text());
        let capacity = ctx.cfg.dynamics.capacity;
        loop {
            console.show("> your decision:");
            let line = self.read(&mut *console)?;
            match parse_quantity(&line, capacity) {
                Ok(q) => {
                    return Ok(HarvestDecision {
                        agent_index: self.spec.index,
                        requested: q,
                        raw_text: Some(line),
                        flagged: false,
                    })
                }
                Err(_) => console.show(&format!(
                    "Please enter a nonnegative number no larger than {}.",
                    scenario::format_quantity(MAX_PLAUSIBLE_FACTOR * capacity)
                )),
            }
        }
    }

    fn speak(&self, ctx: &DiscussionContext<'_>) -> Result<Utterance, AgentError> {
        let prompt =
            scenario::render_discussion_prompt(ctx.cfg, ctx.catalog, &self.spec, ctx.state, ctx.history, ctx.current)?;
        let pass_token = ctx
            .catalog
            .resolve(
                ctx.cfg.name,
                &self.spec.locale,
                scenario::TemplateKey::DiscussionInstruction,
            )?
            .pass_token()
            .to_string();
        let mut console = self.console.lock().expect("console lock poisoned");
        console.show(&prompt.user);
        console.show("> your message:");
        let line = self.read(&mut *console)?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed == pass_token {
            return Ok(Utterance::pass(self.spec.index));
        }
        Ok(Utterance {
            agent_index: self.spec.index,
            text: trimmed.to_string(),
            pass: false,
        })
    }
}

/// Quantities above this multiple of capacity are treated as implausible.
pub const MAX_PLAUSIBLE_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no quantity found: {0}")]
pub struct ParseFailure(pub String);

#[derive(Debug, Clone, Copy)]
struct NumberToken {
    value: f64,
    negative: bool,
    standalone: bool,
}

fn number_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\d{1,3}(?:,\d{3})+(?:\.\d+)?|\d+(?:\.\d+)?").unwrap())
}

fn marker_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)(?:final\s+answer|<answer>|\banswer\s*[:=])[^0-9\n-]{0,12}(-?\d{1,3}(?:,\d{3})+(?:\.\d+)?|-?\d+(?:\.\d+)?)",
        )
        .unwrap()
    })
}

fn unit_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)(-?\d{1,3}(?:,\d{3})+(?:\.\d+)?|-?\d+(?:\.\d+)?)\s*(?:tons?|tonnes?|units?|hectares?)\b")
            .unwrap()
    })
}

fn parse_number(s: &str) -> Option<f64> {
    s.replace(',', "").parse::<f64>().ok().filter(|v| v.is_finite())
}

fn tokens(text: &str) -> Vec<NumberToken> {
    let bytes = text.as_bytes();
    let word = |b: u8| b.is_ascii_alphanumeric() || b == b'_';
    number_regex()
        .find_iter(text)
        .filter_map(|m| {
            let value = parse_number(m.as_str())?;
            let before = m.start().checked_sub(1).map(|i| bytes[i]);
            let before2 = m.start().checked_sub(2).map(|i| bytes[i]);
            let after = bytes.get(m.end()).copied();
            let after_ok = !after.is_some_and(word);
            let (negative, standalone) = match before {
                Some(b'-') if !before2.is_some_and(word) => (true, after_ok),
                Some(b'-') => (false, false),
                Some(b) if word(b) || b == b'.' => (false, false),
                _ => (false, after_ok),
            };
            Some(NumberToken {
                value,
                negative,
                standalone,
            })
        })
        .collect()
}

/// Extracts a harvest quantity from free text.
///
/// Priority: an explicit answer marker ("Final answer: N", `<answer>N</answer>`,
/// "Answer: N"), then the last line mentioning "N tons/units", then the last
/// standalone nonnegative number. Negative values and values above
/// `10 * capacity` are rejected.
pub fn parse_quantity(text: &str, capacity: f64) -> Result<f64, ParseFailure> {
    let limit = MAX_PLAUSIBLE_FACTOR * capacity;
    let check = |v: f64| -> Result<f64, ParseFailure> {
        if v < 0.0 {
            Err(ParseFailure(format!("negative quantity {v}")))
        } else if v > limit {
            Err(ParseFailure(format!("implausible quantity {v}")))
        } else {
            Ok(v)
        }
    };

    if let Some(c) = marker_regex().captures_iter(text).last() {
        let v = parse_number(&c[1]).ok_or_else(|| ParseFailure("bad number after marker".into()))?;
        return check(v);
    }

    if let Some(line) = text.lines().rev().find(|l| unit_regex().is_match(l)) {
        let c = unit_regex().captures_iter(line).last().expect("line matched");
        let raw = &c[1];
        if let Some(v) = parse_number(raw) {
            if !raw.starts_with('-') {
                return check(v);
            }
        }
    }

    tokens(text)
        .into_iter()
        .rev()
        .find(|t| t.standalone && !t.negative && t.value <= limit)
        .map(|t| t.value)
        .ok_or_else(|| ParseFailure("no standalone nonnegative number".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parser_examples() {
        assert_eq!(parse_quantity("I will catch 10 tons this month.", 100.0), Ok(10.0));
        assert_eq!(parse_quantity("I'll take 20 tons.", 100.0), Ok(20.0));
        assert_eq!(parse_quantity("between 5 and 10, so 7", 100.0), Ok(7.0));
        assert!(parse_quantity("zero", 100.0).is_err());
        assert_eq!(
            parse_quantity("The lake has 100 tons and 5 others fish.\nFinal answer: 15", 100.0),
            Ok(15.0)
        );
        assert_eq!(parse_quantity("<answer> 12 </answer>", 100.0), Ok(12.0));
        assert!(parse_quantity("-3", 100.0).is_err());
        assert!(parse_quantity("Final answer: -3", 100.0).is_err());
        assert!(parse_quantity("Final answer: 5000", 100.0).is_err());
        assert_eq!(parse_quantity("GPT-4o says 9", 100.0), Ok(9.0));
        assert_eq!(parse_quantity("a 10-ton limit, so 8", 100.0), Ok(8.0));
        assert_eq!(parse_quantity("  6 ", 100.0), Ok(6.0));
    }

    #[test]
    fn policy_ids() {
        assert_eq!(
            "fairshare".parse::<ScriptedPolicy>().unwrap(),
            ScriptedPolicy::FairShare
        );
        assert_eq!(
            "greedy20".parse::<ScriptedPolicy>().unwrap(),
            ScriptedPolicy::Greedy { amount: 20.0 }
        );
        assert_eq!(
            "greedy".parse::<ScriptedPolicy>().unwrap(),
            ScriptedPolicy::Greedy { amount: 20.0 }
        );
        assert_eq!(
            "proportional0.5".parse::<ScriptedPolicy>().unwrap(),
            ScriptedPolicy::ProportionalGreedy { fraction: 0.5 }
        );
        assert!("proportional".parse::<ScriptedPolicy>().is_err());
        assert!("mystery".parse::<ScriptedPolicy>().is_err());
        for p in [
            "fairshare",
            "greedy15",
            "zero",
            "titfortat20",
            "talker",
            "proportional0.5",
        ] {
            let parsed: ScriptedPolicy = p.parse().unwrap();
            assert_eq!(parsed.to_string(), p);
        }
    }

    fn at(amount: f64) -> ResourceState {
        ResourceState {
            amount,
            month: 1,
            collapsed: false,
        }
    }

    #[test]
    fn scripted_examples() {
        let cfg = ScenarioConfig::fishery();
        let d = |p: ScriptedPolicy, amount: f64| decide_scripted(&p, 0, &at(amount), &cfg, &[]).requested;
        assert_eq!(d(ScriptedPolicy::FairShare, 100.0), 10.0);
        assert_eq!(d(ScriptedPolicy::Greedy { amount: 20.0 }, 100.0), 20.0);
        assert_eq!(d(ScriptedPolicy::ZeroAction, 100.0), 0.0);
        assert_eq!(d(ScriptedPolicy::ProportionalGreedy { fraction: 0.5 }, 100.0), 10.0);
        // 75 -> threshold 37.5 -> share 7.5, floored for a good
        assert_eq!(d(ScriptedPolicy::FairShare, 75.0), 7.0);

        let trash = ScenarioConfig::trash();
        let share = decide_scripted(&ScriptedPolicy::FairShare, 0, &at(75.0), &trash, &[]).requested;
        assert_eq!(share, 8.0);
    }

    #[test]
    fn tit_for_tat_retaliates() {
        let cfg = ScenarioConfig::fishery();
        let policy = ScriptedPolicy::TitForTat { greedy: 20.0 };
        let mut record = MonthRecord::empty_for_tests(1, 5);
        record.fair_share = 10.0;
        record.requests = vec![10.0; 5];
        assert_eq!(
            decide_scripted(&policy, 0, &at(100.0), &cfg, &[record.clone()]).requested,
            10.0
        );
        record.requests[3] = 11.0;
        assert_eq!(decide_scripted(&policy, 0, &at(100.0), &cfg, &[record]).requested, 20.0);
    }

    proptest! {
        #[test]
        fn parse_quantity_is_total(text in ".{0,80}") {
            if let Ok(q) = parse_quantity(&text, 100.0) {
                prop_assert!((0.0..=1000.0).contains(&q));
            }
        }

        #[test]
        fn parse_quantity_with_digits(prefix in "[a-z ,.]{0,20}", n in 0u32..2000, suffix in "[a-z ]{0,10}") {
            let text = format!("{prefix} {n} {suffix}");
            if let Ok(q) = parse_quantity(&text, 100.0) {
                prop_assert!((0.0..=1000.0).contains(&q));
            }
        }
    }
}
