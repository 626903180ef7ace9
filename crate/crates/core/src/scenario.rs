//! Scenario presets and the locale-keyed prompt templates that frame them.
//!
//! All four scenarios share the same resource arithmetic; they differ in the
//! narrative text agents see and, for trash, in the direction of the stock.
//! Prompt text lives in locale packs (TOML files, one per scenario and
//! locale). English packs are compiled in; other locales are loaded from disk.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::AgentSpec;
use crate::dynamics::{self, Direction, DynamicsParams, ResourceState};

pub const DEFAULT_AGENT_NAMES: [&str; 5] = ["John", "Kate", "Jack", "Emma", "Luke"];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Invalid(String),
    #[error("failed to read preset {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("failed to parse preset {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

#[derive(Debug, Error, PartialEq)]
pub enum TemplateError {
    #[error("no template '{key}' for locale '{locale}' (scenario {scenario})")]
    Missing {
        key: String,
        locale: String,
        scenario: String,
    },
    #[error("locale pack {path} is missing keys: {}", missing.join(", "))]
    Incomplete { path: String, missing: Vec<String> },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("template '{key}' ({locale}) references {{{placeholder}}} but no value was supplied")]
    MissingPlaceholder {
        key: String,
        locale: String,
        placeholder: String,
    },
    #[error("announcement needs at least one report line")]
    EmptyReport,
    #[error("failed to read locale pack {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioName {
    Fishery,
    Pasture,
    Pollution,
    Trash,
}

impl ScenarioName {
    pub const ALL: [ScenarioName; 4] = [
        ScenarioName::Fishery,
        ScenarioName::Pasture,
        ScenarioName::Pollution,
        ScenarioName::Trash,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioName::Fishery => "fishery",
            ScenarioName::Pasture => "pasture",
            ScenarioName::Pollution => "pollution",
            ScenarioName::Trash => "trash",
        }
    }

    pub fn direction(self) -> Direction {
        match self {
            ScenarioName::Trash => Direction::RemoveBad,
            _ => Direction::HarvestGood,
        }
    }
}

impl fmt::Display for ScenarioName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioName {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ScenarioName::ALL
            .into_iter()
            .find(|n| n.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| ConfigError::Invalid(format!("unknown scenario '{s}'")))
    }
}

/// How monthly harvests are made public. Only the centralized announcer is
/// implemented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Observation {
    Manager,
    Individual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quantization {
    /// Requests are floored to whole units.
    Integer,
    Real,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: ScenarioName,
    pub dynamics: DynamicsParams,
    pub n_agents: usize,
    pub agent_names: Vec<String>,
    pub announcer_title: String,
    pub locale: String,
    pub universalization: bool,
    pub max_conversation_steps: u32,
    pub cot_suffix: bool,
    pub seed: u64,
    pub runs: u32,
    pub observation: Observation,
    pub quantization: Quantization,
    /// Per-agent loss assigned to a run with zero removal (trash only).
    pub loss_constant: f64,
}

impl ScenarioConfig {
    pub fn preset(name: ScenarioName) -> Self {
        let (dynamics, announcer, runs) = match name {
            ScenarioName::Trash => (DynamicsParams::remove_default(), "Landlord", 5),
            _ => (DynamicsParams::harvest_default(), "Mayor", 3),
        };
        Self {
            name,
            dynamics,
            n_agents: 5,
            agent_names: DEFAULT_AGENT_NAMES.iter().map(|s| s.to_string()).collect(),
            announcer_title: announcer.to_string(),
            locale: "en".to_string(),
            universalization: false,
            max_conversation_steps: 10,
            cot_suffix: true,
            seed: 42,
            runs,
            observation: Observation::Manager,
            quantization: Quantization::Integer,
            loss_constant: 130.0,
        }
    }

    pub fn fishery() -> Self {
        Self::preset(ScenarioName::Fishery)
    }

    pub fn trash() -> Self {
        Self::preset(ScenarioName::Trash)
    }

    /// Sets the population size, reusing the default names where possible.
    pub fn with_agents(mut self, n: usize) -> Self {
        self.n_agents = n;
        self.agent_names = (0..n)
            .map(|i| {
                DEFAULT_AGENT_NAMES
                    .get(i)
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| format!("Agent{}", i + 1))
            })
            .collect();
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.dynamics
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.n_agents == 0 {
            return Err(ConfigError::Invalid("at least one agent is required".into()));
        }
        if self.agent_names.len() != self.n_agents {
            return Err(ConfigError::Invalid(format!(
                "{} agent names given for {} agents",
                self.agent_names.len(),
                self.n_agents
            )));
        }
        if self.name.direction() != self.dynamics.direction {
            return Err(ConfigError::Invalid(format!(
                "scenario {} requires direction {:?}",
                self.name,
                self.name.direction()
            )));
        }
        if self.max_conversation_steps == 0 {
            return Err(ConfigError::Invalid("max_conversation_steps must be positive".into()));
        }
        if self.runs == 0 {
            return Err(ConfigError::Invalid("runs must be positive".into()));
        }
        if self.observation != Observation::Manager {
            return Err(ConfigError::Invalid(
                "only the manager observation strategy is supported".into(),
            ));
        }
        if !(self.loss_constant.is_finite() && self.loss_constant >= 0.0) {
            return Err(ConfigError::Invalid("loss_constant must be nonnegative".into()));
        }
        Ok(())
    }

    /// Parses a preset file: a `scenario` key selecting the base preset plus
    /// any subset of fields overriding it.
    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let parse_err = |message: String| ConfigError::Parse {
            path: path.to_path_buf(),
            message,
        };
        let file: PresetFile = toml::from_str(text).map_err(|e| parse_err(e.to_string()))?;
        let mut cfg = Self::preset(file.scenario);
        if let Some(d) = file.dynamics {
            d.apply(&mut cfg.dynamics);
        }
        if let Some(n) = file.n_agents {
            cfg = cfg.with_agents(n);
        }
        macro_rules! overlay {
            ($($field:ident),*) => { $(if let Some(v) = file.$field { cfg.$field = v; })* };
        }
        overlay!(
            agent_names,
            announcer_title,
            locale,
            universalization,
            max_conversation_steps,
            cot_suffix,
            seed,
            runs,
            observation,
            quantization,
            loss_constant
        );
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text, path)
    }

    /// One-line summary of the core parameters.
    pub fn summary_line(&self) -> String {
        format!(
            "agents={} growth={} collapse={} initial={} horizon={} maxConversationSteps={} seed={}",
            self.n_agents,
            format_quantity(self.dynamics.growth_factor),
            format_quantity(self.dynamics.collapse_threshold),
            format_quantity(self.dynamics.initial_amount),
            self.dynamics.horizon,
            self.max_conversation_steps,
            self.seed
        )
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PresetFile {
    scenario: ScenarioName,
    dynamics: Option<DynamicsOverrides>,
    n_agents: Option<usize>,
    agent_names: Option<Vec<String>>,
    announcer_title: Option<String>,
    locale: Option<String>,
    universalization: Option<bool>,
    max_conversation_steps: Option<u32>,
    cot_suffix: Option<bool>,
    seed: Option<u64>,
    runs: Option<u32>,
    observation: Option<Observation>,
    quantization: Option<Quantization>,
    loss_constant: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DynamicsOverrides {
    capacity: Option<f64>,
    growth_factor: Option<f64>,
    collapse_threshold: Option<f64>,
    horizon: Option<u32>,
    initial_amount: Option<f64>,
}

impl DynamicsOverrides {
    fn apply(self, d: &mut DynamicsParams) {
        if let Some(v) = self.capacity {
            d.capacity = v;
        }
        if let Some(v) = self.growth_factor {
            d.growth_factor = v;
        }
        if let Some(v) = self.collapse_threshold {
            d.collapse_threshold = v;
        }
        if let Some(v) = self.horizon {
            d.horizon = v;
        }
        if let Some(v) = self.initial_amount {
            d.initial_amount = v;
        }
    }
}

/// Renders a quantity the way the reports speak: whole numbers without a
/// decimal point, otherwise up to two decimals.
pub fn format_quantity(x: f64) -> String {
    let rounded = (x * 100.0).round() / 100.0;
    if (rounded - rounded.round()).abs() < 1e-9 {
        format!("{}", rounded.round() as i64)
    } else {
        let s = format!("{rounded:.2}");
        s.trim_end_matches('0').to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TemplateKey {
    #[serde(rename = "systemIntro")]
    SystemIntro,
    #[serde(rename = "harvestInstruction")]
    HarvestInstruction,
    #[serde(rename = "universalizationHint")]
    UniversalizationHint,
    #[serde(rename = "announcement")]
    Announcement,
    #[serde(rename = "discussionInstruction")]
    DiscussionInstruction,
    #[serde(rename = "cotSuffix")]
    CotSuffix,
}

impl TemplateKey {
    pub const ALL: [TemplateKey; 6] = [
        TemplateKey::SystemIntro,
        TemplateKey::HarvestInstruction,
        TemplateKey::UniversalizationHint,
        TemplateKey::Announcement,
        TemplateKey::DiscussionInstruction,
        TemplateKey::CotSuffix,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateKey::SystemIntro => "systemIntro",
            TemplateKey::HarvestInstruction => "harvestInstruction",
            TemplateKey::UniversalizationHint => "universalizationHint",
            TemplateKey::Announcement => "announcement",
            TemplateKey::DiscussionInstruction => "discussionInstruction",
            TemplateKey::CotSuffix => "cotSuffix",
        }
    }
}

/// Short phrases every pack must also provide.
pub const PHRASE_KEYS: [&str; 6] = [
    "reportLine",
    "historyHeader",
    "currentHeader",
    "reask",
    "passToken",
    "talkerLine",
];

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    Slot(String),
}

/// A template body split into literal text and `{name}` placeholders.
/// `{{` and `}}` produce literal braces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub key: String,
    pub locale: String,
    pub body: String,
    segments: Vec<Segment>,
}

/// Placeholder syntax error at a byte offset of the scanned text.
#[derive(Debug)]
struct SyntaxError {
    offset: usize,
    message: String,
}

fn parse_segments(body: &str) -> Result<Vec<Segment>, SyntaxError> {
    let mut segments = Vec::new();
    let mut text = String::new();
    let mut chars = body.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        match c {
            '{' if matches!(chars.peek(), Some((_, '{'))) => {
                chars.next();
                text.push('{');
            }
            '}' if matches!(chars.peek(), Some((_, '}'))) => {
                chars.next();
                text.push('}');
            }
            '{' => {
                let mut name = String::new();
                let mut closed = false;
                for (_, c) in chars.by_ref() {
                    if c == '}' {
                        closed = true;
                        break;
                    }
                    name.push(c);
                }
                if !closed {
                    return Err(SyntaxError {
                        offset: i,
                        message: "unterminated placeholder".into(),
                    });
                }
                let valid = name.chars().next().is_some_and(|c| c.is_ascii_alphabetic())
                    && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
                if !valid {
                    return Err(SyntaxError {
                        offset: i,
                        message: format!("malformed placeholder {{{name}}}"),
                    });
                }
                if !text.is_empty() {
                    segments.push(Segment::Text(std::mem::take(&mut text)));
                }
                segments.push(Segment::Slot(name));
            }
            '}' => {
                return Err(SyntaxError {
                    offset: i,
                    message: "unmatched '}'".into(),
                })
            }
            c => text.push(c),
        }
    }
    if !text.is_empty() {
        segments.push(Segment::Text(text));
    }
    Ok(segments)
}

impl PromptTemplate {
    pub fn parse(key: &str, locale: &str, body: &str) -> Result<Self, TemplateError> {
        let segments = parse_segments(body).map_err(|e| TemplateError::Parse {
            path: format!("<{key}>"),
            line: 1 + body[..e.offset].matches('\n').count(),
            message: e.message,
        })?;
        Ok(Self {
            key: key.to_string(),
            locale: locale.to_string(),
            body: body.to_string(),
            segments,
        })
    }

    pub fn placeholders(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Slot(n) => Some(n.as_str()),
            Segment::Text(_) => None,
        })
    }

    /// Fills every placeholder; any placeholder without a value is an error.
    pub fn render(&self, values: &Values) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.body.len() + 32);
        for seg in &self.segments {
            match seg {
                Segment::Text(t) => out.push_str(t),
                Segment::Slot(name) => match values.0.get(name.as_str()) {
                    Some(v) => out.push_str(v),
                    None => {
                        return Err(TemplateError::MissingPlaceholder {
                            key: self.key.clone(),
                            locale: self.locale.clone(),
                            placeholder: name.clone(),
                        })
                    }
                },
            }
        }
        Ok(out)
    }
}

/// Placeholder values for one render call.
#[derive(Debug, Default, Clone)]
pub struct Values(BTreeMap<&'static str, String>);

impl Values {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(mut self, name: &'static str, value: impl Into<String>) -> Self {
        self.0.insert(name, value.into());
        self
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PackFile {
    scenario: ScenarioName,
    locale: String,
    #[serde(default)]
    templates: BTreeMap<String, toml::Spanned<String>>,
    #[serde(default)]
    phrases: BTreeMap<String, toml::Spanned<String>>,
}

/// All prompt text for one (scenario, locale) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalePack {
    pub scenario: ScenarioName,
    pub locale: String,
    templates: BTreeMap<TemplateKey, PromptTemplate>,
    phrases: BTreeMap<String, PromptTemplate>,
}

impl LocalePack {
    pub fn parse(text: &str, origin: &str) -> Result<Self, TemplateError> {
        let file: PackFile = toml::from_str(text).map_err(|e| TemplateError::Parse {
            path: origin.to_string(),
            line: e.span().map(|s| 1 + text[..s.start].matches('\n').count()).unwrap_or(0),
            message: e.message().trim().to_string(),
        })?;

        let mut missing: Vec<String> = TemplateKey::ALL
            .iter()
            .map(|k| k.as_str())
            .filter(|k| !file.templates.contains_key(*k))
            .map(String::from)
            .collect();
        missing.extend(
            PHRASE_KEYS
                .iter()
                .filter(|k| !file.phrases.contains_key(**k))
                .map(|k| k.to_string()),
        );
        if !missing.is_empty() {
            return Err(TemplateError::Incomplete {
                path: origin.to_string(),
                missing,
            });
        }

        let build = |key: &str, value: &toml::Spanned<String>| -> Result<PromptTemplate, TemplateError> {
            let span = value.span();
            let raw = &text[span.clone()];
            let value_line = 1 + text[..span.start].matches('\n').count();
            // Scan the raw source so errors point at the file line; escapes never
            // produce braces in practice, so raw and decoded agree on validity.
            if let Err(e) = parse_segments(raw_string_contents(raw)) {
                let lead = raw.len() - raw_string_contents(raw).len();
                let line = value_line + raw[..lead + e.offset].matches('\n').count();
                return Err(TemplateError::Parse {
                    path: origin.to_string(),
                    line,
                    message: format!("{key}: {}", e.message),
                });
            }
            PromptTemplate::parse(key, &file.locale, value.get_ref()).map_err(|e| match e {
                TemplateError::Parse { message, .. } => TemplateError::Parse {
                    path: origin.to_string(),
                    line: value_line,
                    message: format!("{key}: {message}"),
                },
                other => other,
            })
        };

        let mut templates = BTreeMap::new();
        for key in TemplateKey::ALL {
            templates.insert(key, build(key.as_str(), &file.templates[key.as_str()])?);
        }
        let mut phrases = BTreeMap::new();
        for (key, value) in &file.phrases {
            phrases.insert(key.clone(), build(key, value)?);
        }
        Ok(Self {
            scenario: file.scenario,
            locale: file.locale,
            templates,
            phrases,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TemplateError> {
        let text = std::fs::read_to_string(path).map_err(|e| TemplateError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn template(&self, key: TemplateKey) -> &PromptTemplate {
        &self.templates[&key]
    }

    pub fn templates(&self) -> impl Iterator<Item = &PromptTemplate> {
        self.templates.values()
    }

    pub fn phrase(&self, key: &str) -> &PromptTemplate {
        &self.phrases[key]
    }

    /// The literal token an agent replies with to skip its turn.
    pub fn pass_token(&self) -> &str {
        self.phrase("passToken").body.as_str()
    }
}

/// Strips TOML string delimiters from a raw value span.
fn raw_string_contents(raw: &str) -> &str {
    for delim in ["\"\"\"", "'''"] {
        if let Some(inner) = raw.strip_prefix(delim).and_then(|r| r.strip_suffix(delim)) {
            return inner;
        }
    }
    for delim in ["\"", "'"] {
        if let Some(inner) = raw.strip_prefix(delim).and_then(|r| r.strip_suffix(delim)) {
            return inner;
        }
    }
    raw
}

const BUILTIN_PACKS: [(&str, &str); 4] = [
    ("fishery.en.toml", include_str!("../locales/fishery.en.toml")),
    ("pasture.en.toml", include_str!("../locales/pasture.en.toml")),
    ("pollution.en.toml", include_str!("../locales/pollution.en.toml")),
    ("trash.en.toml", include_str!("../locales/trash.en.toml")),
];

/// Locale packs indexed by scenario and locale.
#[derive(Debug, Clone, Default)]
pub struct PackCatalog {
    packs: BTreeMap<(ScenarioName, String), LocalePack>,
}

impl PackCatalog {
    pub fn empty() -> Self {
        Self::default()
    }

    /// The compiled-in English packs.
    pub fn builtin() -> Self {
        let mut catalog = Self::empty();
        for (name, text) in BUILTIN_PACKS {
            let pack = LocalePack::parse(text, name).expect("builtin locale pack is valid");
            catalog.insert(pack);
        }
        catalog
    }

    pub fn insert(&mut self, pack: LocalePack) {
        self.packs.insert((pack.scenario, pack.locale.clone()), pack);
    }

    /// Loads every `*.toml` pack in a directory, replacing same-keyed packs.
    pub fn load_dir(&mut self, dir: &Path) -> Result<usize, TemplateError> {
        let io_err = |e: std::io::Error| TemplateError::Io {
            path: dir.display().to_string(),
            message: e.to_string(),
        };
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(io_err)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "toml"))
            .collect();
        paths.sort();
        for path in &paths {
            self.insert(LocalePack::load(path)?);
        }
        Ok(paths.len())
    }

    pub fn get(&self, scenario: ScenarioName, locale: &str) -> Option<&LocalePack> {
        self.packs.get(&(scenario, locale.to_string()))
    }

    /// Looks up a pack, reporting the first template the caller would miss.
    pub fn resolve(
        &self,
        scenario: ScenarioName,
        locale: &str,
        key: TemplateKey,
    ) -> Result<&LocalePack, TemplateError> {
        self.get(scenario, locale).ok_or_else(|| TemplateError::Missing {
            key: key.as_str().to_string(),
            locale: locale.to_string(),
            scenario: scenario.to_string(),
        })
    }

    pub fn locales(&self, scenario: ScenarioName) -> Vec<&str> {
        self.packs
            .keys()
            .filter(|(s, _)| *s == scenario)
            .map(|(_, l)| l.as_str())
            .collect()
    }
}

/// A single public line: the announcer or an agent speaking.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationTurn {
    pub speaker: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TranscriptMonth {
    pub month: u32,
    pub turns: Vec<ConversationTurn>,
}

/// Everything said publicly, month by month.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Transcript {
    pub months: Vec<TranscriptMonth>,
}

impl Transcript {
    pub fn render_into(&self, out: &mut String) {
        for m in &self.months {
            for t in &m.turns {
                out.push_str(&t.speaker);
                out.push_str(": ");
                out.push_str(&t.text);
                out.push('\n');
            }
        }
    }
}

/// A rendered request: a system message and a user message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub system: String,
    pub user: String,
}

impl RenderedPrompt {
    pub fn full_text(&self) -> String {
        format!("{}\n\n{}", self.system, self.user)
    }
}

fn base_values(cfg: &ScenarioConfig, agent: &AgentSpec, state: &ResourceState) -> Values {
    let threshold = dynamics::sustainability_threshold(state, &cfg.dynamics);
    let share = dynamics::fair_share(state, &cfg.dynamics, cfg.n_agents);
    Values::new()
        .set("agentName", agent.name.clone())
        .set("amount", format_quantity(state.amount))
        .set("threshold", format_quantity(threshold))
        .set("fairShare", format_quantity(share))
        .set("month", state.month.to_string())
}

/// The private harvest request shown to one agent at the start of a month.
pub fn render_harvest_prompt(
    cfg: &ScenarioConfig,
    catalog: &PackCatalog,
    agent: &AgentSpec,
    state: &ResourceState,
    history: &Transcript,
) -> Result<RenderedPrompt, TemplateError> {
    let pack = catalog.resolve(cfg.name, &agent.locale, TemplateKey::HarvestInstruction)?;
    let values = base_values(cfg, agent, state);
    let system = pack.template(TemplateKey::SystemIntro).render(&values)?;

    let mut user = String::new();
    if !history.months.is_empty() {
        user.push_str(&pack.phrase("historyHeader").render(&values)?);
        user.push('\n');
        history.render_into(&mut user);
        user.push('\n');
    }
    user.push_str(&pack.template(TemplateKey::HarvestInstruction).render(&values)?);
    if agent.universalization {
        user.push('\n');
        user.push_str(&pack.template(TemplateKey::UniversalizationHint).render(&values)?);
    }
    if cfg.cot_suffix {
        user.push('\n');
        user.push_str(&pack.template(TemplateKey::CotSuffix).render(&values)?);
    }
    Ok(RenderedPrompt { system, user })
}

/// Clarifying follow-up after an unparseable harvest answer.
pub fn render_reask(
    cfg: &ScenarioConfig,
    catalog: &PackCatalog,
    agent: &AgentSpec,
    state: &ResourceState,
) -> Result<String, TemplateError> {
    let pack = catalog.resolve(cfg.name, &agent.locale, TemplateKey::HarvestInstruction)?;
    pack.phrase("reask").render(&base_values(cfg, agent, state))
}

/// The prompt for one discussion turn: prior months, this month's
/// announcement and turns so far, then the instruction to speak or pass.
pub fn render_discussion_prompt(
    cfg: &ScenarioConfig,
    catalog: &PackCatalog,
    agent: &AgentSpec,
    state: &ResourceState,
    history: &Transcript,
    current: &TranscriptMonth,
) -> Result<RenderedPrompt, TemplateError> {
    let pack = catalog.resolve(cfg.name, &agent.locale, TemplateKey::DiscussionInstruction)?;
    let values = base_values(cfg, agent, state).set("passToken", pack.pass_token());
    let system = pack.template(TemplateKey::SystemIntro).render(&values)?;
    let mut user = String::new();
    if !history.months.is_empty() {
        user.push_str(&pack.phrase("historyHeader").render(&values)?);
        user.push('\n');
        history.render_into(&mut user);
        user.push('\n');
    }
    user.push_str(&pack.phrase("currentHeader").render(&values)?);
    user.push('\n');
    for t in &current.turns {
        user.push_str(&format!("{}: {}\n", t.speaker, t.text));
    }
    user.push('\n');
    user.push_str(&pack.template(TemplateKey::DiscussionInstruction).render(&values)?);
    Ok(RenderedPrompt { system, user })
}

/// Canned utterance used by the scripted talker policy.
pub fn render_talker_line(
    cfg: &ScenarioConfig,
    catalog: &PackCatalog,
    agent: &AgentSpec,
    state: &ResourceState,
) -> Result<String, TemplateError> {
    let pack = catalog.resolve(cfg.name, &agent.locale, TemplateKey::DiscussionInstruction)?;
    pack.phrase("talkerLine").render(&base_values(cfg, agent, state))
}

/// The announcer's public monthly report, one line per agent in order.
pub fn render_announcement(
    cfg: &ScenarioConfig,
    catalog: &PackCatalog,
    month: u32,
    report: &[(String, f64)],
) -> Result<String, TemplateError> {
    if report.is_empty() {
        return Err(TemplateError::EmptyReport);
    }
    let pack = catalog.resolve(cfg.name, &cfg.locale, TemplateKey::Announcement)?;
    let lines = report
        .iter()
        .map(|(name, amount)| {
            pack.phrase("reportLine").render(
                &Values::new()
                    .set("agentName", name.clone())
                    .set("amount", format_quantity(*amount)),
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    pack.template(TemplateKey::Announcement).render(
        &Values::new()
            .set("reportLines", lines.join(" "))
            .set("month", month.to_string()),
    )
}
