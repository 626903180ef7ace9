//! Simulation orchestrator.
//!
//! Each month runs the same fixed sequence:
//!
//! ```text
//! 1. every agent privately decides how much to extract
//! 2. requests are allocated against the stock (random order under contention)
//! 3. collapse check
//! 4. the announcer publishes every agent's extraction
//! 5. round-robin discussion, capped at max_conversation_steps turns and
//!    ending early after a full round of passes
//! 6. regrowth
//! 7. collapse check
//! ```
//!
//! All randomness comes from a ChaCha stream keyed by (seed, month), so a
//! run resumed from a checkpoint draws exactly what the original would have.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{
    Agent, AgentError, AgentKind, AgentSpec, DiscussionContext, HarvestContext, HarvestDecision, HumanAgent,
    HumanConsole, LlmAgent, ScriptedAgent, ScriptedPolicy, Utterance,
};
use crate::dynamics::{self, AllocationResult, ResourceState, EPS};
use crate::gateway::{ChatBackend, ChatMessage, Completion, GatewayError, Pricing, SamplingParams, UsageMeter};
use crate::metrics;
use crate::scenario::{
    self, ConfigError, ConversationTurn, PackCatalog, Quantization, ScenarioConfig, Transcript, TranscriptMonth,
};
use crate::store::{self, Manifest, StoreError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("agent {agent}: {source}")]
    Agent { agent: String, source: AgentError },
    #[error("run aborted in month {month} ({phase}): {reason}; checkpoint: {}", checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "<not written>".into()))]
    Aborted {
        month: u32,
        phase: Phase,
        reason: String,
        checkpoint: Option<PathBuf>,
        #[source]
        source: Option<Box<Checkpoint>>,
    },
    #[error("invariant violated in month {month}: {message}\n{record}")]
    Invariant {
        month: u32,
        message: String,
        record: String,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("batch needs at least one run")]
    NoRuns,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Harvest,
    Discussion,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Harvest => "harvest",
            Phase::Discussion => "discussion",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub agents: Vec<AgentSpec>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cassette_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Sampling settings per model key, filled in when the run starts.
    #[serde(default)]
    pub sampling: BTreeMap<String, SamplingParams>,
}

impl RunConfig {
    pub fn new(scenario: ScenarioConfig, agents: Vec<AgentSpec>) -> Self {
        let seed = scenario.seed;
        Self {
            scenario,
            agents,
            seed,
            cassette_path: None,
            output_dir: None,
            sampling: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.scenario.validate()?;
        if self.agents.len() != self.scenario.n_agents {
            return Err(ConfigError::Invalid(format!(
                "roster has {} agents but the scenario needs {}",
                self.agents.len(),
                self.scenario.n_agents
            )));
        }
        for (i, a) in self.agents.iter().enumerate() {
            if a.index != i {
                return Err(ConfigError::Invalid(format!(
                    "agent {} has index {} but sits at position {i}",
                    a.name, a.index
                )));
            }
        }
        if self.agents.iter().filter(|a| a.kind == AgentKind::Human).count() > 1 {
            return Err(ConfigError::Invalid("at most one human agent is supported".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthRecord {
    pub month: u32,
    pub amount_at_start: f64,
    /// Per-agent fair share at the start of the month.
    pub fair_share: f64,
    pub decisions: Vec<HarvestDecision>,
    /// Requests as submitted, after clamping and quantization.
    pub requests: Vec<f64>,
    pub allocations: AllocationResult,
    pub amount_after_harvest: f64,
    pub amount_after_regrowth: f64,
    pub announcement: String,
    pub discussion: Vec<Utterance>,
    pub collapsed_during: bool,
}

impl MonthRecord {
    #[doc(hidden)]
    pub fn empty_for_tests(month: u32, n: usize) -> Self {
        Self {
            month,
            amount_at_start: 0.0,
            fair_share: 0.0,
            decisions: Vec::new(),
            requests: vec![0.0; n],
            allocations: AllocationResult {
                per_agent: vec![0.0; n],
                total_extracted: 0.0,
            },
            amount_after_harvest: 0.0,
            amount_after_regrowth: 0.0,
            announcement: String::new(),
            discussion: Vec::new(),
            collapsed_during: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub months: Vec<MonthRecord>,
    pub survival_months: u32,
    pub per_agent_totals: Vec<f64>,
    pub final_amount: f64,
    pub usage: UsageMeter,
}

impl RunRecord {
    pub fn direction(&self) -> dynamics::Direction {
        self.config.scenario.dynamics.direction
    }

    pub fn collapsed(&self) -> bool {
        self.months.last().is_some_and(|m| m.collapsed_during)
    }
}

/// Everything needed to continue an aborted run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub completed_months: Vec<MonthRecord>,
    pub failed_month: u32,
    pub phase: Phase,
    pub reason: String,
    pub usage: UsageMeter,
}

impl std::fmt::Display for Checkpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "checkpoint before month {} ({})", self.failed_month, self.phase)
    }
}

impl std::error::Error for Checkpoint {}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// External resources agents may need.
#[derive(Clone, Default)]
pub struct AgentDeps {
    pub backend: Option<Arc<dyn ChatBackend>>,
    pub console: Option<Arc<Mutex<dyn HumanConsole>>>,
}

/// Wraps a backend to meter one run's usage separately.
struct RunBackend {
    inner: Arc<dyn ChatBackend>,
    meter: Mutex<UsageMeter>,
}

impl ChatBackend for RunBackend {
    fn complete(
        &self,
        model_key: &str,
        messages: &[ChatMessage],
        params: &SamplingParams,
    ) -> Result<Completion, GatewayError> {
        let c = self.inner.complete(model_key, messages, params)?;
        self.meter
            .lock()
            .expect("meter poisoned")
            .record(model_key, self.inner.pricing_for(model_key), c.usage);
        Ok(c)
    }

    fn sampling_for(&self, model_key: &str) -> SamplingParams {
        self.inner.sampling_for(model_key)
    }

    fn pricing_for(&self, model_key: &str) -> Option<Pricing> {
        self.inner.pricing_for(model_key)
    }

    fn has_model(&self, model_key: &str) -> bool {
        self.inner.has_model(model_key)
    }
}

pub struct Simulation {
    cfg: RunConfig,
    agents: Vec<Box<dyn Agent>>,
    catalog: Arc<PackCatalog>,
    run_backend: Option<Arc<RunBackend>>,
    parallel: bool,
}

impl Simulation {
    /// Builds agents from the roster in `cfg`.
    pub fn new(mut cfg: RunConfig, catalog: Arc<PackCatalog>, deps: &AgentDeps) -> Result<Self, EngineError> {
        cfg.validate()?;
        let run_backend = deps.backend.as_ref().map(|inner| {
            Arc::new(RunBackend {
                inner: inner.clone(),
                meter: Mutex::new(UsageMeter::default()),
            })
        });
        let mut agents: Vec<Box<dyn Agent>> = Vec::with_capacity(cfg.agents.len());
        for spec in &cfg.agents {
            let wrap = |source: AgentError| EngineError::Agent {
                agent: spec.name.clone(),
                source,
            };
            let agent: Box<dyn Agent> = match &spec.kind {
                AgentKind::Scripted(_) => Box::new(ScriptedAgent::new(spec.clone()).map_err(wrap)?),
                AgentKind::LlmBacked { model_key } => {
                    let backend = run_backend
                        .clone()
                        .ok_or_else(|| wrap(AgentError::Config(format!("model {model_key} needs a gateway"))))?;
                    if !backend.has_model(model_key) {
                        return Err(wrap(AgentError::Config(format!("unresolved model key '{model_key}'"))));
                    }
                    let sampling = backend.sampling_for(model_key);
                    cfg.sampling.insert(model_key.clone(), sampling.clone());
                    Box::new(LlmAgent::new(spec.clone(), backend, sampling).map_err(wrap)?)
                }
                AgentKind::Human => {
                    let console = deps
                        .console
                        .clone()
                        .ok_or_else(|| wrap(AgentError::Config("human agent needs a console".into())))?;
                    Box::new(HumanAgent::new(spec.clone(), console))
                }
            };
            agents.push(agent);
        }
        Ok(Self {
            cfg,
            agents,
            catalog,
            run_backend,
            parallel: true,
        })
    }

    /// Uses caller-supplied agents instead of the roster's kinds.
    pub fn with_agents(
        cfg: RunConfig,
        catalog: Arc<PackCatalog>,
        agents: Vec<Box<dyn Agent>>,
    ) -> Result<Self, EngineError> {
        cfg.validate()?;
        if agents.len() != cfg.agents.len() {
            return Err(ConfigError::Invalid("agent count does not match roster".into()).into());
        }
        Ok(Self {
            cfg,
            agents,
            catalog,
            run_backend: None,
            parallel: true,
        })
    }

    /// Collect harvest decisions on one thread (keeps recorded cassettes in a
    /// stable order).
    pub fn sequential(mut self) -> Self {
        self.parallel = false;
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn run(&self) -> Result<RunRecord, EngineError> {
        self.run_from(Vec::new(), UsageMeter::default())
    }

    /// Continues an aborted run from its checkpoint.
    pub fn resume(&self, checkpoint: Checkpoint) -> Result<RunRecord, EngineError> {
        if checkpoint.config.scenario != self.cfg.scenario || checkpoint.config.agents != self.cfg.agents {
            return Err(ConfigError::Invalid("checkpoint was written for a different configuration".into()).into());
        }
        self.run_from(checkpoint.completed_months, checkpoint.usage)
    }

    fn usage(&self, prior: &UsageMeter) -> UsageMeter {
        let mut total = prior.clone();
        if let Some(b) = &self.run_backend {
            total.merge(&b.meter.lock().expect("meter poisoned"));
        }
        total
    }

    fn run_from(&self, mut months: Vec<MonthRecord>, prior_usage: UsageMeter) -> Result<RunRecord, EngineError> {
        let sc = &self.cfg.scenario;
        let params = &sc.dynamics;
        let mut transcript = transcript_of(&months, sc);
        let mut state = match months.last() {
            Some(last) => ResourceState {
                amount: last.amount_after_regrowth,
                month: last.month,
                collapsed: last.collapsed_during,
            },
            None => ResourceState::initial(params),
        };

        while !state.collapsed && state.month < params.horizon {
            state = state.advance_month();
            let month = state.month;
            let abort = |phase: Phase, reason: String, months: &[MonthRecord]| {
                self.abort(month, phase, reason, months, &prior_usage)
            };

            let fair_share = dynamics::fair_share(&state, params, sc.n_agents);
            let decisions = match self.collect_decisions(&state, &transcript, &months) {
                Ok(d) => d,
                Err((agent, e)) if is_fatal(&e) => {
                    return Err(abort(Phase::Harvest, abort_reason(&agent, &e), &months))
                }
                Err((agent, source)) => return Err(EngineError::Agent { agent, source }),
            };
            let requests: Vec<f64> = decisions
                .iter()
                .map(|d| submitted_request(d.requested, &state, sc))
                .collect();

            let mut rng = month_rng(self.cfg.seed, month);
            let (allocations, after) = dynamics::allocate(&requests, sc.n_agents, &state, &mut rng)
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            let amount_at_start = state.amount;
            state = after.with_collapse_check(params);
            let amount_after_harvest = state.amount;

            let report: Vec<(String, f64)> = self
                .cfg
                .agents
                .iter()
                .map(|a| a.name.clone())
                .zip(allocations.per_agent.iter().copied())
                .collect();
            let announcement =
                scenario::render_announcement(sc, &self.catalog, month, &report).map_err(|e| EngineError::Agent {
                    agent: sc.announcer_title.clone(),
                    source: e.into(),
                })?;
            let mut current = TranscriptMonth {
                month,
                turns: vec![ConversationTurn {
                    speaker: sc.announcer_title.clone(),
                    text: announcement.clone(),
                }],
            };

            let mut discussion = Vec::new();
            if !state.collapsed {
                match self.discuss(&state, &transcript, &mut current) {
                    Ok(d) => discussion = d,
                    Err((agent, e)) if is_fatal(&e) => {
                        return Err(abort(Phase::Discussion, abort_reason(&agent, &e), &months))
                    }
                    Err((agent, source)) => return Err(EngineError::Agent { agent, source }),
                }
                state = dynamics::regrow(&state, params).with_collapse_check(params);
            }

            let record = MonthRecord {
                month,
                amount_at_start,
                fair_share,
                decisions,
                requests,
                allocations,
                amount_after_harvest,
                amount_after_regrowth: state.amount,
                announcement,
                discussion,
                collapsed_during: state.collapsed,
            };
            self.check_invariants(&record)?;
            months.push(record);
            transcript.months.push(current);
        }

        let n = sc.n_agents;
        let per_agent_totals = (0..n)
            .map(|i| months.iter().map(|m| m.allocations.per_agent[i]).sum())
            .collect();
        let mut record = RunRecord {
            config: self.cfg.clone(),
            final_amount: state.amount,
            months,
            survival_months: 0,
            per_agent_totals,
            usage: self.usage(&prior_usage),
        };
        record.survival_months = metrics::survival_time(&record);
        Ok(record)
    }

    fn abort(
        &self,
        month: u32,
        phase: Phase,
        reason: String,
        months: &[MonthRecord],
        prior: &UsageMeter,
    ) -> EngineError {
        let checkpoint = Checkpoint {
            config: self.cfg.clone(),
            completed_months: months.to_vec(),
            failed_month: month,
            phase,
            reason: reason.clone(),
            usage: self.usage(prior),
        };
        let path = self.cfg.output_dir.as_ref().and_then(|dir| {
            let path = dir.join(CHECKPOINT_FILE);
            match store::write_json(&path, &checkpoint) {
                Ok(()) => Some(path),
                Err(e) => {
                    log::error!("could not write checkpoint: {e}");
                    None
                }
            }
        });
        EngineError::Aborted {
            month,
            phase,
            reason,
            checkpoint: path,
            source: Some(Box::new(checkpoint)),
        }
    }

    fn collect_decisions(
        &self,
        state: &ResourceState,
        history: &Transcript,
        records: &[MonthRecord],
    ) -> Result<Vec<HarvestDecision>, (String, AgentError)> {
        let ctx = HarvestContext {
            cfg: &self.cfg.scenario,
            catalog: &self.catalog,
            state,
            history,
            records,
        };
        let decide = |agent: &dyn Agent| agent.decide(&ctx).map_err(|e| (agent.spec().name.clone(), e));
        let results: Vec<_> = if self.parallel && self.agents.len() > 1 {
            std::thread::scope(|s| {
                let handles: Vec<_> = self
                    .agents
                    .iter()
                    .map(|a| {
                        let decide = &decide;
                        s.spawn(move || decide(a.as_ref()))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("agent thread panicked"))
                    .collect()
            })
        } else {
            self.agents.iter().map(|a| decide(a.as_ref())).collect()
        };
        results.into_iter().collect()
    }

    fn discuss(
        &self,
        state: &ResourceState,
        history: &Transcript,
        current: &mut TranscriptMonth,
    ) -> Result<Vec<Utterance>, (String, AgentError)> {
        let sc = &self.cfg.scenario;
        let n = self.agents.len();
        let mut utterances = Vec::new();
        let mut consecutive_passes = 0;
        let mut turn = 0;
        while utterances.len() < sc.max_conversation_steps as usize && consecutive_passes < n {
            let agent = &self.agents[turn % n];
            let ctx = DiscussionContext {
                cfg: sc,
                catalog: &self.catalog,
                state,
                history,
                current,
            };
            let u = agent.speak(&ctx).map_err(|e| (agent.spec().name.clone(), e))?;
            if u.pass {
                consecutive_passes += 1;
            } else {
                consecutive_passes = 0;
                current.turns.push(ConversationTurn {
                    speaker: agent.spec().name.clone(),
                    text: u.text.clone(),
                });
            }
            utterances.push(u);
            turn += 1;
        }
        Ok(utterances)
    }

    fn check_invariants(&self, m: &MonthRecord) -> Result<(), EngineError> {
        let p = &self.cfg.scenario.dynamics;
        let mut problems = Vec::new();
        if (m.amount_at_start - m.amount_after_harvest - m.allocations.total_extracted).abs() > 1e-6 {
            problems.push("extraction does not conserve the stock");
        }
        if m.allocations
            .per_agent
            .iter()
            .zip(&m.requests)
            .any(|(g, r)| *g < 0.0 || *g > r + EPS)
        {
            problems.push("allocation exceeds a request");
        }
        if m.discussion.len() > self.cfg.scenario.max_conversation_steps as usize {
            problems.push("discussion exceeds the step cap");
        }
        for a in [m.amount_after_harvest, m.amount_after_regrowth] {
            if !(0.0..=p.capacity + EPS).contains(&a) {
                problems.push("amount outside [0, capacity]");
            }
        }
        let regrown = dynamics::regrow(
            &ResourceState {
                amount: m.amount_after_harvest,
                month: m.month,
                collapsed: false,
            },
            p,
        )
        .amount;
        let harvest_collapsed = dynamics::check_collapse(
            &ResourceState {
                amount: m.amount_after_harvest,
                month: m.month,
                collapsed: false,
            },
            p,
        );
        if !harvest_collapsed && (m.amount_after_regrowth - regrown).abs() > 1e-9 {
            problems.push("regrowth mismatch");
        }
        match problems.first() {
            None => Ok(()),
            Some(message) => Err(EngineError::Invariant {
                month: m.month,
                message: message.to_string(),
                record: serde_json::to_string(m).unwrap_or_default(),
            }),
        }
    }
}

fn is_fatal(e: &AgentError) -> bool {
    matches!(e, AgentError::Gateway(_) | AgentError::Aborted { .. })
}

/// Requests above capacity are clamped to the current amount; integer
/// quantization floors.
fn submitted_request(requested: f64, state: &ResourceState, sc: &ScenarioConfig) -> f64 {
    let mut r = if requested.is_finite() { requested.max(0.0) } else { 0.0 };
    if r > sc.dynamics.capacity {
        r = state.amount;
    }
    if sc.quantization == Quantization::Integer {
        r = (r + EPS).floor();
    }
    r
}

fn abort_reason(agent: &str, e: &AgentError) -> String {
    match e {
        AgentError::Aborted { .. } => e.to_string(),
        _ => format!("{agent}: {e}"),
    }
}

fn month_rng(seed: u64, month: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(month as u64);
    rng
}

/// Rebuilds the public transcript from month records.
pub fn transcript_of(months: &[MonthRecord], sc: &ScenarioConfig) -> Transcript {
    Transcript {
        months: months
            .iter()
            .map(|m| {
                let mut turns = vec![ConversationTurn {
                    speaker: sc.announcer_title.clone(),
                    text: m.announcement.clone(),
                }];
                turns.extend(m.discussion.iter().filter(|u| !u.pass).map(|u| {
                    ConversationTurn {
                        speaker: sc
                            .agent_names
                            .get(u.agent_index)
                            .cloned()
                            .unwrap_or_else(|| format!("Agent{}", u.agent_index)),
                        text: u.text.clone(),
                    }
                }));
                TranscriptMonth { month: m.month, turns }
            })
            .collect(),
    }
}

/// One simulation, persisted to `cfg.output_dir` when set.
pub fn run_simulation(
    cfg: RunConfig,
    catalog: Arc<PackCatalog>,
    deps: &AgentDeps,
) -> Result<(RunRecord, Option<Manifest>), EngineError> {
    let sim = Simulation::new(cfg, catalog, deps)?;
    let record = sim.run()?;
    let manifest = match &record.config.output_dir {
        Some(dir) => Some(store::persist_run(&record, dir)?),
        None => None,
    };
    Ok((record, manifest))
}

#[derive(Debug)]
pub struct BatchOutcome {
    pub records: Vec<RunRecord>,
    pub manifests: Vec<Manifest>,
    pub failures: Vec<(u64, EngineError)>,
}

/// Runs with seeds `seed, seed+1, ...`, each in its own `run-<k>` directory.
pub fn run_batch(
    cfg: &RunConfig,
    runs: u32,
    catalog: Arc<PackCatalog>,
    deps: &AgentDeps,
    sequential: bool,
) -> Result<BatchOutcome, EngineError> {
    if runs == 0 {
        return Err(EngineError::NoRuns);
    }
    let mut out = BatchOutcome {
        records: Vec::new(),
        manifests: Vec::new(),
        failures: Vec::new(),
    };
    for k in 0..runs {
        let mut run_cfg = cfg.clone();
        run_cfg.seed = cfg.seed.wrapping_add(k as u64);
        run_cfg.output_dir = cfg.output_dir.as_ref().map(|d| d.join(format!("run-{k}")));
        let seed = run_cfg.seed;
        let result = Simulation::new(run_cfg, catalog.clone(), deps).and_then(|sim| {
            let sim = if sequential { sim.sequential() } else { sim };
            let record = sim.run()?;
            let manifest = match &record.config.output_dir {
                Some(dir) => Some(store::persist_run(&record, dir)?),
                None => None,
            };
            Ok((record, manifest))
        });
        match result {
            Ok((record, manifest)) => {
                out.records.push(record);
                out.manifests.extend(manifest);
            }
            Err(e) => {
                log::info!("run with seed {seed} failed: {e}");
                out.failures.push((seed, e));
            }
        }
    }
    Ok(out)
}

/// One `name:count` group of a roster.
#[derive(Debug, Clone, PartialEq)]
pub struct RosterGroup {
    pub kind: AgentKind,
    pub count: usize,
}

/// Parses `name:count,name:count`. Names are scripted policy ids, `human`,
/// or model keys accepted by `is_model`.
pub fn parse_roster(text: &str, is_model: impl Fn(&str) -> bool) -> Result<Vec<RosterGroup>, ConfigError> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|group| {
            let (name, count) = group
                .rsplit_once(':')
                .ok_or_else(|| ConfigError::Invalid(format!("roster group '{group}' is not name:count")))?;
            let count: usize = count
                .trim()
                .parse()
                .map_err(|_| ConfigError::Invalid(format!("bad count in roster group '{group}'")))?;
            let name = name.trim();
            let kind = if name.eq_ignore_ascii_case("human") {
                AgentKind::Human
            } else if let Ok(p) = name.parse::<ScriptedPolicy>() {
                AgentKind::Scripted(p)
            } else if is_model(name) {
                AgentKind::LlmBacked {
                    model_key: name.to_string(),
                }
            } else {
                return Err(ConfigError::Invalid(format!("unresolved model key '{name}'")));
            };
            Ok(RosterGroup { kind, count })
        })
        .collect()
}

/// Lays out groups in order, naming agents from the scenario's name list.
pub fn build_roster(groups: &[RosterGroup], sc: &ScenarioConfig) -> Result<Vec<AgentSpec>, ConfigError> {
    let total: usize = groups.iter().map(|g| g.count).sum();
    if total != sc.n_agents {
        return Err(ConfigError::Invalid(format!(
            "roster counts sum to {total} but the scenario has {} agents",
            sc.n_agents
        )));
    }
    Ok(groups
        .iter()
        .flat_map(|g| std::iter::repeat_n(&g.kind, g.count))
        .enumerate()
        .map(|(index, kind)| AgentSpec {
            index,
            name: sc.agent_names[index].clone(),
            kind: kind.clone(),
            locale: sc.locale.clone(),
            universalization: sc.universalization,
        })
        .collect())
}

/// Inverse of [`build_roster`]: `kind:count` for each run of equal kinds.
pub fn roster_label(agents: &[AgentSpec]) -> String {
    let mut groups: Vec<(String, usize)> = Vec::new();
    for a in agents {
        let label = a.kind.label();
        match groups.last_mut() {
            Some((l, n)) if *l == label => *n += 1,
            _ => groups.push((label, 1)),
        }
    }
    groups
        .iter()
        .map(|(l, n)| format!("{l}:{n}"))
        .collect::<Vec<_>>()
        .join(",")
}

/// Reads a checkpoint file written by an aborted run.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, StoreError> {
    store::read_json(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Direction;

    fn scripted(sc: &ScenarioConfig, policy: &str) -> RunConfig {
        let groups = parse_roster(&format!("{policy}:{}", sc.n_agents), |_| false).unwrap();
        RunConfig::new(sc.clone(), build_roster(&groups, sc).unwrap())
    }

    fn run(cfg: RunConfig) -> RunRecord {
        Simulation::new(cfg, Arc::new(PackCatalog::builtin()), &AgentDeps::default())
            .unwrap()
            .run()
            .unwrap()
    }

    #[test]
    fn fair_share_population_survives() {
        let r = run(scripted(&ScenarioConfig::fishery(), "fairshare"));
        assert_eq!(r.months.len(), 12);
        assert!(r.months.iter().all(|m| m.amount_at_start == 100.0));
        assert_eq!(r.per_agent_totals, vec![120.0; 5]);
        assert_eq!(r.survival_months, 12);
        assert!(r
            .months
            .iter()
            .all(|m| m.discussion.len() == 5 && m.discussion.iter().all(|u| u.pass)));
    }

    #[test]
    fn greedy_population_collapses_in_month_one() {
        let r = run(scripted(&ScenarioConfig::fishery(), "greedy20"));
        assert_eq!(r.months.len(), 1);
        assert_eq!(r.per_agent_totals, vec![20.0; 5]);
        assert!(r.months[0].collapsed_during);
        assert_eq!(r.months[0].amount_after_harvest, 0.0);
        assert!(r.months[0].discussion.is_empty());
        assert_eq!(r.survival_months, 1);
    }

    #[test]
    fn idle_trash_fills_up() {
        let r = run(scripted(&ScenarioConfig::trash(), "zero"));
        assert_eq!(r.direction(), Direction::RemoveBad);
        assert_eq!(r.months.len(), 1);
        let m = &r.months[0];
        assert_eq!(m.amount_at_start, 50.0);
        assert_eq!(m.amount_after_harvest, 50.0);
        assert_eq!(m.amount_after_regrowth, 100.0);
        assert!(m.collapsed_during);
        assert_eq!(r.per_agent_totals, vec![0.0; 5]);
    }

    #[test]
    fn over_capacity_requests_are_clamped() {
        let sc = ScenarioConfig::fishery();
        let cfg = scripted(&sc, "greedy500");
        let r = run(cfg);
        assert_eq!(r.months[0].requests, vec![100.0; 5]);
        assert_eq!(r.months[0].allocations.total_extracted, 100.0);
        assert_eq!(r.per_agent_totals.iter().filter(|&&g| g == 100.0).count(), 1);
    }

    #[test]
    fn talkers_fill_the_discussion() {
        let cfg = scripted(&ScenarioConfig::fishery(), "talker");
        let r = run(cfg);
        let d = &r.months[0].discussion;
        // five lines, then a full round of passes
        assert_eq!(d.len(), 10);
        assert!(d[..5].iter().all(|u| !u.pass));
        assert!(d[5..].iter().all(|u| u.pass));
        assert_eq!(d[0].agent_index, 0);
        assert_eq!(d[4].agent_index, 4);
    }

    #[test]
    fn discussion_cap_applies() {
        let mut sc = ScenarioConfig::fishery();
        sc.max_conversation_steps = 3;
        let r = run(scripted(&sc, "talker"));
        assert!(r.months.iter().all(|m| m.discussion.len() == 3));
    }

    #[test]
    fn roster_building() {
        let sc = ScenarioConfig::fishery();
        let models = |k: &str| k == "deepseek-v3" || k == "gpt-4o-mini";
        let groups = parse_roster("deepseek-v3:4,gpt-4o-mini:1", models).unwrap();
        let roster = build_roster(&groups, &sc).unwrap();
        assert_eq!(roster.len(), 5);
        for a in &roster[..4] {
            assert_eq!(
                a.kind,
                AgentKind::LlmBacked {
                    model_key: "deepseek-v3".into()
                }
            );
        }
        assert_eq!(
            roster[4].kind,
            AgentKind::LlmBacked {
                model_key: "gpt-4o-mini".into()
            }
        );
        assert_eq!(roster[4].name, "Luke");
        assert_eq!(roster_label(&roster), "deepseek-v3:4,gpt-4o-mini:1");

        let groups = parse_roster("fairshare:4", models).unwrap();
        assert!(build_roster(&groups, &sc).is_err());
        assert!(parse_roster("gpt-9:5", models).is_err());
        assert!(parse_roster("fairshare", models).is_err());
        assert!(matches!(
            parse_roster("human:1,fairshare:4", models).unwrap()[0].kind,
            AgentKind::Human
        ));
    }

    #[test]
    fn llm_agents_need_a_backend() {
        let sc = ScenarioConfig::fishery();
        let groups = parse_roster("gpt-4o:5", |_| true).unwrap();
        let cfg = RunConfig::new(sc.clone(), build_roster(&groups, &sc).unwrap());
        assert!(Simulation::new(cfg, Arc::new(PackCatalog::builtin()), &AgentDeps::default()).is_err());
    }

    #[test]
    fn batch_rejects_zero_runs() {
        let cfg = scripted(&ScenarioConfig::fishery(), "fairshare");
        assert!(matches!(
            run_batch(&cfg, 0, Arc::new(PackCatalog::builtin()), &AgentDeps::default(), false),
            Err(EngineError::NoRuns)
        ));
    }
}
