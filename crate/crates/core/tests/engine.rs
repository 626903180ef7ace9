use std::io::Cursor;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use govsim_core::agent::{
    Agent, AgentError, AgentSpec, DiscussionContext, HarvestContext, HarvestDecision, HumanConsole, ScriptedAgent,
    StreamConsole, Utterance,
};
use govsim_core::engine::{
    build_roster, load_checkpoint, parse_roster, run_batch, AgentDeps, EngineError, RunConfig, RunRecord, Simulation,
    CHECKPOINT_FILE,
};
use govsim_core::scenario::{PackCatalog, ScenarioConfig};
use govsim_core::store;
use proptest::prelude::*;

fn roster_cfg(sc: &ScenarioConfig, roster: &str) -> RunConfig {
    let groups = parse_roster(roster, |_| false).unwrap();
    RunConfig::new(sc.clone(), build_roster(&groups, sc).unwrap())
}

fn catalog() -> Arc<PackCatalog> {
    Arc::new(PackCatalog::builtin())
}

fn run(cfg: RunConfig) -> RunRecord {
    Simulation::new(cfg, catalog(), &AgentDeps::default())
        .unwrap()
        .run()
        .unwrap()
}

fn scripted_agents(cfg: &RunConfig) -> Vec<Box<dyn Agent>> {
    cfg.agents
        .iter()
        .map(|s| Box::new(ScriptedAgent::new(s.clone()).unwrap()) as Box<dyn Agent>)
        .collect()
}

#[test]
fn seeded_runs_are_byte_identical() {
    let sc = ScenarioConfig::fishery();
    let cfg = roster_cfg(&sc, "greedy30:3,fairshare:2");
    let a = store::record_to_jsonl(&run(cfg.clone()));
    let b = store::record_to_jsonl(&run(cfg));
    assert_eq!(a, b);
}

/// Snapshot of everything an agent can see when it decides.
fn context_snapshot(ctx: &HarvestContext<'_>) -> String {
    let mut history = String::new();
    ctx.history.render_into(&mut history);
    format!(
        "month={} amount={} records={} history={}",
        ctx.state.month,
        ctx.state.amount,
        serde_json::to_string(ctx.records).unwrap(),
        history
    )
}

struct Probe {
    inner: ScriptedAgent,
    seen: Arc<Mutex<Vec<String>>>,
}

impl Agent for Probe {
    fn spec(&self) -> &AgentSpec {
        self.inner.spec()
    }

    fn decide(&self, ctx: &HarvestContext<'_>) -> Result<HarvestDecision, AgentError> {
        assert!(ctx.records.iter().all(|r| r.month < ctx.state.month));
        assert!(ctx.history.months.iter().all(|m| m.month < ctx.state.month));
        self.seen.lock().unwrap().push(context_snapshot(ctx));
        self.inner.decide(ctx)
    }

    fn speak(&self, ctx: &DiscussionContext<'_>) -> Result<Utterance, AgentError> {
        self.inner.speak(ctx)
    }
}

fn probed_month_one(roster: &str) -> String {
    let sc = ScenarioConfig::fishery();
    let cfg = roster_cfg(&sc, roster);
    let seen = Arc::new(Mutex::new(Vec::new()));
    let mut agents = scripted_agents(&cfg);
    agents[0] = Box::new(Probe {
        inner: ScriptedAgent::new(cfg.agents[0].clone()).unwrap(),
        seen: seen.clone(),
    });
    Simulation::with_agents(cfg, catalog(), agents).unwrap().run().unwrap();
    let first = seen.lock().unwrap()[0].clone();
    first
}

#[test]
fn decisions_cannot_see_same_month_requests() {
    // Agent 4's month-1 request differs; agent 0's month-1 view must not.
    let calm = probed_month_one("fairshare:5");
    let greedy = probed_month_one("fairshare:4,greedy90:1");
    assert_eq!(calm, greedy);
    assert!(calm.starts_with("month=1 amount=100 records=[]"));
}

#[test]
fn universalization_leaves_scripted_trajectories_unchanged() {
    for roster in ["fairshare:5", "greedy20:5", "titfortat25:2,fairshare:3", "talker:5"] {
        let sc = ScenarioConfig::fishery();
        let mut with = sc.clone();
        with.universalization = true;
        let a = run(roster_cfg(&sc, roster));
        let b = run(roster_cfg(&with, roster));
        assert_eq!(a.months, b.months, "roster {roster}");
        assert_eq!(a.per_agent_totals, b.per_agent_totals);
    }
}

#[test]
fn batch_divergence_is_confined_to_allocations() {
    let sc = ScenarioConfig::fishery();
    let cfg = roster_cfg(&sc, "greedy30:5");
    let out = run_batch(&cfg, 3, catalog(), &AgentDeps::default(), false).unwrap();
    assert!(out.failures.is_empty());
    let first = &out.records[0];
    let mut distinct = std::collections::BTreeSet::new();
    for r in &out.records {
        distinct.insert(format!("{:?}", r.months[0].allocations.per_agent));
        let mut normalized = r.clone();
        normalized.config.seed = first.config.seed;
        normalized.per_agent_totals = first.per_agent_totals.clone();
        for (m, f) in normalized.months.iter_mut().zip(&first.months) {
            m.allocations = f.allocations.clone();
            m.announcement = f.announcement.clone();
        }
        assert_eq!(&normalized, first);
        assert_eq!(r.months[0].allocations.total_extracted, 100.0);
    }
    assert!(
        distinct.len() > 1,
        "three seeds should not all draw the same permutation outcome"
    );
}

/// Aborts in `month` the first time it gets there.
struct FailOnce {
    inner: ScriptedAgent,
    month: u32,
    tripped: Arc<AtomicBool>,
}

impl Agent for FailOnce {
    fn spec(&self) -> &AgentSpec {
        self.inner.spec()
    }

    fn decide(&self, ctx: &HarvestContext<'_>) -> Result<HarvestDecision, AgentError> {
        if ctx.state.month == self.month && !self.tripped.swap(true, Ordering::SeqCst) {
            return Err(AgentError::Aborted {
                agent: self.spec().name.clone(),
                reason: "simulated outage".into(),
            });
        }
        self.inner.decide(ctx)
    }

    fn speak(&self, ctx: &DiscussionContext<'_>) -> Result<Utterance, AgentError> {
        self.inner.speak(ctx)
    }
}

#[test]
fn aborted_run_resumes_to_the_same_record() {
    let dir = tempfile::tempdir().unwrap();
    let sc = ScenarioConfig::fishery();
    let mut cfg = roster_cfg(&sc, "fairshare:3,greedy30:2");
    cfg.output_dir = Some(dir.path().to_path_buf());
    let reference = run(cfg.clone());
    assert_eq!(reference.months.len(), 2, "month 2 has contention and collapses");

    let tripped = Arc::new(AtomicBool::new(false));
    let mut agents = scripted_agents(&cfg);
    agents[3] = Box::new(FailOnce {
        inner: ScriptedAgent::new(cfg.agents[3].clone()).unwrap(),
        month: 2,
        tripped: tripped.clone(),
    });
    let sim = Simulation::with_agents(cfg.clone(), catalog(), agents).unwrap();
    let err = sim.run().unwrap_err();
    let EngineError::Aborted { month, checkpoint, .. } = &err else {
        panic!("expected abort, got {err}");
    };
    assert_eq!(*month, 2);
    let path = checkpoint.clone().expect("checkpoint written");
    assert_eq!(path, dir.path().join(CHECKPOINT_FILE));

    let cp = load_checkpoint(&path).unwrap();
    assert_eq!(cp.completed_months.len(), 1);
    let resumed = sim.resume(cp).unwrap();
    assert_eq!(resumed, reference);
}

#[test]
fn human_agent_plays_through_console() {
    let sc = ScenarioConfig::fishery();
    let groups = parse_roster("human:1,fairshare:4", |_| false).unwrap();
    let cfg = RunConfig::new(sc.clone(), build_roster(&groups, &sc).unwrap());
    let mut input = String::from("-3\n10\n[PASS]\n");
    for _ in 1..12 {
        input.push_str("10\n[PASS]\n");
    }
    let console = Arc::new(Mutex::new(StreamConsole::new(
        Cursor::new(input.into_bytes()),
        Vec::new(),
    )));
    let deps = AgentDeps {
        backend: None,
        console: Some(console.clone() as Arc<Mutex<dyn HumanConsole>>),
    };
    let record = Simulation::new(cfg, catalog(), &deps).unwrap().run().unwrap();
    assert_eq!(record.survival_months, 12);
    assert_eq!(record.months[0].requests[0], 10.0);
    assert_eq!(record.months[0].decisions[0].raw_text.as_deref(), Some("10"));
    assert!(record.months.iter().all(|m| m.discussion.iter().all(|u| u.pass)));
    let shown = String::from_utf8(console.lock().unwrap().output().clone()).unwrap();
    assert!(shown.contains("Please enter a nonnegative number"));
}

#[test]
fn human_eof_aborts_with_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let sc = ScenarioConfig::fishery();
    let groups = parse_roster("fairshare:4,human:1", |_| false).unwrap();
    let mut cfg = RunConfig::new(sc.clone(), build_roster(&groups, &sc).unwrap());
    cfg.output_dir = Some(dir.path().to_path_buf());
    let console = Arc::new(Mutex::new(StreamConsole::new(
        Cursor::new(b"10\n".to_vec()),
        Vec::new(),
    )));
    let deps = AgentDeps {
        backend: None,
        console: Some(console as Arc<Mutex<dyn HumanConsole>>),
    };
    let err = Simulation::new(cfg, catalog(), &deps).unwrap().run().unwrap_err();
    assert!(matches!(err, EngineError::Aborted { month: 1, .. }), "{err}");
    assert!(dir.path().join(CHECKPOINT_FILE).exists());
}

fn policy() -> impl Strategy<Value = String> {
    prop_oneof![
        Just("fairshare".to_string()),
        Just("zero".to_string()),
        Just("talker".to_string()),
        (0u32..60).prop_map(|n| format!("greedy{n}")),
        (0u32..8).prop_map(|n| format!("proportional{n}")),
        (0u32..40).prop_map(|n| format!("titfortat{n}")),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stock_accounting_reconciles(
        policies in proptest::collection::vec(policy(), 5),
        seed in 0u64..1000,
        trash in any::<bool>(),
    ) {
        let mut sc = if trash { ScenarioConfig::trash() } else { ScenarioConfig::fishery() };
        sc.seed = seed;
        let roster = policies.iter().map(|p| format!("{p}:1")).collect::<Vec<_>>().join(",");
        let r = run(roster_cfg(&sc, &roster));

        let extracted: f64 = r.per_agent_totals.iter().sum();
        let regrowth: f64 = r.months.iter().map(|m| m.amount_after_regrowth - m.amount_after_harvest).sum();
        let initial = sc.dynamics.initial_amount;
        prop_assert!((initial - extracted + regrowth - r.final_amount).abs() < 1e-6);

        for (i, total) in r.per_agent_totals.iter().enumerate() {
            let sum: f64 = r.months.iter().map(|m| m.allocations.per_agent[i]).sum();
            prop_assert!((sum - total).abs() < 1e-9);
        }
        for m in &r.months {
            prop_assert!(m.discussion.len() <= sc.max_conversation_steps as usize);
            prop_assert!((m.amount_at_start - m.allocations.total_extracted - m.amount_after_harvest).abs() < 1e-9);
        }
    }
}
