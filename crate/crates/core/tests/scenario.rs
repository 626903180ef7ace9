use std::fs;
use std::path::Path;
use std::sync::Arc;

use govsim_core::agent::{AgentKind, AgentSpec, ScriptedPolicy};
use govsim_core::dynamics::ResourceState;
use govsim_core::engine::{build_roster, parse_roster, AgentDeps, RunConfig, RunRecord, Simulation};
use govsim_core::scenario::{
    render_announcement, render_harvest_prompt, LocalePack, PackCatalog, ScenarioConfig, ScenarioName, TemplateError,
    Transcript,
};

const FISHERY_EN: &str = include_str!("../locales/fishery.en.toml");

fn pack_dir(name: &str, text: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join(name), text).unwrap();
    dir
}

fn agent(sc: &ScenarioConfig) -> AgentSpec {
    AgentSpec {
        index: 0,
        name: "John".into(),
        kind: AgentKind::Scripted(ScriptedPolicy::FairShare),
        locale: sc.locale.clone(),
        universalization: sc.universalization,
    }
}

#[test]
fn complete_pack_loads_all_templates() {
    let pack = LocalePack::parse(FISHERY_EN, "fishery.en.toml").unwrap();
    assert_eq!(pack.templates().count(), 6);
    assert_eq!(pack.pass_token(), "[PASS]");
}

#[test]
fn drop_in_pack_is_used_for_rendering() {
    let text = FISHERY_EN
        .replace("locale = \"en\"", "locale = \"xx\"")
        .replace("let me give you the monthly fishing report.", "here is the catch.");
    let dir = pack_dir("fishery.xx.toml", &text);
    let mut catalog = PackCatalog::builtin();
    assert_eq!(catalog.load_dir(dir.path()).unwrap(), 1);
    let mut sc = ScenarioConfig::fishery();
    sc.locale = "xx".into();
    let report: Vec<(String, f64)> = vec![("John".into(), 3.0)];
    let text = render_announcement(&sc, &catalog, 1, &report).unwrap();
    assert_eq!(
        text,
        "Ladies and gentlemen, here is the catch. John caught 3 tons of fish."
    );
}

#[test]
fn missing_key_is_named() {
    let start = FISHERY_EN.find("discussionInstruction = ").unwrap();
    let end = start + FISHERY_EN[start..].find("cotSuffix").unwrap();
    let text = format!("{}{}", &FISHERY_EN[..start], &FISHERY_EN[end..]);
    match LocalePack::parse(&text, "broken.toml").unwrap_err() {
        TemplateError::Incomplete { missing, .. } => assert_eq!(missing, vec!["discussionInstruction".to_string()]),
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn placeholder_typo_fails_at_first_render() {
    let text = FISHERY_EN.replace(
        "The lake currently holds {amount} tons",
        "The lake currently holds {amout} tons",
    );
    let dir = pack_dir("fishery.en.toml", &text);
    let mut catalog = PackCatalog::empty();
    catalog.load_dir(dir.path()).unwrap();
    let sc = ScenarioConfig::fishery();
    let state = ResourceState::initial(&sc.dynamics);
    let report: Vec<(String, f64)> = vec![("John".into(), 3.0)];
    assert!(render_announcement(&sc, &catalog, 1, &report).is_ok());
    match render_harvest_prompt(&sc, &catalog, &agent(&sc), &state, &Transcript::default()).unwrap_err() {
        TemplateError::MissingPlaceholder { placeholder, key, .. } => {
            assert_eq!(placeholder, "amout");
            assert_eq!(key, "harvestInstruction");
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn malformed_placeholder_reports_file_line() {
    let text = FISHERY_EN.replace("It is month {month}. The lake", "It is month {month. The lake");
    let line = 1 + text[..text.find("{month. The").unwrap()].matches('\n').count();
    let dir = pack_dir("fishery.en.toml", &text);
    let path = dir.path().join("fishery.en.toml");
    match LocalePack::load(Path::new(&path)).unwrap_err() {
        TemplateError::Parse { line: got, path: p, .. } => {
            assert_eq!(got, line);
            assert!(p.ends_with("fishery.en.toml"));
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn missing_locale_names_the_pair() {
    let mut sc = ScenarioConfig::fishery();
    sc.locale = "ja".into();
    let state = ResourceState::initial(&sc.dynamics);
    let err = render_harvest_prompt(
        &sc,
        &PackCatalog::builtin(),
        &agent(&sc),
        &state,
        &Transcript::default(),
    )
    .unwrap_err();
    assert!(matches!(err, TemplateError::Missing { ref locale, .. } if locale == "ja"));
    assert!(err.to_string().contains("'ja'"));
}

#[test]
fn shipped_presets_match_builtins() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets");
    for name in [
        ScenarioName::Fishery,
        ScenarioName::Pasture,
        ScenarioName::Pollution,
        ScenarioName::Trash,
    ] {
        let loaded = ScenarioConfig::load(&root.join(format!("{name}.toml"))).unwrap();
        assert_eq!(loaded, ScenarioConfig::preset(name), "{name}");
    }
}

fn run(sc: ScenarioConfig, roster: &str) -> RunRecord {
    let groups = parse_roster(roster, |_| false).unwrap();
    let cfg = RunConfig::new(sc.clone(), build_roster(&groups, &sc).unwrap());
    Simulation::new(cfg, Arc::new(PackCatalog::builtin()), &AgentDeps::default())
        .unwrap()
        .run()
        .unwrap()
}

#[test]
fn harvest_scenarios_share_trajectories() {
    for roster in ["fairshare:5", "greedy30:2,fairshare:3", "titfortat15:1,greedy12:4"] {
        let runs: Vec<RunRecord> = [ScenarioName::Fishery, ScenarioName::Pasture, ScenarioName::Pollution]
            .into_iter()
            .map(|n| run(ScenarioConfig::preset(n), roster))
            .collect();
        for r in &runs[1..] {
            assert_eq!(r.months.len(), runs[0].months.len());
            for (a, b) in r.months.iter().zip(&runs[0].months) {
                assert_eq!(a.allocations, b.allocations);
                assert_eq!(a.amount_after_regrowth, b.amount_after_regrowth);
                assert_ne!(a.announcement, b.announcement);
            }
        }
    }
}
