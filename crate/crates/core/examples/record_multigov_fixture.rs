//! Records `fixtures/multigov/exchange.jsonl`: two months of a mixed
//! deepseek-v3 x4 / gpt-4o-mini x1 fishery, served by a scripted stand-in
//! for the chat endpoint.
//!
//! ```text
//! cargo run -p govsim-core --example record_multigov_fixture
//! ```

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use govsim_core::engine::{build_roster, parse_roster, AgentDeps, RunConfig, Simulation};
use govsim_core::gateway::{
    response_body, Cassette, ChatBackend, Gateway, HttpReply, HttpTransport, ModelRegistry, TransportError,
};
use govsim_core::scenario::{PackCatalog, ScenarioConfig};
use regex::Regex;
use serde_json::Value;

const JOHN_1: &str = "Thanks for the update, Mayor. It looks like Luke caught a bit more than the rest of us this month. Luke, I'm curious, was there a reason you decided to go for 20 tons? I'm just thinking about how we can all work together to keep the lake sustainable while still earning a good income. Maybe we can discuss a plan for next month that works for everyone?";
const LUKE: &str = "Thanks for your question, John! I decided to go for 20 tons because I thought it was a good balance between maximizing my catch and ensuring there would still be enough fish left for all of us to benefit in the future. I agree that we should definitely come up with a plan for next month. Maybe we can set a limit on how much each of us catches to ensure the lake remains sustainable? What do you all think?";
const KATE: &str = "Thanks for sharing your reasoning, Luke. I think setting a limit is a good idea, but we should also consider how much fish we leave in the lake to ensure it can replenish fully. If we all catch 10 tons, that leaves 50 tons, which doubles to 100 tons by next month. That way, we can maintain the lake's carrying capacity and our income over time. What if we agree to a 10-ton limit per person next month and revisit the plan if needed?";
const EMMA: &str = "I agree with Kate's suggestion of a 10-ton limit per person. It seems like a fair and sustainable approach that ensures the lake can replenish fully each month. If we all stick to this limit, we can maintain the lake's carrying capacity and our income over the long term. Let's give it a try next month and see how it works. If anyone has concerns or suggestions, we can discuss them before finalizing the plan.";
const JACK: &str = "I agree with Kate and Emma's suggestion of a 10-ton limit per person. It seems like a fair and sustainable approach that ensures the lake can replenish fully each month. If we all stick to this limit, we can maintain the lake's carrying capacity and our income over the long term. Let's give it a try next month and see how it works. If anyone has concerns or suggestions, we can discuss them before finalizing the plan.";
const JOHN_2: &str = "I think Kate and Emma's suggestion of a 10-ton limit per person is a solid plan. It's fair, sustainable, and ensures the lake can replenish fully each month. I'm on board with trying this approach next month. If we all stick to it, we can maintain the lake's health and our income over the long term. Let's commit to this and check in after next month's fishing to see how it's working. If anyone has concerns or ideas for improvement, we can discuss them then.";

/// Answers by (agent, month, phase), counting discussion turns per agent.
struct Responder {
    turns: Mutex<BTreeMap<(String, u32), usize>>,
    name: Regex,
    month: Regex,
}

impl Responder {
    fn harvest(name: &str, month: u32) -> String {
        let n = match (month, name) {
            (1, "Luke") => 20,
            (2, "Emma") => 6,
            _ => 10,
        };
        format!("The lake can refill if we leave enough behind.\nFinal answer: {n}")
    }

    fn discussion(&self, name: &str, month: u32) -> String {
        let mut turns = self.turns.lock().unwrap();
        let k = turns.entry((name.to_string(), month)).or_default();
        let turn = *k;
        *k += 1;
        let text = match (month, name, turn) {
            (1, "John", 0) => JOHN_1,
            (1, "John", 1) => JOHN_2,
            (1, "Kate", 0) => KATE,
            (1, "Jack", 0) => JACK,
            (1, "Emma", 0) => EMMA,
            (1, "Luke", 0) => LUKE,
            _ => "[PASS]",
        };
        text.to_string()
    }
}

impl HttpTransport for Responder {
    fn post_json(&self, _url: &str, _bearer: Option<&str>, body: &str) -> Result<HttpReply, TransportError> {
        let req: Value = serde_json::from_str(body).map_err(|e| TransportError(e.to_string()))?;
        let messages = req["messages"].as_array().expect("messages");
        let system = messages[0]["content"].as_str().unwrap_or_default();
        let user = messages[1]["content"].as_str().unwrap_or_default();
        let name = &self.name.captures(system).expect("agent name")[1];
        let month: u32 = self.month.captures_iter(user).last().expect("month")[1]
            .parse()
            .unwrap();
        let text = if user.contains("How many tons") {
            Self::harvest(name, month)
        } else {
            self.discussion(name, month)
        };
        let prompt_tokens = (system.len() + user.len()) as u64 / 4;
        let completion_tokens = text.len() as u64 / 4 + 1;
        Ok(HttpReply {
            status: 200,
            body: response_body(&text, prompt_tokens, completion_tokens).to_string(),
        })
    }
}

fn main() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/multigov");
    let scenario = ScenarioConfig::load(&root.join("preset.toml")).expect("preset");
    let registry = ModelRegistry::builtin();
    let groups = parse_roster("deepseek-v3:4,gpt-4o-mini:1", |k| registry.get(k).is_some()).unwrap();
    let agents = build_roster(&groups, &scenario).unwrap();

    let cassette_path = root.join("exchange.jsonl");
    let _ = std::fs::remove_file(&cassette_path);
    let responder = Responder {
        turns: Mutex::new(BTreeMap::new()),
        name: Regex::new(r"You are (\w+),").unwrap(),
        month: Regex::new(r"It is month (\d+)").unwrap(),
    };
    let gateway = Gateway::new(
        registry,
        Box::new(responder),
        Cassette::create_record(&cassette_path).expect("cassette"),
    )
    .with_credentials(|_| Some("fixture-token".into()));
    let deps = AgentDeps {
        backend: Some(Arc::new(gateway) as Arc<dyn ChatBackend>),
        console: None,
    };
    let cfg = RunConfig::new(scenario, agents);
    let record = Simulation::new(cfg, Arc::new(PackCatalog::builtin()), &deps)
        .expect("simulation")
        .sequential()
        .run()
        .expect("run");
    for m in &record.months {
        println!("month {}: requests {:?}", m.month, m.requests);
        println!("  {}", m.announcement);
    }
    println!("wrote {}", cassette_path.display());
}
