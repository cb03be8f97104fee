#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use proptest::strategy::Strategy;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_guiderag");
const TOKEN: &str = "acceptance-token";

type Check = fn() -> Result<(), String>;

fn property<S: Strategy>(cases: u32, strategy: S, check: impl Fn(&S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    let mut runner = TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() });
    runner.run(&strategy, |v| check(&v)).map_err(|e| e.to_string())
}

fn metrics() -> Result<(), String> {
    support::check_paper_tables()
}

fn bm25() -> Result<(), String> {
    property(200, support::bm25_case(), support::check_bm25)
}

fn dense() -> Result<(), String> {
    property(200, support::dense_case(), support::check_dense)
}

fn fusion() -> Result<(), String> {
    support::check_fusion_example()?;
    property(500, support::fusion_case(), |case| {
        support::check_fusion_scale_invariance(case)?;
        support::check_fusion_weight_monotonicity(case)
    })
}

fn chunking() -> Result<(), String> {
    property(500, support::element_sequence(), |elements| support::check_chunking(elements))
}

fn copy_fixtures(dest: &Path) -> Result<(), String> {
    let src = support::fixtures_dir();
    let io = |e: std::io::Error| e.to_string();
    std::fs::create_dir_all(dest.join("elements")).map_err(io)?;
    for name in ["guiderag.toml", "mock_llm.json"] {
        std::fs::copy(src.join(name), dest.join(name)).map_err(io)?;
    }
    for entry in std::fs::read_dir(src.join("elements")).map_err(io)? {
        let path = entry.map_err(io)?.path();
        std::fs::copy(&path, dest.join("elements").join(path.file_name().unwrap())).map_err(io)?;
    }
    Ok(())
}

fn cli(dir: &Path, args: &[&str]) -> Result<String, String> {
    let config = dir.join("guiderag.toml");
    let out = Command::new(BIN)
        .arg("--config")
        .arg(&config)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("guiderag {args:?} exited with {}: {}", out.status, String::from_utf8_lossy(&out.stderr)));
    }
    String::from_utf8(out.stdout).map_err(|e| e.to_string())
}

fn prepare(dir: &Path) -> Result<(), String> {
    copy_fixtures(dir)?;
    cli(dir, &["chunk"])?;
    cli(dir, &["index"])?;
    Ok(())
}

fn strip_latency(value: &mut Value) {
    match value {
        Value::Object(map) => {
            map.remove("latency_s");
            map.values_mut().for_each(strip_latency);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_latency),
        _ => {}
    }
}

const QUESTIONS: [&str; 2] = ["À quel âge administrer le vaccin BCG ?", "Combien de doses de vaccin contre la rougeole ?"];

fn run_pipeline(dir: &Path) -> Result<(Vec<u8>, Vec<Value>), String> {
    prepare(dir)?;
    let chunks = std::fs::read(dir.join("data/chunks.json")).map_err(|e| e.to_string())?;
    let mut outcomes = Vec::new();
    for mode in ["enhanced", "agentic"] {
        for question in QUESTIONS {
            let stdout = cli(dir, &["ask", "--mode", mode, "--question", question, "--format", "json"])?;
            let mut value: Value = serde_json::from_str(&stdout).map_err(|e| e.to_string())?;
            strip_latency(&mut value);
            outcomes.push(value);
        }
    }
    Ok((chunks, outcomes))
}

fn determinism() -> Result<(), String> {
    let first = tempfile::tempdir().map_err(|e| e.to_string())?;
    let second = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (chunks_a, a) = run_pipeline(first.path())?;
    let (chunks_b, b) = run_pipeline(second.path())?;
    if chunks_a != chunks_b {
        return Err("chunk files differ between runs".into());
    }
    for (x, y) in a.iter().zip(&b) {
        for key in ["answer", "trace"] {
            let (sx, sy) = (x[key].to_string(), y[key].to_string());
            if sx != sy {
                return Err(format!("{key} differs between runs:\n{sx}\n{sy}"));
            }
        }
        let agentic = !x["trace"].is_null();
        if agentic && x["trace"]["steps"].as_array().is_none_or(|s| s.is_empty()) {
            return Err("agentic answer without trace steps".into());
        }
        if x["degraded"] == json!(false) && x["answer"]["citations"].as_array().is_none_or(|c| c.is_empty()) {
            return Err(format!("answer without citations: {}", x["answer"]["text"]));
        }
    }
    if a.iter().filter(|x| !x["trace"].is_null()).count() != QUESTIONS.len() {
        return Err("agentic runs must carry a trace".into());
    }
    Ok(())
}

fn agent() -> Result<(), String> {
    use guiderag_core::agent::{run_agent, AgentAction, AgentConfig};
    use guiderag_core::provider::ScriptedLanguageProvider;

    let fixture = support::two_tools();
    let (_, trace) = run_agent("Combien de doses contre la rougeole ?", &fixture.registry, &support::two_tool_script(false), &AgentConfig::default())
        .map_err(|e| e.to_string())?;
    if fixture.calendar.executions() != 0 || fixture.measles.executions() != 1 {
        return Err(format!("tool executions {} / {}", fixture.calendar.executions(), fixture.measles.executions()));
    }
    if !trace.is_well_formed() || trace.finish_count() != 1 {
        return Err("trace must end with exactly one finish".into());
    }

    let fixture = support::two_tools();
    let (_, trace) = run_agent("Calendrier du BCG ?", &fixture.registry, &support::two_tool_script(true), &AgentConfig::default())
        .map_err(|e| e.to_string())?;
    let calls = trace.steps.iter().filter(|s| matches!(s.action, AgentAction::CallTool { .. })).count();
    if calls != 2 || fixture.calendar.executions() != trace.completed_tasks.len() || trace.completed_tasks.len() != 1 {
        return Err(format!("memoization: {calls} calls, {} executions", fixture.calendar.executions()));
    }

    let fixture = support::two_tools();
    let looping = ScriptedLanguageProvider::new("synthèse").on_pattern("Next step:$", "THOUGHT: encore\nACTION: calendrier | BCG");
    let config = AgentConfig { max_steps: 3, ..AgentConfig::default() };
    let (_, trace) = run_agent("q", &fixture.registry, &looping, &config).map_err(|e| e.to_string())?;
    if !trace.truncated || trace.steps.len() != 4 || !trace.is_well_formed() {
        return Err(format!("step cap: {} steps, truncated {}", trace.steps.len(), trace.truncated));
    }
    Ok(())
}

fn benchmark() -> Result<(), String> {
    use guiderag_core::benchmark::{generate_dataset, load_dataset, save_dataset, Difficulty, GeneratorConfig, QuestionType};

    let chunks: Vec<_> = support::fixture_chunks().into_iter().take(5).collect();
    let (dataset, report) = generate_dataset(&chunks, &support::fixture_script(), &GeneratorConfig::default()).map_err(|e| e.to_string())?;
    if dataset.items.len() != 15 || !report.entries.is_empty() {
        return Err(format!("{} items, {} report entries", dataset.items.len(), report.entries.len()));
    }
    for item in &dataset.items {
        let expected = match item.qtype {
            QuestionType::Factual => Difficulty::Easy,
            QuestionType::Conceptual => Difficulty::Medium,
            QuestionType::Applied => Difficulty::Hard,
        };
        if item.difficulty != expected {
            return Err(format!("{} has difficulty {:?}", item.item_id, item.difficulty));
        }
    }
    let mut bytes = Vec::new();
    save_dataset(&dataset, &mut bytes).map_err(|e| e.to_string())?;
    if load_dataset(bytes.as_slice()).map_err(|e| e.to_string())? != dataset {
        return Err("dataset round trip changed the data".into());
    }
    Ok(())
}

struct Server {
    child: Child,
    base: String,
}

impl Server {
    fn start(dir: &Path) -> Result<Self, String> {
        let mut child = Command::new(BIN)
            .arg("--config")
            .arg(dir.join("guiderag.toml"))
            .args(["serve", "--bind", "127.0.0.1:0"])
            .env("GUIDERAG_API_TOKEN", TOKEN)
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| e.to_string())?;
        let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
        loop {
            match lines.next() {
                Some(Ok(line)) => {
                    if let Some(addr) = line.strip_prefix("listening on ") {
                        return Ok(Self { child, base: format!("{addr}/api/v1") });
                    }
                }
                _ => {
                    let _ = child.kill();
                    return Err("server exited before listening".into());
                }
            }
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

struct Client {
    agent: ureq::Agent,
    base: String,
}

impl Client {
    fn new(server: &Server) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(5)))
            .build()
            .into();
        Self { agent, base: server.base.clone() }
    }

    fn get(&self, path: &str) -> Result<(u16, Value), String> {
        let mut resp = self
            .agent
            .get(format!("{}{path}", self.base))
            .header("Authorization", format!("Bearer {TOKEN}"))
            .call()
            .map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        Ok((status, resp.body_mut().read_json().map_err(|e| e.to_string())?))
    }

    fn post(&self, path: &str, body: Value) -> Result<(u16, Value), String> {
        let mut resp = self
            .agent
            .post(format!("{}{path}", self.base))
            .header("Authorization", format!("Bearer {TOKEN}"))
            .send_json(body)
            .map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        Ok((status, resp.body_mut().read_json().map_err(|e| e.to_string())?))
    }
}

fn expect(status: u16, wanted: u16, what: &str, body: &Value) -> Result<(), String> {
    if status == wanted {
        Ok(())
    } else {
        Err(format!("{what}: status {status}, expected {wanted}: {body}"))
    }
}

fn service() -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    prepare(dir.path())?;

    let server = Server::start(dir.path())?;
    let client = Client::new(&server);
    let unauthorized = client.agent.get(format!("{}/sessions", server.base)).call().map_err(|e| e.to_string())?;
    if unauthorized.status().as_u16() != 401 {
        return Err(format!("missing token gave {}", unauthorized.status()));
    }

    let (status, session) = client.post("/sessions", json!({ "title": "Vaccin BCG" }))?;
    expect(status, 201, "create session", &session)?;
    let sid = session["session_id"].as_str().ok_or("no session id")?.to_string();

    let (status, reply) = client.post(&format!("/sessions/{sid}/messages"), json!({ "text": QUESTIONS[0], "mode": "enhanced" }))?;
    expect(status, 200, "post message", &reply)?;
    if reply["degraded"] == json!(true) {
        return Err(format!("degraded reply: {reply}"));
    }
    let citation = reply["citations"].get(0).ok_or("reply has no citation")?;
    let chunk_id = citation["chunk_id"].as_str().ok_or("no chunk id")?;
    let (status, source) = client.get(&format!("/sources/{chunk_id}"))?;
    expect(status, 200, "fetch source", &source)?;
    let excerpt = citation["excerpt"].as_str().ok_or("no excerpt")?;
    if excerpt.is_empty() || !source["full_chunk_text"].as_str().unwrap_or("").contains(excerpt) {
        return Err("excerpt is not a substring of the source text".into());
    }

    let mid = reply["message_id"].as_str().ok_or("no message id")?.to_string();
    for score in [0, 10] {
        let (status, body) = client.post(&format!("/messages/{mid}/rating"), json!({ "score": score, "comment": "ok" }))?;
        expect(status, 200, &format!("rating {score}"), &body)?;
    }
    let (status, body) = client.post(&format!("/messages/{mid}/rating"), json!({ "score": 11 }))?;
    expect(status, 422, "rating 11", &body)?;

    let (_, before) = client.get(&format!("/sessions/{sid}"))?;
    let (_, listed_before) = client.get("/sessions")?;
    drop(server);

    let server = Server::start(dir.path())?;
    let client = Client::new(&server);
    let (status, after) = client.get(&format!("/sessions/{sid}"))?;
    expect(status, 200, "session after restart", &after)?;
    let (_, listed_after) = client.get("/sessions")?;
    if before != after || listed_before != listed_after {
        return Err(format!("state changed across restart:\n{before}\n{after}"));
    }
    let messages = after["messages"].as_array().ok_or("no messages")?;
    if messages.len() != 2 || messages[1]["rating"]["score"] != json!(10) {
        return Err(format!("recovered session is incomplete: {after}"));
    }
    Ok(())
}

fn main() {
    let criteria: [(&str, f64, Check); 9] = [
        ("metric reproduction", 1.0, metrics),
        ("BM25 oracle equivalence", 10.0, bm25),
        ("dense search oracle equivalence", 30.0, dense),
        ("fusion correctness", 5.0, fusion),
        ("chunking conservation", 10.0, chunking),
        ("end-to-end determinism", 5.0, determinism),
        ("agent behaviour", 5.0, agent),
        ("benchmark generator", 2.0, benchmark),
        ("service round trip", 10.0, service),
    ];
    let mut failed = 0;
    for (i, (name, limit, check)) in criteria.into_iter().enumerate() {
        let started = Instant::now();
        let result = check();
        let elapsed = started.elapsed().as_secs_f64();
        let verdict = match result {
            Ok(()) if elapsed < limit => Ok(()),
            Ok(()) => Err(format!("took {elapsed:.2}s, limit {limit}s")),
            Err(e) => Err(e),
        };
        match verdict {
            Ok(()) => println!("PASS {} {name} ({elapsed:.2}s < {limit}s)", i + 1),
            Err(e) => {
                failed += 1;
                println!("FAIL {} {name} ({elapsed:.2}s): {e}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
