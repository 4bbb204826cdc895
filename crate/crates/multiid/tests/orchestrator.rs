use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use multiid::bench::clients::{ClientError, ClientResult, Clients, LlmClient, VlmClient};
use multiid::bench::orchestrator::{fan_out, StageLog, StageName};
use multiid::bench::{schema, templates, BuildOptions, Orchestrator};
use multiid::config::RunConfig;
use multiid::AppError;

fn options(interactions: usize, prompts: usize) -> BuildOptions {
    let mut cfg = RunConfig::default();
    cfg.bench.interactions = interactions;
    cfg.bench.prompts_per_interaction = prompts;
    cfg.bench.backoff_ms = 1;
    BuildOptions::from_config(&cfg)
}

/// Replies from a script, one entry per call, repeating the last one.
struct ScriptedLlm {
    replies: Vec<ClientResult<String>>,
    calls: AtomicUsize,
}

impl ScriptedLlm {
    fn new(replies: Vec<ClientResult<String>>) -> Self {
        Self {
            replies,
            calls: AtomicUsize::new(0),
        }
    }
}

impl LlmClient for ScriptedLlm {
    fn complete(&self, _: &str) -> ClientResult<String> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        self.replies[n.min(self.replies.len() - 1)].clone()
    }
}

fn with_llm(llm: ScriptedLlm) -> (Clients, Arc<ScriptedLlm>) {
    let llm = Arc::new(llm);
    let mut c = Clients::stub();
    c.llm = llm.clone();
    (c, llm)
}

#[test]
fn duplicates_trigger_another_call() {
    let (clients, llm) = with_llm(ScriptedLlm::new(vec![
        Ok("1. Hugging\n2. hugging\n3. Dancing".into()),
        Ok("Dancing\nFist bump\nWaving".into()),
    ]));
    let dir = tempfile::tempdir().unwrap();
    let o = Orchestrator::new(clients, options(3, 1), dir.path());
    let mut log = StageLog::default();
    let got = o.nominate_interactions(3, &mut log).unwrap();
    assert_eq!(got, ["Hugging", "Dancing", "Fist bump"]);
    assert_eq!(llm.calls.load(Ordering::SeqCst), 2);
    assert!(log.warnings.iter().any(|w| w.contains("duplicate")));
}

#[test]
fn too_few_distinct_items_is_an_adapter_error() {
    let (clients, llm) = with_llm(ScriptedLlm::new(vec![Ok("Hugging\nHugging".into())]));
    let dir = tempfile::tempdir().unwrap();
    let mut opts = options(3, 1);
    opts.duplicate_retries = 2;
    let o = Orchestrator::new(clients, opts, dir.path());
    let err = o.nominate_interactions(3, &mut StageLog::default()).unwrap_err();
    assert!(matches!(err, AppError::Adapter(_)));
    assert_eq!(err.exit_code(), 3);
    assert_eq!(llm.calls.load(Ordering::SeqCst), 3);
}

#[test]
fn transient_failures_are_retried() {
    let (clients, llm) = with_llm(ScriptedLlm::new(vec![
        Err(ClientError::new("llm", "503")),
        Err(ClientError::new("llm", "503")),
        Ok("Hugging\nDancing".into()),
    ]));
    let dir = tempfile::tempdir().unwrap();
    let o = Orchestrator::new(clients, options(2, 1), dir.path());
    let mut log = StageLog::default();
    assert_eq!(o.nominate_interactions(2, &mut log).unwrap().len(), 2);
    assert_eq!(llm.calls.load(Ordering::SeqCst), 3);
    assert_eq!(log.calls.len(), 1);
    assert_eq!(log.calls[0].attempts, 3);

    let (clients, _) = with_llm(ScriptedLlm::new(vec![Err(ClientError::new("llm", "down"))]));
    let o = Orchestrator::new(clients, options(2, 1), dir.path());
    let mut log = StageLog::default();
    assert!(o.nominate_interactions(2, &mut log).is_err());
    assert_eq!(log.calls[0].attempts, 3);
    assert!(log.calls[0].error.as_deref().unwrap().contains("down"));
}

struct ScriptedVlm(Mutex<Vec<String>>);

impl VlmClient for ScriptedVlm {
    fn ask(&self, _: Option<&[u8]>, _: &str) -> ClientResult<String> {
        let mut q = self.0.lock().unwrap();
        Ok(if q.len() > 1 { q.remove(0) } else { q[0].clone() })
    }
}

fn with_vlm(replies: &[&str]) -> Clients {
    let mut c = Clients::stub();
    c.vlm = Arc::new(ScriptedVlm(Mutex::new(replies.iter().map(|s| s.to_string()).collect())));
    c
}

#[test]
fn long_concept_lists_are_truncated_with_a_warning() {
    let many = (0..14).map(|i| format!("thing{i}")).collect::<Vec<_>>().join(", ");
    let dir = tempfile::tempdir().unwrap();
    let o = Orchestrator::new(with_vlm(&[&many]), options(1, 1), dir.path());
    let mut log = StageLog::default();
    let got = o.extract_concepts(b"png", "templates/0000.png", &mut log).unwrap();
    assert_eq!(got.len(), templates::MAX_CONCEPTS);
    assert_eq!(got[0], "thing0");
    assert!(log.warnings[0].contains("14 concepts"));
}

#[test]
fn annotation_headers_in_any_case() {
    let dir = tempfile::tempdir().unwrap();
    for reply in [
        "State: sitting cross-legged\nAppearance: grey beard, blue shirt",
        "**STATE**: sitting cross-legged\n**APPEARANCE**: grey beard, blue shirt",
        "'appearance': grey beard, blue shirt. 'state': sitting cross-legged",
    ] {
        let o = Orchestrator::new(with_vlm(&[reply]), options(1, 1), dir.path());
        let a = o.annotate(b"png", "crop.png", &mut StageLog::default()).unwrap();
        assert_eq!(a.state.trim_end_matches('.'), "sitting cross-legged", "{reply}");
        assert_eq!(a.appearance.trim_end_matches('.'), "grey beard, blue shirt", "{reply}");
    }
    let o = Orchestrator::new(with_vlm(&["A man sitting."]), options(1, 1), dir.path());
    let err = o.annotate(b"png", "crop.png", &mut StageLog::default()).unwrap_err();
    assert!(err.to_string().contains("raw response"));
}

#[test]
fn human_filter_keeps_yes_answers_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let o = Orchestrator::new(with_vlm(&["Yes.", "no", "YES, it is"]), options(1, 1), dir.path());
    let concepts = ["man", "tree", "girl"].map(String::from);
    let kept = o.filter_human_concepts(&concepts, &mut StageLog::default()).unwrap();
    assert_eq!(kept, ["man", "girl"]);
}

#[test]
fn rerun_resumes_from_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.bench.interactions = 3;
    cfg.bench.prompts_per_interaction = 2;
    let first = multiid::bench::build(&cfg, dir.path()).unwrap();
    let bytes = std::fs::read(&first.benchmark).unwrap();
    assert_eq!(first.records.len(), StageName::ORDER.len());
    assert!(first.records.iter().all(|r| !r.resumed));
    assert_eq!(first.prompts, 6);

    let second = multiid::bench::build(&cfg, dir.path()).unwrap();
    assert!(second.records.iter().all(|r| r.resumed));
    assert_eq!(std::fs::read(&second.benchmark).unwrap(), bytes);
    for (a, b) in first.records.iter().zip(&second.records) {
        assert_eq!(a.output_digest, b.output_digest);
    }

    cfg.seed = 1;
    let third = multiid::bench::build(&cfg, dir.path()).unwrap();
    let resumed: Vec<bool> = third.records.iter().map(|r| r.resumed).collect();
    assert_eq!(resumed[..2], [true, true]);
    assert!(!resumed[2]);

    let stages: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("stages.json")).unwrap()).unwrap();
    assert_eq!(stages.as_array().unwrap().len(), StageName::ORDER.len());
    let samples = schema::load(&third.benchmark).unwrap();
    assert!(samples.iter().all(|s| s.ids.iter().all(|i| i.full_description.starts_with(&i.posture_description))));
    assert!(dir.path().join("review.csv").is_file());
}

#[test]
fn fan_out_keeps_input_order() {
    let items: Vec<u64> = (0..37).collect();
    for bound in [1, 3, 8] {
        let out = fan_out(&items, bound, |i, &v| {
            std::thread::sleep(Duration::from_micros((37 - v) * 10));
            (i, v * v)
        });
        assert_eq!(out, items.iter().map(|&v| (v as usize, v * v)).collect::<Vec<_>>());
    }
}
