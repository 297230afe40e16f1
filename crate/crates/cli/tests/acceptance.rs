//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use recap_cli::{cmd_replay, execute, BackendSpec, RunPlan};
use recap_core::context::{ContextWindow, Message, Role};
use recap_core::engine::{run, RunConfig, RunResult, Termination};
use recap_core::kitchen::{solve, KitchenEnv, Scenario};
use recap_core::llm::{parse_plan, plan_to_json, CallKey, ScriptRecord, ScriptedBackend};
use recap_core::prompts::{format_remaining, render, PromptContext, TemplateKind, VariantConfig, VariantMode};
use recap_core::trace::{self, Event, Recorder, Trace, TraceHeader};
use recap_core::tree::{NodeStatus, Plan, TaskTree};
use sha2::{Digest, Sha256};

const CORE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core");
const TIME_LIMIT: Duration = Duration::from_secs(5);
/// SHA-256 of the golden sandwich trace under the default configuration.
const GOLDEN_TRACE_SHA256: &str = "3f544db03e1ffb82c4daff865cdcd1235b748c44ed592a2cd3cdbf33a4b67ed6";
/// Estimated cost of the golden trace at 2.5 / 10 per million tokens.
const GOLDEN_COST: f64 = 0.12448;
const COST_TOLERANCE: f64 = 1e-12;

type Outcome = Result<(), String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

macro_rules! check {
    ($cond:expr, $($msg:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn script(name: &str) -> PathBuf {
    PathBuf::from(format!("{CORE}/assets/scripts/{name}.json"))
}

fn config(mode: VariantMode, depth_cap: Option<usize>) -> RunConfig {
    RunConfig {
        variant: VariantConfig { mode, depth_cap },
        retry_delay_ms: 0,
        ..RunConfig::default()
    }
}

fn plan(scenario: &str, script_name: &str, config: RunConfig) -> RunPlan {
    RunPlan {
        scenario: scenario.to_string(),
        backend: BackendSpec::Scripted(script(script_name)),
        config,
        trace_out: None,
        parallel: 1,
    }
}

fn run_to_file(plan: &RunPlan, path: &Path) -> Result<(RunResult, Trace, Vec<u8>), String> {
    let (result, trace) = execute(plan, Some(path)).map_err(|e| e.to_string())?;
    let bytes = std::fs::read(path).map_err(|e| e.to_string())?;
    Ok((result, trace, bytes))
}

fn sha(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn prompt(call: &trace::LlmCall) -> &str {
    &call.messages.last().expect("calls carry messages").text
}

fn optimal(name: &str) -> usize {
    solve(&Scenario::builtin(name).unwrap()).unwrap().steps
}

fn golden_run(dir: &Path) -> Outcome {
    let plan = plan("sandwich", "sandwich_golden", config(VariantMode::Original, None));
    let start = Instant::now();
    let (result, _, first) = run_to_file(&plan, &dir.join("golden-a.jsonl"))?;
    let elapsed = start.elapsed();
    let (_, _, second) = run_to_file(&plan, &dir.join("golden-b.jsonl"))?;
    check!(result.success, "run did not succeed: {:?}", result.termination);
    check!(result.termination == Termination::GoalReached, "termination {}", result.termination);
    check!(
        result.env_steps == optimal("sandwich"),
        "env_steps {} != oracle {}",
        result.env_steps,
        optimal("sandwich")
    );
    check!(first == second, "trace bytes differ between runs");
    check!(sha(&first) == GOLDEN_TRACE_SHA256, "trace hash {} != pinned {GOLDEN_TRACE_SHA256}", sha(&first));
    check!(elapsed < TIME_LIMIT, "took {elapsed:?}");
    Ok(())
}

fn blocked_board() -> Outcome {
    let start = Instant::now();
    let (result, trace) = execute(
        &plan("blocked_board", "blocked_board_repair", config(VariantMode::Original, None)),
        None,
    )
    .map_err(|e| e.to_string())?;
    check!(start.elapsed() < TIME_LIMIT, "took {:?}", start.elapsed());
    check!(result.success, "run did not succeed: {:?}", result.termination);
    check!(result.env_steps == optimal("blocked_board"), "env_steps {}", result.env_steps);
    let failures: Vec<usize> = trace
        .events
        .iter()
        .enumerate()
        .filter(|(_, e)| matches!(&e.event, Event::LlmCall(c) if c.template == TemplateKind::LeafFailure))
        .map(|(i, _)| i)
        .collect();
    check!(failures.len() == 1, "{} leaf_failure prompts", failures.len());
    let Event::LlmCall(call) = &trace.events[failures[0]].event else { unreachable!() };
    check!(
        prompt(call).contains("board2 is occupied by lettuce1"),
        "failure prompt lacks the blocking diagnostic"
    );
    let Some(Event::Refine(refine)) = trace.events.get(failures[0] + 1).map(|e| &e.event) else {
        return Err("leaf_failure prompt not followed by a refine event".into());
    };
    let unblock = "move lettuce1 to table2";
    check!(
        !refine.previous.subtasks.iter().any(|s| s == unblock) && refine.plan.subtasks.first().map(String::as_str) == Some(unblock),
        "refine did not insert {unblock:?}: {:?}",
        refine.plan.subtasks
    );
    Ok(())
}

fn numbered(n: usize) -> Message {
    if n % 2 == 1 {
        Message::user(format!("m{n}"))
    } else {
        Message::assistant(format!("m{n}"))
    }
}

fn texts(w: &ContextWindow) -> Vec<String> {
    w.render().iter().map(|m| m.text.clone()).collect()
}

fn truncation() -> Outcome {
    let mut runner = TestRunner::new_with_rng(
        Config {
            cases: 1000,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    );
    let strategy = (3usize..40, proptest::collection::vec(0u8..4, 1..300));
    runner
        .run(&strategy, |(cap, ops)| {
            let head = Message::head("HEAD rules");
            let mut w = ContextWindow::new(head.clone(), cap, "rules", 10).unwrap();
            let mut next = 1;
            for op in ops {
                let before = texts(&w);
                match op {
                    0 | 1 => {
                        w.append(numbered(next)).unwrap();
                        next += 1;
                    }
                    2 => {
                        w.enforce_cap();
                        prop_assert!(w.len() <= cap, "cap soundness: {} > {cap}", w.len());
                    }
                    _ => {
                        w.overflow_recover();
                    }
                }
                prop_assert_eq!(&w.render()[0], &head, "index-0 stability");
                if op >= 2 {
                    let after = texts(&w);
                    prop_assert!(before[1..].ends_with(&after[1..]), "monotone suffix");
                }
            }
            Ok(())
        })
        .map_err(|e| format!("{e}"))?;

    let mut w = ContextWindow::new(Message::head("head"), 5, "r", 10).unwrap();
    for m in ["u1", "a1", "u2", "a2", "u3"] {
        let msg = if m.starts_with('u') { Message::user(m) } else { Message::assistant(m) };
        w.append(msg).unwrap();
    }
    w.enforce_cap();
    check!(texts(&w) == ["head", "u2", "a2", "u3"], "6->4 example gave {:?}", texts(&w));

    let mut w = ContextWindow::new(Message::head("m0"), 1000, "r", 10).unwrap();
    for n in 1..40 {
        w.append(numbered(n)).unwrap();
    }
    let removed = w.overflow_recover();
    let expected: Vec<String> = std::iter::once(0).chain(33..40).map(|n| format!("m{n}")).collect();
    check!(removed == 32 && texts(&w) == expected, "overflow survivors {:?}", texts(&w));
    check!(w.render()[0].role == Role::SystemFixedHead, "head role changed");
    Ok(())
}

fn template_fidelity() -> Outcome {
    let s = |name: &str| Some(format!("<<{name}>>"));
    let ctx = PromptContext {
        system_prompt: s("system_prompt"),
        rules: s("rule"),
        init_obs: s("init_obs"),
        task_name: s("task_name"),
        done_task_name: s("done_task_name"),
        fail_task_name: s("fail_task_name"),
        obs: s("obs"),
        previous_stage_task_name: s("previous_stage_task_name"),
        previous_stage_think: s("previous_stage_think"),
        remaining_subtask_str: s("remaining_subtask_str"),
    };
    for kind in TemplateKind::ALL {
        let golden = std::fs::read(format!("{CORE}/tests/golden/{}.golden", kind.as_str())).map_err(|e| e.to_string())?;
        let rendered = render(kind, &ctx).map_err(|e| e.to_string())?;
        check!(rendered.as_bytes() == golden.as_slice(), "{kind} differs from its golden file");
    }
    Ok(())
}

fn reinjection_violations(trace: &Trace, mode: VariantMode) -> usize {
    let mut violations = 0;
    for (i, e) in trace.events.iter().enumerate() {
        let Event::LlmCall(call) = &e.event else { continue };
        if matches!(call.template, TemplateKind::InitialDecomposition | TemplateKind::RecursiveDownward) {
            continue;
        }
        let Some(Event::Refine(refine)) = trace.events.get(i + 1).map(|e| &e.event) else {
            violations += 1;
            continue;
        };
        let text = prompt(call);
        let name_ok = text.contains(&format!("Your current task: {}\n", call.task_name));
        let think_ok = match mode {
            VariantMode::NameOnly => text.contains("Your previous think: \n"),
            _ => text.contains(&format!("Your previous think: {}\n", refine.previous.think)),
        };
        let rest_ok = text.contains(&format_remaining(refine.previous.remaining(), "- "));
        if !(name_ok && think_ok && rest_ok) {
            violations += 1;
        }
    }
    violations
}

fn reinjection() -> Outcome {
    for mode in [VariantMode::Original, VariantMode::NameOnly] {
        let (_, trace) = execute(&plan("sandwich", "sandwich_golden", config(mode, None)), None).map_err(|e| e.to_string())?;
        let transitions = trace
            .llm_calls()
            .filter(|(_, c)| {
                !matches!(c.template, TemplateKind::InitialDecomposition | TemplateKind::RecursiveDownward)
            })
            .count();
        check!(transitions == 10, "{mode}: {transitions} transitions");
        let v = reinjection_violations(&trace, mode);
        check!(v == 0, "{mode}: {v} violations");
    }
    Ok(())
}

fn rec(task: &str, kind: TemplateKind, think: &str, subtasks: &[&str]) -> ScriptRecord {
    ScriptRecord::text(CallKey::new(task, kind), plan_to_json(&Plan::new(think, subtasks.iter().copied())))
}

fn memory_bound() -> Outcome {
    let levels = 10;
    let name = |i: usize| format!("level {i}");
    let oracle = solve(&Scenario::builtin("sandwich").unwrap()).unwrap();
    let actions: Vec<&str> = oracle.actions.iter().map(String::as_str).collect();
    let mut records = vec![rec("make a lettuce sandwich", TemplateKind::InitialDecomposition, "down", &[&name(2)])];
    for i in 2..levels {
        records.push(rec(&name(i), TemplateKind::RecursiveDownward, "down", &[&name(i + 1)]));
    }
    records.push(rec(&name(levels), TemplateKind::RecursiveDownward, "act", &actions));
    for i in 1..actions.len() {
        records.push(rec(&name(levels), TemplateKind::LeafBacktrack, "act", &actions[i..]));
    }
    for cap in [128, 8] {
        let config = RunConfig {
            window_cap: cap,
            ..config(VariantMode::Original, None)
        };
        let backend = ScriptedBackend::new(records.clone()).map_err(|e| e.to_string())?;
        let mut env = KitchenEnv::reset("sandwich").unwrap().0;
        let mut recorder = Recorder::in_memory(TraceHeader::new("sandwich", &config));
        let result = run(&config, &mut env, &backend, &mut recorder).map_err(|e| e.to_string())?;
        let trace = recorder.into_trace();
        check!(result.success, "cap {cap}: {:?}", result.termination);
        check!(result.tree.stats().max_depth == levels, "depth {}", result.tree.stats().max_depth);
        for (seq, c) in trace.llm_calls() {
            check!(c.open_nodes == c.depth, "seq {seq}: {} open at depth {}", c.open_nodes, c.depth);
            check!(c.messages.len() <= cap, "seq {seq}: prompt of {} messages > cap {cap}", c.messages.len());
        }
        for (seq, s) in trace.env_steps() {
            check!(s.open_nodes == s.depth, "seq {seq}: {} open at depth {}", s.open_nodes, s.depth);
        }
    }
    Ok(())
}

fn run_twice(p: &RunPlan) -> Result<(RunResult, Trace), String> {
    let (a, ta) = execute(p, None).map_err(|e| e.to_string())?;
    let (_, tb) = execute(p, None).map_err(|e| e.to_string())?;
    check!(ta.to_jsonl() == tb.to_jsonl(), "{} / {:?} is not deterministic", p.scenario, p.config.variant);
    Ok((a, ta))
}

fn ablations() -> Outcome {
    let (r, t) = run_twice(&plan("sandwich", "sandwich_no_think", config(VariantMode::NoThink, None)))?;
    check!(r.success, "no_think: {:?}", r.termination);
    check!(r.tree.nodes().iter().all(|n| n.plan.think.is_empty()), "no_think kept a think");
    check!(
        t.llm_calls().all(|(_, c)| !c.response.contains("\"think\"")),
        "no_think script carried think"
    );

    let (r, t) = run_twice(&plan("sandwich", "sandwich_golden", config(VariantMode::NameOnly, None)))?;
    check!(r.success, "name_only: {:?}", r.termination);
    let blank = t
        .llm_calls()
        .filter(|(_, c)| c.template.carries_parent_think())
        .all(|(_, c)| prompt(c).contains("Your previous think: \n"));
    check!(blank, "name_only leaked a think");

    let (r, t) = run_twice(&plan("sandwich", "sandwich_golden", config(VariantMode::ThinkMany, None)))?;
    check!(r.success, "think_many: {:?}", r.termination);
    let root_think = "The lettuce has to be cut on the board before it can go between the two breads.";
    let history = t
        .llm_calls()
        .filter(|(_, c)| c.template.carries_parent_think() && c.task_name != "make a lettuce sandwich")
        .all(|(_, c)| prompt(c).contains(&format!("Your previous think: {root_think}\n")));
    check!(history, "think_many did not carry the path history");

    let (r, t) = run_twice(&plan("sandwich", "sandwich_depth2", config(VariantMode::Original, Some(2))))?;
    check!(r.tree.stats().max_depth <= 2, "depth cap 2 exceeded");
    let forced = t
        .events
        .iter()
        .any(|e| matches!(&e.event, Event::Close(c) if c.status == NodeStatus::Failed));
    let failure_prompt = t.llm_calls().any(|(_, c)| c.template == TemplateKind::LeafFailure);
    check!(forced && failure_prompt, "depth cap 2 did not take the forced-primitive failure path");

    for cap in [3, 4, 5] {
        let (r, _) = run_twice(&plan("sandwich", "sandwich_golden", config(VariantMode::Original, Some(cap))))?;
        check!(r.success, "depth cap {cap}: {:?}", r.termination);
        check!(r.tree.stats().max_depth <= cap, "depth cap {cap} exceeded");
    }
    Ok(())
}

fn schema() -> Outcome {
    let p = parse_plan(r#"{"think":"x","subtasks":["a","b"]}"#, VariantMode::Original).map_err(|e| e.to_string())?;
    check!(p == Plan::new("x", ["a", "b"]), "valid plan parsed as {p:?}");
    let p = parse_plan(r#"{"think":"done","subtasks":[]}"#, VariantMode::Original).map_err(|e| e.to_string())?;
    check!(p.is_complete() && p.think == "done", "completion plan parsed as {p:?}");
    let e = parse_plan(r#"{"subtasks":["a"]}"#, VariantMode::Original);
    check!(
        matches!(&e, Err(err) if err.raw == r#"{"subtasks":["a"]}"#),
        "missing think accepted: {e:?}"
    );
    Ok(())
}

fn stats() -> Outcome {
    let mut t = TaskTree::create_root("make sandwich").unwrap();
    let root = t.root();
    t.refine(root, Plan::new("", ["prep", "assemble"])).unwrap();
    let prep = t.expand(root, "prep").unwrap();
    t.refine(prep, Plan::new("", ["a", "b", "c"])).unwrap();
    for s in ["a", "b", "c"] {
        let id = t.expand(prep, s).unwrap();
        t.close(id, NodeStatus::Done).unwrap();
        let rest: Vec<String> = t.node(prep).unwrap().plan.remaining().to_vec();
        t.refine(prep, Plan::new("", rest)).unwrap();
    }
    t.refine(root, Plan::new("", ["assemble"])).unwrap();
    t.expand(root, "assemble").unwrap();
    let s = t.stats();
    check!(s.max_depth == 3 && s.avg_branching == 2.5, "hand-built tree: {s:?}");

    let (result, trace) =
        execute(&plan("sandwich", "sandwich_golden", config(VariantMode::Original, None)), None).map_err(|e| e.to_string())?;
    let from_trace = trace::tree_stats_from_trace(&trace).map_err(|e| e.to_string())?;
    check!(from_trace == result.tree.stats(), "{from_trace:?} != {:?}", result.tree.stats());
    let cost = trace::cost_estimate(&trace, 0.0025, 0.01);
    check!((cost - GOLDEN_COST).abs() < COST_TOLERANCE, "golden cost {cost} != {GOLDEN_COST}");
    Ok(())
}

fn replay_audit(dir: &Path) -> Outcome {
    let path = dir.join("replay.jsonl");
    run_to_file(&plan("sandwich", "sandwich_golden", config(VariantMode::Original, None)), &path)?;
    let mut sink = Vec::new();
    let code = cmd_replay(&path, &mut sink).map_err(|e| e.to_string())?;
    check!(code == 0, "golden replay exited {code}: {}", String::from_utf8_lossy(&sink));

    let text = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let (index, seq) = lines
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| l.contains(r#""kind":"env_step""#))
        .nth(2)
        .map(|(i, l)| (i, serde_seq(l)))
        .ok_or("no third env_step")?;
    let marker = r#""action":""#;
    let at = lines[index].find(marker).ok_or("no action field")? + marker.len();
    let end = at + lines[index][at..].find('"').ok_or("unterminated action")?;
    let mut bytes = lines[index].clone().into_bytes();
    bytes[end - 1] = if bytes[end - 1] == b'1' { b'2' } else { b'1' };
    lines[index] = String::from_utf8(bytes).map_err(|e| e.to_string())?;
    let tampered = dir.join("tampered.jsonl");
    std::fs::write(&tampered, lines.join("\n") + "\n").map_err(|e| e.to_string())?;

    let mut sink = Vec::new();
    let code = cmd_replay(&tampered, &mut sink).map_err(|e| e.to_string())?;
    let report = trace::replay(&Trace::load(&tampered).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    check!(code == 1, "tampered replay exited {code}");
    check!(
        report.divergence.as_ref().map(|d| d.seq) == Some(seq),
        "divergence {:?}, expected seq {seq}",
        report.divergence
    );
    Ok(())
}

fn serde_seq(line: &str) -> u64 {
    let rest = line.strip_prefix(r#"{"seq":"#).expect("events start with seq");
    rest[..rest.find(',').expect("seq is followed by kind")].parse().expect("numeric seq")
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<Criterion> = vec![
        ("golden deterministic run", Box::new(|| golden_run(dir.path()))),
        ("blocked-board recovery", Box::new(blocked_board)),
        ("truncation bit-exactness", Box::new(truncation)),
        ("template fidelity", Box::new(template_fidelity)),
        ("re-injection property", Box::new(reinjection)),
        ("memory bound", Box::new(memory_bound)),
        ("ablation plumbing", Box::new(ablations)),
        ("schema enforcement", Box::new(schema)),
        ("stats correctness", Box::new(stats)),
        ("replay audit", Box::new(|| replay_audit(dir.path()))),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let ms = start.elapsed().as_millis();
        match outcome {
            Ok(()) => println!("PASS  {:>2} {name} ({ms} ms)", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL  {:>2} {name} ({ms} ms): {why}", i + 1);
            }
        }
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
