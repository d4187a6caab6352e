//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fail.

mod common;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use common::oracle::{brute_metrics, mask_pairs, run_tree_ops, tree_ops, MaskPairs};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use stepforge_core::analysis::{classify_error, ErrorKind, Phase};
use stepforge_core::harness::{
    evaluate_multi_turn, label_universe, metric_accuracy, metric_f1, metric_hamming, metric_precision,
    metric_recall, EvalOptions, LabelSet, MultiTurnMode, PrConvention,
};
use stepforge_core::mcts::pucb;
use stepforge_core::refine::run_search;
use stepforge_core::retriever::{ingest, should_retrieve, DocKind, HashingEmbedder, KNOWN_LIBRARIES};
use stepforge_core::run::{read_log, FileSink};
use stepforge_core::sandbox::replay;
use stepforge_core::{
    Agent, AgentConfig, CorpusDoc, EventPayload, FixHintKind, GuestSession, HumanEdit, RunMode, RunState,
    RunStatus, ScriptedProvider, Session, StepSpec, TaskSpec,
};

type Outcome = Result<(), String>;
type Criterion = fn() -> Outcome;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Outcome {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    })
}

fn metrics_oracle() -> Outcome {
    let start = Instant::now();
    let check = |m: &MaskPairs| -> Result<(), TestCaseError> {
        let pairs = m.label_sets();
        let want = brute_metrics(m);
        let got = [
            metric_accuracy(&pairs).unwrap(),
            metric_recall(&pairs, PrConvention::AsPrinted).unwrap(),
            metric_precision(&pairs, PrConvention::AsPrinted).unwrap(),
            metric_f1(&pairs).unwrap(),
            metric_hamming(&pairs, &label_universe(&pairs)).unwrap(),
        ];
        for (g, w) in got.iter().zip(want) {
            prop_assert!((g - w).abs() <= 1e-12, "got {got:?}, oracle {want:?}");
        }
        Ok(())
    };
    runner(1000).run(&mask_pairs(), |m| check(&m)).map_err(|e| e.to_string())?;
    let same = |l: &[&str]| LabelSet::new(l.iter().copied());
    let identity = vec![
        (same(&["a.x", "b.y"]), same(&["a.x", "b.y"])),
        (same(&["c.z"]), same(&["c.z"])),
    ];
    let values = [
        metric_accuracy(&identity).unwrap(),
        metric_recall(&identity, PrConvention::AsPrinted).unwrap(),
        metric_precision(&identity, PrConvention::AsPrinted).unwrap(),
        metric_f1(&identity).unwrap(),
    ];
    ensure(values == [1.0; 4], || format!("identity gave {values:?}"))?;
    let h = metric_hamming(&identity, &label_universe(&identity)).unwrap();
    ensure(h == 0.0, || format!("identity hamming {h}"))?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))
}

fn pucb_numerics() -> Outcome {
    // direct evaluation: 0.5 + (ln(21/10) + 4) * 0.6 * sqrt(ln 10) / 3
    let direct = 0.5 + ((10.0f64 + 10.0 + 1.0) / 10.0).ln().mul_add(1.0, 4.0) * 0.6 * 10f64.ln().sqrt() / 3.0;
    let got = pucb(0.5, 0.6, 2, 10, 10.0, 4.0);
    ensure((got - 1.93911).abs() <= 1e-4, || format!("score {got}"))?;
    ensure((got - direct).abs() <= 1e-12, || format!("score {got}, direct {direct}"))?;
    let stats = (-1.0f64..0.9, 0.001f64..1.0, 0u64..1000, 2u64..100_000, 0.001f64..0.1);
    runner(10_000)
        .run(&stats, |(q, p, v, n, dq)| {
            let base = pucb(q, p, v, n, 10.0, 4.0);
            prop_assert!(pucb(q, p, v + 1, n, 10.0, 4.0) < base, "visits did not down-weight");
            prop_assert!(pucb(q + dq, p, v, n, 10.0, 4.0) > base, "Q did not up-weight");
            prop_assert!((pucb(q, 1e-12, v, n, 10.0, 4.0) - q).abs() < 1e-9, "p -> 0 did not approach Q");
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn complete_at_1() -> Outcome {
    let task = common::ten_steps();
    let (deps, _) = common::deps_with(ScriptedProvider::new(common::five_then_fail()));
    let report = evaluate_multi_turn(
        std::slice::from_ref(&task),
        &deps,
        &common::tight_cfg(),
        MultiTurnMode::Auto,
        &EvalOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    let c = report.per_task["ten"].complete1;
    ensure(c == Some(0.5), || format!("complete@1 = {c:?}"))
}

fn classifier_fixtures() -> Outcome {
    let cases = [
        ("NameError", "name 'startDate' is not defined", ErrorKind::UndefinedVariable),
        (
            "AttributeError",
            "'FeatureCollection' object has no attribute 'clip'",
            ErrorKind::ApiHallucination,
        ),
        (
            "SyntaxError",
            "closing parenthesis ']' does not match opening parenthesis '('",
            ErrorKind::Syntax,
        ),
    ];
    for (etype, msg, want) in cases {
        let got = classify_error(etype, msg, Phase::Runtime).class;
        ensure(got == want, || format!("{etype}: {msg} -> {got:?}, expected {want:?}"))?;
    }
    Ok(())
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let (deps, _) = common::e2e_deps();
    let cfg = AgentConfig {
        cell_timeout_ms: 10_000,
        ..AgentConfig::default()
    };
    let (state, events) = run_search(&common::e2e_task(), &cfg, deps).map_err(|e| e.to_string())?;
    let rate = state.program().complete_rate();
    ensure(rate == 1.0, || format!("complete@1 = {rate}, status {:?}", state.status))?;
    let surgeries = events.iter().filter(|e| matches!(e.payload, EventPayload::Surgery { .. })).count();
    let api_lists = events
        .iter()
        .filter(|e| {
            matches!(&e.payload, EventPayload::Attempt { hint: Some(h), .. } if h.kind == FixHintKind::AccessibleApiList)
        })
        .count();
    ensure(surgeries == 1, || format!("{surgeries} surgeries"))?;
    ensure(api_lists == 1, || format!("{api_lists} accessible_api_list hints"))?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))
}

fn sandbox_protocol() -> Outcome {
    let (expected, actual) = common::golden_transcript();
    ensure(expected == actual, || "golden transcript differs".into())?;

    let cells = ["xs = [3, 1, 2]", "print(sorted(xs))", "xs.push(1)", "print(sum(xs))"];
    let t = Duration::from_secs(10);
    let r = common::runner();
    let a = replay(&r, &cells, t).map_err(|e| e.to_string())?;
    let b = replay(&r, &cells, t).map_err(|e| e.to_string())?;
    let key = |v: &[stepforge_core::ExecutionOutcome]| v.iter().map(|o| (o.status, o.stdout.clone())).collect::<Vec<_>>();
    ensure(key(&a) == key(&b), || "replays diverged".into())?;

    let mut s = Session::open(&r).map_err(|e| e.to_string())?;
    let (id, version) = (s.session_id(), s.protocol_version().to_string());
    s.execute("x = 41", t).map_err(|e| e.to_string())?;
    let out = s.execute("print(x + 1)", t).map_err(|e| e.to_string())?;
    ensure(out.stdout == "42\n", || format!("namespace lost: {:?}", out.stdout))?;
    s.reset().map_err(|e| e.to_string())?;
    let names = s.introspect_names().map_err(|e| e.to_string())?;
    ensure(names.is_empty(), || format!("names after reset: {names:?}"))?;
    ensure(s.session_id() == id && s.protocol_version() == version, || "reset changed the handshake".into())?;
    s.close();
    Ok(())
}

fn retriever() -> Outcome {
    let libs = ["GeoPandas", "geemap", "xarray-spatial"];
    let docs: Vec<CorpusDoc> = (0..12)
        .map(|i| CorpusDoc {
            doc_id: format!("d{i:02}"),
            library: libs[i % 3].into(),
            kind: DocKind::LibraryDoc,
            function_name: Some(format!("func_{i}")),
            text: format!("function {i} reads layer {} and returns band {}", i * 7, i % 4),
        })
        .collect();
    let embedder = HashingEmbedder::new(256);
    let index = ingest(docs.clone(), &embedder).map_err(|e| e.to_string())?;
    let top = index.query(&docs[5].text, None, 3, &embedder).map_err(|e| e.to_string())?;
    ensure(top.len() == 3, || format!("k=3 returned {}", top.len()))?;
    ensure(top[0].doc_id == "d05" && (top[0].score - 1.0).abs() < 1e-12, || {
        format!("verbatim query ranked {} at {}", top[0].doc_id, top[0].score)
    })?;
    let filter: BTreeSet<String> = ["geemap".to_string()].into();
    let filtered = index.query(&docs[5].text, Some(&filter), 12, &embedder).map_err(|e| e.to_string())?;
    ensure(!filtered.is_empty() && filtered.iter().all(|i| i.library == "geemap"), || {
        "filter let other libraries through".into()
    })?;

    let fixtures: [(&str, &[&str], bool); 20] = [
        ("Load the boundary with GeoPandas.", &[], true),
        ("use geemap to display the map", &[], true),
        ("Compute slope with xarray-spatial.", &[], true),
        ("Fetch items through pystac_client.", &[], true),
        ("Query weather with Meteostat for Berlin.", &[], true),
        ("Mask clouds using eemont.", &[], true),
        ("Open the cube with cubo and plot it.", &[], true),
        ("Export via wxee, then save.", &[], true),
        ("Run segment-geospatial on the tile.", &[], true),
        ("", &["xarray-spatial"], true),
        ("Plot the result.", &["GeoPandas"], true),
        ("Print the area.", &[], false),
        ("plot the result", &[], false),
        ("use geemapper to draw", &[], false),
        ("Reproject the raster to EPSG:4326.", &[], false),
        ("Sum the values in the list.", &[], false),
        ("Use pandas to read the csv.", &[], false),
        ("geopandasx is not a library", &[], false),
        ("Compute NDVI from bands 4 and 8.", &[], false),
        ("Save the figure as png.", &[], false),
    ];
    for (i, (instruction, hints, want)) in fixtures.iter().enumerate() {
        let step = StepSpec::new(i, *instruction).with_hints(hints.iter().copied());
        let got = should_retrieve(&step, KNOWN_LIBRARIES);
        ensure(got == *want, || format!("fixture {i} {instruction:?}: got {got}"))?;
    }
    Ok(())
}

fn tree_invariants() -> Outcome {
    runner(10_000)
        .run(&tree_ops(), |ops| {
            prop_assert_eq!(run_tree_ops(&ops), Ok(()));
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn service_replay() -> Outcome {
    use stepforge_core::llm::{ScriptEntry, ScriptedCandidate};
    use stepforge_core::mcts::LOOKAHEAD_MARKER;
    let t = |s: &str| ScriptedCandidate::Text(s.to_string());
    let provider = ScriptedProvider::new(vec![
        ScriptEntry::new(["Set x to 2."], vec![t("x = 2")]).excluding([LOOKAHEAD_MARKER]),
        ScriptEntry::new(["Print x squared."], vec![t("print(x ** )")])
            .excluding([LOOKAHEAD_MARKER])
            .repeating(),
        ScriptEntry::new([LOOKAHEAD_MARKER], vec![t("pass")]).repeating(),
    ]);
    let (deps, _) = common::deps_with(provider);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("run.jsonl");
    let task = TaskSpec::from_instructions("svc", &[], ["Set x to 2.", "Print x squared."]);
    let sink = FileSink::append(&path).map_err(|e| e.to_string())?;
    let mut agent = Agent::create("svc", task, common::tight_cfg(), RunMode::Human, deps.clone(), Box::new(sink))
        .map_err(|e| e.to_string())?;
    let status = agent.drive().map_err(|e| e.to_string())?;
    ensure(status == RunStatus::Paused, || format!("expected a pause, got {status:?}"))?;

    // a paused run folds back to the same state, and so does the finished one
    let check = |live: &RunState| -> Outcome {
        let events = read_log(&path).map_err(|e| e.to_string())?;
        let folded = RunState::replay(&events).map_err(|e| e.to_string())?;
        ensure(folded.to_json() == live.to_json(), || "replayed state differs".into())?;
        ensure(folded.tree.dump() == live.tree.dump(), || "replayed tree differs".into())
    };
    check(agent.state())?;
    let edit = HumanEdit {
        step_index: 1,
        edited_code: "print(x * x)".into(),
        note: None,
    };
    agent.apply_edit(edit).map_err(|e| e.to_string())?;
    let status = agent.drive().map_err(|e| e.to_string())?;
    ensure(status == RunStatus::Finished, || format!("run ended {status:?}"))?;
    check(agent.state())
}

fn main() {
    let criteria: [(&str, Criterion); 9] = [
        ("metrics oracle equivalence", metrics_oracle),
        ("p-UCB numerics", pucb_numerics),
        ("complete@1 semantics", complete_at_1),
        ("error-classifier fixtures", classifier_fixtures),
        ("end-to-end scripted run", end_to_end),
        ("sandbox protocol", sandbox_protocol),
        ("retriever", retriever),
        ("tree invariants", tree_invariants),
        ("service replay", service_replay),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let ms = start.elapsed().as_millis();
        match result {
            Ok(()) => println!("PASS  {name}  ({ms} ms)"),
            Err(e) => {
                failed += 1;
                println!("FAIL  {name}  ({ms} ms): {e}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
