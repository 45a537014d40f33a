use std::sync::atomic::{AtomicUsize, Ordering as AtOrd};

use super::*;
use crate::executor::MigLayout;
use crate::planner::{plan, PlacementProblem, ProblemFile};

fn problem() -> PlacementProblem {
    let profiles = ProfileSet::from_csv_str(include_str!("../../data/preflmr_profiles.csv")).unwrap();
    let file: ProblemFile = serde_json::from_str(include_str!("../../data/preflmr_problem.json")).unwrap();
    PlacementProblem::from_file(file, profiles)
}

fn spec() -> PipelineSpec {
    PipelineSpec::from_json(include_str!("../../data/preflmr_pipeline.json")).unwrap()
}

fn quiet() -> RuntimeConfig {
    RuntimeConfig {
        latency_jitter: 0.0,
        net_jitter_us: 0,
        ..RuntimeConfig::default()
    }
}

fn runtime_with(config: RuntimeConfig, extra_nodes: u32) -> Runtime {
    let p = problem();
    let placement = plan(&p).unwrap();
    let mut rt = Runtime::new(Cluster::new(p.nodes + extra_nodes, p.gpu_gb), p.profiles.clone(), config);
    rt.load_pipeline(&spec(), &placement).unwrap();
    rt
}

fn submit_spaced(rt: &mut Runtime, n: usize, gap_us: Micros) -> Vec<QueryId> {
    (0..n)
        .map(|i| {
            rt.advance_to(i as Micros * gap_us);
            rt.ingress_submit("preflmr", Bytes::from(format!("q{i}"))).unwrap()
        })
        .collect()
}

#[test]
fn idle_round_trip_is_the_critical_path() {
    let mut rt = runtime_with(quiet(), 0);
    let q = rt.ingress_submit("preflmr", Bytes::from_static(b"x")).unwrap();
    rt.run_until_idle();
    let rec = rt.query(q).unwrap();
    assert_eq!(rec.status, QueryStatus::Completed);
    let exec = |s: &str| {
        let st = rec.stages[s];
        st.complete_us - st.dispatch_us
    };
    for s in ["A", "B", "C", "D"] {
        let inst = rt.cluster().instance(rec.tags[s]).unwrap();
        let expect = ms_to_us(rt.profiles().latency_ms(s, inst.size, 1).unwrap());
        assert_eq!(exec(s), expect, "stage {s}");
    }
    let critical = exec("A").max(exec("B")) + exec("C") + exec("D");
    let lat = rec.latency_us().unwrap();
    assert!(lat >= critical && lat <= critical + 3 * rt.config().remote_hop_us, "{lat} vs {critical}");
    assert_eq!(rec.egress_us, Some(rec.stages["D"].emit_us));
}

#[test]
fn tags_are_honoured_and_stages_run_once() {
    let mut rt = runtime_with(RuntimeConfig::default(), 0);
    let ids = submit_spaced(&mut rt, 300, 12_000);
    rt.run_until_idle();
    for &q in &ids {
        let rec = rt.query(q).unwrap();
        assert_eq!(rec.status, QueryStatus::Completed);
        for d in &rec.deliveries {
            assert_eq!(d.instance, rec.tags[&d.stage]);
        }
        assert_eq!(rec.deliveries.len(), 5, "A, B, two inputs of C, D");
    }
    let mut runs: BTreeMap<(QueryId, String), usize> = BTreeMap::new();
    for r in rt.exec_log() {
        *runs.entry((r.query_id, r.stage.clone())).or_default() += 1;
        assert_eq!(r.instance, rt.query(r.query_id).unwrap().tags[&r.stage]);
    }
    assert_eq!(runs.len(), 300 * 4);
    assert!(runs.values().all(|n| *n == 1));
    assert!(!rt.events().iter().any(|e| matches!(e, RuntimeEvent::TagViolation { .. })));
    let s = rt.stats();
    assert_eq!((s.submitted, s.completed, s.failed, s.in_flight), (300, 300, 0, 0));
}

#[test]
fn bursts_batch_up_to_the_cap() {
    let mut rt = runtime_with(RuntimeConfig::default(), 0);
    for _ in 0..100 {
        rt.ingress_submit("preflmr", Bytes::new()).unwrap();
    }
    rt.run_until_idle();
    let sizes: Vec<usize> = rt.batches().iter().map(|b| b.members.len()).collect();
    assert!(sizes.iter().all(|s| (1..=8).contains(s)));
    assert!(sizes.contains(&8));
    for r in rt.exec_log() {
        assert!(r.enqueue_us <= r.dispatch_us && r.dispatch_us < r.complete_us && r.complete_us <= r.emit_us);
    }
}

#[test]
fn results_to_one_node_are_coalesced() {
    let mut rt = runtime_with(RuntimeConfig::default(), 0);
    for _ in 0..40 {
        rt.ingress_submit("preflmr", Bytes::new()).unwrap();
    }
    rt.run_until_idle();
    // every batch produces at most one send per destination node
    let mut per_batch: BTreeMap<(Micros, InstanceId), BTreeSet<u32>> = BTreeMap::new();
    for s in rt.sends().iter().filter(|s| s.from.is_some()) {
        assert!(per_batch.entry((s.ts, s.from.unwrap())).or_default().insert(s.to_node));
    }
    assert!(rt.sends().iter().any(|s| s.count > 1));
}

#[test]
fn components_see_triggers_and_run_per_query() {
    struct Concat(AtomicUsize);
    impl Component for Concat {
        fn process(&self, _key: &Key, inputs: &[Bytes]) -> Bytes {
            Bytes::from(inputs.concat())
        }
        fn on_trigger(&self, key: &Key, _payload: &Bytes) {
            assert!(key.as_str().starts_with("/models/C/preflmr/"));
            self.0.fetch_add(1, AtOrd::SeqCst);
        }
    }
    let p = problem();
    let placement = plan(&p).unwrap();
    let mut rt = Runtime::new(Cluster::new(p.nodes, p.gpu_gb), p.profiles.clone(), quiet());
    let c = Arc::new(Concat(AtomicUsize::new(0)));
    rt.register_component("C", c.clone()).unwrap();
    assert!(matches!(rt.register_component("C", c.clone()), Err(RuntimeError::AlreadyRegistered(_))));
    rt.load_pipeline(&spec(), &placement).unwrap();
    let q = rt.ingress_submit("preflmr", Bytes::from_static(b"ab")).unwrap();
    rt.run_until_idle();
    assert_eq!(rt.query(q).unwrap().result.as_deref(), Some(&b"abab"[..]));
    assert_eq!(c.0.load(AtOrd::SeqCst), 2);

    // a balanced trigger-put on the prefix reaches the handler too
    let key = Key::new("/models/C/preflmr/direct").unwrap();
    rt.kvs_mut().trigger_put_balanced(&key, Bytes::from_static(b"z")).unwrap();
    assert_eq!(c.0.load(AtOrd::SeqCst), 3);
}

#[test]
fn drain_finishes_in_flight_work_and_blocks_ingress() {
    let mut rt = runtime_with(RuntimeConfig::default(), 0);
    for _ in 0..20 {
        rt.ingress_submit("preflmr", Bytes::new()).unwrap();
    }
    assert_eq!(rt.drain("preflmr", 60_000_000).unwrap(), 20);
    assert_eq!(rt.in_flight("preflmr"), Some(0));
    assert!(matches!(rt.ingress_submit("preflmr", Bytes::new()), Err(RuntimeError::Draining(_))));
    rt.resume("preflmr").unwrap();
    rt.ingress_submit("preflmr", Bytes::new()).unwrap();
    assert!(matches!(rt.drain("nope", 1), Err(RuntimeError::NoSuchPipeline(_))));
}

#[test]
fn wedged_instance_times_out_the_drain() {
    let mut rt = runtime_with(RuntimeConfig::default(), 0);
    for inst in rt.pool("D") {
        rt.set_wedged(inst, true);
    }
    rt.ingress_submit("preflmr", Bytes::new()).unwrap();
    assert!(matches!(rt.drain("preflmr", 1_000_000), Err(RuntimeError::DrainTimeout(1))));
}

#[test]
fn missing_input_fails_with_incast_timeout() {
    let mut rt = runtime_with(RuntimeConfig::default(), 0);
    for inst in rt.pool("B") {
        rt.set_wedged(inst, true);
    }
    let q = rt.ingress_submit("preflmr", Bytes::new()).unwrap();
    rt.run_until_idle();
    match &rt.query(q).unwrap().status {
        QueryStatus::Failed(why) => assert!(why.contains("IncastTimeout")),
        s => panic!("unexpected {s:?}"),
    }
    assert!(rt.events().iter().any(|e| matches!(e, RuntimeEvent::IncastTimeout { query, .. } if *query == q)));
    assert_eq!(rt.stats().failed, 1);
    // the late input is ignored once B resumes
    for inst in rt.pool("B") {
        rt.set_wedged(inst, false);
    }
    rt.run_until_idle();
    assert_eq!(rt.stats().completed, 0);
    assert!(rt.exec_log().iter().all(|r| r.stage != "C"));
}

#[test]
fn failed_instance_reroutes_with_a_logged_violation() {
    let mut rt = runtime_with(RuntimeConfig::default(), 0);
    let d_pool = rt.pool("D");
    assert!(d_pool.len() >= 2, "bundled plan has two D replicas");
    for _ in 0..30 {
        rt.ingress_submit("preflmr", Bytes::new()).unwrap();
    }
    rt.fail_instance(d_pool[0]).unwrap();
    rt.run_until_idle();
    assert_eq!(rt.stats().completed, 30);
    let violations = rt
        .events()
        .iter()
        .filter(|e| matches!(e, RuntimeEvent::TagViolation { tagged, .. } if *tagged == d_pool[0]))
        .count();
    assert!(violations > 0);
    assert!(rt.exec_log().iter().all(|r| r.instance != d_pool[0]));
}

#[test]
fn unschedulable_without_a_replica() {
    let p = problem();
    let mut placement = plan(&p).unwrap();
    placement.assignments.retain(|a| a.model != "D");
    let mut rt = Runtime::new(Cluster::new(p.nodes, p.gpu_gb), p.profiles.clone(), quiet());
    match rt.load_pipeline(&spec(), &placement) {
        Err(RuntimeError::Unschedulable { stage, model }) => assert_eq!((stage.as_str(), model.as_str()), ("D", "D")),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn second_load_of_the_same_name_is_rejected() {
    let mut rt = runtime_with(quiet(), 0);
    let placement = plan(&problem()).unwrap();
    assert!(matches!(rt.load_pipeline(&spec(), &placement), Err(RuntimeError::PipelineExists(_))));
}

#[test]
fn preload_activate_and_drain_lifecycle() {
    let mut rt = runtime_with(quiet(), 2);
    let spare = InstanceId { node: 4, slot: 0 };
    let cold = InstanceId { node: 5, slot: 0 };
    rt.cluster.partition_node(4, &MigLayout::full(24)).unwrap();
    rt.cluster.partition_node(5, &MigLayout::full(24)).unwrap();
    let before = rt.capacity_qps("B");

    let ready = rt.preload(spare, "B").unwrap();
    assert_eq!(ready, rt.config().load_delay_us("B"));
    assert_eq!(rt.cluster().instance(spare).unwrap().state(), InstanceState::Preloading);
    assert!(!rt.pool("B").contains(&spare));
    assert!(rt.has_deps(spare, "B"));
    rt.advance_to(ready);
    assert_eq!(rt.cluster().instance(spare).unwrap().state(), InstanceState::Ready);
    rt.activate(spare).unwrap();
    assert!(rt.pool("B").contains(&spare));
    assert!((rt.capacity_qps("B") - before - 40.0).abs() < 1e-9);

    // a cold instance takes tags immediately; its first batch waits out the load
    let t0 = rt.now();
    let ready = rt.cold_join(cold, "B").unwrap();
    assert_eq!(ready, t0 + rt.config().load_delay_us("B"));
    for _ in 0..40 {
        rt.ingress_submit("preflmr", Bytes::new()).unwrap();
    }
    rt.run_until_idle();
    let on_cold: Vec<&ExecRow> = rt.exec_log().iter().filter(|r| r.instance == cold).collect();
    assert!(!on_cold.is_empty());
    assert!(on_cold.iter().all(|r| r.complete_us >= ready));

    rt.deactivate(spare).unwrap();
    assert!(!rt.pool("B").contains(&spare));
    assert_eq!(rt.cluster().instance(spare).unwrap().state(), InstanceState::Empty);
    assert!(rt.events().iter().any(|e| matches!(e, RuntimeEvent::Drained { instance, .. } if *instance == spare)));
    assert!(rt.kvs().cached_keys(kvs_node(spare)).is_empty());
}

#[test]
fn draining_instance_finishes_its_tagged_work() {
    let mut rt = runtime_with(RuntimeConfig::default(), 0);
    let d = rt.pool("D");
    for _ in 0..30 {
        rt.ingress_submit("preflmr", Bytes::new()).unwrap();
    }
    let tagged = rt.queries().iter().filter(|q| q.tags["D"] == d[0]).count();
    assert!(tagged > 0);
    rt.deactivate(d[0]).unwrap();
    assert_eq!(rt.cluster().instance(d[0]).unwrap().state(), InstanceState::Draining);
    rt.run_until_idle();
    assert_eq!(rt.exec_log().iter().filter(|r| r.stage == "D" && r.instance == d[0]).count(), tagged);
    assert_eq!(rt.cluster().instance(d[0]).unwrap().state(), InstanceState::Empty);
    assert!(!rt.events().iter().any(|e| matches!(e, RuntimeEvent::TagViolation { .. })));
}

#[test]
fn same_seed_same_run() {
    let run = || {
        let mut rt = runtime_with(RuntimeConfig::default(), 0);
        submit_spaced(&mut rt, 100, 5_000);
        rt.run_until_idle();
        rt.exec_log().to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn persisted_edge_is_readable_from_the_store() {
    let mut s = spec();
    s.edges[2] = EdgeSpec::Full {
        from: "C".into(),
        to: "D".into(),
        persist: true,
    };
    let p = problem();
    let placement = plan(&p).unwrap();
    let mut rt = Runtime::new(Cluster::new(p.nodes, p.gpu_gb), p.profiles.clone(), quiet());
    rt.load_pipeline(&s, &placement).unwrap();
    let q = rt.ingress_submit("preflmr", Bytes::from_static(b"v")).unwrap();
    rt.run_until_idle();
    let key = Key::new(format!("/models/D/preflmr/{q}/D/C")).unwrap();
    assert_eq!(rt.kvs().get(&key).unwrap().payload, Bytes::from_static(b"v"));
}

#[test]
fn exec_log_csv_has_one_row_per_execution() {
    let mut rt = runtime_with(quiet(), 0);
    rt.ingress_submit("preflmr", Bytes::new()).unwrap();
    rt.run_until_idle();
    let mut out = Vec::new();
    rt.write_exec_log_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("query_id,stage,instance,enqueue_us,dispatch_us,complete_us,emit_us,batch_size"));
    assert_eq!(lines.count(), 4);
}

#[test]
fn ingress_order_is_enqueue_order() {
    let mut rt = runtime_with(RuntimeConfig::default(), 0);
    submit_spaced(&mut rt, 200, 2_000);
    rt.run_until_idle();
    for stage in ["A", "B"] {
        let mut by_inst: BTreeMap<InstanceId, Vec<(Micros, QueryId)>> = BTreeMap::new();
        for q in rt.queries() {
            let st = q.stages[stage];
            by_inst.entry(st.instance).or_default().push((st.enqueue_us, q.id));
        }
        for v in by_inst.values() {
            assert!(v.windows(2).all(|w| w[0].0 <= w[1].0), "stage {stage}");
        }
    }
}
