use safe_core::attestation::VerificationMode;
use safe_core::labels::{decode_prefix, DataLabel, ProcessLabel};
use safe_core::magma::Frame;
use safe_core::netsim::{audit, NetError, Network, NodeKind, NodeSpec, Trace, Verdict};
use safe_core::principals::PrincipalKind;
use safe_core::scenario::{run_scenario, Scenario};
use safe_core::taint_vm::{parse_program, Value};

const FIGURE1: &str = include_str!("../../cli/scenarios/figure1.scn");

fn cloud_spec() -> NodeSpec {
    NodeSpec { stack: vec!["linux".into(), "magma".into()], tpm: true, trusted: true, certified: false }
}

#[test]
fn deliver_is_fifo_per_process() {
    let mut net = Network::new(3, VerificationMode::QuoteOrCert);
    let app = net.users_mut().register_principal(PrincipalKind::App, "App", None).unwrap();
    let a = net.add_node("a", NodeKind::MagmaServer, &cloud_spec()).unwrap();
    let b = net.add_node("b", NodeKind::MagmaServer, &cloud_spec()).unwrap();
    net.install_app(b, app).unwrap();
    for i in 1..=3 {
        let frame = Frame::data(&DataLabel::PUBLIC, &Value::Int(i));
        net.deliver(a, b, ProcessLabel::cloud(app), frame, Verdict::Public).unwrap();
    }
    assert_eq!(net.inbox_len(b, app), 3);
    let program = parse_program("fn main() { recv(x); recv(y); recv(z); }").unwrap();
    let vars = net.run_program(b, app, &program).unwrap();
    assert_eq!(vars["x"], Value::Int(1));
    assert_eq!(vars["y"], Value::Int(2));
    assert_eq!(vars["z"], Value::Int(3));
    assert_eq!(net.inbox_len(b, app), 0);
}

#[test]
fn removed_node_is_unknown() {
    let mut net = Network::new(3, VerificationMode::QuoteOrCert);
    let app = net.users_mut().register_principal(PrincipalKind::App, "App", None).unwrap();
    let a = net.add_node("a", NodeKind::MagmaServer, &cloud_spec()).unwrap();
    let b = net.add_node("b", NodeKind::MagmaServer, &cloud_spec()).unwrap();
    assert!(net.remove_node(b));
    let frame = Frame::data(&DataLabel::PUBLIC, &Value::Int(0));
    let err = net.deliver(a, b, ProcessLabel::cloud(app), frame, Verdict::Public).unwrap_err();
    assert!(matches!(err, NetError::UnknownNode(_)));
    assert!(matches!(net.node_id("b"), Err(NetError::UnknownNode(_))));
}

#[test]
fn unsafe_node_cannot_claim_enforcement() {
    let mut net = Network::new(3, VerificationMode::QuoteOrCert);
    let spec = NodeSpec { stack: vec!["linux".into(), "magma".into()], ..NodeSpec::default() };
    let err = net.add_node("rogue", NodeKind::UnsafeService, &spec).unwrap_err();
    assert!(matches!(err, NetError::UnsafeStack(..)));
}

fn figure1_trace(seed: u64) -> Trace {
    let scenario = Scenario::parse(FIGURE1).unwrap();
    let outcome = run_scenario(&scenario, "figure1", seed).unwrap();
    assert!(outcome.report.passed(), "{}", outcome.report.render());
    outcome.trace
}

#[test]
fn figure1_trace_is_clean_and_round_trips() {
    let trace = figure1_trace(1);
    assert!(audit(&trace).is_empty());
    let parsed = Trace::parse(&trace.export()).unwrap();
    assert_eq!(parsed, trace);
}

#[test]
fn photo_redirected_to_bob_is_flagged() {
    let mut trace = figure1_trace(1);
    let names: std::collections::BTreeMap<_, _> =
        trace.context.nodes.iter().map(|(id, n)| (n.name.clone(), *id)).collect();
    let i = trace
        .entries
        .iter()
        .position(|e| e.dst == names["betty-phone"] && e.verdict == Verdict::Readers)
        .expect("the photo reaches Betty");
    let app = trace.entries[i].process.unwrap().app;
    let (label, _) = decode_prefix(&Frame::from_bytes(&trace.entries[i].frame).unwrap().body).unwrap();
    let bob = trace
        .context
        .principals
        .keys()
        .copied()
        .find(|id| {
            trace.context.principals[id] == PrincipalKind::User
                && !label.owners().contains(id)
                && !label.reader_ids().contains(id)
        })
        .expect("a user outside the photo's label");
    trace.entries[i].process = Some(ProcessLabel::device(app, bob));
    trace.entries[i].dst = names["bob-phone"];
    let violations = audit(&trace);
    assert_eq!(violations.len(), 1);
    assert_eq!(violations[0].dst, "bob-phone");
}

#[test]
fn photo_redirected_to_unsafe_node_is_flagged() {
    let mut trace = figure1_trace(1);
    let eve = trace.context.nodes.iter().find(|(_, n)| n.name == "eve-cloud").map(|(id, _)| *id).unwrap();
    let i = trace.entries.iter().position(|e| e.verdict == Verdict::Attested && e.process.is_some()).unwrap();
    trace.entries[i].dst = eve;
    assert_eq!(audit(&trace).len(), 1);
}

#[test]
fn public_only_trace_is_clean() {
    let text = "\
[principals]
alice = user
App = app

[nodes]
phone = device stack=bootloader,agate tpm trusted apps=App
rogue = unsafe stack=linux

[programs]
post = App@phone
    n = 42;
    send(rogue, n);

[expect]
1 = login phone alice -> ok
2 = run post -> ok
";
    let scenario = Scenario::parse(text).unwrap();
    let outcome = run_scenario(&scenario, "public", 9).unwrap();
    assert!(outcome.report.passed(), "{}", outcome.report.render());
    assert!(outcome.trace.entries.iter().any(|e| e.verdict == Verdict::Public));
    assert!(audit(&outcome.trace).is_empty());
}

#[test]
fn same_seed_same_trace() {
    assert_eq!(figure1_trace(5).export(), figure1_trace(5).export());
}
