//! Scenario files and the runner.
//!
//! A scenario is a line-oriented file of sections. `#` starts a comment
//! line. Every entry is `key = value`; program sources are indented blocks
//! under their `[programs]` entry.
//!
//! ```text
//! [principals]
//! alice = user
//! FitApp = app
//!
//! [groups]
//! runners = alice                  # group name = owner
//!
//! [nodes]
//! verification = quote-or-cert
//! users = userservice
//! alice-phone = device stack=agate tpm trusted apps=FitApp
//! fitapp-cloud = magma stack=linux,magma tpm trusted
//! store = geode stack=linux,geode-proxy certified
//!
//! [policies]
//! photos = Camera FitApp betty, runners
//!
//! [scripts]
//! alice-ui = choose 1              # or: reject
//!
//! [programs]
//! upload = FitApp@alice-phone
//!     photo = resource(Camera);
//!     send(fitapp-cloud, photo);
//!
//! [storage]
//! motd@store = FitApp "hello"      # public object preloaded by FitApp
//!
//! [expect]
//! 1 = login alice-phone alice -> ok
//! 2 = set-policy alice-phone photos -> ok
//! 3 = verify alice-phone fitapp-cloud -> verified
//! 4 = run upload -> ok
//! ```
//!
//! Expectation actions:
//!
//! | action | arguments |
//! |---|---|
//! | `login` | NODE USER |
//! | `set-policy` | NODE POLICY |
//! | `propose` | NODE APP SCRIPT POLICY[,POLICY..] |
//! | `group-propose` | GROUP MEMBER APP |
//! | `group-resolve` | NODE GROUP MEMBER approve\|deny |
//! | `verify` | FROM TO |
//! | `certs` | FROM DEVICE APP |
//! | `pin` | NODE RESOURCE VALUE |
//! | `run` | PROGRAM |
//! | `snapshot` / `rollback` | GEODE NAME |
//! | `tamper` | GEODE KEY INDEX |
//!
//! The outcome is `ok`, `verified`, `unverified`, or an error kind such as
//! `FlowDenied`.

use std::collections::BTreeMap;
use std::fmt;
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::agate::PolicyChooser;
use crate::attestation::VerificationMode;
use crate::geode::{Requester, Snapshot};
use crate::labels::{DataLabel, SafePolicy};
use crate::magma::PeerStatus;
use crate::netsim::{audit, Network, NodeKind, NodeSpec, Trace};
use crate::principals::{Decision, PrincipalId, PrincipalKind};
use crate::taint_vm::{parse_program, Program, Value, ENTRY};
use crate::NodeId;

const SECTIONS: [&str; 8] = ["principals", "groups", "nodes", "policies", "scripts", "programs", "storage", "expect"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct ScenarioParseError {
    pub line: usize,
    pub message: String,
}

fn fail<T>(line: usize, message: impl Into<String>) -> Result<T, ScenarioParseError> {
    Err(ScenarioParseError { line, message: message.into() })
}

#[derive(Clone, Debug)]
struct NodeDecl {
    line: usize,
    name: String,
    kind: NodeKind,
    spec: NodeSpec,
    apps: Vec<String>,
}

#[derive(Clone, Debug)]
struct PolicyDecl {
    line: usize,
    resource: String,
    app: String,
    readers: Vec<String>,
}

#[derive(Clone, Debug)]
struct ProgramDecl {
    line: usize,
    app: String,
    node: String,
    program: Program,
}

#[derive(Clone, Debug)]
struct Preload {
    line: usize,
    key: String,
    node: String,
    app: String,
    value: Value,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Expectation {
    pub step: String,
    pub action: String,
    pub args: Vec<String>,
    pub expected: String,
    pub line: usize,
}

impl fmt::Display for Expectation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.action)?;
        for a in &self.args {
            write!(f, " {a}")?;
        }
        write!(f, " -> {}", self.expected)
    }
}

/// A parsed and name-checked scenario.
#[derive(Clone, Debug)]
pub struct Scenario {
    principals: Vec<(String, PrincipalKind)>,
    // (line, group, owner)
    groups: Vec<(usize, String, String)>,
    verification: VerificationMode,
    nodes: Vec<NodeDecl>,
    policies: BTreeMap<String, PolicyDecl>,
    scripts: BTreeMap<String, Option<usize>>,
    programs: BTreeMap<String, ProgramDecl>,
    storage: Vec<Preload>,
    expectations: Vec<Expectation>,
}

fn parse_value(s: &str) -> Option<Value> {
    if let Some(inner) = s.strip_prefix('"').and_then(|r| r.strip_suffix('"')) {
        return Some(Value::Bytes(inner.as_bytes().to_vec()));
    }
    s.parse().ok().map(Value::Int)
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(str::to_owned).collect()
}

fn mode_from_name(name: &str) -> Option<VerificationMode> {
    match name {
        "quote-only" => Some(VerificationMode::QuoteOnly),
        "cert-only" => Some(VerificationMode::CertOnly),
        "quote-or-cert" => Some(VerificationMode::QuoteOrCert),
        _ => None,
    }
}

const ARITY: [(&str, usize); 12] = [
    ("login", 2),
    ("set-policy", 2),
    ("propose", 4),
    ("group-propose", 3),
    ("group-resolve", 4),
    ("verify", 2),
    ("certs", 3),
    ("pin", 3),
    ("run", 1),
    ("snapshot", 2),
    ("rollback", 2),
    ("tamper", 3),
];

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario, ScenarioParseError> {
        let mut s = Scenario {
            principals: Vec::new(),
            groups: Vec::new(),
            verification: VerificationMode::QuoteOrCert,
            nodes: Vec::new(),
            policies: BTreeMap::new(),
            scripts: BTreeMap::new(),
            programs: BTreeMap::new(),
            storage: Vec::new(),
            expectations: Vec::new(),
        };
        let lines: Vec<&str> = text.lines().collect();
        let mut section: Option<&str> = None;
        let mut i = 0;
        while i < lines.len() {
            let line = i + 1;
            let raw = lines[i];
            i += 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            if trimmed.starts_with('[') {
                let name = trimmed.strip_prefix('[').and_then(|r| r.strip_suffix(']'));
                match name.and_then(|n| SECTIONS.iter().find(|s| **s == n)) {
                    Some(n) => section = Some(n),
                    None => return fail(line, format!("unknown section header {trimmed}")),
                }
                continue;
            }
            let Some(sec) = section else {
                return fail(line, "entry outside of any section");
            };
            if raw.starts_with([' ', '\t']) {
                return fail(line, "unexpected indented line");
            }
            let content = match trimmed.find(" #") {
                Some(at) => trimmed[..at].trim_end(),
                None => trimmed,
            };
            let Some((key, value)) = content.split_once('=') else {
                return fail(line, "expected `key = value`");
            };
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return fail(line, "empty key");
            }
            match sec {
                "principals" => {
                    let kind = match value {
                        "user" => PrincipalKind::User,
                        "app" => PrincipalKind::App,
                        _ => return fail(line, format!("principal kind must be user or app, not {value:?}")),
                    };
                    s.principals.push((key.to_owned(), kind));
                }
                "groups" => s.groups.push((line, key.to_owned(), value.to_owned())),
                "nodes" if key == "verification" => {
                    s.verification = mode_from_name(value).ok_or(ScenarioParseError {
                        line,
                        message: format!("unknown verification mode {value:?}"),
                    })?;
                }
                "nodes" => s.nodes.push(parse_node(line, key, value)?),
                "policies" => {
                    let mut words = value.splitn(3, ' ');
                    let (Some(resource), Some(app)) = (words.next(), words.next()) else {
                        return fail(line, "policy needs RESOURCE APP [READERS]");
                    };
                    let readers = split_list(words.next().unwrap_or(""));
                    let decl = PolicyDecl { line, resource: resource.to_owned(), app: app.to_owned(), readers };
                    s.policies.insert(key.to_owned(), decl);
                }
                "scripts" => {
                    let choice = match value.split_whitespace().collect::<Vec<_>>().as_slice() {
                        ["reject"] => None,
                        ["choose", n] => match n.parse::<usize>() {
                            Ok(n) if n >= 1 => Some(n - 1),
                            _ => return fail(line, "choose takes a 1-based index"),
                        },
                        _ => return fail(line, "script must be `choose N` or `reject`"),
                    };
                    s.scripts.insert(key.to_owned(), choice);
                }
                "programs" => {
                    let Some((app, node)) = value.split_once('@') else {
                        return fail(line, "program entry must be `APP@NODE`");
                    };
                    let start = i;
                    while i < lines.len() && (lines[i].trim().is_empty() || lines[i].starts_with([' ', '\t'])) {
                        i += 1;
                    }
                    let body = lines[start..i].join("\n");
                    if body.trim().is_empty() {
                        return fail(line, format!("program {key} has no source"));
                    }
                    let source = if body.contains("fn ") { body } else { format!("fn {ENTRY}() {{ {body}\n}}") };
                    let program = parse_program(&source).map_err(|e| ScenarioParseError {
                        line: line + e.line,
                        message: format!("program {key}: {}", e.message),
                    })?;
                    let decl = ProgramDecl { line, app: app.trim().to_owned(), node: node.trim().to_owned(), program };
                    s.programs.insert(key.to_owned(), decl);
                }
                "storage" => {
                    let Some((k, node)) = key.split_once('@') else {
                        return fail(line, "storage entry must be `KEY@NODE = APP VALUE`");
                    };
                    let Some((app, v)) = value.split_once(' ') else {
                        return fail(line, "storage entry must be `KEY@NODE = APP VALUE`");
                    };
                    let value = parse_value(v.trim()).ok_or(ScenarioParseError { line, message: "bad value".into() })?;
                    s.storage.push(Preload { line, key: k.to_owned(), node: node.to_owned(), app: app.to_owned(), value });
                }
                "expect" => {
                    let Some((call, expected)) = value.rsplit_once("->") else {
                        return fail(line, "expectation must be `ACTION ARGS -> OUTCOME`");
                    };
                    let mut words = call.split_whitespace().map(str::to_owned);
                    let action = words.next().ok_or(ScenarioParseError { line, message: "missing action".into() })?;
                    let args: Vec<String> = words.collect();
                    match ARITY.iter().find(|(a, _)| *a == action) {
                        None => return fail(line, format!("unknown action {action}")),
                        Some((_, n)) if *n != args.len() => {
                            return fail(line, format!("{action} takes {n} arguments, got {}", args.len()))
                        }
                        Some(_) => {}
                    }
                    if s.expectations.iter().any(|e| e.step == key) {
                        return fail(line, format!("duplicate step {key}"));
                    }
                    let expected = expected.trim().to_owned();
                    s.expectations.push(Expectation { step: key.to_owned(), action, args, expected, line });
                }
                _ => unreachable!("section names are checked"),
            }
        }
        s.check_names()?;
        Ok(s)
    }

    pub fn expectations(&self) -> &[Expectation] {
        &self.expectations
    }

    fn principal_declared(&self, name: &str, kind: PrincipalKind) -> bool {
        match kind {
            PrincipalKind::Group => self.groups.iter().any(|(_, g, _)| g == name),
            _ => self.principals.iter().any(|(p, k)| p == name && *k == kind),
        }
    }

    fn node_decl(&self, name: &str) -> Option<&NodeDecl> {
        self.nodes.iter().find(|n| n.name == name)
    }

    fn check_names(&self) -> Result<(), ScenarioParseError> {
        use PrincipalKind::{App, Group, User};
        let at = |line: usize, what: &str, name: &str| ScenarioParseError { line, message: format!("unknown {what} {name:?}") };
        for (line, _, owner) in &self.groups {
            if !self.principal_declared(owner, User) {
                return Err(at(*line, "group owner", owner));
            }
        }
        for n in &self.nodes {
            for app in &n.apps {
                if !self.principal_declared(app, App) {
                    return Err(at(n.line, "app", app));
                }
            }
        }
        for p in self.policies.values() {
            if !self.principal_declared(&p.app, App) {
                return Err(at(p.line, "app", &p.app));
            }
            for r in &p.readers {
                if !self.principal_declared(r, User) && !self.principal_declared(r, Group) {
                    return Err(at(p.line, "reader", r));
                }
            }
        }
        for p in self.programs.values() {
            if !self.principal_declared(&p.app, App) {
                return Err(at(p.line, "app", &p.app));
            }
            if self.node_decl(&p.node).is_none() {
                return Err(at(p.line, "node", &p.node));
            }
        }
        for p in &self.storage {
            if self.node_decl(&p.node).map(|n| n.kind) != Some(NodeKind::GeodeProxy) {
                return Err(at(p.line, "storage node", &p.node));
            }
            if !self.principal_declared(&p.app, App) {
                return Err(at(p.line, "app", &p.app));
            }
        }
        for e in &self.expectations {
            let err = |message: String| ScenarioParseError { line: e.line, message };
            let node = |i: usize| self.node_decl(&e.args[i]).ok_or_else(|| err(format!("unknown node {:?}", e.args[i])));
            let principal = |i: usize, kind: PrincipalKind| {
                if self.principal_declared(&e.args[i], kind) {
                    Ok(())
                } else {
                    Err(err(format!("unknown {} {:?}", kind.name(), e.args[i])))
                }
            };
            match e.action.as_str() {
                "login" => {
                    node(0)?;
                    principal(1, User)?;
                }
                "set-policy" => {
                    node(0)?;
                    if !self.policies.contains_key(&e.args[1]) {
                        return Err(err(format!("unknown policy {:?}", e.args[1])));
                    }
                }
                "propose" => {
                    node(0)?;
                    principal(1, App)?;
                    if !self.scripts.contains_key(&e.args[2]) {
                        return Err(err(format!("unknown script {:?}", e.args[2])));
                    }
                    for p in split_list(&e.args[3]) {
                        if !self.policies.contains_key(&p) {
                            return Err(err(format!("unknown policy {p:?}")));
                        }
                    }
                }
                "group-propose" => {
                    principal(0, Group)?;
                    if !self.principal_declared(&e.args[1], User) && !self.principal_declared(&e.args[1], Group) {
                        return Err(err(format!("unknown member {:?}", e.args[1])));
                    }
                    principal(2, App)?;
                }
                "group-resolve" => {
                    node(0)?;
                    principal(1, Group)?;
                    if !matches!(e.args[3].as_str(), "approve" | "deny") {
                        return Err(err("decision must be approve or deny".into()));
                    }
                }
                "verify" => {
                    node(0)?;
                    node(1)?;
                }
                "certs" => {
                    node(0)?;
                    node(1)?;
                    principal(2, App)?;
                }
                "pin" => {
                    node(0)?;
                    if parse_value(&e.args[2]).is_none() {
                        return Err(err(format!("bad value {:?}", e.args[2])));
                    }
                }
                "run" => {
                    if !self.programs.contains_key(&e.args[0]) {
                        return Err(err(format!("unknown program {:?}", e.args[0])));
                    }
                }
                "snapshot" | "rollback" | "tamper" => {
                    if node(0)?.kind != NodeKind::GeodeProxy {
                        return Err(err(format!("{} is not a geode node", e.args[0])));
                    }
                    if e.action == "tamper" && e.args[2].parse::<usize>().is_err() {
                        return Err(err("tamper index must be a byte offset".into()));
                    }
                }
                _ => unreachable!("actions are checked while parsing"),
            }
        }
        Ok(())
    }
}

fn parse_node(line: usize, name: &str, value: &str) -> Result<NodeDecl, ScenarioParseError> {
    let mut words = value.split_whitespace();
    let kind_name = words.next().unwrap_or_default();
    let kind = NodeKind::from_name(kind_name).ok_or(ScenarioParseError {
        line,
        message: format!("unknown node kind {kind_name:?}"),
    })?;
    let mut spec = NodeSpec::default();
    let mut apps = Vec::new();
    for w in words {
        match w.split_once('=') {
            Some(("stack", list)) => spec.stack = split_list(list),
            Some(("apps", list)) => apps = split_list(list),
            None if w == "tpm" => spec.tpm = true,
            None if w == "trusted" => spec.trusted = true,
            None if w == "certified" => spec.certified = true,
            _ => return fail(line, format!("unknown node attribute {w:?}")),
        }
    }
    if spec.trusted && spec.stack.is_empty() {
        return fail(line, "a trusted node needs a stack");
    }
    Ok(NodeDecl { line, name: name.to_owned(), kind, spec, apps })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ExpectationResult {
    pub step: String,
    #[serde(skip)]
    pub action: String,
    pub expected: String,
    pub actual: String,
    pub pass: bool,
}

/// Deterministic result of a run; timing is kept out of it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Report {
    pub scenario: String,
    pub seed: u64,
    pub expectations: Vec<ExpectationResult>,
    pub audit_violations: Vec<String>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.audit_violations.is_empty() && self.expectations.iter().all(|e| e.pass)
    }

    /// 0 when every expectation holds and the audit is clean, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.passed() {
            0
        } else {
            1
        }
    }

    pub fn render(&self) -> String {
        let mut out = format!("scenario {} (seed {})\n", self.scenario, self.seed);
        for e in &self.expectations {
            let mark = if e.pass { "PASS" } else { "FAIL" };
            out.push_str(&format!("{mark} {}: {}", e.step, e.action));
            if !e.pass {
                out.push_str(&format!(" (got {})", e.actual));
            }
            out.push('\n');
        }
        if self.audit_violations.is_empty() {
            out.push_str("audit: clean\n");
        } else {
            for v in &self.audit_violations {
                out.push_str(&format!("audit violation: {v}\n"));
            }
        }
        let passed = self.expectations.iter().filter(|e| e.pass).count();
        out.push_str(&format!("{passed}/{} expectations passed\n", self.expectations.len()));
        out
    }
}

/// Failure to set up the network a scenario describes.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("setup failed: {0}")]
pub struct SetupError(String);

#[derive(Debug)]
pub struct Outcome {
    pub report: Report,
    pub trace: Trace,
}

struct Script(Option<usize>);

impl PolicyChooser for Script {
    fn choose(&mut self, _app: PrincipalId, _choices: &[SafePolicy]) -> Option<usize> {
        self.0
    }
}

struct Runner<'a> {
    scenario: &'a Scenario,
    net: Network,
    snapshots: BTreeMap<(NodeId, String), Snapshot>,
}

impl Runner<'_> {
    fn id(&self, name: &str, kind: PrincipalKind) -> Result<PrincipalId, String> {
        self.net.users().resolve_name(kind, name).map_err(|e| format!("{name}: {e}"))
    }

    fn reader(&self, name: &str) -> Result<PrincipalId, String> {
        self.id(name, PrincipalKind::User).or_else(|_| self.id(name, PrincipalKind::Group))
    }

    fn node(&self, name: &str) -> Result<NodeId, String> {
        self.net.node_id(name).map_err(|e| e.to_string())
    }

    fn policy(&self, name: &str) -> Result<SafePolicy, String> {
        let p = &self.scenario.policies[name];
        let readers = p.readers.iter().map(|r| self.reader(r)).collect::<Result<Vec<_>, _>>()?;
        Ok(SafePolicy::new(p.resource.clone(), self.id(&p.app, PrincipalKind::App)?, readers))
    }

    fn setup(&mut self) -> Result<(), String> {
        let s = self.scenario;
        for (name, kind) in &s.principals {
            self.net.users_mut().register_principal(*kind, name, None).map_err(|e| e.to_string())?;
        }
        for (_, group, owner) in &s.groups {
            let owner = self.id(owner, PrincipalKind::User)?;
            self.net
                .users_mut()
                .register_principal(PrincipalKind::Group, group, Some(owner))
                .map_err(|e| e.to_string())?;
        }
        for n in &s.nodes {
            let id = self.net.add_node(&n.name, n.kind, &n.spec).map_err(|e| e.to_string())?;
            for app in &n.apps {
                let app = self.id(app, PrincipalKind::App)?;
                self.net.install_app(id, app)?;
            }
        }
        for p in &s.storage {
            let node = self.node(&p.node)?;
            let app = self.id(&p.app, PrincipalKind::App)?;
            let geode = self.net.geode_mut(node).ok_or("not a geode node")?;
            geode
                .put(&p.key, &p.value.to_bytes(), &DataLabel::PUBLIC, Requester::Verified { app })
                .map_err(|e| e.to_string())?;
        }
        self.net.record_groups();
        Ok(())
    }

    /// The observed outcome of one step: `ok`, `verified`, `unverified` or
    /// an error kind.
    fn step(&mut self, e: &Expectation) -> Result<String, String> {
        let a = &e.args;
        let ok = |r: Result<(), String>| r.map(|()| "ok".to_owned());
        match e.action.as_str() {
            "login" => {
                let (node, user) = (self.node(&a[0])?, self.id(&a[1], PrincipalKind::User)?);
                Ok(self.net.login(node, user).map_or_else(|e| e.kind().to_owned(), |()| "ok".into()))
            }
            "set-policy" => {
                let (node, policy) = (self.node(&a[0])?, self.policy(&a[1])?);
                let device = self.net.device_mut(node).ok_or("not a device")?;
                Ok(device.set_policy(policy).map_or_else(|e| e.kind().to_owned(), |()| "ok".into()))
            }
            "propose" => {
                let (node, app) = (self.node(&a[0])?, self.id(&a[1], PrincipalKind::App)?);
                let choices = split_list(&a[3]).iter().map(|p| self.policy(p)).collect::<Result<Vec<_>, _>>()?;
                let mut script = Script(self.scenario.scripts[&a[2]]);
                let device = self.net.device_mut(node).ok_or("not a device")?;
                Ok(device
                    .propose_policy(app, &choices, &mut script)
                    .map_or_else(|e| e.kind().to_owned(), |_| "ok".into()))
            }
            "group-propose" => {
                let group = self.id(&a[0], PrincipalKind::Group)?;
                let member = self.reader(&a[1])?;
                let app = self.id(&a[2], PrincipalKind::App)?;
                Ok(self
                    .net
                    .users_mut()
                    .propose_group_add(group, member, app)
                    .map_or_else(|e| e.kind().to_owned(), |_| "ok".into()))
            }
            "group-resolve" => {
                let node = self.node(&a[0])?;
                let group = self.id(&a[1], PrincipalKind::Group)?;
                let member = self.reader(&a[2])?;
                let decision = if a[3] == "approve" { Decision::Approve } else { Decision::Deny };
                let owner = self.net.users().principal(group).and_then(|g| g.owner).ok_or("group has no owner")?;
                let Some(req) = self
                    .net
                    .users()
                    .pending_for(owner)
                    .into_iter()
                    .find(|r| r.group == group && r.member == member)
                else {
                    return Ok("NotPending".into());
                };
                Ok(self
                    .net
                    .resolve_group_request(node, req.id, decision)
                    .map_or_else(|e| e.kind().to_owned(), |()| "ok".into()))
            }
            "verify" => {
                let (from, to) = (self.node(&a[0])?, self.node(&a[1])?);
                Ok(match self.net.verify(from, to) {
                    Ok(PeerStatus::Verified) => "verified".into(),
                    Ok(PeerStatus::Unverified) => "unverified".into(),
                    Err(e) => e.kind(),
                })
            }
            "certs" => {
                let (from, device) = (self.node(&a[0])?, self.node(&a[1])?);
                let app = self.id(&a[2], PrincipalKind::App)?;
                Ok(match self.net.device_certificates(from, device, app) {
                    Ok(Ok(_)) => "ok".into(),
                    Ok(Err(_)) => "CertificateRejected".into(),
                    Err(e) => e.kind(),
                })
            }
            "pin" => {
                let node = self.node(&a[0])?;
                let value = parse_value(&a[2]).ok_or("bad value")?;
                let device = self.net.device_mut(node).ok_or("not a device")?;
                Ok(device.pin_resource(&a[1], value).map_or_else(|e| e.kind().to_owned(), |()| "ok".into()))
            }
            "run" => {
                let p = &self.scenario.programs[&a[0]];
                let (node, app) = (self.node(&p.node)?, self.id(&p.app, PrincipalKind::App)?);
                Ok(self.net.run_program(node, app, &p.program).map_or_else(|e| e.kind, |_| "ok".into()))
            }
            "snapshot" => {
                let node = self.node(&a[0])?;
                let snap = self.net.geode_mut(node).ok_or("not a geode node")?.backend().snapshot();
                self.snapshots.insert((node, a[1].clone()), snap);
                ok(Ok(()))
            }
            "rollback" => {
                let node = self.node(&a[0])?;
                let Some(snap) = self.snapshots.get(&(node, a[1].clone())).cloned() else {
                    return Ok("UnknownSnapshot".into());
                };
                self.net.geode_mut(node).ok_or("not a geode node")?.backend_mut().rollback(&snap);
                ok(Ok(()))
            }
            "tamper" => {
                let node = self.node(&a[0])?;
                let index: usize = a[2].parse().map_err(|_| "bad index")?;
                let backend = self.net.geode_mut(node).ok_or("not a geode node")?.backend_mut();
                Ok(if backend.tamper(&a[1], index, 0x01) { "ok".into() } else { "OutOfRange".into() })
            }
            other => Err(format!("unknown action {other}")),
        }
    }
}

/// Runs `scenario` deterministically under `seed`.
pub fn run_scenario(scenario: &Scenario, name: &str, seed: u64) -> Result<Outcome, SetupError> {
    let mut runner = Runner {
        scenario,
        net: Network::new(seed, scenario.verification),
        snapshots: BTreeMap::new(),
    };
    runner.setup().map_err(SetupError)?;
    let mut expectations = Vec::new();
    for e in &scenario.expectations {
        let actual = runner.step(e).map_err(SetupError)?;
        expectations.push(ExpectationResult {
            step: e.step.clone(),
            action: e.to_string(),
            expected: e.expected.clone(),
            pass: actual == e.expected,
            actual,
        });
    }
    let trace = runner.net.trace();
    let audit_violations = audit(&trace).iter().map(ToString::to_string).collect();
    let report = Report { scenario: name.to_owned(), seed, expectations, audit_violations };
    Ok(Outcome { report, trace })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub labels: usize,
    pub principals: usize,
    pub rounds: usize,
    /// Mean wall time of one full merge chain.
    pub chain: Duration,
    /// `chain` divided by the number of merges in it.
    pub per_merge: Duration,
    /// Readers left after the chain.
    pub result_readers: usize,
}

/// Times merging `n_labels` labels that each carry `n_principals`
/// readers. Each label has its own owner; all share the same readers, so
/// the chain's intersection stays at full size.
pub fn bench_merge(n_labels: usize, n_principals: usize, rounds: usize) -> BenchReport {
    assert!(n_labels >= 2, "need at least two labels to merge");
    let rounds = rounds.max(1);
    let id = |n: u64| PrincipalId::new(n).expect("nonzero");
    let readers: Vec<PrincipalId> = (1..=n_principals as u64).map(id).collect();
    let labels: Vec<DataLabel> = (0..n_labels as u64)
        .map(|i| DataLabel::new([id(1_000_000 + i)], readers.iter().copied()).expect("one owner"))
        .collect();
    let mut result = labels[0].clone();
    let start = Instant::now();
    for _ in 0..rounds {
        result = labels[1..].iter().fold(labels[0].clone(), |acc, l| acc.merge(l));
        std::hint::black_box(&result);
    }
    let chain = start.elapsed() / rounds as u32;
    BenchReport {
        labels: n_labels,
        principals: n_principals,
        rounds,
        chain,
        per_merge: chain / (n_labels as u32 - 1),
        result_readers: result.reader_ids().len(),
    }
}
