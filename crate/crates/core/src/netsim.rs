//! Deterministic in-process network.
//!
//! The [`Network`] owns every node, the user service, the hardware-key
//! registry and a [`Trace`] of every frame sent. Delivery is synchronous:
//! a request is handled by its destination before the sender continues.
//! The trace is self-describing, so [`audit`] can re-check a run from its
//! exported text alone.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::agate::{restricted_view, DeviceNode};
use crate::attestation::{
    component_digest, measure_stack, produce_quote, CertificateIssuer, Digest, EndorsementKey, Nonce, Platform,
    PlatformCertificate, Tpm, TrustedHashList, VerificationMode, VerificationPolicy, NONCE_LEN,
};
use crate::geode::{GeodeProxy, Requester};
use crate::labels::{LabelStore, ProcessLabel};
use crate::magma::{
    device_cert_reply, device_process, membership_reply, parse_cert_request, parse_membership_request,
    platform_cert_reply, split_labeled, split_store, verify_peer, CertRequest, Fabric, Frame, FrameKind, MagmaError,
    MagmaProcess, Membership, PeerCache, PeerStatus,
};
use crate::principals::{AppCertificate, CertVerifier, Decision, Directory, PrincipalId, PrincipalKind, RequestId, UserService};
use crate::taint_vm::{analyze_implicit_flows, execute_with, ExecConfig, Host, HostError, Program, TaggedValue, Value};
use crate::NodeId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum NodeKind {
    Device,
    MagmaServer,
    GeodeProxy,
    UserService,
    UnsafeService,
}

impl NodeKind {
    pub fn name(self) -> &'static str {
        match self {
            NodeKind::Device => "device",
            NodeKind::MagmaServer => "magma",
            NodeKind::GeodeProxy => "geode",
            NodeKind::UserService => "userservice",
            NodeKind::UnsafeService => "unsafe",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [NodeKind::Device, NodeKind::MagmaServer, NodeKind::GeodeProxy, NodeKind::UserService, NodeKind::UnsafeService]
            .into_iter()
            .find(|k| k.name() == name)
    }
}

/// Why the sender put a frame on the wire.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    /// Protocol traffic: quotes, certificates, membership, status.
    Control,
    Public,
    /// The destination proved it runs a trusted stack.
    Attested,
    /// The destination's process label is among the readers.
    Readers,
    /// Sent by a node with no enforcement runtime.
    Unenforced,
}

impl Verdict {
    pub fn name(self) -> &'static str {
        match self {
            Verdict::Control => "control",
            Verdict::Public => "public",
            Verdict::Attested => "attested",
            Verdict::Readers => "readers",
            Verdict::Unenforced => "unenforced",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [Verdict::Control, Verdict::Public, Verdict::Attested, Verdict::Readers, Verdict::Unenforced]
            .into_iter()
            .find(|v| v.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NetError {
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("duplicate node name {0}")]
    DuplicateNode(String),
    #[error("unsafe node {0} lists enforcement component {1}")]
    UnsafeStack(String, String),
}

/// Stack components that provide enforcement; an unsafe node runs none.
pub const ENFORCEMENT_COMPONENTS: [&str; 3] = ["agate", "magma", "geode-proxy"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEntry {
    pub step: u64,
    pub src: NodeId,
    pub dst: NodeId,
    /// The receiving process, for frames that carry data.
    pub process: Option<ProcessLabel>,
    pub frame: Vec<u8>,
    pub verdict: Verdict,
}

impl TraceEntry {
    pub fn kind(&self) -> Option<FrameKind> {
        self.frame.first().copied().and_then(FrameKind::from_u8)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeInfo {
    pub name: String,
    pub kind: NodeKind,
    pub stack: Option<Digest>,
    pub certified: bool,
}

/// Everything the auditor needs besides the frames.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AuditContext {
    pub principals: BTreeMap<PrincipalId, PrincipalKind>,
    /// `(step, group, users)`: membership in effect from `step` on.
    pub groups: Vec<(u64, PrincipalId, BTreeSet<PrincipalId>)>,
    pub nodes: BTreeMap<NodeId, NodeInfo>,
    pub trusted: BTreeSet<Digest>,
}

/// Append-only record of a run.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Trace {
    pub context: AuditContext,
    pub entries: Vec<TraceEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("trace line {line}: {message}")]
pub struct TraceParseError {
    pub line: usize,
    pub message: String,
}

fn parse_id(s: &str) -> Option<PrincipalId> {
    s.parse().ok().and_then(PrincipalId::new)
}

fn parse_digest(s: &str) -> Option<Digest> {
    hex::decode(s).ok()?.try_into().ok()
}

impl Trace {
    /// `# ...` header lines, then one line per frame:
    /// `step TAB src TAB dst TAB kind TAB hex(frame) TAB verdict`. A data
    /// destination is written `node/app` or `node/app/user`.
    pub fn export(&self) -> String {
        let ctx = &self.context;
        let mut out = String::from("# safe-trace 1\n");
        for (id, kind) in &ctx.principals {
            out.push_str(&format!("# principal\t{}\t{}\n", id.get(), kind.name()));
        }
        for (step, group, members) in &ctx.groups {
            let ids: Vec<String> = members.iter().map(|m| m.get().to_string()).collect();
            out.push_str(&format!("# group\t{step}\t{}\t{}\n", group.get(), ids.join(",")));
        }
        for (id, n) in &ctx.nodes {
            let stack = n.stack.map_or("-".to_owned(), hex::encode);
            let cert = if n.certified { "certified" } else { "-" };
            out.push_str(&format!("# node\t{}\t{}\t{}\t{stack}\t{cert}\n", id.0, n.name, n.kind.name()));
        }
        for d in &ctx.trusted {
            out.push_str(&format!("# trusted\t{}\n", hex::encode(d)));
        }
        let name = |id: &NodeId| ctx.nodes.get(id).map_or_else(|| id.to_string(), |n| n.name.clone());
        for e in &self.entries {
            let mut dst = name(&e.dst);
            if let Some(p) = e.process {
                dst.push_str(&format!("/{}", p.app.get()));
                if let Some(u) = p.user {
                    dst.push_str(&format!("/{}", u.get()));
                }
            }
            let kind = e.kind().map_or("?", FrameKind::name);
            out.push_str(&format!(
                "{}\t{}\t{dst}\t{kind}\t{}\t{}\n",
                e.step,
                name(&e.src),
                hex::encode(&e.frame),
                e.verdict.name()
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Trace, TraceParseError> {
        let mut trace = Trace::default();
        let mut by_name: BTreeMap<String, NodeId> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |message: &str| TraceParseError { line, message: message.to_owned() };
            if raw.trim().is_empty() {
                continue;
            }
            if let Some(rest) = raw.strip_prefix("# ") {
                let f: Vec<&str> = rest.split('\t').collect();
                match f.as_slice() {
                    ["safe-trace 1"] => {}
                    ["principal", id, kind] => {
                        let id = parse_id(id).ok_or_else(|| err("bad principal id"))?;
                        let kind = PrincipalKind::from_name(kind).ok_or_else(|| err("bad principal kind"))?;
                        trace.context.principals.insert(id, kind);
                    }
                    ["group", step, gid, members] => {
                        let step = step.parse().map_err(|_| err("bad step"))?;
                        let gid = parse_id(gid).ok_or_else(|| err("bad group id"))?;
                        let members = members
                            .split(',')
                            .filter(|m| !m.is_empty())
                            .map(|m| parse_id(m).ok_or_else(|| err("bad member id")))
                            .collect::<Result<_, _>>()?;
                        trace.context.groups.push((step, gid, members));
                    }
                    ["node", id, name, kind, stack, cert] => {
                        let id = NodeId(id.parse().map_err(|_| err("bad node id"))?);
                        let kind = NodeKind::from_name(kind).ok_or_else(|| err("bad node kind"))?;
                        let stack = match *stack {
                            "-" => None,
                            s => Some(parse_digest(s).ok_or_else(|| err("bad stack digest"))?),
                        };
                        by_name.insert((*name).to_owned(), id);
                        trace.context.nodes.insert(
                            id,
                            NodeInfo { name: (*name).to_owned(), kind, stack, certified: *cert == "certified" },
                        );
                    }
                    ["trusted", d] => {
                        trace.context.trusted.insert(parse_digest(d).ok_or_else(|| err("bad digest"))?);
                    }
                    _ => return Err(err("unknown header line")),
                }
                continue;
            }
            if raw.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = raw.split('\t').collect();
            let [step, src, dst, kind, frame, verdict] = f.as_slice() else {
                return Err(err("expected six tab-separated fields"));
            };
            let node = |n: &str| by_name.get(n).copied().ok_or_else(|| err(&format!("unknown node {n}")));
            let mut dst_parts = dst.split('/');
            let dst_node = node(dst_parts.next().unwrap_or_default())?;
            let ids: Vec<PrincipalId> = dst_parts
                .map(|p| parse_id(p).ok_or_else(|| err("bad process label")))
                .collect::<Result<_, _>>()?;
            let process = match ids.as_slice() {
                [] => None,
                [app] => Some(ProcessLabel::cloud(*app)),
                [app, user] => Some(ProcessLabel::device(*app, *user)),
                _ => return Err(err("bad process label")),
            };
            let frame = hex::decode(frame).map_err(|_| err("bad frame hex"))?;
            let entry = TraceEntry {
                step: step.parse().map_err(|_| err("bad step"))?,
                src: node(src)?,
                dst: dst_node,
                process,
                frame,
                verdict: Verdict::from_name(verdict).ok_or_else(|| err("bad verdict"))?,
            };
            if entry.kind().map(FrameKind::name) != Some(*kind) {
                return Err(err("frame kind does not match its bytes"));
            }
            trace.entries.push(entry);
        }
        Ok(trace)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub step: u64,
    pub src: String,
    pub dst: String,
    pub reason: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step {}: {} -> {}: {}", self.step, self.src, self.dst, self.reason)
    }
}

// The auditor reads labels straight from frame bytes with its own decoder
// and expands readers from the recorded membership history; it shares no
// code with the enforcement path.

fn audit_read_ids(bytes: &[u8], pos: &mut usize) -> Option<Vec<u64>> {
    let n = u32::from_be_bytes(bytes.get(*pos..*pos + 4)?.try_into().ok()?) as usize;
    *pos += 4;
    let mut ids = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        ids.push(u64::from_be_bytes(bytes.get(*pos..*pos + 8)?.try_into().ok()?));
        *pos += 8;
    }
    Some(ids)
}

/// `(owners, readers)` of the label in a data-carrying frame.
fn audit_label(frame: &[u8]) -> Option<(Vec<u64>, Vec<u64>)> {
    let kind = *frame.first()?;
    let body = frame.get(5..)?;
    let mut pos = match kind {
        0 => 0,
        7 => {
            let klen = u16::from_be_bytes(body.get(8..10)?.try_into().ok()?) as usize;
            10 + klen
        }
        _ => return None,
    };
    let owners = audit_read_ids(body, &mut pos)?;
    let readers = audit_read_ids(body, &mut pos)?;
    Some((owners, readers))
}

/// Re-checks every data frame in `trace` against the flow rule: labeled
/// data may only reach a trusted service, or a process whose app and user
/// are both readers.
pub fn audit(trace: &Trace) -> Vec<Violation> {
    let ctx = &trace.context;
    let name = |id: NodeId| ctx.nodes.get(&id).map_or_else(|| id.to_string(), |n| n.name.clone());
    let mut out = Vec::new();
    for e in &trace.entries {
        let kind = e.frame.first().copied();
        if kind != Some(0) && kind != Some(7) {
            continue;
        }
        let violation = |reason: String| Violation { step: e.step, src: name(e.src), dst: name(e.dst), reason };
        let Some((owners, readers)) = audit_label(&e.frame) else {
            out.push(violation("undecodable data frame".into()));
            continue;
        };
        if owners.is_empty() {
            continue;
        }
        let Some(dst) = ctx.nodes.get(&e.dst) else {
            out.push(violation("labeled data to an unknown node".into()));
            continue;
        };
        match dst.kind {
            NodeKind::MagmaServer | NodeKind::GeodeProxy => {
                if !(dst.certified || dst.stack.is_some_and(|s| ctx.trusted.contains(&s))) {
                    out.push(violation(format!("labeled data to unattested {}", dst.kind.name())));
                }
                continue;
            }
            NodeKind::Device => {}
            NodeKind::UserService | NodeKind::UnsafeService => {
                out.push(violation(format!("labeled data to {} node", dst.kind.name())));
                continue;
            }
        }
        let Some(process) = e.process.filter(|p| p.user.is_some()) else {
            out.push(violation("labeled data to a device with no user process".into()));
            continue;
        };
        let mut allowed: BTreeSet<u64> = BTreeSet::new();
        for r in &readers {
            let id = PrincipalId::new(*r);
            let is_group = id.and_then(|i| ctx.principals.get(&i)) == Some(&PrincipalKind::Group);
            if is_group {
                let members = ctx
                    .groups
                    .iter()
                    .rfind(|(step, g, _)| *step <= e.step && g.get() == *r)
                    .map(|(_, _, m)| m.iter().map(|p| p.get()).collect::<Vec<_>>())
                    .unwrap_or_default();
                allowed.extend(members);
            } else {
                allowed.insert(*r);
            }
        }
        let mut missing = Vec::new();
        if !allowed.contains(&process.app.get()) {
            missing.push(process.app.get());
        }
        if let Some(u) = process.user {
            if !allowed.contains(&u.get()) {
                missing.push(u.get());
            }
        }
        if !missing.is_empty() {
            out.push(violation(format!("principals {missing:?} are not readers")));
        }
    }
    out
}

fn requester_process(requester: Requester, app: PrincipalId) -> ProcessLabel {
    match requester {
        Requester::Device(p) => p,
        _ => ProcessLabel::cloud(app),
    }
}

#[derive(Debug)]
pub struct SimNode {
    pub id: NodeId,
    pub name: String,
    pub kind: NodeKind,
    platform: Platform,
    platform_cert: Option<PlatformCertificate>,
    device: Option<DeviceNode>,
    geode: Option<GeodeProxy>,
    apps: BTreeMap<PrincipalId, AppCertificate>,
}

/// How a node proves itself.
#[derive(Clone, Debug, Default)]
pub struct NodeSpec {
    pub stack: Vec<String>,
    pub tpm: bool,
    /// Add the stack's summary to the verifiers' trusted list.
    pub trusted: bool,
    /// Issue a platform certificate for this node.
    pub certified: bool,
}

/// A failed program run, with the error kind used in reports.
#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("{kind}: {message}")]
pub struct RunError {
    pub kind: String,
    pub message: String,
}

impl RunError {
    fn new(kind: impl Into<String>, message: impl Into<String>) -> Self {
        RunError { kind: kind.into(), message: message.into() }
    }
}

type Inbox = VecDeque<(NodeId, Vec<u8>)>;

pub struct Network {
    users: UserService,
    user_service_node: Option<NodeId>,
    nodes: BTreeMap<NodeId, SimNode>,
    names: BTreeMap<String, NodeId>,
    issuer: CertificateIssuer,
    policy: VerificationPolicy,
    endorsements: BTreeMap<NodeId, EndorsementKey>,
    rng: ChaCha8Rng,
    trace: Trace,
    processes: BTreeMap<(NodeId, PrincipalId), MagmaProcess>,
    inboxes: BTreeMap<(NodeId, PrincipalId), Inbox>,
    node_peers: BTreeMap<NodeId, PeerCache>,
    next_node: u64,
    step: u64,
    exec: ExecConfig,
}

impl fmt::Debug for Network {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Network").field("nodes", &self.names).field("step", &self.step).finish()
    }
}

impl Network {
    pub fn new(seed: u64, mode: VerificationMode) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let users = UserService::new(&mut rng);
        let issuer = CertificateIssuer::new(&mut rng);
        let policy = VerificationPolicy { mode, trusted: TrustedHashList::new(), issuer: Some(issuer.verifier()) };
        Network {
            users,
            user_service_node: None,
            nodes: BTreeMap::new(),
            names: BTreeMap::new(),
            issuer,
            policy,
            endorsements: BTreeMap::new(),
            rng,
            trace: Trace::default(),
            processes: BTreeMap::new(),
            inboxes: BTreeMap::new(),
            node_peers: BTreeMap::new(),
            next_node: 1,
            step: 0,
            exec: ExecConfig::default(),
        }
    }

    pub fn users(&self) -> &UserService {
        &self.users
    }

    /// Registration and other directory changes. Membership changes must go
    /// through [`Network::resolve_group_request`] to be audited correctly.
    pub fn users_mut(&mut self) -> &mut UserService {
        &mut self.users
    }

    pub fn add_node(&mut self, name: &str, kind: NodeKind, spec: &NodeSpec) -> Result<NodeId, NetError> {
        if self.names.contains_key(name) {
            return Err(NetError::DuplicateNode(name.to_owned()));
        }
        if kind == NodeKind::UnsafeService {
            if let Some(c) = spec.stack.iter().find(|c| ENFORCEMENT_COMPONENTS.contains(&c.as_str())) {
                return Err(NetError::UnsafeStack(name.to_owned(), c.clone()));
            }
        }
        let id = NodeId(self.next_node);
        self.next_node += 1;
        let mut platform = Platform::default();
        if spec.tpm {
            let tpm = Tpm::provision(&mut self.rng);
            self.endorsements.insert(id, tpm.endorsement());
            platform.tpm = Some(tpm);
        }
        if !spec.stack.is_empty() {
            let components = spec.stack.iter().map(|c| (c.clone(), component_digest(c.as_bytes())));
            let m = measure_stack(components).expect("non-empty stack");
            if spec.trusted {
                self.policy.trusted.insert(*m.summary());
            }
            platform.stack = Some(m);
        }
        let platform_cert = spec.certified.then(|| self.issuer.issue_platform_cert(id));
        let device = (kind == NodeKind::Device).then(|| DeviceNode::new(id, self.rng.next_u64()));
        let geode = (kind == NodeKind::GeodeProxy).then(|| GeodeProxy::new(&mut self.rng));
        if kind == NodeKind::UserService {
            self.user_service_node = Some(id);
        }
        self.nodes.insert(
            id,
            SimNode {
                id,
                name: name.to_owned(),
                kind,
                platform,
                platform_cert,
                device,
                geode,
                apps: BTreeMap::new(),
            },
        );
        self.names.insert(name.to_owned(), id);
        Ok(id)
    }

    pub fn remove_node(&mut self, id: NodeId) -> bool {
        match self.nodes.remove(&id) {
            Some(n) => {
                self.names.remove(&n.name);
                true
            }
            None => false,
        }
    }

    pub fn node_id(&self, name: &str) -> Result<NodeId, NetError> {
        self.names.get(name).copied().ok_or_else(|| NetError::UnknownNode(name.to_owned()))
    }

    pub fn node(&self, id: NodeId) -> Option<&SimNode> {
        self.nodes.get(&id)
    }

    pub fn set_exec_config(&mut self, config: ExecConfig) {
        self.exec = config;
    }

    /// Gives a device the app certificate for `app`.
    pub fn install_app(&mut self, node: NodeId, app: PrincipalId) -> Result<(), String> {
        let cert = self.users.issue_app_certificate(app).map_err(|e| e.to_string())?;
        let n = self.nodes.get_mut(&node).ok_or("unknown node")?;
        n.apps.insert(app, cert);
        Ok(())
    }

    pub fn device(&self, node: NodeId) -> Option<&DeviceNode> {
        self.nodes.get(&node)?.device.as_ref()
    }

    pub fn device_mut(&mut self, node: NodeId) -> Option<&mut DeviceNode> {
        self.nodes.get_mut(&node)?.device.as_mut()
    }

    pub fn geode_mut(&mut self, node: NodeId) -> Option<&mut GeodeProxy> {
        self.nodes.get_mut(&node)?.geode.as_mut()
    }

    pub fn login(&mut self, node: NodeId, user: PrincipalId) -> Result<(), crate::agate::AgateError> {
        let n = self.nodes.get_mut(&node).ok_or(crate::agate::AgateError::AuthFailed)?;
        let device = n.device.as_mut().ok_or(crate::agate::AgateError::AuthFailed)?;
        device.login(&mut self.users, user).map(|_| ())
    }

    /// Approves or denies a membership request from the device where the
    /// group owner is logged in.
    pub fn resolve_group_request(
        &mut self,
        node: NodeId,
        request: RequestId,
        decision: Decision,
    ) -> Result<(), crate::principals::PrincipalError> {
        let cert = self
            .device(node)
            .and_then(|d| d.certificate())
            .cloned()
            .ok_or(crate::principals::PrincipalError::NotOwner)?;
        self.users.resolve_group_request(request, decision, &cert)?;
        self.record_groups();
        Ok(())
    }

    /// Notes current group membership in the trace, effective from the next
    /// frame.
    pub fn record_groups(&mut self) {
        let groups: Vec<PrincipalId> = self
            .users
            .principals()
            .filter(|p| p.kind == PrincipalKind::Group)
            .map(|p| p.id)
            .collect();
        for g in groups {
            let members = self.users.expand_group(g).unwrap_or_default();
            let latest = self.trace.context.groups.iter().rev().find(|(_, id, _)| *id == g).map(|(_, _, m)| m);
            if latest != Some(&members) {
                self.trace.context.groups.push((self.step + 1, g, members));
            }
        }
    }

    pub fn trace(&self) -> Trace {
        let mut t = self.trace.clone();
        t.context.principals = self.users.principals().map(|p| (p.id, p.kind)).collect();
        t.context.nodes = self
            .nodes
            .values()
            .map(|n| {
                let info = NodeInfo {
                    name: n.name.clone(),
                    kind: n.kind,
                    stack: n.platform.stack.as_ref().map(|s| *s.summary()),
                    certified: n.platform_cert.is_some(),
                };
                (n.id, info)
            })
            .collect();
        t.context.trusted = self
            .nodes
            .values()
            .filter_map(|n| n.platform.stack.as_ref().map(|s| *s.summary()))
            .filter(|s| self.policy.trusted.contains(s))
            .collect();
        t
    }

    pub fn frames_sent(&self) -> usize {
        self.trace.entries.len()
    }

    fn record(&mut self, src: NodeId, dst: NodeId, process: Option<ProcessLabel>, frame: &Frame, verdict: Verdict) {
        self.step += 1;
        self.trace.entries.push(TraceEntry { step: self.step, src, dst, process, frame: frame.to_bytes(), verdict });
    }

    /// Puts a data frame on the wire to the process `process` on `dst`.
    pub fn deliver(
        &mut self,
        src: NodeId,
        dst: NodeId,
        process: ProcessLabel,
        frame: Frame,
        verdict: Verdict,
    ) -> Result<(), NetError> {
        for n in [src, dst] {
            if !self.nodes.contains_key(&n) {
                return Err(NetError::UnknownNode(n.to_string()));
            }
        }
        self.record(src, dst, Some(process), &frame, verdict);
        if frame.kind == FrameKind::Data {
            self.inboxes.entry((dst, process.app)).or_default().push_back((src, frame.body));
        }
        Ok(())
    }

    pub fn inbox_len(&self, node: NodeId, app: PrincipalId) -> usize {
        self.inboxes.get(&(node, app)).map_or(0, VecDeque::len)
    }

    /// Verification by the node itself (outside any process).
    pub fn verify(&mut self, from: NodeId, to: NodeId) -> Result<PeerStatus, MagmaError> {
        let mut cache = self.node_peers.remove(&from).unwrap_or_default();
        let out = verify_peer(self, &mut cache, from, to);
        self.node_peers.insert(from, cache);
        out
    }

    /// Fetches and checks the certificates `device` holds for `app`.
    pub fn device_certificates(
        &mut self,
        from: NodeId,
        device: NodeId,
        app: PrincipalId,
    ) -> Result<Result<ProcessLabel, String>, MagmaError> {
        device_process(self, from, device, app)
    }

    fn handle(&mut self, to: NodeId, from: NodeId, frame: &Frame) -> (Frame, Option<ProcessLabel>, Verdict) {
        let control = |f: Frame| (f, None, Verdict::Control);
        let node = &self.nodes[&to];
        match frame.kind {
            FrameKind::QuoteRequest => {
                let Ok(nonce) = <[u8; NONCE_LEN]>::try_from(frame.body.as_slice()) else {
                    return control(Frame::error("ProtocolError", "bad nonce"));
                };
                match produce_quote(&node.platform, Nonce(nonce)) {
                    Ok(q) => control(Frame::new(FrameKind::Quote, q.to_wire().to_vec())),
                    Err(e) => control(Frame::error("NoQuote", &e.to_string())),
                }
            }
            FrameKind::CertRequest => match parse_cert_request(&frame.body) {
                Some(CertRequest::Platform) => match &node.platform_cert {
                    Some(c) => control(platform_cert_reply(c)),
                    None => control(Frame::error("NoCertificate", "no platform certificate")),
                },
                Some(CertRequest::Device(app)) => {
                    let user_cert = node.device.as_ref().and_then(|d| d.certificate());
                    match (node.apps.get(&app), user_cert) {
                        (Some(a), Some(u)) => control(device_cert_reply(a, u)),
                        _ => control(Frame::error("NoCertificate", "app not installed or no user")),
                    }
                }
                None => control(Frame::error("ProtocolError", "bad certificate request")),
            },
            FrameKind::MembershipRequest if node.kind == NodeKind::UserService => {
                let Some(ids) = parse_membership_request(&frame.body) else {
                    return control(Frame::error("ProtocolError", "bad membership request"));
                };
                let entries = ids
                    .into_iter()
                    .map(|id| {
                        let kind = self.users.kind_of(id);
                        let members = if kind == Some(PrincipalKind::Group) {
                            self.users.expand_group(id).unwrap_or_default()
                        } else {
                            BTreeSet::new()
                        };
                        (id, Membership { kind, members })
                    })
                    .collect();
                control(membership_reply(&entries))
            }
            FrameKind::StorePut | FrameKind::StoreGet if node.geode.is_some() => self.handle_storage(to, from, frame),
            _ => control(Frame::error("Unsupported", &format!("{} cannot handle {}", node.name, frame.kind.name()))),
        }
    }

    fn storage_requester(&mut self, geode: NodeId, from: NodeId, app: PrincipalId) -> Result<Requester, MagmaError> {
        if self.nodes.get(&from).map(|n| n.kind) == Some(NodeKind::Device) {
            return Ok(match device_process(self, geode, from, app)? {
                Ok(p) => Requester::Device(p),
                Err(_) => Requester::Unverified,
            });
        }
        Ok(match self.verify(geode, from)? {
            PeerStatus::Verified => Requester::Verified { app },
            PeerStatus::Unverified => Requester::Unverified,
        })
    }

    fn handle_storage(&mut self, to: NodeId, from: NodeId, frame: &Frame) -> (Frame, Option<ProcessLabel>, Verdict) {
        let control = |f: Frame| (f, None, Verdict::Control);
        let Some((app, key, rest)) = split_store(&frame.body) else {
            return control(Frame::error("ProtocolError", "bad storage request"));
        };
        let requester = match self.storage_requester(to, from, app) {
            Ok(r) => r,
            Err(e) => return control(Frame::error(&e.kind(), &e.to_string())),
        };
        if frame.kind == FrameKind::StorePut {
            let Ok((label, value)) = split_labeled(rest) else {
                return control(Frame::error("MalformedPolicy", "bad label"));
            };
            let geode = self.nodes.get_mut(&to).and_then(|n| n.geode.as_mut()).expect("checked by caller");
            return match geode.put(&key, &value.to_bytes(), &label, requester) {
                Ok(()) => control(Frame::ok()),
                Err(e) => control(Frame::error(e.kind(), &e.to_string())),
            };
        }
        let geode = self.nodes[&to].geode.as_ref().expect("checked by caller");
        match geode.get(&key, requester, &self.users) {
            Ok((plain, policy)) => {
                let mut body = policy;
                body.extend_from_slice(&plain);
                let public = split_labeled(&body).is_ok_and(|(l, _)| l.is_public());
                let (process, verdict) = match requester {
                    _ if public => (requester_process(requester, app), Verdict::Public),
                    Requester::Verified { app } => (ProcessLabel::cloud(app), Verdict::Attested),
                    Requester::Device(p) => (p, Verdict::Readers),
                    Requester::Unverified => (ProcessLabel::cloud(app), Verdict::Public),
                };
                (Frame::new(FrameKind::Data, body), Some(process), verdict)
            }
            Err(e) => control(Frame::error(e.kind(), &e.to_string())),
        }
    }

    /// Runs `program` as `app` on `node`. Device nodes need a logged-in
    /// user; the process label is `{app, user}` there and `{app}` elsewhere.
    pub fn run_program(
        &mut self,
        node: NodeId,
        app: PrincipalId,
        program: &Program,
    ) -> Result<BTreeMap<String, Value>, RunError> {
        let n = self.nodes.get(&node).ok_or_else(|| RunError::new("UnknownNode", node.to_string()))?;
        let kind = n.kind;
        let label = match kind {
            NodeKind::Device => {
                let user = n.device.as_ref().and_then(|d| d.user());
                ProcessLabel::device(app, user.ok_or_else(|| RunError::new("NotLoggedIn", n.name.clone()))?)
            }
            _ => ProcessLabel::cloud(app),
        };
        let mut process = match self.processes.remove(&(node, app)) {
            Some(p) if p.label() == label => p,
            _ => MagmaProcess::new(node, label),
        };
        let annotations = analyze_implicit_flows(program);
        let mut labels = LabelStore::new();
        let config = self.exec.clone();
        let result = {
            let mut host = ProcessHost { net: self, process: &mut process, unenforced: kind == NodeKind::UnsafeService };
            execute_with(program, &annotations, &mut host, &mut labels, &config, &mut ())
        };
        self.processes.insert((node, app), process);
        result
            .map(|env| env.into_iter().map(|(k, v)| (k, v.value)).collect())
            .map_err(|e| RunError::new(e.kind(), e.to_string()))
    }
}

impl Fabric for Network {
    fn node_kind(&self, node: NodeId) -> Option<NodeKind> {
        self.nodes.get(&node).map(|n| n.kind)
    }

    fn node_name(&self, node: NodeId) -> String {
        self.nodes.get(&node).map_or_else(|| node.to_string(), |n| n.name.clone())
    }

    fn fresh_nonce(&mut self) -> Nonce {
        Nonce::random(&mut self.rng)
    }

    fn endorsement(&self, node: NodeId) -> Option<EndorsementKey> {
        self.endorsements.get(&node).cloned()
    }

    fn verification(&self) -> &VerificationPolicy {
        &self.policy
    }

    fn cert_verifier(&self) -> CertVerifier {
        self.users.verifier()
    }

    fn user_service(&self) -> Option<NodeId> {
        self.user_service_node
    }

    fn request(&mut self, from: NodeId, to: NodeId, frame: Frame) -> Result<Frame, MagmaError> {
        if !self.nodes.contains_key(&to) {
            return Err(MagmaError::PeerUnreachable(to));
        }
        let data_out = matches!(frame.kind, FrameKind::StorePut);
        let verdict = if data_out { Verdict::Attested } else { Verdict::Control };
        // a store request carries data only once the sender cleared it
        if data_out {
            let app = split_store(&frame.body).map(|(a, _, _)| a);
            let process = app.map(ProcessLabel::cloud);
            let labeled = split_store(&frame.body)
                .and_then(|(_, _, rest)| split_labeled(rest).ok())
                .is_some_and(|(l, _)| !l.is_public());
            self.record(from, to, process, &frame, if labeled { verdict } else { Verdict::Public });
        } else {
            self.record(from, to, None, &frame, verdict);
        }
        let (reply, process, verdict) = self.handle(to, from, &frame);
        self.record(to, from, process, &reply, verdict);
        Ok(reply)
    }

    fn deliver(
        &mut self,
        from: NodeId,
        to: NodeId,
        process: ProcessLabel,
        frame: Frame,
        verdict: Verdict,
    ) -> Result<(), MagmaError> {
        Network::deliver(self, from, to, process, frame, verdict).map_err(|_| MagmaError::PeerUnreachable(to))
    }
}

fn known_kind(kind: &str) -> &'static str {
    const KINDS: [&str; 14] = [
        "FlowDenied",
        "UnknownKey",
        "IntegrityViolation",
        "RollbackDetected",
        "PolicyDenied",
        "UnverifiedRequester",
        "NotCreatorApp",
        "BackendFailure",
        "UnverifiedSender",
        "MalformedPolicy",
        "PeerUnreachable",
        "ProtocolError",
        "Unsupported",
        "NoCertificate",
    ];
    KINDS.iter().find(|k| **k == kind).copied().unwrap_or("RemoteError")
}

fn magma_to_host(e: MagmaError) -> HostError {
    match e {
        MagmaError::FlowDenied { reason, .. } => HostError::FlowDenied(reason),
        other => HostError::failed(known_kind(&other.kind()), other.to_string()),
    }
}

struct ProcessHost<'a> {
    net: &'a mut Network,
    process: &'a mut MagmaProcess,
    unenforced: bool,
}

impl ProcessHost<'_> {
    fn node_named(&self, name: &str) -> Result<NodeId, HostError> {
        self.net.node_id(name).map_err(|e| HostError::failed("UnknownNode", e.to_string()))
    }

    fn device(&mut self) -> Result<&mut DeviceNode, HostError> {
        let node = self.process.node();
        self.net
            .device_mut(node)
            .ok_or_else(|| HostError::failed("UnknownResource", "not a device"))
    }
}

impl Host for ProcessHost<'_> {
    fn resource(&mut self, name: &str, labels: &mut LabelStore) -> Result<TaggedValue, HostError> {
        let app = self.process.label().app;
        self.device()?
            .read_resource(app, name, labels)
            .map_err(|e| HostError::failed(e.kind(), e.to_string()))
    }

    fn declassify(&mut self, view: &str, value: &TaggedValue, labels: &mut LabelStore) -> Result<TaggedValue, HostError> {
        let app = self.process.label().app;
        self.device()?
            .read_restricted(app, view, value, labels)
            .map_err(|e| HostError::failed(e.kind(), e.to_string()))
    }

    fn transform(&mut self, view: &str, value: &Value) -> Result<Value, HostError> {
        let v = restricted_view(view).ok_or_else(|| HostError::failed("UnknownResource", view))?;
        Ok((v.transform)(value))
    }

    fn send(&mut self, dest: &str, value: &TaggedValue, labels: &LabelStore) -> Result<(), HostError> {
        let to = self.node_named(dest)?;
        if self.unenforced {
            let frame = Frame::data(&crate::labels::DataLabel::PUBLIC, &value.value);
            let process = ProcessLabel::cloud(self.process.label().app);
            return Network::deliver(self.net, self.process.node(), to, process, frame, Verdict::Unenforced)
                .map_err(|e| HostError::failed("UnknownNode", e.to_string()));
        }
        self.process.egress_send(self.net, to, value, labels).map(|_| ()).map_err(magma_to_host)
    }

    fn recv(&mut self, labels: &mut LabelStore) -> Result<TaggedValue, HostError> {
        let key = (self.process.node(), self.process.label().app);
        let (src, body) = self
            .net
            .inboxes
            .get_mut(&key)
            .and_then(VecDeque::pop_front)
            .ok_or_else(|| HostError::failed("EmptyInbox", "nothing to receive"))?;
        if self.unenforced {
            let (_, value) = split_labeled(&body).map_err(magma_to_host)?;
            return Ok(TaggedValue::public(value));
        }
        self.process.ingress_tag(self.net, src, &body, labels).map_err(magma_to_host)
    }

    fn store(&mut self, node: &str, key: &str, value: &TaggedValue, labels: &LabelStore) -> Result<(), HostError> {
        let to = self.node_named(node)?;
        self.process.egress_store(self.net, to, key, value, labels).map(|_| ()).map_err(magma_to_host)
    }

    fn fetch(&mut self, node: &str, key: &str, labels: &mut LabelStore) -> Result<TaggedValue, HostError> {
        let to = self.node_named(node)?;
        self.process.fetch(self.net, to, key, labels).map_err(magma_to_host)
    }
}
