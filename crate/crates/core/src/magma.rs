//! The enforcement runtime around an interpreter process.
//!
//! Inbound data is tagged with the label carried in its frame. Outbound
//! labeled data leaves in one of two ways: to a peer that proves it runs a
//! trusted stack, or to a device whose certificates show that its app is
//! ours and its user is a reader. Everything else is refused with
//! [`MagmaError::FlowDenied`].

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::attestation::{AttestationQuote, EndorsementKey, Nonce, PeerEvidence, PlatformCertificate, VerificationPolicy, NONCE_LEN};
use crate::labels::{decode_prefix, encode_frame_label, flow_permitted, DataLabel, LabelStore, ProcessLabel};
use crate::netsim::{NodeKind, Verdict};
use crate::principals::{
    AppCertificate, CertVerifier, Directory, PrincipalId, PrincipalKind, UserCertificate, APP_CERT_LEN,
};
use crate::taint_vm::{TaggedValue, Value};
use crate::NodeId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MagmaError {
    #[error("flow to {dest} denied: {reason}")]
    FlowDenied { dest: String, reason: String },
    #[error("malformed policy in frame")]
    MalformedPolicy,
    #[error("labeled data from unverified sender {0}")]
    UnverifiedSender(NodeId),
    #[error("{0} is unreachable")]
    PeerUnreachable(NodeId),
    /// An error reported by the remote side, e.g. by a storage proxy.
    #[error("{kind}: {message}")]
    Remote { kind: String, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl MagmaError {
    pub fn kind(&self) -> String {
        match self {
            MagmaError::FlowDenied { .. } => "FlowDenied".into(),
            MagmaError::MalformedPolicy => "MalformedPolicy".into(),
            MagmaError::UnverifiedSender(_) => "UnverifiedSender".into(),
            MagmaError::PeerUnreachable(_) => "PeerUnreachable".into(),
            MagmaError::Remote { kind, .. } => kind.clone(),
            MagmaError::Protocol(_) => "ProtocolError".into(),
        }
    }

    fn denied(dest: impl std::fmt::Display, reason: impl Into<String>) -> Self {
        MagmaError::FlowDenied { dest: dest.to_string(), reason: reason.into() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
#[repr(u8)]
pub enum FrameKind {
    Data = 0,
    CertRequest = 1,
    Cert = 2,
    QuoteRequest = 3,
    Quote = 4,
    MembershipRequest = 5,
    Membership = 6,
    StorePut = 7,
    StoreGet = 8,
    Status = 9,
}

impl FrameKind {
    pub fn from_u8(b: u8) -> Option<Self> {
        use FrameKind::*;
        [Data, CertRequest, Cert, QuoteRequest, Quote, MembershipRequest, Membership, StorePut, StoreGet, Status]
            .get(b as usize)
            .copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            FrameKind::Data => "data",
            FrameKind::CertRequest => "cert-request",
            FrameKind::Cert => "cert",
            FrameKind::QuoteRequest => "quote-request",
            FrameKind::Quote => "quote",
            FrameKind::MembershipRequest => "membership-request",
            FrameKind::Membership => "membership",
            FrameKind::StorePut => "store-put",
            FrameKind::StoreGet => "store-get",
            FrameKind::Status => "status",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        (0..=9).filter_map(FrameKind::from_u8).find(|k| k.name() == name)
    }
}

/// `kind u8 ‖ length u32 ‖ body`
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameKind,
    pub body: Vec<u8>,
}

impl Frame {
    pub fn new(kind: FrameKind, body: Vec<u8>) -> Self {
        Frame { kind, body }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + self.body.len());
        out.push(self.kind as u8);
        out.extend_from_slice(&(self.body.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        let kind = FrameKind::from_u8(*bytes.first()?)?;
        let len = u32::from_be_bytes(bytes.get(1..5)?.try_into().ok()?) as usize;
        let body = bytes.get(5..)?;
        (body.len() == len).then(|| Frame { kind, body: body.to_vec() })
    }

    pub fn ok() -> Self {
        Frame::new(FrameKind::Status, vec![0])
    }

    pub fn error(kind: &str, message: &str) -> Self {
        let mut body = vec![1];
        body.extend_from_slice(format!("{kind}: {message}").as_bytes());
        Frame::new(FrameKind::Status, body)
    }

    /// A labeled payload: `frame label ‖ value bytes`.
    pub fn data(label: &DataLabel, value: &Value) -> Self {
        let mut body = encode_frame_label(label);
        body.extend_from_slice(&value.to_bytes());
        Frame::new(FrameKind::Data, body)
    }

    /// `app u64 ‖ key_len u16 ‖ key ‖ frame label ‖ value bytes`
    pub fn store_put(app: PrincipalId, key: &str, label: &DataLabel, value: &Value) -> Self {
        let mut body = app.get().to_be_bytes().to_vec();
        body.extend_from_slice(&key_prefix(key));
        body.extend_from_slice(&encode_frame_label(label));
        body.extend_from_slice(&value.to_bytes());
        Frame::new(FrameKind::StorePut, body)
    }

    /// `app u64 ‖ key_len u16 ‖ key`
    pub fn store_get(app: PrincipalId, key: &str) -> Self {
        let mut body = app.get().to_be_bytes().to_vec();
        body.extend_from_slice(&key_prefix(key));
        Frame::new(FrameKind::StoreGet, body)
    }

    /// `Err((kind, message))` for an error status; `Ok(())` otherwise.
    pub fn status(&self) -> Result<(), (String, String)> {
        match (self.kind, self.body.split_first()) {
            (FrameKind::Status, Some((1, msg))) => {
                let text = String::from_utf8_lossy(msg);
                let (kind, message) = text.split_once(": ").unwrap_or((&text, ""));
                Err((kind.to_owned(), message.to_owned()))
            }
            _ => Ok(()),
        }
    }
}

fn key_prefix(key: &str) -> Vec<u8> {
    let mut body = (key.len() as u16).to_be_bytes().to_vec();
    body.extend_from_slice(key.as_bytes());
    body
}

/// Splits `app u64 ‖ key_len u16 ‖ key ‖ rest`.
pub fn split_store(body: &[u8]) -> Option<(PrincipalId, String, &[u8])> {
    let app = PrincipalId::new(u64::from_be_bytes(body.get(..8)?.try_into().ok()?))?;
    let len = u16::from_be_bytes(body.get(8..10)?.try_into().ok()?) as usize;
    let key = std::str::from_utf8(body.get(10..10 + len)?).ok()?.to_owned();
    Some((app, key, &body[10 + len..]))
}

/// Decodes `frame label ‖ value bytes`.
pub fn split_labeled(body: &[u8]) -> Result<(DataLabel, Value), MagmaError> {
    let (label, used) = decode_prefix(body).map_err(|_| MagmaError::MalformedPolicy)?;
    let value = Value::from_bytes(&body[used..]).ok_or(MagmaError::MalformedPolicy)?;
    Ok((label, value))
}

const CERT_PLATFORM: u8 = 0;
const CERT_DEVICE: u8 = 1;

pub fn platform_cert_request() -> Frame {
    Frame::new(FrameKind::CertRequest, vec![CERT_PLATFORM])
}

pub fn device_cert_request(app: PrincipalId) -> Frame {
    let mut body = vec![CERT_DEVICE];
    body.extend_from_slice(&app.get().to_be_bytes());
    Frame::new(FrameKind::CertRequest, body)
}

pub enum CertRequest {
    Platform,
    Device(PrincipalId),
}

pub fn parse_cert_request(body: &[u8]) -> Option<CertRequest> {
    match body.split_first()? {
        (&CERT_PLATFORM, []) => Some(CertRequest::Platform),
        (&CERT_DEVICE, rest) => Some(CertRequest::Device(PrincipalId::new(u64::from_be_bytes(rest.try_into().ok()?))?)),
        _ => None,
    }
}

pub fn platform_cert_reply(cert: &PlatformCertificate) -> Frame {
    let mut body = vec![CERT_PLATFORM];
    body.extend_from_slice(&cert.to_bytes());
    Frame::new(FrameKind::Cert, body)
}

pub fn device_cert_reply(app: &AppCertificate, user: &UserCertificate) -> Frame {
    let mut body = vec![CERT_DEVICE];
    body.extend_from_slice(&app.to_bytes());
    body.extend_from_slice(&user.to_bytes());
    Frame::new(FrameKind::Cert, body)
}

/// `count u32 ‖ ids u64…`
pub fn membership_request(ids: &BTreeSet<PrincipalId>) -> Frame {
    let mut body = (ids.len() as u32).to_be_bytes().to_vec();
    for id in ids {
        body.extend_from_slice(&id.get().to_be_bytes());
    }
    Frame::new(FrameKind::MembershipRequest, body)
}

pub fn parse_membership_request(body: &[u8]) -> Option<Vec<PrincipalId>> {
    let count = u32::from_be_bytes(body.get(..4)?.try_into().ok()?) as usize;
    let rest = body.get(4..)?;
    if rest.len() != count.checked_mul(8)? {
        return None;
    }
    rest.chunks_exact(8)
        .map(|c| PrincipalId::new(u64::from_be_bytes(c.try_into().expect("8 bytes"))))
        .collect()
}

/// What the user service knows about one principal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Membership {
    pub kind: Option<PrincipalKind>,
    pub members: BTreeSet<PrincipalId>,
}

fn kind_byte(kind: Option<PrincipalKind>) -> u8 {
    match kind {
        None => 0,
        Some(PrincipalKind::User) => 1,
        Some(PrincipalKind::Group) => 2,
        Some(PrincipalKind::App) => 3,
    }
}

/// `count u32 ‖ {id u64 ‖ kind u8 ‖ n u32 ‖ members u64…}…`
pub fn membership_reply(entries: &BTreeMap<PrincipalId, Membership>) -> Frame {
    let mut body = (entries.len() as u32).to_be_bytes().to_vec();
    for (id, m) in entries {
        body.extend_from_slice(&id.get().to_be_bytes());
        body.push(kind_byte(m.kind));
        body.extend_from_slice(&(m.members.len() as u32).to_be_bytes());
        for member in &m.members {
            body.extend_from_slice(&member.get().to_be_bytes());
        }
    }
    Frame::new(FrameKind::Membership, body)
}

pub fn parse_membership_reply(body: &[u8]) -> Option<BTreeMap<PrincipalId, Membership>> {
    let mut pos = 0;
    let mut take = |n: usize| -> Option<&[u8]> {
        let s = body.get(pos..pos + n)?;
        pos += n;
        Some(s)
    };
    let u64_at = |b: &[u8]| u64::from_be_bytes(b.try_into().expect("8 bytes"));
    let count = u32::from_be_bytes(take(4)?.try_into().ok()?);
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let id = PrincipalId::new(u64_at(take(8)?))?;
        let kind = match take(1)?[0] {
            0 => None,
            1 => Some(PrincipalKind::User),
            2 => Some(PrincipalKind::Group),
            3 => Some(PrincipalKind::App),
            _ => return None,
        };
        let n = u32::from_be_bytes(take(4)?.try_into().ok()?);
        let mut members = BTreeSet::new();
        for _ in 0..n {
            members.insert(PrincipalId::new(u64_at(take(8)?))?);
        }
        out.insert(id, Membership { kind, members });
    }
    (pos == body.len()).then_some(out)
}

/// Principal kinds and group members as reported by the user service for
/// one egress check.
#[derive(Clone, Debug, Default)]
pub struct ResolvedDirectory(BTreeMap<PrincipalId, Membership>);

impl Directory for ResolvedDirectory {
    fn kind_of(&self, id: PrincipalId) -> Option<PrincipalKind> {
        self.0.get(&id).and_then(|m| m.kind)
    }

    fn group_members(&self, id: PrincipalId) -> Option<BTreeSet<PrincipalId>> {
        self.0
            .get(&id)
            .filter(|m| m.kind == Some(PrincipalKind::Group))
            .map(|m| m.members.clone())
    }
}

/// What a Magma process needs from the network.
pub trait Fabric {
    fn node_kind(&self, node: NodeId) -> Option<NodeKind>;
    fn node_name(&self, node: NodeId) -> String;
    fn fresh_nonce(&mut self) -> Nonce;
    /// Registered hardware key of `node`, if it has one.
    fn endorsement(&self, node: NodeId) -> Option<EndorsementKey>;
    fn verification(&self) -> &VerificationPolicy;
    fn cert_verifier(&self) -> CertVerifier;
    fn user_service(&self) -> Option<NodeId>;
    /// A traced request/response exchange.
    fn request(&mut self, from: NodeId, to: NodeId, frame: Frame) -> Result<Frame, MagmaError>;
    /// A traced one-way frame carrying data to the process `process` on `to`.
    fn deliver(
        &mut self,
        from: NodeId,
        to: NodeId,
        process: ProcessLabel,
        frame: Frame,
        verdict: Verdict,
    ) -> Result<(), MagmaError>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PeerStatus {
    Verified,
    Unverified,
}

/// Verification outcomes for the lifetime of one process.
#[derive(Clone, Debug, Default)]
pub struct PeerCache(BTreeMap<NodeId, PeerStatus>);

impl PeerCache {
    pub fn get(&self, node: NodeId) -> Option<PeerStatus> {
        self.0.get(&node).copied()
    }
}

/// Asks `peer` for evidence that it runs a trusted stack, using a fresh
/// nonce, and caches the answer.
pub fn verify_peer(
    fabric: &mut dyn Fabric,
    cache: &mut PeerCache,
    me: NodeId,
    peer: NodeId,
) -> Result<PeerStatus, MagmaError> {
    if let Some(status) = cache.get(peer) {
        return Ok(status);
    }
    if fabric.node_kind(peer).is_none() {
        return Err(MagmaError::PeerUnreachable(peer));
    }
    let policy = fabric.verification().clone();
    let mut verified = false;
    if policy.mode != crate::attestation::VerificationMode::CertOnly {
        let nonce = fabric.fresh_nonce();
        let reply = fabric.request(me, peer, Frame::new(FrameKind::QuoteRequest, nonce.0.to_vec()))?;
        if reply.kind == FrameKind::Quote {
            if let Some(quote) = AttestationQuote::from_wire(&reply.body) {
                let ek = fabric.endorsement(peer);
                verified = policy.accepts(peer, &PeerEvidence::Quote(quote), &nonce, ek.as_ref());
            }
        }
    }
    if !verified && policy.mode != crate::attestation::VerificationMode::QuoteOnly {
        let reply = fabric.request(me, peer, platform_cert_request())?;
        if let (FrameKind::Cert, Some((&CERT_PLATFORM, rest))) = (reply.kind, reply.body.split_first()) {
            if let Some(cert) = PlatformCertificate::from_bytes(rest) {
                let unused = Nonce([0; NONCE_LEN]);
                verified = policy.accepts(peer, &PeerEvidence::Certificate(cert), &unused, None);
            }
        }
    }
    let status = if verified { PeerStatus::Verified } else { PeerStatus::Unverified };
    cache.0.insert(peer, status);
    Ok(status)
}

/// Fetches and checks the app and user certificates of `device` for `app`.
/// Returns the process label they establish, or the reason they fail.
pub fn device_process(
    fabric: &mut dyn Fabric,
    me: NodeId,
    device: NodeId,
    app: PrincipalId,
) -> Result<Result<ProcessLabel, String>, MagmaError> {
    let reply = fabric.request(me, device, device_cert_request(app))?;
    if let Err((kind, message)) = reply.status() {
        return Ok(Err(format!("no certificates: {kind} {message}")));
    }
    let body = match (reply.kind, reply.body.split_first()) {
        (FrameKind::Cert, Some((&CERT_DEVICE, rest))) if rest.len() > APP_CERT_LEN => rest,
        _ => return Ok(Err("malformed certificate reply".into())),
    };
    let (app_bytes, user_bytes) = body.split_at(APP_CERT_LEN);
    let (Some(app_cert), Some(user_cert)) = (AppCertificate::from_bytes(app_bytes), UserCertificate::from_bytes(user_bytes))
    else {
        return Ok(Err("malformed certificate".into()));
    };
    let verifier = fabric.cert_verifier();
    let Ok(cert_app) = verifier.verify_app(&app_cert) else {
        return Ok(Err("app certificate does not verify".into()));
    };
    if cert_app != app {
        return Ok(Err(format!("device runs {cert_app}, not {app}")));
    }
    let Ok(user) = verifier.verify_user(&user_cert) else {
        return Ok(Err("user certificate does not verify".into()));
    };
    if user_cert.device != device {
        return Ok(Err("user certificate is for another device".into()));
    }
    Ok(Ok(ProcessLabel::device(app, user)))
}

/// Asks the user service about every reader of `label`.
pub fn resolve_readers(fabric: &mut dyn Fabric, me: NodeId, label: &DataLabel) -> Result<ResolvedDirectory, MagmaError> {
    let service = fabric.user_service().ok_or(MagmaError::Protocol("no user service".into()))?;
    let reply = fabric.request(me, service, membership_request(label.reader_ids()))?;
    if reply.kind != FrameKind::Membership {
        return Err(MagmaError::Protocol("bad membership reply".into()));
    }
    parse_membership_reply(&reply.body)
        .map(ResolvedDirectory)
        .ok_or(MagmaError::Protocol("malformed membership reply".into()))
}

/// One application process under enforcement.
#[derive(Clone, Debug)]
pub struct MagmaProcess {
    node: NodeId,
    label: ProcessLabel,
    peers: PeerCache,
}

/// How a labeled value left the process.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Egress {
    Public,
    Attested,
    Readers,
}

impl MagmaProcess {
    pub fn new(node: NodeId, label: ProcessLabel) -> Self {
        MagmaProcess { node, label, peers: PeerCache::default() }
    }

    pub fn label(&self) -> ProcessLabel {
        self.label
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn verify_peer(&mut self, fabric: &mut dyn Fabric, peer: NodeId) -> Result<PeerStatus, MagmaError> {
        verify_peer(fabric, &mut self.peers, self.node, peer)
    }

    /// Whether labeled data from `sender` may be believed: it is a verified
    /// service, or a device whose certificates show it runs our app.
    fn trusts_sender(&mut self, fabric: &mut dyn Fabric, sender: NodeId) -> Result<bool, MagmaError> {
        if fabric.node_kind(sender) == Some(NodeKind::Device) {
            return Ok(device_process(fabric, self.node, sender, self.label.app)?.is_ok());
        }
        Ok(self.verify_peer(fabric, sender)? == PeerStatus::Verified)
    }

    /// Tags an inbound `frame label ‖ value` body with its label.
    pub fn ingress_tag(
        &mut self,
        fabric: &mut dyn Fabric,
        sender: NodeId,
        body: &[u8],
        labels: &mut LabelStore,
    ) -> Result<TaggedValue, MagmaError> {
        let (label, value) = split_labeled(body)?;
        if !label.is_public() && !self.trusts_sender(fabric, sender)? {
            return Err(MagmaError::UnverifiedSender(sender));
        }
        Ok(TaggedValue { value, tag: labels.intern(label) })
    }

    /// Decides how `value` may reach `dest`; on `Ok` returns the process
    /// label of the receiving process and the release basis.
    fn clear_egress(
        &mut self,
        fabric: &mut dyn Fabric,
        dest: NodeId,
        label: &DataLabel,
    ) -> Result<(ProcessLabel, Egress), MagmaError> {
        let name = fabric.node_name(dest);
        let kind = fabric.node_kind(dest).ok_or(MagmaError::PeerUnreachable(dest))?;
        if kind == NodeKind::Device {
            // devices are never trusted wholesale; their certificates decide
            let process = match device_process(fabric, self.node, dest, self.label.app)? {
                Ok(p) => p,
                Err(_) if label.is_public() => ProcessLabel::cloud(self.label.app),
                Err(reason) => return Err(MagmaError::denied(name, reason)),
            };
            if label.is_public() {
                return Ok((process, Egress::Public));
            }
            let dir = resolve_readers(fabric, self.node, label)?;
            return match flow_permitted(label, &process, &dir) {
                Ok(true) => Ok((process, Egress::Readers)),
                Ok(false) => Err(MagmaError::denied(name, format!("{process} is not among the readers"))),
                Err(e) => Err(MagmaError::denied(name, e.to_string())),
            };
        }
        let process = ProcessLabel::cloud(self.label.app);
        if label.is_public() {
            return Ok((process, Egress::Public));
        }
        match self.verify_peer(fabric, dest)? {
            PeerStatus::Verified => Ok((process, Egress::Attested)),
            PeerStatus::Unverified => Err(MagmaError::denied(name, "not a verified SAFE service")),
        }
    }

    /// Sends `value` with its policy to the same app on `dest`.
    pub fn egress_send(
        &mut self,
        fabric: &mut dyn Fabric,
        dest: NodeId,
        value: &TaggedValue,
        labels: &LabelStore,
    ) -> Result<Egress, MagmaError> {
        let label = labels.get(value.tag).without_origins();
        let (process, how) = self.clear_egress(fabric, dest, &label)?;
        fabric.deliver(self.node, dest, process, Frame::data(&label, &value.value), how.into())?;
        Ok(how)
    }

    /// Stores `value` under `key` at a storage proxy.
    pub fn egress_store(
        &mut self,
        fabric: &mut dyn Fabric,
        dest: NodeId,
        key: &str,
        value: &TaggedValue,
        labels: &LabelStore,
    ) -> Result<Egress, MagmaError> {
        let label = labels.get(value.tag).without_origins();
        let (_, how) = self.clear_egress(fabric, dest, &label)?;
        let reply = fabric.request(self.node, dest, Frame::store_put(self.label.app, key, &label, &value.value))?;
        if let Err((kind, message)) = reply.status() {
            return Err(MagmaError::Remote { kind, message });
        }
        Ok(how)
    }

    /// Reads `key` back from a storage proxy.
    pub fn fetch(
        &mut self,
        fabric: &mut dyn Fabric,
        dest: NodeId,
        key: &str,
        labels: &mut LabelStore,
    ) -> Result<TaggedValue, MagmaError> {
        let reply = fabric.request(self.node, dest, Frame::store_get(self.label.app, key))?;
        if let Err((kind, message)) = reply.status() {
            return Err(MagmaError::Remote { kind, message });
        }
        if reply.kind != FrameKind::Data {
            return Err(MagmaError::Protocol("expected data".into()));
        }
        self.ingress_tag(fabric, dest, &reply.body, labels)
    }
}

impl From<Egress> for Verdict {
    fn from(e: Egress) -> Self {
        match e {
            Egress::Public => Verdict::Public,
            Egress::Attested => Verdict::Attested,
            Egress::Readers => Verdict::Readers,
        }
    }
}
