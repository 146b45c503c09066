//! Principal registry and the user service.
//!
//! The user service is the trusted root of an ecosystem. It hands out
//! principal ids for users, groups and applications, keeps the name → id
//! mapping, manages group membership (only ever changed after the group
//! owner approves a request from their own device), and issues the user and
//! application certificates that enforcement nodes check before releasing
//! data to a device.
//!
//! Certificates are authenticated with HMAC-SHA256 under a service-held
//! secret. Verification goes through [`CertVerifier`], an opaque handle the
//! service gives out to enforcement nodes.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{SecretKey, DIGEST_LEN};
use crate::NodeId;

/// Ecosystem-wide principal identifier. Zero is reserved.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PrincipalId(u64);

impl PrincipalId {
    pub fn new(raw: u64) -> Option<Self> {
        (raw != 0).then_some(PrincipalId(raw))
    }

    pub fn get(self) -> u64 {
        self.0
    }
}

impl fmt::Display for PrincipalId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PrincipalKind {
    User,
    Group,
    App,
}

impl PrincipalKind {
    pub fn name(self) -> &'static str {
        match self {
            PrincipalKind::User => "user",
            PrincipalKind::Group => "group",
            PrincipalKind::App => "app",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [PrincipalKind::User, PrincipalKind::Group, PrincipalKind::App].into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for PrincipalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Principal {
    pub id: PrincipalId,
    pub kind: PrincipalKind,
    pub name: String,
    /// Set for groups only.
    pub owner: Option<PrincipalId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PrincipalError {
    #[error("{kind} name {name:?} is already registered")]
    DuplicateName { kind: PrincipalKind, name: String },
    #[error("invalid group owner")]
    InvalidOwner,
    #[error("principal not found")]
    NotFound,
    #[error("principal {0} is not a group")]
    NotAGroup(PrincipalId),
    #[error("principal {0} cannot be a group member")]
    InvalidMember(PrincipalId),
    #[error("request {0:?} is not pending")]
    NotPending(RequestId),
    #[error("decision not issued by the group owner")]
    NotOwner,
    #[error("certificate signature does not verify")]
    InvalidSignature,
}

impl PrincipalError {
    pub fn kind(&self) -> &'static str {
        match self {
            PrincipalError::DuplicateName { .. } => "DuplicateName",
            PrincipalError::InvalidOwner => "InvalidOwner",
            PrincipalError::NotFound => "NotFound",
            PrincipalError::NotAGroup(_) => "NotAGroup",
            PrincipalError::InvalidMember(_) => "InvalidMember",
            PrincipalError::NotPending(_) => "NotPending",
            PrincipalError::NotOwner => "NotOwner",
            PrincipalError::InvalidSignature => "InvalidSignature",
        }
    }
}

/// Read access to principal kinds and group membership.
///
/// Implemented by the live [`UserService`] and by a point-in-time
/// [`DirectorySnapshot`].
pub trait Directory {
    fn kind_of(&self, id: PrincipalId) -> Option<PrincipalKind>;

    /// Transitive user members of a group; `None` if `id` is not a group.
    fn group_members(&self, id: PrincipalId) -> Option<BTreeSet<PrincipalId>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RequestId(u64);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PendingRequest {
    pub id: RequestId,
    pub group: PrincipalId,
    pub member: PrincipalId,
    pub proposer_app: PrincipalId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Approve,
    Deny,
}

pub const USER_CERT_PAYLOAD_LEN: usize = 24;
pub const USER_CERT_LEN: usize = USER_CERT_PAYLOAD_LEN + DIGEST_LEN;
pub const APP_CERT_LEN: usize = 8 + DIGEST_LEN;

/// Binds a logged-in user to the device that authenticated them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserCertificate {
    pub user: PrincipalId,
    pub device: NodeId,
    pub issued_at: u64,
    pub signature: [u8; DIGEST_LEN],
}

impl UserCertificate {
    /// Canonical signed payload: user ‖ device ‖ issued_at, big-endian u64s.
    pub fn payload(&self) -> [u8; USER_CERT_PAYLOAD_LEN] {
        user_cert_payload(self.user.get(), self.device.0, self.issued_at)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.payload().to_vec();
        out.extend_from_slice(&self.signature);
        out
    }

    /// Parses the payload ‖ signature form. A zero user id is rejected.
    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        if bytes.len() != USER_CERT_LEN {
            return None;
        }
        let user = PrincipalId::new(u64::from_be_bytes(bytes[0..8].try_into().ok()?))?;
        let device = NodeId(u64::from_be_bytes(bytes[8..16].try_into().ok()?));
        let issued_at = u64::from_be_bytes(bytes[16..24].try_into().ok()?);
        let signature = bytes[24..].try_into().ok()?;
        Some(UserCertificate { user, device, issued_at, signature })
    }
}

fn user_cert_payload(user: u64, device: u64, issued_at: u64) -> [u8; USER_CERT_PAYLOAD_LEN] {
    let mut out = [0u8; USER_CERT_PAYLOAD_LEN];
    out[0..8].copy_from_slice(&user.to_be_bytes());
    out[8..16].copy_from_slice(&device.to_be_bytes());
    out[16..24].copy_from_slice(&issued_at.to_be_bytes());
    out
}

/// Vouches for an application identity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AppCertificate {
    pub app: PrincipalId,
    pub signature: [u8; DIGEST_LEN],
}

impl AppCertificate {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.app.get().to_be_bytes().to_vec();
        out.extend_from_slice(&self.signature);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        if bytes.len() != APP_CERT_LEN {
            return None;
        }
        let app = PrincipalId::new(u64::from_be_bytes(bytes[0..8].try_into().ok()?))?;
        let signature = bytes[8..].try_into().ok()?;
        Some(AppCertificate { app, signature })
    }
}

/// Verification-only handle on the user service signing key.
#[derive(Clone, Debug)]
pub struct CertVerifier {
    key: Arc<SecretKey>,
}

impl CertVerifier {
    pub fn verify_user(&self, cert: &UserCertificate) -> Result<PrincipalId, PrincipalError> {
        if self.key.verify(&[&cert.payload()], &cert.signature) {
            Ok(cert.user)
        } else {
            Err(PrincipalError::InvalidSignature)
        }
    }

    pub fn verify_app(&self, cert: &AppCertificate) -> Result<PrincipalId, PrincipalError> {
        if self.key.verify(&[&cert.app.get().to_be_bytes()], &cert.signature) {
            Ok(cert.app)
        } else {
            Err(PrincipalError::InvalidSignature)
        }
    }
}

#[derive(Debug)]
pub struct UserService {
    principals: Vec<Principal>,
    names: HashMap<(PrincipalKind, String), PrincipalId>,
    // direct members (users or nested groups) per group
    members: BTreeMap<PrincipalId, BTreeSet<PrincipalId>>,
    pending: BTreeMap<RequestId, PendingRequest>,
    next_request: u64,
    clock: u64,
    key: Arc<SecretKey>,
}

impl UserService {
    pub fn new<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        UserService {
            principals: Vec::new(),
            names: HashMap::new(),
            members: BTreeMap::new(),
            pending: BTreeMap::new(),
            next_request: 1,
            clock: 0,
            key: Arc::new(SecretKey::generate(rng)),
        }
    }

    pub fn register_principal(
        &mut self,
        kind: PrincipalKind,
        name: &str,
        owner: Option<PrincipalId>,
    ) -> Result<PrincipalId, PrincipalError> {
        if self.names.contains_key(&(kind, name.to_owned())) {
            return Err(PrincipalError::DuplicateName { kind, name: name.to_owned() });
        }
        match (kind, owner) {
            (PrincipalKind::Group, Some(owner)) => {
                if self.kind_of(owner) != Some(PrincipalKind::User) {
                    return Err(PrincipalError::InvalidOwner);
                }
            }
            (PrincipalKind::Group, None) | (_, Some(_)) => return Err(PrincipalError::InvalidOwner),
            (_, None) => {}
        }
        let id = PrincipalId(self.principals.len() as u64 + 1);
        self.principals.push(Principal { id, kind, name: name.to_owned(), owner });
        self.names.insert((kind, name.to_owned()), id);
        if kind == PrincipalKind::Group {
            self.members.insert(id, BTreeSet::new());
        }
        Ok(id)
    }

    /// Exact, case-sensitive lookup.
    pub fn resolve_name(&self, kind: PrincipalKind, name: &str) -> Result<PrincipalId, PrincipalError> {
        self.names
            .get(&(kind, name.to_owned()))
            .copied()
            .ok_or(PrincipalError::NotFound)
    }

    pub fn principal(&self, id: PrincipalId) -> Option<&Principal> {
        self.principals.get((id.0 - 1) as usize)
    }

    pub fn principals(&self) -> impl Iterator<Item = &Principal> {
        self.principals.iter()
    }

    /// Queues a membership request for the group owner. A request identical
    /// to one already pending returns the existing entry.
    pub fn propose_group_add(
        &mut self,
        group: PrincipalId,
        member: PrincipalId,
        proposer_app: PrincipalId,
    ) -> Result<PendingRequest, PrincipalError> {
        match self.kind_of(group) {
            None => return Err(PrincipalError::NotFound),
            Some(PrincipalKind::Group) => {}
            Some(_) => return Err(PrincipalError::NotAGroup(group)),
        }
        match self.kind_of(member) {
            None => return Err(PrincipalError::NotFound),
            Some(PrincipalKind::App) => return Err(PrincipalError::InvalidMember(member)),
            Some(_) if member == group => return Err(PrincipalError::InvalidMember(member)),
            Some(_) => {}
        }
        if self.kind_of(proposer_app) != Some(PrincipalKind::App) {
            return Err(PrincipalError::NotFound);
        }
        if let Some(existing) = self
            .pending
            .values()
            .find(|r| r.group == group && r.member == member)
        {
            return Ok(existing.clone());
        }
        let request = PendingRequest {
            id: RequestId(self.next_request),
            group,
            member,
            proposer_app,
        };
        self.next_request += 1;
        self.pending.insert(request.id, request.clone());
        Ok(request)
    }

    /// Requests awaiting a decision from `owner`'s device.
    pub fn pending_for(&self, owner: PrincipalId) -> Vec<PendingRequest> {
        self.pending
            .values()
            .filter(|r| self.principal(r.group).and_then(|g| g.owner) == Some(owner))
            .cloned()
            .collect()
    }

    pub fn resolve_group_request(
        &mut self,
        request: RequestId,
        decision: Decision,
        approver: &UserCertificate,
    ) -> Result<(), PrincipalError> {
        let pending = self
            .pending
            .get(&request)
            .ok_or(PrincipalError::NotPending(request))?;
        let user = self.verify_certificate(approver)?;
        let owner = self.principal(pending.group).and_then(|g| g.owner);
        if owner != Some(user) {
            return Err(PrincipalError::NotOwner);
        }
        let pending = self.pending.remove(&request).expect("checked above");
        if decision == Decision::Approve {
            self.members.entry(pending.group).or_default().insert(pending.member);
        }
        Ok(())
    }

    /// Transitive user members of `group`. Cycles contribute only the users
    /// found along them.
    pub fn expand_group(&self, group: PrincipalId) -> Result<BTreeSet<PrincipalId>, PrincipalError> {
        match self.kind_of(group) {
            None => return Err(PrincipalError::NotFound),
            Some(PrincipalKind::Group) => {}
            Some(_) => return Err(PrincipalError::NotAGroup(group)),
        }
        let mut users = BTreeSet::new();
        let mut seen = BTreeSet::from([group]);
        let mut stack = vec![group];
        while let Some(g) = stack.pop() {
            for &m in self.members.get(&g).into_iter().flatten() {
                match self.kind_of(m) {
                    Some(PrincipalKind::User) => {
                        users.insert(m);
                    }
                    Some(PrincipalKind::Group) if seen.insert(m) => stack.push(m),
                    _ => {}
                }
            }
        }
        Ok(users)
    }

    pub fn authenticate_user(
        &mut self,
        user: PrincipalId,
        device: NodeId,
    ) -> Result<UserCertificate, PrincipalError> {
        if self.kind_of(user) != Some(PrincipalKind::User) {
            return Err(PrincipalError::NotFound);
        }
        self.clock += 1;
        let payload = user_cert_payload(user.get(), device.0, self.clock);
        Ok(UserCertificate {
            user,
            device,
            issued_at: self.clock,
            signature: self.key.sign(&[&payload]),
        })
    }

    pub fn issue_app_certificate(&self, app: PrincipalId) -> Result<AppCertificate, PrincipalError> {
        if self.kind_of(app) != Some(PrincipalKind::App) {
            return Err(PrincipalError::NotFound);
        }
        Ok(AppCertificate {
            app,
            signature: self.key.sign(&[&app.get().to_be_bytes()]),
        })
    }

    pub fn verify_certificate(&self, cert: &UserCertificate) -> Result<PrincipalId, PrincipalError> {
        self.verifier().verify_user(cert)
    }

    pub fn verify_app_certificate(&self, cert: &AppCertificate) -> Result<PrincipalId, PrincipalError> {
        self.verifier().verify_app(cert)
    }

    pub fn verifier(&self) -> CertVerifier {
        CertVerifier { key: Arc::clone(&self.key) }
    }

    /// Point-in-time copy of kinds and direct memberships.
    pub fn snapshot(&self) -> DirectorySnapshot {
        DirectorySnapshot {
            kinds: self.principals.iter().map(|p| (p.id, p.kind)).collect(),
            members: self.members.clone(),
        }
    }
}

impl Directory for UserService {
    fn kind_of(&self, id: PrincipalId) -> Option<PrincipalKind> {
        self.principal(id).map(|p| p.kind)
    }

    fn group_members(&self, id: PrincipalId) -> Option<BTreeSet<PrincipalId>> {
        self.expand_group(id).ok()
    }
}

/// Frozen principal kinds and direct group memberships.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DirectorySnapshot {
    pub kinds: BTreeMap<PrincipalId, PrincipalKind>,
    pub members: BTreeMap<PrincipalId, BTreeSet<PrincipalId>>,
}

impl Directory for DirectorySnapshot {
    fn kind_of(&self, id: PrincipalId) -> Option<PrincipalKind> {
        self.kinds.get(&id).copied()
    }

    fn group_members(&self, id: PrincipalId) -> Option<BTreeSet<PrincipalId>> {
        if self.kind_of(id) != Some(PrincipalKind::Group) {
            return None;
        }
        // fixed-point closure, kept separate from UserService::expand_group
        let mut reach: BTreeSet<PrincipalId> = BTreeSet::from([id]);
        loop {
            let next: BTreeSet<PrincipalId> = reach
                .iter()
                .filter_map(|g| self.members.get(g))
                .flatten()
                .copied()
                .chain(reach.iter().copied())
                .collect();
            if next.len() == reach.len() {
                break;
            }
            reach = next;
        }
        Some(
            reach
                .into_iter()
                .filter(|m| self.kind_of(*m) == Some(PrincipalKind::User))
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn service() -> UserService {
        UserService::new(&mut ChaCha8Rng::seed_from_u64(7))
    }

    #[test]
    fn first_registration_gets_id_one() {
        let mut us = service();
        let alice = us.register_principal(PrincipalKind::User, "Alice", None).unwrap();
        assert_eq!(alice.get(), 1);
        let fit = us.register_principal(PrincipalKind::App, "FitApp", None).unwrap();
        assert_ne!(fit, alice);
        assert_eq!(us.resolve_name(PrincipalKind::User, "Alice"), Ok(alice));
    }

    #[test]
    fn duplicate_and_owner_checks() {
        let mut us = service();
        let alice = us.register_principal(PrincipalKind::User, "Alice", None).unwrap();
        assert!(matches!(
            us.register_principal(PrincipalKind::User, "Alice", None),
            Err(PrincipalError::DuplicateName { .. })
        ));
        // same name under a different kind is fine
        us.register_principal(PrincipalKind::App, "Alice", None).unwrap();
        assert_eq!(
            us.register_principal(PrincipalKind::Group, "Running-Group", PrincipalId::new(99)),
            Err(PrincipalError::InvalidOwner)
        );
        assert_eq!(
            us.register_principal(PrincipalKind::Group, "NoOwner", None),
            Err(PrincipalError::InvalidOwner)
        );
        assert_eq!(
            us.register_principal(PrincipalKind::User, "Owned", Some(alice)),
            Err(PrincipalError::InvalidOwner)
        );
    }

    #[test]
    fn names_are_case_sensitive() {
        let mut us = service();
        us.register_principal(PrincipalKind::User, "Alice", None).unwrap();
        assert_eq!(us.resolve_name(PrincipalKind::User, "alice"), Err(PrincipalError::NotFound));
        assert_eq!(us.resolve_name(PrincipalKind::User, "Carol"), Err(PrincipalError::NotFound));
    }

    struct Eco {
        us: UserService,
        alice: PrincipalId,
        betty: PrincipalId,
        bob: PrincipalId,
        fit: PrincipalId,
        group: PrincipalId,
    }

    fn eco() -> Eco {
        let mut us = service();
        let alice = us.register_principal(PrincipalKind::User, "Alice", None).unwrap();
        let betty = us.register_principal(PrincipalKind::User, "Betty", None).unwrap();
        let bob = us.register_principal(PrincipalKind::User, "Bob", None).unwrap();
        let fit = us.register_principal(PrincipalKind::App, "FitApp", None).unwrap();
        let group = us
            .register_principal(PrincipalKind::Group, "Running-Group", Some(alice))
            .unwrap();
        Eco { us, alice, betty, bob, fit, group }
    }

    #[test]
    fn group_add_needs_owner_approval() {
        let Eco { mut us, alice, betty, bob, fit, group } = eco();
        let req = us.propose_group_add(group, betty, fit).unwrap();
        assert!(us.expand_group(group).unwrap().is_empty());
        assert_eq!(us.pending_for(alice), vec![req.clone()]);

        let again = us.propose_group_add(group, betty, fit).unwrap();
        assert_eq!(again.id, req.id);
        assert_eq!(us.pending_for(alice).len(), 1);

        let bob_cert = us.authenticate_user(bob, NodeId(3)).unwrap();
        assert_eq!(
            us.resolve_group_request(req.id, Decision::Approve, &bob_cert),
            Err(PrincipalError::NotOwner)
        );
        let alice_cert = us.authenticate_user(alice, NodeId(1)).unwrap();
        us.resolve_group_request(req.id, Decision::Approve, &alice_cert).unwrap();
        assert_eq!(us.expand_group(group).unwrap(), BTreeSet::from([betty]));
        assert_eq!(
            us.resolve_group_request(req.id, Decision::Approve, &alice_cert),
            Err(PrincipalError::NotPending(req.id))
        );
    }

    #[test]
    fn deny_leaves_membership_unchanged() {
        let Eco { mut us, alice, betty, fit, group, .. } = eco();
        let req = us.propose_group_add(group, betty, fit).unwrap();
        let cert = us.authenticate_user(alice, NodeId(1)).unwrap();
        us.resolve_group_request(req.id, Decision::Deny, &cert).unwrap();
        assert!(us.expand_group(group).unwrap().is_empty());
        assert!(us.pending_for(alice).is_empty());
    }

    #[test]
    fn proposal_on_user_is_not_a_group() {
        let Eco { mut us, alice, betty, fit, .. } = eco();
        assert_eq!(
            us.propose_group_add(alice, betty, fit),
            Err(PrincipalError::NotAGroup(alice))
        );
        assert_eq!(
            us.propose_group_add(PrincipalId::new(500).unwrap(), betty, fit),
            Err(PrincipalError::NotFound)
        );
    }

    #[test]
    fn forged_approval_is_rejected() {
        let Eco { mut us, alice, betty, fit, group, .. } = eco();
        let req = us.propose_group_add(group, betty, fit).unwrap();
        let mut cert = us.authenticate_user(alice, NodeId(1)).unwrap();
        cert.signature[0] ^= 1;
        assert_eq!(
            us.resolve_group_request(req.id, Decision::Approve, &cert),
            Err(PrincipalError::InvalidSignature)
        );
        assert!(us.expand_group(group).unwrap().is_empty());
    }

    fn approve(us: &mut UserService, owner: PrincipalId, group: PrincipalId, member: PrincipalId, app: PrincipalId) {
        let req = us.propose_group_add(group, member, app).unwrap();
        let cert = us.authenticate_user(owner, NodeId(1)).unwrap();
        us.resolve_group_request(req.id, Decision::Approve, &cert).unwrap();
    }

    #[test]
    fn nested_groups_expand_transitively_and_tolerate_cycles() {
        let Eco { mut us, alice, betty, fit, group, .. } = eco();
        let dave = us.register_principal(PrincipalKind::User, "Dave", None).unwrap();
        let g2 = us.register_principal(PrincipalKind::Group, "G2", Some(alice)).unwrap();
        approve(&mut us, alice, group, betty, fit);
        approve(&mut us, alice, group, g2, fit);
        approve(&mut us, alice, g2, dave, fit);
        assert_eq!(us.expand_group(group).unwrap(), BTreeSet::from([betty, dave]));

        approve(&mut us, alice, g2, group, fit);
        assert_eq!(us.expand_group(g2).unwrap(), BTreeSet::from([betty, dave]));
        let snap = us.snapshot();
        assert_eq!(snap.group_members(group), Some(BTreeSet::from([betty, dave])));
        assert_eq!(snap.group_members(betty), None);
    }

    #[test]
    fn certificates_round_trip_and_detect_mutation() {
        let Eco { mut us, alice, group, .. } = eco();
        let c1 = us.authenticate_user(alice, NodeId(10)).unwrap();
        let c2 = us.authenticate_user(alice, NodeId(11)).unwrap();
        assert_ne!(c1, c2);
        assert_eq!(us.verify_certificate(&c1), Ok(alice));
        assert_eq!(us.verify_certificate(&c2), Ok(alice));
        assert_eq!(us.authenticate_user(group, NodeId(1)), Err(PrincipalError::NotFound));

        let bytes = c1.to_bytes();
        assert_eq!(UserCertificate::from_bytes(&bytes), Some(c1.clone()));
        for i in 0..bytes.len() {
            let mut m = bytes.clone();
            m[i] ^= 0x40;
            match UserCertificate::from_bytes(&m) {
                None => {}
                Some(cert) => assert_eq!(us.verify_certificate(&cert), Err(PrincipalError::InvalidSignature)),
            }
        }
    }

    #[test]
    fn altered_user_field_fails_verification() {
        let Eco { mut us, alice, betty, .. } = eco();
        let mut cert = us.authenticate_user(alice, NodeId(10)).unwrap();
        cert.user = betty;
        assert_eq!(us.verify_certificate(&cert), Err(PrincipalError::InvalidSignature));
    }

    #[test]
    fn app_certificates_verify() {
        let Eco { us, fit, alice, .. } = eco();
        let cert = us.issue_app_certificate(fit).unwrap();
        assert_eq!(us.verify_app_certificate(&cert), Ok(fit));
        assert_eq!(AppCertificate::from_bytes(&cert.to_bytes()), Some(cert.clone()));
        assert_eq!(us.issue_app_certificate(alice), Err(PrincipalError::NotFound));
        let mut forged = cert;
        forged.app = alice;
        assert_eq!(us.verify_app_certificate(&forged), Err(PrincipalError::InvalidSignature));
    }
}
