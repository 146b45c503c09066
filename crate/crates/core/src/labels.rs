//! Data labels, process labels and the flow rules between them.
//!
//! A data label `{o1, o2 -> a1, u1, g1}` records the users who own a piece of
//! data and the principals allowed to receive it. Combining labeled data
//! merges the labels: owners are unioned and reader ids intersected. Data
//! may move to a process only if every principal of the process label is in
//! the expanded reader set.
//!
//! Reader intersection works on ids, not on expanded group membership, so a
//! merge never depends on who is in a group at the time.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use thiserror::Error;

use crate::principals::{Directory, PrincipalId, PrincipalKind};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LabelError {
    #[error("unknown principal {0}")]
    UnknownPrincipal(PrincipalId),
    #[error("the public label has no policy form")]
    PublicLabel,
    #[error("malformed policy encoding: {0}")]
    Malformed(&'static str),
}

/// A user-set flow policy: `resource = <app, {readers}>`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SafePolicy {
    pub resource: String,
    pub app: PrincipalId,
    readers: Vec<PrincipalId>,
}

impl SafePolicy {
    pub fn new(
        resource: impl Into<String>,
        app: PrincipalId,
        readers: impl IntoIterator<Item = PrincipalId>,
    ) -> Self {
        let readers: BTreeSet<_> = readers.into_iter().collect();
        SafePolicy {
            resource: resource.into(),
            app,
            readers: readers.into_iter().collect(),
        }
    }

    /// Ascending by id.
    pub fn readers(&self) -> &[PrincipalId] {
        &self.readers
    }
}

impl fmt::Display for SafePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} = <{}, {{", self.resource, self.app)?;
        for (i, r) in self.readers.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{r}")?;
        }
        f.write_str("}>")
    }
}

/// A data label. The label with no owners is `PUBLIC`.
///
/// `origins` names the OS-protected resources the data was read from on the
/// local device. It is device-local bookkeeping for restricted views: it
/// plays no part in flow decisions and is not carried in the policy wire
/// form.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct DataLabel {
    owners: BTreeSet<PrincipalId>,
    readers: BTreeSet<PrincipalId>,
    origins: BTreeSet<String>,
}

impl DataLabel {
    pub const PUBLIC: DataLabel = DataLabel {
        owners: BTreeSet::new(),
        readers: BTreeSet::new(),
        origins: BTreeSet::new(),
    };

    /// `None` when `owners` is empty; use [`DataLabel::PUBLIC`] for that.
    pub fn new(
        owners: impl IntoIterator<Item = PrincipalId>,
        readers: impl IntoIterator<Item = PrincipalId>,
    ) -> Option<Self> {
        let owners: BTreeSet<_> = owners.into_iter().collect();
        if owners.is_empty() {
            return None;
        }
        Some(DataLabel {
            owners,
            readers: readers.into_iter().collect(),
            origins: BTreeSet::new(),
        })
    }

    pub fn is_public(&self) -> bool {
        self.owners.is_empty()
    }

    pub fn owners(&self) -> &BTreeSet<PrincipalId> {
        &self.owners
    }

    /// Reader ids as written, groups unexpanded.
    pub fn reader_ids(&self) -> &BTreeSet<PrincipalId> {
        &self.readers
    }

    pub fn origins(&self) -> &BTreeSet<String> {
        &self.origins
    }

    pub fn with_origin(mut self, resource: impl Into<String>) -> Self {
        if !self.is_public() {
            self.origins.insert(resource.into());
        }
        self
    }

    /// Same owners and readers, provenance dropped.
    pub fn without_origins(&self) -> Self {
        DataLabel {
            owners: self.owners.clone(),
            readers: self.readers.clone(),
            origins: BTreeSet::new(),
        }
    }

    pub fn merge(&self, other: &DataLabel) -> DataLabel {
        if self.is_public() {
            return other.clone();
        }
        if other.is_public() {
            return self.clone();
        }
        DataLabel {
            owners: self.owners.union(&other.owners).copied().collect(),
            readers: self.readers.intersection(&other.readers).copied().collect(),
            origins: self.origins.union(&other.origins).cloned().collect(),
        }
    }

    /// True when `self` is at least as restrictive as `other`, i.e. merging
    /// `other` into `self` would not change its owners or readers.
    pub fn covers(&self, other: &DataLabel) -> bool {
        if other.is_public() {
            return true;
        }
        !self.is_public() && self.owners.is_superset(&other.owners) && self.readers.is_subset(&other.readers)
    }
}

impl fmt::Display for DataLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_public() {
            return f.write_str("PUBLIC");
        }
        let join = |set: &BTreeSet<PrincipalId>| {
            set.iter().map(|p| p.get().to_string()).collect::<Vec<_>>().join(",")
        };
        write!(f, "{{{} -> {}}}", join(&self.owners), join(&self.readers))
    }
}

/// Maps a user's policy to the label attached to data read under it. The
/// owner is always a reader of their own data.
pub fn label_from_policy(policy: &SafePolicy, owner: PrincipalId) -> DataLabel {
    let readers = policy
        .readers
        .iter()
        .copied()
        .chain([policy.app, owner]);
    DataLabel::new([owner], readers).expect("one owner")
}

/// The principals of a running process: its application and, on a device,
/// the logged-in user.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ProcessLabel {
    pub app: PrincipalId,
    pub user: Option<PrincipalId>,
}

impl ProcessLabel {
    pub fn cloud(app: PrincipalId) -> Self {
        ProcessLabel { app, user: None }
    }

    pub fn device(app: PrincipalId, user: PrincipalId) -> Self {
        ProcessLabel { app, user: Some(user) }
    }

    pub fn principals(&self) -> impl Iterator<Item = PrincipalId> {
        std::iter::once(self.app).chain(self.user)
    }
}

impl fmt::Display for ProcessLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.user {
            Some(u) => write!(f, "{{{}, {}}}", self.app, u),
            None => write!(f, "{{{}}}", self.app),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Readers {
    Universal,
    Set(BTreeSet<PrincipalId>),
}

impl Readers {
    pub fn contains(&self, id: PrincipalId) -> bool {
        match self {
            Readers::Universal => true,
            Readers::Set(set) => set.contains(&id),
        }
    }
}

/// Expands group readers into their current user members.
pub fn readers(label: &DataLabel, dir: &dyn Directory) -> Result<Readers, LabelError> {
    if label.is_public() {
        return Ok(Readers::Universal);
    }
    let mut out = BTreeSet::new();
    for &id in &label.readers {
        match dir.kind_of(id) {
            None => return Err(LabelError::UnknownPrincipal(id)),
            Some(PrincipalKind::Group) => {
                out.extend(dir.group_members(id).ok_or(LabelError::UnknownPrincipal(id))?);
            }
            Some(_) => {
                out.insert(id);
            }
        }
    }
    Ok(Readers::Set(out))
}

/// The inter-process rule: data labeled `data` may reach `process` only if
/// every principal of the process label is a reader.
pub fn flow_permitted(
    data: &DataLabel,
    process: &ProcessLabel,
    dir: &dyn Directory,
) -> Result<bool, LabelError> {
    if data.is_public() {
        return Ok(true);
    }
    let readers = readers(data, dir)?;
    Ok(process.principals().all(|p| readers.contains(p)))
}

/// Canonical wire form: `count_owners u32 ‖ owners u64… ‖ count_readers u32 ‖
/// readers u64…`, big-endian, ids ascending.
pub fn policy_from_label(label: &DataLabel) -> Result<Vec<u8>, LabelError> {
    if label.is_public() {
        return Err(LabelError::PublicLabel);
    }
    Ok(encode_sets(label))
}

fn encode_sets(label: &DataLabel) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * (label.owners.len() + label.readers.len()));
    for set in [&label.owners, &label.readers] {
        out.extend_from_slice(&(set.len() as u32).to_be_bytes());
        for id in set {
            out.extend_from_slice(&id.get().to_be_bytes());
        }
    }
    out
}

/// Inverse of [`policy_from_label`]. Only the canonical encoding is
/// accepted: ids strictly ascending, nonzero, at least one owner, no
/// trailing bytes.
pub fn label_from_wire(bytes: &[u8]) -> Result<DataLabel, LabelError> {
    let (label, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(LabelError::Malformed("trailing bytes"));
    }
    if label.is_public() {
        return Err(LabelError::Malformed("no owners"));
    }
    Ok(label)
}

/// Encoding used inside frames, where unlabeled data is allowed: PUBLIC is
/// two zero counts.
pub fn encode_frame_label(label: &DataLabel) -> Vec<u8> {
    encode_sets(label)
}

/// Parses a frame label from the front of `bytes`, returning it and the
/// number of bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(DataLabel, usize), LabelError> {
    let mut pos = 0;
    let owners = read_set(bytes, &mut pos)?;
    let readers = read_set(bytes, &mut pos)?;
    if owners.is_empty() && !readers.is_empty() {
        return Err(LabelError::Malformed("readers without owners"));
    }
    Ok((
        DataLabel { owners, readers, origins: BTreeSet::new() },
        pos,
    ))
}

fn read_set(bytes: &[u8], pos: &mut usize) -> Result<BTreeSet<PrincipalId>, LabelError> {
    let count_bytes = bytes
        .get(*pos..*pos + 4)
        .ok_or(LabelError::Malformed("truncated count"))?;
    let count = u32::from_be_bytes(count_bytes.try_into().expect("4 bytes")) as usize;
    *pos += 4;
    let end = count
        .checked_mul(8)
        .and_then(|n| n.checked_add(*pos))
        .filter(|&end| end <= bytes.len())
        .ok_or(LabelError::Malformed("truncated id list"))?;
    let mut set = BTreeSet::new();
    let mut prev = 0u64;
    for chunk in bytes[*pos..end].chunks_exact(8) {
        let raw = u64::from_be_bytes(chunk.try_into().expect("8 bytes"));
        if raw <= prev {
            return Err(LabelError::Malformed("ids not strictly ascending"));
        }
        prev = raw;
        set.insert(PrincipalId::new(raw).expect("nonzero"));
    }
    *pos = end;
    Ok(set)
}

/// Index into a [`LabelStore`]; the tag carried by every interpreter value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LabelHandle(u32);

impl LabelHandle {
    pub const PUBLIC: LabelHandle = LabelHandle(0);

    pub fn index(self) -> u32 {
        self.0
    }
}

/// Append-only interned label table. Handle 0 is PUBLIC.
#[derive(Debug, Clone)]
pub struct LabelStore {
    labels: Vec<DataLabel>,
    index: HashMap<DataLabel, LabelHandle>,
    merges: HashMap<(LabelHandle, LabelHandle), LabelHandle>,
}

impl Default for LabelStore {
    fn default() -> Self {
        Self::new()
    }
}

impl LabelStore {
    pub fn new() -> Self {
        let mut index = HashMap::new();
        index.insert(DataLabel::PUBLIC, LabelHandle::PUBLIC);
        LabelStore {
            labels: vec![DataLabel::PUBLIC],
            index,
            merges: HashMap::new(),
        }
    }

    pub fn intern(&mut self, label: DataLabel) -> LabelHandle {
        if let Some(&h) = self.index.get(&label) {
            return h;
        }
        let h = LabelHandle(u32::try_from(self.labels.len()).expect("label table overflow"));
        self.labels.push(label.clone());
        self.index.insert(label, h);
        h
    }

    /// Panics on a handle this store never issued.
    pub fn get(&self, handle: LabelHandle) -> &DataLabel {
        &self.labels[handle.0 as usize]
    }

    pub fn try_get(&self, handle: LabelHandle) -> Option<&DataLabel> {
        self.labels.get(handle.0 as usize)
    }

    pub fn merge(&mut self, a: LabelHandle, b: LabelHandle) -> LabelHandle {
        if a == b || b == LabelHandle::PUBLIC {
            return a;
        }
        if a == LabelHandle::PUBLIC {
            return b;
        }
        let key = if a < b { (a, b) } else { (b, a) };
        if let Some(&h) = self.merges.get(&key) {
            return h;
        }
        let merged = self.get(a).merge(self.get(b));
        let h = self.intern(merged);
        self.merges.insert(key, h);
        h
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::principals::UserService;
    use crate::NodeId;
    use rand::SeedableRng;

    fn id(n: u64) -> PrincipalId {
        PrincipalId::new(n).unwrap()
    }

    struct Eco {
        us: UserService,
        alice: PrincipalId,
        betty: PrincipalId,
        bob: PrincipalId,
        carol: PrincipalId,
        dave: PrincipalId,
        fit: PrincipalId,
        other: PrincipalId,
    }

    fn eco() -> Eco {
        let mut us = UserService::new(&mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
        let alice = us.register_principal(PrincipalKind::User, "Alice", None).unwrap();
        let betty = us.register_principal(PrincipalKind::User, "Betty", None).unwrap();
        let bob = us.register_principal(PrincipalKind::User, "Bob", None).unwrap();
        let carol = us.register_principal(PrincipalKind::User, "Carol", None).unwrap();
        let dave = us.register_principal(PrincipalKind::User, "Dave", None).unwrap();
        let fit = us.register_principal(PrincipalKind::App, "FitApp", None).unwrap();
        let other = us.register_principal(PrincipalKind::App, "OtherApp", None).unwrap();
        Eco { us, alice, betty, bob, carol, dave, fit, other }
    }

    #[test]
    fn policy_maps_to_label_with_owner_and_app() {
        let e = eco();
        let gps = SafePolicy::new("GPS", e.fit, [e.betty]);
        let label = label_from_policy(&gps, e.alice);
        assert_eq!(label.owners(), &BTreeSet::from([e.alice]));
        assert_eq!(label.reader_ids(), &BTreeSet::from([e.fit, e.alice, e.betty]));

        let empty = SafePolicy::new("GPS", e.fit, []);
        assert_eq!(
            label_from_policy(&empty, e.alice).reader_ids(),
            &BTreeSet::from([e.fit, e.alice])
        );
    }

    #[test]
    fn group_readers_stay_unexpanded_in_label_and_expand_in_readers() {
        let mut e = eco();
        let g1 = e
            .us
            .register_principal(PrincipalKind::Group, "g1", Some(e.alice))
            .unwrap();
        for m in [e.betty, e.dave] {
            let req = e.us.propose_group_add(g1, m, e.fit).unwrap();
            let cert = e.us.authenticate_user(e.alice, NodeId(1)).unwrap();
            e.us
                .resolve_group_request(req.id, crate::principals::Decision::Approve, &cert)
                .unwrap();
        }
        let label = label_from_policy(&SafePolicy::new("GPS", e.fit, [g1]), e.alice);
        assert!(label.reader_ids().contains(&g1));
        assert_eq!(
            readers(&label, &e.us).unwrap(),
            Readers::Set(BTreeSet::from([e.fit, e.alice, e.betty, e.dave]))
        );
    }

    #[test]
    fn readers_of_public_is_universal() {
        let e = eco();
        assert_eq!(readers(&DataLabel::PUBLIC, &e.us).unwrap(), Readers::Universal);
    }

    #[test]
    fn readers_rejects_unknown_ids() {
        let e = eco();
        let label = DataLabel::new([e.alice], [id(999)]).unwrap();
        assert_eq!(readers(&label, &e.us), Err(LabelError::UnknownPrincipal(id(999))));
    }

    #[test]
    fn merge_examples() {
        let e = eco();
        let l1 = DataLabel::new([e.alice], [e.fit, e.alice, e.betty]).unwrap();
        let l2 = DataLabel::new([e.carol], [e.fit, e.betty, e.carol]).unwrap();
        assert_eq!(l1.merge(&DataLabel::PUBLIC), l1);
        assert_eq!(DataLabel::PUBLIC.merge(&l1), l1);
        assert_eq!(l1.merge(&l1), l1);
        assert_eq!(
            l1.merge(&l2),
            DataLabel::new([e.alice, e.carol], [e.fit, e.betty]).unwrap()
        );
    }

    #[test]
    fn empty_intersection_is_a_legal_label_that_releases_nowhere() {
        let e = eco();
        let l1 = DataLabel::new([e.alice], [e.alice]).unwrap();
        let l2 = DataLabel::new([e.bob], [e.bob]).unwrap();
        let m = l1.merge(&l2);
        assert!(!m.is_public());
        assert!(m.reader_ids().is_empty());
        assert!(!flow_permitted(&m, &ProcessLabel::device(e.fit, e.alice), &e.us).unwrap());
    }

    #[test]
    fn flow_examples_from_the_sharing_story() {
        let e = eco();
        let photo = DataLabel::new([e.alice], [e.fit, e.alice, e.betty]).unwrap();
        assert!(flow_permitted(&photo, &ProcessLabel::device(e.fit, e.betty), &e.us).unwrap());
        assert!(!flow_permitted(&photo, &ProcessLabel::device(e.fit, e.bob), &e.us).unwrap());
        assert!(!flow_permitted(&photo, &ProcessLabel::device(e.other, e.betty), &e.us).unwrap());
        assert!(flow_permitted(&photo, &ProcessLabel::cloud(e.fit), &e.us).unwrap());
        assert!(flow_permitted(&DataLabel::PUBLIC, &ProcessLabel::cloud(e.other), &e.us).unwrap());
    }

    #[test]
    fn wire_form_is_canonical() {
        let e = eco();
        let a = DataLabel::new([e.carol, e.alice], [e.betty, e.fit]).unwrap();
        let b = DataLabel::new([e.alice, e.carol, e.alice], [e.fit, e.betty]).unwrap();
        let wa = policy_from_label(&a).unwrap();
        assert_eq!(wa, policy_from_label(&b).unwrap());
        assert_eq!(label_from_wire(&wa).unwrap(), a);
        // alice=1 carol=4 ; fit=6 betty=2
        assert_eq!(
            hex::encode(&wa),
            "00000002\
             0000000000000001\
             0000000000000004\
             00000002\
             0000000000000002\
             0000000000000006"
        );
        assert_eq!(policy_from_label(&DataLabel::PUBLIC), Err(LabelError::PublicLabel));
    }

    #[test]
    fn non_canonical_wire_forms_are_rejected() {
        let reject = |hexstr: &str| label_from_wire(&hex::decode(hexstr).unwrap()).is_err();
        // unsorted owners
        assert!(reject("00000002000000000000000400000000000000010000000000000000"));
        // duplicate reader
        assert!(reject("0000000100000000000000010000000200000000000000030000000000000003"));
        // zero owners
        assert!(reject("0000000000000000"));
        // zero id
        assert!(reject("00000001000000000000000000000000"));
        // trailing byte
        assert!(reject("00000001000000000000000100000000ff"));
        // count larger than buffer
        assert!(reject("ffffffff"));
    }

    #[test]
    fn origins_are_provenance_only() {
        let e = eco();
        let l = label_from_policy(&SafePolicy::new("GPS", e.fit, [e.betty]), e.alice).with_origin("GPS");
        assert!(l.origins().contains("GPS"));
        let wire = policy_from_label(&l).unwrap();
        assert_eq!(label_from_wire(&wire).unwrap(), l.without_origins());
        assert!(DataLabel::PUBLIC.with_origin("GPS").is_public());
    }

    #[test]
    fn store_interns_and_merges() {
        let e = eco();
        let mut store = LabelStore::new();
        assert_eq!(store.get(LabelHandle::PUBLIC), &DataLabel::PUBLIC);
        let l1 = store.intern(DataLabel::new([e.alice], [e.fit, e.alice, e.betty]).unwrap());
        let l1b = store.intern(DataLabel::new([e.alice], [e.betty, e.alice, e.fit]).unwrap());
        assert_eq!(l1, l1b);
        let l2 = store.intern(DataLabel::new([e.carol], [e.fit, e.betty]).unwrap());
        let m = store.merge(l1, l2);
        assert_eq!(store.merge(l2, l1), m);
        assert_eq!(store.merge(l1, LabelHandle::PUBLIC), l1);
        assert_eq!(store.get(m), &store.get(l1).merge(store.get(l2)));
    }

    #[test]
    fn covers_matches_merge_fixpoint() {
        let e = eco();
        let l1 = DataLabel::new([e.alice], [e.fit, e.alice, e.betty]).unwrap();
        let l2 = DataLabel::new([e.carol], [e.fit, e.betty, e.carol]).unwrap();
        let m = l1.merge(&l2);
        assert!(m.covers(&l1) && m.covers(&l2) && m.covers(&DataLabel::PUBLIC));
        assert!(!l1.covers(&l2));
        assert!(!DataLabel::PUBLIC.covers(&l1));
    }
}
