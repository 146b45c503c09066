//! Storage proxy that makes an untrusted key-value store safe to hold
//! labeled data.
//!
//! Every object is encrypted under a proxy key with a fresh IV and stored
//! with its policy in the clear header. An encrypted integrity table holds
//! one HMAC per object; its version must equal a hardware monotonic counter
//! that the backend cannot roll back.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::crypto::{cbc_decrypt, cbc_encrypt, hmac_verify, SecretKey, AES_BLOCK, DIGEST_LEN};
use crate::labels::{decode_prefix, encode_frame_label, flow_permitted, DataLabel, ProcessLabel};
use crate::principals::{Directory, PrincipalId};

pub const MAGIC: [u8; 4] = *b"GEO1";

/// Backend key holding the integrity table. Object keys may not use it.
pub const TABLE_KEY: &str = "geode/table";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GeodeError {
    #[error("no object stored under {0}")]
    UnknownKey(String),
    #[error("integrity check failed: {0}")]
    IntegrityViolation(String),
    #[error("stale storage state: table version {table} but counter {counter}")]
    RollbackDetected { table: u64, counter: u64 },
    #[error("requester may not read this object")]
    PolicyDenied,
    #[error("requester is not a verified SAFE system")]
    UnverifiedRequester,
    #[error("{key} was created by another application")]
    NotCreatorApp { key: String },
    #[error("backend failure: {0}")]
    BackendFailure(String),
}

impl GeodeError {
    pub fn kind(&self) -> &'static str {
        match self {
            GeodeError::UnknownKey(_) => "UnknownKey",
            GeodeError::IntegrityViolation(_) => "IntegrityViolation",
            GeodeError::RollbackDetected { .. } => "RollbackDetected",
            GeodeError::PolicyDenied => "PolicyDenied",
            GeodeError::UnverifiedRequester => "UnverifiedRequester",
            GeodeError::NotCreatorApp { .. } => "NotCreatorApp",
            GeodeError::BackendFailure(_) => "BackendFailure",
        }
    }
}

/// Who is asking, as established by the network layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Requester {
    /// An attested or certified SAFE service running `app`.
    Verified { app: PrincipalId },
    /// A device whose app and user certificates checked out.
    Device(ProcessLabel),
    Unverified,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoredBlob {
    pub policy: Vec<u8>,
    pub creator_app: PrincipalId,
    pub iv: [u8; AES_BLOCK],
    pub ciphertext: Vec<u8>,
}

impl StoredBlob {
    /// `GEO1 ‖ policy_len u32 ‖ policy ‖ creator u64 ‖ iv ‖ ct_len u32 ‖ ct`
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 + self.policy.len() + 8 + 16 + 4 + self.ciphertext.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&(self.policy.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.policy);
        out.extend_from_slice(&self.creator_app.get().to_be_bytes());
        out.extend_from_slice(&self.iv);
        out.extend_from_slice(&(self.ciphertext.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        let mut r = Reader(bytes);
        if r.take(4)? != MAGIC {
            return None;
        }
        let plen = r.u32()? as usize;
        let policy = r.take(plen)?.to_vec();
        let creator_app = PrincipalId::new(r.u64()?)?;
        let iv = r.take(AES_BLOCK)?.try_into().ok()?;
        let clen = r.u32()? as usize;
        let ciphertext = r.take(clen)?.to_vec();
        r.0.is_empty().then_some(StoredBlob { policy, creator_app, iv, ciphertext })
    }
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.0.len() < n {
            return None;
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Some(head)
    }

    fn u16(&mut self) -> Option<u16> {
        Some(u16::from_be_bytes(self.take(2)?.try_into().ok()?))
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_be_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_be_bytes(self.take(8)?.try_into().ok()?))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IntegrityTable {
    pub version: u64,
    pub entries: BTreeMap<String, [u8; DIGEST_LEN]>,
}

impl IntegrityTable {
    /// `version u64 ‖ count u32 ‖ {key_len u16 ‖ key ‖ hmac}…`
    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.version.to_be_bytes().to_vec();
        out.extend_from_slice(&(self.entries.len() as u32).to_be_bytes());
        for (k, mac) in &self.entries {
            out.extend_from_slice(&(k.len() as u16).to_be_bytes());
            out.extend_from_slice(k.as_bytes());
            out.extend_from_slice(mac);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Option<Self> {
        let mut r = Reader(bytes);
        let version = r.u64()?;
        let count = r.u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let klen = r.u16()? as usize;
            let key = String::from_utf8(r.take(klen)?.to_vec()).ok()?;
            let mac = r.take(DIGEST_LEN)?.try_into().ok()?;
            entries.insert(key, mac);
        }
        r.0.is_empty().then_some(IntegrityTable { version, entries })
    }
}

/// The storage service. It is the adversary: test code may mutate it
/// freely between proxy operations.
#[derive(Clone, Debug, Default)]
pub struct UntrustedKV {
    map: BTreeMap<String, Vec<u8>>,
}

/// A full copy of backend state, for rollback attacks.
#[derive(Clone, Debug)]
pub struct Snapshot(BTreeMap<String, Vec<u8>>);

impl UntrustedKV {
    pub fn get(&self, key: &str) -> Option<&[u8]> {
        self.map.get(key).map(Vec::as_slice)
    }

    pub fn put(&mut self, key: &str, value: Vec<u8>) {
        self.map.insert(key.to_owned(), value);
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn values(&self) -> impl Iterator<Item = &[u8]> {
        self.map.values().map(Vec::as_slice)
    }

    /// XORs one byte with a nonzero mask. Returns false if out of range.
    pub fn tamper(&mut self, key: &str, index: usize, mask: u8) -> bool {
        assert_ne!(mask, 0, "mask must change the byte");
        match self.map.get_mut(key).and_then(|v| v.get_mut(index)) {
            Some(b) => {
                *b ^= mask;
                true
            }
            None => false,
        }
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot(self.map.clone())
    }

    pub fn rollback(&mut self, snapshot: &Snapshot) {
        self.map = snapshot.0.clone();
    }

    pub fn drop_key(&mut self, key: &str) -> bool {
        self.map.remove(key).is_some()
    }
}

/// Increment-only and outside the backend's reach.
#[derive(Debug, Default)]
pub struct MonotonicCounter(u64);

impl MonotonicCounter {
    pub fn value(&self) -> u64 {
        self.0
    }

    fn increment(&mut self) -> u64 {
        self.0 += 1;
        self.0
    }
}

#[derive(Debug)]
pub struct GeodeProxy {
    backend: UntrustedKV,
    counter: MonotonicCounter,
    enc_key: [u8; 16],
    mac_key: [u8; DIGEST_LEN],
    rng: ChaCha8Rng,
}

impl GeodeProxy {
    pub fn new<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let master = SecretKey::generate(rng);
        let enc_full = master.sign(&[b"enc"]);
        GeodeProxy {
            backend: UntrustedKV::default(),
            counter: MonotonicCounter::default(),
            enc_key: enc_full[..16].try_into().expect("16 of 32 bytes"),
            mac_key: master.sign(&[b"mac"]),
            rng: ChaCha8Rng::seed_from_u64(rng.next_u64()),
        }
    }

    pub fn backend(&self) -> &UntrustedKV {
        &self.backend
    }

    pub fn backend_mut(&mut self) -> &mut UntrustedKV {
        &mut self.backend
    }

    pub fn counter(&self) -> u64 {
        self.counter.value()
    }

    fn object_mac(&self, key: &str, blob: &[u8]) -> [u8; DIGEST_LEN] {
        crate::crypto::hmac_sha256(&self.mac_key, &[&(key.len() as u16).to_be_bytes(), key.as_bytes(), blob])
    }

    fn fresh_iv(&mut self) -> [u8; AES_BLOCK] {
        let mut iv = [0u8; AES_BLOCK];
        self.rng.fill_bytes(&mut iv);
        iv
    }

    // Table blob: iv ‖ ct ‖ hmac(iv ‖ ct).
    fn write_table(&mut self, table: &IntegrityTable) {
        let iv = self.fresh_iv();
        let ct = cbc_encrypt(&self.enc_key, &iv, &table.encode());
        let mut blob = iv.to_vec();
        blob.extend_from_slice(&ct);
        let tag = crate::crypto::hmac_sha256(&self.mac_key, &[b"table", &blob]);
        blob.extend_from_slice(&tag);
        self.backend.put(TABLE_KEY, blob);
    }

    fn load_table(&self) -> Result<IntegrityTable, GeodeError> {
        let counter = self.counter.value();
        let Some(blob) = self.backend.get(TABLE_KEY) else {
            if counter == 0 {
                return Ok(IntegrityTable::default());
            }
            return Err(GeodeError::RollbackDetected { table: 0, counter });
        };
        let bad = |why: &str| GeodeError::IntegrityViolation(format!("integrity table: {why}"));
        if blob.len() < AES_BLOCK + DIGEST_LEN {
            return Err(bad("truncated"));
        }
        let (body, tag) = blob.split_at(blob.len() - DIGEST_LEN);
        if !hmac_verify(&self.mac_key, &[b"table", body], tag) {
            return Err(bad("authentication failed"));
        }
        let (iv, ct) = body.split_at(AES_BLOCK);
        let iv: [u8; AES_BLOCK] = iv.try_into().expect("split at block size");
        let plain = cbc_decrypt(&self.enc_key, &iv, ct).ok_or_else(|| bad("bad padding"))?;
        let table = IntegrityTable::decode(&plain).ok_or_else(|| bad("malformed"))?;
        if table.version != counter {
            return Err(GeodeError::RollbackDetected { table: table.version, counter });
        }
        Ok(table)
    }

    fn load_blob(&self, key: &str, table: &IntegrityTable) -> Result<StoredBlob, GeodeError> {
        let expected = table.entries.get(key).ok_or_else(|| GeodeError::UnknownKey(key.to_owned()))?;
        let bytes = self
            .backend
            .get(key)
            .ok_or_else(|| GeodeError::IntegrityViolation(format!("{key} missing from backend")))?;
        if self.object_mac(key, bytes) != *expected {
            return Err(GeodeError::IntegrityViolation(format!("{key} does not match its recorded hash")));
        }
        StoredBlob::from_bytes(bytes).ok_or_else(|| GeodeError::IntegrityViolation(format!("{key} is malformed")))
    }

    pub fn put(
        &mut self,
        key: &str,
        plaintext: &[u8],
        label: &DataLabel,
        requester: Requester,
    ) -> Result<(), GeodeError> {
        let Requester::Verified { app } = requester else {
            return Err(GeodeError::UnverifiedRequester);
        };
        if key == TABLE_KEY || key.len() > u16::MAX as usize {
            return Err(GeodeError::BackendFailure(format!("key {key:?} is reserved or too long")));
        }
        let mut table = self.load_table()?;
        if table.entries.contains_key(key) {
            let existing = self.load_blob(key, &table)?;
            if existing.creator_app != app {
                return Err(GeodeError::NotCreatorApp { key: key.to_owned() });
            }
        }
        let iv = self.fresh_iv();
        let blob = StoredBlob {
            policy: encode_frame_label(label),
            creator_app: app,
            iv,
            ciphertext: cbc_encrypt(&self.enc_key, &iv, plaintext),
        }
        .to_bytes();
        table.entries.insert(key.to_owned(), self.object_mac(key, &blob));
        table.version = self.counter.value() + 1;
        self.backend.put(key, blob);
        self.write_table(&table);
        self.counter.increment();
        Ok(())
    }

    /// Returns the plaintext and the stored policy bytes.
    pub fn get(&self, key: &str, requester: Requester, dir: &dyn Directory) -> Result<(Vec<u8>, Vec<u8>), GeodeError> {
        let table = self.load_table()?;
        let blob = self.load_blob(key, &table)?;
        let (label, used) = decode_prefix(&blob.policy)
            .map_err(|_| GeodeError::IntegrityViolation(format!("{key} has a malformed policy")))?;
        if used != blob.policy.len() {
            return Err(GeodeError::IntegrityViolation(format!("{key} has a malformed policy")));
        }
        match requester {
            Requester::Verified { .. } => {}
            Requester::Device(process) => {
                if !flow_permitted(&label, &process, dir).unwrap_or(false) {
                    return Err(GeodeError::PolicyDenied);
                }
            }
            Requester::Unverified if label.is_public() => {}
            Requester::Unverified => return Err(GeodeError::UnverifiedRequester),
        }
        let plain = cbc_decrypt(&self.enc_key, &blob.iv, &blob.ciphertext)
            .ok_or_else(|| GeodeError::IntegrityViolation(format!("{key} failed to decrypt")))?;
        Ok((plain, blob.policy))
    }
}

/// One completed operation in a concurrent history. Times come from a
/// shared logical clock: `invoke` before the call, `respond` after.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HistoryOp {
    pub client: usize,
    pub key: String,
    pub kind: OpKind,
    pub invoke: u64,
    pub respond: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum OpKind {
    Put(Vec<u8>),
    /// `None` when the key did not exist.
    Get(Option<Vec<u8>>),
}

/// A proxy shared between threads, recording every operation.
#[derive(Debug)]
pub struct ConcurrentGeode {
    proxy: Mutex<GeodeProxy>,
    clock: AtomicU64,
    history: Mutex<Vec<HistoryOp>>,
}

impl ConcurrentGeode {
    pub fn new(proxy: GeodeProxy) -> Self {
        ConcurrentGeode { proxy: Mutex::new(proxy), clock: AtomicU64::new(0), history: Mutex::new(Vec::new()) }
    }

    fn tick(&self) -> u64 {
        self.clock.fetch_add(1, Ordering::SeqCst)
    }

    pub fn put(&self, client: usize, key: &str, value: &[u8], app: PrincipalId) -> Result<(), GeodeError> {
        let invoke = self.tick();
        let out = self.proxy.lock().put(key, value, &DataLabel::PUBLIC, Requester::Verified { app });
        let respond = self.tick();
        if out.is_ok() {
            self.history.lock().push(HistoryOp {
                client,
                key: key.to_owned(),
                kind: OpKind::Put(value.to_vec()),
                invoke,
                respond,
            });
        }
        out
    }

    pub fn get(&self, client: usize, key: &str, app: PrincipalId, dir: &dyn Directory) -> Result<Option<Vec<u8>>, GeodeError> {
        let invoke = self.tick();
        let out = match self.proxy.lock().get(key, Requester::Verified { app }, dir) {
            Ok((plain, _)) => Ok(Some(plain)),
            Err(GeodeError::UnknownKey(_)) => Ok(None),
            Err(e) => Err(e),
        };
        let respond = self.tick();
        if let Ok(v) = &out {
            self.history.lock().push(HistoryOp {
                client,
                key: key.to_owned(),
                kind: OpKind::Get(v.clone()),
                invoke,
                respond,
            });
        }
        out
    }

    pub fn history(&self) -> Vec<HistoryOp> {
        self.history.lock().clone()
    }

    pub fn into_proxy(self) -> GeodeProxy {
        self.proxy.into_inner()
    }
}

/// Checks that each key's operations admit a total order that respects
/// real time and in which every get returns the latest preceding put
/// (or nothing). Exhaustive search; meant for small histories.
pub fn check_linearizable(history: &[HistoryOp]) -> bool {
    let mut by_key: BTreeMap<&str, Vec<&HistoryOp>> = BTreeMap::new();
    for op in history {
        by_key.entry(&op.key).or_default().push(op);
    }
    by_key.values().all(|ops| {
        let mut used = vec![false; ops.len()];
        search(ops, &mut used, None)
    })
}

fn search(ops: &[&HistoryOp], used: &mut [bool], state: Option<&[u8]>) -> bool {
    if used.iter().all(|&u| u) {
        return true;
    }
    for i in 0..ops.len() {
        if used[i] {
            continue;
        }
        // i may go next only if no other pending op finished before i began
        let blocked = (0..ops.len()).any(|j| j != i && !used[j] && ops[j].respond < ops[i].invoke);
        if blocked {
            continue;
        }
        let next = match &ops[i].kind {
            OpKind::Put(v) => Some(v.as_slice()),
            OpKind::Get(seen) => {
                if seen.as_deref() != state {
                    continue;
                }
                state
            }
        };
        used[i] = true;
        if search(ops, used, next) {
            used[i] = false;
            return true;
        }
        used[i] = false;
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::principals::{PrincipalKind, UserService};

    struct World {
        users: UserService,
        fit: PrincipalId,
        other: PrincipalId,
        alice: PrincipalId,
        betty: PrincipalId,
        bob: PrincipalId,
        proxy: GeodeProxy,
    }

    fn world() -> World {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut users = UserService::new(&mut rng);
        let alice = users.register_principal(PrincipalKind::User, "Alice", None).unwrap();
        let betty = users.register_principal(PrincipalKind::User, "Betty", None).unwrap();
        let bob = users.register_principal(PrincipalKind::User, "Bob", None).unwrap();
        let fit = users.register_principal(PrincipalKind::App, "FitApp", None).unwrap();
        let other = users.register_principal(PrincipalKind::App, "OtherApp", None).unwrap();
        World { users, fit, other, alice, betty, bob, proxy: GeodeProxy::new(&mut rng) }
    }

    fn photo_label(w: &World) -> DataLabel {
        DataLabel::new([w.alice], [w.alice, w.betty, w.fit]).unwrap()
    }

    #[test]
    fn round_trip_returns_plaintext_and_policy() {
        let mut w = world();
        let label = photo_label(&w);
        let fit = Requester::Verified { app: w.fit };
        w.proxy.put("photo", b"alice at the lake", &label, fit).unwrap();
        let (plain, policy) = w.proxy.get("photo", fit, &w.users).unwrap();
        assert_eq!(plain, b"alice at the lake");
        assert_eq!(policy, crate::labels::policy_from_label(&label).unwrap());
        assert_eq!(w.proxy.counter(), 1);
    }

    #[test]
    fn blob_layout_is_bit_exact() {
        let mut w = world();
        let label = photo_label(&w);
        w.proxy.put("k", b"0123456789abcdef", &label, Requester::Verified { app: w.fit }).unwrap();
        let raw = w.proxy.backend().get("k").unwrap().to_vec();
        let policy = crate::labels::policy_from_label(&label).unwrap();
        assert_eq!(&raw[..4], b"GEO1");
        assert_eq!(u32::from_be_bytes(raw[4..8].try_into().unwrap()) as usize, policy.len());
        let p_end = 8 + policy.len();
        assert_eq!(&raw[8..p_end], policy.as_slice());
        assert_eq!(u64::from_be_bytes(raw[p_end..p_end + 8].try_into().unwrap()), w.fit.get());
        let iv: [u8; 16] = raw[p_end + 8..p_end + 24].try_into().unwrap();
        let ct_len = u32::from_be_bytes(raw[p_end + 24..p_end + 28].try_into().unwrap()) as usize;
        // 16 plaintext bytes pad to two blocks
        assert_eq!(ct_len, 32);
        let ct = &raw[p_end + 28..];
        assert_eq!(ct.len(), ct_len);
        assert_eq!(cbc_decrypt(&w.proxy.enc_key, &iv, ct).unwrap(), b"0123456789abcdef");
        assert_eq!(StoredBlob::from_bytes(&raw).unwrap().to_bytes(), raw);
    }

    #[test]
    fn only_the_creator_app_may_overwrite() {
        let mut w = world();
        let label = photo_label(&w);
        w.proxy.put("photo", b"v1", &label, Requester::Verified { app: w.fit }).unwrap();
        let err = w.proxy.put("photo", b"v2", &label, Requester::Verified { app: w.other }).unwrap_err();
        assert_eq!(err, GeodeError::NotCreatorApp { key: "photo".into() });
        w.proxy.put("photo", b"v3", &label, Requester::Verified { app: w.fit }).unwrap();
        assert_eq!(w.proxy.get("photo", Requester::Verified { app: w.fit }, &w.users).unwrap().0, b"v3");
        let err = w.proxy.put("x", b"v", &label, Requester::Unverified).unwrap_err();
        assert_eq!(err, GeodeError::UnverifiedRequester);
    }

    #[test]
    fn same_plaintext_twice_gives_distinct_ciphertexts() {
        let mut w = world();
        let label = photo_label(&w);
        let fit = Requester::Verified { app: w.fit };
        w.proxy.put("a", b"same bytes", &label, fit).unwrap();
        let first = w.proxy.backend().get("a").unwrap().to_vec();
        w.proxy.put("a", b"same bytes", &label, fit).unwrap();
        let second = w.proxy.backend().get("a").unwrap().to_vec();
        assert_ne!(first, second);
    }

    #[test]
    fn device_release_follows_the_label() {
        let mut w = world();
        let label = photo_label(&w);
        w.proxy.put("photo", b"p", &label, Requester::Verified { app: w.fit }).unwrap();
        let betty = Requester::Device(ProcessLabel::device(w.fit, w.betty));
        let bob = Requester::Device(ProcessLabel::device(w.fit, w.bob));
        assert!(w.proxy.get("photo", betty, &w.users).is_ok());
        assert_eq!(w.proxy.get("photo", bob, &w.users).unwrap_err(), GeodeError::PolicyDenied);
        assert_eq!(w.proxy.get("photo", Requester::Unverified, &w.users).unwrap_err(), GeodeError::UnverifiedRequester);
        assert_eq!(
            w.proxy.get("nope", betty, &w.users).unwrap_err(),
            GeodeError::UnknownKey("nope".into())
        );
    }

    #[test]
    fn tampering_and_rollback_are_detected() {
        let mut w = world();
        let label = photo_label(&w);
        let fit = Requester::Verified { app: w.fit };
        w.proxy.put("photo", b"v1", &label, fit).unwrap();
        let before = w.proxy.backend().snapshot();
        w.proxy.put("photo", b"v2", &label, fit).unwrap();

        let mut tampered = w.proxy.backend().clone();
        assert!(tampered.tamper("photo", 40, 0x01));
        let saved = std::mem::replace(w.proxy.backend_mut(), tampered);
        assert!(matches!(w.proxy.get("photo", fit, &w.users), Err(GeodeError::IntegrityViolation(_))));
        *w.proxy.backend_mut() = saved;

        w.proxy.backend_mut().rollback(&before);
        assert_eq!(
            w.proxy.get("photo", fit, &w.users).unwrap_err(),
            GeodeError::RollbackDetected { table: 1, counter: 2 }
        );
        // writes are refused too until state is restored
        assert!(matches!(w.proxy.put("other", b"x", &label, fit), Err(GeodeError::RollbackDetected { .. })));
    }

    #[test]
    fn stale_object_under_a_fresh_table_is_caught() {
        let mut w = world();
        let label = photo_label(&w);
        let fit = Requester::Verified { app: w.fit };
        w.proxy.put("a", b"1", &label, fit).unwrap();
        let old = w.proxy.backend().get("a").unwrap().to_vec();
        w.proxy.put("a", b"2", &label, fit).unwrap();
        w.proxy.backend_mut().put("a", old);
        assert!(matches!(w.proxy.get("a", fit, &w.users), Err(GeodeError::IntegrityViolation(_))));
        // and so is a later write to the damaged key
        w.proxy.put("a", b"2", &label, fit).unwrap_err();
    }

    #[test]
    fn dropped_table_after_writes_is_a_rollback() {
        let mut w = world();
        w.proxy.put("a", b"1", &DataLabel::PUBLIC, Requester::Verified { app: w.fit }).unwrap();
        w.proxy.backend_mut().drop_key(TABLE_KEY);
        assert_eq!(
            w.proxy.get("a", Requester::Unverified, &w.users).unwrap_err(),
            GeodeError::RollbackDetected { table: 0, counter: 1 }
        );
    }

    fn op(key: &str, kind: OpKind, invoke: u64, respond: u64) -> HistoryOp {
        HistoryOp { client: 0, key: key.into(), kind, invoke, respond }
    }

    #[test]
    fn linearizability_checker_accepts_and_rejects() {
        let put = |v: &[u8]| OpKind::Put(v.to_vec());
        let get = |v: Option<&[u8]>| OpKind::Get(v.map(<[u8]>::to_vec));
        // put A=1; put A=2; get A → 2
        let ok = [op("A", put(b"1"), 0, 1), op("A", put(b"2"), 2, 3), op("A", get(Some(b"2")), 4, 5)];
        assert!(check_linearizable(&ok));
        let stale = [op("A", put(b"1"), 0, 1), op("A", put(b"2"), 2, 3), op("A", get(Some(b"1")), 4, 5)];
        assert!(!check_linearizable(&stale));
        // overlapping puts: either order explains the read
        let overlap = [op("A", put(b"1"), 0, 5), op("A", put(b"2"), 1, 4), op("A", get(Some(b"1")), 6, 7)];
        assert!(check_linearizable(&overlap));
        let before_any = [op("A", get(None), 0, 1), op("A", put(b"1"), 2, 3)];
        assert!(check_linearizable(&before_any));
        let phantom = [op("A", get(Some(b"9")), 0, 1)];
        assert!(!check_linearizable(&phantom));
    }
}
