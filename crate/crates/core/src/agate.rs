//! The device node: user login, policy capture, mediation of OS-protected
//! resources and restricted-view declassification.

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::labels::{label_from_policy, DataLabel, LabelStore, SafePolicy};
use crate::principals::{PrincipalId, UserCertificate, UserService};
use crate::taint_vm::{TaggedValue, Value};
use crate::NodeId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AgateError {
    #[error("no user is logged in")]
    NotLoggedIn,
    #[error("authentication failed")]
    AuthFailed,
    #[error("policy proposal rejected")]
    Rejected,
    #[error("{app} has no policy for {resource}")]
    AccessDenied { resource: String, app: PrincipalId },
    #[error("unknown resource {0}")]
    UnknownResource(String),
    #[error("{view} needs data read from {expected}")]
    WrongSource { view: String, expected: String },
}

impl AgateError {
    pub fn kind(&self) -> &'static str {
        match self {
            AgateError::NotLoggedIn => "NotLoggedIn",
            AgateError::AuthFailed => "AuthFailed",
            AgateError::Rejected => "Rejected",
            AgateError::AccessDenied { .. } => "AccessDenied",
            AgateError::UnknownResource(_) => "UnknownResource",
            AgateError::WrongSource { .. } => "WrongSource",
        }
    }
}

/// A trusted transform that yields a less sensitive view of a resource,
/// named `Base.View`.
#[derive(Clone, Copy)]
pub struct RestrictedView {
    pub name: &'static str,
    pub base: &'static str,
    pub transform: fn(&Value) -> Value,
}

impl std::fmt::Debug for RestrictedView {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name)
    }
}

pub const BASE_RESOURCES: [&str; 5] = ["Camera", "GPS", "Contacts", "Calendar", "Microphone"];

/// GPS values are cell ids; a neighborhood is a block of 10⁴ cells.
fn neighborhood(v: &Value) -> Value {
    match v {
        Value::Int(cell) => Value::Bytes(format!("nbhd-{}", cell.div_euclid(10_000)).into_bytes()),
        Value::Bytes(_) => Value::Bytes(b"nbhd-unknown".to_vec()),
    }
}

/// Calendar entries are `HH:MM-HH:MM title` lines; the busy view keeps the
/// times only.
fn busy(v: &Value) -> Value {
    let text = match v {
        Value::Bytes(b) => String::from_utf8_lossy(b).into_owned(),
        Value::Int(_) => return Value::Bytes(Vec::new()),
    };
    let slots: Vec<&str> = text.lines().filter_map(|l| l.split_whitespace().next()).collect();
    Value::Bytes(slots.join("\n").into_bytes())
}

fn count(v: &Value) -> Value {
    match v {
        Value::Bytes(b) => Value::Int(b.split(|&c| c == b'\n').filter(|l| !l.is_empty()).count() as i64),
        Value::Int(_) => Value::Int(1),
    }
}

pub const RESTRICTED_VIEWS: [RestrictedView; 3] = [
    RestrictedView { name: "GPS.Neighborhood", base: "GPS", transform: neighborhood },
    RestrictedView { name: "Calendar.Busy", base: "Calendar", transform: busy },
    RestrictedView { name: "Contacts.Count", base: "Contacts", transform: count },
];

pub fn restricted_view(name: &str) -> Option<&'static RestrictedView> {
    RESTRICTED_VIEWS.iter().find(|v| v.name == name)
}

/// The secure-UI surrogate: picks one of an app's proposed policies, or
/// declines with `None`.
pub trait PolicyChooser {
    fn choose(&mut self, app: PrincipalId, choices: &[SafePolicy]) -> Option<usize>;
}

/// Always answers the same way.
impl PolicyChooser for Option<usize> {
    fn choose(&mut self, _app: PrincipalId, _choices: &[SafePolicy]) -> Option<usize> {
        *self
    }
}

#[derive(Debug)]
pub struct DeviceNode {
    id: NodeId,
    logged_in: Option<(PrincipalId, UserCertificate)>,
    policies: BTreeMap<(String, PrincipalId), SafePolicy>,
    restricted: BTreeMap<(String, PrincipalId), SafePolicy>,
    pinned: BTreeMap<String, Value>,
    rng: ChaCha8Rng,
}

impl DeviceNode {
    pub fn new(id: NodeId, seed: u64) -> Self {
        DeviceNode {
            id,
            logged_in: None,
            policies: BTreeMap::new(),
            restricted: BTreeMap::new(),
            pinned: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    /// A later login replaces the earlier one.
    pub fn login(&mut self, users: &mut UserService, user: PrincipalId) -> Result<&UserCertificate, AgateError> {
        let cert = users.authenticate_user(user, self.id).map_err(|_| AgateError::AuthFailed)?;
        self.logged_in = Some((user, cert));
        Ok(&self.logged_in.as_ref().expect("just set").1)
    }

    pub fn user(&self) -> Option<PrincipalId> {
        self.logged_in.as_ref().map(|(u, _)| *u)
    }

    pub fn certificate(&self) -> Option<&UserCertificate> {
        self.logged_in.as_ref().map(|(_, c)| c)
    }

    fn require_user(&self) -> Result<PrincipalId, AgateError> {
        self.user().ok_or(AgateError::NotLoggedIn)
    }

    /// Installs a policy for a base resource or a restricted view.
    pub fn set_policy(&mut self, policy: SafePolicy) -> Result<(), AgateError> {
        self.require_user()?;
        let key = (policy.resource.clone(), policy.app);
        if restricted_view(&policy.resource).is_some() {
            self.restricted.insert(key, policy);
        } else if BASE_RESOURCES.contains(&policy.resource.as_str()) {
            self.policies.insert(key, policy);
        } else {
            return Err(AgateError::UnknownResource(policy.resource));
        }
        Ok(())
    }

    pub fn policy(&self, resource: &str, app: PrincipalId) -> Option<&SafePolicy> {
        let key = (resource.to_owned(), app);
        self.policies.get(&key).or_else(|| self.restricted.get(&key))
    }

    pub fn propose_policy(
        &mut self,
        app: PrincipalId,
        choices: &[SafePolicy],
        chooser: &mut dyn PolicyChooser,
    ) -> Result<SafePolicy, AgateError> {
        self.require_user()?;
        let picked = chooser
            .choose(app, choices)
            .and_then(|i| choices.get(i))
            .ok_or(AgateError::Rejected)?
            .clone();
        if picked.app != app {
            return Err(AgateError::Rejected);
        }
        self.set_policy(picked.clone())?;
        Ok(picked)
    }

    /// Fixes the value a resource returns instead of generating one.
    pub fn pin_resource(&mut self, resource: &str, value: Value) -> Result<(), AgateError> {
        if !BASE_RESOURCES.contains(&resource) {
            return Err(AgateError::UnknownResource(resource.to_owned()));
        }
        self.pinned.insert(resource.to_owned(), value);
        Ok(())
    }

    fn sample(&mut self, resource: &str) -> Value {
        if let Some(v) = self.pinned.get(resource) {
            return v.clone();
        }
        let rng = &mut self.rng;
        match resource {
            "GPS" => Value::Int(rng.gen_range(0..100_000_000)),
            "Calendar" => {
                let h = rng.gen_range(8..17);
                Value::Bytes(format!("{h:02}:00-{:02}:00 meeting\n{:02}:30-{:02}:00 gym", h + 1, h + 2, h + 3).into_bytes())
            }
            "Contacts" => {
                let n = rng.gen_range(1..5);
                let names: Vec<String> = (0..n).map(|i| format!("contact{i}")).collect();
                Value::Bytes(names.join("\n").into_bytes())
            }
            _ => {
                let mut b = vec![0u8; 32];
                rng.fill_bytes(&mut b);
                Value::Bytes(b)
            }
        }
    }

    /// Reads an OS-protected resource on behalf of `app`; the value carries
    /// the label derived from the user's policy.
    pub fn read_resource(
        &mut self,
        app: PrincipalId,
        resource: &str,
        labels: &mut LabelStore,
    ) -> Result<TaggedValue, AgateError> {
        let user = self.require_user()?;
        if !BASE_RESOURCES.contains(&resource) {
            return Err(AgateError::UnknownResource(resource.to_owned()));
        }
        let policy = self
            .policies
            .get(&(resource.to_owned(), app))
            .ok_or_else(|| AgateError::AccessDenied { resource: resource.to_owned(), app })?;
        let label = label_from_policy(policy, user).with_origin(resource);
        let tag = labels.intern(label);
        Ok(TaggedValue { value: self.sample(resource), tag })
    }

    /// Replaces the label of data read from a base resource with the label
    /// of the user's policy for the restricted view.
    pub fn read_restricted(
        &mut self,
        app: PrincipalId,
        view: &str,
        value: &TaggedValue,
        labels: &mut LabelStore,
    ) -> Result<TaggedValue, AgateError> {
        let user = self.require_user()?;
        let spec = restricted_view(view).ok_or_else(|| AgateError::UnknownResource(view.to_owned()))?;
        let policy = self
            .restricted
            .get(&(view.to_owned(), app))
            .ok_or_else(|| AgateError::AccessDenied { resource: view.to_owned(), app })?;
        let current = labels.get(value.tag);
        let from_base = current.origins().len() == 1 && current.origins().contains(spec.base);
        if !from_base {
            return Err(AgateError::WrongSource { view: view.to_owned(), expected: spec.base.to_owned() });
        }
        if current.owners().len() != 1 || !current.owners().contains(&user) {
            return Err(AgateError::AccessDenied { resource: view.to_owned(), app });
        }
        let label: DataLabel = label_from_policy(policy, user).with_origin(view);
        Ok(TaggedValue { value: (spec.transform)(&value.value), tag: labels.intern(label) })
    }
}
