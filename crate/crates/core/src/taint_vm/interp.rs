//! Tracked and untracked interpreters.
//!
//! Tracked execution carries a label handle on every value:
//!
//! - assignment and arithmetic: the result is the merge of the operand
//!   labels and the current context label;
//! - native calls: the result is the merge of all argument labels;
//! - annotated guards: each evaluation folds the guard label into every
//!   variable of the site's write set (whichever way the branch goes) and
//!   pushes it onto the context for the duration of the body. Loop bodies
//!   run under the merge of every guard label the loop has evaluated.
//!
//! Untracked execution computes the same values with no labels and never
//! consults the host about releases.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use super::analysis::Annotations;
use super::ast::{BinOp, Expr, Program, SiteId, Stmt};
use super::{TaggedValue, Value};
use crate::labels::{LabelHandle, LabelStore};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HostError {
    #[error("flow denied: {0}")]
    FlowDenied(String),
    /// `kind` names the error for reports, e.g. `AccessDenied`.
    #[error("{kind}: {message}")]
    Failed { kind: &'static str, message: String },
    #[error("operation not available on this host: {0}")]
    Unsupported(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecError {
    #[error("unbound variable {0}")]
    Unbound(String),
    #[error("type mismatch: {0}")]
    TypeMismatch(String),
    #[error("call depth limit exceeded")]
    StackOverflow,
    #[error("step budget exhausted")]
    OutOfFuel,
    #[error("send to {dest} denied: {reason}")]
    FlowDenied { dest: String, reason: String },
    #[error("{op} failed: {kind}: {message}")]
    Host { op: &'static str, kind: &'static str, message: String },
}

impl ExecError {
    fn from_host(op: &'static str, dest: &str, e: HostError) -> Self {
        match e {
            HostError::FlowDenied(reason) => ExecError::FlowDenied { dest: dest.to_owned(), reason },
            HostError::Failed { kind, message } => ExecError::Host { op, kind, message },
            HostError::Unsupported(what) => ExecError::Host { op, kind: "Unsupported", message: what.to_owned() },
        }
    }

    /// Short name for reports: the host error kind, or the variant name.
    pub fn kind(&self) -> &'static str {
        match self {
            ExecError::Unbound(_) | ExecError::TypeMismatch(_) => "RuntimeError",
            ExecError::StackOverflow => "StackOverflow",
            ExecError::OutOfFuel => "OutOfFuel",
            ExecError::FlowDenied { .. } => "FlowDenied",
            ExecError::Host { kind, .. } => kind,
        }
    }
}

impl HostError {
    pub fn failed(kind: &'static str, message: impl Into<String>) -> Self {
        HostError::Failed { kind, message: message.into() }
    }
}

/// The environment a process runs in: OS resources, native libraries,
/// the network and storage.
pub trait Host {
    fn resource(&mut self, name: &str, labels: &mut LabelStore) -> Result<TaggedValue, HostError>;

    /// Natives are opaque: the interpreter assigns the result the merge of
    /// the argument labels.
    fn native(&mut self, name: &str, args: &[Value]) -> Result<Value, HostError> {
        builtin_native(name, args)
    }

    fn declassify(
        &mut self,
        _view: &str,
        _value: &TaggedValue,
        _labels: &mut LabelStore,
    ) -> Result<TaggedValue, HostError> {
        Err(HostError::Unsupported("declassify"))
    }

    /// The view transform alone, for untracked runs.
    fn transform(&mut self, _view: &str, _value: &Value) -> Result<Value, HostError> {
        Err(HostError::Unsupported("declassify"))
    }

    fn send(&mut self, _dest: &str, _value: &TaggedValue, _labels: &LabelStore) -> Result<(), HostError> {
        Err(HostError::Unsupported("send"))
    }

    fn recv(&mut self, _labels: &mut LabelStore) -> Result<TaggedValue, HostError> {
        Err(HostError::Unsupported("recv"))
    }

    fn store(
        &mut self,
        _node: &str,
        _key: &str,
        _value: &TaggedValue,
        _labels: &LabelStore,
    ) -> Result<(), HostError> {
        Err(HostError::Unsupported("store"))
    }

    fn fetch(&mut self, _node: &str, _key: &str, _labels: &mut LabelStore) -> Result<TaggedValue, HostError> {
        Err(HostError::Unsupported("fetch"))
    }
}

/// Natives every host provides.
pub fn builtin_native(name: &str, args: &[Value]) -> Result<Value, HostError> {
    match name {
        "hash" => {
            let mut parts = Vec::new();
            for a in args {
                parts.extend_from_slice(&a.to_bytes());
            }
            Ok(Value::Bytes(crate::crypto::sha256(&[&parts]).to_vec()))
        }
        "len" => match args {
            [Value::Bytes(b)] => Ok(Value::Int(b.len() as i64)),
            _ => Err(HostError::failed("NativeError", "len expects one byte string")),
        },
        "mix" => Ok(Value::Int(args.iter().fold(17i64, |acc, a| match a {
            Value::Int(n) => acc.wrapping_mul(31).wrapping_add(*n),
            Value::Bytes(b) => b.iter().fold(acc, |h, &c| h.wrapping_mul(31).wrapping_add(c as i64)),
        }))),
        _ => Err(HostError::failed("NativeError", format!("unknown native {name}"))),
    }
}

/// Hooks for tests and tracing.
pub trait Observer {
    fn guard(&mut self, _site: SiteId, _guard: LabelHandle, _labels: &LabelStore) {}

    /// After the guard label has been folded into the write set.
    fn folded(&mut self, _site: SiteId, _write_set: &[(String, LabelHandle)], _labels: &LabelStore) {}

    /// After an annotated conditional or loop finishes. `guard` is the
    /// merge of every guard label evaluated at the site during this visit;
    /// `write_set` holds the current labels of its bound variables.
    fn exited(&mut self, _site: SiteId, _guard: LabelHandle, _write_set: &[(String, LabelHandle)], _labels: &LabelStore) {}

    /// A variable received a new label computed from `sources`.
    fn assigned(&mut self, _var: &str, _label: LabelHandle, _sources: &[LabelHandle], _labels: &LabelStore) {}
}

impl Observer for () {}

#[derive(Clone, Debug)]
pub struct ExecConfig {
    pub fuel: u64,
    pub max_depth: usize,
    /// Overrides the first evaluation of the given guards.
    pub force_guards: BTreeMap<SiteId, bool>,
}

impl Default for ExecConfig {
    fn default() -> Self {
        ExecConfig { fuel: 1_000_000, max_depth: 128, force_guards: BTreeMap::new() }
    }
}

/// Final bindings of the entry frame and the globals.
pub type Environment = BTreeMap<String, TaggedValue>;

pub fn execute(
    program: &Program,
    annotations: &Annotations,
    host: &mut dyn Host,
    labels: &mut LabelStore,
) -> Result<Environment, ExecError> {
    execute_with(program, annotations, host, labels, &ExecConfig::default(), &mut ())
}

pub fn execute_with(
    program: &Program,
    annotations: &Annotations,
    host: &mut dyn Host,
    labels: &mut LabelStore,
    config: &ExecConfig,
    observer: &mut dyn Observer,
) -> Result<Environment, ExecError> {
    let mut m = Tracked {
        program,
        annotations,
        host,
        labels,
        observer,
        globals: BTreeMap::new(),
        context: vec![LabelHandle::PUBLIC],
        fuel: config.fuel,
        max_depth: config.max_depth,
        depth: 0,
        forced: config.force_guards.clone(),
    };
    let mut frame = BTreeMap::new();
    let entry = &program.functions[&program.entry];
    m.block(&entry.body, &mut frame)?;
    let mut env = frame;
    env.extend(m.globals);
    Ok(env)
}

struct Tracked<'a> {
    program: &'a Program,
    annotations: &'a Annotations,
    host: &'a mut dyn Host,
    labels: &'a mut LabelStore,
    observer: &'a mut dyn Observer,
    globals: BTreeMap<String, TaggedValue>,
    // running merge of the enclosing labeled guards; last entry is current
    context: Vec<LabelHandle>,
    fuel: u64,
    max_depth: usize,
    depth: usize,
    forced: BTreeMap<SiteId, bool>,
}

type Frame = BTreeMap<String, TaggedValue>;

impl Tracked<'_> {
    fn pc(&self) -> LabelHandle {
        *self.context.last().expect("context never empty")
    }

    fn tick(&mut self) -> Result<(), ExecError> {
        if self.fuel == 0 {
            return Err(ExecError::OutOfFuel);
        }
        self.fuel -= 1;
        Ok(())
    }

    fn lookup<'f>(&'f self, frame: &'f Frame, var: &str) -> Result<&'f TaggedValue, ExecError> {
        let slot = if self.program.is_global(var) { self.globals.get(var) } else { frame.get(var) };
        slot.ok_or_else(|| ExecError::Unbound(var.to_owned()))
    }

    fn bind(&mut self, frame: &mut Frame, var: &str, value: Value, sources: &[LabelHandle]) {
        let mut tag = self.pc();
        for &s in sources {
            tag = self.labels.merge(tag, s);
        }
        let mut all_sources = sources.to_vec();
        all_sources.push(self.pc());
        self.observer.assigned(var, tag, &all_sources, self.labels);
        let tv = TaggedValue { value, tag };
        if self.program.is_global(var) {
            self.globals.insert(var.to_owned(), tv);
        } else {
            frame.insert(var.to_owned(), tv);
        }
    }

    fn eval(&mut self, frame: &Frame, expr: &Expr) -> Result<TaggedValue, ExecError> {
        match expr {
            Expr::Int(n) => Ok(TaggedValue::public(Value::Int(*n))),
            Expr::Bytes(b) => Ok(TaggedValue::public(Value::Bytes(b.clone()))),
            Expr::Var(v) => Ok(self.lookup(frame, v)?.clone()),
            Expr::Binary(op, l, r) => {
                let l = self.eval(frame, l)?;
                let r = self.eval(frame, r)?;
                let value = apply(*op, &l.value, &r.value)?;
                Ok(TaggedValue { value, tag: self.labels.merge(l.tag, r.tag) })
            }
        }
    }

    fn guard(&mut self, frame: &mut Frame, site: SiteId, cond: &Expr) -> Result<(bool, LabelHandle), ExecError> {
        let g = self.eval(frame, cond)?;
        let truth = match self.forced.remove(&site) {
            Some(forced) => forced,
            None => truthy(&g.value)?,
        };
        let Some(ann) = self.annotations.get(site) else {
            return Ok((truth, LabelHandle::PUBLIC));
        };
        self.observer.guard(site, g.tag, self.labels);
        let mut folded = Vec::with_capacity(ann.write_set.len());
        for var in &ann.write_set {
            let slot = if self.program.is_global(var) {
                self.globals.get_mut(var)
            } else {
                frame.get_mut(var)
            };
            if let Some(tv) = slot {
                tv.tag = self.labels.merge(tv.tag, g.tag);
                folded.push((var.clone(), tv.tag));
            }
        }
        self.observer.folded(site, &folded, self.labels);
        Ok((truth, g.tag))
    }

    fn exited(&mut self, site: SiteId, guard: LabelHandle, frame: &Frame) {
        let Some(ann) = self.annotations.get(site) else {
            return;
        };
        let current: Vec<(String, LabelHandle)> = ann
            .write_set
            .iter()
            .filter_map(|v| {
                let slot = if self.program.is_global(v) { self.globals.get(v) } else { frame.get(v) };
                slot.map(|tv| (v.clone(), tv.tag))
            })
            .collect();
        self.observer.exited(site, guard, &current, self.labels);
    }

    fn with_context<T>(
        &mut self,
        guard: LabelHandle,
        f: impl FnOnce(&mut Self) -> Result<T, ExecError>,
    ) -> Result<T, ExecError> {
        let pc = self.labels.merge(self.pc(), guard);
        self.context.push(pc);
        let out = f(self);
        self.context.pop();
        out
    }

    fn block(&mut self, block: &[Stmt], frame: &mut Frame) -> Result<(), ExecError> {
        for stmt in block {
            self.stmt(stmt, frame)?;
        }
        Ok(())
    }

    fn stmt(&mut self, stmt: &Stmt, frame: &mut Frame) -> Result<(), ExecError> {
        self.tick()?;
        match stmt {
            Stmt::Assign { var, expr } => {
                let v = self.eval(frame, expr)?;
                self.bind(frame, var, v.value, &[v.tag]);
            }
            Stmt::If { site, cond, then_block, else_block } => {
                let (truth, g) = self.guard(frame, *site, cond)?;
                let chosen = if truth { then_block } else { else_block };
                self.with_context(g, |m| m.block(chosen, frame))?;
                self.exited(*site, g, frame);
            }
            Stmt::While { site, cond, body } => {
                // the body runs under every guard label seen so far
                let mut seen = LabelHandle::PUBLIC;
                loop {
                    let (truth, g) = self.guard(frame, *site, cond)?;
                    seen = self.labels.merge(seen, g);
                    if !truth {
                        break;
                    }
                    self.with_context(seen, |m| m.block(body, frame))?;
                    self.tick()?;
                }
                self.exited(*site, seen, frame);
            }
            Stmt::Send { dest, var } => {
                let v = self.lookup(frame, var)?.clone();
                let tagged = TaggedValue { tag: self.labels.merge(v.tag, self.pc()), value: v.value };
                self.host
                    .send(dest, &tagged, self.labels)
                    .map_err(|e| ExecError::from_host("send", dest, e))?;
            }
            Stmt::Store { node, key, var } => {
                let v = self.lookup(frame, var)?.clone();
                let tagged = TaggedValue { tag: self.labels.merge(v.tag, self.pc()), value: v.value };
                self.host
                    .store(node, key, &tagged, self.labels)
                    .map_err(|e| ExecError::from_host("store", node, e))?;
            }
            Stmt::Recv { var } => {
                let v = self.host.recv(self.labels).map_err(|e| ExecError::from_host("recv", "", e))?;
                self.bind(frame, var, v.value, &[v.tag]);
            }
            Stmt::Fetch { var, node, key } => {
                let v = self
                    .host
                    .fetch(node, key, self.labels)
                    .map_err(|e| ExecError::from_host("fetch", node, e))?;
                self.bind(frame, var, v.value, &[v.tag]);
            }
            Stmt::Resource { var, resource } => {
                let v = self
                    .host
                    .resource(resource, self.labels)
                    .map_err(|e| ExecError::from_host("resource", resource, e))?;
                self.bind(frame, var, v.value, &[v.tag]);
            }
            Stmt::Native { var, func, args } => {
                let mut values = Vec::with_capacity(args.len());
                let mut tags = Vec::with_capacity(args.len());
                for a in args {
                    let v = self.eval(frame, a)?;
                    values.push(v.value);
                    tags.push(v.tag);
                }
                let out = self
                    .host
                    .native(func, &values)
                    .map_err(|e| ExecError::from_host("native", func, e))?;
                self.bind(frame, var, out, &tags);
            }
            Stmt::Declassify { var, view, source } => {
                let src = self.lookup(frame, source)?.clone();
                let out = self
                    .host
                    .declassify(view, &src, self.labels)
                    .map_err(|e| ExecError::from_host("declassify", view, e))?;
                self.bind(frame, var, out.value, &[out.tag]);
            }
            Stmt::Call { func, args } => {
                if self.depth >= self.max_depth {
                    return Err(ExecError::StackOverflow);
                }
                let callee = &self.program.functions[func];
                let mut callee_frame = Frame::new();
                for (param, arg) in callee.params.iter().zip(args) {
                    let v = self.eval(frame, arg)?;
                    let tag = self.labels.merge(v.tag, self.pc());
                    callee_frame.insert(param.clone(), TaggedValue { value: v.value, tag });
                }
                self.depth += 1;
                let out = self.block(&callee.body, &mut callee_frame);
                self.depth -= 1;
                out?;
            }
        }
        Ok(())
    }
}

fn truthy(v: &Value) -> Result<bool, ExecError> {
    match v {
        Value::Int(n) => Ok(*n != 0),
        Value::Bytes(_) => Err(ExecError::TypeMismatch("condition must be an integer".into())),
    }
}

fn apply(op: BinOp, l: &Value, r: &Value) -> Result<Value, ExecError> {
    use Value::{Bytes, Int};
    let bool_int = |b: bool| Int(b as i64);
    Ok(match (op, l, r) {
        (BinOp::Eq, a, b) => bool_int(a == b),
        (BinOp::Ne, a, b) => bool_int(a != b),
        (BinOp::Lt, Int(a), Int(b)) => bool_int(a < b),
        (BinOp::Lt, Bytes(a), Bytes(b)) => bool_int(a < b),
        (BinOp::Add, Int(a), Int(b)) => Int(a.wrapping_add(*b)),
        (BinOp::Add, Bytes(a), Bytes(b)) => Bytes([a.as_slice(), b.as_slice()].concat()),
        (BinOp::Sub, Int(a), Int(b)) => Int(a.wrapping_sub(*b)),
        (BinOp::Mul, Int(a), Int(b)) => Int(a.wrapping_mul(*b)),
        (BinOp::And, Int(a), Int(b)) => Int(a & b),
        (op, a, b) => {
            return Err(ExecError::TypeMismatch(format!(
                "{} {} {}",
                a.type_name(),
                op.symbol(),
                b.type_name()
            )))
        }
    })
}

/// Values sent or stored during an untracked run, in order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UntrackedOutcome {
    pub env: BTreeMap<String, Value>,
    pub outputs: Vec<(String, Value)>,
}

pub fn execute_untracked(program: &Program, host: &mut dyn Host) -> Result<UntrackedOutcome, ExecError> {
    execute_untracked_with(program, host, &ExecConfig::default())
}

pub fn execute_untracked_with(
    program: &Program,
    host: &mut dyn Host,
    config: &ExecConfig,
) -> Result<UntrackedOutcome, ExecError> {
    let mut m = Plain {
        program,
        host,
        scratch: LabelStore::new(),
        globals: BTreeMap::new(),
        outputs: Vec::new(),
        fuel: config.fuel,
        max_depth: config.max_depth,
        depth: 0,
        forced: config.force_guards.clone(),
    };
    let mut frame = BTreeMap::new();
    m.block(&program.functions[&program.entry].body, &mut frame)?;
    let mut env = frame;
    env.extend(m.globals);
    Ok(UntrackedOutcome { env, outputs: m.outputs })
}

struct Plain<'a> {
    program: &'a Program,
    host: &'a mut dyn Host,
    // hosts hand back tagged values; the tags are discarded here
    scratch: LabelStore,
    globals: BTreeMap<String, Value>,
    outputs: Vec<(String, Value)>,
    fuel: u64,
    max_depth: usize,
    depth: usize,
    forced: BTreeMap<SiteId, bool>,
}

impl Plain<'_> {
    fn lookup(&self, frame: &BTreeMap<String, Value>, var: &str) -> Result<Value, ExecError> {
        let slot = if self.program.is_global(var) { self.globals.get(var) } else { frame.get(var) };
        slot.cloned().ok_or_else(|| ExecError::Unbound(var.to_owned()))
    }

    fn bind(&mut self, frame: &mut BTreeMap<String, Value>, var: &str, value: Value) {
        if self.program.is_global(var) {
            self.globals.insert(var.to_owned(), value);
        } else {
            frame.insert(var.to_owned(), value);
        }
    }

    fn eval(&self, frame: &BTreeMap<String, Value>, expr: &Expr) -> Result<Value, ExecError> {
        match expr {
            Expr::Int(n) => Ok(Value::Int(*n)),
            Expr::Bytes(b) => Ok(Value::Bytes(b.clone())),
            Expr::Var(v) => self.lookup(frame, v),
            Expr::Binary(op, l, r) => apply(*op, &self.eval(frame, l)?, &self.eval(frame, r)?),
        }
    }

    fn cond(&mut self, frame: &BTreeMap<String, Value>, site: SiteId, cond: &Expr) -> Result<bool, ExecError> {
        let v = self.eval(frame, cond)?;
        match self.forced.remove(&site) {
            Some(forced) => Ok(forced),
            None => truthy(&v),
        }
    }

    fn tick(&mut self) -> Result<(), ExecError> {
        if self.fuel == 0 {
            return Err(ExecError::OutOfFuel);
        }
        self.fuel -= 1;
        Ok(())
    }

    fn block(&mut self, block: &[Stmt], frame: &mut BTreeMap<String, Value>) -> Result<(), ExecError> {
        for stmt in block {
            self.tick()?;
            match stmt {
                Stmt::Assign { var, expr } => {
                    let v = self.eval(frame, expr)?;
                    self.bind(frame, var, v);
                }
                Stmt::If { site, cond, then_block, else_block } => {
                    if self.cond(frame, *site, cond)? {
                        self.block(then_block, frame)?;
                    } else {
                        self.block(else_block, frame)?;
                    }
                }
                Stmt::While { site, cond, body } => {
                    while self.cond(frame, *site, cond)? {
                        self.block(body, frame)?;
                        self.tick()?;
                    }
                }
                Stmt::Send { dest, var } => {
                    let v = self.lookup(frame, var)?;
                    self.outputs.push((dest.clone(), v));
                }
                Stmt::Store { node, key, var } => {
                    let v = self.lookup(frame, var)?;
                    self.outputs.push((format!("{node}/{key}"), v));
                }
                Stmt::Recv { var } => {
                    let v = self
                        .host
                        .recv(&mut self.scratch)
                        .map_err(|e| ExecError::from_host("recv", "", e))?;
                    self.bind(frame, var, v.value);
                }
                Stmt::Fetch { var, node, key } => {
                    let v = self
                        .host
                        .fetch(node, key, &mut self.scratch)
                        .map_err(|e| ExecError::from_host("fetch", node, e))?;
                    self.bind(frame, var, v.value);
                }
                Stmt::Resource { var, resource } => {
                    let v = self
                        .host
                        .resource(resource, &mut self.scratch)
                        .map_err(|e| ExecError::from_host("resource", resource, e))?;
                    self.bind(frame, var, v.value);
                }
                Stmt::Native { var, func, args } => {
                    let values = args.iter().map(|a| self.eval(frame, a)).collect::<Result<Vec<_>, _>>()?;
                    let out = self
                        .host
                        .native(func, &values)
                        .map_err(|e| ExecError::from_host("native", func, e))?;
                    self.bind(frame, var, out);
                }
                Stmt::Declassify { var, view, source } => {
                    let src = self.lookup(frame, source)?;
                    let out = self
                        .host
                        .transform(view, &src)
                        .map_err(|e| ExecError::from_host("declassify", view, e))?;
                    self.bind(frame, var, out);
                }
                Stmt::Call { func, args } => {
                    if self.depth >= self.max_depth {
                        return Err(ExecError::StackOverflow);
                    }
                    let callee = &self.program.functions[func];
                    let mut callee_frame = BTreeMap::new();
                    for (param, arg) in callee.params.iter().zip(args) {
                        callee_frame.insert(param.clone(), self.eval(frame, arg)?);
                    }
                    self.depth += 1;
                    let out = self.block(&callee.body, &mut callee_frame);
                    self.depth -= 1;
                    out?;
                }
            }
        }
        Ok(())
    }
}

/// Labels of every variable in `env`, for comparing tracked runs.
pub fn label_view(env: &Environment, labels: &LabelStore) -> BTreeMap<String, crate::labels::DataLabel> {
    env.iter()
        .map(|(k, v)| (k.clone(), labels.get(v.tag).clone()))
        .collect()
}

/// Variable names bound in `env`.
pub fn bound_names(env: &Environment) -> BTreeSet<&str> {
    env.keys().map(String::as_str).collect()
}
