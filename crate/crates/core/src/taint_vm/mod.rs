//! A small imperative language with label tracking.
//!
//! Programs consist of functions over integers and byte strings. Values read
//! from resources, the network or storage carry a label; the interpreter
//! propagates labels through assignments, natives, calls and, via the
//! static annotations from [`analyze_implicit_flows`], through control flow.

mod analysis;
mod ast;
pub mod corpus;
mod interp;
mod parser;

use std::fmt;

pub use analysis::{analyze_implicit_flows, annotate_all, Annotations, ImplicitFlowAnnotation};
pub use ast::{visit_block, BinOp, Block, Expr, Function, Program, SiteId, Stmt};
pub use interp::{
    bound_names, builtin_native, execute, execute_untracked, execute_untracked_with, execute_with,
    label_view, Environment, ExecConfig, ExecError, Host, HostError, Observer, UntrackedOutcome,
};
pub use parser::{parse_program, ParseError, ENTRY};

use crate::labels::LabelHandle;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Value {
    Int(i64),
    Bytes(Vec<u8>),
}

impl Value {
    pub fn type_name(&self) -> &'static str {
        match self {
            Value::Int(_) => "int",
            Value::Bytes(_) => "bytes",
        }
    }

    /// Stable byte encoding: tag byte then big-endian integer or raw bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            Value::Int(n) => {
                let mut out = vec![0u8];
                out.extend_from_slice(&n.to_be_bytes());
                out
            }
            Value::Bytes(b) => {
                let mut out = vec![1u8];
                out.extend_from_slice(b);
                out
            }
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Value> {
        match bytes.split_first()? {
            (0, rest) => Some(Value::Int(i64::from_be_bytes(rest.try_into().ok()?))),
            (1, rest) => Some(Value::Bytes(rest.to_vec())),
            _ => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(n) => write!(f, "{n}"),
            Value::Bytes(b) => match std::str::from_utf8(b) {
                Ok(s) => write!(f, "{s:?}"),
                Err(_) => write!(f, "0x{}", hex::encode(b)),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaggedValue {
    pub value: Value,
    pub tag: LabelHandle,
}

impl TaggedValue {
    pub fn public(value: Value) -> Self {
        TaggedValue { value, tag: LabelHandle::PUBLIC }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_bytes_round_trip() {
        for v in [Value::Int(-5), Value::Int(i64::MAX), Value::Bytes(vec![]), Value::Bytes(b"abc".to_vec())] {
            assert_eq!(Value::from_bytes(&v.to_bytes()), Some(v));
        }
        assert_eq!(Value::from_bytes(&[0, 1, 2]), None);
        assert_eq!(Value::from_bytes(&[9]), None);
    }
}
