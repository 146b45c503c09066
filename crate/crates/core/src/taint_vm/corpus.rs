//! Random structured programs for differential testing.
//!
//! Generated programs always terminate: loops count a private counter up to
//! a bound of at most 3, and helpers only call helpers with a higher index.
//! Every variable is initialized before any branch, so tracked and untracked
//! runs bind the same names.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use super::interp::{Host, HostError};
use super::{parse_program, Program, TaggedValue, Value};
use crate::labels::{DataLabel, LabelStore};
use crate::principals::PrincipalId;

#[derive(Clone, Debug)]
pub struct CorpusConfig {
    pub helpers: usize,
    pub vars: usize,
    pub globals: usize,
    pub statements: usize,
    pub max_nesting: usize,
    pub natives: bool,
    pub sends: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            helpers: 2,
            vars: 4,
            globals: 2,
            statements: 6,
            max_nesting: 3,
            natives: true,
            sends: true,
        }
    }
}

/// Resources a generated program may read.
pub const SOURCES: [&str; 3] = ["S0", "S1", "S2"];

/// Source text of a random program. Parsing it always succeeds.
pub fn generate_source<R: Rng + ?Sized>(rng: &mut R, config: &CorpusConfig) -> String {
    let mut g = Gen { rng, config, out: String::new(), loops: 0 };
    g.program();
    g.out
}

pub fn generate<R: Rng + ?Sized>(rng: &mut R, config: &CorpusConfig) -> Program {
    let src = generate_source(rng, config);
    parse_program(&src).unwrap_or_else(|e| panic!("generated program failed to parse: {e}\n{src}"))
}

struct Gen<'a, R: ?Sized> {
    rng: &'a mut R,
    config: &'a CorpusConfig,
    out: String,
    loops: usize,
}

struct Scope {
    vars: Vec<String>,
    // helpers this function may call
    callees: Vec<(String, usize)>,
}

impl<R: Rng + ?Sized> Gen<'_, R> {
    fn program(&mut self) {
        let globals: Vec<String> = (0..self.config.globals).map(|i| format!("g{i}")).collect();
        if !globals.is_empty() {
            self.out.push_str(&format!("global {};\n", globals.join(", ")));
        }
        let arity: Vec<usize> = (0..self.config.helpers).map(|_| self.rng.gen_range(0..=2)).collect();
        let helper = |i: usize| (format!("h{i}"), arity[i]);

        let callees = (0..self.config.helpers).map(helper).collect();
        self.function("main", &[], &globals, callees, true);
        for (i, &n) in arity.iter().enumerate() {
            let params: Vec<String> = (0..n).map(|k| format!("p{k}")).collect();
            let callees = (i + 1..self.config.helpers).map(helper).collect();
            self.function(&format!("h{i}"), &params, &globals, callees, false);
        }
    }

    fn function(&mut self, name: &str, params: &[String], globals: &[String], callees: Vec<(String, usize)>, entry: bool) {
        self.out.push_str(&format!("fn {name}({}) {{\n", params.join(", ")));
        let mut vars: Vec<String> = (0..self.config.vars).map(|i| format!("v{i}")).collect();
        let mut inits: Vec<&String> = vars.iter().collect();
        if entry {
            inits.extend(globals);
        }
        for v in inits {
            let n = self.rng.gen_range(-3..10);
            self.out.push_str(&format!("    {v} = {};\n", literal(n)));
        }
        vars.extend(params.iter().cloned());
        vars.extend(globals.iter().cloned());
        let scope = Scope { vars, callees };
        let n = self.rng.gen_range(1..=self.config.statements);
        for _ in 0..n {
            self.stmt(&scope, 1);
        }
        self.out.push_str("}\n");
    }

    fn pick<'s>(&mut self, items: &'s [String]) -> &'s str {
        items.choose(self.rng).expect("non-empty")
    }

    fn expr(&mut self, scope: &Scope, depth: usize) -> String {
        match self.rng.gen_range(0..if depth == 0 { 2 } else { 5 }) {
            0 => literal(self.rng.gen_range(-5..20)),
            1 => self.pick(&scope.vars).to_owned(),
            _ => {
                let op = ["+", "-", "*", "&", "==", "!=", "<"].choose(self.rng).unwrap();
                let l = self.expr(scope, depth - 1);
                let r = self.expr(scope, depth - 1);
                format!("({l} {op} {r})")
            }
        }
    }

    fn stmt(&mut self, scope: &Scope, nesting: usize) {
        let pad = "    ".repeat(nesting);
        let nest_ok = nesting <= self.config.max_nesting;
        loop {
            match self.rng.gen_range(0..10) {
                0..=2 => {
                    let v = self.pick(&scope.vars).to_owned();
                    let e = self.expr(scope, 2);
                    self.out.push_str(&format!("{pad}{v} = {e};\n"));
                }
                3 => {
                    let v = self.pick(&scope.vars).to_owned();
                    let s = SOURCES.choose(self.rng).unwrap();
                    self.out.push_str(&format!("{pad}{v} = resource({s});\n"));
                }
                4 if self.config.natives => {
                    let v = self.pick(&scope.vars).to_owned();
                    let a = self.expr(scope, 1);
                    let b = self.expr(scope, 1);
                    self.out.push_str(&format!("{pad}{v} = native(mix, {a}, {b});\n"));
                }
                5 if self.config.sends => {
                    let v = self.pick(&scope.vars).to_owned();
                    self.out.push_str(&format!("{pad}send(Out, {v});\n"));
                }
                6 if !scope.callees.is_empty() => {
                    let (f, arity) = scope.callees.choose(self.rng).unwrap().clone();
                    let args: Vec<String> = (0..arity).map(|_| self.expr(scope, 1)).collect();
                    self.out.push_str(&format!("{pad}call {f}({});\n", args.join(", ")));
                }
                7 | 8 if nest_ok => {
                    let c = self.expr(scope, 2);
                    self.out.push_str(&format!("{pad}if ({c}) {{\n"));
                    self.body(scope, nesting + 1);
                    if self.rng.gen_bool(0.5) {
                        self.out.push_str(&format!("{pad}}} else {{\n"));
                        self.body(scope, nesting + 1);
                    }
                    self.out.push_str(&format!("{pad}}}\n"));
                }
                9 if nest_ok => {
                    let counter = format!("k{}", self.loops);
                    self.loops += 1;
                    let bound = self.expr(scope, 1);
                    self.out.push_str(&format!("{pad}{counter} = 0;\n"));
                    self.out.push_str(&format!("{pad}while ({counter} < ({bound} & 3)) {{\n"));
                    self.body(scope, nesting + 1);
                    self.out.push_str(&format!("{pad}    {counter} = {counter} + 1;\n"));
                    self.out.push_str(&format!("{pad}}}\n"));
                }
                _ => continue,
            }
            return;
        }
    }

    fn body(&mut self, scope: &Scope, nesting: usize) {
        let n = self.rng.gen_range(1..=3);
        for _ in 0..n {
            self.stmt(scope, nesting);
        }
    }
}

fn literal(n: i64) -> String {
    if n < 0 {
        format!("(0 - {})", n.unsigned_abs())
    } else {
        n.to_string()
    }
}

/// Host for generated programs: each source yields a fixed integer under its
/// own single-owner label; sends are recorded, never refused.
#[derive(Clone, Debug)]
pub struct CorpusHost {
    pub inputs: BTreeMap<String, (i64, DataLabel)>,
    pub sent: Vec<(String, TaggedValue)>,
}

impl CorpusHost {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let inputs = SOURCES
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let owner = PrincipalId::new(100 + i as u64).expect("nonzero");
                let reader = PrincipalId::new(200).expect("nonzero");
                let label = DataLabel::new([owner], [owner, reader]).expect("has an owner").with_origin(*s);
                (s.to_string(), (rng.gen_range(-4..12), label))
            })
            .collect();
        CorpusHost { inputs, sent: Vec::new() }
    }

    pub fn set_input(&mut self, source: &str, value: i64) {
        if let Some(slot) = self.inputs.get_mut(source) {
            slot.0 = value;
        }
    }
}

impl Host for CorpusHost {
    fn resource(&mut self, name: &str, labels: &mut LabelStore) -> Result<TaggedValue, HostError> {
        let (v, l) = self.inputs.get(name).ok_or_else(|| HostError::failed("UnknownResource", name))?;
        Ok(TaggedValue { value: Value::Int(*v), tag: labels.intern(l.clone()) })
    }

    fn send(&mut self, dest: &str, value: &TaggedValue, _labels: &LabelStore) -> Result<(), HostError> {
        self.sent.push((dest.to_owned(), value.clone()));
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taint_vm::{analyze_implicit_flows, execute, execute_untracked};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generated_programs_parse_terminate_and_reprint() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let p = generate(&mut rng, &CorpusConfig::default());
            assert_eq!(parse_program(&p.to_string()).unwrap(), p);
            let mut host = CorpusHost::new(&mut rng);
            let mut labels = LabelStore::new();
            execute(&p, &analyze_implicit_flows(&p), &mut host, &mut labels).unwrap();
            execute_untracked(&p, &mut host).unwrap();
        }
    }
}
