//! Static half of implicit-flow tracking.
//!
//! For each conditional or loop the analysis records the variables its
//! guard reads and every variable that either branch may write, including
//! globals written by functions reachable from the branches. The interpreter
//! folds the guard's label into that write set each time the guard is
//! evaluated, so the branch that did not run still leaves a mark.
//!
//! A conservative reachability pass decides which guards can never see
//! labeled data; those sites get no annotation.

use std::collections::{BTreeMap, BTreeSet};

use super::ast::{visit_block, Block, Program, SiteId, Stmt};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImplicitFlowAnnotation {
    pub site: SiteId,
    /// Function containing the site.
    pub function: String,
    pub guard_vars: BTreeSet<String>,
    /// Frame locals assigned in either block plus globals assigned by any
    /// function reachable from either block.
    pub write_set: BTreeSet<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Annotations {
    sites: BTreeMap<SiteId, ImplicitFlowAnnotation>,
}

impl Annotations {
    pub fn get(&self, site: SiteId) -> Option<&ImplicitFlowAnnotation> {
        self.sites.get(&site)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ImplicitFlowAnnotation> {
        self.sites.values()
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }
}

/// Annotates every site whose guard may carry a label; provably clean
/// guards are pruned.
pub fn analyze_implicit_flows(program: &Program) -> Annotations {
    let taint = TaintReach::compute(program);
    build(program, |func, guard| guard.iter().any(|v| taint.is_tainted(program, func, v)))
}

/// Annotates every site. Same runtime labels as the pruned set; used to
/// check the pruning pass.
pub fn annotate_all(program: &Program) -> Annotations {
    build(program, |_, _| true)
}

fn build(program: &Program, keep: impl Fn(&str, &BTreeSet<String>) -> bool) -> Annotations {
    let global_writes = global_write_summary(program);
    let mut sites = BTreeMap::new();
    for func in program.functions.values() {
        visit_block(&func.body, &mut |stmt| {
            let (site, cond, blocks): (_, _, Vec<&Block>) = match stmt {
                Stmt::If { site, cond, then_block, else_block } => (site, cond, vec![then_block, else_block]),
                Stmt::While { site, cond, body } => (site, cond, vec![body]),
                _ => return,
            };
            let guard_vars: BTreeSet<String> = cond.vars().into_iter().map(str::to_owned).collect();
            if !keep(&func.name, &guard_vars) {
                return;
            }
            let mut write_set = BTreeSet::new();
            for block in blocks {
                write_set.extend(block_writes(block, &global_writes));
            }
            sites.insert(
                *site,
                ImplicitFlowAnnotation {
                    site: *site,
                    function: func.name.clone(),
                    guard_vars,
                    write_set,
                },
            );
        });
    }
    Annotations { sites }
}

fn block_writes(block: &[Stmt], global_writes: &BTreeMap<&str, BTreeSet<String>>) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    visit_block(block, &mut |stmt| {
        if let Some(v) = stmt.target() {
            out.insert(v.to_owned());
        }
        if let Stmt::Call { func, .. } = stmt {
            out.extend(global_writes[func.as_str()].iter().cloned());
        }
    });
    out
}

/// Globals each function may assign, directly or through calls.
fn global_write_summary(program: &Program) -> BTreeMap<&str, BTreeSet<String>> {
    let mut direct: BTreeMap<&str, BTreeSet<String>> = BTreeMap::new();
    let mut callees: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for f in program.functions.values() {
        let d = direct.entry(&f.name).or_default();
        let c = callees.entry(&f.name).or_default();
        visit_block(&f.body, &mut |stmt| {
            if let Some(v) = stmt.target() {
                if program.is_global(v) {
                    d.insert(v.to_owned());
                }
            }
            if let Stmt::Call { func, .. } = stmt {
                c.insert(func);
            }
        });
    }
    let mut summary = direct;
    loop {
        let mut changed = false;
        for (f, cs) in &callees {
            let mut add = BTreeSet::new();
            for c in cs {
                add.extend(summary[c].iter().cloned());
            }
            let entry = summary.get_mut(f).expect("every function summarized");
            let before = entry.len();
            entry.extend(add);
            changed |= entry.len() != before;
        }
        if !changed {
            return summary;
        }
    }
}

/// Flow-insensitive over-approximation of which variables may ever hold a
/// labeled value, and which functions may run under a labeled guard.
#[derive(Debug, Default)]
struct TaintReach {
    locals: BTreeSet<(String, String)>,
    globals: BTreeSet<String>,
    tainted_context: BTreeSet<String>,
}

impl TaintReach {
    fn compute(program: &Program) -> Self {
        let mut reach = TaintReach::default();
        loop {
            let before = (reach.locals.len(), reach.globals.len(), reach.tainted_context.len());
            for f in program.functions.values() {
                let ctx = reach.tainted_context.contains(&f.name);
                reach.walk(program, &f.name, &f.body, ctx);
            }
            if before == (reach.locals.len(), reach.globals.len(), reach.tainted_context.len()) {
                return reach;
            }
        }
    }

    fn is_tainted(&self, program: &Program, func: &str, var: &str) -> bool {
        if program.is_global(var) {
            self.globals.contains(var)
        } else {
            self.locals.contains(&(func.to_owned(), var.to_owned()))
        }
    }

    fn taint(&mut self, program: &Program, func: &str, var: &str) {
        if program.is_global(var) {
            self.globals.insert(var.to_owned());
        } else {
            self.locals.insert((func.to_owned(), var.to_owned()));
        }
    }

    fn any_tainted<'a>(&self, program: &Program, func: &str, mut vars: impl Iterator<Item = &'a str>) -> bool {
        vars.any(|v| self.is_tainted(program, func, v))
    }

    fn walk(&mut self, program: &Program, func: &str, block: &[Stmt], ctx: bool) {
        for stmt in block {
            match stmt {
                Stmt::Assign { var, expr } => {
                    if ctx || self.any_tainted(program, func, expr.vars().into_iter()) {
                        self.taint(program, func, var);
                    }
                }
                Stmt::Native { var, args, .. } => {
                    if ctx || args.iter().any(|a| self.any_tainted(program, func, a.vars().into_iter())) {
                        self.taint(program, func, var);
                    }
                }
                // label sources
                Stmt::Resource { var, .. }
                | Stmt::Recv { var }
                | Stmt::Fetch { var, .. }
                | Stmt::Declassify { var, .. } => self.taint(program, func, var),
                Stmt::If { cond, then_block, else_block, .. } => {
                    let inner = ctx || self.any_tainted(program, func, cond.vars().into_iter());
                    self.walk(program, func, then_block, inner);
                    self.walk(program, func, else_block, inner);
                }
                Stmt::While { cond, body, .. } => {
                    let inner = ctx || self.any_tainted(program, func, cond.vars().into_iter());
                    self.walk(program, func, body, inner);
                }
                Stmt::Call { func: callee, args } => {
                    let params = &program.functions[callee].params;
                    for (param, arg) in params.iter().zip(args) {
                        if ctx || self.any_tainted(program, func, arg.vars().into_iter()) {
                            self.locals.insert((callee.clone(), param.clone()));
                        }
                    }
                    if ctx {
                        self.tainted_context.insert(callee.clone());
                    }
                }
                Stmt::Send { .. } | Stmt::Store { .. } => {}
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taint_vm::parse_program;

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn tainted_guard_is_annotated_with_its_write_set() {
        let p = parse_program(
            "fn main() { gps = resource(GPS); home = 7; x = false; if (gps == home) { x = true; } }",
        )
        .unwrap();
        let ann = analyze_implicit_flows(&p);
        assert_eq!(ann.len(), 1);
        let a = ann.iter().next().unwrap();
        assert_eq!(a.guard_vars, set(&["gps", "home"]));
        assert_eq!(a.write_set, set(&["x"]));
    }

    #[test]
    fn constant_guard_is_pruned() {
        let p = parse_program(
            "fn main() { g = resource(GPS); c = 0; d = c + 1; if (c == 0) { y = 2; } while (d < 3) { d = d + 1; } }",
        )
        .unwrap();
        assert!(analyze_implicit_flows(&p).is_empty());
        assert_eq!(annotate_all(&p).len(), 2);
    }

    #[test]
    fn write_set_follows_calls_to_globals() {
        let p = parse_program(
            "global z, w;
             fn main() { g = resource(GPS); if (g == 1) { call helper(); } else { y = 1; } }
             fn helper() { t = 1; call deeper(t); }
             fn deeper(v) { z = v; }
             fn unrelated() { w = 1; }",
        )
        .unwrap();
        let ann = analyze_implicit_flows(&p);
        let a = ann.iter().next().unwrap();
        // oracle: globals assigned along the call graph from the branch
        assert_eq!(a.write_set, set(&["y", "z"]));
    }

    #[test]
    fn taint_reaches_guards_through_params_globals_and_context() {
        let p = parse_program(
            "global flag;
             fn main() {
                 s = resource(Camera);
                 call setflag(s);
                 if (flag == 1) { a = 1; }
                 if (s == 2) { call under(); }
             }
             fn setflag(v) { flag = v; }
             fn under() { k = 5; if (k == 5) { b = 1; } }",
        )
        .unwrap();
        let ann = analyze_implicit_flows(&p);
        let sites: Vec<SiteId> = ann.iter().map(|a| a.site).collect();
        // all three guards may observe labeled data: `k` is assigned in a
        // function reached from a labeled branch
        assert_eq!(sites, vec![SiteId(0), SiteId(1), SiteId(2)]);
    }

    #[test]
    fn nested_and_loop_writes_are_collected() {
        let p = parse_program(
            "fn main() { s = resource(GPS); i = 0; while (i < s) { if (i == 1) { a = 1; } else { b = native(f, i); } i = i + 1; } }",
        )
        .unwrap();
        let ann = analyze_implicit_flows(&p);
        assert_eq!(ann.get(SiteId(0)).unwrap().write_set, set(&["a", "b", "i"]));
        // the inner guard reads `i`, which the outer labeled loop writes
        assert!(ann.get(SiteId(1)).is_some());
    }
}
