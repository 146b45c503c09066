use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

/// Identifies one `if` or `while` statement in a program.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SiteId(pub u32);

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "site{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Program {
    pub functions: BTreeMap<String, Function>,
    /// Names shared by every function; all other names are frame-local.
    pub globals: BTreeSet<String>,
    pub entry: String,
}

impl Program {
    pub fn function(&self, name: &str) -> Option<&Function> {
        self.functions.get(name)
    }

    pub fn is_global(&self, name: &str) -> bool {
        self.globals.contains(name)
    }

    /// Every conditional and loop site, in source order.
    pub fn sites(&self) -> Vec<(SiteId, &str)> {
        let mut out = Vec::new();
        for f in self.functions.values() {
            visit_block(&f.body, &mut |stmt| match stmt {
                Stmt::If { site, .. } | Stmt::While { site, .. } => out.push((*site, f.name.as_str())),
                _ => {}
            });
        }
        out.sort();
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Function {
    pub name: String,
    pub params: Vec<String>,
    pub body: Block,
}

pub type Block = Vec<Stmt>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Stmt {
    Assign { var: String, expr: Expr },
    If { site: SiteId, cond: Expr, then_block: Block, else_block: Block },
    While { site: SiteId, cond: Expr, body: Block },
    Send { dest: String, var: String },
    Recv { var: String },
    Call { func: String, args: Vec<Expr> },
    Resource { var: String, resource: String },
    Native { var: String, func: String, args: Vec<Expr> },
    Declassify { var: String, view: String, source: String },
    Store { node: String, key: String, var: String },
    Fetch { var: String, node: String, key: String },
}

impl Stmt {
    /// The variable this statement writes in its own frame, if any.
    pub fn target(&self) -> Option<&str> {
        match self {
            Stmt::Assign { var, .. }
            | Stmt::Recv { var }
            | Stmt::Resource { var, .. }
            | Stmt::Native { var, .. }
            | Stmt::Declassify { var, .. }
            | Stmt::Fetch { var, .. } => Some(var),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinOp {
    Eq,
    Ne,
    Lt,
    Add,
    Sub,
    Mul,
    And,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
            BinOp::Lt => "<",
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::And => "&",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Expr {
    Int(i64),
    Bytes(Vec<u8>),
    Var(String),
    Binary(BinOp, Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn binary(op: BinOp, lhs: Expr, rhs: Expr) -> Expr {
        Expr::Binary(op, Box::new(lhs), Box::new(rhs))
    }

    pub fn vars(&self) -> BTreeSet<&str> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars<'a>(&'a self, out: &mut BTreeSet<&'a str>) {
        match self {
            Expr::Var(v) => {
                out.insert(v);
            }
            Expr::Binary(_, l, r) => {
                l.collect_vars(out);
                r.collect_vars(out);
            }
            Expr::Int(_) | Expr::Bytes(_) => {}
        }
    }
}

/// Pre-order walk over every statement, including nested blocks.
pub fn visit_block<'a>(block: &'a [Stmt], f: &mut impl FnMut(&'a Stmt)) {
    for stmt in block {
        f(stmt);
        match stmt {
            Stmt::If { then_block, else_block, .. } => {
                visit_block(then_block, f);
                visit_block(else_block, f);
            }
            Stmt::While { body, .. } => visit_block(body, f),
            _ => {}
        }
    }
}

// Source rendering. Parsing the output yields an equal Program.

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Int(n) if *n < 0 => write!(f, "(0 - {})", n.unsigned_abs()),
            Expr::Int(n) => write!(f, "{n}"),
            Expr::Bytes(b) => {
                f.write_str("\"")?;
                for &c in b {
                    match c {
                        b'"' => f.write_str("\\\"")?,
                        b'\\' => f.write_str("\\\\")?,
                        0x20..=0x7e => write!(f, "{}", c as char)?,
                        _ => write!(f, "\\x{c:02x}")?,
                    }
                }
                f.write_str("\"")
            }
            Expr::Var(v) => f.write_str(v),
            Expr::Binary(op, l, r) => write!(f, "({l} {} {r})", op.symbol()),
        }
    }
}

fn write_args(f: &mut fmt::Formatter<'_>, args: &[Expr]) -> fmt::Result {
    for (i, a) in args.iter().enumerate() {
        if i > 0 {
            f.write_str(", ")?;
        }
        write!(f, "{a}")?;
    }
    Ok(())
}

fn write_block(f: &mut fmt::Formatter<'_>, block: &[Stmt], depth: usize) -> fmt::Result {
    for stmt in block {
        write_stmt(f, stmt, depth)?;
    }
    Ok(())
}

fn write_stmt(f: &mut fmt::Formatter<'_>, stmt: &Stmt, depth: usize) -> fmt::Result {
    let pad = "    ".repeat(depth);
    match stmt {
        Stmt::Assign { var, expr } => writeln!(f, "{pad}{var} = {expr};"),
        Stmt::If { cond, then_block, else_block, .. } => {
            writeln!(f, "{pad}if ({cond}) {{")?;
            write_block(f, then_block, depth + 1)?;
            if else_block.is_empty() {
                writeln!(f, "{pad}}}")
            } else {
                writeln!(f, "{pad}}} else {{")?;
                write_block(f, else_block, depth + 1)?;
                writeln!(f, "{pad}}}")
            }
        }
        Stmt::While { cond, body, .. } => {
            writeln!(f, "{pad}while ({cond}) {{")?;
            write_block(f, body, depth + 1)?;
            writeln!(f, "{pad}}}")
        }
        Stmt::Send { dest, var } => writeln!(f, "{pad}send({dest}, {var});"),
        Stmt::Recv { var } => writeln!(f, "{pad}recv({var});"),
        Stmt::Call { func, args } => {
            write!(f, "{pad}call {func}(")?;
            write_args(f, args)?;
            writeln!(f, ");")
        }
        Stmt::Resource { var, resource } => writeln!(f, "{pad}{var} = resource({resource});"),
        Stmt::Native { var, func, args } => {
            write!(f, "{pad}{var} = native({func}")?;
            for a in args {
                write!(f, ", {a}")?;
            }
            writeln!(f, ");")
        }
        Stmt::Declassify { var, view, source } => {
            writeln!(f, "{pad}{var} = declassify({view}, {source});")
        }
        Stmt::Store { node, key, var } => writeln!(f, "{pad}store({node}, {key}, {var});"),
        Stmt::Fetch { var, node, key } => writeln!(f, "{pad}{var} = fetch({node}, {key});"),
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if !self.globals.is_empty() {
            let names: Vec<&str> = self.globals.iter().map(String::as_str).collect();
            writeln!(f, "global {};", names.join(", "))?;
        }
        // entry first so site numbering survives a reparse
        let mut order: Vec<&Function> = self.functions.values().collect();
        order.sort_by_key(|func| first_site(&func.body).unwrap_or(u32::MAX));
        for func in order {
            writeln!(f, "fn {}({}) {{", func.name, func.params.join(", "))?;
            write_block(f, &func.body, 1)?;
            writeln!(f, "}}")?;
        }
        Ok(())
    }
}

fn first_site(block: &[Stmt]) -> Option<u32> {
    let mut min = None;
    visit_block(block, &mut |s| {
        if let Stmt::If { site, .. } | Stmt::While { site, .. } = s {
            min = Some(min.map_or(site.0, |m: u32| m.min(site.0)));
        }
    });
    min
}
