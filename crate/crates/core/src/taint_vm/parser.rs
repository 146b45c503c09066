//! Lexer and recursive-descent parser for the mini language.
//!
//! ```text
//! global total;
//! fn main() {
//!     gps = resource(GPS);
//!     x = false;
//!     if (gps == 42) { x = true; } else { call note(gps); }
//!     send(fitapp-backend, x);
//! }
//! fn note(v) { total = v + 1; }
//! ```
//!
//! Identifiers may contain `.` and, between letters, `-` (`gps-loc`,
//! `GPS.Neighborhood`, `alice-phone`). Write subtraction with spaces.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use super::ast::{BinOp, Block, Expr, Function, Program, SiteId, Stmt};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

fn err<T>(line: usize, message: impl Into<String>) -> Result<T, ParseError> {
    Err(ParseError { line, message: message.into() })
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Int(i64),
    Str(Vec<u8>),
    Sym(&'static str),
    Eof,
}

const SYMBOLS: [&str; 14] = ["==", "!=", "(", ")", "{", "}", ",", ";", "=", "<", "+", "-", "*", "&"];

const KEYWORDS: [&str; 15] = [
    "fn", "if", "else", "while", "global", "call", "send", "recv", "resource", "native",
    "declassify", "store", "fetch", "true", "false",
];

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '.'
}

fn lex(src: &str) -> Result<Vec<(Tok, usize)>, ParseError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    let mut line = 1;
    while i < chars.len() {
        let c = chars[i];
        if c == '\n' {
            line += 1;
            i += 1;
        } else if c.is_whitespace() {
            i += 1;
        } else if c == '/' && chars.get(i + 1) == Some(&'/') {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
        } else if c.is_ascii_digit() {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            let text: String = chars[start..i].iter().collect();
            let n = text
                .parse::<i64>()
                .or_else(|_| err(line, format!("integer literal {text} out of range")))?;
            out.push((Tok::Int(n), line));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() {
                let hyphen = chars[i] == '-' && chars.get(i + 1).is_some_and(|n| n.is_ascii_alphabetic());
                if is_ident_char(chars[i]) || hyphen {
                    i += 1;
                } else {
                    break;
                }
            }
            out.push((Tok::Ident(chars[start..i].iter().collect()), line));
        } else if c == '"' {
            let start_line = line;
            i += 1;
            let mut bytes = Vec::new();
            loop {
                match chars.get(i) {
                    None => return err(start_line, "unterminated string literal"),
                    Some('"') => {
                        i += 1;
                        break;
                    }
                    Some('\\') => {
                        match chars.get(i + 1) {
                            Some('"') => bytes.push(b'"'),
                            Some('\\') => bytes.push(b'\\'),
                            Some('n') => bytes.push(b'\n'),
                            Some('x') => {
                                let hex: String = chars.get(i + 2..i + 4).unwrap_or(&[]).iter().collect();
                                let b = u8::from_str_radix(&hex, 16)
                                    .or_else(|_| err(line, "bad \\x escape"))?;
                                bytes.push(b);
                                i += 2;
                            }
                            _ => return err(line, "unknown escape"),
                        }
                        i += 2;
                    }
                    Some('\n') => return err(start_line, "newline in string literal"),
                    Some(&ch) => {
                        let mut buf = [0u8; 4];
                        bytes.extend_from_slice(ch.encode_utf8(&mut buf).as_bytes());
                        i += 1;
                    }
                }
            }
            out.push((Tok::Str(bytes), line));
        } else {
            let rest: String = chars[i..(i + 2).min(chars.len())].iter().collect();
            let sym = SYMBOLS
                .iter()
                .find(|s| rest.starts_with(**s))
                .ok_or(ParseError { line, message: format!("unexpected character {c:?}") })?;
            i += sym.len();
            out.push((Tok::Sym(sym), line));
        }
    }
    out.push((Tok::Eof, line));
    Ok(out)
}

/// Functions, globals, call sites `(callee, line, args)`, and function lines.
type Parsed = (BTreeMap<String, Function>, BTreeSet<String>, Vec<(String, usize, usize)>, BTreeMap<String, usize>);

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    next_site: u32,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn line(&self) -> usize {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].0.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn at_sym(&self, s: &str) -> bool {
        matches!(self.peek(), Tok::Sym(x) if *x == s)
    }

    fn at_kw(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Ident(x) if x == kw)
    }

    fn expect_sym(&mut self, s: &str) -> Result<(), ParseError> {
        if self.at_sym(s) {
            self.bump();
            Ok(())
        } else {
            err(self.line(), format!("expected `{s}`, found {}", describe(self.peek())))
        }
    }

    fn expect_kw(&mut self, kw: &str) -> Result<(), ParseError> {
        if self.at_kw(kw) {
            self.bump();
            Ok(())
        } else {
            err(self.line(), format!("expected `{kw}`, found {}", describe(self.peek())))
        }
    }

    /// A variable or function name: any identifier that is not a keyword.
    fn ident(&mut self) -> Result<String, ParseError> {
        match self.peek().clone() {
            Tok::Ident(name) if !KEYWORDS.contains(&name.as_str()) => {
                self.bump();
                Ok(name)
            }
            other => err(self.line(), format!("expected identifier, found {}", describe(&other))),
        }
    }

    /// A node, resource, native, view or key name: identifier or string.
    fn name(&mut self) -> Result<String, ParseError> {
        match self.peek().clone() {
            Tok::Ident(name) => {
                self.bump();
                Ok(name)
            }
            Tok::Str(bytes) => {
                self.bump();
                String::from_utf8(bytes).or_else(|_| err(self.line(), "name is not UTF-8"))
            }
            other => err(self.line(), format!("expected name, found {}", describe(&other))),
        }
    }

    fn program(&mut self) -> Result<Parsed, ParseError> {
        let mut functions = BTreeMap::new();
        let mut globals = BTreeSet::new();
        let mut calls = Vec::new();
        let mut lines = BTreeMap::new();
        loop {
            match self.peek() {
                Tok::Eof => break,
                Tok::Ident(kw) if kw == "global" => {
                    self.bump();
                    loop {
                        let line = self.line();
                        let name = self.ident()?;
                        if !globals.insert(name.clone()) {
                            return err(line, format!("global {name} declared twice"));
                        }
                        if self.at_sym(",") {
                            self.bump();
                        } else {
                            break;
                        }
                    }
                    self.expect_sym(";")?;
                }
                Tok::Ident(kw) if kw == "fn" => {
                    let line = self.line();
                    let f = self.function(&mut calls)?;
                    if functions.contains_key(&f.name) {
                        return err(line, format!("function {} defined twice", f.name));
                    }
                    lines.insert(f.name.clone(), line);
                    functions.insert(f.name.clone(), f);
                }
                other => {
                    return err(self.line(), format!("expected `fn` or `global`, found {}", describe(other)))
                }
            }
        }
        Ok((functions, globals, calls, lines))
    }

    fn function(&mut self, calls: &mut Vec<(String, usize, usize)>) -> Result<Function, ParseError> {
        self.expect_kw("fn")?;
        let name = self.ident()?;
        self.expect_sym("(")?;
        let mut params = Vec::new();
        if !self.at_sym(")") {
            loop {
                let line = self.line();
                let p = self.ident()?;
                if params.contains(&p) {
                    return err(line, format!("duplicate parameter {p}"));
                }
                params.push(p);
                if self.at_sym(",") {
                    self.bump();
                } else {
                    break;
                }
            }
        }
        self.expect_sym(")")?;
        let body = self.block(calls)?;
        Ok(Function { name, params, body })
    }

    fn block(&mut self, calls: &mut Vec<(String, usize, usize)>) -> Result<Block, ParseError> {
        let open = self.line();
        self.expect_sym("{")?;
        let mut stmts = Vec::new();
        while !self.at_sym("}") {
            if *self.peek() == Tok::Eof {
                return err(open, "unbalanced `{`: no matching `}` before end of input");
            }
            stmts.push(self.stmt(calls)?);
        }
        self.bump();
        Ok(stmts)
    }

    fn site(&mut self) -> SiteId {
        let s = SiteId(self.next_site);
        self.next_site += 1;
        s
    }

    fn stmt(&mut self, calls: &mut Vec<(String, usize, usize)>) -> Result<Stmt, ParseError> {
        let line = self.line();
        let kw = match self.peek() {
            Tok::Ident(k) => k.clone(),
            other => return err(line, format!("expected statement, found {}", describe(other))),
        };
        match kw.as_str() {
            "if" => self.if_stmt(calls),
            "while" => {
                self.bump();
                let site = self.site();
                self.expect_sym("(")?;
                let cond = self.expr()?;
                self.expect_sym(")")?;
                let body = self.block(calls)?;
                Ok(Stmt::While { site, cond, body })
            }
            "send" => {
                self.bump();
                self.expect_sym("(")?;
                let dest = self.name()?;
                self.expect_sym(",")?;
                let var = self.ident()?;
                self.expect_sym(")")?;
                self.expect_sym(";")?;
                Ok(Stmt::Send { dest, var })
            }
            "recv" => {
                self.bump();
                self.expect_sym("(")?;
                let var = self.ident()?;
                self.expect_sym(")")?;
                self.expect_sym(";")?;
                Ok(Stmt::Recv { var })
            }
            "store" => {
                self.bump();
                self.expect_sym("(")?;
                let node = self.name()?;
                self.expect_sym(",")?;
                let key = self.name()?;
                self.expect_sym(",")?;
                let var = self.ident()?;
                self.expect_sym(")")?;
                self.expect_sym(";")?;
                Ok(Stmt::Store { node, key, var })
            }
            "call" => {
                self.bump();
                let func = self.ident()?;
                let args = self.arg_list()?;
                calls.push((func.clone(), line, args.len()));
                self.expect_sym(";")?;
                Ok(Stmt::Call { func, args })
            }
            _ => {
                let var = self.ident()?;
                self.expect_sym("=")?;
                let stmt = if self.at_kw("resource") {
                    self.bump();
                    self.expect_sym("(")?;
                    let resource = self.name()?;
                    self.expect_sym(")")?;
                    Stmt::Resource { var, resource }
                } else if self.at_kw("native") {
                    self.bump();
                    self.expect_sym("(")?;
                    let func = self.name()?;
                    let mut args = Vec::new();
                    while self.at_sym(",") {
                        self.bump();
                        args.push(self.expr()?);
                    }
                    self.expect_sym(")")?;
                    Stmt::Native { var, func, args }
                } else if self.at_kw("declassify") {
                    self.bump();
                    self.expect_sym("(")?;
                    let view = self.name()?;
                    self.expect_sym(",")?;
                    let source = self.ident()?;
                    self.expect_sym(")")?;
                    Stmt::Declassify { var, view, source }
                } else if self.at_kw("fetch") {
                    self.bump();
                    self.expect_sym("(")?;
                    let node = self.name()?;
                    self.expect_sym(",")?;
                    let key = self.name()?;
                    self.expect_sym(")")?;
                    Stmt::Fetch { var, node, key }
                } else {
                    Stmt::Assign { var, expr: self.expr()? }
                };
                self.expect_sym(";")?;
                Ok(stmt)
            }
        }
    }

    fn if_stmt(&mut self, calls: &mut Vec<(String, usize, usize)>) -> Result<Stmt, ParseError> {
        self.expect_kw("if")?;
        let site = self.site();
        self.expect_sym("(")?;
        let cond = self.expr()?;
        self.expect_sym(")")?;
        let then_block = self.block(calls)?;
        let else_block = if self.at_kw("else") {
            self.bump();
            if self.at_kw("if") {
                vec![self.if_stmt(calls)?]
            } else {
                self.block(calls)?
            }
        } else {
            Vec::new()
        };
        Ok(Stmt::If { site, cond, then_block, else_block })
    }

    fn arg_list(&mut self) -> Result<Vec<Expr>, ParseError> {
        self.expect_sym("(")?;
        let mut args = Vec::new();
        if !self.at_sym(")") {
            loop {
                args.push(self.expr()?);
                if self.at_sym(",") {
                    self.bump();
                } else {
                    break;
                }
            }
        }
        self.expect_sym(")")?;
        Ok(args)
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.additive()?;
        loop {
            let op = match self.peek() {
                Tok::Sym("==") => BinOp::Eq,
                Tok::Sym("!=") => BinOp::Ne,
                Tok::Sym("<") => BinOp::Lt,
                _ => return Ok(lhs),
            };
            self.bump();
            lhs = Expr::binary(op, lhs, self.additive()?);
        }
    }

    fn additive(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.multiplicative()?;
        loop {
            let op = match self.peek() {
                Tok::Sym("+") => BinOp::Add,
                Tok::Sym("-") => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            lhs = Expr::binary(op, lhs, self.multiplicative()?);
        }
    }

    fn multiplicative(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.primary()?;
        loop {
            let op = match self.peek() {
                Tok::Sym("*") => BinOp::Mul,
                Tok::Sym("&") => BinOp::And,
                _ => return Ok(lhs),
            };
            self.bump();
            lhs = Expr::binary(op, lhs, self.primary()?);
        }
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let line = self.line();
        match self.bump() {
            Tok::Int(n) => Ok(Expr::Int(n)),
            Tok::Str(b) => Ok(Expr::Bytes(b)),
            Tok::Ident(k) if k == "true" => Ok(Expr::Int(1)),
            Tok::Ident(k) if k == "false" => Ok(Expr::Int(0)),
            Tok::Ident(name) if !KEYWORDS.contains(&name.as_str()) => Ok(Expr::Var(name)),
            Tok::Sym("(") => {
                let e = self.expr()?;
                self.expect_sym(")")?;
                Ok(e)
            }
            other => err(line, format!("expected expression, found {}", describe(&other))),
        }
    }
}

fn describe(tok: &Tok) -> String {
    match tok {
        Tok::Ident(s) => format!("`{s}`"),
        Tok::Int(n) => format!("`{n}`"),
        Tok::Str(_) => "string literal".into(),
        Tok::Sym(s) => format!("`{s}`"),
        Tok::Eof => "end of input".into(),
    }
}

pub const ENTRY: &str = "main";

/// Parses and link-checks a program. The entry point is `main()`.
pub fn parse_program(source: &str) -> Result<Program, ParseError> {
    let toks = lex(source)?;
    let mut p = Parser { toks, pos: 0, next_site: 0 };
    let (functions, globals, calls, lines) = p.program()?;

    for (name, line, argc) in &calls {
        let Some(f) = functions.get(name) else {
            return err(*line, format!("call to undefined function {name}"));
        };
        if f.params.len() != *argc {
            return err(*line, format!("{name} expects {} arguments, got {argc}", f.params.len()));
        }
    }
    for f in functions.values() {
        for param in &f.params {
            if globals.contains(param) {
                return err(lines[&f.name], format!("parameter {param} of {} shadows a global", f.name));
            }
        }
    }
    match functions.get(ENTRY) {
        None => return err(p.line(), "no `main` function"),
        Some(f) if !f.params.is_empty() => return err(lines[ENTRY], "`main` takes no parameters"),
        Some(_) => {}
    }
    Ok(Program { functions, globals, entry: ENTRY.to_owned() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_assignment() {
        let p = parse_program("fn main(){ x = 1; }").unwrap();
        assert_eq!(
            p.functions["main"].body,
            vec![Stmt::Assign { var: "x".into(), expr: Expr::Int(1) }]
        );
    }

    #[test]
    fn unbalanced_brace_reports_line() {
        let e = parse_program("fn main() {\n  x = 1;\n  if (x) {\n    y = 2;\n").unwrap_err();
        assert_eq!(e.line, 3);
        assert!(e.message.contains("unbalanced"));
        let e = parse_program("fn main() {\n x = 1;\n}\n}\n").unwrap_err();
        assert_eq!(e.line, 4);
    }

    #[test]
    fn undefined_call_is_a_link_error() {
        let e = parse_program("fn main() {\n\n  call helper(1);\n}").unwrap_err();
        assert_eq!(e.line, 3);
        assert!(e.message.contains("undefined function helper"));
    }

    #[test]
    fn arity_and_entry_checks() {
        assert!(parse_program("fn main() { call f(1); } fn f(a, b) { }").is_err());
        assert!(parse_program("fn start() { }").is_err());
        assert!(parse_program("fn main(a) { }").is_err());
        assert!(parse_program("global g; fn main() { } fn f(g) { }").is_err());
    }

    #[test]
    fn hyphenated_names_and_precedence() {
        let p = parse_program(
            "fn main() { gps-loc = resource(GPS); x = gps-loc == 1 + 2 * 3; y = x - 1; send(alice-phone, y); }",
        )
        .unwrap();
        let body = &p.functions["main"].body;
        assert_eq!(body[0], Stmt::Resource { var: "gps-loc".into(), resource: "GPS".into() });
        assert_eq!(
            body[1],
            Stmt::Assign {
                var: "x".into(),
                expr: Expr::binary(
                    BinOp::Eq,
                    Expr::Var("gps-loc".into()),
                    Expr::binary(BinOp::Add, Expr::Int(1), Expr::binary(BinOp::Mul, Expr::Int(2), Expr::Int(3)))
                )
            }
        );
        assert_eq!(
            body[2],
            Stmt::Assign { var: "y".into(), expr: Expr::binary(BinOp::Sub, Expr::Var("x".into()), Expr::Int(1)) }
        );
        assert_eq!(body[3], Stmt::Send { dest: "alice-phone".into(), var: "y".into() });
    }

    #[test]
    fn every_statement_form() {
        let src = r#"
            global total;
            fn main() {
                g = resource(GPS);
                h = native(hash, g, "salt\x00");
                n = declassify(GPS.Neighborhood, g);
                store(geode, photo1, h);
                q = fetch(geode, photo1);
                recv(m);
                while (total < 3) { total = total + 1; }
                if (g == 1) { x = true; } else if (g == 2) { x = false; } else { call f(g); }
                send(cloud, x);
            }
            fn f(v) { total = v; }
        "#;
        let p = parse_program(src).unwrap();
        assert_eq!(p.globals, BTreeSet::from(["total".to_string()]));
        assert_eq!(p.sites().len(), 3);
        let reparsed = parse_program(&p.to_string()).unwrap();
        assert_eq!(reparsed, p);
    }

    #[test]
    fn keywords_are_not_variables() {
        assert!(parse_program("fn main() { if = 1; }").is_err());
        assert!(parse_program("fn main() { x = while; }").is_err());
    }

    #[test]
    fn comments_and_strings() {
        let p = parse_program("// header\nfn main() {\n  s = \"a\\\"b\"; // trailing\n}\n").unwrap();
        assert_eq!(
            p.functions["main"].body[0],
            Stmt::Assign { var: "s".into(), expr: Expr::Bytes(b"a\"b".to_vec()) }
        );
        assert_eq!(parse_program("fn main() {\n s = \"abc;\n}").unwrap_err().line, 2);
    }
}
