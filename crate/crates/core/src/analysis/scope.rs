//! Flow-insensitive name resolution: a binding anywhere in a scope makes the
//! name defined throughout that scope.

use std::collections::{BTreeSet, HashSet};

use rustpython_parser::ast::{self, Expr, ExprContext, Stmt};

use super::{parse_module, ParseError};

/// Names the guest runtime provides without any import.
pub const GUEST_BUILTINS: &[&str] = &[
    "ArithmeticError", "AssertionError", "AttributeError", "BaseException",
    "BaseExceptionGroup", "BlockingIOError", "BrokenPipeError", "BufferError",
    "BytesWarning", "ChildProcessError", "ConnectionAbortedError", "ConnectionError",
    "ConnectionRefusedError", "ConnectionResetError", "DeprecationWarning", "EOFError",
    "Ellipsis", "EncodingWarning", "EnvironmentError", "Exception", "ExceptionGroup",
    "False", "FileExistsError", "FileNotFoundError", "FloatingPointError", "FutureWarning",
    "GeneratorExit", "IOError", "ImportError", "ImportWarning", "IndentationError",
    "IndexError", "InterruptedError", "IsADirectoryError", "KeyError", "KeyboardInterrupt",
    "LookupError", "MemoryError", "ModuleNotFoundError", "NameError", "None",
    "NotADirectoryError", "NotImplemented", "NotImplementedError", "OSError",
    "OverflowError", "PendingDeprecationWarning", "PermissionError", "ProcessLookupError",
    "RecursionError", "ReferenceError", "ResourceWarning", "RuntimeError", "RuntimeWarning",
    "StopAsyncIteration", "StopIteration", "SyntaxError", "SyntaxWarning", "SystemError",
    "SystemExit", "TabError", "TimeoutError", "True", "TypeError", "UnboundLocalError",
    "UnicodeDecodeError", "UnicodeEncodeError", "UnicodeError", "UnicodeTranslateError",
    "UnicodeWarning", "UserWarning", "ValueError", "Warning", "ZeroDivisionError",
    "__build_class__", "__builtins__", "__debug__", "__doc__", "__file__", "__import__",
    "__loader__", "__name__", "__package__", "__spec__", "abs", "aiter", "all", "anext",
    "any", "ascii", "bin", "bool", "breakpoint", "bytearray", "bytes", "callable", "chr",
    "classmethod", "compile", "complex", "copyright", "credits", "delattr", "dict", "dir",
    "display", "divmod", "enumerate", "eval", "exec", "exit", "filter", "float", "format",
    "frozenset", "getattr", "globals", "hasattr", "hash", "help", "hex", "id", "input",
    "int", "isinstance", "issubclass", "iter", "len", "license", "list", "locals", "map",
    "max", "memoryview", "min", "next", "object", "oct", "open", "ord", "pow", "print",
    "property", "quit", "range", "repr", "reversed", "round", "set", "setattr", "slice",
    "sorted", "staticmethod", "str", "sum", "super", "tuple", "type", "vars", "zip",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScopeKind {
    Module,
    Function,
    Class,
    Comprehension,
}

#[derive(Debug)]
struct Scope {
    kind: ScopeKind,
    parent: Option<usize>,
    bindings: HashSet<String>,
    globals: HashSet<String>,
    loads: Vec<String>,
    star_import: bool,
}

impl Scope {
    fn new(kind: ScopeKind, parent: Option<usize>) -> Self {
        Self {
            kind,
            parent,
            bindings: HashSet::new(),
            globals: HashSet::new(),
            loads: Vec::new(),
            star_import: false,
        }
    }
}

struct Builder {
    scopes: Vec<Scope>,
    cur: usize,
}

impl Builder {
    fn new() -> Self {
        Self {
            scopes: vec![Scope::new(ScopeKind::Module, None)],
            cur: 0,
        }
    }

    fn push(&mut self, kind: ScopeKind) -> usize {
        let parent = self.cur;
        self.scopes.push(Scope::new(kind, Some(parent)));
        self.cur = self.scopes.len() - 1;
        parent
    }

    fn bind(&mut self, name: &str) {
        if self.scopes[self.cur].globals.contains(name) {
            self.scopes[0].bindings.insert(name.to_string());
        } else {
            self.scopes[self.cur].bindings.insert(name.to_string());
        }
    }

    fn load(&mut self, name: &str) {
        self.scopes[self.cur].loads.push(name.to_string());
    }

    fn body(&mut self, stmts: &[Stmt]) {
        stmts.iter().for_each(|s| self.stmt(s));
    }

    fn opt(&mut self, e: &Option<Box<Expr>>) {
        if let Some(e) = e {
            self.expr(e);
        }
    }

    /// Defaults and annotations, evaluated in the defining scope.
    fn argument_exprs(&mut self, args: &ast::Arguments) {
        for a in args.posonlyargs.iter().chain(&args.args).chain(&args.kwonlyargs) {
            self.opt(&a.def.annotation);
            self.opt(&a.default);
        }
        for a in args.vararg.iter().chain(&args.kwarg) {
            self.opt(&a.annotation);
        }
    }

    fn bind_params(&mut self, args: &ast::Arguments) {
        for a in args.posonlyargs.iter().chain(&args.args).chain(&args.kwonlyargs) {
            self.bind(a.def.arg.as_str());
        }
        for a in args.vararg.iter().chain(&args.kwarg) {
            self.bind(a.arg.as_str());
        }
    }

    fn function(&mut self, args: &ast::Arguments, body: &[Stmt]) {
        self.argument_exprs(args);
        let parent = self.push(ScopeKind::Function);
        self.bind_params(args);
        self.body(body);
        self.cur = parent;
    }

    fn handlers(&mut self, hs: &[ast::ExceptHandler]) {
        for h in hs {
            let ast::ExceptHandler::ExceptHandler(h) = h;
            self.opt(&h.type_);
            if let Some(name) = &h.name {
                self.bind(name.as_str());
            }
            self.body(&h.body);
        }
    }

    fn pattern(&mut self, p: &ast::Pattern) {
        use ast::Pattern as P;
        match p {
            P::MatchValue(v) => self.expr(&v.value),
            P::MatchSingleton(_) => {}
            P::MatchStar(s) => {
                if let Some(n) = &s.name {
                    self.bind(n.as_str());
                }
            }
            P::MatchSequence(s) => s.patterns.iter().for_each(|p| self.pattern(p)),
            P::MatchMapping(m) => {
                m.keys.iter().for_each(|k| self.expr(k));
                m.patterns.iter().for_each(|p| self.pattern(p));
                if let Some(rest) = &m.rest {
                    self.bind(rest.as_str());
                }
            }
            P::MatchClass(c) => {
                self.expr(&c.cls);
                c.patterns.iter().chain(&c.kwd_patterns).for_each(|p| self.pattern(p));
            }
            P::MatchAs(a) => {
                if let Some(p) = &a.pattern {
                    self.pattern(p);
                }
                if let Some(n) = &a.name {
                    self.bind(n.as_str());
                }
            }
            P::MatchOr(o) => o.patterns.iter().for_each(|p| self.pattern(p)),
        }
    }

    fn stmt(&mut self, stmt: &Stmt) {
        match stmt {
            Stmt::FunctionDef(d) => {
                d.decorator_list.iter().for_each(|e| self.expr(e));
                self.opt(&d.returns);
                self.bind(d.name.as_str());
                self.function(&d.args, &d.body);
            }
            Stmt::AsyncFunctionDef(d) => {
                d.decorator_list.iter().for_each(|e| self.expr(e));
                self.opt(&d.returns);
                self.bind(d.name.as_str());
                self.function(&d.args, &d.body);
            }
            Stmt::ClassDef(d) => {
                d.decorator_list.iter().for_each(|e| self.expr(e));
                d.bases.iter().for_each(|e| self.expr(e));
                d.keywords.iter().for_each(|k| self.expr(&k.value));
                self.bind(d.name.as_str());
                let parent = self.push(ScopeKind::Class);
                self.body(&d.body);
                self.cur = parent;
            }
            Stmt::Return(r) => self.opt(&r.value),
            Stmt::Delete(d) => d.targets.iter().for_each(|e| self.expr(e)),
            Stmt::Assign(a) => {
                a.targets.iter().for_each(|e| self.expr(e));
                self.expr(&a.value);
            }
            Stmt::TypeAlias(t) => {
                self.expr(&t.name);
                self.expr(&t.value);
            }
            Stmt::AugAssign(a) => {
                self.expr(&a.target);
                self.expr(&a.value);
            }
            Stmt::AnnAssign(a) => {
                self.expr(&a.target);
                self.expr(&a.annotation);
                self.opt(&a.value);
            }
            Stmt::For(s) => {
                self.expr(&s.target);
                self.expr(&s.iter);
                self.body(&s.body);
                self.body(&s.orelse);
            }
            Stmt::AsyncFor(s) => {
                self.expr(&s.target);
                self.expr(&s.iter);
                self.body(&s.body);
                self.body(&s.orelse);
            }
            Stmt::While(s) => {
                self.expr(&s.test);
                self.body(&s.body);
                self.body(&s.orelse);
            }
            Stmt::If(s) => {
                self.expr(&s.test);
                self.body(&s.body);
                self.body(&s.orelse);
            }
            Stmt::With(s) => {
                for item in &s.items {
                    self.expr(&item.context_expr);
                    self.opt(&item.optional_vars);
                }
                self.body(&s.body);
            }
            Stmt::AsyncWith(s) => {
                for item in &s.items {
                    self.expr(&item.context_expr);
                    self.opt(&item.optional_vars);
                }
                self.body(&s.body);
            }
            Stmt::Match(m) => {
                self.expr(&m.subject);
                for case in &m.cases {
                    self.pattern(&case.pattern);
                    self.opt(&case.guard);
                    self.body(&case.body);
                }
            }
            Stmt::Raise(r) => {
                self.opt(&r.exc);
                self.opt(&r.cause);
            }
            Stmt::Try(t) => {
                self.body(&t.body);
                self.handlers(&t.handlers);
                self.body(&t.orelse);
                self.body(&t.finalbody);
            }
            Stmt::TryStar(t) => {
                self.body(&t.body);
                self.handlers(&t.handlers);
                self.body(&t.orelse);
                self.body(&t.finalbody);
            }
            Stmt::Assert(a) => {
                self.expr(&a.test);
                self.opt(&a.msg);
            }
            Stmt::Import(i) => {
                for alias in &i.names {
                    match &alias.asname {
                        Some(as_name) => self.bind(as_name.as_str()),
                        None => {
                            let root = alias.name.as_str().split('.').next().unwrap_or("");
                            self.bind(root);
                        }
                    }
                }
            }
            Stmt::ImportFrom(i) => {
                for alias in &i.names {
                    if alias.name.as_str() == "*" {
                        self.scopes[self.cur].star_import = true;
                    } else {
                        let name = alias.asname.as_ref().unwrap_or(&alias.name);
                        self.bind(name.as_str());
                    }
                }
            }
            Stmt::Global(g) => {
                for name in &g.names {
                    self.scopes[self.cur].globals.insert(name.to_string());
                    self.scopes[0].bindings.insert(name.to_string());
                }
            }
            Stmt::Nonlocal(n) => {
                for name in &n.names {
                    self.scopes[self.cur].bindings.insert(name.to_string());
                }
            }
            Stmt::Expr(e) => self.expr(&e.value),
            Stmt::Pass(_) | Stmt::Break(_) | Stmt::Continue(_) => {}
        }
    }

    fn comprehension(&mut self, gens: &[ast::Comprehension], elts: &[&Expr]) {
        let Some(first) = gens.first() else { return };
        self.expr(&first.iter);
        let parent = self.push(ScopeKind::Comprehension);
        for (i, g) in gens.iter().enumerate() {
            self.expr(&g.target);
            if i > 0 {
                self.expr(&g.iter);
            }
            g.ifs.iter().for_each(|e| self.expr(e));
        }
        elts.iter().for_each(|e| self.expr(e));
        self.cur = parent;
    }

    fn expr(&mut self, e: &Expr) {
        match e {
            Expr::Name(n) => match n.ctx {
                ExprContext::Store => self.bind(n.id.as_str()),
                ExprContext::Load | ExprContext::Del => self.load(n.id.as_str()),
            },
            Expr::NamedExpr(n) => {
                self.expr(&n.value);
                if let Expr::Name(target) = n.target.as_ref() {
                    // walrus binds in the nearest non-comprehension scope
                    let mut idx = self.cur;
                    while self.scopes[idx].kind == ScopeKind::Comprehension {
                        idx = self.scopes[idx].parent.unwrap_or(0);
                    }
                    self.scopes[idx].bindings.insert(target.id.to_string());
                }
            }
            Expr::Lambda(l) => {
                self.argument_exprs(&l.args);
                let parent = self.push(ScopeKind::Function);
                self.bind_params(&l.args);
                self.expr(&l.body);
                self.cur = parent;
            }
            Expr::ListComp(c) => self.comprehension(&c.generators, &[&c.elt]),
            Expr::SetComp(c) => self.comprehension(&c.generators, &[&c.elt]),
            Expr::GeneratorExp(c) => self.comprehension(&c.generators, &[&c.elt]),
            Expr::DictComp(c) => self.comprehension(&c.generators, &[&c.key, &c.value]),
            Expr::BoolOp(b) => b.values.iter().for_each(|v| self.expr(v)),
            Expr::BinOp(b) => {
                self.expr(&b.left);
                self.expr(&b.right);
            }
            Expr::UnaryOp(u) => self.expr(&u.operand),
            Expr::IfExp(i) => {
                self.expr(&i.test);
                self.expr(&i.body);
                self.expr(&i.orelse);
            }
            Expr::Dict(d) => {
                d.keys.iter().flatten().for_each(|k| self.expr(k));
                d.values.iter().for_each(|v| self.expr(v));
            }
            Expr::Set(s) => s.elts.iter().for_each(|v| self.expr(v)),
            Expr::Await(a) => self.expr(&a.value),
            Expr::Yield(y) => self.opt(&y.value),
            Expr::YieldFrom(y) => self.expr(&y.value),
            Expr::Compare(c) => {
                self.expr(&c.left);
                c.comparators.iter().for_each(|v| self.expr(v));
            }
            Expr::Call(c) => {
                self.expr(&c.func);
                c.args.iter().for_each(|v| self.expr(v));
                c.keywords.iter().for_each(|k| self.expr(&k.value));
            }
            Expr::FormattedValue(v) => {
                self.expr(&v.value);
                self.opt(&v.format_spec);
            }
            Expr::JoinedStr(j) => j.values.iter().for_each(|v| self.expr(v)),
            Expr::Constant(_) => {}
            Expr::Attribute(a) => self.expr(&a.value),
            Expr::Subscript(s) => {
                self.expr(&s.value);
                self.expr(&s.slice);
            }
            Expr::Starred(s) => self.expr(&s.value),
            Expr::List(l) => l.elts.iter().for_each(|v| self.expr(v)),
            Expr::Tuple(t) => t.elts.iter().for_each(|v| self.expr(v)),
            Expr::Slice(s) => {
                self.opt(&s.lower);
                self.opt(&s.upper);
                self.opt(&s.step);
            }
        }
    }

    fn resolves(&self, from: usize, name: &str) -> bool {
        let mut idx = Some(from);
        while let Some(i) = idx {
            let scope = &self.scopes[i];
            let visible = i == from || scope.kind != ScopeKind::Class;
            if visible && (scope.bindings.contains(name) || scope.star_import) {
                return true;
            }
            idx = scope.parent;
        }
        false
    }
}

/// Names read in `code` that no scope, `known` entry or builtin defines.
pub fn find_undefined_names(
    code: &str,
    known: &BTreeSet<String>,
) -> Result<BTreeSet<String>, ParseError> {
    let module = parse_module(code)?;
    let mut builder = Builder::new();
    builder.body(&module);
    let mut undefined = BTreeSet::new();
    for (idx, scope) in builder.scopes.iter().enumerate() {
        for name in &scope.loads {
            if known.contains(name) || GUEST_BUILTINS.contains(&name.as_str()) {
                continue;
            }
            if !builder.resolves(idx, name) {
                undefined.insert(name.clone());
            }
        }
    }
    Ok(undefined)
}

/// Top-level names bound by `code` (assignments, imports, definitions).
pub fn bound_names(code: &str) -> Result<BTreeSet<String>, ParseError> {
    let module = parse_module(code)?;
    let mut builder = Builder::new();
    builder.body(&module);
    Ok(builder.scopes[0].bindings.iter().cloned().collect())
}
