use rustpython_parser::ast::{self, Expr, Stmt};

/// Calls `f` on every expression in `stmts`, parents before children.
pub(crate) fn for_each_expr<'a>(stmts: &'a [Stmt], f: &mut impl FnMut(&'a Expr)) {
    for stmt in stmts {
        stmt_exprs(stmt, f);
    }
}

fn opt<'a>(e: &'a Option<Box<Expr>>, f: &mut impl FnMut(&'a Expr)) {
    if let Some(e) = e {
        expr(e, f);
    }
}

fn arguments<'a>(args: &'a ast::Arguments, f: &mut impl FnMut(&'a Expr)) {
    for a in args
        .posonlyargs
        .iter()
        .chain(&args.args)
        .chain(&args.kwonlyargs)
    {
        opt(&a.def.annotation, f);
        opt(&a.default, f);
    }
    for a in args.vararg.iter().chain(&args.kwarg) {
        opt(&a.annotation, f);
    }
}

fn handlers<'a>(hs: &'a [ast::ExceptHandler], f: &mut impl FnMut(&'a Expr)) {
    for h in hs {
        let ast::ExceptHandler::ExceptHandler(h) = h;
        opt(&h.type_, f);
        for_each_expr(&h.body, f);
    }
}

fn pattern<'a>(p: &'a ast::Pattern, f: &mut impl FnMut(&'a Expr)) {
    use ast::Pattern as P;
    match p {
        P::MatchValue(v) => expr(&v.value, f),
        P::MatchSingleton(_) | P::MatchStar(_) => {}
        P::MatchSequence(s) => s.patterns.iter().for_each(|p| pattern(p, f)),
        P::MatchMapping(m) => {
            m.keys.iter().for_each(|k| expr(k, f));
            m.patterns.iter().for_each(|p| pattern(p, f));
        }
        P::MatchClass(c) => {
            expr(&c.cls, f);
            c.patterns.iter().chain(&c.kwd_patterns).for_each(|p| pattern(p, f));
        }
        P::MatchAs(a) => {
            if let Some(p) = &a.pattern {
                pattern(p, f);
            }
        }
        P::MatchOr(o) => o.patterns.iter().for_each(|p| pattern(p, f)),
    }
}

fn stmt_exprs<'a>(stmt: &'a Stmt, f: &mut impl FnMut(&'a Expr)) {
    match stmt {
        Stmt::FunctionDef(d) => {
            d.decorator_list.iter().for_each(|e| expr(e, f));
            arguments(&d.args, f);
            opt(&d.returns, f);
            for_each_expr(&d.body, f);
        }
        Stmt::AsyncFunctionDef(d) => {
            d.decorator_list.iter().for_each(|e| expr(e, f));
            arguments(&d.args, f);
            opt(&d.returns, f);
            for_each_expr(&d.body, f);
        }
        Stmt::ClassDef(d) => {
            d.decorator_list.iter().for_each(|e| expr(e, f));
            d.bases.iter().for_each(|e| expr(e, f));
            d.keywords.iter().for_each(|k| expr(&k.value, f));
            for_each_expr(&d.body, f);
        }
        Stmt::Return(r) => opt(&r.value, f),
        Stmt::Delete(d) => d.targets.iter().for_each(|e| expr(e, f)),
        Stmt::Assign(a) => {
            a.targets.iter().for_each(|e| expr(e, f));
            expr(&a.value, f);
        }
        Stmt::TypeAlias(t) => {
            expr(&t.name, f);
            expr(&t.value, f);
        }
        Stmt::AugAssign(a) => {
            expr(&a.target, f);
            expr(&a.value, f);
        }
        Stmt::AnnAssign(a) => {
            expr(&a.target, f);
            expr(&a.annotation, f);
            opt(&a.value, f);
        }
        Stmt::For(s) => {
            expr(&s.target, f);
            expr(&s.iter, f);
            for_each_expr(&s.body, f);
            for_each_expr(&s.orelse, f);
        }
        Stmt::AsyncFor(s) => {
            expr(&s.target, f);
            expr(&s.iter, f);
            for_each_expr(&s.body, f);
            for_each_expr(&s.orelse, f);
        }
        Stmt::While(s) => {
            expr(&s.test, f);
            for_each_expr(&s.body, f);
            for_each_expr(&s.orelse, f);
        }
        Stmt::If(s) => {
            expr(&s.test, f);
            for_each_expr(&s.body, f);
            for_each_expr(&s.orelse, f);
        }
        Stmt::With(s) => {
            for item in &s.items {
                expr(&item.context_expr, f);
                opt(&item.optional_vars, f);
            }
            for_each_expr(&s.body, f);
        }
        Stmt::AsyncWith(s) => {
            for item in &s.items {
                expr(&item.context_expr, f);
                opt(&item.optional_vars, f);
            }
            for_each_expr(&s.body, f);
        }
        Stmt::Match(m) => {
            expr(&m.subject, f);
            for case in &m.cases {
                pattern(&case.pattern, f);
                opt(&case.guard, f);
                for_each_expr(&case.body, f);
            }
        }
        Stmt::Raise(r) => {
            opt(&r.exc, f);
            opt(&r.cause, f);
        }
        Stmt::Try(t) => {
            for_each_expr(&t.body, f);
            handlers(&t.handlers, f);
            for_each_expr(&t.orelse, f);
            for_each_expr(&t.finalbody, f);
        }
        Stmt::TryStar(t) => {
            for_each_expr(&t.body, f);
            handlers(&t.handlers, f);
            for_each_expr(&t.orelse, f);
            for_each_expr(&t.finalbody, f);
        }
        Stmt::Assert(a) => {
            expr(&a.test, f);
            opt(&a.msg, f);
        }
        Stmt::Expr(e) => expr(&e.value, f),
        Stmt::Import(_)
        | Stmt::ImportFrom(_)
        | Stmt::Global(_)
        | Stmt::Nonlocal(_)
        | Stmt::Pass(_)
        | Stmt::Break(_)
        | Stmt::Continue(_) => {}
    }
}

fn comprehensions<'a>(gens: &'a [ast::Comprehension], f: &mut impl FnMut(&'a Expr)) {
    for g in gens {
        expr(&g.target, f);
        expr(&g.iter, f);
        g.ifs.iter().for_each(|e| expr(e, f));
    }
}

fn expr<'a>(e: &'a Expr, f: &mut impl FnMut(&'a Expr)) {
    f(e);
    match e {
        Expr::BoolOp(b) => b.values.iter().for_each(|v| expr(v, f)),
        Expr::NamedExpr(n) => {
            expr(&n.target, f);
            expr(&n.value, f);
        }
        Expr::BinOp(b) => {
            expr(&b.left, f);
            expr(&b.right, f);
        }
        Expr::UnaryOp(u) => expr(&u.operand, f),
        Expr::Lambda(l) => {
            arguments(&l.args, f);
            expr(&l.body, f);
        }
        Expr::IfExp(i) => {
            expr(&i.test, f);
            expr(&i.body, f);
            expr(&i.orelse, f);
        }
        Expr::Dict(d) => {
            d.keys.iter().flatten().for_each(|k| expr(k, f));
            d.values.iter().for_each(|v| expr(v, f));
        }
        Expr::Set(s) => s.elts.iter().for_each(|v| expr(v, f)),
        Expr::ListComp(c) => {
            expr(&c.elt, f);
            comprehensions(&c.generators, f);
        }
        Expr::SetComp(c) => {
            expr(&c.elt, f);
            comprehensions(&c.generators, f);
        }
        Expr::DictComp(c) => {
            expr(&c.key, f);
            expr(&c.value, f);
            comprehensions(&c.generators, f);
        }
        Expr::GeneratorExp(c) => {
            expr(&c.elt, f);
            comprehensions(&c.generators, f);
        }
        Expr::Await(a) => expr(&a.value, f),
        Expr::Yield(y) => opt(&y.value, f),
        Expr::YieldFrom(y) => expr(&y.value, f),
        Expr::Compare(c) => {
            expr(&c.left, f);
            c.comparators.iter().for_each(|v| expr(v, f));
        }
        Expr::Call(c) => {
            expr(&c.func, f);
            c.args.iter().for_each(|v| expr(v, f));
            c.keywords.iter().for_each(|k| expr(&k.value, f));
        }
        Expr::FormattedValue(v) => {
            expr(&v.value, f);
            opt(&v.format_spec, f);
        }
        Expr::JoinedStr(j) => j.values.iter().for_each(|v| expr(v, f)),
        Expr::Constant(_) | Expr::Name(_) => {}
        Expr::Attribute(a) => expr(&a.value, f),
        Expr::Subscript(s) => {
            expr(&s.value, f);
            expr(&s.slice, f);
        }
        Expr::Starred(s) => expr(&s.value, f),
        Expr::List(l) => l.elts.iter().for_each(|v| expr(v, f)),
        Expr::Tuple(t) => t.elts.iter().for_each(|v| expr(v, f)),
        Expr::Slice(s) => {
            opt(&s.lower, f);
            opt(&s.upper, f);
            opt(&s.step, f);
        }
    }
}
