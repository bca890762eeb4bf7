//! SQL clause decomposition and canonicalization for exact-set-match
//! comparison.
//!
//! A hand-rolled recursive-descent parser covers the dataset's SELECT
//! fragment: joins, subqueries, set operators, aggregates, GROUP BY/HAVING,
//! ORDER BY, LIMIT, and WITH. Window functions and CASE are outside the v1
//! grammar and yield parse errors.
//!
//! Normalization: keywords and identifiers are case-insensitive, table
//! aliases are replaced by the referenced table names (kept only for
//! self-joins, where substitution would conflate the two sides), select-item
//! aliases are resolved in ORDER BY/GROUP BY/HAVING, unqualified columns are
//! qualified when the FROM clause has a single table, AND-chains are
//! flattened, commutative clause lists are stored sorted, and `=`/`!=`
//! operands are ordered canonically. `parse(render(x)) == x` holds for every
//! normalized clause set.

use super::MetricsError;

/// Comparison / logical / arithmetic operators kept in the tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Or,
    And,
    Eq,
    Ne,
    Lt,
    Gt,
    Le,
    Ge,
    Like,
    Add,
    Sub,
    Mul,
    Div,
    Mod,
}

impl BinOp {
    fn text(&self) -> &'static str {
        match self {
            BinOp::Or => "OR",
            BinOp::And => "AND",
            BinOp::Eq => "=",
            BinOp::Ne => "!=",
            BinOp::Lt => "<",
            BinOp::Gt => ">",
            BinOp::Le => "<=",
            BinOp::Ge => ">=",
            BinOp::Like => "LIKE",
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Mod => "%",
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            BinOp::Or => 1,
            BinOp::And => 2,
            BinOp::Eq | BinOp::Ne | BinOp::Lt | BinOp::Gt | BinOp::Le | BinOp::Ge | BinOp::Like => 4,
            BinOp::Add | BinOp::Sub => 5,
            BinOp::Mul | BinOp::Div | BinOp::Mod => 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    /// `*` as a select item or COUNT argument.
    Star,
    /// `t.*`
    QualifiedStar(String),
    Column { table: Option<String>, name: String },
    /// Canonicalized numeric literal text.
    Number(String),
    StringLit(String),
    Null,
    /// Literal erased under the value-ignoring comparison flag.
    Placeholder,
    Func { name: String, distinct: bool, args: Vec<Expr> },
    Binary { op: BinOp, left: Box<Expr>, right: Box<Expr> },
    Not(Box<Expr>),
    Neg(Box<Expr>),
    InList { expr: Box<Expr>, list: Vec<Expr>, negated: bool },
    InSubquery { expr: Box<Expr>, query: Box<SqlClauseSet>, negated: bool },
    Between { expr: Box<Expr>, low: Box<Expr>, high: Box<Expr>, negated: bool },
    IsNull { expr: Box<Expr>, negated: bool },
    Subquery(Box<SqlClauseSet>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SetOp {
    Union,
    UnionAll,
    Intersect,
    Except,
}

impl SetOp {
    fn text(&self) -> &'static str {
        match self {
            SetOp::Union => "UNION",
            SetOp::UnionAll => "UNION ALL",
            SetOp::Intersect => "INTERSECT",
            SetOp::Except => "EXCEPT",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderItem {
    pub expr: Expr,
    pub descending: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FromItem {
    Table(String),
    Subquery { query: Box<SqlClauseSet>, alias: Option<String> },
}

/// Normalized decomposition of one SELECT statement. Commutative clause
/// lists (select items, conditions, grouping) are multisets stored sorted by
/// canonical rendering; ORDER BY and set-operator parts stay ordered.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SqlClauseSet {
    pub distinct: bool,
    pub select_items: Vec<Expr>,
    pub from_tables: Vec<FromItem>,
    pub join_conditions: Vec<Expr>,
    pub where_conditions: Vec<Expr>,
    pub group_by_items: Vec<Expr>,
    pub having_conditions: Vec<Expr>,
    pub order_by_items: Vec<OrderItem>,
    pub limit_value: Option<Expr>,
    pub set_operators: Vec<(SetOp, SqlClauseSet)>,
    pub ctes: Vec<(String, SqlClauseSet)>,
}

/// Comparison settings for exact set match.
#[derive(Debug, Clone, Copy, Default)]
pub struct EmConfig {
    /// Replace every literal with a placeholder before comparison.
    pub ignore_values: bool,
}

// ---------------------------------------------------------------------------
// Lexer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum TokKind {
    Ident(String),
    Number(String),
    Str(String),
    Sym(&'static str),
}

#[derive(Debug, Clone)]
struct Tok {
    kind: TokKind,
    pos: usize,
}

fn lex(sql: &str) -> Result<Vec<Tok>, MetricsError> {
    let chars: Vec<char> = sql.chars().collect();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let pos = toks.len() + 1;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_' || chars[i] == '$') {
                i += 1;
            }
            let word: String = chars[start..i].iter().collect();
            toks.push(Tok { kind: TokKind::Ident(word.to_lowercase()), pos });
            continue;
        }
        if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                i += 1;
                if i < chars.len() && (chars[i] == '+' || chars[i] == '-') {
                    i += 1;
                }
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
            }
            let raw: String = chars[start..i].iter().collect();
            toks.push(Tok { kind: TokKind::Number(raw), pos });
            continue;
        }
        if c == '\'' {
            let mut value = String::new();
            i += 1;
            loop {
                match chars.get(i) {
                    Some('\'') if chars.get(i + 1) == Some(&'\'') => {
                        value.push('\'');
                        i += 2;
                    }
                    Some('\'') => {
                        i += 1;
                        break;
                    }
                    Some(ch) => {
                        value.push(*ch);
                        i += 1;
                    }
                    None => {
                        return Err(MetricsError::SqlParse {
                            pos,
                            message: "unterminated string literal".into(),
                        })
                    }
                }
            }
            toks.push(Tok { kind: TokKind::Str(value), pos });
            continue;
        }
        if c == '"' || c == '`' || c == '[' {
            let close = match c {
                '"' => '"',
                '`' => '`',
                _ => ']',
            };
            let start = i + 1;
            let mut j = start;
            while j < chars.len() && chars[j] != close {
                j += 1;
            }
            if j >= chars.len() {
                return Err(MetricsError::SqlParse { pos, message: "unterminated quoted identifier".into() });
            }
            let word: String = chars[start..j].iter().collect();
            toks.push(Tok { kind: TokKind::Ident(word.to_lowercase()), pos });
            i = j + 1;
            continue;
        }
        let two: Option<&'static str> = match (c, chars.get(i + 1)) {
            ('!', Some('=')) => Some("!="),
            ('<', Some('>')) => Some("!="),
            ('<', Some('=')) => Some("<="),
            ('>', Some('=')) => Some(">="),
            ('|', Some('|')) => Some("||"),
            _ => None,
        };
        if let Some(sym) = two {
            toks.push(Tok { kind: TokKind::Sym(sym), pos });
            i += 2;
            continue;
        }
        let one: Option<&'static str> = match c {
            ',' => Some(","),
            '(' => Some("("),
            ')' => Some(")"),
            '.' => Some("."),
            '*' => Some("*"),
            '=' => Some("="),
            '<' => Some("<"),
            '>' => Some(">"),
            '+' => Some("+"),
            '-' => Some("-"),
            '/' => Some("/"),
            '%' => Some("%"),
            ';' => Some(";"),
            _ => None,
        };
        match one {
            Some(sym) => {
                toks.push(Tok { kind: TokKind::Sym(sym), pos });
                i += 1;
            }
            None => {
                return Err(MetricsError::SqlParse { pos, message: format!("unexpected character `{c}`") })
            }
        }
    }
    Ok(toks)
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
}

/// Raw FROM entry before alias resolution.
struct RawFromItem {
    item: FromItem,
    alias: Option<String>,
}

struct RawSelect {
    distinct: bool,
    select_items: Vec<(Expr, Option<String>)>,
    from: Vec<RawFromItem>,
    join_conditions: Vec<Expr>,
    where_expr: Option<Expr>,
    group_by: Vec<Expr>,
    having: Option<Expr>,
}

impl Parser {
    fn new(toks: Vec<Tok>) -> Self {
        Self { toks, pos: 0 }
    }

    fn peek(&self) -> Option<&TokKind> {
        self.toks.get(self.pos).map(|t| &t.kind)
    }

    fn token_pos(&self) -> usize {
        self.toks.get(self.pos).map(|t| t.pos).unwrap_or(self.toks.len() + 1)
    }

    fn error(&self, message: impl Into<String>) -> MetricsError {
        MetricsError::SqlParse { pos: self.token_pos(), message: message.into() }
    }

    fn advance(&mut self) -> Option<TokKind> {
        let tok = self.toks.get(self.pos).map(|t| t.kind.clone());
        if tok.is_some() {
            self.pos += 1;
        }
        tok
    }

    fn at_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Some(TokKind::Ident(w)) if w == kw)
    }

    fn eat_keyword(&mut self, kw: &str) -> bool {
        if self.at_keyword(kw) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_keyword(&mut self, kw: &str) -> Result<(), MetricsError> {
        if self.eat_keyword(kw) {
            Ok(())
        } else {
            Err(self.error(format!("expected `{}`", kw.to_uppercase())))
        }
    }

    fn eat_sym(&mut self, sym: &str) -> bool {
        if matches!(self.peek(), Some(TokKind::Sym(s)) if *s == sym) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_sym(&mut self, sym: &str) -> Result<(), MetricsError> {
        if self.eat_sym(sym) {
            Ok(())
        } else {
            Err(self.error(format!("expected `{sym}`")))
        }
    }

    fn ident(&mut self) -> Result<String, MetricsError> {
        match self.peek() {
            Some(TokKind::Ident(w)) if !is_reserved(w) => {
                let w = w.clone();
                self.pos += 1;
                Ok(w)
            }
            _ => Err(self.error("expected identifier")),
        }
    }

    // query := [WITH name AS (query), ...] compound_select
    fn parse_query(&mut self) -> Result<SqlClauseSet, MetricsError> {
        let mut ctes = Vec::new();
        if self.eat_keyword("with") {
            self.eat_keyword("recursive");
            loop {
                let name = self.ident()?;
                self.expect_keyword("as")?;
                self.expect_sym("(")?;
                let query = self.parse_query()?;
                self.expect_sym(")")?;
                ctes.push((name, query));
                if !self.eat_sym(",") {
                    break;
                }
            }
        }
        let mut cs = self.parse_compound()?;
        cs.ctes = ctes;
        Ok(cs)
    }

    // compound := select_core (set_op select_core)* [ORDER BY ...] [LIMIT n]
    fn parse_compound(&mut self) -> Result<SqlClauseSet, MetricsError> {
        let first = self.parse_select_core()?;
        let mut cs = build_clause_set(first);

        loop {
            let op = if self.eat_keyword("union") {
                if self.eat_keyword("all") {
                    SetOp::UnionAll
                } else {
                    SetOp::Union
                }
            } else if self.eat_keyword("intersect") {
                SetOp::Intersect
            } else if self.eat_keyword("except") {
                SetOp::Except
            } else {
                break;
            };
            let part = self.parse_select_core()?;
            cs.set_operators.push((op, build_clause_set(part)));
        }

        if self.eat_keyword("order") {
            self.expect_keyword("by")?;
            loop {
                let expr = self.parse_expr()?;
                let descending = if self.eat_keyword("desc") {
                    true
                } else {
                    self.eat_keyword("asc");
                    false
                };
                cs.order_by_items.push(OrderItem { expr, descending });
                if !self.eat_sym(",") {
                    break;
                }
            }
        }

        if self.eat_keyword("limit") {
            let negative = self.eat_sym("-");
            match self.advance() {
                Some(TokKind::Number(raw)) => {
                    let canon = canon_number(&raw);
                    cs.limit_value =
                        Some(Expr::Number(if negative { format!("-{canon}") } else { canon }));
                }
                _ => {
                    self.pos = self.pos.saturating_sub(1);
                    return Err(self.error("expected number after LIMIT"));
                }
            }
            if self.eat_keyword("offset") {
                return Err(self.error("OFFSET is not supported"));
            }
        }

        Ok(cs)
    }

    fn parse_select_core(&mut self) -> Result<RawSelect, MetricsError> {
        self.expect_keyword("select")
            .map_err(|_| self.error("expected `SELECT` or `WITH`"))?;
        let distinct = self.eat_keyword("distinct");

        let mut select_items = Vec::new();
        loop {
            let expr = self.parse_expr()?;
            let alias = if self.eat_keyword("as") { Some(self.ident()?) } else { None };
            select_items.push((expr, alias));
            if !self.eat_sym(",") {
                break;
            }
        }

        let mut from = Vec::new();
        let mut join_conditions = Vec::new();
        if self.eat_keyword("from") {
            from.push(self.parse_from_item()?);
            loop {
                if self.eat_sym(",") {
                    from.push(self.parse_from_item()?);
                    continue;
                }
                let is_join = self.at_keyword("join")
                    || self.at_keyword("inner")
                    || self.at_keyword("left")
                    || self.at_keyword("right")
                    || self.at_keyword("cross");
                if !is_join {
                    break;
                }
                // Join kind is not retained in the clause set.
                self.eat_keyword("inner");
                self.eat_keyword("left");
                self.eat_keyword("right");
                self.eat_keyword("cross");
                self.eat_keyword("outer");
                self.expect_keyword("join")?;
                from.push(self.parse_from_item()?);
                if self.eat_keyword("on") {
                    let cond = self.parse_expr()?;
                    flatten_and(cond, &mut join_conditions);
                }
            }
        }

        let where_expr = if self.eat_keyword("where") { Some(self.parse_expr()?) } else { None };

        let mut group_by = Vec::new();
        if self.eat_keyword("group") {
            self.expect_keyword("by")?;
            loop {
                group_by.push(self.parse_expr()?);
                if !self.eat_sym(",") {
                    break;
                }
            }
        }

        let having = if self.eat_keyword("having") { Some(self.parse_expr()?) } else { None };

        Ok(RawSelect { distinct, select_items, from, join_conditions, where_expr, group_by, having })
    }

    fn parse_from_item(&mut self) -> Result<RawFromItem, MetricsError> {
        if self.eat_sym("(") {
            let query = self.parse_query()?;
            self.expect_sym(")")?;
            let alias = self.parse_alias()?;
            return Ok(RawFromItem { item: FromItem::Subquery { query: Box::new(query), alias: alias.clone() }, alias });
        }
        let name = self.ident()?;
        let alias = self.parse_alias()?;
        Ok(RawFromItem { item: FromItem::Table(name), alias })
    }

    fn parse_alias(&mut self) -> Result<Option<String>, MetricsError> {
        if self.eat_keyword("as") {
            return Ok(Some(self.ident()?));
        }
        // Bare alias: a non-reserved identifier directly after the relation.
        if let Some(TokKind::Ident(w)) = self.peek() {
            if !is_reserved(w) {
                let w = w.clone();
                self.pos += 1;
                return Ok(Some(w));
            }
        }
        Ok(None)
    }

    // Precedence climbing: OR < AND < NOT < predicate < additive < multiplicative < unary.
    fn parse_expr(&mut self) -> Result<Expr, MetricsError> {
        self.parse_or()
    }

    fn parse_or(&mut self) -> Result<Expr, MetricsError> {
        let mut left = self.parse_and()?;
        while self.eat_keyword("or") {
            let right = self.parse_and()?;
            left = Expr::Binary { op: BinOp::Or, left: Box::new(left), right: Box::new(right) };
        }
        Ok(left)
    }

    fn parse_and(&mut self) -> Result<Expr, MetricsError> {
        let mut left = self.parse_not()?;
        while self.eat_keyword("and") {
            let right = self.parse_not()?;
            left = Expr::Binary { op: BinOp::And, left: Box::new(left), right: Box::new(right) };
        }
        Ok(left)
    }

    fn parse_not(&mut self) -> Result<Expr, MetricsError> {
        if self.eat_keyword("not") {
            let inner = self.parse_not()?;
            return Ok(Expr::Not(Box::new(inner)));
        }
        self.parse_predicate()
    }

    fn parse_predicate(&mut self) -> Result<Expr, MetricsError> {
        let left = self.parse_additive()?;

        let negated = if self.at_keyword("not") {
            // NOT here only binds IN / LIKE / BETWEEN.
            let next = self.toks.get(self.pos + 1).map(|t| &t.kind);
            let binds = matches!(next, Some(TokKind::Ident(w)) if w == "in" || w == "like" || w == "between");
            if binds {
                self.pos += 1;
                true
            } else {
                false
            }
        } else {
            false
        };

        if self.eat_keyword("in") {
            self.expect_sym("(")?;
            if self.at_keyword("select") || self.at_keyword("with") {
                let query = self.parse_query()?;
                self.expect_sym(")")?;
                return Ok(Expr::InSubquery { expr: Box::new(left), query: Box::new(query), negated });
            }
            let mut list = Vec::new();
            loop {
                list.push(self.parse_expr()?);
                if !self.eat_sym(",") {
                    break;
                }
            }
            self.expect_sym(")")?;
            return Ok(Expr::InList { expr: Box::new(left), list, negated });
        }

        if self.eat_keyword("like") {
            let right = self.parse_additive()?;
            let like = Expr::Binary { op: BinOp::Like, left: Box::new(left), right: Box::new(right) };
            return Ok(if negated { Expr::Not(Box::new(like)) } else { like });
        }

        if self.eat_keyword("between") {
            let low = self.parse_additive()?;
            self.expect_keyword("and")?;
            let high = self.parse_additive()?;
            return Ok(Expr::Between {
                expr: Box::new(left),
                low: Box::new(low),
                high: Box::new(high),
                negated,
            });
        }

        if negated {
            return Err(self.error("expected IN, LIKE, or BETWEEN after NOT"));
        }

        if self.eat_keyword("is") {
            let negated = self.eat_keyword("not");
            self.expect_keyword("null")?;
            return Ok(Expr::IsNull { expr: Box::new(left), negated });
        }

        let op = match self.peek() {
            Some(TokKind::Sym("=")) => Some(BinOp::Eq),
            Some(TokKind::Sym("!=")) => Some(BinOp::Ne),
            Some(TokKind::Sym("<")) => Some(BinOp::Lt),
            Some(TokKind::Sym(">")) => Some(BinOp::Gt),
            Some(TokKind::Sym("<=")) => Some(BinOp::Le),
            Some(TokKind::Sym(">=")) => Some(BinOp::Ge),
            _ => None,
        };
        if let Some(op) = op {
            self.pos += 1;
            let right = self.parse_additive()?;
            return Ok(Expr::Binary { op, left: Box::new(left), right: Box::new(right) });
        }

        Ok(left)
    }

    fn parse_additive(&mut self) -> Result<Expr, MetricsError> {
        let mut left = self.parse_multiplicative()?;
        loop {
            let op = match self.peek() {
                Some(TokKind::Sym("+")) => BinOp::Add,
                Some(TokKind::Sym("-")) => BinOp::Sub,
                _ => break,
            };
            self.pos += 1;
            let right = self.parse_multiplicative()?;
            left = Expr::Binary { op, left: Box::new(left), right: Box::new(right) };
        }
        Ok(left)
    }

    fn parse_multiplicative(&mut self) -> Result<Expr, MetricsError> {
        let mut left = self.parse_unary()?;
        loop {
            let op = match self.peek() {
                Some(TokKind::Sym("*")) => BinOp::Mul,
                Some(TokKind::Sym("/")) => BinOp::Div,
                Some(TokKind::Sym("%")) => BinOp::Mod,
                _ => break,
            };
            self.pos += 1;
            let right = self.parse_unary()?;
            left = Expr::Binary { op, left: Box::new(left), right: Box::new(right) };
        }
        Ok(left)
    }

    fn parse_unary(&mut self) -> Result<Expr, MetricsError> {
        if self.eat_sym("-") {
            let inner = self.parse_unary()?;
            // Fold negation into numeric literals.
            if let Expr::Number(n) = &inner {
                return Ok(Expr::Number(format!("-{n}")));
            }
            return Ok(Expr::Neg(Box::new(inner)));
        }
        if self.eat_sym("+") {
            return self.parse_unary();
        }
        self.parse_primary()
    }

    fn parse_primary(&mut self) -> Result<Expr, MetricsError> {
        match self.peek().cloned() {
            Some(TokKind::Number(raw)) => {
                self.pos += 1;
                Ok(Expr::Number(canon_number(&raw)))
            }
            Some(TokKind::Str(s)) => {
                self.pos += 1;
                Ok(Expr::StringLit(s))
            }
            Some(TokKind::Sym("*")) => {
                self.pos += 1;
                Ok(Expr::Star)
            }
            Some(TokKind::Sym("(")) => {
                self.pos += 1;
                if self.at_keyword("select") || self.at_keyword("with") {
                    let query = self.parse_query()?;
                    self.expect_sym(")")?;
                    return Ok(Expr::Subquery(Box::new(query)));
                }
                let inner = self.parse_expr()?;
                self.expect_sym(")")?;
                Ok(inner)
            }
            Some(TokKind::Ident(word)) => {
                if word == "null" {
                    self.pos += 1;
                    return Ok(Expr::Null);
                }
                if word == "case" || word == "over" {
                    return Err(self.error(format!("`{}` is outside the supported grammar", word.to_uppercase())));
                }
                if is_reserved(&word) {
                    return Err(self.error(format!("unexpected keyword `{}`", word.to_uppercase())));
                }
                self.pos += 1;

                // Function call.
                if self.eat_sym("(") {
                    let distinct = self.eat_keyword("distinct");
                    let mut args = Vec::new();
                    if !self.eat_sym(")") {
                        loop {
                            if self.eat_sym("*") {
                                args.push(Expr::Star);
                            } else {
                                args.push(self.parse_expr()?);
                            }
                            if !self.eat_sym(",") {
                                break;
                            }
                        }
                        self.expect_sym(")")?;
                    }
                    if self.at_keyword("over") {
                        return Err(self.error("window functions are outside the supported grammar"));
                    }
                    return Ok(Expr::Func { name: word, distinct, args });
                }

                // Qualified column or t.*.
                if self.eat_sym(".") {
                    if self.eat_sym("*") {
                        return Ok(Expr::QualifiedStar(word));
                    }
                    let col = self.ident()?;
                    return Ok(Expr::Column { table: Some(word), name: col });
                }

                Ok(Expr::Column { table: None, name: word })
            }
            Some(other) => Err(self.error(format!("unexpected token {other:?}"))),
            None => Err(self.error("unexpected end of input")),
        }
    }
}

fn is_reserved(word: &str) -> bool {
    matches!(
        word,
        "select" | "distinct" | "from" | "where" | "group" | "by" | "having" | "order" | "limit"
            | "union" | "all" | "intersect" | "except" | "join" | "inner" | "left" | "right"
            | "outer" | "cross" | "on" | "as" | "and" | "or" | "not" | "in" | "like" | "between"
            | "is" | "null" | "asc" | "desc" | "with" | "case" | "when" | "then" | "else" | "end"
            | "offset" | "recursive"
    )
}

/// Canonical numeric text: integral values lose their fraction, leading
/// zeros collapse ("1.0" -> "1", ".5" -> "0.5").
fn canon_number(raw: &str) -> String {
    match raw.parse::<f64>() {
        Ok(v) if v == v.trunc() && v.abs() < 1e15 => format!("{}", v as i64),
        Ok(v) => format!("{v}"),
        Err(_) => raw.to_string(),
    }
}

fn flatten_and(expr: Expr, out: &mut Vec<Expr>) {
    match expr {
        Expr::Binary { op: BinOp::And, left, right } => {
            flatten_and(*left, out);
            flatten_and(*right, out);
        }
        other => out.push(other),
    }
}

fn build_clause_set(raw: RawSelect) -> SqlClauseSet {
    let mut cs = SqlClauseSet {
        distinct: raw.distinct,
        ..Default::default()
    };

    // Select-item aliases are recorded for ORDER BY/GROUP BY/HAVING
    // resolution, then dropped from the items.
    let select_aliases: Vec<(String, Expr)> = raw
        .select_items
        .iter()
        .filter_map(|(expr, alias)| alias.clone().map(|a| (a, expr.clone())))
        .collect();
    cs.select_items = raw.select_items.into_iter().map(|(expr, _)| expr).collect();

    // Table aliases -> real names; an alias is substituted only when its
    // table occurs once in FROM (self-joins keep their aliases distinct).
    let mut table_counts: std::collections::BTreeMap<String, usize> = Default::default();
    for item in &raw.from {
        if let FromItem::Table(name) = &item.item {
            *table_counts.entry(name.clone()).or_insert(0) += 1;
        }
    }
    let mut alias_map: Vec<(String, String)> = Vec::new();
    let mut single_table: Option<String> = None;
    let mut real_tables = 0usize;
    let mut has_subquery = false;
    for item in &raw.from {
        match &item.item {
            FromItem::Table(name) => {
                real_tables += 1;
                single_table = Some(name.clone());
                if let Some(alias) = &item.alias {
                    if table_counts[name] == 1 {
                        alias_map.push((alias.clone(), name.clone()));
                    }
                }
            }
            FromItem::Subquery { .. } => has_subquery = true,
        }
    }
    let single_table = if real_tables == 1 && !has_subquery { single_table } else { None };

    cs.from_tables = raw
        .from
        .into_iter()
        .map(|ri| match ri.item {
            FromItem::Table(name) => FromItem::Table(name),
            sub => sub,
        })
        .collect();

    cs.join_conditions = raw.join_conditions;
    if let Some(w) = raw.where_expr {
        flatten_and(w, &mut cs.where_conditions);
    }
    cs.group_by_items = raw.group_by;
    if let Some(h) = raw.having {
        flatten_and(h, &mut cs.having_conditions);
    }

    let env = NormalizeEnv { alias_map, select_aliases, single_table };
    normalize_scope(&mut cs, &env);
    cs
}

struct NormalizeEnv {
    alias_map: Vec<(String, String)>,
    select_aliases: Vec<(String, Expr)>,
    single_table: Option<String>,
}

impl NormalizeEnv {
    fn resolve_table(&self, name: &str) -> Option<String> {
        self.alias_map.iter().find(|(a, _)| a == name).map(|(_, t)| t.clone())
    }
}

fn normalize_scope(cs: &mut SqlClauseSet, env: &NormalizeEnv) {
    // ORDER BY / GROUP BY / HAVING may reference select aliases.
    for item in &mut cs.order_by_items {
        resolve_select_alias(&mut item.expr, env);
    }
    for item in &mut cs.group_by_items {
        resolve_select_alias(item, env);
    }
    for item in &mut cs.having_conditions {
        resolve_select_alias(item, env);
    }

    for e in cs
        .select_items
        .iter_mut()
        .chain(cs.join_conditions.iter_mut())
        .chain(cs.where_conditions.iter_mut())
        .chain(cs.group_by_items.iter_mut())
        .chain(cs.having_conditions.iter_mut())
    {
        normalize_expr(e, env);
    }
    for item in &mut cs.order_by_items {
        normalize_expr(&mut item.expr, env);
    }

    sort_multiset(&mut cs.select_items);
    cs.from_tables.sort_by(|a, b| render_from_item(a).cmp(&render_from_item(b)));
    sort_multiset(&mut cs.join_conditions);
    sort_multiset(&mut cs.where_conditions);
    sort_multiset(&mut cs.group_by_items);
    sort_multiset(&mut cs.having_conditions);
}

fn sort_multiset(items: &mut [Expr]) {
    items.sort_by_key(|e| render_expr(e, 0));
}

fn resolve_select_alias(expr: &mut Expr, env: &NormalizeEnv) {
    if let Expr::Column { table: None, name } = expr {
        if let Some((_, aliased)) = env.select_aliases.iter().find(|(a, _)| a == name) {
            *expr = aliased.clone();
        }
    }
}

fn normalize_expr(expr: &mut Expr, env: &NormalizeEnv) {
    match expr {
        Expr::Column { table, .. } => {
            if let Some(t) = table {
                if let Some(real) = env.resolve_table(t) {
                    *t = real;
                }
            } else if let Some(single) = &env.single_table {
                *table = Some(single.clone());
            }
        }
        Expr::QualifiedStar(t) => {
            if let Some(real) = env.resolve_table(t) {
                *t = real;
            }
        }
        Expr::Func { args, .. } => {
            for a in args {
                normalize_expr(a, env);
            }
        }
        Expr::Binary { op, left, right } => {
            normalize_expr(left, env);
            normalize_expr(right, env);
            // `=` and `!=` are commutative: order operands canonically.
            if matches!(op, BinOp::Eq | BinOp::Ne) && render_expr(left, 0) > render_expr(right, 0) {
                std::mem::swap(left, right);
            }
        }
        Expr::Not(inner) | Expr::Neg(inner) => normalize_expr(inner, env),
        Expr::InList { expr, list, .. } => {
            normalize_expr(expr, env);
            for e in list.iter_mut() {
                normalize_expr(e, env);
            }
            sort_multiset(list);
        }
        Expr::InSubquery { expr, .. } => {
            normalize_expr(expr, env);
            // Subqueries were normalized in their own scope at build time;
            // outer references stay as written.
        }
        Expr::Between { expr, low, high, .. } => {
            normalize_expr(expr, env);
            normalize_expr(low, env);
            normalize_expr(high, env);
        }
        Expr::IsNull { expr, .. } => normalize_expr(expr, env),
        Expr::Subquery(_) => {}
        Expr::Star | Expr::QualifiedStar(_) | Expr::Number(_) | Expr::StringLit(_) | Expr::Null
        | Expr::Placeholder => {}
    }
}

/// Replace every literal (and the LIMIT value) with a placeholder.
fn strip_values(cs: &mut SqlClauseSet) {
    fn strip_expr(e: &mut Expr) {
        match e {
            Expr::Number(_) | Expr::StringLit(_) => *e = Expr::Placeholder,
            Expr::Func { args, .. } => args.iter_mut().for_each(strip_expr),
            Expr::Binary { left, right, .. } => {
                strip_expr(left);
                strip_expr(right);
            }
            Expr::Not(inner) | Expr::Neg(inner) => strip_expr(inner),
            Expr::InList { expr, list, .. } => {
                strip_expr(expr);
                list.iter_mut().for_each(strip_expr);
            }
            Expr::InSubquery { expr, query, .. } => {
                strip_expr(expr);
                strip_values(query);
            }
            Expr::Between { expr, low, high, .. } => {
                strip_expr(expr);
                strip_expr(low);
                strip_expr(high);
            }
            Expr::IsNull { expr, .. } => strip_expr(expr),
            Expr::Subquery(q) => strip_values(q),
            Expr::Star | Expr::QualifiedStar(_) | Expr::Column { .. } | Expr::Null | Expr::Placeholder => {}
        }
    }

    cs.select_items.iter_mut().for_each(strip_expr);
    for item in &mut cs.from_tables {
        if let FromItem::Subquery { query, .. } = item {
            strip_values(query);
        }
    }
    cs.join_conditions.iter_mut().for_each(strip_expr);
    cs.where_conditions.iter_mut().for_each(strip_expr);
    cs.group_by_items.iter_mut().for_each(strip_expr);
    cs.having_conditions.iter_mut().for_each(strip_expr);
    for item in &mut cs.order_by_items {
        strip_expr(&mut item.expr);
    }
    if cs.limit_value.is_some() {
        cs.limit_value = Some(Expr::Placeholder);
    }
    for (_, part) in &mut cs.set_operators {
        strip_values(part);
    }
    for (_, cte) in &mut cs.ctes {
        strip_values(cte);
    }

    // Stripping can collapse previously distinct entries; re-sort.
    sort_multiset(&mut cs.select_items);
    sort_multiset(&mut cs.join_conditions);
    sort_multiset(&mut cs.where_conditions);
    sort_multiset(&mut cs.group_by_items);
    sort_multiset(&mut cs.having_conditions);
}

/// Parse and normalize one SELECT/WITH statement.
pub fn parse_sql_clauses(sql: &str) -> Result<SqlClauseSet, MetricsError> {
    let toks = lex(sql)?;
    if toks.is_empty() {
        return Err(MetricsError::SqlParse { pos: 1, message: "empty statement".into() });
    }
    let mut parser = Parser::new(toks);
    let cs = parser.parse_query()?;
    parser.eat_sym(";");
    if parser.peek().is_some() {
        return Err(parser.error("trailing tokens after statement"));
    }
    Ok(cs)
}

/// Exact set match: clause-set equality with multiset comparison of
/// commutative clauses. An unparseable prediction is false; an unparseable
/// gold query is a dataset error.
pub fn exact_set_match(pred_sql: &str, gold_sql: &str, config: &EmConfig) -> Result<bool, MetricsError> {
    let mut gold = parse_sql_clauses(gold_sql).map_err(|e| MetricsError::GoldUnparseable(e.to_string()))?;
    let mut pred = match parse_sql_clauses(pred_sql) {
        Ok(cs) => cs,
        Err(_) => return Ok(false),
    };
    if config.ignore_values {
        strip_values(&mut gold);
        strip_values(&mut pred);
    }
    Ok(pred == gold)
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

fn render_expr(expr: &Expr, parent_prec: u8) -> String {
    let (text, prec) = match expr {
        Expr::Star => ("*".to_string(), 8),
        Expr::QualifiedStar(t) => (format!("{t}.*"), 8),
        Expr::Column { table: Some(t), name } => (format!("{t}.{name}"), 8),
        Expr::Column { table: None, name } => (name.clone(), 8),
        Expr::Number(n) => (n.clone(), 8),
        Expr::StringLit(s) => (format!("'{}'", s.replace('\'', "''")), 8),
        Expr::Null => ("NULL".to_string(), 8),
        Expr::Placeholder => ("?".to_string(), 8),
        Expr::Func { name, distinct, args } => {
            let rendered: Vec<String> = args.iter().map(|a| render_expr(a, 0)).collect();
            let inner = if *distinct {
                format!("DISTINCT {}", rendered.join(", "))
            } else {
                rendered.join(", ")
            };
            (format!("{name}({inner})"), 8)
        }
        Expr::Binary { op, left, right } => {
            let prec = op.precedence();
            let text = format!(
                "{} {} {}",
                render_expr(left, prec),
                op.text(),
                render_expr(right, prec + 1)
            );
            (text, prec)
        }
        Expr::Not(inner) => (format!("NOT {}", render_expr(inner, 4)), 3),
        Expr::Neg(inner) => (format!("-{}", render_expr(inner, 7)), 7),
        Expr::InList { expr, list, negated } => {
            let items: Vec<String> = list.iter().map(|e| render_expr(e, 0)).collect();
            let kw = if *negated { "NOT IN" } else { "IN" };
            (format!("{} {kw} ({})", render_expr(expr, 5), items.join(", ")), 4)
        }
        Expr::InSubquery { expr, query, negated } => {
            let kw = if *negated { "NOT IN" } else { "IN" };
            (format!("{} {kw} ({})", render_expr(expr, 5), render_sql(query)), 4)
        }
        Expr::Between { expr, low, high, negated } => {
            let kw = if *negated { "NOT BETWEEN" } else { "BETWEEN" };
            (
                format!(
                    "{} {kw} {} AND {}",
                    render_expr(expr, 5),
                    render_expr(low, 5),
                    render_expr(high, 5)
                ),
                4,
            )
        }
        Expr::IsNull { expr, negated } => {
            let kw = if *negated { "IS NOT NULL" } else { "IS NULL" };
            (format!("{} {kw}", render_expr(expr, 5)), 4)
        }
        Expr::Subquery(q) => (format!("({})", render_sql(q)), 8),
    };
    if prec < parent_prec {
        format!("({text})")
    } else {
        text
    }
}

fn render_from_item(item: &FromItem) -> String {
    match item {
        FromItem::Table(name) => name.clone(),
        FromItem::Subquery { query, alias } => match alias {
            Some(a) => format!("({}) AS {a}", render_sql(query)),
            None => format!("({})", render_sql(query)),
        },
    }
}

fn render_core(cs: &SqlClauseSet) -> String {
    let mut out = String::from("SELECT ");
    if cs.distinct {
        out.push_str("DISTINCT ");
    }
    let items: Vec<String> = cs.select_items.iter().map(|e| render_expr(e, 0)).collect();
    out.push_str(&items.join(", "));

    if !cs.from_tables.is_empty() {
        out.push_str(" FROM ");
        let tables: Vec<String> = cs.from_tables.iter().map(render_from_item).collect();
        if cs.join_conditions.is_empty() {
            out.push_str(&tables.join(", "));
        } else {
            out.push_str(&tables.join(" JOIN "));
            out.push_str(" ON ");
            let conds: Vec<String> = cs.join_conditions.iter().map(|e| render_expr(e, 3)).collect();
            out.push_str(&conds.join(" AND "));
        }
    }

    if !cs.where_conditions.is_empty() {
        out.push_str(" WHERE ");
        let conds: Vec<String> = cs.where_conditions.iter().map(|e| render_expr(e, 3)).collect();
        out.push_str(&conds.join(" AND "));
    }

    if !cs.group_by_items.is_empty() {
        out.push_str(" GROUP BY ");
        let items: Vec<String> = cs.group_by_items.iter().map(|e| render_expr(e, 0)).collect();
        out.push_str(&items.join(", "));
    }

    if !cs.having_conditions.is_empty() {
        out.push_str(" HAVING ");
        let conds: Vec<String> = cs.having_conditions.iter().map(|e| render_expr(e, 3)).collect();
        out.push_str(&conds.join(" AND "));
    }

    out
}

/// Canonical SQL for a normalized clause set; reparsing it reproduces the
/// clause set exactly.
pub fn render_sql(cs: &SqlClauseSet) -> String {
    let mut out = String::new();
    if !cs.ctes.is_empty() {
        out.push_str("WITH ");
        let ctes: Vec<String> =
            cs.ctes.iter().map(|(name, q)| format!("{name} AS ({})", render_sql(q))).collect();
        out.push_str(&ctes.join(", "));
        out.push(' ');
    }

    out.push_str(&render_core(cs));
    for (op, part) in &cs.set_operators {
        out.push(' ');
        out.push_str(op.text());
        out.push(' ');
        out.push_str(&render_core(part));
    }

    if !cs.order_by_items.is_empty() {
        out.push_str(" ORDER BY ");
        let items: Vec<String> = cs
            .order_by_items
            .iter()
            .map(|o| {
                let dir = if o.descending { " DESC" } else { " ASC" };
                format!("{}{dir}", render_expr(&o.expr, 0))
            })
            .collect();
        out.push_str(&items.join(", "));
    }

    if let Some(limit) = &cs.limit_value {
        out.push_str(" LIMIT ");
        out.push_str(&render_expr(limit, 0));
    }

    out
}
