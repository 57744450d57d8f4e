//! Query representation: conjunctive queries whose free variables are
//! partitioned into input variables (bound at access time) and output
//! variables (enumerated), plus the fracture rewrite, variable dominance,
//! and the structural classification that drives the engine's guarantees.

use indexmap::{IndexMap, IndexSet};

use crate::error::{Error, Result};

pub type Var = String;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Atom {
    pub relation: String,
    pub schema: Vec<Var>,
}

impl Atom {
    pub fn contains(&self, v: &str) -> bool {
        self.schema.iter().any(|x| x == v)
    }
}

impl std::fmt::Display for Atom {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}({})", self.relation, self.schema.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub name: String,
    pub atoms: Vec<Atom>,
    pub output_vars: Vec<Var>,
    pub input_vars: Vec<Var>,
}

/// Stratum of a variable in the access-top ordering: input variables go on
/// top, then output variables, then bound variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stratum {
    Input = 0,
    Output = 1,
    Bound = 2,
}

impl Query {
    /// All variables, in order of first occurrence in the body.
    pub fn vars(&self) -> IndexSet<Var> {
        let mut s = IndexSet::new();
        for a in &self.atoms {
            for v in &a.schema {
                s.insert(v.clone());
            }
        }
        s
    }

    pub fn free_vars(&self) -> IndexSet<Var> {
        self.output_vars.iter().chain(self.input_vars.iter()).cloned().collect()
    }

    pub fn is_input(&self, v: &str) -> bool {
        self.input_vars.iter().any(|x| x == v)
    }

    pub fn is_output(&self, v: &str) -> bool {
        self.output_vars.iter().any(|x| x == v)
    }

    pub fn is_free(&self, v: &str) -> bool {
        self.is_input(v) || self.is_output(v)
    }

    pub fn stratum(&self, v: &str) -> Stratum {
        if self.is_input(v) {
            Stratum::Input
        } else if self.is_output(v) {
            Stratum::Output
        } else {
            Stratum::Bound
        }
    }

    /// Indices of the atoms containing `v`.
    pub fn atoms_of(&self, v: &str) -> IndexSet<usize> {
        self.atoms
            .iter()
            .enumerate()
            .filter(|(_, a)| a.contains(v))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn hypergraph(&self) -> Hypergraph {
        Hypergraph {
            vertices: self.vars(),
            hyperedges: self.atoms.iter().map(|a| a.schema.iter().cloned().collect()).collect(),
        }
    }

    pub fn has_repeated_symbols(&self) -> bool {
        let mut seen = IndexSet::new();
        self.atoms.iter().any(|a| !seen.insert(a.relation.clone()))
    }

    /// Structural well-formedness: disjoint head sides, head variables in
    /// the body, distinct variables within each atom schema.
    pub fn validate(&self) -> Result<()> {
        for a in &self.atoms {
            let mut seen = IndexSet::new();
            for v in &a.schema {
                if !seen.insert(v) {
                    return Err(Error::Format(format!(
                        "duplicate variable {v} in atom {a}"
                    )));
                }
            }
        }
        for v in &self.output_vars {
            if self.input_vars.contains(v) {
                return Err(Error::Format(format!(
                    "variable {v} is both input and output"
                )));
            }
        }
        let vars = self.vars();
        for v in self.output_vars.iter().chain(&self.input_vars) {
            if !vars.contains(v) {
                return Err(Error::Format(format!(
                    "head variable {v} does not occur in the body"
                )));
            }
        }
        Ok(())
    }

    /// Canonical form under variable renaming in atom order; used to compare
    /// queries up to renaming.
    pub fn canonical_form(&self) -> (Vec<(String, Vec<usize>)>, Vec<usize>, Vec<usize>) {
        let mut ids: IndexMap<&str, usize> = IndexMap::new();
        let mut atoms = Vec::new();
        for a in &self.atoms {
            let mut schema = Vec::new();
            for v in &a.schema {
                let next = ids.len();
                schema.push(*ids.entry(v).or_insert(next));
            }
            atoms.push((a.relation.clone(), schema));
        }
        let outs = self.output_vars.iter().map(|v| ids[v.as_str()]).collect();
        let ins = self.input_vars.iter().map(|v| ids[v.as_str()]).collect();
        (atoms, outs, ins)
    }
}

impl std::fmt::Display for Query {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let side = |vs: &[Var]| if vs.is_empty() { ".".to_string() } else { vs.join(",") };
        write!(
            f,
            "{}({}|{}) = {}.",
            self.name,
            side(&self.output_vars),
            side(&self.input_vars),
            self.atoms.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(", ")
        )
    }
}

#[derive(Debug, Clone)]
pub struct Hypergraph {
    pub vertices: IndexSet<Var>,
    pub hyperedges: Vec<IndexSet<Var>>,
}

/// The fracture of a query together with the bookkeeping needed to translate
/// input bindings and to audit the construction.
#[derive(Debug, Clone)]
pub struct FractureMap {
    pub fracture: Query,
    /// Original input variable -> fresh variables, one per connected
    /// component that mentions it, in order of first occurrence.
    pub renaming: IndexMap<Var, Vec<Var>>,
    /// Atom index -> connected component id (dense, by first atom).
    pub component_of: Vec<usize>,
    pub component_count: usize,
}

/// Breaks the joins on input variables: every occurrence of an input
/// variable is replaced by a fresh variable, the connected components of the
/// modified hypergraph are computed, and fresh variables stemming from the
/// same input variable are merged within each component. Input variables
/// confined to a single component keep their name, so queries with connected
/// bodies fracture to themselves.
pub fn fracture(q: &Query) -> FractureMap {
    let n = q.atoms.len();
    let mut uf = UnionFind::new(n);
    // Connect atoms sharing a non-input variable.
    let mut owner: IndexMap<&str, usize> = IndexMap::new();
    for (i, a) in q.atoms.iter().enumerate() {
        for v in &a.schema {
            if q.is_input(v) {
                continue;
            }
            match owner.get(v.as_str()) {
                Some(&j) => uf.union(i, j),
                None => {
                    owner.insert(v, i);
                }
            }
        }
    }
    // Dense component ids ordered by first atom.
    let mut comp_ids: IndexMap<usize, usize> = IndexMap::new();
    let mut component_of = Vec::with_capacity(n);
    for i in 0..n {
        let root = uf.find(i);
        let next = comp_ids.len();
        component_of.push(*comp_ids.entry(root).or_insert(next));
    }
    let component_count = comp_ids.len();

    let mut taken: IndexSet<Var> = q.vars().into_iter().collect();
    let mut renaming: IndexMap<Var, Vec<Var>> = IndexMap::new();
    // fresh name per (input var, component)
    let mut fresh: IndexMap<(Var, usize), Var> = IndexMap::new();
    for x in &q.input_vars {
        let mut comps: Vec<usize> = Vec::new();
        for (i, a) in q.atoms.iter().enumerate() {
            if a.contains(x) && !comps.contains(&component_of[i]) {
                comps.push(component_of[i]);
            }
        }
        let names: Vec<Var> = if comps.len() <= 1 {
            comps.iter().map(|_| x.clone()).collect()
        } else {
            comps
                .iter()
                .enumerate()
                .map(|(k, _)| {
                    let mut cand = format!("{x}_{}", k + 1);
                    while taken.contains(&cand) {
                        cand.push('_');
                    }
                    taken.insert(cand.clone());
                    cand
                })
                .collect()
        };
        for (c, name) in comps.iter().zip(&names) {
            fresh.insert((x.clone(), *c), name.clone());
        }
        renaming.insert(x.clone(), names);
    }

    let atoms = q
        .atoms
        .iter()
        .enumerate()
        .map(|(i, a)| Atom {
            relation: a.relation.clone(),
            schema: a
                .schema
                .iter()
                .map(|v| {
                    fresh
                        .get(&(v.clone(), component_of[i]))
                        .cloned()
                        .unwrap_or_else(|| v.clone())
                })
                .collect(),
        })
        .collect();

    let input_vars = renaming.values().flatten().cloned().collect();
    let fracture = Query {
        name: q.name.clone(),
        atoms,
        output_vars: q.output_vars.clone(),
        input_vars,
    };
    FractureMap { fracture, renaming, component_of, component_count }
}

/// True iff `b` dominates `a`: the atoms of `a` are a strict subset of the
/// atoms of `b`.
pub fn dominates(q: &Query, b: &str, a: &str) -> Result<bool> {
    let vars = q.vars();
    for v in [a, b] {
        if !vars.contains(v) {
            return Err(Error::UnknownVariable(v.to_string()));
        }
    }
    let aa = q.atoms_of(a);
    let ab = q.atoms_of(b);
    Ok(aa.is_subset(&ab) && aa.len() < ab.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StructuralFlags {
    pub hierarchical: bool,
    pub free_dominant: bool,
    pub input_dominant: bool,
    pub almost_free_dominant: bool,
    pub almost_input_dominant: bool,
}

pub fn structural_tests(q: &Query) -> StructuralFlags {
    let vars: Vec<Var> = q.vars().into_iter().collect();
    let atom_sets: IndexMap<&str, IndexSet<usize>> =
        vars.iter().map(|v| (v.as_str(), q.atoms_of(v))).collect();

    let mut hierarchical = true;
    for (i, a) in vars.iter().enumerate() {
        for b in &vars[i + 1..] {
            let sa = &atom_sets[a.as_str()];
            let sb = &atom_sets[b.as_str()];
            if !(sa.is_subset(sb) || sb.is_subset(sa) || sa.is_disjoint(sb)) {
                hierarchical = false;
            }
        }
    }

    let dominated_by = |b: &str, marker: &dyn Fn(&str) -> bool| -> IndexSet<Var> {
        let sb = &atom_sets[b];
        vars.iter()
            .filter(|a| {
                let sa = &atom_sets[a.as_str()];
                marker(a) && sa.is_subset(sb) && sa.len() < sb.len()
            })
            .cloned()
            .collect()
    };

    let dominant = |marker: &dyn Fn(&str) -> bool| -> bool {
        vars.iter().all(|b| marker(b) || dominated_by(b, marker).is_empty())
    };

    // A non-marked variable B is tolerable if, for each of its atoms, some
    // other atom of B completes a cover of all marked variables B dominates.
    let almost = |marker: &dyn Fn(&str) -> bool| -> bool {
        vars.iter().all(|b| {
            if marker(b) {
                return true;
            }
            let dom = dominated_by(b, marker);
            if dom.is_empty() {
                return true;
            }
            let atoms_b = &atom_sets[b.as_str()];
            atoms_b.iter().all(|&i| {
                atoms_b.iter().any(|&j| {
                    j != i
                        && dom.iter().all(|d| {
                            q.atoms[i].contains(d) || q.atoms[j].contains(d)
                        })
                })
            })
        })
    };

    let is_free = |v: &str| q.is_free(v);
    let is_input = |v: &str| q.is_input(v);
    let free_dominant = dominant(&is_free);
    let input_dominant = dominant(&is_input);
    StructuralFlags {
        hierarchical,
        free_dominant,
        input_dominant,
        almost_free_dominant: !free_dominant && almost(&is_free),
        almost_input_dominant: !input_dominant && almost(&is_input),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryClass {
    Cqap0,
    Cqap1,
    General,
}

impl std::fmt::Display for QueryClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            QueryClass::Cqap0 => write!(f, "CQAP0"),
            QueryClass::Cqap1 => write!(f, "CQAP1"),
            QueryClass::General => write!(f, "GENERAL"),
        }
    }
}

/// Classifies the query by the structural flags of its fracture.
pub fn classify(q: &Query) -> QueryClass {
    let f = fracture(q).fracture;
    let t = structural_tests(&f);
    if t.hierarchical && t.free_dominant && t.input_dominant {
        QueryClass::Cqap0
    } else if t.hierarchical && (t.almost_free_dominant || t.almost_input_dominant) {
        QueryClass::Cqap1
    } else {
        QueryClass::General
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect() }
    }
    fn find(&mut self, i: usize) -> usize {
        if self.parent[i] != i {
            let r = self.find(self.parent[i]);
            self.parent[i] = r;
        }
        self.parent[i]
    }
    fn union(&mut self, i: usize, j: usize) {
        let (ri, rj) = (self.find(i), self.find(j));
        if ri != rj {
            self.parent[ri.max(rj)] = ri.min(rj);
        }
    }
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

/// Parses a query of the form `Name(out,... | in,...) = R(X,Y), S(Y,Z).`
/// A `.` (or `·`) on either side of `|` denotes the empty set; `#` starts a
/// comment; whitespace is insignificant.
pub fn parse_query(text: &str) -> Result<Query> {
    Parser::new(text).query()
}

struct Parser<'a> {
    chars: Vec<char>,
    pos: usize,
    line: usize,
    col: usize,
    _src: &'a str,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Parser { chars: src.chars().collect(), pos: 0, line: 1, col: 1, _src: src }
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Parse { line: self.line, col: self.col, msg: msg.into() })
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += 1;
        if c == '\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn skip_ws(&mut self) {
        loop {
            match self.peek() {
                Some(c) if c.is_whitespace() => {
                    self.bump();
                }
                Some('#') => {
                    while let Some(c) = self.peek() {
                        if c == '\n' {
                            break;
                        }
                        self.bump();
                    }
                }
                _ => break,
            }
        }
    }

    fn expect(&mut self, c: char) -> Result<()> {
        self.skip_ws();
        match self.peek() {
            Some(x) if x == c => {
                self.bump();
                Ok(())
            }
            Some(x) => self.err(format!("expected '{c}', found '{x}'")),
            None => self.err(format!("expected '{c}', found end of input")),
        }
    }

    fn ident(&mut self) -> Result<String> {
        self.skip_ws();
        let mut s = String::new();
        match self.peek() {
            Some(c) if c.is_alphabetic() || c == '_' => {
                s.push(c);
                self.bump();
            }
            Some(c) => return self.err(format!("expected identifier, found '{c}'")),
            None => return self.err("expected identifier, found end of input"),
        }
        while let Some(c) = self.peek() {
            if c.is_alphanumeric() || c == '_' {
                s.push(c);
                self.bump();
            } else {
                break;
            }
        }
        Ok(s)
    }

    /// Comma-separated variables, or `.`/`·` for the empty list.
    fn var_list(&mut self, terminator: char) -> Result<Vec<Var>> {
        self.skip_ws();
        if matches!(self.peek(), Some('.') | Some('·')) {
            self.bump();
            return Ok(Vec::new());
        }
        if self.peek() == Some(terminator) {
            return Ok(Vec::new());
        }
        let mut vars = vec![self.ident()?];
        loop {
            self.skip_ws();
            if self.peek() == Some(',') {
                self.bump();
                vars.push(self.ident()?);
            } else {
                break;
            }
        }
        Ok(vars)
    }

    fn query(&mut self) -> Result<Query> {
        let name = self.ident()?;
        self.expect('(')?;
        let output_vars = self.var_list('|')?;
        self.expect('|')?;
        let input_vars = self.var_list(')')?;
        self.expect(')')?;
        self.expect('=')?;

        let mut atoms = Vec::new();
        loop {
            let relation = self.ident()?;
            self.expect('(')?;
            let schema = self.var_list(')')?;
            self.expect(')')?;
            if schema.is_empty() {
                return self.err(format!("atom {relation} has an empty schema"));
            }
            let mut seen = IndexSet::new();
            for v in &schema {
                if !seen.insert(v.clone()) {
                    return self.err(format!("duplicate variable {v} in atom {relation}"));
                }
            }
            atoms.push(Atom { relation, schema });
            self.skip_ws();
            match self.peek() {
                Some(',') => {
                    self.bump();
                }
                Some('.') => {
                    self.bump();
                    break;
                }
                Some(c) => return self.err(format!("expected ',' or '.', found '{c}'")),
                None => return self.err("expected ',' or '.', found end of input"),
            }
        }
        self.skip_ws();
        if self.peek().is_some() {
            return self.err("trailing input after query terminator");
        }

        let q = Query { name, atoms, output_vars, input_vars };
        let vars = q.vars();
        for v in q.output_vars.iter().chain(&q.input_vars) {
            if !vars.contains(v) {
                return self.err(format!("head variable {v} does not occur in the body"));
            }
        }
        for v in &q.output_vars {
            if q.input_vars.contains(v) {
                return self.err(format!("variable {v} is both input and output"));
            }
        }
        let mut seen = IndexSet::new();
        for v in q.output_vars.iter().chain(&q.input_vars) {
            if !seen.insert(v.clone()) {
                return self.err(format!("variable {v} repeats in the head"));
            }
        }
        Ok(q)
    }
}
