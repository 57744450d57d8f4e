//! Command-line front end: query/data/update file formats, a scripted or
//! interactive request loop, plan visualisation, and the benchmark harness.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use indexmap::{IndexMap, IndexSet};
use num_traits::ToPrimitive;
use rand::prelude::*;
use rand::rngs::StdRng;

use crate::adaptive::AdaptiveState;
use crate::engine::Engine;
use crate::enumerate::{self, AccessRequest};
use crate::error::{Error, Result};
use crate::naive;
use crate::planner::{self, VariableOrder};
use crate::prob::{possible_worlds_oracle, PProb, ProbDatabase, ProbPayload, ProbUpdate, ProbValue};
use crate::qmodel::{classify,fracture, parse_query, structural_tests, Query, Var};
use crate::store::{Relation, Tuple, Value};
use crate::{Multiplicity, Rat};

pub const VO_LIMIT_ENV: &str = "DYNCQ_VO_LIMIT";

/// String values interned to dense integers. Values are never coerced:
/// "07" and "7" are distinct.
#[derive(Debug, Default, Clone)]
pub struct Interner {
    map: IndexMap<String, Value>,
}

impl Interner {
    pub fn intern(&mut self, s: &str) -> Value {
        if let Some(&v) = self.map.get(s) {
            return v;
        }
        let v = self.map.len() as Value;
        self.map.insert(s.to_string(), v);
        v
    }
    pub fn resolve(&self, v: Value) -> &str {
        self.map
            .get_index(v as usize)
            .map(|(s, _)| s.as_str())
            .unwrap_or("?")
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "dyncq",
    about = "Incremental evaluation of conjunctive queries with input/output access patterns",
    long_about = None
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print the fracture, its structural flags, and the query class.
    Classify {
        /// Query file
        query: PathBuf,
    },
    /// Print the dynamic and static width with a witness variable order.
    Widths {
        query: PathBuf,
    },
    /// Emit the planned view trees as DOT text.
    Plan {
        query: PathBuf,
    },
    /// Build the engine, replay updates and access requests, print tuples.
    Run {
        query: PathBuf,
        /// Directory holding one <Relation>.csv per relation
        #[arg(long)]
        data: Option<PathBuf>,
        /// Script of interleaved updates and requests (default: stdin)
        #[arg(long)]
        script: Option<PathBuf>,
        /// plain | adaptive | prob
        #[arg(long, default_value = "plain")]
        mode: String,
        /// Heavy/light threshold exponent for adaptive mode (rational, e.g. 1/2)
        #[arg(long, default_value = "1/2")]
        epsilon: String,
        /// Cross-check every request against the naive recompute oracle
        #[arg(long)]
        oracle: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Synthesise databases on a size ladder and emit timing/probe CSV.
    Bench {
        query: PathBuf,
        /// Comma-separated database sizes
        #[arg(long, default_value = "1000,10000")]
        sizes: String,
        /// Comma-separated epsilon values for the adaptive mode
        #[arg(long, default_value = "0,1/2,1")]
        eps: String,
        /// uniform | zipf:<s> | onehot
        #[arg(long, default_value = "zipf:1.0")]
        generator: String,
        #[arg(long, default_value_t = 200)]
        updates: usize,
        #[arg(long, default_value_t = 50)]
        requests: usize,
        /// Comma-separated modes: plain,adaptive,lazy
        #[arg(long, default_value = "plain,adaptive,lazy")]
        modes: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_with(args: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::OracleMismatch(_) => 1,
        Error::SearchGuard { .. } | Error::WorldLimit { .. } => 3,
        _ => 2,
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match cli.command {
        Command::Classify { query } => cmd_classify(&load_query(&query)?, &mut out),
        Command::Widths { query } => cmd_widths(&load_query(&query)?, &mut out),
        Command::Plan { query } => cmd_plan(&load_query(&query)?, &mut out),
        Command::Run { query, data, script, mode, epsilon, oracle, seed } => {
            let q = load_query(&query)?;
            let script_text = match script {
                Some(p) => std::fs::read_to_string(p)?,
                None => {
                    let mut s = String::new();
                    for line in std::io::stdin().lock().lines() {
                        s.push_str(&line?);
                        s.push('\n');
                    }
                    s
                }
            };
            let mode = parse_mode(&mode, &epsilon)?;
            cmd_run(&q, data.as_deref(), &script_text, mode, oracle, seed, &mut out)
        }
        Command::Bench { query, sizes, eps, generator, updates, requests, modes, seed } => {
            let q = load_query(&query)?;
            let sizes = parse_usize_list(&sizes)?;
            let eps: Vec<Rat> = eps
                .split(',')
                .map(|s| parse_rational(s.trim()))
                .collect::<Result<_>>()?;
            let generator = parse_generator(&generator)?;
            let modes: Vec<String> =
                modes.split(',').map(|s| s.trim().to_string()).collect();
            cmd_bench(
                &q, &sizes, &eps, &generator, updates, requests, &modes, seed, &mut out,
            )
        }
    }
}

pub fn load_query(path: &Path) -> Result<Query> {
    let text = std::fs::read_to_string(path)?;
    let q = parse_query(&text)?;
    q.validate()?;
    Ok(q)
}

pub fn vo_limit() -> usize {
    std::env::var(VO_LIMIT_ENV)
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(planner::DEFAULT_VAR_LIMIT)
}

// ---------------------------------------------------------------------------
// classify / widths / plan
// ---------------------------------------------------------------------------

pub fn cmd_classify(q: &Query, out: &mut impl Write) -> Result<()> {
    let f = fracture(q);
    let flags = structural_tests(&f.fracture);
    writeln!(out, "query: {q}")?;
    writeln!(out, "fracture: {}", f.fracture)?;
    writeln!(out, "components: {}", f.component_count)?;
    writeln!(out, "hierarchical: {}", flags.hierarchical)?;
    writeln!(out, "free_dominant: {}", flags.free_dominant)?;
    writeln!(out, "input_dominant: {}", flags.input_dominant)?;
    writeln!(out, "almost_free_dominant: {}", flags.almost_free_dominant)?;
    writeln!(out, "almost_input_dominant: {}", flags.almost_input_dominant)?;
    writeln!(out, "class: {}", classify(q))?;
    Ok(())
}

pub fn cmd_widths(q: &Query, out: &mut impl Write) -> Result<()> {
    let (widths, vo) = planner::query_widths_with_limit(q, vo_limit())?;
    writeln!(out, "{widths}")?;
    writeln!(out, "vo: {vo}")?;
    Ok(())
}

pub fn cmd_plan(q: &Query, out: &mut impl Write) -> Result<()> {
    let engine: Engine<Multiplicity> = Engine::build_with_limit(q, vo_limit())?;
    writeln!(out, "{}", plan_dot(&engine))?;
    Ok(())
}

pub fn plan_dot<P: crate::payload::Payload>(engine: &Engine<P>) -> String {
    let mut s = String::from("digraph plan {\n  node [shape=box];\n");
    for (ti, tree) in engine.forest.iter().enumerate() {
        for (ni, node) in tree.nodes.iter().enumerate() {
            s.push_str(&format!("  t{ti}_n{ni} [label=\"{}\"];\n", node.label));
        }
        for (ni, node) in tree.nodes.iter().enumerate() {
            for &c in &node.children {
                s.push_str(&format!("  t{ti}_n{ni} -> t{ti}_n{c};\n"));
            }
        }
    }
    s.push('}');
    s
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum Mode {
    Plain,
    Adaptive(Rat),
    Prob,
}

pub fn parse_mode(mode: &str, epsilon: &str) -> Result<Mode> {
    match mode {
        "plain" => Ok(Mode::Plain),
        "adaptive" => Ok(Mode::Adaptive(parse_rational(epsilon)?)),
        "prob" => Ok(Mode::Prob),
        other => Err(Error::Format(format!("unknown mode {other}"))),
    }
}

pub fn parse_rational(s: &str) -> Result<Rat> {
    let s = s.trim();
    if let Some((n, d)) = s.split_once('/') {
        let n: i64 = n.trim().parse().map_err(|_| bad_rat(s))?;
        let d: i64 = d.trim().parse().map_err(|_| bad_rat(s))?;
        if d == 0 {
            return Err(bad_rat(s));
        }
        return Ok(Rat::new(n.into(), d.into()));
    }
    if let Some((i, frac)) = s.split_once('.') {
        let i = if i.is_empty() { 0 } else { i.parse::<i64>().map_err(|_| bad_rat(s))? };
        if frac.is_empty() || !frac.chars().all(|c| c.is_ascii_digit()) {
            return Err(bad_rat(s));
        }
        let denom = 10i64.checked_pow(frac.len() as u32).ok_or_else(|| bad_rat(s))?;
        let f: i64 = frac.parse().map_err(|_| bad_rat(s))?;
        let sign = if s.starts_with('-') { -1 } else { 1 };
        return Ok(Rat::new((i.abs() * denom * sign + f * sign).into(), denom.into()));
    }
    let n: i64 = s.parse().map_err(|_| bad_rat(s))?;
    Ok(Rat::from_integer(n.into()))
}

fn bad_rat(s: &str) -> Error {
    Error::Format(format!("cannot parse rational {s:?}"))
}

/// One parsed script line.
#[derive(Debug, Clone)]
pub enum ScriptLine {
    /// relation, raw values, multiplicity
    Update(String, Vec<String>, i64),
    /// relation, raw values, probability token
    ProbUpdate(String, Vec<String>, ProbUpdate),
    /// bindings, limit
    Request(Vec<(Var, String)>, Option<usize>),
}

pub fn parse_script(text: &str) -> Result<Vec<ScriptLine>> {
    let mut out = Vec::new();
    for (lno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        out.push(parse_script_line(line).map_err(|e| {
            Error::Format(format!("script line {}: {e}", lno + 1))
        })?);
    }
    Ok(out)
}

fn parse_script_line(line: &str) -> Result<ScriptLine> {
    if let Some(rest) = line.strip_prefix('?') {
        let mut bindings = Vec::new();
        let mut limit = None;
        let mut body = rest.trim();
        if let Some(idx) = body.find(" limit ") {
            limit = Some(
                body[idx + 7..]
                    .trim()
                    .parse()
                    .map_err(|_| Error::Format("bad limit".into()))?,
            );
            body = body[..idx].trim();
        }
        if !body.is_empty() {
            for part in body.split(',') {
                let (var, val) = part
                    .split_once('=')
                    .ok_or_else(|| Error::Format(format!("bad binding {part:?}")))?;
                bindings.push((var.trim().to_string(), val.trim().to_string()));
            }
        }
        return Ok(ScriptLine::Request(bindings, limit));
    }
    let (sign, rest) = match line.chars().next() {
        Some('+') => (Some(1i64), &line[1..]),
        Some('-') => (Some(-1i64), &line[1..]),
        _ => (None, line),
    };
    let rest = rest.trim();
    let (rel, tail) = rest
        .split_once(char::is_whitespace)
        .ok_or_else(|| Error::Format(format!("bad update {line:?}")))?;
    let tail = tail.trim();
    // optional trailing `*m` or `@p+` marker
    let (vals_str, marker) = match tail.rsplit_once(char::is_whitespace) {
        Some((v, m)) if m.starts_with('*') || m.starts_with('@') => (v, Some(m)),
        _ => (tail, None),
    };
    let values: Vec<String> =
        vals_str.split(',').map(|s| s.trim().to_string()).collect();
    if values.iter().any(|v| v.is_empty()) {
        return Err(Error::Format(format!("bad tuple in {line:?}")));
    }
    match (sign, marker) {
        (Some(m), None) => Ok(ScriptLine::Update(rel.to_string(), values, m)),
        (None, Some(m)) if m.starts_with('*') => {
            let mult: i64 = m[1..]
                .parse()
                .map_err(|_| Error::Format(format!("bad multiplicity {m:?}")))?;
            Ok(ScriptLine::Update(rel.to_string(), values, mult))
        }
        (None, Some(m)) if m.starts_with('@') => {
            let tok = &m[1..];
            let (mag, pol) = tok
                .split_at_checked(tok.len() - 1)
                .ok_or_else(|| Error::Format(format!("bad probability {m:?}")))?;
            let p = parse_rational(mag)?;
            let u = match pol {
                "+" => ProbUpdate::Uncertain(PProb::positive(p)),
                "-" => ProbUpdate::Uncertain(PProb::negative(p)),
                _ => return Err(Error::Format(format!("bad polarity in {m:?}"))),
            };
            Ok(ScriptLine::ProbUpdate(rel.to_string(), values, u))
        }
        _ => Err(Error::Format(format!("bad update {line:?}"))),
    }
}

/// Loaded CSV data: raw string tuples with either a multiplicity or a
/// probability token per row.
#[derive(Debug)]
pub enum CsvPayload {
    Mult(i64),
    Prob(PProb),
    CertainProb(i64),
}

pub fn load_csv_dir(
    q: &Query,
    dir: &Path,
) -> Result<IndexMap<String, Vec<(Vec<String>, CsvPayload)>>> {
    let mut out = IndexMap::new();
    let mut names: IndexSet<String> = IndexSet::new();
    for a in &q.atoms {
        names.insert(a.relation.clone());
    }
    for name in names {
        let path = dir.join(format!("{name}.csv"));
        let mut rows = Vec::new();
        if !path.exists() {
            eprintln!("warning: {} not found; {name} starts empty", path.display());
        }
        if path.exists() {
            let text = std::fs::read_to_string(&path)?;
            let mut lines = text.lines();
            let Some(header) = lines.next() else {
                out.insert(name, rows);
                continue;
            };
            let cols: Vec<&str> = header.split(',').map(|s| s.trim()).collect();
            let (arity, payload_col) = match cols.last() {
                Some(&"__m") => (cols.len() - 1, Some(false)),
                Some(&"__p") => (cols.len() - 1, Some(true)),
                _ => (cols.len(), None),
            };
            for (lno, line) in lines.enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let fields: Vec<&str> = line.split(',').map(|s| s.trim()).collect();
                let expect = arity + usize::from(payload_col.is_some());
                if fields.len() != expect {
                    return Err(Error::Format(format!(
                        "{}: row {} has {} fields, expected {expect}",
                        path.display(),
                        lno + 2,
                        fields.len()
                    )));
                }
                let vals: Vec<String> =
                    fields[..arity].iter().map(|s| s.to_string()).collect();
                let payload = match payload_col {
                    None => CsvPayload::Mult(1),
                    Some(false) => CsvPayload::Mult(
                        fields[arity]
                            .parse()
                            .map_err(|_| Error::Format("bad __m value".into()))?,
                    ),
                    Some(true) => {
                        let tok = fields[arity];
                        match parse_prob_token(tok)? {
                            ProbUpdate::Uncertain(p) => CsvPayload::Prob(p),
                            ProbUpdate::Certain(m) => CsvPayload::CertainProb(m),
                        }
                    }
                };
                rows.push((vals, payload));
            }
        }
        out.insert(name, rows);
    }
    Ok(out)
}

fn parse_prob_token(tok: &str) -> Result<ProbUpdate> {
    if let Some(m) = tok.strip_prefix('*') {
        return Ok(ProbUpdate::Certain(
            m.parse().map_err(|_| Error::Format(format!("bad token {tok:?}")))?,
        ));
    }
    let (mag, pol) = tok
        .split_at_checked(tok.len().saturating_sub(1))
        .ok_or_else(|| Error::Format(format!("bad token {tok:?}")))?;
    let p = parse_rational(mag)?;
    match pol {
        "+" => Ok(ProbUpdate::Uncertain(PProb::positive(p))),
        "-" => Ok(ProbUpdate::Uncertain(PProb::negative(p))),
        _ => Err(Error::Format(format!("bad polarity in {tok:?}"))),
    }
}

enum SessionEngine {
    Plain(Engine<Multiplicity>),
    Adaptive(AdaptiveState),
    Prob(Engine<ProbPayload>),
}

/// Builds the engine for the chosen mode, replays the script, and prints
/// one tab-separated line per yielded tuple: request id, values, and in
/// probabilistic mode the tuple's probability.
pub fn cmd_run(
    q: &Query,
    data: Option<&Path>,
    script_text: &str,
    mode: Mode,
    oracle: bool,
    _seed: u64,
    out: &mut impl Write,
) -> Result<()> {
    let mut interner = Interner::default();
    let script = parse_script(script_text)?;
    let rows = match data {
        Some(dir) => load_csv_dir(q, dir)?,
        None => IndexMap::new(),
    };

    let mut engine = match &mode {
        Mode::Plain => {
            let mut e: Engine<Multiplicity> = Engine::build_with_limit(q, vo_limit())?;
            for (name, rows) in &rows {
                for (vals, payload) in rows {
                    let t: Tuple = vals.iter().map(|v| interner.intern(v)).collect();
                    let m = match payload {
                        CsvPayload::Mult(m) => *m,
                        _ => return Err(Error::Format(
                            "probability payloads need --mode prob".into(),
                        )),
                    };
                    e.load(name, &t, m)?;
                }
            }
            e.materialize();
            SessionEngine::Plain(e)
        }
        Mode::Adaptive(eps)
            if crate::qmodel::structural_tests(&fracture(q).fracture).hierarchical =>
        {
            let mut s = AdaptiveState::build(q, eps)?;
            for (name, rows) in &rows {
                for (vals, payload) in rows {
                    let t: Tuple = vals.iter().map(|v| interner.intern(v)).collect();
                    let m = match payload {
                        CsvPayload::Mult(m) => *m,
                        _ => return Err(Error::Format(
                            "probability payloads need --mode prob".into(),
                        )),
                    };
                    s.load(name, &t, m)?;
                }
            }
            s.materialize();
            SessionEngine::Adaptive(s)
        }
        Mode::Adaptive(_) => {
            eprintln!(
                "warning: fracture is not hierarchical; falling back to the plain engine"
            );
            let mut e: Engine<Multiplicity> = Engine::build_with_limit(q, vo_limit())?;
            for (name, rows) in &rows {
                for (vals, payload) in rows {
                    let t: Tuple = vals.iter().map(|v| interner.intern(v)).collect();
                    let m = match payload {
                        CsvPayload::Mult(m) => *m,
                        _ => return Err(Error::Format(
                            "probability payloads need --mode prob".into(),
                        )),
                    };
                    e.load(name, &t, m)?;
                }
            }
            e.materialize();
            SessionEngine::Plain(e)
        }
        Mode::Prob => {
            if classify(q) != crate::qmodel::QueryClass::Cqap0 {
                return Err(Error::NotCqap0);
            }
            if q.has_repeated_symbols() {
                return Err(Error::RepeatedSymbols);
            }
            let mut e: Engine<ProbPayload> = Engine::build_canonical(q)?;
            for (name, rows) in &rows {
                for (vals, payload) in rows {
                    let t: Tuple = vals.iter().map(|v| interner.intern(v)).collect();
                    let p = match payload {
                        CsvPayload::Mult(m) => ProbPayload::certain(*m),
                        CsvPayload::Prob(p) => ProbPayload::uncertain(p.clone()),
                        CsvPayload::CertainProb(m) => ProbPayload::certain(*m),
                    };
                    e.load(name, &t, p)?;
                }
            }
            e.materialize();
            SessionEngine::Prob(e)
        }
    };

    let mut req_id = 0usize;
    for line in script {
        match line {
            ScriptLine::Update(rel, vals, m) => {
                let t: Tuple = vals.iter().map(|v| interner.intern(v)).collect();
                match &mut engine {
                    SessionEngine::Plain(e) => e.apply_update(&rel, &t, m)?,
                    SessionEngine::Adaptive(s) => s.apply_update(&rel, &t, m)?,
                    SessionEngine::Prob(e) => {
                        e.apply_update(&rel, &t, ProbPayload::certain(m))?
                    }
                }
            }
            ScriptLine::ProbUpdate(rel, vals, u) => {
                let t: Tuple = vals.iter().map(|v| interner.intern(v)).collect();
                match &mut engine {
                    SessionEngine::Prob(e) => e.apply_update(&rel, &t, u.payload())?,
                    _ => {
                        return Err(Error::Format(
                            "probability updates need --mode prob".into(),
                        ))
                    }
                }
            }
            ScriptLine::Request(raw_bindings, limit) => {
                req_id += 1;
                let mut bindings: IndexMap<Var, Value> = IndexMap::new();
                for (var, val) in &raw_bindings {
                    bindings.insert(var.clone(), interner.intern(val));
                }
                let req = AccessRequest::new(bindings.clone());
                let tuples =
                    run_request(&engine, &req, limit, req_id, &interner, out)?;
                if oracle {
                    check_oracle(q, &engine, &req, &tuples)?;
                }
            }
        }
    }
    Ok(())
}

fn run_request(
    engine: &SessionEngine,
    req: &AccessRequest,
    limit: Option<usize>,
    req_id: usize,
    interner: &Interner,
    out: &mut impl Write,
) -> Result<Vec<Tuple>> {
    let mut tuples = Vec::new();
    let cap = limit.unwrap_or(usize::MAX);
    match engine {
        SessionEngine::Plain(e) => {
            let mut it = enumerate::open(e, req)?;
            while tuples.len() < cap {
                match enumerate::next(e, &mut it)? {
                    Some(t) => {
                        print_tuple(out, req_id, &t, interner, None)?;
                        tuples.push(t);
                    }
                    None => break,
                }
            }
        }
        SessionEngine::Adaptive(s) => {
            let (mut it, _) = s.open(req)?;
            while tuples.len() < cap {
                match it.next_with(s)? {
                    Some(t) => {
                        print_tuple(out, req_id, &t, interner, None)?;
                        tuples.push(t);
                    }
                    None => break,
                }
            }
        }
        SessionEngine::Prob(e) => {
            let mut it = enumerate::open(e, req)?;
            while tuples.len() < cap {
                match enumerate::next(e, &mut it)? {
                    Some(t) => {
                        let p = e.probability(req, &t)?;
                        print_tuple(out, req_id, &t, interner, Some(&p))?;
                        tuples.push(t);
                    }
                    None => break,
                }
            }
        }
    }
    Ok(tuples)
}

fn print_tuple(
    out: &mut impl Write,
    req_id: usize,
    t: &[Value],
    interner: &Interner,
    prob: Option<&ProbValue>,
) -> Result<()> {
    let mut line = format!("{req_id}");
    if t.is_empty() {
        line.push_str("\t()");
    }
    for &v in t {
        line.push('\t');
        line.push_str(interner.resolve(v));
    }
    if let Some(p) = prob {
        line.push_str(&format!("\t@{p}"));
    }
    writeln!(out, "{line}")?;
    Ok(())
}

fn check_oracle(
    q: &Query,
    engine: &SessionEngine,
    req: &AccessRequest,
    tuples: &[Tuple],
) -> Result<()> {
    let got: IndexSet<Tuple> = tuples.iter().cloned().collect();
    if got.len() != tuples.len() {
        return Err(Error::OracleMismatch("duplicate tuple yielded".into()));
    }
    match engine {
        SessionEngine::Plain(e) => {
            let want = naive::eval(q, &e.relations, &req.bindings)?;
            if want != got {
                return Err(Error::OracleMismatch(format!(
                    "expected {} tuples, got {}",
                    want.len(),
                    got.len()
                )));
            }
        }
        SessionEngine::Adaptive(s) => {
            let want = naive::eval(q, &s.relations, &req.bindings)?;
            if want != got {
                return Err(Error::OracleMismatch(format!(
                    "expected {} tuples, got {}",
                    want.len(),
                    got.len()
                )));
            }
        }
        SessionEngine::Prob(e) => {
            let db = ProbDatabase { relations: e.relations.clone() };
            for t in tuples {
                let p = e.probability(req, t)?;
                let Some(world_p) = p.world_probability() else {
                    continue;
                };
                let want = possible_worlds_oracle(q, &db, &req.bindings, t)?;
                if want != world_p {
                    return Err(Error::OracleMismatch(format!(
                        "probability {world_p} vs possible-worlds {want}"
                    )));
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// synthetic data generators
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum Generator {
    Uniform { domain: usize },
    Zipf { s: f64, domain: usize },
    /// One hot key absorbs a constant fraction of the first column.
    OneHot { domain: usize },
}

pub fn parse_generator(s: &str) -> Result<Generator> {
    if s == "uniform" {
        return Ok(Generator::Uniform { domain: 0 });
    }
    if let Some(rest) = s.strip_prefix("zipf:") {
        let z: f64 = rest
            .parse()
            .map_err(|_| Error::Format(format!("bad zipf parameter {rest:?}")))?;
        return Ok(Generator::Zipf { s: z, domain: 0 });
    }
    if s == "onehot" {
        return Ok(Generator::OneHot { domain: 0 });
    }
    Err(Error::Format(format!("unknown generator {s:?}")))
}

impl Generator {
    fn with_domain(&self, domain: usize) -> Generator {
        match self {
            Generator::Uniform { .. } => Generator::Uniform { domain },
            Generator::Zipf { s, .. } => Generator::Zipf { s: *s, domain },
            Generator::OneHot { .. } => Generator::OneHot { domain },
        }
    }

    fn draw(&self, rng: &mut StdRng) -> Value {
        match self {
            Generator::Uniform { domain } => rng.gen_range(0..*domain as u32),
            Generator::Zipf { s, domain } => {
                let z = rand_distr::Zipf::new(*domain as u64, *s).expect("zipf params");
                (z.sample(rng) as u32).saturating_sub(1)
            }
            Generator::OneHot { domain } => {
                if rng.gen_bool(0.5) {
                    0
                } else {
                    rng.gen_range(0..*domain as u32)
                }
            }
        }
    }
}

/// Synthesises ~n tuples split across the query's relations.
pub fn generate_db(
    q: &Query,
    n: usize,
    generator: &Generator,
    seed: u64,
) -> IndexMap<String, Vec<Tuple>> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut names: IndexSet<(String, usize)> = IndexSet::new();
    for a in &q.atoms {
        names.insert((a.relation.clone(), a.schema.len()));
    }
    let per = (n / names.len().max(1)).max(1);
    let domain = (n / 4).max(4);
    let g = generator.with_domain(domain);
    let mut out: IndexMap<String, Vec<Tuple>> = IndexMap::new();
    for (name, arity) in names {
        let mut rows: IndexSet<Tuple> = IndexSet::new();
        let mut attempts = 0;
        while rows.len() < per && attempts < per * 20 {
            attempts += 1;
            rows.insert((0..arity).map(|_| g.draw(&mut rng)).collect());
        }
        out.insert(name, rows.into_iter().collect());
    }
    out
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

struct LazyEngine {
    relations: IndexMap<String, Relation<Multiplicity>>,
}

impl LazyEngine {
    fn new(q: &Query) -> Self {
        let mut relations = IndexMap::new();
        for a in &q.atoms {
            relations.entry(a.relation.clone()).or_insert_with(|| {
                Relation::new((0..a.schema.len()).map(|i| format!("c{i}")).collect())
            });
        }
        LazyEngine { relations }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_bench(
    q: &Query,
    sizes: &[usize],
    eps_list: &[Rat],
    generator: &Generator,
    n_updates: usize,
    n_requests: usize,
    modes: &[String],
    seed: u64,
    out: &mut impl Write,
) -> Result<()> {
    writeln!(out, "mode,N,eps,preprocess_ms,avg_update_us,avg_delay_us,probes_per_op")?;
    for &n in sizes {
        let db = generate_db(q, n, generator, seed);
        let mut rng = StdRng::seed_from_u64(seed ^ 0x5eed);
        let updates = bench_updates(&db, n_updates, &mut rng);
        let requests = bench_requests(q, &db, n_requests, &mut rng);
        for mode in modes {
            match mode.as_str() {
                "plain" => {
                    let row = bench_plain(q, &db, &updates, &requests)?;
                    emit_row(out, "plain", n, "-", row)?;
                }
                "adaptive" => {
                    for eps in eps_list {
                        if crate::qmodel::structural_tests(&fracture(q).fracture)
                            .hierarchical
                        {
                            let row = bench_adaptive(q, &db, eps, &updates, &requests)?;
                            emit_row(out, "adaptive", n, &eps.to_string(), row)?;
                        } else {
                            eprintln!(
                                "warning: fracture not hierarchical; adaptive skipped"
                            );
                        }
                    }
                }
                "lazy" => {
                    let row = bench_lazy(q, &db, &updates, &requests)?;
                    emit_row(out, "lazy", n, "-", row)?;
                }
                other => return Err(Error::Format(format!("unknown mode {other}"))),
            }
        }
    }
    Ok(())
}

type BenchRow = (f64, f64, f64, f64);

fn emit_row(
    out: &mut impl Write,
    mode: &str,
    n: usize,
    eps: &str,
    (pre, upd, delay, probes): BenchRow,
) -> Result<()> {
    if upd > 0.0 && upd < 0.05 {
        eprintln!("warning: update timings near clock resolution");
    }
    writeln!(out, "{mode},{n},{eps},{pre:.3},{upd:.3},{delay:.3},{probes:.3}")?;
    Ok(())
}

fn bench_updates(
    db: &IndexMap<String, Vec<Tuple>>,
    n: usize,
    rng: &mut StdRng,
) -> Vec<(String, Tuple, i64)> {
    let mut out = Vec::new();
    let names: Vec<&String> = db.keys().collect();
    for _ in 0..n {
        let name = names[rng.gen_range(0..names.len())];
        let rows = &db[name];
        if rows.is_empty() {
            continue;
        }
        let t = rows[rng.gen_range(0..rows.len())].clone();
        // deletes and re-inserts of existing tuples keep the size stable
        out.push((name.clone(), t.clone(), -1));
        out.push((name.clone(), t, 1));
    }
    out
}

fn bench_requests(
    q: &Query,
    db: &IndexMap<String, Vec<Tuple>>,
    n: usize,
    rng: &mut StdRng,
) -> Vec<AccessRequest> {
    // bind each input variable to a value drawn from a column it occurs in
    let mut out = Vec::new();
    for _ in 0..n {
        let mut bindings = IndexMap::new();
        for v in &q.input_vars {
            let mut val = 0;
            'find: for a in &q.atoms {
                if let Some(pos) = a.schema.iter().position(|x| x == v) {
                    let rows = &db[&a.relation];
                    if !rows.is_empty() {
                        val = rows[rng.gen_range(0..rows.len())][pos];
                        break 'find;
                    }
                }
            }
            bindings.insert(v.clone(), val);
        }
        out.push(AccessRequest::new(bindings));
    }
    out
}

fn bench_plain(
    q: &Query,
    db: &IndexMap<String, Vec<Tuple>>,
    updates: &[(String, Tuple, i64)],
    requests: &[AccessRequest],
) -> Result<BenchRow> {
    let mut e: Engine<Multiplicity> = Engine::build_with_limit(q, vo_limit())?;
    let start = Instant::now();
    for (name, rows) in db {
        for t in rows {
            e.load(name, t, 1)?;
        }
    }
    e.materialize();
    let pre = start.elapsed().as_secs_f64() * 1e3;

    let start = Instant::now();
    for (rel, t, m) in updates {
        e.apply_update(rel, t, *m)?;
    }
    let upd = start.elapsed().as_secs_f64() * 1e6 / updates.len().max(1) as f64;

    e.counters.reset();
    let start = Instant::now();
    let mut yielded = 0usize;
    for req in requests {
        let mut it = enumerate::open(&e, req)?;
        while let Some(_t) = enumerate::next(&e, &mut it)? {
            yielded += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let (_, probes, _) = e.counters.snapshot();
    Ok((
        pre,
        upd,
        secs * 1e6 / yielded.max(1) as f64,
        probes as f64 / yielded.max(1) as f64,
    ))
}

fn bench_adaptive(
    q: &Query,
    db: &IndexMap<String, Vec<Tuple>>,
    eps: &Rat,
    updates: &[(String, Tuple, i64)],
    requests: &[AccessRequest],
) -> Result<BenchRow> {
    let mut s = AdaptiveState::build(q, eps)?;
    let start = Instant::now();
    for (name, rows) in db {
        for t in rows {
            s.load(name, t, 1)?;
        }
    }
    s.materialize();
    let pre = start.elapsed().as_secs_f64() * 1e3;

    let start = Instant::now();
    for (rel, t, m) in updates {
        s.apply_update(rel, t, *m)?;
    }
    let upd = start.elapsed().as_secs_f64() * 1e6 / updates.len().max(1) as f64;

    s.counters.reset();
    let start = Instant::now();
    let mut yielded = 0usize;
    for req in requests {
        let (mut it, _) = s.open(req)?;
        while let Some(_t) = it.next_with(&s)? {
            yielded += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let (_, probes, _) = s.counters.snapshot();
    Ok((
        pre,
        upd,
        secs * 1e6 / yielded.max(1) as f64,
        probes as f64 / yielded.max(1) as f64,
    ))
}

fn bench_lazy(
    q: &Query,
    db: &IndexMap<String, Vec<Tuple>>,
    updates: &[(String, Tuple, i64)],
    requests: &[AccessRequest],
) -> Result<BenchRow> {
    let mut e = LazyEngine::new(q);
    for (name, rows) in db {
        for t in rows {
            e.relations.get_mut(name).unwrap().upsert(t, &1)?;
        }
    }
    let start = Instant::now();
    for (rel, t, m) in updates {
        e.relations
            .get_mut(rel)
            .ok_or_else(|| Error::UnknownRelation(rel.clone()))?
            .upsert(t, m)?;
    }
    let upd = start.elapsed().as_secs_f64() * 1e6 / updates.len().max(1) as f64;

    let start = Instant::now();
    let mut yielded = 0usize;
    for req in requests {
        let res = naive::eval(q, &e.relations, &req.bindings)?;
        yielded += res.len().max(1);
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((0.0, upd, secs * 1e6 / yielded.max(1) as f64, 0.0))
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad number {x:?}")))
        })
        .collect()
}

/// Deterministic textual report of the planned variable order (used by
/// tests and the widths command).
pub fn widths_report(q: &Query) -> Result<(String, VariableOrder)> {
    let (w, vo) = planner::query_widths_with_limit(q, vo_limit())?;
    Ok((w.to_string(), vo))
}

pub fn epsilon_to_f64(eps: &Rat) -> f64 {
    eps.to_f64().unwrap_or(0.0)
}


#[cfg(test)]
mod fallback_tests {
    use super::*;

    #[test]
    fn adaptive_mode_falls_back_for_non_hierarchical_fractures() {
        let q = parse_query("Q(B,C|A) = R(A,B), S(B,C), T(C,A).").unwrap();
        let mut out = Vec::new();
        cmd_run(
            &q,
            None,
            "+R 1,2\n+S 2,3\n+T 3,1\n? A=1\n",
            Mode::Adaptive(Rat::new(1.into(), 2.into())),
            true,
            0,
            &mut out,
        )
        .unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "1\t2\t3\n");
    }
}
