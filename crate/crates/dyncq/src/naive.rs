//! Reference evaluator: a straightforward backtracking join used as the
//! recompute oracle for cross-checking the incremental engine. It shares no
//! code with the view-tree evaluation path.

use indexmap::{IndexMap, IndexSet};

use crate::error::{Error, Result};
use crate::payload::Payload;
use crate::qmodel::{Query, Var};
use crate::store::{Relation, Tuple, Value};

/// Distinct output tuples of `q` for the given input binding, by naive join,
/// selection and projection over the stored relations.
pub fn eval<P: Payload>(
    q: &Query,
    db: &IndexMap<String, Relation<P>>,
    binding: &IndexMap<Var, Value>,
) -> Result<IndexSet<Tuple>> {
    check_binding(q, binding)?;
    let mut out = IndexSet::new();
    let mut asg: IndexMap<Var, Value> = binding.clone();
    search(q, db, 0, &mut asg, &mut |asg| {
        out.insert(q.output_vars.iter().map(|v| asg[v]).collect());
    })?;
    Ok(out)
}

/// Output tuples with their derivation counts: the sum over satisfying
/// assignments of the product of tuple multiplicities.
pub fn eval_counting(
    q: &Query,
    db: &IndexMap<String, Relation<i64>>,
    binding: &IndexMap<Var, Value>,
) -> Result<IndexMap<Tuple, i64>> {
    check_binding(q, binding)?;
    let mut out: IndexMap<Tuple, i64> = IndexMap::new();
    let mut asg: IndexMap<Var, Value> = binding.clone();
    search_counting(q, db, 0, &mut asg, 1, &mut |asg, m| {
        let t: Tuple = q.output_vars.iter().map(|v| asg[v]).collect();
        let e = out.entry(t).or_insert(0);
        *e += m;
    })?;
    out.retain(|_, m| *m != 0);
    Ok(out)
}

/// Set-semantics evaluation over an explicit world (used by the
/// possible-worlds oracle).
pub fn eval_world(
    q: &Query,
    world: &IndexMap<String, Vec<Tuple>>,
    binding: &IndexMap<Var, Value>,
) -> Result<IndexSet<Tuple>> {
    check_binding(q, binding)?;
    let mut out = IndexSet::new();
    let mut asg: IndexMap<Var, Value> = binding.clone();
    search_world(q, world, 0, &mut asg, &mut |asg| {
        out.insert(q.output_vars.iter().map(|v| asg[v]).collect());
    });
    Ok(out)
}

fn check_binding(q: &Query, binding: &IndexMap<Var, Value>) -> Result<()> {
    for v in &q.input_vars {
        if !binding.contains_key(v) {
            return Err(Error::BadRequest(format!("missing binding for {v}")));
        }
    }
    Ok(())
}

fn search<P: Payload>(
    q: &Query,
    db: &IndexMap<String, Relation<P>>,
    atom: usize,
    asg: &mut IndexMap<Var, Value>,
    emit: &mut dyn FnMut(&IndexMap<Var, Value>),
) -> Result<()> {
    if atom == q.atoms.len() {
        emit(asg);
        return Ok(());
    }
    let a = &q.atoms[atom];
    let rel = db
        .get(&a.relation)
        .ok_or_else(|| Error::UnknownRelation(a.relation.clone()))?;
    for (t, _) in rel.iter() {
        if let Some(added) = try_bind(a.schema.as_slice(), t, asg) {
            search(q, db, atom + 1, asg, emit)?;
            unbind(asg, &added);
        }
    }
    Ok(())
}

fn search_counting(
    q: &Query,
    db: &IndexMap<String, Relation<i64>>,
    atom: usize,
    asg: &mut IndexMap<Var, Value>,
    mult: i64,
    emit: &mut dyn FnMut(&IndexMap<Var, Value>, i64),
) -> Result<()> {
    if atom == q.atoms.len() {
        emit(asg, mult);
        return Ok(());
    }
    let a = &q.atoms[atom];
    let rel = db
        .get(&a.relation)
        .ok_or_else(|| Error::UnknownRelation(a.relation.clone()))?;
    for (t, m) in rel.iter() {
        if let Some(added) = try_bind(a.schema.as_slice(), t, asg) {
            search_counting(q, db, atom + 1, asg, mult * m, emit)?;
            unbind(asg, &added);
        }
    }
    Ok(())
}

fn search_world(
    q: &Query,
    world: &IndexMap<String, Vec<Tuple>>,
    atom: usize,
    asg: &mut IndexMap<Var, Value>,
    emit: &mut dyn FnMut(&IndexMap<Var, Value>),
) {
    if atom == q.atoms.len() {
        emit(asg);
        return;
    }
    let a = &q.atoms[atom];
    let empty = Vec::new();
    let rows = world.get(&a.relation).unwrap_or(&empty);
    let mut seen: IndexSet<&Tuple> = IndexSet::new();
    for t in rows {
        if !seen.insert(t) {
            continue;
        }
        if let Some(added) = try_bind(a.schema.as_slice(), t, asg) {
            search_world(q, world, atom + 1, asg, emit);
            unbind(asg, &added);
        }
    }
}

fn try_bind(schema: &[Var], t: &[Value], asg: &mut IndexMap<Var, Value>) -> Option<Vec<Var>> {
    let mut added = Vec::new();
    for (v, &x) in schema.iter().zip(t) {
        match asg.get(v) {
            Some(&y) if y == x => {}
            Some(_) => {
                unbind(asg, &added);
                return None;
            }
            None => {
                asg.insert(v.clone(), x);
                added.push(v.clone());
            }
        }
    }
    Some(added)
}

fn unbind(asg: &mut IndexMap<Var, Value>, added: &[Var]) {
    for v in added {
        asg.swap_remove(v);
    }
}
