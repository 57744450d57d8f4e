//! Variable orders and width planning: access-top variable order search for
//! the fracture, indicator projections via GYO reduction, and exact
//! fractional/integral edge cover numbers feeding the width measures.

pub mod simplex;

use indexmap::{IndexMap, IndexSet};
use num_traits::Zero;

use crate::error::{Error, Result};
use crate::qmodel::{fracture, structural_tests, Atom, Query, Stratum, Var};
use crate::Rat;

/// Hard cap on the number of variables per connected component during
/// variable order search; overridable by callers (the CLI honours an
/// environment variable).
pub const DEFAULT_VAR_LIMIT: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartTag {
    Heavy,
    Light,
}

impl PartTag {
    pub fn letter(self) -> char {
        match self {
            PartTag::Heavy => 'H',
            PartTag::Light => 'L',
        }
    }
}

/// Heavy/light signature of a relation part: nested partition keys with
/// their tags, outermost first.
pub type Signature = Vec<(Vec<Var>, PartTag)>;

pub fn signature_label(sig: &Signature) -> String {
    sig.iter()
        .map(|(k, t)| format!("{}->{}", k.join(""), t.letter()))
        .collect::<Vec<_>>()
        .join(",")
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtomLeaf {
    pub atom: Atom,
    /// Index into the planned query's atom list.
    pub atom_idx: usize,
    /// Heavy/light part signature; empty outside the adaptive mode.
    pub signature: Signature,
}

impl AtomLeaf {
    pub fn label(&self) -> String {
        if self.signature.is_empty() {
            self.atom.to_string()
        } else {
            format!(
                "{}^{}({})",
                self.atom.relation,
                signature_label(&self.signature),
                self.atom.schema.join(",")
            )
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorLeaf {
    pub relation: String,
    /// Projection variables, ordered root-to-leaf along the host path.
    pub key: Vec<Var>,
    /// Atom whose relation is projected.
    pub source_idx: usize,
}

impl IndicatorLeaf {
    pub fn label(&self) -> String {
        format!("I{{{}}}{}({})", self.key.join(","), self.relation, self.key.join(","))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VoNode {
    Var { var: Var, children: Vec<VoNode> },
    Atom(AtomLeaf),
    Indicator(IndicatorLeaf),
}

impl VoNode {
    pub fn leaf_schema(&self) -> Option<&[Var]> {
        match self {
            VoNode::Var { .. } => None,
            VoNode::Atom(a) => Some(&a.atom.schema),
            VoNode::Indicator(i) => Some(&i.key),
        }
    }
}

/// A rooted forest of variables extended with atom and indicator leaves.
#[derive(Debug, Clone, PartialEq)]
pub struct VariableOrder {
    pub trees: Vec<VoNode>,
}

impl VariableOrder {
    pub fn single(tree: VoNode) -> Self {
        VariableOrder { trees: vec![tree] }
    }

    /// Variables in preorder; the planner's deterministic tie-break key.
    pub fn preorder_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for t in &self.trees {
            preorder(t, &mut out);
        }
        out
    }

    /// Dependency sets derived from the leaf schemas: dep(X) is the set of
    /// ancestors of X that appear in some leaf below X.
    pub fn dep_map(&self) -> IndexMap<Var, IndexSet<Var>> {
        let mut out = IndexMap::new();
        for t in &self.trees {
            collect_dep(t, &mut Vec::new(), &mut out);
        }
        out
    }

    pub fn atom_leaves(&self) -> Vec<&AtomLeaf> {
        let mut out = Vec::new();
        for t in &self.trees {
            collect_atoms(t, &mut out);
        }
        out
    }
}

impl std::fmt::Display for VariableOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        fn term(n: &VoNode) -> String {
            match n {
                VoNode::Var { var, children } => match children.len() {
                    0 => var.clone(),
                    1 => format!("{var}-{}", term(&children[0])),
                    _ => format!(
                        "{var}-{{{}}}",
                        children.iter().map(term).collect::<Vec<_>>().join(", ")
                    ),
                },
                VoNode::Atom(a) => a.label(),
                VoNode::Indicator(i) => i.label(),
            }
        }
        let s: Vec<String> = self.trees.iter().map(term).collect();
        write!(f, "{}", s.join(" ; "))
    }
}

fn preorder(n: &VoNode, out: &mut Vec<Var>) {
    if let VoNode::Var { var, children } = n {
        out.push(var.clone());
        for c in children {
            preorder(c, out);
        }
    }
}

fn collect_atoms<'a>(n: &'a VoNode, out: &mut Vec<&'a AtomLeaf>) {
    match n {
        VoNode::Var { children, .. } => children.iter().for_each(|c| collect_atoms(c, out)),
        VoNode::Atom(a) => out.push(a),
        VoNode::Indicator(_) => {}
    }
}

fn collect_dep(
    n: &VoNode,
    anc: &mut Vec<Var>,
    out: &mut IndexMap<Var, IndexSet<Var>>,
) -> IndexSet<Var> {
    match n {
        VoNode::Var { var, children } => {
            anc.push(var.clone());
            let mut union: IndexSet<Var> = IndexSet::new();
            for c in children {
                union.extend(collect_dep(c, anc, out));
            }
            anc.pop();
            let dep: IndexSet<Var> =
                anc.iter().filter(|a| union.contains(*a)).cloned().collect();
            out.insert(var.clone(), dep);
            union
        }
        VoNode::Atom(a) => a.atom.schema.iter().cloned().collect(),
        VoNode::Indicator(i) => i.key.iter().cloned().collect(),
    }
}

/// Exact widths of a variable order: the static width bounds the
/// materialisation exponent, the dynamic width the update exponent.
#[derive(Debug, Clone, PartialEq)]
pub struct Widths {
    pub dynamic: Rat,
    pub static_: Rat,
}

impl std::fmt::Display for Widths {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "delta={} w={}", self.dynamic, self.static_)
    }
}

// ---------------------------------------------------------------------------
// Edge covers
// ---------------------------------------------------------------------------

fn rho_star_edges(edges: &[IndexSet<Var>], f: &IndexSet<Var>) -> Option<Rat> {
    if f.is_empty() {
        return Some(Rat::zero());
    }
    // any single edge covering f is optimal: the cover needs total weight
    // at least one on every variable
    if edges.iter().any(|e| f.iter().all(|v| e.contains(v))) {
        return Some(Rat::from_integer(1.into()));
    }
    let covers: Vec<Vec<usize>> = f
        .iter()
        .map(|v| {
            edges
                .iter()
                .enumerate()
                .filter(|(_, e)| e.contains(v))
                .map(|(i, _)| i)
                .collect()
        })
        .collect();
    if covers.iter().any(|c| c.is_empty()) {
        return None;
    }
    // the LP depends only on the variable->edges incidence
    let mut key: Vec<Vec<usize>> = covers.clone();
    key.sort_unstable();
    key.dedup();
    let n = edges.len();
    thread_local! {
        static CACHE: std::cell::RefCell<std::collections::HashMap<(Vec<Vec<usize>>, usize), Option<Rat>>> =
            std::cell::RefCell::new(std::collections::HashMap::new());
    }
    CACHE.with(|c| {
        if let Some(hit) = c.borrow().get(&(key.clone(), n)) {
            return hit.clone();
        }
        let out = simplex::solve_cover_lp(&covers, n);
        c.borrow_mut().insert((key, n), out.clone());
        out
    })
}

/// Fractional edge cover number of `f` over the atoms of `q`, as the exact
/// optimum of the covering linear program.
pub fn fractional_edge_cover(q: &Query, f: &IndexSet<Var>) -> Rat {
    let edges: Vec<IndexSet<Var>> =
        q.atoms.iter().map(|a| a.schema.iter().cloned().collect()).collect();
    rho_star_edges(&edges, f).expect("variable set not coverable by the query's atoms")
}

/// Integral edge cover number of `f` over the atoms of `q`, by exhaustive
/// subset search.
pub fn integral_edge_cover(q: &Query, f: &IndexSet<Var>) -> usize {
    if f.is_empty() {
        return 0;
    }
    let edges: Vec<IndexSet<Var>> =
        q.atoms.iter().map(|a| a.schema.iter().cloned().collect()).collect();
    let n = edges.len();
    for size in 1..=n {
        for mask in 0u32..(1u32 << n) {
            if mask.count_ones() as usize != size {
                continue;
            }
            let covered = f.iter().all(|v| {
                (0..n).any(|i| mask & (1 << i) != 0 && edges[i].contains(v))
            });
            if covered {
                return size;
            }
        }
    }
    panic!("variable set not coverable by the query's atoms")
}

// ---------------------------------------------------------------------------
// GYO reduction and indicator projections
// ---------------------------------------------------------------------------

/// Runs the GYO reduction (drop vertices confined to one hyperedge, drop
/// hyperedges included in another) on `indicators ++ atoms` to a fixpoint
/// and returns the indices of the indicators that survive in a non-empty
/// residual hypergraph; the empty set signals an acyclic input.
pub fn gyo_star(indicators: &[IndexSet<Var>], atoms: &[IndexSet<Var>]) -> Vec<usize> {
    #[derive(Clone)]
    struct Edge {
        vars: IndexSet<Var>,
        indicator: Option<usize>,
    }
    let mut edges: Vec<Edge> = indicators
        .iter()
        .enumerate()
        .map(|(i, e)| Edge { vars: e.clone(), indicator: Some(i) })
        .chain(atoms.iter().map(|e| Edge { vars: e.clone(), indicator: None }))
        .collect();
    // canonical order so the reduction is deterministic
    edges.sort_by_key(|e| {
        let mut k: Vec<Var> = e.vars.iter().cloned().collect();
        k.sort();
        (k, e.indicator)
    });

    let mut alive: Vec<bool> = vec![true; edges.len()];
    loop {
        let mut changed = false;
        // rule 1: a vertex appearing in exactly one hyperedge is removed
        let mut seen: IndexMap<Var, (usize, usize)> = IndexMap::new();
        for (i, e) in edges.iter().enumerate() {
            if !alive[i] {
                continue;
            }
            for v in &e.vars {
                let entry = seen.entry(v.clone()).or_insert((0, i));
                entry.0 += 1;
                entry.1 = i;
            }
        }
        for (v, (count, idx)) in seen {
            if count == 1 {
                edges[idx].vars.shift_remove(&v);
                changed = true;
            }
        }
        // rule 2: a hyperedge included in another is removed
        for i in 0..edges.len() {
            if !alive[i] {
                continue;
            }
            for j in 0..edges.len() {
                if i == j || !alive[j] {
                    continue;
                }
                let ei = &edges[i].vars;
                let ej = &edges[j].vars;
                let subset = ei.iter().all(|v| ej.contains(v));
                if subset && (ei.len() < ej.len() || i > j) {
                    alive[i] = false;
                    changed = true;
                    break;
                }
            }
        }
        if !changed {
            break;
        }
    }

    let mut out: Vec<usize> = edges
        .iter()
        .enumerate()
        .filter(|(i, e)| alive[*i] && !e.vars.is_empty())
        .filter_map(|(_, e)| e.indicator)
        .collect();
    out.sort_unstable();
    out
}

/// Extends a variable order with indicator projections: at each variable X,
/// indicators over relations outside the subtree of X that share variables
/// with the bag of X and close a cycle with the subtree's atoms become new
/// children of X.
pub fn add_indicators(q: &Query, vo: &VariableOrder) -> VariableOrder {
    let dep = vo.dep_map();
    let trees = vo
        .trees
        .iter()
        .map(|t| add_indicators_node(q, t, &mut Vec::new(), &dep))
        .collect();
    VariableOrder { trees }
}

fn add_indicators_node(
    q: &Query,
    node: &VoNode,
    anc: &mut Vec<Var>,
    dep: &IndexMap<Var, IndexSet<Var>>,
) -> VoNode {
    let VoNode::Var { var, children } = node else {
        return node.clone();
    };
    anc.push(var.clone());
    let mut new_children: Vec<VoNode> = children
        .iter()
        .map(|c| add_indicators_node(q, c, anc, dep))
        .collect();
    anc.pop();

    // bag of X ordered along the root path, X last
    let mut bag: Vec<Var> = anc
        .iter()
        .filter(|a| dep[var].contains(*a))
        .cloned()
        .collect();
    bag.push(var.clone());
    let bag_set: IndexSet<Var> = bag.iter().cloned().collect();

    let mut sub_atoms: Vec<&AtomLeaf> = Vec::new();
    collect_atoms(node, &mut sub_atoms);
    let sub_idx: IndexSet<usize> = sub_atoms.iter().map(|a| a.atom_idx).collect();

    let mut cand: Vec<(IndexSet<Var>, usize)> = Vec::new();
    let mut seen: IndexSet<(String, Vec<Var>)> = IndexSet::new();
    for (i, a) in q.atoms.iter().enumerate() {
        if sub_idx.contains(&i) {
            continue;
        }
        let z: IndexSet<Var> =
            bag.iter().filter(|v| a.contains(v)).cloned().collect();
        if z.is_empty() {
            continue;
        }
        let mut zv: Vec<Var> = bag.iter().filter(|v| z.contains(*v)).cloned().collect();
        zv.sort();
        if seen.insert((a.relation.clone(), zv)) {
            cand.push((z, i));
        }
    }
    if !cand.is_empty() {
        let atom_edges: Vec<IndexSet<Var>> = sub_atoms
            .iter()
            .map(|a| a.atom.schema.iter().cloned().collect())
            .collect();
        let ind_edges: Vec<IndexSet<Var>> = cand.iter().map(|(z, _)| z.clone()).collect();
        for k in gyo_star(&ind_edges, &atom_edges) {
            let (z, src) = &cand[k];
            let key: Vec<Var> = bag.iter().filter(|v| z.contains(*v)).cloned().collect();
            debug_assert!(key.iter().all(|v| bag_set.contains(v)));
            new_children.push(VoNode::Indicator(IndicatorLeaf {
                relation: q.atoms[*src].relation.clone(),
                key,
                source_idx: *src,
            }));
        }
    }
    VoNode::Var { var: var.clone(), children: new_children }
}

// ---------------------------------------------------------------------------
// Width measures over a VO
// ---------------------------------------------------------------------------

/// Static and dynamic width of an extended variable order for `q`.
pub fn vo_widths(_q: &Query, vo: &VariableOrder) -> Widths {
    let mut w = Rat::zero();
    let mut d = Rat::zero();
    for t in &vo.trees {
        widths_walk(t, &mut Vec::new(), &mut w, &mut d);
    }
    Widths { dynamic: d, static_: w }
}

fn widths_walk(node: &VoNode, anc: &mut Vec<Var>, w: &mut Rat, d: &mut Rat) -> Vec<IndexSet<Var>> {
    match node {
        VoNode::Var { var, children } => {
            anc.push(var.clone());
            let mut leaves: Vec<IndexSet<Var>> = Vec::new();
            for c in children {
                leaves.extend(widths_walk(c, anc, w, d));
            }
            anc.pop();

            let union: IndexSet<Var> = leaves.iter().flatten().cloned().collect();
            let mut bag: IndexSet<Var> =
                anc.iter().filter(|a| union.contains(*a)).cloned().collect();
            bag.insert(var.clone());

            let w_x = rho_star_edges(&leaves, &bag).expect("bag coverable by subtree leaves");
            if w_x > *w {
                *w = w_x;
            }
            for leaf in &leaves {
                let rest: IndexSet<Var> =
                    bag.iter().filter(|v| !leaf.contains(*v)).cloned().collect();
                let d_x = rho_star_edges(&leaves, &rest).expect("coverable");
                if d_x > *d {
                    *d = d_x;
                }
            }
            leaves
        }
        VoNode::Atom(a) => vec![a.atom.schema.iter().cloned().collect()],
        VoNode::Indicator(i) => vec![i.key.iter().cloned().collect()],
    }
}

// ---------------------------------------------------------------------------
// Variable order generation
// ---------------------------------------------------------------------------

/// Connected components of the query's atoms (two atoms connect when they
/// share a variable), ordered by first atom index.
pub fn component_atoms(q: &Query) -> Vec<IndexSet<usize>> {
    split_groups(q, &(0..q.atoms.len()).collect(), &IndexSet::new())
}

fn split_groups(
    q: &Query,
    atoms: &IndexSet<usize>,
    anc: &IndexSet<Var>,
) -> Vec<IndexSet<usize>> {
    let idx: Vec<usize> = atoms.iter().copied().collect();
    let mut parent: Vec<usize> = (0..idx.len()).collect();
    fn find(p: &mut Vec<usize>, i: usize) -> usize {
        if p[i] != i {
            let r = find(p, p[i]);
            p[i] = r;
        }
        p[i]
    }
    let mut owner: IndexMap<&str, usize> = IndexMap::new();
    for (k, &ai) in idx.iter().enumerate() {
        for v in &q.atoms[ai].schema {
            if anc.contains(v) {
                continue;
            }
            match owner.get(v.as_str()) {
                Some(&j) => {
                    let (a, b) = (find(&mut parent, k), find(&mut parent, j));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
                None => {
                    owner.insert(v, k);
                }
            }
        }
    }
    let mut groups: IndexMap<usize, IndexSet<usize>> = IndexMap::new();
    for (k, &ai) in idx.iter().enumerate() {
        let root = find(&mut parent, k);
        groups.entry(root).or_default().insert(ai);
    }
    groups.into_values().collect()
}

fn group_vars(q: &Query, group: &IndexSet<usize>, anc: &IndexSet<Var>) -> IndexSet<Var> {
    let mut vars = IndexSet::new();
    for &i in group {
        for v in &q.atoms[i].schema {
            if !anc.contains(v) {
                vars.insert(v.clone());
            }
        }
    }
    vars
}

/// All trees for one connected atom group under the given stratification:
/// the root of every subtree must come from the lowest stratum present, so
/// along every path strata never decrease.
fn trees_for_group(
    q: &Query,
    group: &IndexSet<usize>,
    anc: &IndexSet<Var>,
    strat: &dyn Fn(&str) -> Stratum,
) -> Vec<VoNode> {
    let vars = group_vars(q, group, anc);
    debug_assert!(!vars.is_empty());
    let min_s = vars.iter().map(|v| strat(v)).min().unwrap();
    let mut out = Vec::new();
    for x in vars.iter().filter(|v| strat(v) == min_s) {
        let mut anc2 = anc.clone();
        anc2.insert(x.clone());

        let mut leaves: Vec<VoNode> = Vec::new();
        let mut rest: IndexSet<usize> = IndexSet::new();
        for &i in group {
            if q.atoms[i].schema.iter().all(|v| anc2.contains(v)) {
                leaves.push(VoNode::Atom(AtomLeaf {
                    atom: q.atoms[i].clone(),
                    atom_idx: i,
                    signature: Vec::new(),
                }));
            } else {
                rest.insert(i);
            }
        }

        let subgroups = split_groups(q, &rest, &anc2);
        let per_sub: Vec<Vec<VoNode>> = subgroups
            .iter()
            .map(|g| trees_for_group(q, g, &anc2, strat))
            .collect();
        for combo in cartesian(&per_sub) {
            let mut children = leaves.clone();
            children.extend(combo.into_iter().cloned());
            out.push(VoNode::Var { var: x.clone(), children });
        }
    }
    out
}

fn cartesian<'a, T>(lists: &'a [Vec<T>]) -> Vec<Vec<&'a T>> {
    let mut out: Vec<Vec<&T>> = vec![Vec::new()];
    for list in lists {
        let mut next = Vec::new();
        for prefix in &out {
            for item in list {
                let mut p = prefix.clone();
                p.push(item);
                next.push(p);
            }
        }
        out = next;
    }
    out
}

fn guard(q: &Query, limit: usize) -> Result<()> {
    for group in component_atoms(q) {
        let n = group_vars(q, &group, &IndexSet::new()).len();
        if n > limit {
            return Err(Error::SearchGuard { vars: n, limit });
        }
    }
    Ok(())
}

/// Per-component lists of access-top trees (without indicators).
pub(crate) fn access_top_trees_per_component(
    q: &Query,
    limit: usize,
) -> Result<Vec<Vec<VoNode>>> {
    guard(q, limit)?;
    let strat = |v: &str| q.stratum(v);
    Ok(component_atoms(q)
        .iter()
        .map(|g| trees_for_group(q, g, &IndexSet::new(), &strat))
        .collect())
}

/// Access-top trees for a connected subset of atoms hanging below an
/// already-placed ancestor chain; used when a strategy turns a canonical
/// subtree into an access-top one.
pub(crate) fn subtree_access_top_trees(
    q: &Query,
    atoms: &IndexSet<usize>,
    anc: &IndexSet<Var>,
) -> Result<Vec<VoNode>> {
    let groups = split_groups(q, atoms, anc);
    if groups.len() != 1 {
        return Err(Error::Format(
            "subtree atoms must form one connected group".into(),
        ));
    }
    let strat = |v: &str| q.stratum(v);
    Ok(trees_for_group(q, &groups[0], anc, &strat))
}

/// Streams every access-top extended variable order of `q` (expected to be
/// a fracture): one tree per connected component, deduplicated up to sibling
/// order, each completed with indicator projections.
pub fn enumerate_access_top_vos(q: &Query) -> Result<VoStream> {
    enumerate_access_top_vos_with_limit(q, DEFAULT_VAR_LIMIT)
}

pub fn enumerate_access_top_vos_with_limit(q: &Query, limit: usize) -> Result<VoStream> {
    let per_component = access_top_trees_per_component(q, limit)?;
    Ok(VoStream { q: q.clone(), per_component, idx: Vec::new(), done: false })
}

#[derive(Debug)]
pub struct VoStream {
    q: Query,
    per_component: Vec<Vec<VoNode>>,
    idx: Vec<usize>,
    done: bool,
}

impl Iterator for VoStream {
    type Item = VariableOrder;
    fn next(&mut self) -> Option<VariableOrder> {
        if self.done {
            return None;
        }
        if self.idx.is_empty() {
            if self.per_component.iter().any(|c| c.is_empty()) {
                self.done = true;
                return None;
            }
            self.idx = vec![0; self.per_component.len()];
        }
        let trees: Vec<VoNode> = self
            .per_component
            .iter()
            .zip(&self.idx)
            .map(|(c, &i)| c[i].clone())
            .collect();
        // odometer advance
        let mut k = self.idx.len();
        loop {
            if k == 0 {
                self.done = true;
                break;
            }
            k -= 1;
            self.idx[k] += 1;
            if self.idx[k] < self.per_component[k].len() {
                break;
            }
            self.idx[k] = 0;
        }
        Some(add_indicators(&self.q, &VariableOrder { trees }))
    }
}

// ---------------------------------------------------------------------------
// Query widths: optimal access-top VO of the fracture
// ---------------------------------------------------------------------------

/// Dynamic and static width of `q`: the lexicographic minimum of
/// `(dynamic, static)` over all access-top variable orders of the fracture,
/// with a witness order achieving it. The maxima defining forest widths
/// decompose per component, so each component is optimised independently.
pub fn query_widths(q: &Query) -> Result<(Widths, VariableOrder)> {
    query_widths_with_limit(q, DEFAULT_VAR_LIMIT)
}

pub fn query_widths_with_limit(q: &Query, limit: usize) -> Result<(Widths, VariableOrder)> {
    let f = fracture(q).fracture;
    let per_component = access_top_trees_per_component(&f, limit)?;

    struct Cand {
        vo: VariableOrder,
        widths: Widths,
        preorder: Vec<Var>,
    }
    let evaluated: Vec<Vec<Cand>> = per_component
        .into_iter()
        .map(|trees| {
            trees
                .into_iter()
                .map(|t| {
                    let vo = add_indicators(&f, &VariableOrder::single(t));
                    let widths = vo_widths(&f, &vo);
                    let preorder = vo.preorder_vars();
                    Cand { vo, widths, preorder }
                })
                .collect()
        })
        .collect();

    let delta = evaluated
        .iter()
        .map(|cands| cands.iter().map(|c| c.widths.dynamic.clone()).min().unwrap())
        .max()
        .unwrap();
    let mut w = Rat::zero();
    let mut witness_trees = Vec::new();
    for cands in &evaluated {
        let best = cands
            .iter()
            .filter(|c| c.widths.dynamic <= delta)
            .min_by(|a, b| {
                a.widths
                    .static_
                    .cmp(&b.widths.static_)
                    .then_with(|| a.preorder.cmp(&b.preorder))
            })
            .unwrap();
        if best.widths.static_ > w {
            w = best.widths.static_.clone();
        }
        witness_trees.push(best.vo.trees[0].clone());
    }
    Ok((Widths { dynamic: delta, static_: w }, VariableOrder { trees: witness_trees }))
}

// ---------------------------------------------------------------------------
// Canonical variable orders
// ---------------------------------------------------------------------------

/// All canonical variable orders of a hierarchical query: along every
/// root-to-leaf path the inner nodes are exactly the leaf atom's variables.
/// Chains of interchangeable variables are emitted with the stratum-sorted
/// order first, so for queries whose fracture is in the tractable class the
/// first canonical order is also access-top.
pub fn canonical_vos(q: &Query) -> Result<Vec<VariableOrder>> {
    if !structural_tests(q).hierarchical {
        return Err(Error::NotHierarchical);
    }
    let per_component: Vec<Vec<VoNode>> = component_atoms(q)
        .iter()
        .map(|g| canonical_trees(q, g, &IndexSet::new()))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    let mut idx = vec![0usize; per_component.len()];
    loop {
        out.push(VariableOrder {
            trees: per_component.iter().zip(&idx).map(|(c, &i)| c[i].clone()).collect(),
        });
        let mut k = idx.len();
        loop {
            if k == 0 {
                return Ok(out);
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < per_component[k].len() {
                break;
            }
            idx[k] = 0;
        }
    }
}

fn canonical_trees(
    q: &Query,
    group: &IndexSet<usize>,
    anc: &IndexSet<Var>,
) -> Result<Vec<VoNode>> {
    let vars = group_vars(q, group, anc);
    // variables occurring in every atom of the group
    let mut shared: Vec<Var> = vars
        .iter()
        .filter(|v| group.iter().all(|&i| q.atoms[i].contains(v)))
        .cloned()
        .collect();
    if shared.is_empty() {
        return Err(Error::NotHierarchical);
    }
    shared.sort_by_key(|v| (q.stratum(v), v.clone()));

    let mut out = Vec::new();
    for perm in permutations(&shared) {
        let mut anc2 = anc.clone();
        anc2.extend(perm.iter().cloned());

        let mut leaves: Vec<VoNode> = Vec::new();
        let mut rest: IndexSet<usize> = IndexSet::new();
        for &i in group {
            if q.atoms[i].schema.iter().all(|v| anc2.contains(v)) {
                leaves.push(VoNode::Atom(AtomLeaf {
                    atom: q.atoms[i].clone(),
                    atom_idx: i,
                    signature: Vec::new(),
                }));
            } else {
                rest.insert(i);
            }
        }
        let subgroups = split_groups(q, &rest, &anc2);
        let per_sub: Vec<Vec<VoNode>> = subgroups
            .iter()
            .map(|g| canonical_trees(q, g, &anc2))
            .collect::<Result<_>>()?;
        for combo in cartesian(&per_sub) {
            let mut children = leaves.clone();
            children.extend(combo.into_iter().cloned());
            // fold the chain bottom-up
            let mut node = VoNode::Var { var: perm[perm.len() - 1].clone(), children };
            for v in perm.iter().rev().skip(1) {
                node = VoNode::Var { var: v.clone(), children: vec![node] };
            }
            out.push(node);
        }
    }
    Ok(out)
}

fn permutations<T: Clone>(items: &[T]) -> Vec<Vec<T>> {
    if items.is_empty() {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest: Vec<T> = items.to_vec();
        let x = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, x.clone());
            out.push(p);
        }
    }
    out
}

/// True iff along every root-to-leaf path the inner variables are exactly
/// the leaf atom's variables.
pub fn is_canonical(vo: &VariableOrder) -> bool {
    fn walk(n: &VoNode, path: &mut Vec<Var>) -> bool {
        match n {
            VoNode::Var { var, children } => {
                path.push(var.clone());
                let ok = children.iter().all(|c| walk(c, path));
                path.pop();
                ok
            }
            VoNode::Atom(a) => {
                let schema: IndexSet<&Var> = a.atom.schema.iter().collect();
                path.len() == schema.len() && path.iter().all(|v| schema.contains(v))
            }
            VoNode::Indicator(_) => true,
        }
    }
    vo.trees.iter().all(|t| walk(t, &mut Vec::new()))
}

// ---------------------------------------------------------------------------
// Validity checks (used by tests and debug assertions)
// ---------------------------------------------------------------------------

/// Structural validity of an extended VO for `q`: one node per variable,
/// each atom exactly once as a leaf under its lowest variable, every atom's
/// variables on one root-to-leaf path.
pub fn validate_vo(q: &Query, vo: &VariableOrder) -> std::result::Result<(), String> {
    let mut seen_vars: IndexSet<Var> = IndexSet::new();
    let mut seen_atoms: IndexSet<usize> = IndexSet::new();

    fn walk(
        q: &Query,
        n: &VoNode,
        anc: &mut Vec<Var>,
        seen_vars: &mut IndexSet<Var>,
        seen_atoms: &mut IndexSet<usize>,
    ) -> std::result::Result<(), String> {
        match n {
            VoNode::Var { var, children } => {
                if !seen_vars.insert(var.clone()) {
                    return Err(format!("variable {var} appears twice"));
                }
                anc.push(var.clone());
                for c in children {
                    walk(q, c, anc, seen_vars, seen_atoms)?;
                }
                anc.pop();
                Ok(())
            }
            VoNode::Atom(a) => {
                if !seen_atoms.insert(a.atom_idx) {
                    return Err(format!("atom {} appears twice", a.atom));
                }
                let Some(parent) = anc.last() else {
                    return Err(format!("atom {} attached above all variables", a.atom));
                };
                if !a.atom.contains(parent) {
                    return Err(format!(
                        "atom {} is not attached to one of its variables",
                        a.atom
                    ));
                }
                for v in &a.atom.schema {
                    if !anc.contains(v) {
                        return Err(format!(
                            "variables of atom {} do not lie on one path",
                            a.atom
                        ));
                    }
                }
                Ok(())
            }
            VoNode::Indicator(i) => {
                for v in &i.key {
                    if !anc.contains(v) {
                        return Err(format!(
                            "indicator {} key outside its root path",
                            i.label()
                        ));
                    }
                }
                Ok(())
            }
        }
    }

    for t in &vo.trees {
        walk(q, t, &mut Vec::new(), &mut seen_vars, &mut seen_atoms)?;
    }
    let vars = q.vars();
    if seen_vars.len() != vars.len() || !vars.iter().all(|v| seen_vars.contains(v)) {
        return Err("variable nodes do not cover the query variables".into());
    }
    if seen_atoms.len() != q.atoms.len() {
        return Err("atoms are not all placed".into());
    }
    Ok(())
}

/// True iff no bound variable is above a free one and no output variable is
/// above an input one.
pub fn is_access_top(q: &Query, vo: &VariableOrder) -> bool {
    fn walk(q: &Query, n: &VoNode, max_stratum: Stratum) -> bool {
        match n {
            VoNode::Var { var, children } => {
                let s = q.stratum(var);
                if s < max_stratum {
                    return false;
                }
                children.iter().all(|c| walk(q, c, s.max(max_stratum)))
            }
            _ => true,
        }
    }
    vo.trees.iter().all(|t| walk(q, t, Stratum::Input))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qmodel::parse_query;
    use crate::rat;
    use num_traits::One;

    fn q(text: &str) -> Query {
        parse_query(text).unwrap()
    }

    fn vars(list: &[&str]) -> IndexSet<Var> {
        list.iter().map(|s| s.to_string()).collect()
    }

    // ----- independent oracle: vertex enumeration for the cover LP -----

    /// Gaussian elimination over exact rationals; returns the unique
    /// solution of a square system if it exists.
    fn solve_square(mut a: Vec<Vec<Rat>>, mut b: Vec<Rat>) -> Option<Vec<Rat>> {
        let n = b.len();
        for col in 0..n {
            let pivot = (col..n).find(|&r| !a[r][col].is_zero())?;
            a.swap(col, pivot);
            b.swap(col, pivot);
            let p = a[col][col].clone();
            for x in a[col].iter_mut() {
                *x /= p.clone();
            }
            b[col] /= p.clone();
            for r in 0..n {
                if r != col && !a[r][col].is_zero() {
                    let f = a[r][col].clone();
                    for c2 in 0..n {
                        let sub = f.clone() * a[col][c2].clone();
                        a[r][c2] -= sub;
                    }
                    let sub = f * b[col].clone();
                    b[r] -= sub;
                }
            }
        }
        Some(b)
    }

    /// Brute force over vertex solutions: every subset of n active
    /// constraints gives a candidate point; the optimum is the smallest
    /// objective among the feasible ones.
    fn vertex_lp_min(covers: &[Vec<usize>], n: usize) -> Option<Rat> {
        if covers.is_empty() {
            return Some(Rat::zero());
        }
        if covers.iter().any(|c| c.is_empty()) {
            return None;
        }
        // rows: cover constraints, then x_j >= 0, then x_j <= 1
        let mut rows: Vec<(Vec<Rat>, Rat)> = Vec::new();
        for cover in covers {
            let mut coef = vec![Rat::zero(); n];
            for &j in cover {
                coef[j] = Rat::one();
            }
            rows.push((coef, Rat::one()));
        }
        for j in 0..n {
            let mut coef = vec![Rat::zero(); n];
            coef[j] = Rat::one();
            rows.push((coef.clone(), Rat::zero()));
            rows.push((coef, Rat::one()));
        }

        let mut best: Option<Rat> = None;
        let mut combo = vec![0usize; n];
        fn rec(
            rows: &[(Vec<Rat>, Rat)],
            covers: &[Vec<usize>],
            n: usize,
            start: usize,
            depth: usize,
            combo: &mut Vec<usize>,
            best: &mut Option<Rat>,
        ) {
            if depth == n {
                let a: Vec<Vec<Rat>> = combo.iter().map(|&i| rows[i].0.clone()).collect();
                let b: Vec<Rat> = combo.iter().map(|&i| rows[i].1.clone()).collect();
                let Some(x) = solve_square(a, b) else { return };
                // feasibility
                for xi in &x {
                    if *xi < Rat::zero() || *xi > Rat::one() {
                        return;
                    }
                }
                for cover in covers {
                    let s: Rat = cover.iter().map(|&j| x[j].clone()).sum();
                    if s < Rat::one() {
                        return;
                    }
                }
                let obj: Rat = x.iter().cloned().sum();
                if best.is_none() || Some(&obj) < best.as_ref() {
                    *best = Some(obj);
                }
            } else {
                for i in start..rows.len() {
                    combo[depth] = i;
                    rec(rows, covers, n, i + 1, depth + 1, combo, best);
                }
            }
        }
        rec(&rows, covers, n, 0, 0, &mut combo, &mut best);
        best
    }

    fn covers_for(q: &Query, f: &IndexSet<Var>) -> Vec<Vec<usize>> {
        f.iter()
            .map(|v| {
                q.atoms
                    .iter()
                    .enumerate()
                    .filter(|(_, a)| a.contains(v))
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect()
    }

    #[test]
    fn fractional_cover_triangle_with_indicator_is_three_halves() {
        // indicator projection in place of R lowers the cover from 2 to 3/2
        let body = q("Q(.|.) = IR(A,B), S(B,C), T(C,A).");
        let f = vars(&["A", "B", "C"]);
        assert_eq!(fractional_edge_cover(&body, &f), rat(3, 2));
        assert_eq!(vertex_lp_min(&covers_for(&body, &f), 3), Some(rat(3, 2)));
    }

    #[test]
    fn fractional_cover_empty_set_is_zero() {
        let body = q("Q(.|.) = R(A,B).");
        assert_eq!(fractional_edge_cover(&body, &IndexSet::new()), rat(0, 1));
    }

    #[test]
    fn fractional_cover_path_matches_vertex_oracle() {
        let body = q("Q(.|.) = R(A,B), S(B,C).");
        let f = vars(&["A", "B", "C"]);
        let expect = vertex_lp_min(&covers_for(&body, &f), 2).unwrap();
        assert_eq!(expect, rat(2, 1));
        assert_eq!(fractional_edge_cover(&body, &f), expect);
    }

    #[test]
    fn fractional_cover_agrees_with_vertex_oracle_on_small_bodies() {
        let bodies = [
            "Q(.|.) = R(A,B), S(B,C), T(C,A).",
            "Q(.|.) = R(A,B), S(B,C), T(C,D), U(A,D).",
            "Q(.|.) = R(A,B,C), S(C,D), T(B,D).",
            "Q(.|.) = R(A), S(A,B), T(B).",
            "Q(.|.) = R(A,B), S(A,B), T(B,C).",
        ];
        for text in bodies {
            let body = q(text);
            let all: IndexSet<Var> = body.vars();
            // every non-empty subset of the variables
            let vs: Vec<Var> = all.into_iter().collect();
            for mask in 1u32..(1 << vs.len()) {
                let f: IndexSet<Var> = vs
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| mask & (1 << i) != 0)
                    .map(|(_, v)| v.clone())
                    .collect();
                let got = fractional_edge_cover(&body, &f);
                let want = vertex_lp_min(&covers_for(&body, &f), body.atoms.len())
                    .expect("feasible");
                assert_eq!(got, want, "{text} f={f:?}");
            }
        }
    }

    #[test]
    fn integral_cover_examples() {
        let h = q("Q1(B,C,D|A1) = R(A1,B,C), S(A1,B,D).");
        let f = vars(&["A1", "B", "C"]);
        assert_eq!(integral_edge_cover(&h, &f), 1);
        assert_eq!(fractional_edge_cover(&h, &f), rat(1, 1));
        assert_eq!(integral_edge_cover(&h, &IndexSet::new()), 0);

        let tri = q("Q(.|.) = R(A,B), S(B,C), T(C,A).");
        assert_eq!(integral_edge_cover(&tri, &vars(&["A", "B", "C"])), 2);
    }

    #[test]
    fn hierarchical_queries_have_equal_covers() {
        for text in [
            "Q(.|.) = R(A,B,C), S(A,B,D), T(A,E).",
            "Q(.|.) = R(A,B), S(A,B), T(A).",
            "Q(.|.) = R(A), S(B).",
        ] {
            let body = q(text);
            let vs: Vec<Var> = body.vars().into_iter().collect();
            for mask in 0u32..(1 << vs.len()) {
                let f: IndexSet<Var> = vs
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| mask & (1 << i) != 0)
                    .map(|(_, v)| v.clone())
                    .collect();
                let frac = fractional_edge_cover(&body, &f);
                let int = integral_edge_cover(&body, &f);
                assert_eq!(frac, Rat::from_integer((int as i64).into()), "{text}");
            }
        }
    }

    #[test]
    fn rho_star_is_monotone_and_below_integral() {
        let body = q("Q(.|.) = R(A,B), S(B,C), T(C,A), U(A,D).");
        let vs: Vec<Var> = body.vars().into_iter().collect();
        for mask in 0u32..(1 << vs.len()) {
            let f: IndexSet<Var> = vs
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, v)| v.clone())
                .collect();
            let rf = fractional_edge_cover(&body, &f);
            let ri = integral_edge_cover(&body, &f);
            assert!(rf <= Rat::from_integer((ri as i64).into()));
            assert!(ri <= body.atoms.len());
            // supersets only grow
            for (i, v) in vs.iter().enumerate() {
                if mask & (1 << i) == 0 {
                    let mut g = f.clone();
                    g.insert(v.clone());
                    assert!(fractional_edge_cover(&body, &g) >= rf);
                }
            }
        }
    }

    // ----- GYO -----

    fn edges(list: &[&[&str]]) -> Vec<IndexSet<Var>> {
        list.iter()
            .map(|e| e.iter().map(|s| s.to_string()).collect())
            .collect()
    }

    #[test]
    fn gyo_keeps_cycle_closing_indicator() {
        let ind = edges(&[&["A", "B"]]);
        let atoms = edges(&[&["B", "C"], &["C", "A"]]);
        assert_eq!(gyo_star(&ind, &atoms), vec![0]);
    }

    #[test]
    fn gyo_drops_indicators_on_acyclic_joins() {
        let ind = edges(&[&["A"], &["B"]]);
        let atoms = edges(&[&["A", "B"], &["B", "C"]]);
        assert_eq!(gyo_star(&ind, &atoms), Vec::<usize>::new());
    }

    #[test]
    fn gyo_empty_indicators() {
        let atoms = edges(&[&["A", "B"], &["B", "C"], &["C", "A"]]);
        assert_eq!(gyo_star(&[], &atoms), Vec::<usize>::new());
    }

    // ----- indicators on VOs -----

    fn triangle_vo(q: &Query) -> VariableOrder {
        // A - B - { R(A,B), C - { S(B,C), T(C,A) } }
        let leaf = |i: usize| {
            VoNode::Atom(AtomLeaf {
                atom: q.atoms[i].clone(),
                atom_idx: i,
                signature: Vec::new(),
            })
        };
        VariableOrder::single(VoNode::Var {
            var: "A".into(),
            children: vec![VoNode::Var {
                var: "B".into(),
                children: vec![
                    leaf(0),
                    VoNode::Var { var: "C".into(), children: vec![leaf(1), leaf(2)] },
                ],
            }],
        })
    }

    #[test]
    fn triangle_vo_gets_indicator_below_c() {
        let tri = q("Q(B,C|A) = R(A,B), S(B,C), T(C,A).");
        let vo = add_indicators(&tri, &triangle_vo(&tri));
        // find the children of C
        fn find_c(n: &VoNode) -> Option<&Vec<VoNode>> {
            match n {
                VoNode::Var { var, children } if var == "C" => Some(children),
                VoNode::Var { children, .. } => children.iter().find_map(find_c),
                _ => None,
            }
        }
        let c_children = find_c(&vo.trees[0]).unwrap();
        let labels: Vec<String> = c_children
            .iter()
            .filter_map(|n| match n {
                VoNode::Indicator(i) => Some(i.label()),
                _ => None,
            })
            .collect();
        assert_eq!(labels, vec!["I{A,B}R(A,B)".to_string()]);
        assert!(validate_vo(&tri, &vo).is_ok());
    }

    #[test]
    fn acyclic_query_gets_no_indicators() {
        let h = q("Q1(B,C,D|A1) = R(A1,B,C), S(A1,B,D).");
        for vo in enumerate_access_top_vos(&h).unwrap() {
            let has_ind = vo
                .trees
                .iter()
                .any(|t| has_indicator(t));
            assert!(!has_ind, "{vo}");
        }
    }

    fn has_indicator(n: &VoNode) -> bool {
        match n {
            VoNode::Indicator(_) => true,
            VoNode::Var { children, .. } => children.iter().any(has_indicator),
            VoNode::Atom(_) => false,
        }
    }

    #[test]
    fn triangle_with_tails_needs_indicator_in_every_optimal_vo() {
        let text = "Q(A,B,C,D,E,F,G,H,J|.) = R1(A,B), R2(B,C), R3(C,A), R4(A,D), \
                    R5(D,E), R6(B,F), R7(F,G), R8(C,H), R9(H,J).";
        let big = q(text);
        let (widths, _) = query_widths(&big).unwrap();
        assert_eq!(widths.dynamic, rat(3, 2));
        let stream = enumerate_access_top_vos(&big).unwrap();
        let mut optimal = 0;
        for vo in stream {
            let w = vo_widths(&big, &vo);
            if (w.dynamic.clone(), w.static_.clone())
                == (widths.dynamic.clone(), widths.static_.clone())
            {
                optimal += 1;
                assert!(
                    vo.trees.iter().any(has_indicator),
                    "optimal VO without indicator: {vo}"
                );
            }
        }
        assert!(optimal > 0);
    }

    // ----- access-top enumeration -----

    #[test]
    fn enumerate_single_atom() {
        let single = q("Q(A|.) = R(A).");
        let vos: Vec<VariableOrder> = enumerate_access_top_vos(&single).unwrap().collect();
        assert_eq!(vos.len(), 1);
        assert_eq!(vos[0].to_string(), "A-R(A)");
    }

    #[test]
    fn enumerate_fractured_intersection() {
        let f = crate::qmodel::fracture(&q("Q2(A|B) = S(A,B), T(B).")).fracture;
        let vos: Vec<String> = enumerate_access_top_vos(&f)
            .unwrap()
            .map(|v| v.to_string())
            .collect();
        assert!(vos.contains(&"B_1-A-S(A,B_1) ; B_2-T(B_2)".to_string()), "{vos:?}");
    }

    #[test]
    fn enumerate_fractured_four_cycle_contains_two_paths() {
        let f = crate::qmodel::fracture(&q(
            "Q1(A,C|B,D) = R(A,B), S(B,C), T(C,D), U(A,D).",
        ))
        .fracture;
        let vos: Vec<String> = enumerate_access_top_vos(&f)
            .unwrap()
            .map(|v| v.to_string())
            .collect();
        let want = "B_1-D_2-A-{R(A,B_1), U(A,D_2)} ; B_2-D_1-C-{S(B_2,C), T(C,D_1)}";
        assert!(vos.contains(&want.to_string()), "{vos:?}");
    }

    #[test]
    fn enumerated_vos_are_valid_and_access_top() {
        for text in [
            "Q(B,C|A) = R(A,B), S(B,C), T(C,A).",
            "Q(A,C|B,D) = R(A,B), S(B,C), T(C,D), U(A,D).",
            "Q(E,D|A,C) = R(A,B,C), S(A,B,D), T(A,E).",
            "Q(A|.) = R(A,B), S(B).",
        ] {
            let f = crate::qmodel::fracture(&q(text)).fracture;
            for vo in enumerate_access_top_vos(&f).unwrap() {
                validate_vo(&f, &vo).unwrap_or_else(|e| panic!("{text}: {e}"));
                assert!(is_access_top(&f, &vo), "{text}: {vo}");
            }
        }
    }

    #[test]
    fn search_guard_trips_on_large_components() {
        let big = q("Q(.|.) = R(A,B,C,D,E), S(E,F,G,H,J).");
        let err = enumerate_access_top_vos_with_limit(&big, 8).unwrap_err();
        assert!(matches!(err, Error::SearchGuard { vars: 9, limit: 8 }));
    }

    // ----- widths -----

    #[test]
    fn triangle_vo_widths() {
        let tri = q("Q(B,C|A) = R(A,B), S(B,C), T(C,A).");
        let vo = add_indicators(&tri, &triangle_vo(&tri));
        let w = vo_widths(&tri, &vo);
        assert_eq!(w.static_, rat(3, 2));
        assert_eq!(w.dynamic, rat(1, 1));
    }

    #[test]
    fn four_cycle_two_path_vo_widths() {
        let f = crate::qmodel::fracture(&q(
            "Q1(A,C|B,D) = R(A,B), S(B,C), T(C,D), U(A,D).",
        ))
        .fracture;
        let target = "B_1-D_2-A-{R(A,B_1), U(A,D_2)} ; B_2-D_1-C-{S(B_2,C), T(C,D_1)}";
        let vo = enumerate_access_top_vos(&f)
            .unwrap()
            .find(|v| v.to_string() == target)
            .unwrap();
        let w = vo_widths(&f, &vo);
        assert_eq!(w.static_, rat(2, 1));
        assert_eq!(w.dynamic, rat(1, 1));
    }

    #[test]
    fn single_atom_vo_widths() {
        let single = q("Q(A|.) = R(A).");
        let vo = enumerate_access_top_vos(&single).unwrap().next().unwrap();
        let w = vo_widths(&single, &vo);
        assert_eq!(w.static_, rat(1, 1));
        assert_eq!(w.dynamic, rat(0, 1));
    }

    #[test]
    fn width_table_of_three_atom_body() {
        let cases = [
            ("Q(C,D,E|A,B) = R(A,B,C), S(A,B,D), T(A,E).", (0, 1), (1, 1)),
            ("Q(A,C,D,E|B) = R(A,B,C), S(A,B,D), T(A,E).", (1, 1), (1, 1)),
            ("Q(A,C,D|B,E) = R(A,B,C), S(A,B,D), T(A,E).", (1, 1), (2, 1)),
            ("Q(A,E|B,C,D) = R(A,B,C), S(A,B,D), T(A,E).", (2, 1), (2, 1)),
            ("Q(A,B|C,D,E) = R(A,B,C), S(A,B,D), T(A,E).", (2, 1), (3, 1)),
            ("Q(B,C,D,E|A) = R(A,B,C), S(A,B,D), T(A,E).", (0, 1), (1, 1)),
        ];
        for (text, (dn, dd), (wn, wd)) in cases {
            let (w, vo) = query_widths(&q(text)).unwrap();
            assert_eq!(w.dynamic, rat(dn, dd), "{text} ({vo})");
            assert_eq!(w.static_, rat(wn, wd), "{text} ({vo})");
        }
    }

    #[test]
    fn triangle_query_widths() {
        let (w, _) = query_widths(&q("Q(B,C|A) = R(A,B), S(B,C), T(C,A).")).unwrap();
        assert_eq!(w.dynamic, rat(1, 1));
        assert_eq!(w.static_, rat(3, 2));
    }

    #[test]
    fn fractured_four_cycle_query_widths() {
        let (w, _) =
            query_widths(&q("Q1(A,C|B,D) = R(A,B), S(B,C), T(C,D), U(A,D).")).unwrap();
        assert_eq!(w.dynamic, rat(1, 1));
        assert_eq!(w.static_, rat(2, 1));
    }

    #[test]
    fn cqap0_queries_have_widths_zero_one() {
        for text in [
            "Q(.|A,B,C) = E(A,B), E(B,C), E(C,A).",
            "Q2(A|B) = S(A,B), T(B).",
            "Q(B,C,D|A) = R(A,B,C), S(A,B,D).",
            "Q(A,B|.) = R(A,B), S(A).",
        ] {
            assert_eq!(crate::qmodel::classify(&q(text)), crate::qmodel::QueryClass::Cqap0);
            let (w, _) = query_widths(&q(text)).unwrap();
            assert_eq!(w.dynamic, rat(0, 1), "{text}");
            assert_eq!(w.static_, rat(1, 1), "{text}");
        }
    }

    #[test]
    fn hierarchical_fracture_delta_is_w_or_w_minus_one() {
        for text in [
            "Q(B|A) = R(A,B), S(B).",
            "Q(A|.) = R(A,B), S(B).",
            "Q3(B|A) = S(A,B), T(B).",
            "Q(E,D|A,C) = R(A,B,C), S(A,B,D), T(A,E).",
            "Q1(A,C|B,D) = R(A,B), S(B,C), T(C,D), U(A,D).",
            "Q(.|B,C) = S(B,A), S(C,A).",
        ] {
            let query = q(text);
            let f = crate::qmodel::fracture(&query).fracture;
            assert!(crate::qmodel::structural_tests(&f).hierarchical, "{text}");
            let (w, _) = query_widths(&query).unwrap();
            let diff = w.static_.clone() - w.dynamic.clone();
            assert!(
                diff.is_zero() || diff == rat(1, 1),
                "{text}: delta={} w={}",
                w.dynamic,
                w.static_
            );
        }
    }

    #[test]
    fn query_widths_invariant_under_renaming_and_reordering() {
        let base = q("Q(B,C|A) = R(A,B), S(B,C), T(C,A).");
        let renamed = q("Q(Y,Z|X) = R(X,Y), S(Y,Z), T(Z,X).");
        let reordered = q("Q(B,C|A) = T(C,A), R(A,B), S(B,C).");
        let (w0, _) = query_widths(&base).unwrap();
        let (w1, _) = query_widths(&renamed).unwrap();
        let (w2, _) = query_widths(&reordered).unwrap();
        assert_eq!(w0, w1);
        assert_eq!(w0, w2);
    }

    // ----- canonical VOs -----

    #[test]
    fn canonical_vo_of_two_atom_hierarchy() {
        let h = q("Q1(B,C,D|A1) = R(A1,B,C), S(A1,B,D).");
        let vos = canonical_vos(&h).unwrap();
        assert_eq!(vos[0].to_string(), "A1-B-{C-R(A1,B,C), D-S(A1,B,D)}");
        for vo in &vos {
            assert!(is_canonical(vo), "{vo}");
            validate_vo(&h, vo).unwrap();
        }
    }

    #[test]
    fn canonical_vo_single_atom() {
        let vos = canonical_vos(&q("Q(A|.) = R(A).")).unwrap();
        assert_eq!(vos.len(), 1);
        assert_eq!(vos[0].to_string(), "A-R(A)");
    }

    #[test]
    fn canonical_vos_reject_non_hierarchical() {
        let cyc = q("Q1(A,C|B,D) = R(A,B), S(B,C), T(C,D), U(A,D).");
        assert!(matches!(canonical_vos(&cyc), Err(Error::NotHierarchical)));
    }
}
