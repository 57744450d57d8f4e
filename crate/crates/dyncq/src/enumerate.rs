//! Constant-delay enumeration over view trees: preorder input checks, a
//! cursor stack over the output variables' views, Cartesian nesting across
//! fracture components, and a duplicate-eliminating union over several
//! iterators for the adaptive mode.

use indexmap::IndexMap;

use crate::engine::{Counters, Engine, ViewTree};
use crate::error::{Error, Result};
use crate::payload::Payload;
use crate::qmodel::Var;
use crate::store::{Cols, Tuple, Value};

/// Total binding of the query's input variables.
#[derive(Debug, Clone, Default)]
pub struct AccessRequest {
    pub bindings: IndexMap<Var, Value>,
}

impl AccessRequest {
    pub fn new(bindings: IndexMap<Var, Value>) -> Self {
        AccessRequest { bindings }
    }
}

/// Identifies a view tree held by a provider: (component, strategy).
pub type TreeRef = (usize, usize);

/// Source of view trees for iterators; implemented by the plain engine and
/// by the adaptive state.
pub trait TreeProvider<P: Payload> {
    fn tree(&self, r: TreeRef) -> &ViewTree<P>;
    fn epoch(&self) -> u64;
    fn counters(&self) -> &Counters;
}

impl<P: Payload> TreeProvider<P> for Engine<P> {
    fn tree(&self, r: TreeRef) -> &ViewTree<P> {
        &self.forest[r.0]
    }
    fn epoch(&self) -> u64 {
        self.epoch
    }
    fn counters(&self) -> &Counters {
        &self.counters
    }
}

#[derive(Debug, Clone)]
struct Frame {
    var: Var,
    /// data node of V_X
    node: usize,
    var_pos: usize,
    key_cols: Cols,
    key: Tuple,
    pos: usize,
    len: usize,
}

/// Cursor over one view tree for fixed bindings: membership checks for the
/// bound variables, one bucket cursor per unbound output variable, odometer
/// advancement. Between yields the work is bounded by the tree depth plus
/// any checks that sit below cursors (which only happens in the adaptive
/// heavy strategies).
#[derive(Debug, Clone)]
pub struct TreeCursor {
    tref: TreeRef,
    bindings: IndexMap<Var, Value>,
    out_order: Vec<Var>,
    state: IndexMap<Var, Value>,
    frames: Vec<Frame>,
    /// checks whose keys involve cursor variables, re-evaluated per move
    dyn_checks: Vec<(Var, usize)>,
    exhausted: bool,
    /// for cursor-free trees: one yield left
    pending_single: bool,
}

impl TreeCursor {
    /// Opens a cursor: performs the membership checks for every variable
    /// with a fixed binding and positions the cursor stack before the first
    /// output tuple. A failed check exhausts the iterator immediately.
    pub fn open<P: Payload>(
        p: &impl TreeProvider<P>,
        tref: TreeRef,
        bindings: IndexMap<Var, Value>,
        out_order: Vec<Var>,
    ) -> TreeCursor {
        let tree = p.tree(tref);
        let ctr = p.counters();
        let mut c = TreeCursor {
            tref,
            bindings: bindings.clone(),
            out_order,
            state: bindings,
            frames: Vec::new(),
            dyn_checks: Vec::new(),
            exhausted: false,
            pending_single: false,
        };
        let mut cursor_vars: Vec<Var> = Vec::new();
        for var in &tree.enum_order {
            let data = tree.data_node(tree.var_views[var]);
            let schema = tree.nodes[data].rel.schema();
            if c.state.contains_key(var) {
                let dynamic = schema.iter().any(|v| cursor_vars.contains(v));
                if dynamic {
                    c.dyn_checks.push((var.clone(), data));
                    continue;
                }
                let key: Option<Tuple> =
                    schema.iter().map(|v| c.state.get(v).copied()).collect();
                ctr.probe();
                match key {
                    Some(k) if tree.nodes[data].rel.contains(&k) => {}
                    _ => {
                        c.exhausted = true;
                        return c;
                    }
                }
            } else if tree.output_vars.contains(var) {
                let var_pos = schema.iter().position(|v| v == var).unwrap();
                let key_cols: Cols = (0..schema.len()).filter(|&i| i != var_pos).collect();
                c.frames.push(Frame {
                    var: var.clone(),
                    node: data,
                    var_pos,
                    key_cols,
                    key: Vec::new(),
                    pos: 0,
                    len: 0,
                });
                cursor_vars.push(var.clone());
            }
        }
        if c.frames.is_empty() {
            // no cursors: at most one (possibly empty) output tuple
            if c.state.is_empty() && c.dyn_checks.is_empty() {
                // nothing checked at all: the component answer is non-empty
                // iff the root view is
                ctr.probe();
                c.exhausted = tree.rel(tree.root).is_empty();
            }
            c.pending_single = !c.exhausted;
            return c;
        }
        if !c.settle(tree, ctr, 0) {
            c.exhausted = true;
        }
        c
    }

    fn rekey<P: Payload>(&mut self, tree: &ViewTree<P>, ctr: &Counters, i: usize) -> bool {
        let f = &mut self.frames[i];
        let rel = &tree.nodes[f.node].rel;
        let schema = rel.schema();
        f.key = f
            .key_cols
            .iter()
            .map(|&c| self.state[&schema[c]])
            .collect();
        ctr.probe();
        f.len = rel.bucket_len(&f.key_cols, &f.key);
        f.pos = 0;
        if f.len == 0 {
            return false;
        }
        ctr.probe();
        let entry = rel.bucket(&f.key_cols, &f.key).nth(0).expect("non-empty bucket");
        self.state.insert(f.var.clone(), entry[f.var_pos]);
        true
    }

    fn bump<P: Payload>(&mut self, tree: &ViewTree<P>, ctr: &Counters, i: usize) -> bool {
        let f = &mut self.frames[i];
        if f.pos + 1 >= f.len {
            return false;
        }
        f.pos += 1;
        ctr.probe();
        let rel = &tree.nodes[f.node].rel;
        let entry = rel
            .bucket(&f.key_cols, &f.key)
            .nth(f.pos)
            .expect("position within bucket");
        self.state.insert(f.var.clone(), entry[f.var_pos]);
        true
    }

    /// Positions frames[level..] on their first entries, advancing earlier
    /// frames when a rebuilt bucket comes up empty.
    fn settle<P: Payload>(&mut self, tree: &ViewTree<P>, ctr: &Counters, level: usize) -> bool {
        let mut level = level;
        'outer: loop {
            let mut i = level;
            while i < self.frames.len() {
                if !self.rekey(tree, ctr, i) {
                    let mut j = i;
                    loop {
                        if j == 0 {
                            return false;
                        }
                        j -= 1;
                        if self.bump(tree, ctr, j) {
                            level = j + 1;
                            continue 'outer;
                        }
                    }
                }
                i += 1;
            }
            return true;
        }
    }

    fn step<P: Payload>(&mut self, tree: &ViewTree<P>, ctr: &Counters) -> bool {
        let mut i = self.frames.len();
        loop {
            if i == 0 {
                return false;
            }
            i -= 1;
            if self.bump(tree, ctr, i) {
                return self.settle(tree, ctr, i + 1);
            }
        }
    }

    fn checks_pass<P: Payload>(&self, tree: &ViewTree<P>, ctr: &Counters) -> bool {
        for (_, data) in &self.dyn_checks {
            let rel = &tree.nodes[*data].rel;
            let key: Option<Tuple> =
                rel.schema().iter().map(|v| self.state.get(v).copied()).collect();
            ctr.probe();
            match key {
                Some(k) if rel.contains(&k) => {}
                _ => return false,
            }
        }
        true
    }

    fn capture(&self) -> Vec<Value> {
        self.out_order.iter().map(|v| self.state[v]).collect()
    }

    /// Next distinct tuple over the cursor's output order, or `None`.
    pub fn next<P: Payload>(&mut self, p: &impl TreeProvider<P>) -> Option<Vec<Value>> {
        if self.exhausted {
            return None;
        }
        let tree = p.tree(self.tref);
        let ctr = p.counters();
        if self.frames.is_empty() {
            if self.pending_single && self.checks_pass(tree, ctr) {
                self.pending_single = false;
                return Some(self.capture());
            }
            self.exhausted = true;
            return None;
        }
        loop {
            if self.checks_pass(tree, ctr) {
                let out = self.capture();
                if !self.step(tree, ctr) {
                    self.exhausted = true;
                }
                return Some(out);
            }
            if !self.step(tree, ctr) {
                self.exhausted = true;
                return None;
            }
        }
    }

    fn reset<P: Payload>(&mut self, p: &impl TreeProvider<P>) {
        *self = TreeCursor::open(p, self.tref, self.bindings.clone(), self.out_order.clone());
    }
}

/// True iff the tree would report the given (partial) assignment: every
/// variable with a value passes its view membership check. Used by the
/// union algorithm's ownership probes.
pub fn tree_probe<P: Payload>(
    tree: &ViewTree<P>,
    assignment: &IndexMap<Var, Value>,
    ctr: &Counters,
) -> bool {
    let mut any = false;
    for var in &tree.enum_order {
        if !assignment.contains_key(var) {
            continue;
        }
        let data = tree.data_node(tree.var_views[var]);
        let rel = &tree.nodes[data].rel;
        let key: Option<Tuple> =
            rel.schema().iter().map(|v| assignment.get(v).copied()).collect();
        ctr.probe();
        match key {
            Some(k) if rel.contains(&k) => any = true,
            _ => return false,
        }
    }
    if !any {
        ctr.probe();
        return !tree.rel(tree.root).is_empty();
    }
    true
}

// ---------------------------------------------------------------------------
// Union with duplicate elimination
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct UnionSource {
    pub tref: TreeRef,
    pub bindings: IndexMap<Var, Value>,
    cursor: TreeCursor,
}

impl UnionSource {
    pub fn open<P: Payload>(
        p: &impl TreeProvider<P>,
        tref: TreeRef,
        bindings: IndexMap<Var, Value>,
        out_order: Vec<Var>,
    ) -> UnionSource {
        let cursor = TreeCursor::open(p, tref, bindings.clone(), out_order);
        UnionSource { tref, bindings, cursor }
    }
}

/// Distinct union of several sources over the same output schema: a tuple
/// is emitted by the lowest-index source that produces it, established by a
/// constant-time membership probe against each earlier source.
#[derive(Debug, Clone)]
pub struct UnionIter {
    pub sources: Vec<UnionSource>,
    out_order: Vec<Var>,
    cur: usize,
}

impl UnionIter {
    pub fn new(sources: Vec<UnionSource>, out_order: Vec<Var>) -> UnionIter {
        UnionIter { sources, out_order, cur: 0 }
    }

    pub fn next<P: Payload>(&mut self, p: &impl TreeProvider<P>) -> Option<Vec<Value>> {
        loop {
            if self.cur >= self.sources.len() {
                return None;
            }
            let Some(vals) = self.sources[self.cur].cursor.next(p) else {
                self.cur += 1;
                continue;
            };
            let mut owned = true;
            for s in 0..self.cur {
                if self.source_would_produce(p, s, &vals) {
                    owned = false;
                    break;
                }
            }
            if owned {
                return Some(vals);
            }
        }
    }

    fn source_would_produce<P: Payload>(
        &self,
        p: &impl TreeProvider<P>,
        s: usize,
        vals: &[Value],
    ) -> bool {
        let src = &self.sources[s];
        let mut asg = src.bindings.clone();
        for (v, &x) in self.out_order.iter().zip(vals) {
            match asg.get(v) {
                Some(&y) if y != x => return false,
                Some(_) => {}
                None => {
                    asg.insert(v.clone(), x);
                }
            }
        }
        tree_probe(p.tree(src.tref), &asg, p.counters())
    }

    fn reset<P: Payload>(&mut self, p: &impl TreeProvider<P>) {
        self.cur = 0;
        for s in &mut self.sources {
            s.cursor.reset(p);
        }
    }
}

// ---------------------------------------------------------------------------
// Product across components
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum ComponentIter {
    Single(TreeCursor),
    Union(UnionIter),
}

impl ComponentIter {
    fn next<P: Payload>(&mut self, p: &impl TreeProvider<P>) -> Option<Vec<Value>> {
        match self {
            ComponentIter::Single(c) => c.next(p),
            ComponentIter::Union(u) => u.next(p),
        }
    }
    fn reset<P: Payload>(&mut self, p: &impl TreeProvider<P>) {
        match self {
            ComponentIter::Single(c) => c.reset(p),
            ComponentIter::Union(u) => u.reset(p),
        }
    }
}

/// Cartesian product of per-component iterators in odometer order; inner
/// components are re-opened when an outer one advances.
#[derive(Debug, Clone)]
pub struct ProductIter {
    comps: Vec<ComponentIter>,
    current: Vec<Option<Vec<Value>>>,
    primed: bool,
    done: bool,
}

impl ProductIter {
    pub fn new(comps: Vec<ComponentIter>) -> ProductIter {
        let n = comps.len();
        ProductIter { comps, current: vec![None; n], primed: false, done: false }
    }

    pub fn next<P: Payload>(&mut self, p: &impl TreeProvider<P>) -> Option<Vec<Vec<Value>>> {
        if self.done {
            return None;
        }
        if !self.primed {
            self.primed = true;
            for (i, c) in self.comps.iter_mut().enumerate() {
                match c.next(p) {
                    Some(t) => self.current[i] = Some(t),
                    None => {
                        self.done = true;
                        return None;
                    }
                }
            }
            return Some(self.assemble());
        }
        let mut i = self.comps.len();
        loop {
            if i == 0 {
                self.done = true;
                return None;
            }
            i -= 1;
            if let Some(t) = self.comps[i].next(p) {
                self.current[i] = Some(t);
                break;
            }
            self.comps[i].reset(p);
            let first = self.comps[i].next(p).expect("component was non-empty");
            self.current[i] = Some(first);
        }
        Some(self.assemble())
    }

    fn assemble(&self) -> Vec<Vec<Value>> {
        self.current.iter().map(|t| t.clone().unwrap()).collect()
    }
}

/// Iterator over the output tuples of a query for one access request. Bound
/// to the epoch at open time: any update invalidates it deterministically.
#[derive(Debug, Clone)]
pub struct OutputIterator {
    pub epoch: u64,
    product: ProductIter,
    /// per final output variable: (component, position in component order)
    slots: Vec<(usize, usize)>,
}

impl OutputIterator {
    pub fn new(epoch: u64, product: ProductIter, slots: Vec<(usize, usize)>) -> OutputIterator {
        OutputIterator { epoch, product, slots }
    }

    pub fn next_with<P: Payload>(
        &mut self,
        p: &impl TreeProvider<P>,
    ) -> Result<Option<Tuple>> {
        if p.epoch() != self.epoch {
            return Err(Error::StaleIterator);
        }
        Ok(self.product.next(p).map(|parts| {
            self.slots.iter().map(|&(c, i)| parts[c][i]).collect()
        }))
    }
}

/// Nests per-component iterators into their Cartesian product.
pub fn product_nest(components: Vec<ComponentIter>) -> ProductIter {
    ProductIter::new(components)
}

/// Distinct union of sources over a shared output schema.
pub fn union_distinct(sources: Vec<UnionSource>, out_order: Vec<Var>) -> UnionIter {
    UnionIter::new(sources, out_order)
}

// ---------------------------------------------------------------------------
// Plain-engine entry points
// ---------------------------------------------------------------------------

/// Opens an output iterator on the plain engine: translates the request
/// onto the fracture's variables, runs the input checks per component tree,
/// and nests the component iterators into a Cartesian product.
pub fn open<P: Payload>(engine: &Engine<P>, req: &AccessRequest) -> Result<OutputIterator> {
    let fb = engine.fracture_bindings(&req.bindings)?;
    let mut comps = Vec::new();
    let mut comp_outs: Vec<Vec<Var>> = Vec::new();
    for (i, tree) in engine.forest.iter().enumerate() {
        let bindings: IndexMap<Var, Value> = tree
            .input_vars
            .iter()
            .map(|v| (v.clone(), fb[v]))
            .collect();
        let out_order = tree.output_vars.clone();
        comps.push(ComponentIter::Single(TreeCursor::open(
            engine,
            (i, 0),
            bindings,
            out_order.clone(),
        )));
        comp_outs.push(out_order);
    }
    let slots = output_slots(&engine.query.output_vars, &comp_outs)?;
    Ok(OutputIterator::new(engine.epoch, ProductIter::new(comps), slots))
}

/// Advances the iterator; errors if an update happened since `open`.
pub fn next<P: Payload>(engine: &Engine<P>, it: &mut OutputIterator) -> Result<Option<Tuple>> {
    it.next_with(engine)
}

/// Drains an iterator into the full (distinct) output set.
pub fn collect_all<P: Payload>(
    engine: &Engine<P>,
    req: &AccessRequest,
) -> Result<indexmap::IndexSet<Tuple>> {
    let mut it = open(engine, req)?;
    let mut out = indexmap::IndexSet::new();
    while let Some(t) = next(engine, &mut it)? {
        out.insert(t);
    }
    Ok(out)
}

pub fn output_slots(
    output_vars: &[Var],
    comp_outs: &[Vec<Var>],
) -> Result<Vec<(usize, usize)>> {
    output_vars
        .iter()
        .map(|v| {
            for (c, outs) in comp_outs.iter().enumerate() {
                if let Some(i) = outs.iter().position(|o| o == v) {
                    return Ok((c, i));
                }
            }
            Err(Error::UnknownVariable(v.clone()))
        })
        .collect()
}
