//! View trees: materialised project-join hierarchies mirroring a variable
//! order. Each variable X owns a view over {X} and its dependency set; an
//! auxiliary view on top marginalises X out when X has siblings. Multiway
//! views are computed by attribute-at-a-time intersection over prefix
//! indexes and maintained by delta propagation along leaf-to-root paths.

use std::cell::Cell;

use indexmap::{IndexMap, IndexSet};

use crate::error::{Error, Result};
use crate::payload::Payload;
use crate::planner::{
    self, canonical_vos, query_widths, Signature, VariableOrder, VoNode, Widths,
};
use crate::qmodel::{fracture, FractureMap, Query, Var};
use crate::store::{project, Cols, Relation, Tuple, UpsertOutcome, Value};

/// Work counters. Touches count view-entry reads and writes during update
/// propagation; probes count bucket and entry accesses during enumeration;
/// join probes count sibling entry visits during materialisation.
#[derive(Debug, Default)]
pub struct Counters {
    pub view_touches: Cell<u64>,
    pub enum_probes: Cell<u64>,
    pub join_probes: Cell<u64>,
}

impl Counters {
    pub fn touch(&self) {
        self.view_touches.set(self.view_touches.get() + 1);
    }
    pub fn probe(&self) {
        self.enum_probes.set(self.enum_probes.get() + 1);
    }
    pub fn join_probe(&self) {
        self.join_probes.set(self.join_probes.get() + 1);
    }
    pub fn reset(&self) {
        self.view_touches.set(0);
        self.enum_probes.set(0);
        self.join_probes.set(0);
    }
    pub fn snapshot(&self) -> (u64, u64, u64) {
        (self.view_touches.get(), self.enum_probes.get(), self.join_probes.get())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    /// Base relation content for one atom occurrence.
    LeafAtom { relation: String, atom_idx: usize, signature: Signature },
    /// Indicator projection of a relation onto a key.
    LeafIndicator { relation: String, source_idx: usize },
    /// View over a variable whose only child is an atom with the same
    /// schema; stores nothing and forwards reads to the leaf.
    Alias,
    /// View joining the children on their shared schema prefix.
    Join { one_to_one: bool },
    /// View marginalising its single child onto a smaller schema.
    Marg,
}

#[derive(Debug, Clone)]
pub struct ViewNode<P> {
    pub schema: Vec<Var>,
    pub kind: NodeKind,
    pub children: Vec<usize>,
    /// VO variable this node is the V_X view of, if any.
    pub var: Option<Var>,
    pub label: String,
    pub rel: Relation<P>,
}

/// A materialised view tree for one tree of a variable order.
#[derive(Debug, Clone)]
pub struct ViewTree<P> {
    pub nodes: Vec<ViewNode<P>>,
    pub root: usize,
    pub parent: Vec<Option<usize>>,
    /// V_X node per variable.
    pub var_views: IndexMap<Var, usize>,
    /// Variables in VO preorder.
    pub enum_order: Vec<Var>,
    /// Free variables of this tree, in preorder.
    pub input_vars: Vec<Var>,
    pub output_vars: Vec<Var>,
    /// atom index -> leaf node.
    pub atom_leaves: IndexMap<usize, usize>,
    pub indicator_leaves: Vec<usize>,
    /// Per node, the variables of the leaf schemas in its subtree.
    pub subtree_vars: Vec<IndexSet<Var>>,
}

impl<P: Payload> ViewTree<P> {
    /// Builds the structural view tree for one tree of an extended VO:
    /// views over {X} and dep(X) per variable, auxiliary marginalising
    /// views for variables with siblings, and the alias shortcut when a
    /// variable's only child is an atom over exactly its schema.
    pub fn build(q: &Query, vo_tree: &VoNode) -> ViewTree<P> {
        let dep = VariableOrder::single(vo_tree.clone()).dep_map();
        let mut t = ViewTree {
            nodes: Vec::new(),
            root: 0,
            parent: Vec::new(),
            var_views: IndexMap::new(),
            enum_order: Vec::new(),
            input_vars: Vec::new(),
            output_vars: Vec::new(),
            atom_leaves: IndexMap::new(),
            indicator_leaves: Vec::new(),
            subtree_vars: Vec::new(),
        };
        let root = t.build_node(vo_tree, &mut Vec::new(), false, &dep);
        t.root = root;
        t.parent = vec![None; t.nodes.len()];
        for (i, n) in t.nodes.iter().enumerate() {
            for &c in &n.children {
                t.parent[c] = Some(i);
            }
        }
        let mut order = Vec::new();
        vo_preorder(vo_tree, &mut order);
        t.enum_order = order;
        t.input_vars = t.enum_order.iter().filter(|v| q.is_input(v)).cloned().collect();
        t.output_vars = t.enum_order.iter().filter(|v| q.is_output(v)).cloned().collect();
        t.subtree_vars = vec![IndexSet::new(); t.nodes.len()];
        collect_subtree_vars(&t.nodes, t.root, &mut t.subtree_vars);
        t.register_indexes();
        t
    }

    fn push(&mut self, node: ViewNode<P>) -> usize {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    fn build_node(
        &mut self,
        n: &VoNode,
        anc: &mut Vec<Var>,
        has_sibling: bool,
        dep: &IndexMap<Var, IndexSet<Var>>,
    ) -> usize {
        match n {
            VoNode::Atom(a) => {
                let id = self.push(ViewNode {
                    schema: a.atom.schema.clone(),
                    kind: NodeKind::LeafAtom {
                        relation: a.atom.relation.clone(),
                        atom_idx: a.atom_idx,
                        signature: a.signature.clone(),
                    },
                    children: Vec::new(),
                    var: None,
                    label: a.label(),
                    rel: Relation::new(a.atom.schema.clone()),
                });
                self.atom_leaves.insert(a.atom_idx, id);
                id
            }
            VoNode::Indicator(i) => {
                let id = self.push(ViewNode {
                    schema: i.key.clone(),
                    kind: NodeKind::LeafIndicator {
                        relation: i.relation.clone(),
                        source_idx: i.source_idx,
                    },
                    children: Vec::new(),
                    var: None,
                    label: i.label(),
                    rel: Relation::new(i.key.clone()),
                });
                self.indicator_leaves.push(id);
                id
            }
            VoNode::Var { var, children } => {
                anc.push(var.clone());
                let sibling_below = children.len() >= 2;
                let child_ids: Vec<usize> = children
                    .iter()
                    .map(|c| self.build_node(c, anc, sibling_below, dep))
                    .collect();
                anc.pop();

                // bag ordered along the root path, X last
                let mut schema: Vec<Var> = anc
                    .iter()
                    .filter(|a| dep[var].contains(*a))
                    .cloned()
                    .collect();
                schema.push(var.clone());

                let vx = if children.len() == 1 && matches!(children[0], VoNode::Atom(_)) {
                    let leaf = child_ids[0];
                    let leaf_schema = self.nodes[leaf].schema.clone();
                    debug_assert_eq!(
                        to_set(&leaf_schema),
                        to_set(&schema),
                        "alias schema mismatch"
                    );
                    self.push(ViewNode {
                        schema: leaf_schema,
                        kind: NodeKind::Alias,
                        children: vec![leaf],
                        var: Some(var.clone()),
                        label: format!("V_{var}({})", schema.join(",")),
                        rel: Relation::new(Vec::new()),
                    })
                } else if children.len() == 1 {
                    self.push(ViewNode {
                        schema: schema.clone(),
                        kind: NodeKind::Marg,
                        children: child_ids.clone(),
                        var: Some(var.clone()),
                        label: format!("V_{var}({})", schema.join(",")),
                        rel: Relation::new(schema.clone()),
                    })
                } else {
                    let one_to_one = child_ids
                        .iter()
                        .all(|&c| to_set(&self.nodes[c].schema) == to_set(&schema));
                    self.push(ViewNode {
                        schema: schema.clone(),
                        kind: NodeKind::Join { one_to_one },
                        children: child_ids.clone(),
                        var: Some(var.clone()),
                        label: format!("V_{var}({})", schema.join(",")),
                        rel: Relation::new(schema.clone()),
                    })
                };
                self.var_views.insert(var.clone(), vx);

                if has_sibling {
                    let aux_schema: Vec<Var> =
                        schema.iter().filter(|v| *v != var).cloned().collect();
                    self.push(ViewNode {
                        schema: aux_schema.clone(),
                        kind: NodeKind::Marg,
                        children: vec![vx],
                        var: None,
                        label: format!("V'_{var}({})", aux_schema.join(",")),
                        rel: Relation::new(aux_schema),
                    })
                } else {
                    vx
                }
            }
        }
    }

    /// Node whose relation actually stores the data (dereferencing the
    /// alias shortcut).
    pub fn data_node(&self, id: usize) -> usize {
        match self.nodes[id].kind {
            NodeKind::Alias => self.nodes[id].children[0],
            _ => id,
        }
    }

    pub fn rel(&self, id: usize) -> &Relation<P> {
        &self.nodes[self.data_node(id)].rel
    }

    fn register_indexes(&mut self) {
        // enumeration buckets: every V_X keyed by its schema minus X
        for (var, &vx) in self.var_views.clone().iter() {
            let data = self.data_node(vx);
            let cols: Cols = self.nodes[data]
                .schema
                .iter()
                .enumerate()
                .filter(|(_, v)| *v != var)
                .map(|(i, _)| i)
                .collect();
            self.nodes[data].rel.register_index(&cols);
            // distinct-value listing of X for adaptive instantiation
            let var_col: Cols = self.nodes[data]
                .schema
                .iter()
                .enumerate()
                .filter(|(_, v)| *v == var)
                .map(|(i, _)| i)
                .collect();
            self.nodes[data].rel.register_index(&var_col);
        }
        // join support
        for id in 0..self.nodes.len() {
            let NodeKind::Join { one_to_one } = self.nodes[id].kind else { continue };
            if one_to_one {
                continue;
            }
            let children = self.nodes[id].children.clone();
            let order = self.exploration_order(id);
            // materialisation: prefixes of the exploration order
            for &c in &children {
                for l in 1..=order.len() {
                    let prefix: IndexSet<&Var> = order[..l].iter().collect();
                    self.register_subset(c, &prefix);
                }
            }
            // deltas: one child bound, remaining path vars iterated
            let schema_order = self.nodes[id].schema.clone();
            for &u in &children {
                let bound: IndexSet<Var> = self.nodes[self.data_node(u)]
                    .schema
                    .iter()
                    .cloned()
                    .collect();
                let free: Vec<Var> =
                    schema_order.iter().filter(|v| !bound.contains(*v)).cloned().collect();
                for &c in &children {
                    if c == u {
                        continue;
                    }
                    for l in 0..=free.len() {
                        let mut set: IndexSet<&Var> = bound.iter().collect();
                        set.extend(free[..l].iter());
                        self.register_subset(c, &set);
                    }
                }
            }
        }
    }

    fn register_subset(&mut self, child: usize, vars: &IndexSet<&Var>) {
        let data = self.data_node(child);
        let cols: Cols = self.nodes[data]
            .schema
            .iter()
            .enumerate()
            .filter(|(_, v)| vars.contains(v))
            .map(|(i, _)| i)
            .collect();
        if !cols.is_empty() && cols.len() < self.nodes[data].schema.len() {
            self.nodes[data].rel.register_index(&cols);
        }
    }

    pub fn clear_leaf(&mut self, id: usize) {
        self.nodes[id].rel.clear();
    }

    pub fn fill_leaf<'a>(
        &mut self,
        id: usize,
        data: impl Iterator<Item = (&'a Tuple, &'a P)>,
    ) -> Result<()> {
        for (t, p) in data {
            self.nodes[id].rel.upsert(t, p)?;
        }
        Ok(())
    }

    /// Recomputes every view bottom-up from the current leaf contents.
    pub fn materialize_views(&mut self, ctr: &Counters) {
        let order = self.postorder();
        for id in order {
            match &self.nodes[id].kind {
                NodeKind::LeafAtom { .. } | NodeKind::LeafIndicator { .. } | NodeKind::Alias => {}
                NodeKind::Marg => self.recompute_marg(id, ctr),
                NodeKind::Join { one_to_one } => {
                    let one = *one_to_one;
                    self.recompute_join(id, one, ctr)
                }
            }
        }
    }

    fn postorder(&self) -> Vec<usize> {
        fn walk<P>(nodes: &[ViewNode<P>], id: usize, out: &mut Vec<usize>) {
            for &c in &nodes[id].children {
                walk(nodes, c, out);
            }
            out.push(id);
        }
        let mut out = Vec::new();
        walk(&self.nodes, self.root, &mut out);
        out
    }

    fn take_rel(&mut self, id: usize) -> Relation<P> {
        std::mem::replace(&mut self.nodes[id].rel, Relation::new(Vec::new()))
    }

    fn recompute_marg(&mut self, id: usize, ctr: &Counters) {
        let child = self.data_node(self.nodes[id].children[0]);
        let mut rel = self.take_rel(id);
        rel.clear();
        let cols: Cols = cols_of(&self.nodes[child].schema, &self.nodes[id].schema);
        let _ = ctr;
        for (t, p) in self.nodes[child].rel.iter() {
            rel.upsert(&project(t, &cols), p).expect("arity");
        }
        self.nodes[id].rel = rel;
    }

    /// Attribute order for multiway materialisation: variables shared by
    /// more children come first, ties broken by path position. Visiting
    /// join keys early keeps the per-extension fan-out within the degree
    /// bounds of the partitioned parts.
    fn exploration_order(&self, id: usize) -> Vec<Var> {
        let schema = &self.nodes[id].schema;
        let children = &self.nodes[id].children;
        let mut order: Vec<(usize, usize, Var)> = schema
            .iter()
            .enumerate()
            .map(|(pos, v)| {
                let holders = children
                    .iter()
                    .filter(|&&c| self.nodes[self.data_node(c)].schema.contains(v))
                    .count();
                (usize::MAX - holders, pos, v.clone())
            })
            .collect();
        order.sort();
        order.into_iter().map(|(_, _, v)| v).collect()
    }

    fn recompute_join(&mut self, id: usize, one_to_one: bool, ctr: &Counters) {
        let schema = self.nodes[id].schema.clone();
        let children: Vec<usize> =
            self.nodes[id].children.iter().map(|&c| self.data_node(c)).collect();
        let mut rel = self.take_rel(id);
        rel.clear();

        if one_to_one {
            let smallest = *children
                .iter()
                .min_by_key(|&&c| self.nodes[c].rel.len())
                .expect("join has children");
            let maps: Vec<Cols> = children
                .iter()
                .map(|&c| cols_of(&self.nodes[smallest].schema, &self.nodes[c].schema))
                .collect();
            let out_cols = cols_of(&self.nodes[smallest].schema, &schema);
            'entry: for (t, _) in self.nodes[smallest].rel.iter() {
                ctr.join_probe();
                let mut payload: Option<P> = None;
                for (&c, m) in children.iter().zip(&maps) {
                    let key = project(t, m);
                    match self.nodes[c].rel.payload(&key) {
                        Some(p) => {
                            payload = Some(match payload {
                                None => p.clone(),
                                Some(acc) => acc.times(p),
                            })
                        }
                        None => continue 'entry,
                    }
                }
                rel.upsert(&project(t, &out_cols), &payload.unwrap()).expect("arity");
            }
        } else {
            let order = self.exploration_order(id);
            let mut bound: Vec<Option<Value>> = vec![None; schema.len()];
            self.join_rec(&schema, &order, &children, 0, &mut bound, &mut rel, ctr);
        }
        self.nodes[id].rel = rel;
    }

    /// Attribute-at-a-time intersection: the smallest bucket drives each
    /// level, the other children are probed for the candidate value.
    #[allow(clippy::too_many_arguments)]
    fn join_rec(
        &self,
        schema: &[Var],
        order: &[Var],
        children: &[usize],
        level: usize,
        bound: &mut Vec<Option<Value>>,
        out: &mut Relation<P>,
        ctr: &Counters,
    ) {
        if level == order.len() {
            let t: Tuple = bound.iter().map(|v| v.unwrap()).collect();
            let mut payload: Option<P> = None;
            for &c in children {
                let key: Tuple = self.nodes[c]
                    .schema
                    .iter()
                    .map(|v| bound[schema.iter().position(|s| s == v).unwrap()].unwrap())
                    .collect();
                let Some(p) = self.nodes[c].rel.payload(&key) else { return };
                payload = Some(match payload {
                    None => p.clone(),
                    Some(acc) => acc.times(p),
                });
            }
            out.upsert(&t, &payload.expect("join has children")).expect("arity");
            return;
        }
        let v = &order[level];
        let holders: Vec<usize> = children
            .iter()
            .copied()
            .filter(|&c| self.nodes[c].schema.contains(v))
            .collect();
        debug_assert!(!holders.is_empty(), "schema variable not covered by children");

        let driver = *holders
            .iter()
            .min_by_key(|&&c| {
                let (cols, key) =
                    bound_key(&self.nodes[c].schema, schema, bound, v, None);
                self.nodes[c].rel.bucket_len(&cols, &key)
            })
            .unwrap();
        let (dcols, dkey) = bound_key(&self.nodes[driver].schema, schema, bound, v, None);
        let vpos_driver = self.nodes[driver].schema.iter().position(|s| s == v).unwrap();

        let mut seen: IndexSet<Value> = IndexSet::new();
        let entries: Vec<Tuple> = self.nodes[driver].rel.bucket(&dcols, &dkey).collect();
        'cand: for t in entries {
            ctr.join_probe();
            let val = t[vpos_driver];
            if !seen.insert(val) {
                continue;
            }
            for &c in &holders {
                if c == driver {
                    continue;
                }
                let (cols, key) =
                    bound_key(&self.nodes[c].schema, schema, bound, v, Some(val));
                ctr.join_probe();
                if self.nodes[c].rel.bucket_len(&cols, &key) == 0 {
                    continue 'cand;
                }
            }
            let pos = schema.iter().position(|s| s == v).unwrap();
            bound[pos] = Some(val);
            self.join_rec(schema, order, children, level + 1, bound, out, ctr);
            bound[pos] = None;
        }
    }

    /// Applies a single-tuple delta to a leaf and propagates it along the
    /// leaf-to-root path.
    pub fn apply_leaf_delta(&mut self, leaf: usize, t: &[Value], dp: &P, ctr: &Counters) {
        ctr.touch();
        {
            let mut rel = self.take_rel(leaf);
            rel.upsert(t, dp).expect("leaf arity");
            self.nodes[leaf].rel = rel;
        }
        let mut deltas: Vec<(Tuple, P)> = vec![(t.to_vec(), dp.clone())];
        let mut cur = leaf;
        while let Some(p) = self.parent[cur] {
            deltas = self.apply_node_deltas(p, cur, deltas, ctr);
            if deltas.is_empty() {
                return;
            }
            cur = p;
        }
    }

    fn apply_node_deltas(
        &mut self,
        node: usize,
        from: usize,
        deltas: Vec<(Tuple, P)>,
        ctr: &Counters,
    ) -> Vec<(Tuple, P)> {
        match self.nodes[node].kind.clone() {
            NodeKind::LeafAtom { .. } | NodeKind::LeafIndicator { .. } => {
                unreachable!("leaves have no children")
            }
            NodeKind::Alias => deltas,
            NodeKind::Marg => {
                let from_schema = self.nodes[self.data_node(from)].schema.clone();
                let cols = cols_of(&from_schema, &self.nodes[node].schema);
                let mut merged: IndexMap<Tuple, P> = IndexMap::new();
                for (t, dp) in &deltas {
                    let key = project(t, &cols);
                    match merged.get_mut(&key) {
                        Some(acc) => *acc = acc.plus(dp),
                        None => {
                            merged.insert(key, dp.clone());
                        }
                    }
                }
                let mut rel = self.take_rel(node);
                let mut out = Vec::new();
                for (t, dp) in merged {
                    if dp.is_zero() {
                        continue;
                    }
                    ctr.touch();
                    rel.upsert(&t, &dp).expect("arity");
                    out.push((t, dp));
                }
                self.nodes[node].rel = rel;
                out
            }
            NodeKind::Join { one_to_one: true } => {
                let schema = self.nodes[node].schema.clone();
                let children: Vec<usize> =
                    self.nodes[node].children.iter().map(|&c| self.data_node(c)).collect();
                let from_schema = self.nodes[self.data_node(from)].schema.clone();
                let map_out = cols_of(&from_schema, &schema);
                let maps: Vec<Cols> =
                    children.iter().map(|&c| cols_of(&from_schema, &self.nodes[c].schema)).collect();
                let mut out = Vec::new();
                let mut applied: Vec<(Tuple, P)> = Vec::new();
                for (t, _) in &deltas {
                    let key = project(t, &map_out);
                    let mut new: Option<P> = None;
                    let mut alive = true;
                    for (&c, m) in children.iter().zip(&maps) {
                        ctr.touch();
                        match self.nodes[c].rel.payload(&project(t, m)) {
                            Some(p) => {
                                new = Some(match new {
                                    None => p.clone(),
                                    Some(acc) => acc.times(p),
                                })
                            }
                            None => {
                                alive = false;
                                break;
                            }
                        }
                    }
                    let old = self.nodes[node].rel.payload(&key).cloned();
                    let delta = match (alive, new, old) {
                        (true, Some(n), Some(o)) => n.minus(&o),
                        (true, Some(n), None) => n,
                        (false, _, Some(o)) => o.negate(),
                        _ => continue,
                    };
                    if delta.is_zero() {
                        continue;
                    }
                    applied.push((key.clone(), delta.clone()));
                    out.push((key, delta));
                }
                let mut rel = self.take_rel(node);
                for (t, dp) in &applied {
                    ctr.touch();
                    rel.upsert(t, dp).expect("arity");
                }
                self.nodes[node].rel = rel;
                out
            }
            NodeKind::Join { one_to_one: false } => {
                let schema = self.nodes[node].schema.clone();
                let children: Vec<usize> =
                    self.nodes[node].children.iter().map(|&c| self.data_node(c)).collect();
                let from_data = self.data_node(from);
                let siblings: Vec<usize> =
                    children.iter().copied().filter(|&c| c != from_data).collect();
                let from_schema = self.nodes[from_data].schema.clone();

                let mut merged: IndexMap<Tuple, P> = IndexMap::new();
                for (t, dp) in &deltas {
                    let mut bound: Vec<Option<Value>> = vec![None; schema.len()];
                    for (v, &x) in from_schema.iter().zip(t.iter()) {
                        if let Some(pos) = schema.iter().position(|s| s == v) {
                            bound[pos] = Some(x);
                        }
                    }
                    let mut acc: Vec<(Tuple, P)> = Vec::new();
                    self.delta_join_rec(&schema, &siblings, 0, &mut bound, dp, &mut acc, ctr);
                    for (t2, p2) in acc {
                        match merged.get_mut(&t2) {
                            Some(a) => *a = a.plus(&p2),
                            None => {
                                merged.insert(t2, p2);
                            }
                        }
                    }
                }
                let mut rel = self.take_rel(node);
                let mut out = Vec::new();
                for (t, dp) in merged {
                    if dp.is_zero() {
                        continue;
                    }
                    ctr.touch();
                    rel.upsert(&t, &dp).expect("arity");
                    out.push((t, dp));
                }
                self.nodes[node].rel = rel;
                out
            }
        }
    }

    /// Bound-prefix delta join: the updated child's variables are fixed to
    /// constants, the remaining path variables are intersected over the
    /// sibling children, and each result carries the delta payload times
    /// the sibling payloads.
    #[allow(clippy::too_many_arguments)]
    fn delta_join_rec(
        &self,
        schema: &[Var],
        siblings: &[usize],
        level: usize,
        bound: &mut Vec<Option<Value>>,
        dp: &P,
        acc: &mut Vec<(Tuple, P)>,
        ctr: &Counters,
    ) {
        if level == schema.len() {
            let t: Tuple = bound.iter().map(|v| v.unwrap()).collect();
            let mut payload = dp.clone();
            for &c in siblings {
                let key: Tuple = self.nodes[c]
                    .schema
                    .iter()
                    .map(|v| bound[schema.iter().position(|s| s == v).unwrap()].unwrap())
                    .collect();
                ctr.touch();
                let Some(p) = self.nodes[c].rel.payload(&key) else { return };
                payload = payload.times(p);
            }
            acc.push((t, payload));
            return;
        }
        if bound[level].is_some() {
            self.delta_join_rec(schema, siblings, level + 1, bound, dp, acc, ctr);
            return;
        }
        let v = &schema[level];
        let holders: Vec<usize> = siblings
            .iter()
            .copied()
            .filter(|&c| self.nodes[c].schema.contains(v))
            .collect();
        if holders.is_empty() {
            // variable only in the updated child; bound already
            unreachable!("unbound schema variable {v} not covered by siblings");
        }
        let driver = *holders
            .iter()
            .min_by_key(|&&c| {
                let (cols, key) =
                    bound_key(&self.nodes[c].schema, schema, bound, v, None);
                self.nodes[c].rel.bucket_len(&cols, &key)
            })
            .unwrap();
        let (dcols, dkey) = bound_key(&self.nodes[driver].schema, schema, bound, v, None);
        let vpos = self.nodes[driver].schema.iter().position(|s| s == v).unwrap();
        let entries: Vec<Tuple> = self.nodes[driver].rel.bucket(&dcols, &dkey).collect();
        let mut seen: IndexSet<Value> = IndexSet::new();
        'cand: for t in entries {
            ctr.touch();
            let val = t[vpos];
            if !seen.insert(val) {
                continue;
            }
            for &c in &holders {
                if c == driver {
                    continue;
                }
                let (cols, key) =
                    bound_key(&self.nodes[c].schema, schema, bound, v, Some(val));
                ctr.touch();
                if self.nodes[c].rel.bucket_len(&cols, &key) == 0 {
                    continue 'cand;
                }
            }
            bound[level] = Some(val);
            self.delta_join_rec(schema, siblings, level + 1, bound, dp, acc, ctr);
            bound[level] = None;
        }
    }

    /// Exact content equality of all views (for recompute cross-checks).
    pub fn same_content(&self, other: &ViewTree<P>) -> bool {
        if self.nodes.len() != other.nodes.len() {
            return false;
        }
        self.nodes.iter().zip(&other.nodes).all(|(a, b)| {
            a.rel.len() == b.rel.len()
                && a.rel.iter().all(|(t, p)| b.rel.payload(t) == Some(p))
        })
    }
}

fn to_set(s: &[Var]) -> IndexSet<&Var> {
    let mut set: IndexSet<&Var> = s.iter().collect();
    set.sort_unstable();
    set
}

/// Bucket key of a child relation under the current partial assignment:
/// columns whose path variables are bound, optionally extending the
/// assignment with a candidate value for the current variable.
fn bound_key(
    child_schema: &[Var],
    schema: &[Var],
    bound: &[Option<Value>],
    v: &Var,
    with_v: Option<Value>,
) -> (Cols, Tuple) {
    let mut cols = Vec::new();
    let mut key = Vec::new();
    for (i, sv) in child_schema.iter().enumerate() {
        let pos = schema.iter().position(|s| s == sv).unwrap();
        if let Some(x) = bound[pos] {
            cols.push(i);
            key.push(x);
        } else if sv == v {
            if let Some(x) = with_v {
                cols.push(i);
                key.push(x);
            }
        }
    }
    (cols, key)
}

/// Positions of `target` columns in `source` (by name).
pub fn cols_of(source: &[Var], target: &[Var]) -> Cols {
    target
        .iter()
        .map(|v| source.iter().position(|s| s == v).expect("column present"))
        .collect()
}

fn vo_preorder(n: &VoNode, out: &mut Vec<Var>) {
    if let VoNode::Var { var, children } = n {
        out.push(var.clone());
        for c in children {
            vo_preorder(c, out);
        }
    }
}

fn collect_subtree_vars<P>(
    nodes: &[ViewNode<P>],
    id: usize,
    out: &mut Vec<IndexSet<Var>>,
) -> IndexSet<Var> {
    let mut vars: IndexSet<Var> = IndexSet::new();
    if nodes[id].children.is_empty() {
        vars.extend(nodes[id].schema.iter().cloned());
    }
    for c in nodes[id].children.clone() {
        vars.extend(collect_subtree_vars(nodes, c, out));
    }
    out[id] = vars.clone();
    vars
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct IndicatorSpec {
    relation: String,
    /// Column positions of the key within the relation.
    cols: Cols,
    /// (tree, node) of every indicator leaf sharing this projection.
    leaves: Vec<(usize, usize)>,
}

/// The incremental evaluation engine: canonical relations, one view tree
/// per connected component of the fracture, and the bookkeeping to maintain
/// both under single-tuple updates.
pub struct Engine<P: Payload> {
    pub query: Query,
    pub fmap: FractureMap,
    pub vo: VariableOrder,
    pub widths: Option<Widths>,
    pub forest: Vec<ViewTree<P>>,
    pub relations: IndexMap<String, Relation<P>>,
    indicator_specs: Vec<IndicatorSpec>,
    pub epoch: u64,
    pub counters: Counters,
}

impl<P: Payload> Engine<P> {
    /// Builds the engine on the width-optimal access-top VO of the fracture.
    pub fn build(q: &Query) -> Result<Engine<P>> {
        q.validate()?;
        let (widths, vo) = query_widths(q)?;
        Self::from_vo(q, vo, Some(widths))
    }

    pub fn build_with_limit(q: &Query, limit: usize) -> Result<Engine<P>> {
        q.validate()?;
        let (widths, vo) = planner::query_widths_with_limit(q, limit)?;
        Self::from_vo(q, vo, Some(widths))
    }

    /// Builds the engine on the stratum-first canonical VO of the fracture
    /// (requires a hierarchical fracture). Used by the probabilistic mode,
    /// whose correctness rests on the one-to-one joins of canonical trees.
    pub fn build_canonical(q: &Query) -> Result<Engine<P>> {
        q.validate()?;
        let fmap = fracture(q);
        let vos = canonical_vos(&fmap.fracture)?;
        let vo = vos.into_iter().next().expect("at least one canonical VO");
        Self::from_vo(q, vo, None)
    }

    pub fn from_vo(q: &Query, vo: VariableOrder, widths: Option<Widths>) -> Result<Engine<P>> {
        let fmap = fracture(q);
        let forest: Vec<ViewTree<P>> =
            vo.trees.iter().map(|t| ViewTree::build(&fmap.fracture, t)).collect();

        let mut relations: IndexMap<String, Relation<P>> = IndexMap::new();
        for a in &q.atoms {
            match relations.get(&a.relation) {
                Some(r) if r.arity() != a.schema.len() => {
                    return Err(Error::Format(format!(
                        "relation {} used with arities {} and {}",
                        a.relation,
                        r.arity(),
                        a.schema.len()
                    )))
                }
                Some(_) => {}
                None => {
                    let schema = (0..a.schema.len()).map(|i| format!("c{i}")).collect();
                    relations.insert(a.relation.clone(), Relation::new(schema));
                }
            }
        }

        // shared indicator projections, keyed by relation and key columns
        let mut specs: IndexMap<(String, Cols), IndicatorSpec> = IndexMap::new();
        for (ti, tree) in forest.iter().enumerate() {
            for &leaf in &tree.indicator_leaves {
                let NodeKind::LeafIndicator { relation, source_idx } = &tree.nodes[leaf].kind
                else {
                    unreachable!()
                };
                let atom = &fmap.fracture.atoms[*source_idx];
                let cols: Cols = tree.nodes[leaf]
                    .schema
                    .iter()
                    .map(|v| atom.schema.iter().position(|s| s == v).expect("key var"))
                    .collect();
                specs
                    .entry((relation.clone(), cols.clone()))
                    .or_insert_with(|| IndicatorSpec {
                        relation: relation.clone(),
                        cols,
                        leaves: Vec::new(),
                    })
                    .leaves
                    .push((ti, leaf));
            }
        }
        let indicator_specs: Vec<IndicatorSpec> = specs.into_values().collect();
        for spec in &indicator_specs {
            relations
                .get_mut(&spec.relation)
                .expect("indicator over known relation")
                .register_index(&spec.cols);
        }

        Ok(Engine {
            query: q.clone(),
            fmap,
            vo,
            widths,
            forest,
            relations,
            indicator_specs,
            epoch: 0,
            counters: Counters::default(),
        })
    }

    /// Loads a tuple into the canonical relation without touching the views;
    /// call `materialize` afterwards.
    pub fn load(&mut self, rel: &str, t: &[Value], p: P) -> Result<()> {
        let r = self
            .relations
            .get_mut(rel)
            .ok_or_else(|| Error::UnknownRelation(rel.to_string()))?;
        r.upsert(t, &p)?;
        Ok(())
    }

    /// Materialises every view bottom-up from the canonical relations.
    pub fn materialize(&mut self) {
        self.epoch += 1;
        let specs = self.indicator_specs.clone();
        for tree in &mut self.forest {
            let leaves: Vec<(usize, usize)> =
                tree.atom_leaves.iter().map(|(&a, &n)| (a, n)).collect();
            for (atom_idx, node) in leaves {
                let rel_name = self.fmap.fracture.atoms[atom_idx].relation.clone();
                tree.clear_leaf(node);
                let data = &self.relations[&rel_name];
                tree.fill_leaf(node, data.iter()).expect("leaf fill");
            }
        }
        for spec in &specs {
            let mut content: Relation<P> = Relation::new(
                spec.cols.iter().map(|c| format!("k{c}")).collect(),
            );
            for (t, _) in self.relations[&spec.relation].iter() {
                let z = project(t, &spec.cols);
                if !content.contains(&z) {
                    content.upsert(&z, &P::one()).expect("arity");
                }
            }
            for &(ti, node) in &spec.leaves {
                self.forest[ti].clear_leaf(node);
                self.forest[ti]
                    .fill_leaf(node, content.iter())
                    .expect("indicator fill");
            }
        }
        for tree in &mut self.forest {
            tree.materialize_views(&self.counters);
        }
    }

    /// Single-tuple update: updates the canonical relation, every leaf
    /// occurrence of the relation (delta-propagating to each root), and any
    /// indicator projections whose key membership changed.
    pub fn apply_update(&mut self, rel: &str, t: &[Value], m: P) -> Result<()> {
        if m.is_zero() {
            return Ok(());
        }
        let relation = self
            .relations
            .get_mut(rel)
            .ok_or_else(|| Error::UnknownRelation(rel.to_string()))?;
        if t.len() != relation.arity() {
            return Err(Error::ArityMismatch {
                relation: rel.to_string(),
                expected: relation.arity(),
                got: t.len(),
            });
        }
        self.epoch += 1;
        let outcome = relation.upsert(t, &m)?;

        let mut ind_deltas: Vec<(usize, Tuple, i8)> = Vec::new();
        for (si, spec) in self.indicator_specs.iter().enumerate() {
            if spec.relation != rel {
                continue;
            }
            let z = project(t, &spec.cols);
            if let Some((zt, k)) = indicator_transition(&self.relations[rel], &spec.cols, &z, outcome)
            {
                ind_deltas.push((si, zt, k));
            }
        }

        let atoms = self.fmap.fracture.atoms.clone();
        for tree in &mut self.forest {
            let leaves: Vec<usize> = tree
                .atom_leaves
                .iter()
                .filter(|(&a, _)| atoms[a].relation == rel)
                .map(|(_, &n)| n)
                .collect();
            for leaf in leaves {
                tree.apply_leaf_delta(leaf, t, &m, &self.counters);
            }
        }
        for (si, z, k) in ind_deltas {
            let p = if k > 0 { P::one() } else { P::one().negate() };
            for &(ti, node) in &self.indicator_specs[si].leaves.clone() {
                self.forest[ti].apply_leaf_delta(node, &z, &p, &self.counters);
            }
        }
        Ok(())
    }

    /// Translates a binding over the original input variables onto the
    /// fracture's input variables.
    pub fn fracture_bindings(
        &self,
        bindings: &IndexMap<Var, Value>,
    ) -> Result<IndexMap<Var, Value>> {
        translate_bindings(&self.query, &self.fmap, bindings)
    }
}

/// Maps a binding over the original input variables onto the fracture's
/// fresh input variables: every representative of an input variable
/// receives that variable's value.
pub fn translate_bindings(
    q: &Query,
    fmap: &FractureMap,
    bindings: &IndexMap<Var, Value>,
) -> Result<IndexMap<Var, Value>> {
    for v in bindings.keys() {
        if !q.is_input(v) {
            return Err(Error::BadRequest(format!("{v} is not an input variable")));
        }
    }
    let mut out = IndexMap::new();
    for v in &q.input_vars {
        let Some(&x) = bindings.get(v) else {
            return Err(Error::BadRequest(format!("missing binding for {v}")));
        };
        for fresh in &fmap.renaming[v] {
            out.insert(fresh.clone(), x);
        }
        if fmap.renaming[v].is_empty() {
            out.insert(v.clone(), x);
        }
    }
    Ok(out)
}

/// Structural view-tree construction for an extended variable order: one
/// tree per tree of the forest, no data.
pub fn build_view_trees<P: Payload>(q: &Query, vo: &VariableOrder) -> Vec<ViewTree<P>> {
    vo.trees.iter().map(|t| ViewTree::build(q, t)).collect()
}

/// Indicator-projection delta for an applied base update: `(z, +1)` when the
/// key value joined the projection, `(z, -1)` when it left it.
pub fn indicator_transition<P: Payload>(
    rel: &Relation<P>,
    cols: &Cols,
    z: &[Value],
    outcome: UpsertOutcome,
) -> Option<(Tuple, i8)> {
    let post = rel.bucket_len(cols, z);
    match outcome {
        UpsertOutcome::Inserted if post == 1 => Some((z.to_vec(), 1)),
        UpsertOutcome::Removed if post == 0 => Some((z.to_vec(), -1)),
        _ => None,
    }
}
