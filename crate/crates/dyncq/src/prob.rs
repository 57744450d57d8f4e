//! Probabilistic evaluation: the signed-probability group, the update
//! semantics that makes batches order-independent, maintenance of CQAP0
//! view trees over probabilistic databases, probability read-out at
//! enumeration time, and an exhaustive possible-worlds oracle.

use indexmap::IndexMap;
use num_traits::{One, Zero};

use crate::engine::Engine;
use crate::enumerate::AccessRequest;
use crate::error::{Error, Result};
use crate::payload::Payload;
use crate::qmodel::{classify, Query, QueryClass};
use crate::store::{Relation, Tuple, Value};
use crate::Rat;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    Plus,
    Minus,
}

impl Polarity {
    pub fn flip(self) -> Self {
        match self {
            Polarity::Plus => Polarity::Minus,
            Polarity::Minus => Polarity::Plus,
        }
    }
    /// Product polarity: minus iff an odd number of factors are minus.
    pub fn times(self, other: Self) -> Self {
        if self == other {
            Polarity::Plus
        } else {
            Polarity::Minus
        }
    }
    pub fn symbol(self) -> char {
        match self {
            Polarity::Plus => '+',
            Polarity::Minus => '-',
        }
    }
}

/// Signed probability `p^s` with exact rational magnitude in `[0, 1)`.
/// The two zero polarities are identified: magnitude zero is canonically
/// positive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PProb {
    magnitude: Rat,
    polarity: Polarity,
}

impl PProb {
    pub fn new(magnitude: Rat, polarity: Polarity) -> Self {
        assert!(
            magnitude >= Rat::zero() && magnitude < Rat::one(),
            "signed probability magnitude must lie in [0,1): {magnitude}"
        );
        let polarity = if magnitude.is_zero() { Polarity::Plus } else { polarity };
        PProb { magnitude, polarity }
    }

    pub fn positive(magnitude: Rat) -> Self {
        PProb::new(magnitude, Polarity::Plus)
    }

    pub fn negative(magnitude: Rat) -> Self {
        PProb::new(magnitude, Polarity::Minus)
    }

    pub fn zero() -> Self {
        PProb::positive(Rat::zero())
    }

    pub fn is_zero(&self) -> bool {
        self.magnitude.is_zero()
    }

    pub fn magnitude(&self) -> &Rat {
        &self.magnitude
    }

    pub fn polarity(&self) -> Polarity {
        self.polarity
    }

    pub fn inverse(&self) -> Self {
        PProb::new(self.magnitude.clone(), self.polarity.flip())
    }
}

impl std::fmt::Display for PProb {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}{}", self.magnitude, self.polarity.symbol())
    }
}

/// The group sum of signed probabilities: the disjunction of independent
/// insert/delete events. Same polarities compose like independent
/// disjuncts; opposite polarities cancel partially, the larger magnitude
/// wins and keeps its polarity; equal magnitudes of opposite polarity
/// cancel to zero.
pub fn podot(a: &PProb, b: &PProb) -> PProb {
    let one = Rat::one();
    if a.polarity == b.polarity {
        let m = &one - (&one - &a.magnitude) * (&one - &b.magnitude);
        return PProb::new(m, a.polarity);
    }
    match a.magnitude.cmp(&b.magnitude) {
        std::cmp::Ordering::Equal => PProb::zero(),
        std::cmp::Ordering::Greater => {
            let m = (&a.magnitude - &b.magnitude) / (&one - &b.magnitude);
            PProb::new(m, a.polarity)
        }
        std::cmp::Ordering::Less => {
            let m = (&b.magnitude - &a.magnitude) / (&one - &a.magnitude);
            PProb::new(m, b.polarity)
        }
    }
}

/// View payload of the probabilistic engine: certain mass maintained as an
/// integer multiplicity next to an uncertain signed probability. The two
/// components are never merged inside views; `merged` applies the read-out
/// rule.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbPayload {
    pub certain: i64,
    pub uncertain: PProb,
}

impl ProbPayload {
    pub fn certain(m: i64) -> Self {
        ProbPayload { certain: m, uncertain: PProb::zero() }
    }

    pub fn uncertain(p: PProb) -> Self {
        ProbPayload { certain: 0, uncertain: p }
    }

    /// Read-out: certain inserts win, certain deletes lose, otherwise the
    /// uncertain probability stands.
    pub fn merged(&self) -> ProbValue {
        if self.certain > 0 {
            ProbValue::Certain(Polarity::Plus)
        } else if self.certain < 0 {
            ProbValue::Certain(Polarity::Minus)
        } else {
            ProbValue::Uncertain(self.uncertain.clone())
        }
    }
}

impl Payload for ProbPayload {
    fn zero() -> Self {
        ProbPayload { certain: 0, uncertain: PProb::zero() }
    }
    fn is_zero(&self) -> bool {
        self.certain == 0 && self.uncertain.is_zero()
    }
    fn plus(&self, other: &Self) -> Self {
        ProbPayload {
            certain: self.certain + other.certain,
            uncertain: podot(&self.uncertain, &other.uncertain),
        }
    }
    fn negate(&self) -> Self {
        ProbPayload { certain: -self.certain, uncertain: self.uncertain.inverse() }
    }
    /// Join combination: certain derivations multiply; for the uncertain
    /// side a certain child acts as magnitude one with the sign of its
    /// multiplicity.
    fn times(&self, other: &Self) -> Self {
        if self.certain != 0 && other.certain != 0 {
            return ProbPayload::certain(self.certain * other.certain);
        }
        let factor = |p: &ProbPayload| -> (Rat, Polarity) {
            if p.certain != 0 {
                let pol = if p.certain > 0 { Polarity::Plus } else { Polarity::Minus };
                (Rat::one(), pol)
            } else {
                (p.uncertain.magnitude.clone(), p.uncertain.polarity)
            }
        };
        let (m1, s1) = factor(self);
        let (m2, s2) = factor(other);
        ProbPayload::uncertain(PProb::new(m1 * m2, s1.times(s2)))
    }
    fn one() -> Self {
        ProbPayload::certain(1)
    }
}

/// Probability of an output tuple: either certain (sign tells insert or
/// delete) or an uncertain signed probability.
#[derive(Debug, Clone, PartialEq)]
pub enum ProbValue {
    Certain(Polarity),
    Uncertain(PProb),
}

impl ProbValue {
    /// Product of independent factors.
    pub fn times(&self, other: &ProbValue) -> ProbValue {
        match (self, other) {
            (ProbValue::Certain(a), ProbValue::Certain(b)) => ProbValue::Certain(a.times(*b)),
            (ProbValue::Certain(a), ProbValue::Uncertain(p))
            | (ProbValue::Uncertain(p), ProbValue::Certain(a)) => {
                ProbValue::Uncertain(PProb::new(p.magnitude.clone(), p.polarity.times(*a)))
            }
            (ProbValue::Uncertain(p), ProbValue::Uncertain(q)) => ProbValue::Uncertain(
                PProb::new(&p.magnitude * &q.magnitude, p.polarity.times(q.polarity)),
            ),
        }
    }

    /// Probability of membership in a possible world, where defined:
    /// certain inserts are always in, certain deletes never, and an
    /// uncertain probability must have positive polarity.
    pub fn world_probability(&self) -> Option<Rat> {
        match self {
            ProbValue::Certain(Polarity::Plus) => Some(Rat::one()),
            ProbValue::Certain(Polarity::Minus) => Some(Rat::zero()),
            ProbValue::Uncertain(p) if p.polarity == Polarity::Plus => {
                Some(p.magnitude.clone())
            }
            ProbValue::Uncertain(_) => None,
        }
    }
}

impl std::fmt::Display for ProbValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProbValue::Certain(s) => write!(f, "1{}", s.symbol()),
            ProbValue::Uncertain(p) => write!(f, "{p}"),
        }
    }
}

/// A single probabilistic update: an uncertain signed probability or a
/// certain multiplicity adjustment.
#[derive(Debug, Clone, PartialEq)]
pub enum ProbUpdate {
    Uncertain(PProb),
    Certain(i64),
}

impl ProbUpdate {
    pub fn payload(&self) -> ProbPayload {
        match self {
            ProbUpdate::Uncertain(p) => ProbPayload::uncertain(p.clone()),
            ProbUpdate::Certain(m) => ProbPayload::certain(*m),
        }
    }
}

/// A probabilistic database: per relation one store whose payloads pair the
/// certain multiplicity with the uncertain probability. Tuples are pairwise
/// independent events.
#[derive(Debug, Clone, Default)]
pub struct ProbDatabase {
    pub relations: IndexMap<String, Relation<ProbPayload>>,
}

impl ProbDatabase {
    pub fn relation(&mut self, name: &str, arity: usize) -> &mut Relation<ProbPayload> {
        self.relations.entry(name.to_string()).or_insert_with(|| {
            Relation::new((0..arity).map(|i| format!("{name}.{i}")).collect())
        })
    }

    /// Folds an update into the stored payload; entries vanish when both
    /// the certain mass and the uncertain probability reach zero.
    pub fn upsert(&mut self, rel: &str, t: &[Value], u: &ProbUpdate) -> Result<()> {
        let r = self
            .relations
            .get_mut(rel)
            .ok_or_else(|| Error::UnknownRelation(rel.to_string()))?;
        r.upsert(t, &u.payload())?;
        Ok(())
    }

    pub fn uncertain_tuples(&self) -> Vec<(String, Tuple, PProb)> {
        let mut out = Vec::new();
        for (name, r) in &self.relations {
            for (t, p) in r.iter() {
                if !p.uncertain.is_zero() {
                    out.push((name.clone(), t.clone(), p.uncertain.clone()));
                }
            }
        }
        out
    }
}

/// Builds the probabilistic engine for a CQAP0 query without repeated
/// relation symbols: the canonical access-top view trees where
/// marginalisation aggregates with the signed-probability sum and
/// intersections multiply magnitudes with polarity product.
pub fn prob_build(q: &Query, db: &ProbDatabase) -> Result<Engine<ProbPayload>> {
    if classify(q) != QueryClass::Cqap0 {
        return Err(Error::NotCqap0);
    }
    if q.has_repeated_symbols() {
        return Err(Error::RepeatedSymbols);
    }
    let mut engine = Engine::build_canonical(q)?;
    for (name, rel) in &db.relations {
        for (t, p) in rel.iter() {
            engine.load(name, t, p.clone())?;
        }
    }
    engine.materialize();
    Ok(engine)
}

/// Probability of an output tuple `t` yielded under `req`: recursive
/// view-tree descent multiplying the payloads of the views whose schemas
/// frame the tuple, merging certain mass by the read-out rule, and
/// multiplying across fracture components.
pub fn prob_of(engine: &Engine<ProbPayload>, req: &AccessRequest, t: &[Value]) -> Result<ProbValue> {
    engine.probability(req, t)
}

impl Engine<ProbPayload> {
    /// Probability of an output tuple yielded under `req`: per component,
    /// descend the view tree until the view schema matches the tuple's
    /// free variables, read the payload there (merging certain mass by the
    /// read-out rule), and multiply across branches and components.
    pub fn probability(
        &self,
        req: &AccessRequest,
        t: &[Value],
    ) -> Result<ProbValue> {
        let fb = self.fracture_bindings(&req.bindings)?;
        let mut asg: IndexMap<String, Value> = fb;
        if t.len() != self.query.output_vars.len() {
            return Err(Error::BadRequest(format!(
                "output tuple arity {} does not match {} output variables",
                t.len(),
                self.query.output_vars.len()
            )));
        }
        for (v, &x) in self.query.output_vars.iter().zip(t) {
            asg.insert(v.clone(), x);
        }
        let mut result: Option<ProbValue> = None;
        for tree in &self.forest {
            let val = if tree.input_vars.is_empty() && tree.output_vars.is_empty() {
                boolean_component_prob(tree)
            } else {
                let tvars: indexmap::IndexSet<String> = tree
                    .input_vars
                    .iter()
                    .chain(&tree.output_vars)
                    .cloned()
                    .collect();
                descend(tree, tree.root, &tvars, &asg)?
            };
            result = Some(match result {
                None => val,
                Some(acc) => acc.times(&val),
            });
        }
        result.ok_or_else(|| Error::Format("query has no components".into()))
    }
}

fn descend(
    tree: &crate::engine::ViewTree<ProbPayload>,
    node: usize,
    tvars: &indexmap::IndexSet<String>,
    asg: &IndexMap<String, Value>,
) -> Result<ProbValue> {
    let schema = &tree.nodes[node].schema;
    if schema.len() == tvars.len() && schema.iter().all(|v| tvars.contains(v)) {
        let key: Tuple = schema.iter().map(|v| asg[v]).collect();
        let payload = tree
            .rel(node)
            .payload(&key)
            .ok_or_else(|| Error::Format(format!("tuple {key:?} not present in {}", tree.nodes[node].label)))?;
        return Ok(payload.merged());
    }
    let children = tree.nodes[node].children.clone();
    if children.is_empty() {
        return Err(Error::Format(format!(
            "view schema {:?} cannot frame tuple variables {:?}",
            schema, tvars
        )));
    }
    let mut result: Option<ProbValue> = None;
    for c in children {
        let sub: indexmap::IndexSet<String> = tvars
            .iter()
            .filter(|v| tree.subtree_vars[c].contains(*v))
            .cloned()
            .collect();
        if sub.is_empty() {
            continue;
        }
        let val = descend(tree, c, &sub, asg)?;
        result = Some(match result {
            None => val,
            Some(acc) => acc.times(&val),
        });
    }
    result.ok_or_else(|| Error::Format("no child frames the tuple".into()))
}

/// Probability that a component without free variables is non-empty: the
/// disjunction over the pairwise independent entries of its root view.
fn boolean_component_prob(tree: &crate::engine::ViewTree<ProbPayload>) -> ProbValue {
    let mut acc = PProb::zero();
    for (_, p) in tree.rel(tree.root).iter() {
        match p.merged() {
            ProbValue::Certain(Polarity::Plus) => return ProbValue::Certain(Polarity::Plus),
            ProbValue::Certain(Polarity::Minus) => {}
            ProbValue::Uncertain(q) => acc = podot(&acc, &q),
        }
    }
    ProbValue::Uncertain(acc)
}

/// Exhaustive possible-worlds oracle. Every uncertain tuple must carry a
/// positive-polarity probability; certain tuples with positive multiplicity
/// are in every world, certain deletes in none. Worlds are weighted by
/// `product(p) * product(1-p)` and the weights of the worlds whose query
/// answer contains `t` are summed.
pub const WORLD_LIMIT: usize = 16;

pub fn possible_worlds_oracle(
    q: &Query,
    db: &ProbDatabase,
    req: &IndexMap<String, Value>,
    t: &[Value],
) -> Result<Rat> {
    let uncertain = db.uncertain_tuples();
    if uncertain.len() > WORLD_LIMIT {
        return Err(Error::WorldLimit { tuples: uncertain.len(), limit: WORLD_LIMIT });
    }
    for (rel, tup, p) in &uncertain {
        if p.polarity() == Polarity::Minus {
            return Err(Error::Format(format!(
                "tuple {tup:?} of {rel} has a negative-polarity probability; \
                 possible worlds are undefined"
            )));
        }
    }

    // Fixed tuples present in every world: positive certain mass and not
    // certainly deleted.
    let mut base: IndexMap<String, Vec<Tuple>> = IndexMap::new();
    for (name, r) in &db.relations {
        let rows = base.entry(name.clone()).or_default();
        for (tup, p) in r.iter() {
            if p.certain > 0 {
                rows.push(tup.clone());
            }
        }
    }

    let mut total = Rat::zero();
    let n = uncertain.len();
    for mask in 0u32..(1u32 << n) {
        let mut weight = Rat::one();
        let mut world = base.clone();
        for (i, (rel, tup, p)) in uncertain.iter().enumerate() {
            // A certainly deleted tuple is absent from every world even if
            // it also carries an uncertain probability.
            let killed = db.relations[rel].payload(tup).map_or(false, |pl| pl.certain < 0);
            if mask & (1 << i) != 0 {
                weight *= p.magnitude().clone();
                if !killed {
                    world.entry(rel.clone()).or_default().push(tup.clone());
                }
            } else {
                weight *= Rat::one() - p.magnitude().clone();
            }
        }
        if weight.is_zero() {
            continue;
        }
        let answer = crate::naive::eval_world(q, &world, req)?;
        if answer.contains(t) {
            total += weight;
        }
    }
    Ok(total)
}
