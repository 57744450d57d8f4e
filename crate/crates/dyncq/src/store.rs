//! Group-valued relation storage.
//!
//! A relation maps tuples to non-neutral payloads and keeps one secondary
//! index per registered column subset. Point operations are expected
//! constant time (hashing); bucket iteration has constant delay; every
//! bucket knows its cardinality. Deletes locate index cells by hashing the
//! full tuple again, which plays the role of back-references.

use indexmap::{IndexMap, IndexSet};

use crate::error::{Error, Result};
use crate::payload::Payload;
use crate::Rat;

/// Interned data value.
pub type Value = u32;
/// Row of interned values.
pub type Tuple = Vec<Value>;

/// Keys of a secondary index: sorted, distinct column positions.
pub type Cols = Vec<usize>;

pub fn project(t: &[Value], cols: &[usize]) -> Tuple {
    cols.iter().map(|&c| t[c]).collect()
}

/// Effect of an upsert on entry presence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsertOutcome {
    Inserted,
    Updated,
    Removed,
    Noop,
}

#[derive(Debug, Clone, Default)]
struct Index {
    buckets: IndexMap<Tuple, IndexSet<Tuple>>,
}

/// A group-valued relation with named columns.
#[derive(Debug, Clone)]
pub struct Relation<P> {
    schema: Vec<String>,
    entries: IndexMap<Tuple, P>,
    indexes: IndexMap<Cols, Index>,
}

impl<P: Payload> Relation<P> {
    pub fn new(schema: Vec<String>) -> Self {
        Relation { schema, entries: IndexMap::new(), indexes: IndexMap::new() }
    }

    pub fn schema(&self) -> &[String] {
        &self.schema
    }

    pub fn arity(&self) -> usize {
        self.schema.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn col(&self, name: &str) -> Option<usize> {
        self.schema.iter().position(|c| c == name)
    }

    /// Registers an index on the given column subset. Positions are sorted
    /// and deduplicated; registering twice is a no-op. Existing entries are
    /// indexed immediately.
    pub fn register_index(&mut self, cols: &[usize]) {
        let cols = normalize_cols(cols);
        if cols.is_empty() || cols.len() == self.arity() || self.indexes.contains_key(&cols) {
            return;
        }
        let mut index = Index::default();
        for t in self.entries.keys() {
            index.buckets.entry(project(t, &cols)).or_default().insert(t.clone());
        }
        self.indexes.insert(cols, index);
    }

    pub fn payload(&self, t: &[Value]) -> Option<&P> {
        self.entries.get(t)
    }

    pub fn contains(&self, t: &[Value]) -> bool {
        self.entries.contains_key(t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Tuple, &P)> {
        self.entries.iter()
    }

    /// Entries matching `key` on `cols`; `key[i]` is the value for column
    /// `cols[i]`, in any column order. The full relation (empty cols) and
    /// exact-tuple probes are answered without a registered index.
    pub fn bucket<'a>(&'a self, cols: &[usize], key: &[Value]) -> BucketIter<'a, P> {
        let (cols, key) = normalize_key(cols, key);
        if cols.is_empty() {
            return BucketIter::All(self.entries.keys());
        }
        if cols.len() == self.arity() {
            return BucketIter::Point(if self.entries.contains_key(&key) {
                Some(key)
            } else {
                None
            });
        }
        match self.indexes.get(&cols) {
            Some(ix) => match ix.buckets.get(&key) {
                Some(b) => BucketIter::Set(b.iter()),
                None => BucketIter::Empty,
            },
            None => panic!("no index registered on columns {cols:?} of {:?}", self.schema),
        }
    }

    /// |sigma_{cols = key} R| in constant time.
    pub fn bucket_len(&self, cols: &[usize], key: &[Value]) -> usize {
        let (cols, key) = normalize_key(cols, key);
        if cols.is_empty() {
            return self.entries.len();
        }
        if cols.len() == self.arity() {
            return usize::from(self.entries.contains_key(&key));
        }
        match self.indexes.get(&cols) {
            Some(ix) => ix.buckets.get(&key).map_or(0, |b| b.len()),
            None => panic!("no index registered on columns {cols:?} of {:?}", self.schema),
        }
    }

    pub fn key_present(&self, cols: &[usize], key: &[Value]) -> bool {
        self.bucket_len(cols, key) > 0
    }

    /// Distinct key values of a registered index; for the full schema the
    /// keys are the stored tuples themselves.
    pub fn index_keys(&self, cols: &[usize]) -> Box<dyn Iterator<Item = &Tuple> + '_> {
        let cols = normalize_cols(cols);
        if cols.len() == self.arity() {
            return Box::new(self.entries.keys());
        }
        Box::new(
            self.indexes
                .get(&cols)
                .unwrap_or_else(|| panic!("no index registered on columns {cols:?}"))
                .buckets
                .keys(),
        )
    }

    /// Folds `delta` into the payload stored for `t`. Entries and index
    /// cells appear and disappear when payloads cross the group's neutral
    /// element.
    pub fn upsert(&mut self, t: &[Value], delta: &P) -> Result<UpsertOutcome> {
        if t.len() != self.arity() {
            return Err(Error::ArityMismatch {
                relation: self.schema.join(","),
                expected: self.arity(),
                got: t.len(),
            });
        }
        if delta.is_zero() {
            return Ok(UpsertOutcome::Noop);
        }
        match self.entries.get_mut(t) {
            Some(p) => {
                let next = p.plus(delta);
                if next.is_zero() {
                    self.entries.swap_remove(t);
                    for (cols, ix) in self.indexes.iter_mut() {
                        let key = project(t, cols);
                        if let Some(b) = ix.buckets.get_mut(&key) {
                            b.swap_remove(t);
                            if b.is_empty() {
                                ix.buckets.swap_remove(&key);
                            }
                        }
                    }
                    Ok(UpsertOutcome::Removed)
                } else {
                    *p = next;
                    Ok(UpsertOutcome::Updated)
                }
            }
            None => {
                self.entries.insert(t.to_vec(), delta.clone());
                for (cols, ix) in self.indexes.iter_mut() {
                    ix.buckets.entry(project(t, cols)).or_default().insert(t.to_vec());
                }
                Ok(UpsertOutcome::Inserted)
            }
        }
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        for ix in self.indexes.values_mut() {
            ix.buckets.clear();
        }
    }

    pub fn registered_indexes(&self) -> impl Iterator<Item = &Cols> {
        self.indexes.keys()
    }
}

pub fn normalize_cols(cols: &[usize]) -> Cols {
    let mut c: Cols = cols.to_vec();
    c.sort_unstable();
    c.dedup();
    c
}

/// Sorts a (columns, key) pair by column position so lookups accept the
/// columns in any order.
fn normalize_key(cols: &[usize], key: &[Value]) -> (Cols, Tuple) {
    debug_assert_eq!(cols.len(), key.len());
    let mut pairs: Vec<(usize, Value)> =
        cols.iter().copied().zip(key.iter().copied()).collect();
    pairs.sort_unstable_by_key(|(c, _)| *c);
    pairs.dedup_by_key(|(c, _)| *c);
    pairs.into_iter().unzip()
}

pub enum BucketIter<'a, P> {
    Empty,
    Point(Option<Tuple>),
    Set(indexmap::set::Iter<'a, Tuple>),
    All(indexmap::map::Keys<'a, Tuple, P>),
}

impl<'a, P> Iterator for BucketIter<'a, P> {
    type Item = Tuple;
    fn next(&mut self) -> Option<Tuple> {
        match self {
            BucketIter::Empty => None,
            BucketIter::Point(t) => t.take(),
            BucketIter::Set(it) => it.next().cloned(),
            BucketIter::All(it) => it.next().cloned(),
        }
    }
}

/// Heavy/light partitioning of one relation on a chain of nested keys.
///
/// `parts[i]` holds the tuples that are heavy on keys `0..i` and light on
/// key `i`; the final part is heavy on every key. Between rebalances the
/// domains satisfy the relaxed window: heavy key values have degree at
/// least theta/2 in some relation, light values stay below 3*theta/2 in
/// all relations.
#[derive(Debug, Clone)]
pub struct PartitionedRelation<P> {
    pub parent: String,
    pub schema: Vec<String>,
    /// Nested partition keys as column-name lists, outermost first.
    pub keys: Vec<Vec<String>>,
    pub threshold: Rat,
    /// Per key level, the key values currently routed to the heavy side.
    pub domains: Vec<IndexSet<Tuple>>,
    /// `parts[i]` = light at level i; `parts[keys.len()]` = all-heavy.
    pub parts: Vec<Relation<P>>,
}

impl<P: Payload> PartitionedRelation<P> {
    /// Part index a tuple routes to under the current domains: the first
    /// level whose key value is not heavy, or the all-heavy part.
    pub fn route(&self, t: &[Value]) -> usize {
        for (i, key) in self.keys.iter().enumerate() {
            let cols: Cols = key
                .iter()
                .map(|k| self.schema.iter().position(|c| c == k).expect("key column"))
                .collect();
            let v = project(t, &cols);
            if !self.domains[i].contains(&v) {
                return i;
            }
        }
        self.keys.len()
    }

    pub fn signature(&self, part: usize) -> String {
        let mut s = String::new();
        for (i, key) in self.keys.iter().enumerate().take(part + 1) {
            if i > 0 {
                s.push(',');
            }
            let tag = if i == part && part < self.keys.len() { "L" } else { "H" };
            s.push_str(&format!("{}->{}", key.join(""), tag));
        }
        if part == self.keys.len() {
            // all-heavy: every level tagged H already
            return self
                .keys
                .iter()
                .map(|k| format!("{}->H", k.join("")))
                .collect::<Vec<_>>()
                .join(",");
        }
        s
    }
}

/// Degree of a key value: the largest `|sigma_{key = v} K|` over the
/// relations `K` of the database whose schema contains all key columns.
pub fn key_degree<P: Payload>(
    db: &IndexMap<String, Relation<P>>,
    key: &[String],
    v: &[Value],
) -> usize {
    let mut best = 0;
    for rel in db.values() {
        let Some(cols) = key_cols(rel.schema(), key) else { continue };
        let mut n = 0;
        for (t, _) in rel.iter() {
            if project(t, &cols) == v {
                n += 1;
            }
        }
        best = best.max(n);
    }
    best
}

fn key_cols(schema: &[String], key: &[String]) -> Option<Cols> {
    key.iter().map(|k| schema.iter().position(|c| c == k)).collect()
}

/// Builds a strict partition of `db[parent]` on `key` with threshold
/// `theta`: a key value is heavy iff its degree reaches theta in some
/// relation of the database.
pub fn strict_partition<P: Payload>(
    db: &IndexMap<String, Relation<P>>,
    parent: &str,
    key: &[String],
    theta: &Rat,
) -> Result<PartitionedRelation<P>> {
    let rel = db
        .get(parent)
        .ok_or_else(|| Error::UnknownRelation(parent.to_string()))?;
    let cols = key_cols(rel.schema(), key)
        .ok_or_else(|| Error::Format(format!("partition key {key:?} not in schema")))?;
    if cols.len() >= rel.arity() {
        return Err(Error::Format(format!(
            "partition key {key:?} must be a strict subset of the schema"
        )));
    }
    if *theta <= Rat::from_integer(0.into()) {
        return Err(Error::Format("partition threshold must be positive".into()));
    }

    // Degrees per key value across all relations containing the key.
    let mut degrees: IndexMap<Tuple, usize> = IndexMap::new();
    for r in db.values() {
        let Some(c) = key_cols(r.schema(), key) else { continue };
        let mut local: IndexMap<Tuple, usize> = IndexMap::new();
        for (t, _) in r.iter() {
            *local.entry(project(t, &c)).or_insert(0) += 1;
        }
        for (v, n) in local {
            let d = degrees.entry(v).or_insert(0);
            *d = (*d).max(n);
        }
    }
    let mut heavy: IndexSet<Tuple> = IndexSet::new();
    for (v, d) in &degrees {
        if Rat::from_integer((*d).into()) >= *theta {
            heavy.insert(v.clone());
        }
    }

    let mut light_part = Relation::new(rel.schema().to_vec());
    let mut heavy_part = Relation::new(rel.schema().to_vec());
    for (t, p) in rel.iter() {
        let target = if heavy.contains(&project(t, &cols)) { &mut heavy_part } else { &mut light_part };
        target.upsert(t, p)?;
    }

    Ok(PartitionedRelation {
        parent: parent.to_string(),
        schema: rel.schema().to_vec(),
        keys: vec![key.to_vec()],
        threshold: theta.clone(),
        domains: vec![heavy],
        parts: vec![light_part, heavy_part],
    })
}

/// Applies a single-tuple update to the part whose key domain currently
/// contains the tuple's key projection; fresh keys go to the light part.
/// Returns the index of the affected part.
pub fn route_update<P: Payload>(
    p: &mut PartitionedRelation<P>,
    t: &[Value],
    m: &P,
) -> Result<usize> {
    let part = p.route(t);
    p.parts[part].upsert(t, m)?;
    Ok(part)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prob::PProb;
    use crate::rat;

    fn rel(schema: &[&str]) -> Relation<i64> {
        Relation::new(schema.iter().map(|s| s.to_string()).collect())
    }

    #[test]
    fn upsert_then_lookup() {
        let mut r = rel(&["A", "B"]);
        r.upsert(&[7, 8], &1).unwrap();
        assert_eq!(r.payload(&[7, 8]), Some(&1));
        assert_eq!(r.len(), 1);
    }

    #[test]
    fn inverse_cancellation_removes_entry() {
        let mut r = rel(&["A", "B"]);
        r.register_index(&[0]);
        r.upsert(&[7, 8], &1).unwrap();
        r.upsert(&[7, 8], &1).unwrap();
        assert_eq!(r.payload(&[7, 8]), Some(&2));
        let out = r.upsert(&[7, 8], &-2).unwrap();
        assert_eq!(out, UpsertOutcome::Removed);
        assert!(!r.contains(&[7, 8]));
        assert_eq!(r.bucket_len(&[0], &[7]), 0);
    }

    #[test]
    fn probability_cancellation_removes_entry() {
        let mut r: Relation<crate::prob::ProbPayload> =
            Relation::new(vec!["A".into()]);
        let half = crate::prob::ProbPayload::uncertain(PProb::positive(rat(1, 2)));
        r.upsert(&[3], &half).unwrap();
        let neg = crate::prob::ProbPayload::uncertain(PProb::negative(rat(1, 2)));
        let out = r.upsert(&[3], &neg).unwrap();
        assert_eq!(out, UpsertOutcome::Removed);
        assert!(r.is_empty());
    }

    #[test]
    fn arity_mismatch_is_rejected() {
        let mut r = rel(&["A", "B"]);
        assert!(r.upsert(&[1], &1).is_err());
    }

    #[test]
    fn bucket_counts_match_scan() {
        let mut r = rel(&["A", "B"]);
        r.register_index(&[0]);
        for i in 0..10 {
            r.upsert(&[i % 3, i], &1).unwrap();
        }
        for a in 0..3 {
            let scan = r.iter().filter(|(t, _)| t[0] == a).count();
            assert_eq!(r.bucket_len(&[0], &[a]), scan);
            let visited: Vec<Tuple> = r.bucket(&[0], &[a]).collect();
            assert_eq!(visited.len(), scan);
            let dedup: IndexSet<Tuple> = visited.into_iter().collect();
            assert_eq!(dedup.len(), scan, "bucket visits each entry exactly once");
        }
    }

    fn db_with(tuples: &[(&str, &[Value])]) -> IndexMap<String, Relation<i64>> {
        let mut db: IndexMap<String, Relation<i64>> = IndexMap::new();
        for (name, t) in tuples {
            let r = db.entry(name.to_string()).or_insert_with(|| {
                let schema = (0..t.len()).map(|i| format!("c{i}")).collect();
                Relation::new(schema)
            });
            r.upsert(t, &1).unwrap();
        }
        db
    }

    #[test]
    fn strict_partition_theta_one_everything_heavy() {
        let db = db_with(&[("R", &[1, 2]), ("R", &[1, 3]), ("R", &[2, 4])]);
        let p = strict_partition(&db, "R", &["c0".into()], &Rat::from_integer(1.into())).unwrap();
        assert!(p.parts[0].is_empty(), "light part empty at theta=1");
        assert_eq!(p.parts[1].len(), 3);
    }

    #[test]
    fn strict_partition_theta_above_db_size_everything_light() {
        let db = db_with(&[("R", &[1, 2]), ("R", &[1, 3]), ("R", &[2, 4])]);
        let theta = Rat::from_integer(4.into());
        let p = strict_partition(&db, "R", &["c0".into()], &theta).unwrap();
        assert!(p.parts[1].is_empty(), "heavy part empty when theta exceeds |db|");
        assert_eq!(p.parts[0].len(), 3);
    }

    #[test]
    fn strict_partition_heavy_domain_bound() {
        // 100 tuples, theta = 10, one key with degree 12.
        let mut db: IndexMap<String, Relation<i64>> = IndexMap::new();
        let mut r = rel(&["A", "B"]);
        for i in 0..12u32 {
            r.upsert(&[500, i], &1).unwrap();
        }
        for i in 0..88u32 {
            r.upsert(&[i / 4, 100 + i], &1).unwrap();
        }
        assert_eq!(r.len(), 100);
        db.insert("R".into(), r);
        let p = strict_partition(&db, "R", &["A".into()], &Rat::from_integer(10.into())).unwrap();
        assert!(p.domains[0].contains(&vec![500]));
        // At most N / theta heavy key values.
        assert!(p.domains[0].len() <= 10);
        // Union reproduces the parent, domains are disjoint.
        assert_eq!(p.parts[0].len() + p.parts[1].len(), 100);
    }

    #[test]
    fn route_update_follows_domains() {
        let db = db_with(&[("R", &[1, 2]), ("R", &[1, 3]), ("R", &[9, 9])]);
        let theta = Rat::from_integer(2.into());
        let mut p = strict_partition(&db, "R", &["c0".into()], &theta).unwrap();
        // key 1 is heavy (degree 2), so the update lands in the heavy part
        let part = route_update(&mut p, &[1, 7], &1).unwrap();
        assert_eq!(part, 1);
        // fresh key goes to the light part
        let part = route_update(&mut p, &[42, 7], &1).unwrap();
        assert_eq!(part, 0);
        // deleting the last tuple of a light key shrinks the light domain
        let part = route_update(&mut p, &[9, 9], &-1).unwrap();
        assert_eq!(part, 0);
        assert!(!p.parts[0].contains(&[9, 9]));
    }

    #[test]
    fn counts_stay_consistent_under_random_updates() {
        use rand::prelude::*;
        use rand::rngs::StdRng;
        let mut rng = StdRng::seed_from_u64(13);
        let mut r = rel(&["A", "B"]);
        r.register_index(&[0]);
        r.register_index(&[1]);
        let mut live: Vec<Tuple> = Vec::new();
        for _ in 0..400 {
            if !live.is_empty() && rng.gen_bool(0.4) {
                let t = live.swap_remove(rng.gen_range(0..live.len()));
                r.upsert(&t, &-1).unwrap();
            } else {
                let t: Tuple = vec![rng.gen_range(0..6), rng.gen_range(0..30)];
                if !live.contains(&t) {
                    r.upsert(&t, &1).unwrap();
                    live.push(t);
                }
            }
            assert_eq!(r.len(), live.len());
            for a in 0..6u32 {
                let scan = live.iter().filter(|t| t[0] == a).count();
                assert_eq!(r.bucket_len(&[0], &[a]), scan);
            }
        }
    }
}
