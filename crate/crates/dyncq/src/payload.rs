use std::fmt::Debug;

/// Payload carried by relation entries and view entries.
///
/// Payloads form a commutative group under `plus`/`negate` with neutral
/// element `zero`; `times` combines the payloads of joining tuples. Stored
/// entries are always non-neutral: an upsert that drives a payload to zero
/// removes the entry and its index cells.
///
/// Integer multiplicities use ordinary ring arithmetic. The probabilistic
/// payload uses the signed-probability group for `plus` and the
/// independent-event product for `times`; it is deliberately not a ring, so
/// the engine only multiplies payloads of distinct relations.
pub trait Payload: Clone + PartialEq + Debug + 'static {
    fn zero() -> Self;
    fn is_zero(&self) -> bool;
    /// Group sum, used by updates and by marginalisation.
    fn plus(&self, other: &Self) -> Self;
    /// Group inverse.
    fn negate(&self) -> Self;
    /// Join combination of payloads of distinct child tuples.
    fn times(&self, other: &Self) -> Self;
    /// Payload of an indicator-projection entry.
    fn one() -> Self;

    fn minus(&self, other: &Self) -> Self {
        self.plus(&other.negate())
    }
}

impl<T> Payload for T
where
    T: num_traits::PrimInt + num_traits::Signed + Debug + 'static,
{
    fn zero() -> Self {
        num_traits::Zero::zero()
    }
    fn is_zero(&self) -> bool {
        num_traits::Zero::is_zero(self)
    }
    fn plus(&self, other: &Self) -> Self {
        *self + *other
    }
    fn negate(&self) -> Self {
        -*self
    }
    fn times(&self, other: &Self) -> Self {
        *self * *other
    }
    fn one() -> Self {
        num_traits::One::one()
    }
}
