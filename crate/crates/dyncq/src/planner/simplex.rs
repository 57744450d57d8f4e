//! Exact rational solver for the covering linear programs behind the width
//! measures: minimize the total weight over atoms such that every requested
//! variable is covered with weight at least one, with weights in [0, 1].
//!
//! A dense two-phase primal simplex with Bland's rule; all arithmetic is
//! exact, so the optimum comes back as the true rational value.

use num_traits::{One, Zero};

use crate::Rat;

/// `covers[i]` lists the weight variables covering constraint `i`.
/// Returns the optimal objective, or `None` if some constraint cannot be
/// covered at all.
pub fn solve_cover_lp(covers: &[Vec<usize>], n_vars: usize) -> Option<Rat> {
    if covers.is_empty() {
        return Some(Rat::zero());
    }
    if covers.iter().any(|c| c.is_empty()) {
        return None;
    }
    let m = covers.len();
    // columns: n lambdas | m surplus | n upper-bound slacks | m artificials
    let n_cols = n_vars + m + n_vars + m;
    let rows = m + n_vars;
    let mut t = vec![vec![Rat::zero(); n_cols + 1]; rows];
    let mut basis = vec![0usize; rows];

    for (i, cover) in covers.iter().enumerate() {
        for &j in cover {
            t[i][j] = Rat::one();
        }
        t[i][n_vars + i] = -Rat::one();
        t[i][n_vars + m + n_vars + i] = Rat::one();
        t[i][n_cols] = Rat::one();
        basis[i] = n_vars + m + n_vars + i;
    }
    for j in 0..n_vars {
        let r = m + j;
        t[r][j] = Rat::one();
        t[r][n_vars + m + j] = Rat::one();
        t[r][n_cols] = Rat::one();
        basis[r] = n_vars + m + j;
    }

    let artificial_start = n_vars + m + n_vars;
    let phase1: Vec<Rat> = (0..n_cols)
        .map(|j| if j >= artificial_start { Rat::one() } else { Rat::zero() })
        .collect();
    run_simplex(&mut t, &mut basis, &phase1, n_cols, None);
    let p1_obj: Rat = basis
        .iter()
        .enumerate()
        .map(|(i, &b)| phase1[b].clone() * t[i][n_cols].clone())
        .sum();
    if !p1_obj.is_zero() {
        return None;
    }

    // Drive leftover artificials out of the basis where possible.
    for i in 0..rows {
        if basis[i] >= artificial_start {
            if let Some(j) = (0..artificial_start).find(|&j| !t[i][j].is_zero()) {
                pivot(&mut t, &mut basis, i, j, n_cols);
            }
        }
    }

    let phase2: Vec<Rat> = (0..n_cols)
        .map(|j| if j < n_vars { Rat::one() } else { Rat::zero() })
        .collect();
    run_simplex(&mut t, &mut basis, &phase2, n_cols, Some(artificial_start));

    let obj: Rat = basis
        .iter()
        .enumerate()
        .map(|(i, &b)| phase2[b].clone() * t[i][n_cols].clone())
        .sum();
    Some(obj)
}

fn run_simplex(
    t: &mut [Vec<Rat>],
    basis: &mut [usize],
    cost: &[Rat],
    n_cols: usize,
    forbidden_from: Option<usize>,
) {
    loop {
        // reduced costs r_j = c_j - c_B . column_j  (Bland: smallest j < 0)
        let mut entering = None;
        for j in 0..n_cols {
            if let Some(f) = forbidden_from {
                if j >= f {
                    continue;
                }
            }
            if basis.contains(&j) {
                continue;
            }
            let mut r = cost[j].clone();
            for (i, &b) in basis.iter().enumerate() {
                if !cost[b].is_zero() && !t[i][j].is_zero() {
                    r -= cost[b].clone() * t[i][j].clone();
                }
            }
            if r < Rat::zero() {
                entering = Some(j);
                break;
            }
        }
        let Some(j) = entering else { return };

        // ratio test (Bland: smallest basis index among ties)
        let mut leaving: Option<(usize, Rat)> = None;
        for i in 0..t.len() {
            if t[i][j] > Rat::zero() {
                let ratio = t[i][n_cols].clone() / t[i][j].clone();
                match &leaving {
                    None => leaving = Some((i, ratio)),
                    Some((li, lr)) => {
                        if ratio < *lr || (ratio == *lr && basis[i] < basis[*li]) {
                            leaving = Some((i, ratio));
                        }
                    }
                }
            }
        }
        let Some((i, _)) = leaving else { return };
        pivot(t, basis, i, j, n_cols);
    }
}

fn pivot(t: &mut [Vec<Rat>], basis: &mut [usize], row: usize, col: usize, n_cols: usize) {
    let p = t[row][col].clone();
    for x in t[row].iter_mut() {
        *x /= p.clone();
    }
    for i in 0..t.len() {
        if i != row && !t[i][col].is_zero() {
            let f = t[i][col].clone();
            for j in 0..=n_cols {
                let sub = f.clone() * t[row][j].clone();
                t[i][j] -= sub;
            }
        }
    }
    basis[row] = col;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rat;

    #[test]
    fn triangle_cover_is_three_halves() {
        // three edges ab, bc, ca covering a, b, c
        let covers = vec![vec![0, 2], vec![0, 1], vec![1, 2]];
        assert_eq!(solve_cover_lp(&covers, 3), Some(rat(3, 2)));
    }

    #[test]
    fn path_cover_is_two() {
        // edges ab, bc covering a, b, c
        let covers = vec![vec![0], vec![0, 1], vec![1]];
        assert_eq!(solve_cover_lp(&covers, 2), Some(rat(2, 1)));
    }

    #[test]
    fn empty_target_costs_nothing() {
        assert_eq!(solve_cover_lp(&[], 4), Some(rat(0, 1)));
    }

    #[test]
    fn uncoverable_constraint_is_infeasible() {
        assert_eq!(solve_cover_lp(&[vec![]], 1), None);
    }

    #[test]
    fn single_edge_covers_everything_it_touches() {
        let covers = vec![vec![0], vec![0], vec![0]];
        assert_eq!(solve_cover_lp(&covers, 1), Some(rat(1, 1)));
    }
}
