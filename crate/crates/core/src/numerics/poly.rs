use nalgebra::DMatrix;

/// Number of monomials of total degree ≤ `degree` in `k` variables.
pub fn poly_term_count(k: usize, degree: usize) -> usize {
    // C(k + d, d)
    let mut c: usize = 1;
    for i in 1..=degree {
        c = c * (k + i) / i;
    }
    c
}

/// Expands `cols` (n × k) into every monomial of total degree ≤ `degree`,
/// ordered by degree and then lexicographically by variable index. The first
/// column is the intercept.
pub fn poly_features(cols: &DMatrix<f64>, degree: usize) -> DMatrix<f64> {
    let n = cols.nrows();
    let k = cols.ncols();
    let mut terms: Vec<Vec<usize>> = vec![vec![]];
    let mut frontier: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..degree {
        let mut next = Vec::new();
        for t in &frontier {
            let start = t.last().copied().unwrap_or(0);
            for v in start..k {
                let mut m = t.clone();
                m.push(v);
                next.push(m);
            }
        }
        terms.extend(next.iter().cloned());
        frontier = next;
    }
    DMatrix::from_fn(n, terms.len(), |i, j| {
        terms[j].iter().map(|&v| cols[(i, v)]).product()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_variables_degree_two() {
        let x = DMatrix::from_row_slice(1, 2, &[2.0, 3.0]);
        let p = poly_features(&x, 2);
        assert_eq!(p.ncols(), 6);
        assert_eq!(p.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
    }

    #[test]
    fn ten_variables_give_sixty_six_columns() {
        let x = DMatrix::from_element(3, 10, 1.5);
        assert_eq!(poly_features(&x, 2).ncols(), 66);
        assert_eq!(poly_term_count(10, 2), 66);
    }
}
