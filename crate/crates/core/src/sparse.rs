//! Compressed sparse row storage for the symmetric system matrices and an
//! envelope (skyline) Cholesky factorization for the consistent mass.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::splines::TensorBasis;
use crate::{Error, Result};

/// Square sparse matrix in CSR form. Both triangles are stored, column
/// indices are sorted within each row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    /// Zero matrix with the coupling pattern of a tensor B-spline basis:
    /// `(i, j)` is stored iff the supports of `N_i` and `N_j` overlap.
    pub fn tensor_pattern(basis: &TensorBasis) -> Self {
        let (nx, ny, p) = (basis.nx(), basis.ny(), basis.degree());
        let n = nx * ny;
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        row_ptr.push(0);
        for iy in 0..ny {
            for ix in 0..nx {
                for jy in iy.saturating_sub(p)..=(iy + p).min(ny - 1) {
                    for jx in ix.saturating_sub(p)..=(ix + p).min(nx - 1) {
                        cols.push(jx + nx * jy);
                    }
                }
                row_ptr.push(cols.len());
            }
        }
        let vals = vec![0.0; cols.len()];
        Self { n, row_ptr, cols, vals }
    }

    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        if let Some(&(r, c, _)) = sorted.iter().find(|t| t.0 >= n || t.1 >= n) {
            return Err(Error::out_of_range(format!("entry ({r}, {c}) outside a {n}x{n} matrix")));
        }
        sorted.sort_by_key(|a| (a.0, a.1));
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(sorted.len());
        let mut vals: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last = None;
        for (r, c, v) in sorted {
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Ok(Self { n, row_ptr, cols, vals })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.cols[r.clone()], &self.vals[r])
    }

    /// Storage position of `(i, j)` if it is in the pattern.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let start = self.row_ptr[i];
        let row = &self.cols[start..self.row_ptr[i + 1]];
        row.binary_search(&j).ok().map(|k| start + k)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.position(i, j).map_or(0.0, |k| self.vals[k])
    }

    /// Adds to an entry of the pattern.
    pub fn add(&mut self, i: usize, j: usize, v: f64) -> Result<()> {
        match self.position(i, j) {
            Some(k) => {
                self.vals[k] += v;
                Ok(())
            }
            None => Err(Error::out_of_range(format!("entry ({i}, {j}) not in sparsity pattern"))),
        }
    }

    /// Scatters a dense local block `local[a * len + b]` at the rows/cols
    /// `dofs`. Entries outside the pattern are ignored.
    pub fn scatter(&mut self, dofs: &[usize], local: &[f64]) {
        let m = dofs.len();
        for (a, &i) in dofs.iter().enumerate() {
            let start = self.row_ptr[i];
            let row = &self.cols[start..self.row_ptr[i + 1]];
            for (b, &j) in dofs.iter().enumerate() {
                if let Ok(k) = row.binary_search(&j) {
                    self.vals[start + k] += local[a * m + b];
                }
            }
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.vals
    }

    pub fn scale(&mut self, factor: f64) {
        self.vals.iter_mut().for_each(|v| *v *= factor);
    }

    /// `y = A x`
    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate().take(self.n) {
            let r = self.row_ptr[i]..self.row_ptr[i + 1];
            let mut s = 0.0;
            for (c, v) in self.cols[r.clone()].iter().zip(&self.vals[r]) {
                s += v * x[*c];
            }
            *yi = s;
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.matvec_into(x, &mut y);
        y
    }

    /// `x^T A y`
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut total = 0.0;
        for (i, xi) in x.iter().enumerate().take(self.n) {
            let r = self.row_ptr[i]..self.row_ptr[i + 1];
            let mut s = 0.0;
            for (c, v) in self.cols[r.clone()].iter().zip(&self.vals[r]) {
                s += v * y[*c];
            }
            total += xi * s;
        }
        total
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).1.iter().sum()).collect()
    }

    pub fn total(&self) -> f64 {
        self.vals.iter().sum()
    }

    /// Largest `|a_ij - a_ji|` relative to the largest `|a_ij|`.
    pub fn asymmetry(&self) -> f64 {
        let mut scale: f64 = 0.0;
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                scale = scale.max(v.abs());
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        if scale == 0.0 {
            0.0
        } else {
            worst / scale
        }
    }

    /// `(row, col, value)` for every stored entry.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| {
            let r = self.row_ptr[i]..self.row_ptr[i + 1];
            self.cols[r.clone()].iter().zip(&self.vals[r]).map(move |(&j, &v)| (i, j, v))
        })
    }
}

/// `A = L L^T` of a symmetrically permuted matrix, with `L` stored row-wise
/// from the first structurally non-zero column to the diagonal.
#[derive(Debug, Clone)]
pub struct SkylineCholesky {
    n: usize,
    /// new index -> original index
    perm: Vec<usize>,
    first: Vec<usize>,
    start: Vec<usize>,
    data: Vec<f64>,
}

impl SkylineCholesky {
    /// Factors `P A P^T` where `perm[new] = old`. Fails on a non-positive
    /// or non-finite pivot.
    pub fn factor(a: &CsrMatrix, perm: &[usize]) -> Result<Self> {
        let n = a.dim();
        if perm.len() != n {
            return Err(Error::invalid("permutation length differs from matrix size"));
        }
        let mut inv = vec![usize::MAX; n];
        for (new, &old) in perm.iter().enumerate() {
            if old >= n || inv[old] != usize::MAX {
                return Err(Error::invalid("not a permutation"));
            }
            inv[old] = new;
        }
        let mut first = vec![0usize; n];
        for (i, f) in first.iter_mut().enumerate() {
            let (cols, _) = a.row(perm[i]);
            *f = cols.iter().map(|&c| inv[c]).min().unwrap_or(i).min(i);
        }
        let mut start = vec![0usize; n + 1];
        for i in 0..n {
            start[i + 1] = start[i] + (i - first[i] + 1);
        }
        let mut data = vec![0.0; start[n]];
        for i in 0..n {
            let (cols, vals) = a.row(perm[i]);
            for (&c, &v) in cols.iter().zip(vals) {
                let j = inv[c];
                if j <= i {
                    data[start[i] + j - first[i]] += v;
                }
            }
        }

        for i in 0..n {
            let fi = first[i];
            let (head, tail) = data.split_at_mut(start[i]);
            let row_i = &mut tail[..i - fi + 1];
            for j in fi..i {
                let fj = first[j];
                let row_j = &head[start[j]..start[j] + (j - fj + 1)];
                let k0 = fi.max(fj);
                let mut s = row_i[j - fi];
                let li = &row_i[k0 - fi..j - fi];
                let lj = &row_j[k0 - fj..j - fj];
                s -= li.iter().zip(lj).map(|(a, b)| a * b).sum::<f64>();
                row_i[j - fi] = s / row_j[j - fj];
            }
            let d = row_i[i - fi] - row_i[..i - fi].iter().map(|v| v * v).sum::<f64>();
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::AssemblyFailure(format!(
                    "mass matrix not positive definite: pivot {d:e} at row {}",
                    perm[i]
                )));
            }
            row_i[i - fi] = libm::sqrt(d);
        }
        Ok(Self { n, perm: perm.to_vec(), first, start, data })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Stored entries of the factor.
    pub fn envelope_size(&self) -> usize {
        self.data.len()
    }

    /// Solves `A x = b`; `work` must have the matrix dimension.
    pub fn solve_into(&self, b: &[f64], x: &mut [f64], work: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            work[i] = b[self.perm[i]];
        }
        for i in 0..n {
            let fi = self.first[i];
            let row = &self.data[self.start[i]..self.start[i + 1]];
            let s: f64 = row[..i - fi].iter().zip(&work[fi..i]).map(|(l, y)| l * y).sum();
            work[i] = (work[i] - s) / row[i - fi];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let row = &self.data[self.start[i]..self.start[i + 1]];
            let xi = work[i] / row[i - fi];
            work[i] = xi;
            for (w, l) in work[fi..i].iter_mut().zip(&row[..i - fi]) {
                *w -= l * xi;
            }
        }
        for i in 0..n {
            x[self.perm[i]] = work[i];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.n];
        let mut work = vec![0.0; self.n];
        self.solve_into(b, &mut x, &mut work);
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    fn spd_on_pattern(basis: &TensorBasis, seed: u64) -> CsrMatrix {
        let mut a = CsrMatrix::tensor_pattern(basis);
        let mut state = seed;
        let mut rnd = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64) / ((1u64 << 53) as f64) - 0.5
        };
        let n = a.dim();
        for i in 0..n {
            let (cols, _) = a.row(i);
            let cols: Vec<usize> = cols.to_vec();
            for j in cols {
                if j < i {
                    let v = rnd();
                    a.add(i, j, v).unwrap();
                    a.add(j, i, v).unwrap();
                }
            }
        }
        for i in 0..n {
            let off: f64 = a.row(i).1.iter().map(|v| v.abs()).sum();
            a.add(i, i, off + 1.0).unwrap();
        }
        a
    }

    #[test]
    fn pattern_counts() {
        let basis = TensorBasis::uniform(3, 2, 2, 3.0, 2.0).unwrap();
        let a = CsrMatrix::tensor_pattern(&basis);
        assert_eq!(a.dim(), 5 * 4);
        // interior 1D couplings: each row has min(i+p, n-1) - max(i-p, 0) + 1 cols
        let count = |n: usize| (0..n).map(|i| (i + 2).min(n - 1) - i.saturating_sub(2) + 1).sum::<usize>();
        assert_eq!(a.nnz(), count(5) * count(4));
    }

    #[test]
    fn cholesky_matches_dense_solve() {
        for (sx, sy, p) in [(3, 5, 1), (6, 2, 2), (4, 4, 3)] {
            let basis = TensorBasis::uniform(sx, sy, p, 1.0, 1.0).unwrap();
            let a = spd_on_pattern(&basis, 7 + p as u64);
            assert_eq!(a.asymmetry(), 0.0);
            let n = a.dim();
            let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
            let dense = DMatrix::from_fn(n, n, |i, j| a.get(i, j));
            let expected = dense.lu().solve(&DVector::from_vec(b.clone())).unwrap();
            for perm in [basis.envelope_permutation(), (0..n).collect()] {
                let chol = SkylineCholesky::factor(&a, &perm).unwrap();
                let x = chol.solve(&b);
                for i in 0..n {
                    assert!((x[i] - expected[i]).abs() < 1e-10, "{sx}x{sy} p={p}");
                }
            }
        }
    }

    #[test]
    fn envelope_permutation_shrinks_profile() {
        let basis = TensorBasis::uniform(30, 6, 2, 1.0, 1.0).unwrap();
        let a = spd_on_pattern(&basis, 3);
        let natural = SkylineCholesky::factor(&a, &(0..a.dim()).collect::<Vec<_>>()).unwrap();
        let permuted = SkylineCholesky::factor(&a, &basis.envelope_permutation()).unwrap();
        assert!(permuted.envelope_size() * 3 < natural.envelope_size());
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let a = CsrMatrix::from_triplets(2, &[(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 1.0)]).unwrap();
        assert!(matches!(SkylineCholesky::factor(&a, &[0, 1]), Err(Error::AssemblyFailure(_))));
    }

    #[test]
    fn triplets_sum_duplicates() {
        let a = CsrMatrix::from_triplets(2, &[(1, 0, 1.0), (0, 0, 2.0), (1, 0, 3.0)]).unwrap();
        assert_eq!(a.get(1, 0), 4.0);
        assert_eq!(a.get(0, 1), 0.0);
        assert_eq!(a.nnz(), 2);
        assert_eq!(a.matvec(&[1.0, 1.0]), vec![2.0, 4.0]);
    }
}
