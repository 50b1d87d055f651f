//! Block-sparse symmetric matrices and a left-looking block
//! Cholesky factorization with fill-reducing ordering, triangular solves and
//! selected inversion of the diagonal blocks.

use std::collections::BTreeMap;

use nalgebra::{DVector, SMatrix, SVector};

use crate::error::{Error, Result};

pub type Block<const B: usize> = SMatrix<f64, B, B>;

/// Symmetric block matrix. Only the lower triangle (row >= column) is stored,
/// column-compressed, with rows sorted inside each column.
#[derive(Clone, Debug)]
pub struct BlockMatrix<const B: usize> {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<Block<B>>,
}

/// Accumulates blocks before compression. Blocks added at `(i, j)` with
/// `i < j` are stored transposed at `(j, i)`.
#[derive(Clone, Debug)]
pub struct BlockMatrixBuilder<const B: usize> {
    n: usize,
    entries: BTreeMap<(usize, usize), Block<B>>,
}

impl<const B: usize> BlockMatrixBuilder<B> {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            entries: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, i: usize, j: usize, block: &Block<B>) {
        assert!(i < self.n && j < self.n, "block index out of range");
        // keyed (column, row) so iteration order is column-major
        let (key, b) = if i >= j {
            ((j, i), *block)
        } else {
            ((i, j), block.transpose())
        };
        *self.entries.entry(key).or_insert_with(Block::zeros) += b;
    }

    /// Makes sure a (possibly zero) block exists at `(i, j)`.
    pub fn touch(&mut self, i: usize, j: usize) {
        self.add(i, j, &Block::zeros());
    }

    pub fn build(self) -> BlockMatrix<B> {
        let mut col_ptr = vec![0; self.n + 1];
        let mut row_idx = Vec::with_capacity(self.entries.len());
        let mut values = Vec::with_capacity(self.entries.len());
        for (&(c, r), v) in &self.entries {
            col_ptr[c + 1] += 1;
            row_idx.push(r);
            values.push(*v);
        }
        for c in 0..self.n {
            col_ptr[c + 1] += col_ptr[c];
        }
        BlockMatrix {
            n: self.n,
            col_ptr,
            row_idx,
            values,
        }
    }
}

impl<const B: usize> BlockMatrix<B> {
    /// Number of block rows/columns.
    pub fn block_dim(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.n * B
    }

    pub fn nnz_blocks(&self) -> usize {
        self.row_idx.len()
    }

    fn position(&self, i: usize, j: usize) -> Option<usize> {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        let range = self.col_ptr[c]..self.col_ptr[c + 1];
        self.row_idx[range.clone()]
            .binary_search(&r)
            .ok()
            .map(|p| range.start + p)
    }

    /// Block `(i, j)` of the full symmetric matrix, if stored.
    pub fn block(&self, i: usize, j: usize) -> Option<Block<B>> {
        self.position(i, j).map(|p| {
            if i >= j {
                self.values[p]
            } else {
                self.values[p].transpose()
            }
        })
    }

    pub fn diagonal_block_mut(&mut self, i: usize) -> Option<&mut Block<B>> {
        self.position(i, i).map(move |p| &mut self.values[p])
    }

    /// Adds `lambda * I` to every diagonal block (creating none).
    pub fn add_to_diagonal(&mut self, lambda: f64) {
        for c in 0..self.n {
            if let Some(b) = self.diagonal_block_mut(c) {
                *b += Block::<B>::identity() * lambda;
            }
        }
    }

    /// Adds `lambda * diag(A)` to every diagonal block.
    pub fn scale_diagonal(&mut self, lambda: f64) {
        for c in 0..self.n {
            if let Some(b) = self.diagonal_block_mut(c) {
                for k in 0..B {
                    b[(k, k)] += lambda * b[(k, k)].abs().max(1e-12);
                }
            }
        }
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.dim());
        let mut y = DVector::zeros(self.dim());
        for c in 0..self.n {
            let xc = x.fixed_rows::<B>(c * B).into_owned();
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                let r = self.row_idx[p];
                let a = &self.values[p];
                let mut yr = y.fixed_rows_mut::<B>(r * B);
                yr += a * xc;
                if r != c {
                    let xr = x.fixed_rows::<B>(r * B).into_owned();
                    let mut yc = y.fixed_rows_mut::<B>(c * B);
                    yc += a.transpose() * xr;
                }
            }
        }
        y
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.dim(), self.dim());
        for c in 0..self.n {
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                let r = self.row_idx[p];
                m.fixed_view_mut::<B, B>(r * B, c * B).copy_from(&self.values[p]);
                if r != c {
                    m.fixed_view_mut::<B, B>(c * B, r * B)
                        .copy_from(&self.values[p].transpose());
                }
            }
        }
        m
    }
}

/// Fill-reducing permutation of the block pattern. `perm[new] = old`.
pub fn amd_ordering<const B: usize>(a: &BlockMatrix<B>) -> Vec<usize> {
    let n = a.n;
    if n == 0 {
        return Vec::new();
    }
    // diagonal included: amd 0.2 underflows on patterns with fewer entries than columns
    let mut cols: Vec<Vec<usize>> = (0..n).map(|c| vec![c]).collect();
    for c in 0..n {
        for p in a.col_ptr[c]..a.col_ptr[c + 1] {
            let r = a.row_idx[p];
            if r != c {
                cols[c].push(r);
                cols[r].push(c);
            }
        }
    }
    let mut ap = Vec::with_capacity(n + 1);
    let mut ai = Vec::new();
    ap.push(0usize);
    for col in &mut cols {
        col.sort_unstable();
        ai.extend_from_slice(col);
        ap.push(ai.len());
    }
    match amd::order::<usize>(n, &ap, &ai, &amd::Control::default()) {
        Ok((p, _, _)) => p,
        Err(status) => {
            log::warn!("amd ordering failed ({status:?}), using natural order");
            (0..n).collect()
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Source {
    pos: usize,
    transposed: bool,
}

/// Symbolic analysis: ordering, elimination tree and the pattern of `L`.
#[derive(Clone, Debug)]
pub struct SymbolicCholesky {
    n: usize,
    nnz_a: usize,
    perm: Vec<usize>,
    inv_perm: Vec<usize>,
    /// Per permuted column: rows of `L` (sorted, first is the column itself).
    l_rows: Vec<Vec<usize>>,
    /// Per permuted row `j`: columns `k < j` with `L[j, k] != 0`.
    l_row_cols: Vec<Vec<usize>>,
    /// Per permuted column: entries of `A` in that column (row, source).
    a_cols: Vec<Vec<(usize, Source)>>,
}

impl SymbolicCholesky {
    pub fn analyze<const B: usize>(a: &BlockMatrix<B>) -> Self {
        Self::analyze_with_ordering(a, amd_ordering(a))
    }

    pub fn analyze_with_ordering<const B: usize>(a: &BlockMatrix<B>, perm: Vec<usize>) -> Self {
        let n = a.n;
        assert_eq!(perm.len(), n);
        let mut inv_perm = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv_perm[old] = new;
        }
        let mut a_cols: Vec<Vec<(usize, Source)>> = vec![Vec::new(); n];
        for c in 0..n {
            for p in a.col_ptr[c]..a.col_ptr[c + 1] {
                let (r2, c2) = (inv_perm[a.row_idx[p]], inv_perm[c]);
                if r2 >= c2 {
                    a_cols[c2].push((r2, Source { pos: p, transposed: false }));
                } else {
                    a_cols[r2].push((c2, Source { pos: p, transposed: true }));
                }
            }
        }
        for col in &mut a_cols {
            col.sort_unstable_by_key(|e| e.0);
        }

        // Elimination tree (Liu) on the permuted upper pattern.
        let mut parent = vec![usize::MAX; n];
        let mut ancestor = vec![usize::MAX; n];
        let mut upper: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (c, col) in a_cols.iter().enumerate() {
            for &(r, _) in col {
                if r > c {
                    upper[r].push(c);
                }
            }
        }
        for j in 0..n {
            for &i0 in &upper[j] {
                let mut i = i0;
                while i != usize::MAX && i < j {
                    let next = ancestor[i];
                    ancestor[i] = j;
                    if next == usize::MAX {
                        parent[i] = j;
                        break;
                    }
                    i = next;
                }
            }
        }

        // Column patterns: A's column merged with children's patterns.
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (c, &p) in parent.iter().enumerate() {
            if p != usize::MAX {
                children[p].push(c);
            }
        }
        let mut l_rows: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut mark = vec![usize::MAX; n];
        for j in 0..n {
            let mut rows = vec![j];
            mark[j] = j;
            for &(r, _) in &a_cols[j] {
                if mark[r] != j {
                    mark[r] = j;
                    rows.push(r);
                }
            }
            for &ch in &children[j] {
                for &r in &l_rows[ch] {
                    if r > j && mark[r] != j {
                        mark[r] = j;
                        rows.push(r);
                    }
                }
            }
            rows.sort_unstable();
            l_rows[j] = rows;
        }
        let mut l_row_cols: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (k, rows) in l_rows.iter().enumerate() {
            for &r in &rows[1..] {
                l_row_cols[r].push(k);
            }
        }

        Self {
            n,
            nnz_a: a.nnz_blocks(),
            perm,
            inv_perm,
            l_rows,
            l_row_cols,
            a_cols,
        }
    }

    pub fn nnz_l_blocks(&self) -> usize {
        self.l_rows.iter().map(Vec::len).sum()
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    /// Numeric factorization of a matrix with the analyzed pattern.
    pub fn factor<const B: usize>(&self, a: &BlockMatrix<B>) -> Result<CholeskyFactor<B>> {
        assert_eq!(a.n, self.n, "dimension differs from analyzed matrix");
        assert_eq!(a.nnz_blocks(), self.nnz_a, "pattern differs from analyzed matrix");
        let n = self.n;
        let mut l_vals: Vec<Vec<Block<B>>> = Vec::with_capacity(n);
        let mut diag_inv: Vec<Block<B>> = Vec::with_capacity(n);
        let mut pos = vec![usize::MAX; n];
        let mut acc: Vec<Block<B>> = Vec::new();

        for j in 0..n {
            let rows = &self.l_rows[j];
            acc.clear();
            acc.resize(rows.len(), Block::zeros());
            for (t, &r) in rows.iter().enumerate() {
                pos[r] = t;
            }
            for &(r, src) in &self.a_cols[j] {
                let v = a.values[src.pos];
                acc[pos[r]] += if src.transposed { v.transpose() } else { v };
            }
            for &k in &self.l_row_cols[j] {
                let krows = &self.l_rows[k];
                let start = krows.binary_search(&j).expect("row in pattern");
                let ljk_t = l_vals[k][start].transpose();
                for t in start..krows.len() {
                    acc[pos[krows[t]]] -= l_vals[k][t] * ljk_t;
                }
            }
            let d = (acc[0] + acc[0].transpose()) * 0.5;
            let chol = d.cholesky().ok_or(Error::NotPositiveDefinite {
                column: self.perm[j],
            })?;
            let ljj = chol.l();
            let ljj_inv = ljj
                .try_inverse()
                .ok_or(Error::NotPositiveDefinite { column: self.perm[j] })?;
            let ljj_inv_t = ljj_inv.transpose();
            let mut col = Vec::with_capacity(rows.len());
            col.push(ljj);
            for blk in acc.iter().skip(1) {
                col.push(blk * ljj_inv_t);
            }
            l_vals.push(col);
            diag_inv.push(ljj_inv);
        }
        Ok(CholeskyFactor {
            symbolic: self.clone_pattern(),
            l_vals,
            diag_inv,
        })
    }

    fn clone_pattern(&self) -> FactorPattern {
        FactorPattern {
            perm: self.perm.clone(),
            inv_perm: self.inv_perm.clone(),
            l_rows: self.l_rows.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct FactorPattern {
    perm: Vec<usize>,
    inv_perm: Vec<usize>,
    l_rows: Vec<Vec<usize>>,
}

/// `P A P^T = L L^T` with block lower-triangular `L`.
#[derive(Clone, Debug)]
pub struct CholeskyFactor<const B: usize> {
    symbolic: FactorPattern,
    l_vals: Vec<Vec<Block<B>>>,
    diag_inv: Vec<Block<B>>,
}

impl<const B: usize> CholeskyFactor<B> {
    /// Analyzes and factors in one call.
    pub fn new(a: &BlockMatrix<B>) -> Result<Self> {
        SymbolicCholesky::analyze(a).factor(a)
    }

    pub fn block_dim(&self) -> usize {
        self.l_vals.len()
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.block_dim();
        assert_eq!(b.len(), n * B);
        let p = &self.symbolic;
        let mut y: Vec<SVector<f64, B>> = (0..n)
            .map(|j| b.fixed_rows::<B>(p.perm[j] * B).into_owned())
            .collect();
        // forward: L y = P b
        for j in 0..n {
            let yj = self.diag_inv[j] * y[j];
            y[j] = yj;
            let rows = &p.l_rows[j];
            for t in 1..rows.len() {
                let v = self.l_vals[j][t] * yj;
                y[rows[t]] -= v;
            }
        }
        // backward: L^T x = y
        for j in (0..n).rev() {
            let rows = &p.l_rows[j];
            let mut s = y[j];
            for t in 1..rows.len() {
                s -= self.l_vals[j][t].transpose() * y[rows[t]];
            }
            y[j] = self.diag_inv[j].transpose() * s;
        }
        let mut x = DVector::zeros(n * B);
        for j in 0..n {
            x.fixed_rows_mut::<B>(p.perm[j] * B).copy_from(&y[j]);
        }
        x
    }

    /// Diagonal blocks of `A^-1`, indexed by original block index.
    pub fn marginal_covariances(&self) -> Vec<Block<B>> {
        let all: Vec<usize> = (0..self.block_dim()).collect();
        self.marginal_covariances_of(&all)
    }

    /// Diagonal blocks of `A^-1` for the original block indices `targets`,
    /// in the same order.
    ///
    /// Uses the recurrence
    /// `S_ij = (delta_ij L_jj^-T - sum_{k>j} S_ik L_kj) L_jj^-1`
    /// evaluated bottom-up over the pattern of `L`, stopping at the earliest
    /// target column. Targets ordered last are therefore cheap.
    pub fn marginal_covariances_of(&self, targets: &[usize]) -> Vec<Block<B>> {
        let n = self.block_dim();
        let p = &self.symbolic;
        let Some(first) = targets.iter().map(|&t| p.inv_perm[t]).min() else {
            return Vec::new();
        };
        // sigma[j][t] = S[l_rows[j][t], j]
        let mut sigma: Vec<Vec<Block<B>>> = vec![Vec::new(); n];
        let lookup = |sigma: &Vec<Vec<Block<B>>>, i: usize, k: usize| -> Block<B> {
            let (r, c) = if i >= k { (i, k) } else { (k, i) };
            let t = p.l_rows[c].binary_search(&r).expect("entry in filled pattern");
            if i >= k {
                sigma[c][t]
            } else {
                sigma[c][t].transpose()
            }
        };
        for j in (first..n).rev() {
            let rows = &p.l_rows[j];
            let mut col = vec![Block::zeros(); rows.len()];
            for ti in (1..rows.len()).rev() {
                let i = rows[ti];
                let mut s = Block::zeros();
                for tk in 1..rows.len() {
                    s += lookup(&sigma, i, rows[tk]) * self.l_vals[j][tk];
                }
                col[ti] = -s * self.diag_inv[j];
            }
            let mut s = self.diag_inv[j].transpose();
            for tk in 1..rows.len() {
                s -= col[tk].transpose() * self.l_vals[j][tk];
            }
            let d = s * self.diag_inv[j];
            col[0] = (d + d.transpose()) * 0.5;
            sigma[j] = col;
        }
        targets.iter().map(|&orig| sigma[p.inv_perm[orig]][0]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random SPD block matrix with a random sparse pattern.
    fn random_spd<const B: usize>(n: usize, density: f64, seed: u64) -> BlockMatrix<B> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut builder = BlockMatrixBuilder::<B>::new(n);
        for i in 0..n {
            let d = Block::<B>::identity() * (B as f64 * 2.0);
            builder.add(i, i, &d);
        }
        for i in 0..n {
            for j in 0..i {
                if rng.random::<f64>() < density {
                    // add J^T J for a two-variable factor
                    let a = Block::<B>::from_fn(|_, _| rng.random_range(-1.0..1.0));
                    let b = Block::<B>::from_fn(|_, _| rng.random_range(-1.0..1.0));
                    builder.add(i, i, &(a.transpose() * a));
                    builder.add(j, j, &(b.transpose() * b));
                    builder.add(i, j, &(a.transpose() * b));
                }
            }
        }
        builder.build()
    }

    #[test]
    fn builder_symmetrizes() {
        let mut b = BlockMatrixBuilder::<2>::new(2);
        let m = Block::<2>::new(1.0, 2.0, 3.0, 4.0);
        b.add(0, 1, &m);
        b.add(0, 0, &Block::identity());
        b.add(1, 1, &Block::identity());
        let a = b.build();
        let d = a.to_dense();
        assert_eq!(d, d.transpose());
        assert_eq!(a.block(0, 1).unwrap(), m);
        assert_eq!(a.block(1, 0).unwrap(), m.transpose());
    }

    #[test]
    fn ordering_is_a_permutation() {
        let a = random_spd::<3>(40, 0.1, 1);
        let mut p = amd_ordering(&a);
        p.sort_unstable();
        assert_eq!(p, (0..40).collect::<Vec<_>>());
    }

    fn check_solve<const B: usize>(n: usize, density: f64, seed: u64) {
        let a = random_spd::<B>(n, density, seed);
        let f = CholeskyFactor::new(&a).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let b = DVector::from_fn(n * B, |_, _| rng.random_range(-1.0..1.0));
        let x = f.solve(&b);
        let r = a.mul_vec(&x) - &b;
        assert!(r.norm() < 1e-9 * b.norm().max(1.0), "residual {}", r.norm());
        let dense = a.to_dense().cholesky().unwrap().solve(&b);
        assert_relative_eq!(x, dense, epsilon = 1e-9);
    }

    #[test]
    fn solves_match_dense() {
        check_solve::<6>(30, 0.15, 2);
        check_solve::<3>(50, 0.08, 3);
        check_solve::<1>(80, 0.05, 4);
        check_solve::<6>(1, 0.0, 5);
    }

    #[test]
    fn natural_ordering_gives_same_solution() {
        let a = random_spd::<3>(25, 0.2, 6);
        let natural = SymbolicCholesky::analyze_with_ordering(&a, (0..25).collect())
            .factor(&a)
            .unwrap();
        let amd = CholeskyFactor::new(&a).unwrap();
        let b = DVector::from_fn(75, |i, _| (i as f64).sin());
        assert_relative_eq!(natural.solve(&b), amd.solve(&b), epsilon = 1e-10);
    }

    #[test]
    fn amd_reduces_fill_on_arrow() {
        // arrow with the dense row first: natural order fills completely
        let n = 30;
        let mut b = BlockMatrixBuilder::<1>::new(n);
        for i in 0..n {
            b.add(i, i, &Block::<1>::new(n as f64));
            if i > 0 {
                b.add(i, 0, &Block::<1>::new(1.0));
            }
        }
        let a = b.build();
        let natural = SymbolicCholesky::analyze_with_ordering(&a, (0..n).collect());
        let amd = SymbolicCholesky::analyze(&a);
        assert_eq!(natural.nnz_l_blocks(), n * (n + 1) / 2);
        assert!(amd.nnz_l_blocks() <= 2 * n);
    }

    #[test]
    fn detects_indefinite() {
        let mut b = BlockMatrixBuilder::<1>::new(2);
        b.add(0, 0, &Block::<1>::new(1.0));
        b.add(1, 1, &Block::<1>::new(-1.0));
        let a = b.build();
        assert!(matches!(
            CholeskyFactor::new(&a),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn marginals_match_dense_inverse() {
        for (n, density, seed) in [(20, 0.2, 7), (35, 0.1, 8), (3, 1.0, 9)] {
            let a = random_spd::<6>(n, density, seed);
            let f = CholeskyFactor::new(&a).unwrap();
            let inv: DMatrix<f64> = a.to_dense().try_inverse().unwrap();
            for (i, m) in f.marginal_covariances().iter().enumerate() {
                let expected = inv.fixed_view::<6, 6>(i * 6, i * 6).into_owned();
                assert_relative_eq!(*m, expected, epsilon = 1e-10, max_relative = 1e-8);
            }
        }
    }

    #[test]
    fn damping_shifts_diagonal() {
        let mut a = random_spd::<3>(5, 0.3, 10);
        let before = a.to_dense();
        a.add_to_diagonal(2.0);
        let diff = a.to_dense() - before;
        assert_relative_eq!(diff, DMatrix::identity(15, 15) * 2.0, epsilon = 1e-12);
    }
}
