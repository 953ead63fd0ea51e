//! Block vectors and symmetric block-tridiagonal matrices.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A trajectory-shaped vector: one `DVector` per time step.
pub type BlockVector = Vec<DVector<f64>>;

pub fn dot(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

pub fn norm(a: &[DVector<f64>]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[DVector<f64>]) -> f64 {
    a.iter().map(|v| v.amax()).fold(0.0, f64::max)
}

/// `x + alpha·d`
pub fn axpy(x: &[DVector<f64>], alpha: f64, d: &[DVector<f64>]) -> BlockVector {
    x.iter().zip(d).map(|(a, b)| a + b * alpha).collect()
}

pub fn scale(a: &[DVector<f64>], alpha: f64) -> BlockVector {
    a.iter().map(|v| v * alpha).collect()
}

pub fn flatten(a: &[DVector<f64>]) -> DVector<f64> {
    DVector::from_iterator(a.iter().map(|v| v.len()).sum(), a.iter().flat_map(|v| v.iter().copied()))
}

pub fn unflatten(v: &DVector<f64>, block: usize) -> BlockVector {
    v.as_slice()
        .chunks(block)
        .map(DVector::from_column_slice)
        .collect()
}

/// Symmetric block-tridiagonal matrix with `N` square `n×n` diagonal blocks.
///
/// `lower[i]` holds the block at block-row `i + 1`, block-column `i`; the
/// super-diagonal is its transpose.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTridiagonal {
    pub diag: Vec<DMatrix<f64>>,
    pub lower: Vec<DMatrix<f64>>,
}

impl BlockTridiagonal {
    pub fn zeros(blocks: usize, n: usize) -> Self {
        Self {
            diag: vec![DMatrix::zeros(n, n); blocks],
            lower: vec![DMatrix::zeros(n, n); blocks.saturating_sub(1)],
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.diag.len()
    }

    pub fn block_size(&self) -> usize {
        self.diag.first().map_or(0, |b| b.nrows())
    }

    pub fn dim(&self) -> usize {
        self.num_blocks() * self.block_size()
    }

    pub fn add_identity(&mut self, mu: f64) {
        for b in &mut self.diag {
            for i in 0..b.nrows() {
                b[(i, i)] += mu;
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.block_size();
        let mut out = DMatrix::zeros(self.dim(), self.dim());
        for (i, b) in self.diag.iter().enumerate() {
            out.view_mut((i * n, i * n), (n, n)).copy_from(b);
        }
        for (i, b) in self.lower.iter().enumerate() {
            out.view_mut(((i + 1) * n, i * n), (n, n)).copy_from(b);
            out.view_mut((i * n, (i + 1) * n), (n, n)).copy_from(&b.transpose());
        }
        out
    }

    pub fn mul_vec(&self, x: &[DVector<f64>]) -> BlockVector {
        let mut y: BlockVector = self.diag.iter().zip(x).map(|(d, v)| d * v).collect();
        for (i, b) in self.lower.iter().enumerate() {
            y[i + 1] += b * &x[i];
            y[i] += b.tr_mul(&x[i + 1]);
        }
        y
    }

    pub fn quad_form(&self, x: &[DVector<f64>]) -> f64 {
        dot(x, &self.mul_vec(x))
    }

    /// Block Cholesky factorization `S = L Lᵀ` with lower block-bidiagonal `L`.
    pub fn cholesky(&self) -> Result<BlockCholesky> {
        let nb = self.num_blocks();
        let mut diag_l = Vec::with_capacity(nb);
        // Off-diagonal factor blocks: L[t, t-1] = A_t · C_{t-1}^{-T}
        let mut lower_l = Vec::with_capacity(nb.saturating_sub(1));
        let mut schur = self.diag[0].clone();
        for t in 0..nb {
            let chol = schur
                .clone()
                .cholesky()
                .ok_or(Error::FactorizationFailure { block: t })?;
            let c = chol.l();
            if t + 1 < nb {
                let a = &self.lower[t];
                // Solve C · Bᵀ = Aᵀ for Bᵀ.
                let bt = c
                    .solve_lower_triangular(&a.transpose())
                    .ok_or(Error::FactorizationFailure { block: t })?;
                schur = &self.diag[t + 1] - bt.tr_mul(&bt);
                lower_l.push(bt.transpose());
            }
            diag_l.push(c);
        }
        Ok(BlockCholesky { diag_l, lower_l })
    }
}

#[derive(Debug, Clone)]
pub struct BlockCholesky {
    diag_l: Vec<DMatrix<f64>>,
    lower_l: Vec<DMatrix<f64>>,
}

impl BlockCholesky {
    /// Solves `S x = b` by block forward and back substitution.
    pub fn solve(&self, b: &[DVector<f64>]) -> Result<BlockVector> {
        let nb = self.diag_l.len();
        let mut z: BlockVector = Vec::with_capacity(nb);
        for t in 0..nb {
            let mut rhs = b[t].clone();
            if t > 0 {
                rhs -= &self.lower_l[t - 1] * &z[t - 1];
            }
            let zt = self.diag_l[t]
                .solve_lower_triangular(&rhs)
                .ok_or(Error::FactorizationFailure { block: t })?;
            z.push(zt);
        }
        let mut x = z;
        for t in (0..nb).rev() {
            let mut rhs = x[t].clone();
            if t + 1 < nb {
                rhs -= self.lower_l[t].tr_mul(&x[t + 1]);
            }
            x[t] = self.diag_l[t]
                .tr_solve_lower_triangular(&rhs)
                .ok_or(Error::FactorizationFailure { block: t })?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::random_spd;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_block_spd(nb: usize, n: usize, seed: u64) -> BlockTridiagonal {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = BlockTridiagonal::zeros(nb, n);
        for t in 0..nb {
            m.diag[t] = random_spd(n, 3.0, &mut rng);
        }
        for b in &mut m.lower {
            *b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.5..0.5));
        }
        m
    }

    #[test]
    fn dense_and_block_products_agree() {
        let m = random_block_spd(5, 3, 2);
        let x: BlockVector = (0..5).map(|i| DVector::from_element(3, i as f64 - 1.5)).collect();
        let dense = m.to_dense() * flatten(&x);
        let blk = flatten(&m.mul_vec(&x));
        assert!((dense - blk).amax() < 1e-12);
        assert!((m.to_dense() - m.to_dense().transpose()).amax() == 0.0);
    }

    #[test]
    fn identity_solve_returns_rhs() {
        let mut m = BlockTridiagonal::zeros(4, 2);
        m.add_identity(1.0);
        let b: BlockVector = (0..4).map(|i| DVector::from_vec(vec![i as f64, -2.0])).collect();
        let x = m.cholesky().unwrap().solve(&b).unwrap();
        assert_eq!(x, b);
    }

    #[test]
    fn indefinite_block_is_reported() {
        let mut m = BlockTridiagonal::zeros(3, 2);
        m.add_identity(1.0);
        m.diag[2][(1, 1)] = -1.0;
        assert!(matches!(m.cholesky(), Err(Error::FactorizationFailure { block: 2 })));
    }
}
