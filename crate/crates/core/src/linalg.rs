//! Banded matrices with an in-place LU factorization (partial pivoting).

/// Square band matrix with `kl` sub- and `ku` superdiagonals.
///
/// Rows are stored as windows wide enough to hold the fill-in produced by
/// row interchanges, so the same storage serves the factorization.
#[derive(Clone, Debug, PartialEq)]
pub struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let width = 2 * kl + ku + 1;
        Self {
            n,
            kl,
            ku,
            width,
            data: vec![0.0; n * width],
        }
    }

    pub fn identity(n: usize, kl: usize, ku: usize) -> Self {
        let mut a = Self::zeros(n, kl, ku);
        for i in 0..n {
            a.set(i, i, 1.0);
        }
        a
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    fn offset(&self, i: usize, j: usize) -> usize {
        debug_assert!(j + self.kl >= i && j <= i + self.kl + self.ku, "({i}, {j}) outside band");
        i * self.width + (j + self.kl - i)
    }

    #[inline]
    fn in_band(&self, i: usize, j: usize) -> bool {
        j + self.kl >= i && j <= i + self.ku
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if self.in_band(i, j) {
            self.data[self.offset(i, j)]
        } else {
            0.0
        }
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        assert!(self.in_band(i, j), "({i}, {j}) outside band");
        let o = self.offset(i, j);
        self.data[o] = v;
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        assert!(self.in_band(i, j), "({i}, {j}) outside band");
        let o = self.offset(i, j);
        self.data[o] += v;
    }

    fn cols(&self, i: usize) -> std::ops::Range<usize> {
        i.saturating_sub(self.kl)..(i + self.ku + 1).min(self.n)
    }

    /// `y = A x`.
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate().take(self.n) {
            *yi = self.cols(i).map(|j| self.data[self.offset(i, j)] * x[j]).sum();
        }
    }

    /// `alpha I + beta A`.
    pub fn shifted(&self, alpha: f64, beta: f64) -> Self {
        let mut out = self.clone();
        for v in &mut out.data {
            *v *= beta;
        }
        for i in 0..self.n {
            out.add(i, i, alpha);
        }
        out
    }

    /// `W⁻¹ Aᵀ W` for a positive diagonal weight `W`.
    pub fn weighted_transpose(&self, w: &[f64]) -> Self {
        let mut out = Self::zeros(self.n, self.ku, self.kl);
        for i in 0..self.n {
            for j in self.cols(i) {
                out.set(j, i, self.data[self.offset(i, j)] * w[i] / w[j]);
            }
        }
        out
    }

    /// Factorizes in place; returns `None` if a pivot vanishes.
    pub fn factor(mut self) -> Option<BandLu> {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        let mut pivots = vec![0usize; n];
        let mut lower = vec![0.0; n * kl.max(1)];
        let scale = self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for k in 0..n {
            let last = (k + kl).min(n - 1);
            let mut p = k;
            let mut best = self.data[self.offset(k, k)].abs();
            for i in k + 1..=last {
                let v = self.data[self.offset(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if !(best > scale * f64::EPSILON * 1e-2) || !best.is_finite() {
                return None;
            }
            pivots[k] = p;
            let right = (k + kl + ku).min(n - 1);
            if p != k {
                for j in k..=right {
                    let (a, b) = (self.offset(k, j), self.offset(p, j));
                    self.data.swap(a, b);
                }
            }
            let d = self.data[self.offset(k, k)];
            for i in k + 1..=last {
                let oik = self.offset(i, k);
                let l = self.data[oik] / d;
                self.data[oik] = 0.0;
                lower[k * kl + (i - k - 1)] = l;
                if l != 0.0 {
                    for j in k + 1..=right {
                        let v = self.data[self.offset(k, j)];
                        let o = self.offset(i, j);
                        self.data[o] -= l * v;
                    }
                }
            }
        }
        Some(BandLu {
            u: self,
            lower,
            pivots,
        })
    }
}

/// LU factors of a [`BandMatrix`].
#[derive(Clone, Debug)]
pub struct BandLu {
    u: BandMatrix,
    lower: Vec<f64>,
    pivots: Vec<usize>,
}

impl BandLu {
    pub fn dim(&self) -> usize {
        self.u.n
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let (n, kl, ku) = (self.u.n, self.u.kl, self.u.ku);
        for k in 0..n {
            let p = self.pivots[k];
            if p != k {
                b.swap(k, p);
            }
            let bk = b[k];
            if bk != 0.0 {
                for i in k + 1..=(k + kl).min(n.saturating_sub(1)) {
                    b[i] -= self.lower[k * kl + (i - k - 1)] * bk;
                }
            }
        }
        for k in (0..n).rev() {
            let right = (k + kl + ku).min(n - 1);
            let mut s = b[k];
            for j in k + 1..=right {
                s -= self.u.data[self.u.offset(k, j)] * b[j];
            }
            b[k] = s / self.u.data[self.u.offset(k, k)];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_band(n: usize, kl: usize, ku: usize, rng: &mut ChaCha8Rng) -> BandMatrix {
        let mut a = BandMatrix::zeros(n, kl, ku);
        for i in 0..n {
            for j in i.saturating_sub(kl)..(i + ku + 1).min(n) {
                // weak diagonal so pivoting is exercised
                a.set(i, j, rng.gen_range(-1.0..1.0) * if i == j { 0.01 } else { 1.0 });
            }
        }
        a
    }

    fn dense(a: &BandMatrix) -> DMatrix<f64> {
        DMatrix::from_fn(a.dim(), a.dim(), |i, j| a.get(i, j))
    }

    #[test]
    fn solve_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(n, kl, ku) in &[(1, 3, 3), (5, 1, 2), (40, 3, 3), (33, 2, 1), (20, 0, 2)] {
            let a = random_band(n, kl, ku, &mut rng);
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let expected = dense(&a).lu().solve(&DVector::from_column_slice(&b)).unwrap();
            let mut x = b.clone();
            a.clone().factor().unwrap().solve_in_place(&mut x);
            for i in 0..n {
                assert!((x[i] - expected[i]).abs() < 1e-9 * expected.amax().max(1.0));
            }
        }
    }

    #[test]
    fn weighted_transpose_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 12;
        let a = random_band(n, 3, 3, &mut rng);
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..2.0)).collect();
        let at = a.weighted_transpose(&w);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (mut ax, mut aty) = (vec![0.0; n], vec![0.0; n]);
        a.matvec(&x, &mut ax);
        at.matvec(&y, &mut aty);
        let lhs: f64 = (0..n).map(|i| w[i] * ax[i] * y[i]).sum();
        let rhs: f64 = (0..n).map(|i| w[i] * x[i] * aty[i]).sum();
        assert!((lhs - rhs).abs() < 1e-13);
    }

    #[test]
    fn singular_matrix_is_reported() {
        let a = BandMatrix::zeros(4, 1, 1);
        assert!(a.factor().is_none());
    }
}
