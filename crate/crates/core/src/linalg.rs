//! Sparse and banded linear algebra used by the cell solver and the Newton
//! iteration: CSR storage, Jacobi-preconditioned CG and BiCGSTAB with an
//! optional null-space projection, and a banded LU with partial pivoting.

use crate::error::{Error, Result};

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;
    /// `y = A x`; `y` is overwritten.
    fn apply(&self, x: &[f64], y: &mut [f64]);
}

#[derive(Debug, Clone)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Build from unsorted triplets; duplicate entries are summed.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_unstable_by_key(|t| (t.0, t.1));
        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        CsrMatrix {
            n,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                (self.row_ptr[i]..self.row_ptr[i + 1])
                    .find(|&k| self.col_idx[k] == i)
                    .map_or(0.0, |k| self.values[k])
            })
            .collect()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |k| (self.col_idx[k], self.values[k]))
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate().take(self.n) {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            *yi = acc;
        }
    }
}

impl LinearOperator for CsrMatrix {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.matvec(x, y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KrylovOptions {
    pub rel_tol: f64,
    /// `None` selects the default cap `50 * sqrt(unknowns)`.
    pub max_iter: Option<usize>,
}

impl Default for KrylovOptions {
    fn default() -> Self {
        KrylovOptions {
            rel_tol: 1e-10,
            max_iter: None,
        }
    }
}

impl KrylovOptions {
    pub fn iteration_cap(&self, unknowns: usize) -> usize {
        self.max_iter
            .unwrap_or_else(|| ((50.0 * (unknowns as f64).sqrt()).ceil() as usize).max(50))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KrylovStats {
    pub iterations: usize,
    /// True relative residual `|b - A x| / |b|` recomputed at exit.
    pub rel_residual: f64,
}

/// Jacobi preconditioner; zero or tiny diagonal entries fall back to 1.
pub fn inverse_diagonal(diag: &[f64]) -> Vec<f64> {
    let scale = diag.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    diag.iter()
        .map(|&d| {
            if d.abs() > 1e-300 && d.abs() > 1e-14 * scale {
                1.0 / d
            } else {
                1.0
            }
        })
        .collect()
}

fn true_residual(op: &dyn LinearOperator, b: &[f64], x: &[f64], r: &mut [f64]) -> f64 {
    op.apply(x, r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
    norm2(r)
}

/// Preconditioned conjugate gradients for symmetric positive semi-definite
/// operators. `project` is applied to the iterate after every update and is
/// expected to remove null-space components without changing `A x`.
/// `deflate` removes from the right-hand side and the recursive residual
/// their components outside the range of `A`; without it round-off drives
/// singular consistent systems into a near-null search direction.
pub fn pcg(
    op: &dyn LinearOperator,
    inv_diag: &[f64],
    b: &[f64],
    x: &mut [f64],
    opts: &KrylovOptions,
    project: &dyn Fn(&mut [f64]),
    deflate: &dyn Fn(&mut [f64]),
) -> Result<KrylovStats> {
    let n = op.dim();
    let mut b = b.to_vec();
    deflate(&mut b);
    let b = b.as_slice();
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(KrylovStats {
            iterations: 0,
            rel_residual: 0.0,
        });
    }
    let cap = opts.iteration_cap(n);
    project(x);
    let mut r = vec![0.0; n];
    true_residual(op, b, x, &mut r);
    deflate(&mut r);
    let mut rnorm = norm2(&r);
    let mut z: Vec<f64> = r.iter().zip(inv_diag).map(|(a, m)| a * m).collect();
    let mut p = z.clone();
    let mut q = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut it = 0;
    while rnorm / bnorm > opts.rel_tol && it < cap {
        op.apply(&p, &mut q);
        let pq = dot(&p, &q);
        if pq <= 0.0 || !pq.is_finite() {
            break;
        }
        let alpha = rz / pq;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        project(x);
        deflate(&mut r);
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        rnorm = norm2(&r);
        it += 1;
    }
    let rel = true_residual(op, b, x, &mut r) / bnorm;
    if rel <= opts.rel_tol * 10.0 {
        Ok(KrylovStats {
            iterations: it,
            rel_residual: rel,
        })
    } else {
        Err(Error::Solver {
            message: "conjugate gradients".into(),
            residual: rel,
            iterations: it,
        })
    }
}

/// Right-preconditioned BiCGSTAB for nonsymmetric operators. Restarts from
/// the current iterate on breakdown or when the recursive residual drifts
/// from the true one.
pub fn bicgstab(
    op: &dyn LinearOperator,
    inv_diag: &[f64],
    b: &[f64],
    x: &mut [f64],
    opts: &KrylovOptions,
    project: &dyn Fn(&mut [f64]),
    deflate: &dyn Fn(&mut [f64]),
) -> Result<KrylovStats> {
    let n = op.dim();
    let mut b = b.to_vec();
    deflate(&mut b);
    let b = b.as_slice();
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(KrylovStats {
            iterations: 0,
            rel_residual: 0.0,
        });
    }
    let cap = opts.iteration_cap(n);
    let mut it = 0;
    let mut r = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut ph = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut sh = vec![0.0; n];
    let mut t = vec![0.0; n];
    project(x);
    let mut restarts = 0;
    loop {
        true_residual(op, b, x, &mut r);
        deflate(&mut r);
        let mut rnorm = norm2(&r);
        if rnorm / bnorm <= opts.rel_tol || it >= cap || restarts > 20 {
            break;
        }
        restarts += 1;
        let rhat = r.clone();
        let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
        p.iter_mut().for_each(|e| *e = 0.0);
        v.iter_mut().for_each(|e| *e = 0.0);
        while rnorm / bnorm > opts.rel_tol && it < cap {
            let rho_new = dot(&rhat, &r);
            if rho_new.abs() < 1e-300 || !rho_new.is_finite() {
                break;
            }
            let beta = (rho_new / rho) * (alpha / omega);
            rho = rho_new;
            for i in 0..n {
                p[i] = r[i] + beta * (p[i] - omega * v[i]);
                ph[i] = p[i] * inv_diag[i];
            }
            op.apply(&ph, &mut v);
            let rv = dot(&rhat, &v);
            if rv.abs() < 1e-300 {
                break;
            }
            alpha = rho / rv;
            for i in 0..n {
                s[i] = r[i] - alpha * v[i];
            }
            deflate(&mut s);
            it += 1;
            if norm2(&s) / bnorm <= opts.rel_tol {
                for i in 0..n {
                    x[i] += alpha * ph[i];
                }
                project(x);
                rnorm = norm2(&s);
                r.copy_from_slice(&s);
                break;
            }
            for i in 0..n {
                sh[i] = s[i] * inv_diag[i];
            }
            op.apply(&sh, &mut t);
            let tt = dot(&t, &t);
            if tt == 0.0 {
                break;
            }
            omega = dot(&t, &s) / tt;
            for i in 0..n {
                x[i] += alpha * ph[i] + omega * sh[i];
                r[i] = s[i] - omega * t[i];
            }
            project(x);
            deflate(&mut r);
            rnorm = norm2(&r);
            if omega.abs() < 1e-300 {
                break;
            }
        }
    }
    let rel = true_residual(op, b, x, &mut r) / bnorm;
    if rel <= opts.rel_tol * 10.0 {
        Ok(KrylovStats {
            iterations: it,
            rel_residual: rel,
        })
    } else {
        Err(Error::Solver {
            message: "BiCGSTAB".into(),
            residual: rel,
            iterations: it,
        })
    }
}

/// Square band matrix with `kl` sub- and `ku` super-diagonals, stored with
/// `kl` extra super-diagonals of fill-in room for partial pivoting.
#[derive(Debug, Clone)]
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
        BandMatrix {
            n,
            kl,
            ku,
            width,
            data: vec![0.0; n * width],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j + self.kl >= i && j <= i + self.ku + self.kl);
        i * self.width + (j + self.kl - i)
    }

    pub fn in_band(&self, i: usize, j: usize) -> bool {
        i < self.n && j < self.n && j + self.kl >= i && j <= i + self.ku
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        assert!(self.in_band(i, j), "entry ({i},{j}) outside band");
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j + self.kl >= i && j <= i + self.ku + self.kl && i < self.n && j < self.n {
            self.data[self.idx(i, j)]
        } else {
            0.0
        }
    }

    /// In-place LU factorization with partial pivoting.
    pub fn factor(mut self) -> Result<BandLu> {
        let n = self.n;
        let (kl, ku) = (self.kl, self.ku);
        let mut piv = vec![0usize; n];
        for k in 0..n {
            let last_row = (k + kl).min(n - 1);
            let mut p = k;
            let mut best = self.data[self.idx(k, k)].abs();
            for i in k + 1..=last_row {
                let v = self.data[self.idx(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best == 0.0 || !best.is_finite() {
                return Err(Error::Solver {
                    message: format!("singular band matrix at column {k}"),
                    residual: f64::INFINITY,
                    iterations: 0,
                });
            }
            piv[k] = p;
            let last_col = (k + ku + kl).min(n - 1);
            if p != k {
                for j in k..=last_col {
                    let a = self.idx(k, j);
                    let b = self.idx(p, j);
                    self.data.swap(a, b);
                }
            }
            let pivot = self.data[self.idx(k, k)];
            for i in k + 1..=last_row {
                let ik = self.idx(i, k);
                let l = self.data[ik] / pivot;
                self.data[ik] = l;
                if l != 0.0 {
                    for j in k + 1..=last_col {
                        let kj = self.data[self.idx(k, j)];
                        let ij = self.idx(i, j);
                        self.data[ij] -= l * kj;
                    }
                }
            }
        }
        Ok(BandLu { m: self, piv })
    }
}

#[derive(Debug, Clone)]
pub struct BandLu {
    m: BandMatrix,
    piv: Vec<usize>,
}

impl BandLu {
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let m = &self.m;
        let n = m.n;
        for k in 0..n {
            let p = self.piv[k];
            if p != k {
                b.swap(k, p);
            }
            let bk = b[k];
            if bk != 0.0 {
                for i in k + 1..=(k + m.kl).min(n - 1) {
                    b[i] -= m.data[m.idx(i, k)] * bk;
                }
            }
        }
        for k in (0..n).rev() {
            let mut acc = b[k];
            for j in k + 1..=(k + m.ku + m.kl).min(n - 1) {
                acc -= m.data[m.idx(k, j)] * b[j];
            }
            b[k] = acc / m.data[m.idx(k, k)];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplace_1d_periodic(n: usize) -> CsrMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0));
            t.push((i, (i + 1) % n, -1.0));
            t.push((i, (i + n - 1) % n, -1.0));
        }
        CsrMatrix::from_triplets(n, t)
    }

    fn remove_mean(x: &mut [f64]) {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        x.iter_mut().for_each(|v| *v -= m);
    }

    #[test]
    fn triplets_are_merged() {
        let m = CsrMatrix::from_triplets(2, vec![(0, 0, 1.0), (0, 0, 2.0), (1, 0, 4.0)]);
        assert_eq!(m.diagonal(), vec![3.0, 0.0]);
        let mut y = vec![0.0; 2];
        m.matvec(&[1.0, 1.0], &mut y);
        assert_eq!(y, vec![3.0, 4.0]);
    }

    #[test]
    fn cg_and_bicgstab_solve_singular_consistent_system() {
        let n = 40;
        let a = laplace_1d_periodic(n);
        let mut b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.3).sin()).collect();
        remove_mean(&mut b);
        let inv = inverse_diagonal(&a.diagonal());
        let opts = KrylovOptions {
            rel_tol: 1e-12,
            max_iter: None,
        };
        let mut x1 = vec![0.0; n];
        pcg(&a, &inv, &b, &mut x1, &opts, &remove_mean, &remove_mean).unwrap();
        let mut x2 = vec![0.0; n];
        bicgstab(&a, &inv, &b, &mut x2, &opts, &remove_mean, &remove_mean).unwrap();
        for (p, q) in x1.iter().zip(&x2) {
            assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn iteration_cap_is_reported() {
        let a = laplace_1d_periodic(200);
        let mut b: Vec<f64> = (0..200).map(|i| (i as f64).cos()).collect();
        remove_mean(&mut b);
        let inv = inverse_diagonal(&a.diagonal());
        let opts = KrylovOptions {
            rel_tol: 1e-14,
            max_iter: Some(3),
        };
        let mut x = vec![0.0; 200];
        match pcg(&a, &inv, &b, &mut x, &opts, &remove_mean, &remove_mean) {
            Err(Error::Solver { iterations, .. }) => assert_eq!(iterations, 3),
            other => panic!("expected solver error, got {other:?}"),
        }
    }

    #[test]
    fn banded_lu_needs_pivoting() {
        // Zero leading pivot forces a row interchange.
        let n = 6;
        let mut m = BandMatrix::zeros(n, 1, 1);
        let mut dense = vec![vec![0.0; n]; n];
        for i in 0..n {
            let d = if i == 0 { 0.0 } else { 3.0 + i as f64 };
            m.add(i, i, d);
            dense[i][i] = d;
            if i + 1 < n {
                m.add(i, i + 1, 1.0 + i as f64);
                dense[i][i + 1] = 1.0 + i as f64;
                m.add(i + 1, i, 2.0);
                dense[i + 1][i] = 2.0;
            }
        }
        let x_true: Vec<f64> = (0..n).map(|i| 1.0 - 0.5 * i as f64).collect();
        let mut b: Vec<f64> = dense
            .iter()
            .map(|row| row.iter().zip(&x_true).map(|(a, x)| a * x).sum())
            .collect();
        m.factor().unwrap().solve_in_place(&mut b);
        for (p, q) in b.iter().zip(&x_true) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
