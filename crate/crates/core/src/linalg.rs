//! Small dense linear algebra on row-major `n x n` slices.
//!
//! Dimensions here are tiny (d or 2d with d a handful), so plain loops
//! beat pulling in a matrix crate.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

pub fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

pub fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                c[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    c
}

pub fn matvec(a: &[f64], x: &[f64], n: usize) -> Vec<f64> {
    (0..n).map(|i| dot(&a[i * n..(i + 1) * n], x)).collect()
}

pub fn transpose(a: &[f64], n: usize) -> Vec<f64> {
    let mut t = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            t[j * n + i] = a[i * n + j];
        }
    }
    t
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
/// Returns `None` for (numerically) singular systems.
pub fn solve(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut m = a.to_vec();
    let mut x = b.to_vec();
    let scale = max_abs(a).max(f64::MIN_POSITIVE);
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .unwrap();
        if m[piv * n + col].abs() <= 1e-14 * scale {
            return None;
        }
        if piv != col {
            for j in 0..n {
                m.swap(piv * n + j, col * n + j);
            }
            x.swap(piv, col);
        }
        let d = m[col * n + col];
        for i in col + 1..n {
            let f = m[i * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                m[i * n + j] -= f * m[col * n + j];
            }
            x[i] -= f * x[col];
        }
    }
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| m[i * n + j] * x[j]).sum();
        x[i] = (x[i] - s) / m[i * n + i];
    }
    Some(x)
}

pub fn invert(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut inv = vec![0.0; n * n];
    let mut e = vec![0.0; n];
    for j in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        let col = solve(a, &e, n)?;
        for i in 0..n {
            inv[i * n + j] = col[i];
        }
    }
    Some(inv)
}

pub fn determinant(a: &[f64], n: usize) -> f64 {
    let mut m = a.to_vec();
    let mut det = 1.0;
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .unwrap();
        if m[piv * n + col] == 0.0 {
            return 0.0;
        }
        if piv != col {
            for j in 0..n {
                m.swap(piv * n + j, col * n + j);
            }
            det = -det;
        }
        let d = m[col * n + col];
        det *= d;
        for i in col + 1..n {
            let f = m[i * n + col] / d;
            for j in col..n {
                m[i * n + j] -= f * m[col * n + j];
            }
        }
    }
    det
}

/// Operator 2-norm by power iteration on `aᵀa` (30 iterations).
pub fn operator_norm(a: &[f64], n: usize) -> f64 {
    if n == 1 {
        return a[0].abs();
    }
    let ata = matmul(&transpose(a, n), a, n);
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * i as f64).collect();
    let mut lambda = 0.0;
    for _ in 0..30 {
        let w = matvec(&ata, &v, n);
        let nw = norm(&w);
        if nw == 0.0 {
            return 0.0;
        }
        lambda = nw / norm(&v);
        v = w.iter().map(|x| x / nw).collect();
    }
    lambda.sqrt()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn symmetric_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    for _sweep in 0..60 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j].powi(2))
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Solves a symmetric block-tridiagonal system with `k` diagonal blocks of
/// size `n`. `diag[i]` and `upper[i]` (coupling between blocks i and i+1)
/// are row-major; the lower blocks are the transposes of `upper`.
pub fn solve_block_tridiagonal(
    diag: &[Vec<f64>],
    upper: &[Vec<f64>],
    rhs: &[Vec<f64>],
    n: usize,
) -> Option<Vec<Vec<f64>>> {
    let k = diag.len();
    if k == 0 {
        return Some(Vec::new());
    }
    // forward elimination: D'_i = D_i - L_i D'_{i-1}^{-1} U_{i-1}
    let mut dprime: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut rprime: Vec<Vec<f64>> = Vec::with_capacity(k);
    dprime.push(diag[0].clone());
    rprime.push(rhs[0].clone());
    for i in 1..k {
        let inv = invert(&dprime[i - 1], n)?;
        let lower = transpose(&upper[i - 1], n);
        let l_inv = matmul(&lower, &inv, n);
        let corr = matmul(&l_inv, &upper[i - 1], n);
        let d: Vec<f64> = diag[i].iter().zip(&corr).map(|(a, b)| a - b).collect();
        let rc = matvec(&l_inv, &rprime[i - 1], n);
        let r: Vec<f64> = rhs[i].iter().zip(&rc).map(|(a, b)| a - b).collect();
        dprime.push(d);
        rprime.push(r);
    }
    let mut x = vec![Vec::new(); k];
    x[k - 1] = solve(&dprime[k - 1], &rprime[k - 1], n)?;
    for i in (0..k - 1).rev() {
        let ux = matvec(&upper[i], &x[i + 1], n);
        let r: Vec<f64> = rprime[i].iter().zip(&ux).map(|(a, b)| a - b).collect();
        x[i] = solve(&dprime[i], &r, n)?;
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solve_small_system() {
        let a = [2.0, 1.0, 1.0, 3.0];
        let x = solve(&a, &[3.0, 5.0], 2).unwrap();
        assert!((x[0] - 0.8).abs() < 1e-14 && (x[1] - 1.4).abs() < 1e-14);
        assert!(solve(&[1.0, 2.0, 2.0, 4.0], &[1.0, 1.0], 2).is_none());
    }

    #[test]
    fn eigen_and_norm_agree_on_symmetric() {
        let a = [4.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 2.0];
        let ev = symmetric_eigenvalues(&a, 3);
        // trace and determinant are preserved
        assert!((ev.iter().sum::<f64>() - 9.0).abs() < 1e-12);
        assert!((ev.iter().product::<f64>() - determinant(&a, 3)).abs() < 1e-10);
        assert!((operator_norm(&a, 3) - ev[2]).abs() < 1e-8);
    }

    #[test]
    fn block_tridiagonal_matches_dense() {
        // scalar blocks: tridiag(-1, 2, -1) of size 4
        let diag = vec![vec![2.0]; 4];
        let upper = vec![vec![-1.0]; 3];
        let rhs = vec![vec![1.0], vec![0.0], vec![0.0], vec![1.0]];
        let x = solve_block_tridiagonal(&diag, &upper, &rhs, 1).unwrap();
        for xi in x {
            assert!((xi[0] - 1.0).abs() < 1e-12);
        }
    }
}
