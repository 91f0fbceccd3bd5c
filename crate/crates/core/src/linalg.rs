//! Small dense linear algebra kernels.
//!
//! Everything here works on tiny systems (a handful of columns) with
//! potentially many rows, which is the shape of every regression in this
//! crate. Matrices are column-major `Vec<f64>`s.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is rank deficient (numerical rank {rank} of {cols})")]
    RankDeficient { rank: usize, cols: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("system is singular")]
    Singular,
}

/// Least-squares solution of `A x = b_j` for each right-hand side `b_j`.
///
/// `a` is column-major with `rows` rows and `cols` columns and is destroyed.
/// Householder QR with column pivoting; the problem is declared rank
/// deficient when `|R_jj| < rel_tol * |R_00|`.
pub fn lstsq(
    a: &mut [f64],
    rows: usize,
    cols: usize,
    rhs: &mut [Vec<f64>],
    rel_tol: f64,
) -> Result<Vec<Vec<f64>>, LinalgError> {
    if a.len() != rows * cols {
        return Err(LinalgError::Dimension(format!(
            "matrix buffer has {} entries, expected {rows}x{cols}",
            a.len()
        )));
    }
    if rhs.iter().any(|b| b.len() != rows) {
        return Err(LinalgError::Dimension("right-hand side length".into()));
    }
    if rows < cols {
        return Err(LinalgError::RankDeficient { rank: rows, cols });
    }

    let mut perm: Vec<usize> = (0..cols).collect();
    let mut rdiag = vec![0.0; cols];
    let mut col_norm2: Vec<f64> = (0..cols).map(|j| norm2(&a[j * rows..(j + 1) * rows])).collect();
    let mut first_diag = 0.0;

    for j in 0..cols {
        // pivot: largest remaining column norm over rows j..
        let mut best = j;
        for c in (j + 1)..cols {
            if col_norm2[c] > col_norm2[best] {
                best = c;
            }
        }
        if best != j {
            for r in 0..rows {
                a.swap(j * rows + r, best * rows + r);
            }
            perm.swap(j, best);
            col_norm2.swap(j, best);
        }

        let col = &mut a[j * rows..(j + 1) * rows];
        let x = &mut col[j..];
        let norm = norm2(x).sqrt();
        if j == 0 {
            first_diag = norm;
        }
        if norm == 0.0 || norm < rel_tol * first_diag {
            return Err(LinalgError::RankDeficient { rank: j, cols });
        }
        let alpha = if x[0] > 0.0 { -norm } else { norm };
        x[0] -= alpha;
        let vnorm2 = norm2(x);
        rdiag[j] = alpha;

        // apply the reflector to the trailing columns and to every rhs
        let (head, tail) = a.split_at_mut((j + 1) * rows);
        let v = &head[j * rows + j..(j + 1) * rows];
        if vnorm2 > 0.0 {
            for c in 0..(cols - j - 1) {
                let target = &mut tail[c * rows + j..(c + 1) * rows];
                reflect(v, vnorm2, target);
            }
            for b in rhs.iter_mut() {
                reflect(v, vnorm2, &mut b[j..]);
            }
        }
        for c in (j + 1)..cols {
            let cc = &a[c * rows + j + 1..(c + 1) * rows];
            col_norm2[c] = norm2(cc);
        }
    }

    let mut solutions = Vec::with_capacity(rhs.len());
    for b in rhs.iter() {
        let mut y = vec![0.0; cols];
        for j in (0..cols).rev() {
            let mut s = b[j];
            for c in (j + 1)..cols {
                s -= a[c * rows + j] * y[c];
            }
            y[j] = s / rdiag[j];
        }
        let mut x = vec![0.0; cols];
        for (j, &p) in perm.iter().enumerate() {
            x[p] = y[j];
        }
        solutions.push(x);
    }
    Ok(solutions)
}

fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn reflect(v: &[f64], vnorm2: f64, target: &mut [f64]) {
    let dot: f64 = v.iter().zip(target.iter()).map(|(a, b)| a * b).sum();
    let scale = 2.0 * dot / vnorm2;
    for (t, vi) in target.iter_mut().zip(v) {
        *t -= scale * vi;
    }
}

/// Solves a small square system by Gaussian elimination with partial pivoting.
///
/// `a` is row-major `k x k`. A pivot smaller than `rel_tol` times the largest
/// absolute entry of the matrix is treated as singular.
pub fn solve_square(a: &[f64], b: &[f64], rel_tol: f64) -> Result<Vec<f64>, LinalgError> {
    let k = b.len();
    if a.len() != k * k {
        return Err(LinalgError::Dimension("square system".into()));
    }
    let mut m = a.to_vec();
    let mut x = b.to_vec();
    let scale = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return Err(LinalgError::Singular);
    }
    for col in 0..k {
        let mut piv = col;
        for r in (col + 1)..k {
            if m[r * k + col].abs() > m[piv * k + col].abs() {
                piv = r;
            }
        }
        if m[piv * k + col].abs() <= rel_tol * scale {
            return Err(LinalgError::Singular);
        }
        if piv != col {
            for c in 0..k {
                m.swap(piv * k + c, col * k + c);
            }
            x.swap(piv, col);
        }
        let d = m[col * k + col];
        for r in (col + 1)..k {
            let f = m[r * k + col] / d;
            if f != 0.0 {
                for c in col..k {
                    m[r * k + c] -= f * m[col * k + c];
                }
                x[r] -= f * x[col];
            }
        }
    }
    for r in (0..k).rev() {
        let mut s = x[r];
        for c in (r + 1)..k {
            s -= m[r * k + c] * x[c];
        }
        x[r] = s / m[r * k + r];
    }
    Ok(x)
}

/// Ordinary least squares of `y` on the row-major design `x` (`n x k`).
pub fn ols(x: &[f64], n: usize, k: usize, y: &[f64]) -> Result<Vec<f64>, LinalgError> {
    if x.len() != n * k || y.len() != n {
        return Err(LinalgError::Dimension("ols design".into()));
    }
    let mut a = vec![0.0; n * k];
    for i in 0..n {
        for j in 0..k {
            a[j * n + i] = x[i * k + j];
        }
    }
    let mut rhs = vec![y.to_vec()];
    let mut sol = lstsq(&mut a, n, k, &mut rhs, 1e-10)?;
    Ok(sol.pop().expect("one rhs"))
}
