use super::Tensor;
use crate::error::{Error, Result};

fn square(m: &Tensor, what: &str) -> Result<usize> {
    match m.shape() {
        &[r, c] if r == c => Ok(r),
        s => Err(Error::dim(format!("{what} needs a square matrix, got {s:?}"))),
    }
}

pub fn frobenius_norm(m: &Tensor) -> f64 {
    m.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `M v` for a square or rectangular 2-D `M`.
pub fn matvec(m: &Tensor, v: &[f64]) -> Vec<f64> {
    let cols = m.shape()[1];
    debug_assert_eq!(cols, v.len());
    (0..m.shape()[0])
        .map(|i| {
            let mut s = 0.0;
            for (a, b) in m.row(i).iter().zip(v) {
                s += a * b;
            }
            s
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Solves `(C + eps I) u = d` for symmetric `C` by Cholesky factorization,
/// followed by two rounds of iterative refinement.
pub fn solve_spd(c: &Tensor, d: &Tensor, eps: f64) -> Result<Tensor> {
    let n = square(c, "solve_spd")?;
    if d.len() != n {
        return Err(Error::dim(format!("rhs length {} for {n}x{n} system", d.len())));
    }
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(Error::dim("damping must be finite and >= 0"));
    }
    let scale = c.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut asym = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            asym = asym.max((c.at2(i, j) - c.at2(j, i)).abs());
        }
    }
    if asym > 1e-12 * scale.max(1.0) {
        return Err(Error::NotSymmetric(asym));
    }

    let a = |i: usize, j: usize| c.at2(i, j) + if i == j { eps } else { 0.0 };
    // lower-triangular factor, row-major
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut s = a(j, j);
        for k in 0..j {
            s -= l[j * n + k] * l[j * n + k];
        }
        if !(s > 0.0) {
            return Err(Error::Singular { pivot: j, value: s });
        }
        let diag = s.sqrt();
        l[j * n + j] = diag;
        for i in j + 1..n {
            let mut s = a(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / diag;
        }
    }
    let solve = |rhs: &[f64]| -> Vec<f64> {
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = rhs[i];
            for k in 0..i {
                s -= l[i * n + k] * y[k];
            }
            y[i] = s / l[i * n + i];
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= l[k * n + i] * x[k];
            }
            x[i] = s / l[i * n + i];
        }
        x
    };

    let mut u = solve(d.data());
    for _ in 0..2 {
        let r: Vec<f64> = (0..n)
            .map(|i| {
                let mut s = d.data()[i];
                for j in 0..n {
                    s -= a(i, j) * u[j];
                }
                s
            })
            .collect();
        let du = solve(&r);
        for (ui, di) in u.iter_mut().zip(du) {
            *ui += di;
        }
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular { pivot: n, value: f64::NAN });
    }
    Ok(Tensor::from_parts(vec![n], u))
}

/// Dominant eigenvector of a symmetric positive semi-definite matrix.
///
/// Starts from the normalized column of largest norm (lowest index on
/// ties) and stops once `|Mv - (v'Mv) v| < tol * |M|_F`. The result has unit
/// norm and its first nonzero component is positive.
pub fn power_iteration(m: &Tensor, tol: f64, max_iters: usize) -> Result<Tensor> {
    let n = square(m, "power_iteration")?;
    let mnorm = frobenius_norm(m);
    if mnorm == 0.0 {
        return Err(Error::Degenerate("power iteration on the zero matrix".into()));
    }
    let mut best = (0usize, -1.0f64);
    for j in 0..n {
        let cn = (0..n).map(|i| m.at2(i, j).powi(2)).sum::<f64>();
        if cn > best.1 {
            best = (j, cn);
        }
    }
    let cn = best.1.sqrt();
    let mut v: Vec<f64> = (0..n).map(|i| m.at2(i, best.0) / cn).collect();

    let mut rayleigh = f64::NAN;
    for _ in 0..max_iters {
        let mv = matvec(m, &v);
        rayleigh = v.iter().zip(&mv).map(|(a, b)| a * b).sum();
        let resid = norm(&mv.iter().zip(&v).map(|(a, b)| a - rayleigh * b).collect::<Vec<_>>());
        if resid < tol * mnorm {
            return Ok(finish_unit(v));
        }
        let nm = norm(&mv);
        if nm == 0.0 {
            return Err(Error::Degenerate("iterate fell into the null space".into()));
        }
        v = mv.into_iter().map(|x| x / nm).collect();
    }
    Err(Error::NoConvergence { iters: max_iters, rayleigh })
}

fn finish_unit(mut v: Vec<f64>) -> Tensor {
    let nv = norm(&v);
    for x in &mut v {
        *x /= nv;
    }
    if let Some(first) = v.iter().find(|x| **x != 0.0) {
        if *first < 0.0 {
            for x in &mut v {
                *x = -*x;
            }
        }
    }
    Tensor::from_parts(vec![v.len()], v)
}

/// Singular values in descending order via one-sided Jacobi rotations,
/// which keeps small singular values accurate relative to large ones.
pub fn singular_values(a: &Tensor) -> Result<Vec<f64>> {
    let (r, c) = match a.shape() {
        &[r, c] => (r, c),
        s => return Err(Error::dim(format!("singular values need 2-D, got {s:?}"))),
    };
    // Work on columns of B where B has min(r, c) columns.
    let b = if c <= r { a.clone() } else { a.transpose2()? };
    let (p, q) = (b.shape()[0], b.shape()[1]);
    // column-major copy
    let mut cols: Vec<Vec<f64>> = (0..q).map(|j| (0..p).map(|i| b.at2(i, j)).collect()).collect();
    for _sweep in 0..60 {
        let mut rotated = false;
        for i in 0..q {
            for j in i + 1..q {
                let alpha: f64 = cols[i].iter().map(|x| x * x).sum();
                let beta: f64 = cols[j].iter().map(|x| x * x).sum();
                let gamma: f64 = cols[i].iter().zip(&cols[j]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                let (left, right) = cols.split_at_mut(j);
                for (x, y) in left[i].iter_mut().zip(right[0].iter_mut()) {
                    let (xi, yj) = (*x, *y);
                    *x = cs * xi - sn * yj;
                    *y = sn * xi + cs * yj;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    Ok(sv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(n: usize, d: &[f64]) -> Tensor {
        Tensor::new(vec![n, n], d.to_vec()).unwrap()
    }

    #[test]
    fn solve_identity_scaled_and_damped() {
        let e1 = Tensor::from_vec(vec![1.0, 0.0, 0.0]).unwrap();
        let u = solve_spd(&Tensor::identity(3), &e1, 0.0).unwrap();
        assert_eq!(u.data(), e1.data());

        let two = mat(2, &[2.0, 0.0, 0.0, 2.0]);
        let d = Tensor::from_vec(vec![3.0, -1.0]).unwrap();
        assert_eq!(solve_spd(&two, &d, 0.0).unwrap().data(), &[1.5, -0.5]);

        let u = solve_spd(&Tensor::zeros(&[3, 3]), &e1, 0.1).unwrap();
        assert!((u.data()[0] - 10.0).abs() < 1e-12);
        assert_eq!(&u.data()[1..], &[0.0, 0.0]);
    }

    #[test]
    fn solve_errors() {
        let d = Tensor::from_vec(vec![1.0, 1.0]).unwrap();
        assert!(matches!(solve_spd(&mat(2, &[1.0, 2.0, 0.0, 1.0]), &d, 0.0), Err(Error::NotSymmetric(_))));
        assert!(matches!(solve_spd(&Tensor::zeros(&[2, 2]), &d, 0.0), Err(Error::Singular { .. })));
    }

    #[test]
    fn power_iteration_cases() {
        let v = power_iteration(&mat(2, &[3.0, 0.0, 0.0, 1.0]), 1e-12, 1000).unwrap();
        assert_eq!(v.data(), &[1.0, 0.0]);
        let v = power_iteration(&Tensor::identity(4), 1e-12, 10).unwrap();
        assert_eq!(v.data(), &[1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(power_iteration(&Tensor::zeros(&[2, 2]), 1e-9, 10), Err(Error::Degenerate(_))));
    }

    #[test]
    fn power_iteration_reports_rayleigh_on_failure() {
        let m = mat(2, &[1.0, 0.1, 0.1, 0.99]);
        match power_iteration(&m, 1e-15, 2) {
            Err(Error::NoConvergence { iters, rayleigh }) => {
                assert_eq!(iters, 2);
                assert!(rayleigh > 0.9 && rayleigh < 1.2);
            }
            other => panic!("expected NoConvergence, got {other:?}"),
        }
    }

    #[test]
    fn singular_values_of_outer_product() {
        let u = [1.0, -2.0, 0.5];
        let v = [0.3, 0.1, -0.7, 2.0];
        let data: Vec<f64> = u.iter().flat_map(|a| v.iter().map(move |b| a * b)).collect();
        let sv = singular_values(&Tensor::new(vec![3, 4], data).unwrap()).unwrap();
        let expect = norm(&u) * norm(&v);
        assert!((sv[0] - expect).abs() < 1e-12 * expect);
        assert!(sv[1] < 1e-14 * expect);
        let sv = singular_values(&mat(2, &[3.0, 0.0, 0.0, -4.0])).unwrap();
        assert!((sv[0] - 4.0).abs() < 1e-14 && (sv[1] - 3.0).abs() < 1e-14);
    }
}
