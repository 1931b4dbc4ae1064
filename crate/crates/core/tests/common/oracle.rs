//! Independent reference solvers. Nothing here calls into the proximal
//! code under test: regularizer values and subgradients are re-derived
//! from their definitions.

/// Oracle-side description of `ψ`.
#[derive(Clone, Debug)]
pub enum Psi {
    Zero,
    L1(f64),
    /// Nuclear norm of a row-major `rows × cols` matrix with `rows·cols ≤ 4`.
    Nuclear(f64, usize, usize),
    L2Ball(f64),
    L1Ball(f64),
    Box(f64, f64),
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Nuclear norm and one subgradient for matrices with at most 4 entries.
/// Vectors use the Frobenius norm; 2×2 uses `sqrt(‖M‖_F² + 2|det M|)`.
pub fn nuclear_value_grad(rows: usize, cols: usize, m: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(m.len(), rows * cols);
    if rows == 1 || cols == 1 {
        let n = norm(m);
        let g = if n > 0.0 { m.iter().map(|x| x / n).collect() } else { vec![0.0; m.len()] };
        return (n, g);
    }
    assert_eq!((rows, cols), (2, 2), "oracle supports vectors and 2x2 only");
    let (a, b, c, d) = (m[0], m[1], m[2], m[3]);
    let det = a * d - b * c;
    let val = (a * a + b * b + c * c + d * d + 2.0 * det.abs()).sqrt();
    if val == 0.0 {
        return (0.0, vec![0.0; 4]);
    }
    let s = sign(det);
    let cof = [d, -c, -b, a];
    let g = (0..4).map(|i| (m[i] + s * cof[i]) / val).collect();
    (val, g)
}

impl Psi {
    /// Value of the penalty part (0 for constraints).
    fn penalty(&self, x: &[f64]) -> (f64, Vec<f64>) {
        match *self {
            Psi::L1(l) => (l * x.iter().map(|v| v.abs()).sum::<f64>(), x.iter().map(|v| l * sign(*v)).collect()),
            Psi::Nuclear(l, r, c) => {
                let (v, g) = nuclear_value_grad(r, c, x);
                (l * v, g.into_iter().map(|gi| l * gi).collect())
            }
            _ => (0.0, vec![0.0; x.len()]),
        }
    }

    /// Constraint violation `c(x) > 0` with a subgradient of `c`, or `None`
    /// when feasible.
    fn violation(&self, x: &[f64]) -> Option<Vec<f64>> {
        match *self {
            Psi::L2Ball(r) => {
                let n = norm(x);
                (n > r).then(|| x.iter().map(|v| v / n).collect())
            }
            Psi::L1Ball(r) => {
                (x.iter().map(|v| v.abs()).sum::<f64>() > r).then(|| x.iter().map(|v| sign(*v)).collect())
            }
            Psi::Box(lo, hi) => {
                let (mut worst, mut at, mut dir) = (0.0, 0, 0.0);
                for (i, v) in x.iter().enumerate() {
                    if v - hi > worst {
                        (worst, at, dir) = (v - hi, i, 1.0);
                    }
                    if lo - v > worst {
                        (worst, at, dir) = (lo - v, i, -1.0);
                    }
                }
                (worst > 0.0).then(|| {
                    let mut g = vec![0.0; x.len()];
                    g[at] = dir;
                    g
                })
            }
            _ => None,
        }
    }

    fn set_radius(&self, d: usize) -> f64 {
        match *self {
            Psi::L2Ball(r) | Psi::L1Ball(r) => r,
            Psi::Box(lo, hi) => lo.abs().max(hi.abs()) * (d as f64).sqrt(),
            _ => 0.0,
        }
    }
}

/// Cut oracle: `Ok((value, g))` at feasible points, `Err(g)` with a
/// separating direction at infeasible ones.
type Cut = Result<(f64, Vec<f64>), Vec<f64>>;

/// Central-cut ellipsoid method started from the ball `B(0, radius)`;
/// returns the best feasible point seen. One dimension uses bisection.
pub fn ellipsoid_minimize(d: usize, radius: f64, iters: usize, oracle: impl Fn(&[f64]) -> Cut) -> Vec<f64> {
    if d == 1 {
        let (mut lo, mut hi) = (-radius, radius);
        let mut best: Option<(f64, f64)> = None;
        for _ in 0..iters.max(200) {
            let x = 0.5 * (lo + hi);
            let g = match oracle(&[x]) {
                Ok((v, g)) => {
                    if best.is_none_or(|(bv, _)| v < bv) {
                        best = Some((v, x));
                    }
                    g[0]
                }
                Err(g) => g[0],
            };
            if g > 0.0 {
                hi = x;
            } else if g < 0.0 {
                lo = x;
            } else {
                return vec![x];
            }
        }
        return vec![best.map(|b| b.1).unwrap_or(0.5 * (lo + hi))];
    }
    let n = d as f64;
    let mut c = vec![0.0; d];
    let mut p = vec![0.0; d * d];
    for i in 0..d {
        p[i * d + i] = radius * radius;
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..iters {
        let g = match oracle(&c) {
            Ok((v, g)) => {
                if best.as_ref().is_none_or(|(bv, _)| v < *bv) {
                    best = Some((v, c.clone()));
                }
                g
            }
            Err(g) => g,
        };
        let pg: Vec<f64> = (0..d).map(|i| (0..d).map(|j| p[i * d + j] * g[j]).sum()).collect();
        let gpg: f64 = g.iter().zip(&pg).map(|(a, b)| a * b).sum();
        if gpg.is_nan() || gpg <= 1e-300 {
            break;
        }
        let s = gpg.sqrt();
        for i in 0..d {
            c[i] -= pg[i] / (s * (n + 1.0));
        }
        let f = n * n / (n * n - 1.0);
        for i in 0..d {
            for j in 0..d {
                p[i * d + j] = f * (p[i * d + j] - 2.0 / (n + 1.0) * pg[i] * pg[j] / gpg);
            }
        }
        for i in 0..d {
            for j in 0..i {
                let avg = 0.5 * (p[i * d + j] + p[j * d + i]);
                p[i * d + j] = avg;
                p[j * d + i] = avg;
            }
        }
    }
    best.expect("ellipsoid found no feasible point").1
}

/// `argmin_x ½‖x − z‖² + η ψ(x)`.
pub fn prox_oracle(psi: &Psi, eta: f64, z: &[f64]) -> Vec<f64> {
    if matches!(psi, Psi::Zero) {
        return z.to_vec();
    }
    let d = z.len();
    let lambda = match *psi {
        Psi::L1(l) | Psi::Nuclear(l, _, _) => l,
        _ => 0.0,
    };
    let radius = norm(z) + eta * lambda * (d as f64).sqrt() + psi.set_radius(d) + 1.0;
    ellipsoid_minimize(d, radius, 6000, |x| {
        if let Some(g) = psi.violation(x) {
            return Err(g);
        }
        let (pv, pg) = psi.penalty(x);
        let val = 0.5 * x.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() + eta * pv;
        let g = (0..d).map(|i| x[i] - z[i] + eta * pg[i]).collect();
        Ok((val, g))
    })
}

/// Central finite-difference gradient of `f` at `x`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let xi = x[i];
            xp[i] = xi + h;
            let fp = f(&xp);
            xp[i] = xi - h;
            let fm = f(&xp);
            xp[i] = xi;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Exact minimizer of the two-feature lasso `(1/N)‖Xw + b − y‖² + λ‖w‖₁`
/// by enumerating the nine sign patterns and checking the KKT conditions.
pub fn lasso2_kkt(x: &[[f64; 2]], y: &[f64], lambda: f64) -> ([f64; 2], f64) {
    let nf = y.len() as f64;
    let ybar = y.iter().sum::<f64>() / nf;
    let mean = [x.iter().map(|r| r[0]).sum::<f64>() / nf, x.iter().map(|r| r[1]).sum::<f64>() / nf];
    // Centered second moments; the bias is profiled out as b = ȳ − x̄·w.
    let mut s = [[0.0; 2]; 2];
    let mut t = [0.0; 2];
    for (r, yi) in x.iter().zip(y) {
        let c = [r[0] - mean[0], r[1] - mean[1]];
        for i in 0..2 {
            for j in 0..2 {
                s[i][j] += 2.0 * c[i] * c[j] / nf;
            }
            t[i] += 2.0 * c[i] * (yi - ybar) / nf;
        }
    }
    let grad = |w: [f64; 2]| [s[0][0] * w[0] + s[0][1] * w[1] - t[0], s[1][0] * w[0] + s[1][1] * w[1] - t[1]];
    let signs = [-1.0, 0.0, 1.0];
    let mut found = None;
    for &s0 in &signs {
        for &s1 in &signs {
            let sg = [s0, s1];
            let active: Vec<usize> = (0..2).filter(|&i| sg[i] != 0.0).collect();
            let mut w = [0.0; 2];
            match active.len() {
                0 => {}
                1 => {
                    let i = active[0];
                    w[i] = (t[i] - lambda * sg[i]) / s[i][i];
                }
                _ => {
                    let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
                    let r = [t[0] - lambda * sg[0], t[1] - lambda * sg[1]];
                    w = [(s[1][1] * r[0] - s[0][1] * r[1]) / det, (s[0][0] * r[1] - s[1][0] * r[0]) / det];
                }
            }
            let g = grad(w);
            let ok =
                (0..2).all(|i| if sg[i] == 0.0 { g[i].abs() <= lambda * (1.0 + 1e-12) } else { sign(w[i]) == sg[i] });
            if ok {
                found = Some(w);
            }
        }
    }
    let w = found.expect("a KKT sign pattern exists");
    (w, ybar - mean[0] * w[0] - mean[1] * w[1])
}
