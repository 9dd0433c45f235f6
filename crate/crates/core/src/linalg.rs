//! Iterative kernels over matrix-free operators: a thick-restart block Krylov
//! eigensolver for the low end of a real symmetric spectrum and an Arnoldi
//! approximation of `exp(τA)v` for complex (possibly non-Hermitian) `A`.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::{Error, Result};

const PAR_LEN: usize = 1 << 14;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    if a.len() >= PAR_LEN {
        a.par_chunks(4096)
            .zip(b.par_chunks(4096))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>())
            .collect::<Vec<_>>()
            .iter()
            .sum()
    } else {
        a.iter().zip(b).map(|(p, q)| p * q).sum()
    }
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    if y.len() >= PAR_LEN {
        y.par_iter_mut().zip(x.par_iter()).for_each(|(a, b)| *a += alpha * b);
    } else {
        y.iter_mut().zip(x).for_each(|(a, b)| *a += alpha * b);
    }
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// ⟨a|b⟩ with the first argument conjugated.
pub fn cdot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    if a.len() >= PAR_LEN {
        a.par_chunks(4096)
            .zip(b.par_chunks(4096))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p.conj() * q).sum::<Complex64>())
            .collect::<Vec<_>>()
            .iter()
            .sum()
    } else {
        a.iter().zip(b).map(|(p, q)| p.conj() * q).sum()
    }
}

pub fn cnorm(a: &[Complex64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

pub fn caxpy(alpha: Complex64, x: &[Complex64], y: &mut [Complex64]) {
    if y.len() >= PAR_LEN {
        y.par_iter_mut().zip(x.par_iter()).for_each(|(a, b)| *a += alpha * b);
    } else {
        y.iter_mut().zip(x).for_each(|(a, b)| *a += alpha * b);
    }
}

#[derive(Clone, Debug)]
pub struct EigenOptions {
    pub n_eigs: usize,
    pub block: usize,
    /// Largest subspace before a thick restart; `None` picks by dimension.
    pub max_basis: Option<usize>,
    /// Residual tolerance relative to `scale`.
    pub tol: f64,
    pub scale: f64,
    pub max_restarts: usize,
    pub seed: u64,
}

impl Default for EigenOptions {
    fn default() -> Self {
        Self {
            n_eigs: 2,
            block: 3,
            max_basis: None,
            tol: 1e-10,
            scale: 1.0,
            max_restarts: 400,
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EigenResult {
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
    pub residuals: Vec<f64>,
    pub restarts: usize,
}

/// Below this dimension the projected operator is diagonalized densely.
const DENSE_DIM: usize = 160;

/// Lowest `n_eigs` eigenpairs of a real symmetric operator. `project`, if
/// given, must be an orthogonal projector commuting with the operator; the
/// search is then confined to its range.
pub fn lowest_eigenpairs<A, P>(dim: usize, apply: A, project: Option<P>, opts: &EigenOptions) -> Result<EigenResult>
where
    A: Fn(&[f64], &mut [f64]),
    P: Fn(&mut [f64]),
{
    if dim == 0 || opts.n_eigs == 0 {
        return Err(Error::domain("eigensolver needs dim >= 1 and n_eigs >= 1"));
    }
    let proj = |v: &mut [f64]| {
        if let Some(p) = &project {
            p(v)
        }
    };
    let abs_tol = opts.tol * opts.scale.max(1e-300);
    let mut v: Vec<Vec<f64>> = Vec::new();
    let mut w: Vec<Vec<f64>> = Vec::new();

    let push_block = |cands: Vec<Vec<f64>>, v: &mut Vec<Vec<f64>>, w: &mut Vec<Vec<f64>>| -> usize {
        let mut added = 0;
        for mut c in cands {
            proj(&mut c);
            let n0 = norm(&c);
            if n0 == 0.0 {
                continue;
            }
            for _ in 0..2 {
                for q in v.iter() {
                    let h = dot(q, &c);
                    axpy(-h, q, &mut c);
                }
            }
            let n1 = norm(&c);
            if n1 <= 1e-10 * n0 || n1 < 1e-300 {
                continue;
            }
            c.iter_mut().for_each(|x| *x /= n1);
            let mut hc = vec![0.0; dim];
            apply(&c, &mut hc);
            proj(&mut hc);
            v.push(c);
            w.push(hc);
            added += 1;
        }
        added
    };

    if dim <= DENSE_DIM {
        let units = (0..dim)
            .map(|k| {
                let mut e = vec![0.0; dim];
                e[k] = 1.0;
                e
            })
            .collect();
        push_block(units, &mut v, &mut w);
        let (vals, vecs, _, res) = rayleigh_ritz(&v, &w, dim, opts.n_eigs);
        let k = opts.n_eigs.min(vals.len());
        if k == 0 {
            return Err(Error::domain("projected subspace is empty"));
        }
        return Ok(EigenResult {
            values: vals[..k].to_vec(),
            vectors: vecs.into_iter().take(k).collect(),
            residuals: res[..k].to_vec(),
            restarts: 0,
        });
    }

    let block = opts.block.max(opts.n_eigs).max(1);
    let max_basis = opts.max_basis.unwrap_or(if dim > 1 << 20 {
        24
    } else if dim > 1 << 17 {
        40
    } else {
        64
    });
    let max_basis = max_basis.max(3 * block + opts.n_eigs);
    let keep = (opts.n_eigs + block).min(max_basis - block);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let start: Vec<Vec<f64>> = (0..block)
        .map(|_| (0..dim).map(|_| rng.random::<f64>() - 0.5).collect())
        .collect();
    let mut last = push_block(start, &mut v, &mut w);
    if last == 0 {
        return Err(Error::domain("projected subspace is empty"));
    }

    let mut best_res = f64::INFINITY;
    for restart in 0..=opts.max_restarts {
        let mut exhausted = false;
        while v.len() < max_basis {
            let from = v.len() - last;
            let cands: Vec<Vec<f64>> = w[from..].to_vec();
            last = push_block(cands, &mut v, &mut w);
            if last == 0 {
                exhausted = true;
                break;
            }
        }
        let (vals, vecs, images, res) = rayleigh_ritz(&v, &w, dim, keep.max(opts.n_eigs));
        let k = opts.n_eigs.min(vals.len());
        let worst = res[..k].iter().cloned().fold(0.0, f64::max);
        best_res = best_res.min(worst);
        if worst <= abs_tol || (exhausted && worst <= 1e3 * abs_tol.max(1e-12 * opts.scale)) {
            return Ok(EigenResult {
                values: vals[..k].to_vec(),
                vectors: vecs.into_iter().take(k).collect(),
                residuals: res[..k].to_vec(),
                restarts: restart,
            });
        }
        if exhausted && vals.len() < opts.n_eigs {
            // the projected space is smaller than requested
            return Ok(EigenResult {
                values: vals.clone(),
                residuals: res.clone(),
                vectors: vecs,
                restarts: restart,
            });
        }
        // thick restart on the lowest Ritz vectors, expanded by their residuals
        let kk = keep.min(vecs.len());
        let ritz_w: Vec<Vec<f64>> = images.into_iter().take(kk).collect();
        let resid_block: Vec<Vec<f64>> = vecs
            .iter()
            .zip(&ritz_w)
            .zip(&vals)
            .take(block.min(kk))
            .map(|((y, hy), &theta)| {
                let mut r = hy.clone();
                axpy(-theta, y, &mut r);
                r
            })
            .collect();
        v = vecs.into_iter().take(kk).collect();
        w = ritz_w;
        last = push_block(resid_block, &mut v, &mut w);
        if last == 0 {
            // residual already inside the kept space: it is invariant
            let (vals, vecs, _, res) = rayleigh_ritz(&v, &w, dim, opts.n_eigs);
            let k = opts.n_eigs.min(vals.len());
            return Ok(EigenResult {
                values: vals[..k].to_vec(),
                vectors: vecs.into_iter().take(k).collect(),
                residuals: res[..k].to_vec(),
                restarts: restart,
            });
        }
    }
    Err(Error::Convergence {
        what: "block Krylov eigensolver".into(),
        iterations: opts.max_restarts,
        residual: best_res,
    })
}

fn projected(v: &[Vec<f64>], w: &[Vec<f64>]) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let m = v.len();
    let mut t = DMatrix::zeros(m, m);
    let entries: Vec<(usize, usize, f64)> = (0..m)
        .flat_map(|i| (i..m).map(move |j| (i, j)))
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(i, j)| (i, j, 0.5 * (dot(&v[i], &w[j]) + dot(&v[j], &w[i]))))
        .collect();
    for (i, j, x) in entries {
        t[(i, j)] = x;
        t[(j, i)] = x;
    }
    SymmetricEigen::new(t)
}

fn sorted_order(values: &nalgebra::DVector<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    idx
}

fn combine(basis: &[Vec<f64>], coefs: impl Iterator<Item = f64>, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (b, c) in basis.iter().zip(coefs) {
        if c != 0.0 {
            axpy(c, b, &mut out);
        }
    }
    out
}

type Ritz = (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>);

/// Ritz values, vectors, their images and residual norms, ascending.
fn rayleigh_ritz(v: &[Vec<f64>], w: &[Vec<f64>], dim: usize, count: usize) -> Ritz {
    if v.is_empty() {
        return (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    }
    let eig = projected(v, w);
    let order = sorted_order(&eig.eigenvalues);
    let mut vals = Vec::with_capacity(order.len());
    let mut vecs = Vec::with_capacity(order.len());
    let mut res = Vec::with_capacity(order.len());
    let mut images = Vec::with_capacity(order.len());
    for &k in order.iter().take(count) {
        let theta = eig.eigenvalues[k];
        let col = eig.eigenvectors.column(k);
        let y = combine(v, col.iter().cloned(), dim);
        let hy = combine(w, col.iter().cloned(), dim);
        let mut r = hy.clone();
        axpy(-theta, &y, &mut r);
        vals.push(theta);
        vecs.push(y);
        images.push(hy);
        res.push(norm(&r));
    }
    (vals, vecs, images, res)
}

/// Outcome of a Krylov exponential: the propagated vector and the summed
/// a-posteriori error estimate.
#[derive(Clone, Debug)]
pub struct ExpmOutcome {
    pub vector: Vec<Complex64>,
    pub error: f64,
    pub substeps: usize,
}

/// `exp(tau·A)·v` by Arnoldi with adaptive substepping so that the
/// per-substep error estimate stays below `tol·‖v‖`.
pub fn krylov_expm<A>(apply: A, v: &[Complex64], tau: Complex64, tol: f64, max_m: usize) -> Result<ExpmOutcome>
where
    A: Fn(&[Complex64], &mut [Complex64]),
{
    let dim = v.len();
    let mut x = v.to_vec();
    let beta0 = cnorm(&x);
    if beta0 == 0.0 || tau == Complex64::new(0.0, 0.0) {
        return Ok(ExpmOutcome {
            vector: x,
            error: 0.0,
            substeps: 0,
        });
    }
    let m_max = max_m.clamp(2, dim.max(2));
    let mut done = 0.0f64; // fraction of tau completed
    let mut frac = 1.0f64;
    let mut total_err = 0.0;
    let mut substeps = 0usize;
    while done < 1.0 - 1e-15 {
        frac = frac.min(1.0 - done);
        let beta = cnorm(&x);
        if beta == 0.0 {
            break;
        }
        // Arnoldi, grown until the error estimate for the current fraction
        // is met or the basis reaches `m_max`.
        let mut basis: Vec<Vec<Complex64>> = vec![x.iter().map(|a| a / beta).collect()];
        let mut h = DMatrix::<Complex64>::zeros(m_max + 1, m_max);
        let mut accepted: Option<(DMatrix<Complex64>, usize, f64)> = None;
        let mut m_used = m_max;
        let mut breakdown = false;
        for j in 0..m_max {
            let mut wv = vec![Complex64::new(0.0, 0.0); dim];
            apply(&basis[j], &mut wv);
            for _ in 0..2 {
                for (i, q) in basis.iter().enumerate() {
                    let hij = cdot(q, &wv);
                    h[(i, j)] += hij;
                    caxpy(-hij, q, &mut wv);
                }
            }
            let hn = cnorm(&wv);
            h[(j + 1, j)] = Complex64::new(hn, 0.0);
            let m = j + 1;
            if hn <= 1e-12 * beta.max(1.0) * (1.0 + h[(j, j)].norm()) {
                m_used = m;
                breakdown = true;
                break;
            }
            basis.push(wv.iter().map(|a| a / hn).collect());
            if m < m_max && (m < 4 || m % 3 != 0) {
                continue;
            }
            let step = tau * frac;
            let e = h.view((0, 0), (m, m)).map(|z| z * step).exp();
            let err = beta * hn * step.norm() * e[(m - 1, 0)].norm();
            if err <= tol * beta {
                accepted = Some((e, m, err));
                break;
            }
        }
        loop {
            let (e, m, err) = match accepted.take() {
                Some(found) => found,
                None => {
                    let step = tau * frac;
                    let e = h.view((0, 0), (m_used, m_used)).map(|z| z * step).exp();
                    let err = if breakdown {
                        0.0
                    } else {
                        beta * h[(m_used, m_used - 1)].norm() * step.norm() * e[(m_used - 1, 0)].norm()
                    };
                    (e, m_used, err)
                }
            };
            if err <= tol * beta || frac < 1e-12 {
                let mut next = vec![Complex64::new(0.0, 0.0); dim];
                for i in 0..m {
                    caxpy(e[(i, 0)] * beta, &basis[i], &mut next);
                }
                x = next;
                done += frac;
                total_err += err;
                substeps += 1;
                if err < 0.1 * tol * beta && m == m_used {
                    frac *= 2.0;
                }
                break;
            }
            frac *= 0.5;
        }
        if frac < 1e-12 && done < 1.0 - 1e-15 {
            return Err(Error::Integration {
                time: done,
                achieved: total_err,
                requested: tol,
            });
        }
    }
    Ok(ExpmOutcome {
        vector: x,
        error: total_err,
        substeps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tridiag(n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                (i as f64).sin() * 3.0
            } else if i.abs_diff(j) == 1 {
                -1.0
            } else if i.abs_diff(j) == 5 {
                0.3
            } else {
                0.0
            }
        })
    }

    #[test]
    fn eigen_matches_dense() {
        for n in [5usize, 40, 400] {
            let m = tridiag(n);
            let apply = |x: &[f64], y: &mut [f64]| {
                let r = &m * nalgebra::DVector::from_column_slice(x);
                y.copy_from_slice(r.as_slice());
            };
            let opts = EigenOptions {
                n_eigs: 3,
                scale: 5.0,
                ..Default::default()
            };
            let res = lowest_eigenpairs(n, apply, None::<fn(&mut [f64])>, &opts).unwrap();
            let mut exact: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().cloned().collect();
            exact.sort_by(f64::total_cmp);
            for k in 0..3 {
                assert!((res.values[k] - exact[k]).abs() < 1e-9, "n={n} k={k}");
                assert!(res.residuals[k] < 1e-8);
            }
        }
    }

    #[test]
    fn degenerate_pair_is_resolved() {
        let n = 300;
        let diag: Vec<f64> = (0..n).map(|i| if i < 2 { -1.0 } else { i as f64 * 0.01 }).collect();
        let apply = |x: &[f64], y: &mut [f64]| {
            for i in 0..n {
                y[i] = diag[i] * x[i];
            }
        };
        let res = lowest_eigenpairs(n, apply, None::<fn(&mut [f64])>, &EigenOptions::default()).unwrap();
        assert!((res.values[0] + 1.0).abs() < 1e-10);
        assert!((res.values[1] + 1.0).abs() < 1e-10);
    }

    #[test]
    fn expm_matches_dense() {
        let n = 50;
        let m = tridiag(n).map(|x| Complex64::new(x, 0.0));
        let v: Vec<Complex64> = (0..n).map(|i| Complex64::new((i as f64).cos(), 0.1 * i as f64)).collect();
        let tau = Complex64::new(0.0, -0.7);
        let apply = |x: &[Complex64], y: &mut [Complex64]| {
            let r = &m * nalgebra::DVector::from_column_slice(x);
            y.copy_from_slice(r.as_slice());
        };
        let out = krylov_expm(apply, &v, tau, 1e-12, 20).unwrap();
        let exact = (m.map(|z| z * tau)).exp() * nalgebra::DVector::from_column_slice(&v);
        for i in 0..n {
            assert!((out.vector[i] - exact[i]).norm() < 1e-9);
        }
    }
}
