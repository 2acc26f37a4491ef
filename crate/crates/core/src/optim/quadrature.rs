use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

pub const MAX_QUADRATURE_POINTS: usize = 100;

/// Gauss–Hermite rule for expectations under the standard normal density:
/// `E[g(Z)] ≈ Σ w_i g(z_i)`, weights summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn expectation<G: Fn(f64) -> f64>(&self, g: G) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&z, &w)| w * g(z))
            .sum()
    }
}

/// Probabilists' Hermite recurrence, scaled so values stay bounded:
/// returns `(p_k(x), p_{k-1}(x))` for the orthonormal polynomials.
fn orthonormal_hermite(k: usize, x: f64) -> (f64, f64) {
    let mut prev = 0.0;
    let mut cur = 1.0;
    for j in 0..k {
        let next = (x * cur - (j as f64).sqrt() * prev) / ((j + 1) as f64).sqrt();
        prev = cur;
        cur = next;
    }
    (cur, prev)
}

/// `k`-point rule via the Golub–Welsch eigenproblem, with nodes polished by
/// Newton steps on the orthonormal recurrence and symmetry enforced.
pub fn gauss_hermite_rule(k: usize) -> Result<QuadratureRule> {
    if !(1..=MAX_QUADRATURE_POINTS).contains(&k) {
        return Err(Error::Config(format!(
            "quadrature points must be in 1..={MAX_QUADRATURE_POINTS} (got {k})"
        )));
    }
    let mut jacobi = DMatrix::zeros(k, k);
    for i in 1..k {
        let b = (i as f64).sqrt();
        jacobi[(i, i - 1)] = b;
        jacobi[(i - 1, i)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .map(|(i, &x)| (x, eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Newton polish: p_k'(x) = sqrt(k) p_{k-1}(x) for the orthonormal family.
    for (x, w) in pairs.iter_mut() {
        for _ in 0..3 {
            let (pk, pkm1) = orthonormal_hermite(k, *x);
            let d = (k as f64).sqrt() * pkm1;
            if d != 0.0 {
                *x -= pk / d;
            }
        }
        let (_, pkm1) = orthonormal_hermite(k, *x);
        // Christoffel weight 1 / Σ_{j<k} p_j(x)², equivalently 1/(k p_{k-1}² ) at a root.
        let christoffel = 1.0 / (k as f64 * pkm1 * pkm1);
        if christoffel.is_finite() && christoffel > 0.0 {
            *w = christoffel;
        }
    }

    let mut nodes = vec![0.0; k];
    let mut weights = vec![0.0; k];
    for i in 0..k {
        let j = k - 1 - i;
        nodes[i] = 0.5 * (pairs[i].0 - pairs[j].0);
        weights[i] = 0.5 * (pairs[i].1 + pairs[j].1);
    }
    if k % 2 == 1 {
        nodes[k / 2] = 0.0;
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok(QuadratureRule { nodes, weights })
}
