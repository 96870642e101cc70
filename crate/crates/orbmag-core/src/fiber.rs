//! The fiber Hamiltonian h(k) = ½(−i∇+k)² + V in a truncated plane-wave basis.
//!
//! For each quasi-momentum k in the Brillouin zone Ω* = (−π,π]³ the fiber
//! operator acts on periodic functions; expanded over plane waves e^{iG·x},
//! G = 2π·n with max|n_i| ≤ cutoff_n, it becomes the dense Hermitian matrix
//!
//! ```text
//! H[G,G'] = ½|k+G|² δ_{G,G'} + V̂(G−G').
//! ```
//!
//! Diagonalizing gives the Bloch bands E_1(k) ≤ … ≤ E_M(k) and eigenvector
//! coefficients c_j(G). The momentum operator p_α + k_α is diagonal in this
//! basis (multiplication by k_α + G_α), so the momentum matrix elements
//!
//! ```text
//! π̂_{i,j}(α;k) = Σ_G conj(c_i(G)) (k_α + G_α) c_j(G)
//! ```
//!
//! are exact in the truncated model. Their diagonal is the band velocity
//! ∂E_j/∂k_α (Hellmann–Feynman), and second derivatives of E_N follow from the
//! sum rule
//!
//! ```text
//! ∂²E_N/∂k_i∂k_j = δ_{ij} + 2 Σ_{m≠N} Re{π̂_{m,N}(i) π̂_{N,m}(j)} / (E_N − E_m),
//! ```
//!
//! which is an exact identity of the discrete model because ∂h/∂k_α is the π̂
//! operator and ∂²h/∂k_α∂k_β = δ_{αβ}·1.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::potential::{FourierPotential, ReciprocalVector};

/// Degeneracy threshold: two levels closer than ε_deg(E) are treated as one
/// degenerate group (this also drives pole merging in the residue module).
pub fn degeneracy_threshold(energy: f64) -> f64 {
    1e-8 * (1.0 + energy.abs())
}

/// Truncated plane-wave basis: all G = 2π·n with max|n_i| ≤ cutoff_n, in
/// lexicographic order on (n1,n2,n3) so matrices are bit-reproducible.
#[derive(Debug, Clone)]
pub struct PlaneWaveBasis {
    cutoff_n: i32,
    vectors: Vec<ReciprocalVector>,
}

impl PlaneWaveBasis {
    pub fn new(cutoff_n: i32) -> Self {
        assert!(cutoff_n >= 0, "cutoff must be non-negative");
        let mut vectors = Vec::with_capacity(((2 * cutoff_n + 1).pow(3)) as usize);
        for n1 in -cutoff_n..=cutoff_n {
            for n2 in -cutoff_n..=cutoff_n {
                for n3 in -cutoff_n..=cutoff_n {
                    vectors.push(ReciprocalVector::new(n1, n2, n3));
                }
            }
        }
        Self { cutoff_n, vectors }
    }

    pub fn cutoff_n(&self) -> i32 {
        self.cutoff_n
    }

    /// Basis dimension M = (2·cutoff_n + 1)³.
    pub fn dim(&self) -> usize {
        self.vectors.len()
    }

    pub fn vectors(&self) -> &[ReciprocalVector] {
        &self.vectors
    }

    fn check_potential(&self, pot: &FourierPotential) -> Result<()> {
        if pot.support_radius() > self.cutoff_n {
            return Err(Error::CutoffTooSmall {
                cutoff: self.cutoff_n,
                support: pot.support_radius(),
            });
        }
        Ok(())
    }
}

/// Eigendata of the fiber Hamiltonian at one k-point.
#[derive(Debug, Clone)]
pub struct FiberSolution {
    /// Quasi-momentum in Ω* = (−π,π]³.
    pub k: [f64; 3],
    /// Eigenvalues in ascending order.
    pub energies: Vec<f64>,
    /// Eigenvector coefficients; column j holds c_j(G) over the basis order.
    pub eigvecs: DMatrix<Complex64>,
    /// Momentum matrices π̂(α), α ∈ {0,1,2} (Hermitian M×M).
    pub pi_hat: [DMatrix<Complex64>; 3],
}

/// Assemble the truncated fiber Hamiltonian matrix at k.
///
/// Hermitian by construction: the diagonal ½|k+G|² is real and the potential
/// part inherits V̂(−G) = conj(V̂(G)).
pub fn assemble(
    pot: &FourierPotential,
    basis: &PlaneWaveBasis,
    k: [f64; 3],
) -> Result<DMatrix<Complex64>> {
    basis.check_potential(pot)?;
    let m = basis.dim();
    let mut h = DMatrix::<Complex64>::zeros(m, m);
    for (row, g) in basis.vectors().iter().enumerate() {
        let gv = g.g();
        let kin = 0.5
            * ((k[0] + gv[0]).powi(2) + (k[1] + gv[1]).powi(2) + (k[2] + gv[2]).powi(2));
        h[(row, row)] = Complex64::new(kin, 0.0);
    }
    // Sparse potential: for each coefficient V̂(2π·d), fill all (G, G') with
    // n − n' = d. Walking coefficient-major keeps the cost O(support · M).
    for (d, &v) in pot.iter() {
        for (row, g) in basis.vectors().iter().enumerate() {
            let n1 = g.n1 - d.n1;
            let n2 = g.n2 - d.n2;
            let n3 = g.n3 - d.n3;
            if n1.abs() <= basis.cutoff_n
                && n2.abs() <= basis.cutoff_n
                && n3.abs() <= basis.cutoff_n
            {
                let col = lex_index(basis.cutoff_n, n1, n2, n3);
                h[(row, col)] += v;
            }
        }
    }
    Ok(h)
}

fn lex_index(cutoff: i32, n1: i32, n2: i32, n3: i32) -> usize {
    let w = (2 * cutoff + 1) as usize;
    let i1 = (n1 + cutoff) as usize;
    let i2 = (n2 + cutoff) as usize;
    let i3 = (n3 + cutoff) as usize;
    (i1 * w + i2) * w + i3
}

/// Diagonalize h(k) and compute the momentum matrices.
///
/// Eigenvalues are sorted ascending; each eigenvector's phase is fixed by
/// making its largest-magnitude component real-positive (reproducibility only
/// — no physical output may depend on it).
pub fn solve(pot: &FourierPotential, basis: &PlaneWaveBasis, k: [f64; 3]) -> Result<FiberSolution> {
    let h = assemble(pot, basis, k)?;
    let m = basis.dim();

    let (energies, mut eigvecs) = if pot.is_free() {
        // V = 0: h(k) is diagonal and the plane waves are exact eigenvectors;
        // sorting the diagonal avoids the dense eigensolver entirely.
        let mut idx: Vec<usize> = (0..m).collect();
        let diag: Vec<f64> = (0..m).map(|i| h[(i, i)].re).collect();
        idx.sort_by(|&a, &b| diag[a].total_cmp(&diag[b]).then(a.cmp(&b)));
        let mut vecs = DMatrix::<Complex64>::zeros(m, m);
        let mut energies = Vec::with_capacity(m);
        for (col, &i) in idx.iter().enumerate() {
            vecs[(i, col)] = Complex64::new(1.0, 0.0);
            energies.push(diag[i]);
        }
        (energies, vecs)
    } else {
        let (energies, vecs) = crate::linalg::eigh(&h).map_err(|_| {
            Error::EigensolverFailed(k[0], k[1], k[2])
        })?;
        (energies, vecs)
    };

    fix_phases(&mut eigvecs);

    // π̂(α) = C† D_α C with D_α = diag(k_α + G_α). For V = 0 the eigenvector
    // matrix is a permutation, so π̂ is diagonal with the permuted velocities.
    let pi_hat = if pot.is_free() {
        std::array::from_fn(|alpha| {
            let mut pi = DMatrix::<Complex64>::zeros(m, m);
            for j in 0..m {
                // column j has its single unit entry at the basis row of G
                let row = (0..m).find(|&i| eigvecs[(i, j)].re != 0.0).unwrap();
                let g = basis.vectors()[row].g();
                pi[(j, j)] = Complex64::new(k[alpha] + g[alpha], 0.0);
            }
            pi
        })
    } else {
        momentum_matrices(basis, k, &eigvecs)
    };

    Ok(FiberSolution {
        k,
        energies,
        eigvecs,
        pi_hat,
    })
}

/// Energies only (ascending); avoids eigenvector work entirely.
pub fn solve_energies(
    pot: &FourierPotential,
    basis: &PlaneWaveBasis,
    k: [f64; 3],
) -> Result<Vec<f64>> {
    if pot.is_free() {
        let mut d: Vec<f64> = basis
            .vectors()
            .iter()
            .map(|g| {
                let gv = g.g();
                0.5 * ((k[0] + gv[0]).powi(2)
                    + (k[1] + gv[1]).powi(2)
                    + (k[2] + gv[2]).powi(2))
            })
            .collect();
        d.sort_by(f64::total_cmp);
        return Ok(d);
    }
    let h = assemble(pot, basis, k)?;
    crate::linalg::eigh_values(&h).map_err(|_| Error::EigensolverFailed(k[0], k[1], k[2]))
}

/// Fix each column's phase: largest-magnitude component real-positive.
fn fix_phases(vecs: &mut DMatrix<Complex64>) {
    let (m, n) = vecs.shape();
    for j in 0..n {
        let mut best = 0usize;
        let mut best_norm = 0.0f64;
        for i in 0..m {
            let nv = vecs[(i, j)].norm_sqr();
            if nv > best_norm {
                best_norm = nv;
                best = i;
            }
        }
        let pivot = vecs[(best, j)];
        if pivot.norm() > 0.0 {
            let phase = pivot / pivot.norm();
            let factor = phase.conj();
            for i in 0..m {
                vecs[(i, j)] *= factor;
            }
        }
    }
}

fn momentum_matrices(
    basis: &PlaneWaveBasis,
    k: [f64; 3],
    eigvecs: &DMatrix<Complex64>,
) -> [DMatrix<Complex64>; 3] {
    let m = basis.dim();
    std::array::from_fn(|alpha| {
        // D_α C, with D_α diagonal — O(M²) then one M³ product.
        let mut dc = eigvecs.clone();
        for (row, g) in basis.vectors().iter().enumerate() {
            let w = Complex64::new(k[alpha] + g.g()[alpha], 0.0);
            for j in 0..m {
                dc[(row, j)] *= w;
            }
        }
        eigvecs.adjoint() * dc
    })
}

impl FiberSolution {
    /// Band velocity ∂E_j/∂k_α = π̂_{j,j}(α) (real part; imaginary part is
    /// numerical noise on a Hermitian diagonal).
    pub fn velocity(&self, j: usize) -> [f64; 3] {
        std::array::from_fn(|alpha| self.pi_hat[alpha][(j, j)].re)
    }

    /// Minimum gap from band `n` to its spectral neighbors.
    pub fn isolation(&self, n: usize) -> f64 {
        let mut gap = f64::INFINITY;
        if n > 0 {
            gap = gap.min(self.energies[n] - self.energies[n - 1]);
        }
        if n + 1 < self.energies.len() {
            gap = gap.min(self.energies[n + 1] - self.energies[n]);
        }
        gap
    }
}

/// Second-derivative sum rule: the (i,j) Hessian entry of E_N at sol.k,
///
/// ```text
/// δ_{ij} + 2 Σ_{m≠N} Re{π̂_{m,N}(i) π̂_{N,m}(j)} / (E_N − E_m),
/// ```
///
/// summed over all M−1 other basis bands. Exact in the truncated model for an
/// isolated band; errors if band N is degenerate at k.
pub fn second_derivative_sum_rule(
    sol: &FiberSolution,
    n: usize,
    i: usize,
    j: usize,
) -> Result<f64> {
    let e_n = sol.energies[n];
    if sol.isolation(n) <= degeneracy_threshold(e_n) {
        return Err(Error::DegenerateBand {
            band: n,
            k0: sol.k[0],
            k1: sol.k[1],
            k2: sol.k[2],
            gap: sol.isolation(n),
        });
    }
    let m = sol.energies.len();
    let mut sum = 0.0;
    for band in 0..m {
        if band == n {
            continue;
        }
        let num = (sol.pi_hat[i][(band, n)] * sol.pi_hat[j][(n, band)]).re;
        sum += num / (e_n - sol.energies[band]);
    }
    Ok(if i == j { 1.0 } else { 0.0 } + 2.0 * sum)
}
