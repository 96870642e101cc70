//! Brillouin-zone grids, Fermi statistical kernels, integrated density of
//! states and grand-canonical density.
//!
//! Averages of the form (2π)^{−3}∫_{Ω*} dk are discretized on a uniform
//! (Monkhorst-Pack style) grid of n³ points over Ω* = (−π,π]³, each carrying
//! weight 1/n³. The optional half-cell shift keeps points away from the
//! Γ-point and zone boundary, where band degeneracies cluster.
//!
//! The statistical kernels are the Fermi log-kernel
//! f(β,μ;ξ) = ln(1 + e^{β(μ−ξ)}) and its ξ-derivatives. The first derivative
//! is −β·f_FD with f_FD the Fermi-Dirac function; higher derivatives follow
//! from the logistic recurrence — each ∂_u^m of the logistic g(u) factors as
//! g(1−g)·R_m(g) with polynomial R_m — which is exact to machine precision at
//! any β (no finite differences).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::fiber::{self, PlaneWaveBasis};
use crate::potential::FourierPotential;

/// Highest supported ξ-derivative order of the Fermi log-kernel.
pub const MAX_F_DERIV: usize = 7;

/// Uniform grid over the Brillouin zone Ω* = (−π,π]³.
///
/// Unshifted: k_m = −π + 2πm/n for m = 1..n on each axis (contains Γ).
/// Shifted: k_m = −π + 2π(m−½)/n (avoids Γ and the zone boundary).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BZGrid {
    pub n_per_axis: usize,
    pub shifted: bool,
}

impl BZGrid {
    pub fn new(n_per_axis: usize, shifted: bool) -> Self {
        assert!(n_per_axis > 0);
        Self { n_per_axis, shifted }
    }

    /// Total number of k-points.
    pub fn len(&self) -> usize {
        self.n_per_axis.pow(3)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Quadrature weight per point for (2π)^{−3}∫ dk averages.
    pub fn weight(&self) -> f64 {
        1.0 / self.len() as f64
    }

    /// Coordinate of the m-th point on one axis, m ∈ 0..n.
    pub fn axis_coord(&self, m: usize) -> f64 {
        let n = self.n_per_axis as f64;
        let offset = if self.shifted { 0.5 } else { 0.0 };
        let step = (m + 1) as f64 - offset;
        -std::f64::consts::PI + 2.0 * std::f64::consts::PI * step / n
    }

    /// The k-point at flat index ik ∈ 0..n³ (row-major over the three axes).
    pub fn point(&self, ik: usize) -> [f64; 3] {
        let n = self.n_per_axis;
        let i3 = ik % n;
        let i2 = (ik / n) % n;
        let i1 = ik / (n * n);
        [self.axis_coord(i1), self.axis_coord(i2), self.axis_coord(i3)]
    }

    /// Flat index from per-axis indices (periodic wrap).
    pub fn index(&self, i1: usize, i2: usize, i3: usize) -> usize {
        let n = self.n_per_axis;
        ((i1 % n) * n + (i2 % n)) * n + (i3 % n)
    }
}

/// Statistical state (β, μ); z = e^{βμ} is derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThermoState {
    pub beta: f64,
    pub mu: f64,
}

impl ThermoState {
    pub fn new(beta: f64, mu: f64) -> Self {
        assert!(beta > 0.0, "beta must be positive");
        Self { beta, mu }
    }

    /// Fugacity z = e^{βμ}.
    pub fn fugacity(&self) -> f64 {
        (self.beta * self.mu).exp()
    }
}

/// Stable (g, 1−g) of the logistic g = 1/(e^u + 1).
fn logistic_pair(u: f64) -> (f64, f64) {
    if u >= 0.0 {
        let e = (-u).exp();
        (e / (1.0 + e), 1.0 / (1.0 + e))
    } else {
        let e = u.exp();
        (1.0 / (1.0 + e), e / (1.0 + e))
    }
}

/// Fermi-Dirac occupation f_FD(β,μ;ξ) = 1/(e^{β(ξ−μ)} + 1).
pub fn fermi_dirac(state: ThermoState, xi: f64) -> f64 {
    logistic_pair(state.beta * (xi - state.mu)).0
}

/// Coefficients of the polynomials R_m with ∂_u^m g = g(1−g)·R_m(g), m ≥ 1:
/// R_1 = −1, R_{m+1}(g) = −[(1−2g)·R_m(g) + g(1−g)·R_m'(g)]
/// (the outer minus is the chain factor ∂_u g = −g(1−g)).
fn logistic_polys() -> &'static Vec<Vec<f64>> {
    static POLYS: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
    POLYS.get_or_init(|| {
        let mut polys: Vec<Vec<f64>> = vec![vec![-1.0]];
        for _ in 1..MAX_F_DERIV {
            let r = polys.last().unwrap();
            // −(1−2g)·R
            let mut next = vec![0.0; r.len() + 1];
            for (p, &c) in r.iter().enumerate() {
                next[p] -= c;
                next[p + 1] += 2.0 * c;
            }
            // − (g − g²)·R'
            for (p, &c) in r.iter().enumerate().skip(1) {
                let d = p as f64 * c; // coefficient of g^{p−1} in R'
                next[p] -= d;
                next[p + 1] += d;
            }
            polys.push(next);
        }
        polys
    })
}

/// ∂_ξ^l of the Fermi log-kernel f(β,μ;ξ) = ln(1 + e^{β(μ−ξ)}) for l = 0..=lmax.
///
/// Overflow-safe at any β: l = 0 uses the softplus form with exact exponential
/// tails, l ≥ 1 uses the logistic recurrence with the g(1−g) factor evaluated
/// from the stable pair, so extreme arguments underflow gracefully to 0.
pub fn f_log_derivs(state: ThermoState, xi: f64, lmax: usize) -> Result<Vec<f64>> {
    if lmax > MAX_F_DERIV {
        return Err(Error::DerivativeOrder(lmax, MAX_F_DERIV));
    }
    let beta = state.beta;
    let x = beta * (state.mu - xi); // softplus argument
    let mut out = Vec::with_capacity(lmax + 1);
    // l = 0: ln(1 + e^x) = max(x,0) + ln1p(e^{−|x|})
    out.push(x.max(0.0) + (-x.abs()).exp().ln_1p());
    if lmax == 0 {
        return Ok(out);
    }
    let (g, one_minus_g) = logistic_pair(-x); // g = f_FD(ξ)
    out.push(-beta * g);
    if lmax == 1 {
        return Ok(out);
    }
    // ∂_ξ^l f = −β·∂_ξ^{l−1} f_FD = −β^l·g(1−g)·R_{l−1}(g)
    let polys = logistic_polys();
    let gg = g * one_minus_g;
    let mut beta_pow = beta * beta;
    for l in 2..=lmax {
        let r = &polys[l - 2];
        // Horner evaluation of R_{l−1} at g
        let mut val = 0.0;
        for &c in r.iter().rev() {
            val = val * g + c;
        }
        out.push(-beta_pow * gg * val);
        beta_pow *= beta;
    }
    Ok(out)
}

/// Convenience single-order access (l ≤ MAX_F_DERIV).
pub fn f_log(state: ThermoState, xi: f64, l: usize) -> Result<f64> {
    Ok(*f_log_derivs(state, xi, l)?.last().unwrap())
}

/// Eigendata shared by the statistical quantities: all band energies on a grid.
///
/// The flat layout is `energies[ik·n_bands + j]` with bands ascending per k.
/// A sorted copy supports O(log) IDS queries and windowed density sums.
#[derive(Debug, Clone)]
pub struct GridData {
    pub grid: BZGrid,
    pub n_bands: usize,
    pub energies: Vec<f64>,
    sorted: Vec<f64>,
}

impl GridData {
    /// Diagonalize at every grid point (parallel over k, deterministic output
    /// order). Only energies are retained.
    pub fn compute(pot: &FourierPotential, basis: &PlaneWaveBasis, grid: BZGrid) -> Result<Self> {
        let energies: Vec<Vec<f64>> = (0..grid.len())
            .into_par_iter()
            .map(|ik| fiber::solve_energies(pot, basis, grid.point(ik)))
            .collect::<Result<_>>()?;
        let n_bands = basis.dim();
        let flat: Vec<f64> = energies.into_iter().flatten().collect();

        Ok(Self::from_energies(grid, n_bands, flat))
    }

    /// Like [`GridData::compute`] but retaining only the lowest `keep_bands`
    /// bands per k-point. On large grids at low filling the high bands never
    /// enter any statistical quantity, and dropping them keeps the memory
    /// footprint at n³·keep_bands instead of n³·M.
    pub fn compute_with_cap(
        pot: &FourierPotential,
        basis: &PlaneWaveBasis,
        grid: BZGrid,
        keep_bands: usize,
    ) -> Result<Self> {
        let keep = keep_bands.min(basis.dim()).max(1);
        let energies: Vec<Vec<f64>> = (0..grid.len())
            .into_par_iter()
            .map(|ik| {
                fiber::solve_energies(pot, basis, grid.point(ik)).map(|mut e| {
                    e.truncate(keep);
                    e
                })
            })
            .collect::<Result<_>>()?;
        let flat: Vec<f64> = energies.into_iter().flatten().collect();
        Ok(Self::from_energies(grid, keep, flat))
    }

    /// Build from precomputed energies (e.g. the eigendata cache).
    pub fn from_energies(grid: BZGrid, n_bands: usize, energies: Vec<f64>) -> Self {
        assert_eq!(energies.len(), grid.len() * n_bands);
        let mut sorted = energies.clone();
        sorted.sort_by(f64::total_cmp);
        Self {
            grid,
            n_bands,
            energies,
            sorted,
        }
    }

    /// Energy of band j at grid point ik.
    pub fn energy(&self, ik: usize, j: usize) -> f64 {
        self.energies[ik * self.n_bands + j]
    }

    /// All sampled energies in ascending order.
    pub fn sorted_energies(&self) -> &[f64] {
        &self.sorted
    }

    /// Bottom of the sampled spectrum E_0 = min over the grid of E_1(k).
    pub fn e0(&self) -> f64 {
        self.sorted[0]
    }

    /// Per-band (min, max) over the grid for bands 0..n_bands.
    pub fn band_extrema(&self) -> Vec<(f64, f64)> {
        let mut ext = vec![(f64::INFINITY, f64::NEG_INFINITY); self.n_bands];
        for ik in 0..self.grid.len() {
            for j in 0..self.n_bands {
                let e = self.energy(ik, j);
                let (lo, hi) = &mut ext[j];
                *lo = lo.min(e);
                *hi = hi.max(e);
            }
        }
        ext
    }

    /// Integrated density of states n_∞(E): states per unit cell at or below E.
    pub fn ids(&self, e: f64) -> f64 {
        let count = self.sorted.partition_point(|&x| x <= e);
        count as f64 * self.grid.weight()
    }

    /// Grand-canonical density ρ_∞(β, e^{βμ}) = (1/n³) Σ_{k,j} f_FD(E_j(k)).
    ///
    /// States more than 45/β outside the thermal window contribute 1 or 0 to
    /// within e^{−45} per state; only the window is summed explicitly.
    pub fn density(&self, state: ThermoState) -> f64 {
        let (lo, hi) = self.thermal_window(state);
        let mut sum = lo as f64; // fully occupied below the window
        for &e in &self.sorted[lo..hi] {
            sum += fermi_dirac(state, e);
        }
        sum * self.grid.weight()
    }

    /// dρ/dμ = (β/n³) Σ g(1−g) over the thermal window.
    pub fn density_derivative(&self, state: ThermoState) -> f64 {
        let (lo, hi) = self.thermal_window(state);
        let mut sum = 0.0;
        for &e in &self.sorted[lo..hi] {
            let (g, omg) = logistic_pair(state.beta * (e - state.mu));
            sum += g * omg;
        }
        state.beta * sum * self.grid.weight()
    }

    fn thermal_window(&self, state: ThermoState) -> (usize, usize) {
        let half_width = 45.0 / state.beta;
        let lo = self.sorted.partition_point(|&x| x < state.mu - half_width);
        let hi = self.sorted.partition_point(|&x| x <= state.mu + half_width);
        (lo, hi)
    }
}

/// Spec-signature convenience: IDS at energy E, diagonalizing on demand.
pub fn ids(pot: &FourierPotential, basis: &PlaneWaveBasis, grid: BZGrid, e: f64) -> Result<f64> {
    Ok(GridData::compute(pot, basis, grid)?.ids(e))
}

/// Spec-signature convenience: density at (β, μ), diagonalizing on demand.
pub fn density(
    pot: &FourierPotential,
    basis: &PlaneWaveBasis,
    grid: BZGrid,
    state: ThermoState,
) -> Result<f64> {
    Ok(GridData::compute(pot, basis, grid)?.density(state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potential::named_potential;

    #[test]
    fn grid_weights_and_range() {
        for shifted in [false, true] {
            let grid = BZGrid::new(6, shifted);
            let total: f64 = (0..grid.len()).map(|_| grid.weight()).sum();
            assert!((total - 1.0).abs() < 1e-14);
            for ik in 0..grid.len() {
                let k = grid.point(ik);
                for c in k {
                    assert!(c > -std::f64::consts::PI && c <= std::f64::consts::PI);
                }
            }
        }
        // unshifted grid contains Γ
        let grid = BZGrid::new(4, false);
        let has_gamma = (0..grid.len())
            .any(|ik| grid.point(ik).iter().all(|c| c.abs() < 1e-14));
        assert!(has_gamma);
        // shifted grid does not
        let grid = BZGrid::new(4, true);
        let has_gamma = (0..grid.len())
            .any(|ik| grid.point(ik).iter().all(|c| c.abs() < 1e-14));
        assert!(!has_gamma);
    }

    #[test]
    fn f_log_basic_identities() {
        let st = ThermoState::new(3.0, 0.7);
        // f(μ) = ln 2
        assert!((f_log(st, st.mu, 0).unwrap() - 2.0_f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn fermi_dirac_identities() {
        let st = ThermoState::new(10.0, 0.2);
        assert!((fermi_dirac(st, st.mu) - 0.5).abs() < 1e-14);
        // ∂_ξ f_FD at μ = −β/4; f_log l=2 gives −β·∂_ξ f_FD = β²/4
        let d2 = f_log(st, st.mu, 2).unwrap();
        assert!((d2 - st.beta * st.beta / 4.0).abs() < 1e-10);
    }

    #[test]
    fn f_log_derivs_match_finite_differences() {
        let st = ThermoState::new(10.0, 0.0);
        let xi = 2.0;
        // 4th-order central differences of f_log at orders 1..=3
        let h = 1e-3;
        let f = |x: f64| f_log(st, x, 0).unwrap();
        let fd1 = (-f(xi + 2.0 * h) + 8.0 * f(xi + h) - 8.0 * f(xi - h) + f(xi - 2.0 * h))
            / (12.0 * h);
        let d = f_log_derivs(st, xi, 3).unwrap();
        assert!((fd1 - d[1]).abs() <= 1e-7 * d[1].abs().max(1e-10), "l=1: {fd1} vs {}", d[1]);
        let g1 = |x: f64| f_log(st, x, 1).unwrap();
        let fd2 = (-g1(xi + 2.0 * h) + 8.0 * g1(xi + h) - 8.0 * g1(xi - h) + g1(xi - 2.0 * h))
            / (12.0 * h);
        assert!((fd2 - d[2]).abs() <= 1e-7 * d[2].abs().max(1e-10), "l=2: {fd2} vs {}", d[2]);
        let g2 = |x: f64| f_log(st, x, 2).unwrap();
        let fd3 = (-g2(xi + 2.0 * h) + 8.0 * g2(xi + h) - 8.0 * g2(xi - h) + g2(xi - 2.0 * h))
            / (12.0 * h);
        assert!(
            (fd3 - d[3]).abs() <= 1e-7 * d[3].abs().max(1e-6),
            "l=3: {fd3} vs {}",
            d[3]
        );
    }

    #[test]
    fn f_log_extreme_arguments_are_finite() {
        let st = ThermoState::new(1000.0, 0.0);
        for xi in [-100.0, -1.0, 0.0, 1.0, 100.0] {
            let d = f_log_derivs(st, xi, MAX_F_DERIV).unwrap();
            for (l, v) in d.iter().enumerate() {
                assert!(v.is_finite(), "l={l} xi={xi} not finite");
            }
        }
        // exact linear tail: f ≈ β(μ−ξ) deep below μ
        let deep = f_log(st, -50.0, 0).unwrap();
        assert!((deep - 1000.0 * 50.0).abs() < 1e-9 * deep);
        // derivative order beyond the recurrence depth errors out
        assert!(f_log(st, 0.0, MAX_F_DERIV + 1).is_err());
    }

    #[test]
    fn kernel_normalization_trapezoid() {
        // ∫ (−∂_ξ f_FD) dξ = 1; −∂_ξ f_FD = f_log l=2 divided by β.
        let st = ThermoState::new(7.0, 0.3);
        let a = st.mu - 60.0 / st.beta;
        let b = st.mu + 60.0 / st.beta;
        let n = 20_000;
        let h = (b - a) / n as f64;
        let integrand = |x: f64| f_log(st, x, 2).unwrap() / st.beta;
        let mut sum = 0.5 * (integrand(a) + integrand(b));
        for i in 1..n {
            sum += integrand(a + i as f64 * h);
        }
        sum *= h;
        assert!((sum - 1.0).abs() < 1e-6, "normalization = {sum}");
    }

    #[test]
    fn free_ids_matches_sphere_volume() {
        // modest grid for a unit test; the acceptance suite uses 32³/cutoff 3
        let pot = named_potential("free", 0.0).unwrap();
        let basis = PlaneWaveBasis::new(2);
        let grid = BZGrid::new(16, true);
        let gd = GridData::compute(&pot, &basis, grid).unwrap();
        for e in [2.0_f64, 4.0] {
            let exact = (2.0 * e).powf(1.5) / (6.0 * std::f64::consts::PI.powi(2));
            let got = gd.ids(e);
            assert!(
                (got - exact).abs() <= 0.05 * exact,
                "E={e}: ids={got}, sphere={exact}"
            );
        }
        // below the spectrum bottom
        assert_eq!(gd.ids(gd.e0() - 0.1), 0.0);
    }

    #[test]
    fn ids_monotone_and_density_consistency() {
        let pot = named_potential("cosine3d", 1.0).unwrap();
        let basis = PlaneWaveBasis::new(1);
        let grid = BZGrid::new(8, true);
        let gd = GridData::compute(&pot, &basis, grid).unwrap();
        // ids monotone on an energy ladder
        let mut prev = -1.0;
        for i in 0..30 {
            let e = gd.e0() - 0.5 + i as f64 * 0.5;
            let v = gd.ids(e);
            assert!(v >= prev);
            prev = v;
        }
        // density strictly increasing in μ
        let mut prev = -1.0;
        for i in 0..10 {
            let mu = gd.e0() + i as f64 * 0.3;
            let d = gd.density(ThermoState::new(5.0, mu));
            assert!(d > prev, "density not increasing at step {i}");
            prev = d;
        }
        // β→∞ limit: density → ids at μ inside a band
        let mu = gd.e0() + 0.1;
        let d = gd.density(ThermoState::new(200.0, mu));
        assert!((d - gd.ids(mu)).abs() <= 1e-3, "zero-T limit violated");
        // μ far below the spectrum: exponentially empty
        let d = gd.density(ThermoState::new(10.0, gd.e0() - 10.0));
        assert!(d <= 1e-12);
    }
}
