//! Low-density asymptotics: effective-mass tensor at the band bottom, the
//! Fermi-energy expansion E_F(ρ₀) − E₀ = s·ρ₀^{2/3} + O(ρ₀^{4/3}), and the
//! Landau-Peierls limit χ_M(ρ₀) → −(m₁m₂m₃)^{1/3}/(24π²·m₁m₂)·k_F with
//! k_F = (6π²ρ₀)^{1/3}.
//!
//! All formulas are spinless: the textbook (spinful) Landau-Peierls value is
//! twice the slope computed here.

use nalgebra::Matrix3;
use serde::Serialize;

use crate::bz::{BZGrid, GridData};
use crate::chi;
use crate::error::{Error, Result};
use crate::fermi::{self, FermiVariant};
use crate::fiber::{self, PlaneWaveBasis};
use crate::potential::FourierPotential;

const PI: f64 = std::f64::consts::PI;

/// Effective-mass tensor of the lowest band at k = 0.
#[derive(Debug, Clone, Serialize)]
pub struct EffectiveMass {
    /// E_1(0).
    pub e0: f64,
    /// m*_i = 1/λ_i with λ_i the Hessian eigenvalues, ordered so that axis i
    /// is the principal direction closest to coordinate axis i.
    pub masses: [f64; 3],
    /// Principal axes (unit vectors), same ordering.
    pub axes: [[f64; 3]; 3],
}

/// Hessian of E_1 at k = 0 via the second-derivative sum rule, symmetric
/// 3×3 eigendecomposition, masses = inverse eigenvalues. The lowest band is
/// always simple at the origin, so the sum rule applies.
pub fn effective_mass(pot: &FourierPotential, basis: &PlaneWaveBasis) -> Result<EffectiveMass> {
    let sol = fiber::solve(pot, basis, [0.0, 0.0, 0.0])?;
    let mut h = Matrix3::zeros();
    for i in 0..3 {
        for j in i..3 {
            let v = fiber::second_derivative_sum_rule(&sol, 0, i, j)?;
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    let eig = h.symmetric_eigen();
    // order eigenpairs so that pair i points along coordinate axis i
    let mut used = [false; 3];
    let mut masses = [0.0f64; 3];
    let mut axes = [[0.0f64; 3]; 3];
    for axis in 0..3 {
        let pick = (0..3)
            .filter(|&p| !used[p])
            .max_by(|&a, &b| {
                eig.eigenvectors[(axis, a)]
                    .abs()
                    .total_cmp(&eig.eigenvectors[(axis, b)].abs())
            })
            .unwrap();
        used[pick] = true;
        let lambda = eig.eigenvalues[pick];
        if lambda <= 0.0 {
            return Err(Error::NonPositiveMass(lambda));
        }
        masses[axis] = 1.0 / lambda;
        for c in 0..3 {
            axes[axis][c] = eig.eigenvectors[(c, pick)];
        }
    }
    Ok(EffectiveMass {
        e0: sol.energies[0],
        masses,
        axes,
    })
}

/// s = (6π²)^{2/3}/2 · (m₁m₂m₃)^{−1/3}: the predicted Fermi-energy slope.
pub fn s_coeff(masses: [f64; 3]) -> f64 {
    (6.0 * PI * PI).powf(2.0 / 3.0) / (2.0 * (masses[0] * masses[1] * masses[2]).cbrt())
}

/// −(m₁m₂m₃)^{1/3}/(24π²·m₁m₂): predicted χ_M/k_F slope, field along axis 3.
pub fn lp_prediction(masses: [f64; 3]) -> f64 {
    -(masses[0] * masses[1] * masses[2]).cbrt() / (24.0 * PI * PI * masses[0] * masses[1])
}

/// Spinless Fermi wave vector k_F = (6π²ρ₀)^{1/3}.
pub fn fermi_wave_vector(rho0: f64) -> f64 {
    (6.0 * PI * PI * rho0).cbrt()
}

/// One density rung of the Fermi-energy fit.
#[derive(Debug, Clone, Serialize)]
pub struct FermiFitRow {
    pub rho0: f64,
    pub e_fermi: f64,
    /// E_F − E₀, the fitted ordinate.
    pub delta: f64,
}

/// Least-squares fit of E_F(ρ₀) − E₀ = s·x + t·x² with x = ρ₀^{2/3}.
#[derive(Debug, Clone, Serialize)]
pub struct FermiFit {
    pub s: f64,
    pub t: f64,
    pub e0: f64,
    pub rows: Vec<FermiFitRow>,
}

/// Fit the Fermi-energy expansion on a density ladder. Every rung must
/// classify as a metal (E_F inside band 1 for the intended low-density use).
/// E₀ is taken from an exact fiber solve at the grid point minimizing E₁,
/// polished towards the band bottom: the sampled grid minimum sits O(h²)
/// above the true one (the shifted grid never hits the minimizer exactly),
/// and with no constant term in the fit that offset would leak into s.
pub fn fermi_energy_expansion(
    pot: &FourierPotential,
    basis: &PlaneWaveBasis,
    grid: BZGrid,
    rho_ladder: &[f64],
) -> Result<FermiFit> {
    assert!(rho_ladder.len() >= 2, "need at least two densities to fit");
    let gd = GridData::compute_with_cap(pot, basis, grid, 6.min(basis.dim()))?;
    let e0 = band_bottom(pot, basis, &gd, grid)?;
    let mut rows = Vec::with_capacity(rho_ladder.len());
    for &rho0 in rho_ladder {
        let class = fermi::classify_on(&gd, rho0)?;
        let FermiVariant::Metal { e_m, .. } = class.variant else {
            return Err(Error::WrongClassification(format!(
                "Fermi-energy expansion needs metallic rungs, but rho0 = {rho0} is a semiconductor"
            )));
        };
        rows.push(FermiFitRow {
            rho0,
            e_fermi: e_m,
            delta: e_m - e0,
        });
    }
    // normal equations for y = s·x + t·x²
    let (mut s11, mut s12, mut s22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for r in &rows {
        let x = r.rho0.powf(2.0 / 3.0);
        let y = r.delta;
        s11 += x * x;
        s12 += x * x * x;
        s22 += x * x * x * x;
        b1 += x * y;
        b2 += x * x * y;
    }
    let det = s11 * s22 - s12 * s12;
    let s = (b1 * s22 - b2 * s12) / det;
    let t = (s11 * b2 - s12 * b1) / det;
    Ok(FermiFit { s, t, e0, rows })
}

/// Minimum of band 1: start from the grid point with the smallest sampled
/// E₁ and polish with Newton steps (velocity + Hessian from the sum rules).
/// Steps are only accepted while they descend, so the result is never worse
/// than the sampled minimum.
fn band_bottom(
    pot: &FourierPotential,
    basis: &PlaneWaveBasis,
    gd: &GridData,
    grid: BZGrid,
) -> Result<f64> {
    let ik0 = (0..grid.len())
        .min_by(|&a, &b| gd.energy(a, 0).total_cmp(&gd.energy(b, 0)))
        .expect("non-empty grid");
    let mut k = grid.point(ik0);
    let mut best = gd.energy(ik0, 0);
    for _ in 0..8 {
        let sol = fiber::solve(pot, basis, k)?;
        if sol.isolation(0) < 1e-8 {
            break;
        }
        let g = sol.velocity(0);
        let mut h = Matrix3::zeros();
        for i in 0..3 {
            for j in i..3 {
                let v = fiber::second_derivative_sum_rule(&sol, 0, i, j)?;
                h[(i, j)] = v;
                h[(j, i)] = v;
            }
        }
        let Some(hinv) = h.try_inverse() else { break };
        let step = hinv * nalgebra::Vector3::new(g[0], g[1], g[2]);
        let trial = [k[0] - step[0], k[1] - step[1], k[2] - step[2]];
        let e = fiber::solve_energies(pot, basis, trial)?[0];
        if e >= best {
            break;
        }
        k = trial;
        best = e;
        if step.norm() < 1e-12 {
            break;
        }
    }
    Ok(best)
}

/// One density rung of the Landau-Peierls ladder.
#[derive(Debug, Clone, Serialize)]
pub struct LpRow {
    pub rho0: f64,
    pub k_f: f64,
    pub chi: f64,
    pub chi_over_kf: f64,
}

/// Landau-Peierls slope extraction report.
#[derive(Debug, Clone, Serialize)]
pub struct LpReport {
    pub masses: [f64; 3],
    /// Fermi-energy slope predicted from the masses.
    pub s_coeff: f64,
    /// Predicted χ_M/k_F slope.
    pub lp_prediction: f64,
    pub rows: Vec<LpRow>,
    /// Richardson-extrapolated slope from the two smallest-k_F rungs,
    /// eliminating the o(k_F) term: with r_i = χ_i/k_{F,i} and k₁ > k₂,
    /// slope = (r₁k₂ − r₂k₁)/(k₂ − k₁).
    pub slope: f64,
}

impl LpReport {
    /// CSV table (rho0, k_F, chi, chi_over_kF, prediction) for plotting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rho0,k_F,chi,chi_over_kF,prediction\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                r.rho0, r.k_f, r.chi, r.chi_over_kf, self.lp_prediction
            ));
        }
        out
    }
}

/// Compute χ_M on a density ladder (one shared eigenproblem sweep), form
/// χ/k_F per rung, and Richardson-extrapolate the two smallest rungs to the
/// k_F → 0 slope.
pub fn landau_peierls_check(
    pot: &FourierPotential,
    basis: &PlaneWaveBasis,
    grid: BZGrid,
    rho_ladder: &[f64],
    j_cutoff: usize,
) -> Result<LpReport> {
    assert!(rho_ladder.len() >= 2, "need at least two densities");
    let em = effective_mass(pot, basis)?;
    let results = chi::chi_zero_t_metal_multi(pot, basis, grid, rho_ladder, j_cutoff)?;
    let mut rows: Vec<LpRow> = rho_ladder
        .iter()
        .zip(&results)
        .map(|(&rho0, r)| {
            let k_f = fermi_wave_vector(rho0);
            LpRow {
                rho0,
                k_f,
                chi: r.value,
                chi_over_kf: r.value / k_f,
            }
        })
        .collect();
    rows.sort_by(|a, b| b.k_f.total_cmp(&a.k_f));
    let p1 = &rows[rows.len() - 2]; // larger k_F of the two smallest
    let p2 = &rows[rows.len() - 1];
    let slope = (p1.chi_over_kf * p2.k_f - p2.chi_over_kf * p1.k_f) / (p2.k_f - p1.k_f);
    Ok(LpReport {
        masses: em.masses,
        s_coeff: s_coeff(em.masses),
        lp_prediction: lp_prediction(em.masses),
        rows,
        slope,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potential::named_potential;
    use crate::surface::{self, TetraMesh};

    #[test]
    fn free_electron_masses_are_unity() {
        let em = effective_mass(&FourierPotential::free(), &PlaneWaveBasis::new(1)).unwrap();
        for m in em.masses {
            assert!((m - 1.0).abs() <= 1e-10, "m* = {m}");
        }
        assert!((s_coeff(em.masses) - (6.0 * PI * PI).powf(2.0 / 3.0) / 2.0).abs() <= 1e-10);
        assert!((lp_prediction(em.masses) + 1.0 / (24.0 * PI * PI)).abs() <= 1e-12);
    }

    #[test]
    fn cosine_masses_are_isotropic_and_match_finite_differences() {
        let pot = named_potential("cosine3d", 1.0).unwrap();
        let basis = PlaneWaveBasis::new(2);
        let em = effective_mass(&pot, &basis).unwrap();
        assert!((em.masses[0] - em.masses[1]).abs() <= 1e-9);
        assert!((em.masses[1] - em.masses[2]).abs() <= 1e-9);
        assert!(em.masses[0] > 1.0, "lattice potential should raise the mass");
        // finite-difference d²E/dk₁² at k = 0
        let h = 1e-3;
        let e = |k: [f64; 3]| fiber::solve_energies(&pot, &basis, k).unwrap()[0];
        let fd = (e([h, 0.0, 0.0]) - 2.0 * e([0.0; 3]) + e([-h, 0.0, 0.0])) / (h * h);
        let rel = (1.0 / em.masses[0] - fd).abs() / fd.abs();
        assert!(rel <= 1e-5, "sum-rule vs FD Hessian: rel = {rel:.2e}");
    }

    #[test]
    fn fermi_energy_slope_free_electrons() {
        let pot = FourierPotential::free();
        let basis = PlaneWaveBasis::new(1);
        let grid = BZGrid::new(48, true);
        let fit = fermi_energy_expansion(&pot, &basis, grid, &[8e-2, 4e-2, 2e-2]).unwrap();
        let expect = (6.0 * PI * PI).powf(2.0 / 3.0) / 2.0;
        let rel = (fit.s - expect).abs() / expect;
        assert!(rel <= 0.02, "s = {} vs {expect} (rel {rel:.3e})", fit.s);
    }

    #[test]
    fn fermi_energy_slope_is_ladder_stable() {
        let pot = FourierPotential::free();
        let basis = PlaneWaveBasis::new(1);
        let grid = BZGrid::new(48, true);
        let a = fermi_energy_expansion(&pot, &basis, grid, &[1e-1, 8e-2, 6e-2, 4e-2, 2e-2])
            .unwrap()
            .s;
        let b = fermi_energy_expansion(&pot, &basis, grid, &[8e-2, 4e-2, 2e-2])
            .unwrap()
            .s;
        assert!((a - b).abs() / a.abs() <= 0.01, "s moved: {a} vs {b}");
    }

    #[test]
    fn occupied_volume_tracks_the_density() {
        // low-density volume asymptotics: occupied fraction / rho0 → 1
        let pot = FourierPotential::free();
        let basis = PlaneWaveBasis::new(1);
        let grid = BZGrid::new(32, true);
        let rho0 = 1e-3;
        let gd = GridData::compute_with_cap(&pot, &basis, grid, 2).unwrap();
        let class = fermi::classify_on(&gd, rho0).unwrap();
        let FermiVariant::Metal { e_m, .. } = class.variant else {
            panic!("expected metal");
        };
        let occ = (0..grid.len())
            .filter(|&ik| gd.energy(ik, 0) <= e_m)
            .count() as f64
            / grid.len() as f64;
        let ratio = occ / rho0;
        assert!((0.97..=1.03).contains(&ratio), "ratio = {ratio}");
    }

    #[test]
    fn surface_integral_tracks_the_fermi_sphere_area() {
        // low-density surface asymptotics: ∫dσ/|∇E| /ρ₀^{1/3} → 4π(6π²)^{1/3}
        let pot = FourierPotential::free();
        let basis = PlaneWaveBasis::new(1);
        let grid = BZGrid::new(64, true);
        let rho0 = 1e-3;
        let mesh = TetraMesh::build(&pot, &basis, grid, 1).unwrap();
        let e_f = fermi_wave_vector(rho0).powi(2) / 2.0;
        let ones = vec![1.0; grid.len()];
        let val = surface::surface_integral(&mesh, e_f, &ones).unwrap();
        let ratio = val / rho0.cbrt();
        let expect = 4.0 * PI * (6.0 * PI * PI).cbrt();
        let rel = (ratio - expect).abs() / expect;
        assert!(rel <= 0.05, "ratio = {ratio} vs {expect} (rel {rel:.3e})");
    }

    #[test]
    fn landau_peierls_free_slope() {
        let pot = FourierPotential::free();
        let basis = PlaneWaveBasis::new(1);
        let grid = BZGrid::new(48, true);
        // moderate densities for a unit-test-sized grid; the acceptance run
        // uses the paper ladder on a finer grid
        let report = landau_peierls_check(&pot, &basis, grid, &[8e-3, 4e-3, 2e-3], 3).unwrap();
        let expect = -1.0 / (24.0 * PI * PI);
        assert!(report.slope < 0.0, "diamagnetic slope expected");
        let rel = (report.slope - expect).abs() / expect.abs();
        assert!(
            rel <= 0.08,
            "slope = {} vs {expect} (rel {rel:.3e})",
            report.slope
        );
        let csv = report.to_csv();
        assert!(csv.lines().count() == 4 && csv.starts_with("rho0,"));
    }
}

