//! The `verify` command: a deterministic, seeded invariant suite run against
//! the configured potential. Every check reports its worst deviation and
//! tolerance; any failure makes the binary exit with status 2.
//!
//! All checks are sequential and seeded, so the emitted JSON is byte-identical
//! regardless of `--threads`.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use orbmag_core::bz::ThermoState;
use orbmag_core::fiber::{self, PlaneWaveBasis};
use orbmag_core::potential::FourierPotential;
use orbmag_core::residue::{contour_integral, quadrature_oracle, PoleSpec};
use orbmag_core::chi;

type Result<T> = std::result::Result<T, orbmag_core::Error>;

use crate::config::{ConfigError, RunConfig};

const SEED: u64 = 0x6f72626d; // fixed: the suite must be reproducible

/// Outcome of one invariant check.
#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub name: &'static str,
    pub worst: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Run the full suite; returns the per-check reports (overall pass = all
/// pass).
pub fn run(cfg: &RunConfig) -> std::result::Result<Vec<CheckReport>, ConfigError> {
    let pot = cfg.build_potential()?;
    let basis = cfg.basis();
    let tol = |name: &str, default: f64| -> f64 {
        cfg.tolerances
            .as_ref()
            .and_then(|t| t.get(name).copied())
            .unwrap_or(default)
    };

    let mut reports = Vec::new();
    let mut push = |name: &'static str, worst: f64, tol: f64| {
        reports.push(CheckReport {
            name,
            worst,
            tol,
            pass: worst.is_finite() && worst <= tol,
        });
    };

    let (v_worst, h_worst) = sum_rules(&pot, &basis)?;
    push("sum_rule_velocity", v_worst, tol("sum_rule_velocity", 1e-6));
    push("sum_rule_hessian", h_worst, tol("sum_rule_hessian", 1e-5));
    push(
        "residue_oracle",
        residue_oracle()?,
        tol("residue_oracle", 1e-9),
    );
    push("dual_path", dual_path(&pot, &basis)?, tol("dual_path", 1e-8));
    push("f1_zero", f1_zero(&pot, &basis)?, tol("f1_zero", 1e-8));
    push(
        "gauge_invariance",
        gauge_invariance(&pot, &basis)?,
        tol("gauge_invariance", 1e-10),
    );
    Ok(reports)
}

fn random_k(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let mut k = [0.0; 3];
    for x in &mut k {
        *x = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    }
    k
}

/// Velocity and Hessian sum rules vs central finite differences of the band
/// energies, at 20 seeded random k, on bands that are safely isolated.
fn sum_rules(pot: &FourierPotential, basis: &PlaneWaveBasis) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut v_worst = 0.0f64;
    let mut h_worst = 0.0f64;
    let n_bands = basis.dim().min(4);
    let energies_at = |k: [f64; 3]| fiber::solve_energies(pot, basis, k);
    for _ in 0..20 {
        let k = random_k(&mut rng);
        let sol = fiber::solve(pot, basis, k)?;

        // velocity: π̂_{N,N}(α) vs (E(k+h) − E(k−h)) / 2h
        let hv = 1e-5;
        for alpha in 0..3 {
            let mut kp = k;
            let mut km = k;
            kp[alpha] += hv;
            km[alpha] -= hv;
            let ep = energies_at(kp)?;
            let em = energies_at(km)?;
            for j in 0..n_bands {
                if sol.isolation(j) < 1e-4 {
                    continue;
                }
                let fd = (ep[j] - em[j]) / (2.0 * hv);
                let an = sol.velocity(j)[alpha];
                v_worst = v_worst.max((an - fd).abs() / an.abs().max(1.0));
            }
        }

        // Hessian: sum rule vs Richardson-extrapolated second differences.
        // Bands close to an avoided crossing are skipped — their energy
        // curvature scales like 1/gap³ and no finite-difference step is
        // accurate there.
        let second_diff = |j: usize, i: usize, l: usize, h: f64| -> Result<f64> {
            if i == l {
                let mut kp = k;
                let mut km = k;
                kp[i] += h;
                km[i] -= h;
                Ok((energies_at(kp)?[j] - 2.0 * sol.energies[j] + energies_at(km)?[j]) / (h * h))
            } else {
                let mut kpp = k;
                let mut kpm = k;
                let mut kmp = k;
                let mut kmm = k;
                kpp[i] += h;
                kpp[l] += h;
                kpm[i] += h;
                kpm[l] -= h;
                kmp[i] -= h;
                kmp[l] += h;
                kmm[i] -= h;
                kmm[l] -= h;
                Ok((energies_at(kpp)?[j] - energies_at(kpm)?[j] - energies_at(kmp)?[j]
                    + energies_at(kmm)?[j])
                    / (4.0 * h * h))
            }
        };
        let hh = 1e-3;
        for j in 0..n_bands {
            if sol.isolation(j) < 0.1 {
                continue;
            }
            for i in 0..3 {
                for l in i..3 {
                    let d1 = second_diff(j, i, l, hh)?;
                    let d2 = second_diff(j, i, l, hh / 2.0)?;
                    let fd = (4.0 * d2 - d1) / 3.0;
                    let an = fiber::second_derivative_sum_rule(&sol, j, i, l)?;
                    h_worst = h_worst.max((an - fd).abs() / an.abs().max(1.0));
                }
            }
        }
    }
    Ok((v_worst, h_worst))
}

/// Residue engine vs the adaptive quadrature oracle on seeded random pole
/// specs (total multiplicity ≤ 5, β ∈ [1, 50]).
fn residue_oracle() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 1);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n_poles = rng.gen_range(1..=3usize);
        let mut left = 5usize;
        let mut poles = Vec::new();
        for i in 0..n_poles {
            let max_m = left - (n_poles - 1 - i);
            let m = rng.gen_range(1..=max_m.min(3));
            left -= m;
            poles.push((rng.gen_range(-1.0..3.0), m));
        }
        let spec = PoleSpec::new(poles);
        let state = ThermoState::new(rng.gen_range(1.0..50.0), rng.gen_range(-1.0..3.0));
        let exact = contour_integral(state, &spec)?.value;
        let quad = quadrature_oracle(state, &spec)?;
        worst = worst.max((exact - quad).abs());
    }
    Ok(worst)
}

/// Explicit closed-form coefficients vs residue extraction, l ∈ {2, 3}.
fn dual_path(pot: &FourierPotential, basis: &PlaneWaveBasis) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 2);
    let j_cut = basis.dim().min(6);
    let n_bands = j_cut.min(4);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let k = random_k(&mut rng);
        let sol = fiber::solve(pot, basis, k)?;
        let via_residues = chi::coeffs_via_residues(&sol, j_cut)?;
        for j1 in 0..n_bands {
            if sol.isolation(j1) < 1e-4 {
                continue;
            }
            let explicit = chi::explicit_coeffs(&sol, j1 + 1, j_cut)?;
            for l in [2usize, 3] {
                worst = worst.max((explicit.c[l] - via_residues[j1].c[l]).abs());
            }
        }
    }
    Ok(worst)
}

/// |F₁(0)|: the surface integrand correction must vanish at the zone center.
fn f1_zero(pot: &FourierPotential, basis: &PlaneWaveBasis) -> Result<f64> {
    let sol = fiber::solve(pot, basis, [0.0, 0.0, 0.0])?;
    let j_cut = basis.dim().min(30);
    Ok(chi::f_n(&sol, 1, j_cut)?.abs())
}

/// Susceptibility coefficients must not depend on the eigenvector phase
/// convention: re-phase every band by a random phase and compare.
fn gauge_invariance(pot: &FourierPotential, basis: &PlaneWaveBasis) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 3);
    let j_cut = basis.dim().min(6);
    let mut worst = 0.0f64;
    for _ in 0..3 {
        let k = random_k(&mut rng);
        let sol = fiber::solve(pot, basis, k)?;
        let m = sol.energies.len();
        let phases: Vec<Complex64> = (0..m)
            .map(|_| Complex64::from_polar(1.0, rng.gen_range(0.0..std::f64::consts::TAU)))
            .collect();
        let mut re_phased = sol.clone();
        for j in 0..m {
            for r in 0..m {
                re_phased.eigvecs[(r, j)] *= phases[j];
            }
        }
        for alpha in 0..3 {
            for a in 0..m {
                for b in 0..m {
                    re_phased.pi_hat[alpha][(a, b)] *= phases[a].conj() * phases[b];
                }
            }
        }
        let base = chi::coeffs_via_residues(&sol, j_cut)?;
        let alt = chi::coeffs_via_residues(&re_phased, j_cut)?;
        for (x, y) in base.iter().zip(&alt) {
            for l in 0..4 {
                worst = worst.max((x.c[l] - y.c[l]).abs());
            }
        }
    }
    Ok(worst)
}
