//! Contour integrals of the Fermi log-kernel against rational functions of
//! band energies, in closed form via residues.
//!
//! The object evaluated is
//!
//! ```text
//! I = (1/2πi) ∮_Γ f(β,μ;ξ) · Π_i (E_i − ξ)^{−m_i} dξ
//! ```
//!
//! with Γ a positively oriented contour enclosing all (real) pole energies,
//! inside the strip |Im ξ| < π/β where f is analytic. With this orientation a
//! simple pole gives I[f/(E−ξ)] = −f(E) and a fourth-order pole gives
//! I[f/(E−ξ)⁴] = (1/3!)·f‴(E).
//!
//! The residue at each pole is expanded by the general Leibniz rule into
//! Σ_l coeff(p,l)·∂^l f(E_p), where the coefficients are rational in the pole
//! energies and independent of (β, μ). The per-(pole, l) breakdown is exposed
//! so the susceptibility assembly can build its β-independent coefficient
//! tables once per k-point and contract them with Fermi-kernel derivatives for
//! many temperatures.
//!
//! [`quadrature_oracle`] integrates the same object numerically along the
//! rectangular contour Im ξ = ±π/(2β) (adaptive Simpson, used only to validate
//! the closed form).

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::bz::{f_log_derivs, ThermoState, MAX_F_DERIV};
use crate::error::{Error, Result};

/// Largest supported total multiplicity: the residue expansion then needs
/// ∂^l f with l ≤ total − 1 ≤ [`MAX_F_DERIV`].
pub const MAX_TOTAL_MULTIPLICITY: usize = MAX_F_DERIV + 1;

/// A product of real poles Π_i (E_i − ξ)^{−m_i}, energies pairwise distinct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoleSpec {
    poles: Vec<(f64, usize)>,
}

impl PoleSpec {
    /// Build a spec; multiplicities must be ≥ 1 and sum to at most
    /// [`MAX_TOTAL_MULTIPLICITY`]. Energies are assumed pairwise separated
    /// (use [`merge_poles`] on raw band energies first).
    pub fn new(poles: impl Into<Vec<(f64, usize)>>) -> Self {
        let poles = poles.into();
        assert!(!poles.is_empty(), "empty pole spec");
        assert!(poles.iter().all(|&(_, m)| m >= 1), "zero multiplicity");
        assert!(
            poles.iter().map(|&(_, m)| m).sum::<usize>() <= MAX_TOTAL_MULTIPLICITY,
            "total multiplicity exceeds {MAX_TOTAL_MULTIPLICITY}"
        );
        Self { poles }
    }

    pub fn poles(&self) -> &[(f64, usize)] {
        &self.poles
    }

    pub fn total_multiplicity(&self) -> usize {
        self.poles.iter().map(|&(_, m)| m).sum()
    }
}

/// One term of the residue expansion: coeff · ∂^l f(E_pole).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Contribution {
    /// Index into the spec's pole list.
    pub pole: usize,
    /// Derivative order of the Fermi log-kernel.
    pub l: usize,
    /// Rational coefficient, independent of (β, μ).
    pub coefficient: f64,
    /// coeff · ∂^l f(E_pole) at the requested state.
    pub value: f64,
}

/// Closed-form value plus its per-(pole, derivative-order) breakdown.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidueResult {
    pub value: f64,
    pub per_pole: Vec<Contribution>,
}

fn binomial(n: usize, k: usize) -> f64 {
    let mut v = 1.0;
    for i in 0..k {
        v = v * (n - i) as f64 / (i + 1) as f64;
    }
    v
}

/// The (β, μ)-independent coefficients of the residue expansion:
/// I = Σ (pole p, order l) coeff(p,l) · ∂^l f(E_p), returned as
/// (pole index, l, coeff) triples.
///
/// At pole p with multiplicity m the residue of f·Π(E_i−ξ)^{−m_i} is
/// (−1)^m/(m−1)! · Σ_l C(m−1,l) ∂^l f(E_p) · G^{(m−1−l)}(E_p) with
/// G(ξ) = Π_{q≠p}(E_q−ξ)^{−m_q}. Derivatives of G follow from
/// G' = S·G, S(ξ) = Σ_q m_q (E_q−ξ)^{−1}, S^{(j)} = Σ_q m_q·j!·(E_q−ξ)^{−1−j}
/// by the Leibniz recurrence G^{(n+1)} = Σ_j C(n,j) S^{(j)} G^{(n−j)}.
pub fn pole_coefficients(spec: &PoleSpec) -> Vec<(usize, usize, f64)> {
    let poles = spec.poles();
    let mut out = Vec::new();
    for (p, &(e_p, m_p)) in poles.iter().enumerate() {
        // derivatives of G at E_p, orders 0..=m_p−1
        let mut g = vec![0.0f64; m_p];
        g[0] = poles
            .iter()
            .enumerate()
            .filter(|&(q, _)| q != p)
            .map(|(_, &(e_q, m_q))| (e_q - e_p).powi(-(m_q as i32)))
            .product();
        // S^{(j)}(E_p) for j ≤ m_p − 2
        let s: Vec<f64> = (0..m_p.saturating_sub(1))
            .map(|j| {
                let fact: f64 = (1..=j).map(|i| i as f64).product();
                poles
                    .iter()
                    .enumerate()
                    .filter(|&(q, _)| q != p)
                    .map(|(_, &(e_q, m_q))| {
                        m_q as f64 * fact * (e_q - e_p).powi(-(1 + j as i32))
                    })
                    .sum()
            })
            .collect();
        for n in 0..m_p - 1 {
            g[n + 1] = (0..=n).map(|j| binomial(n, j) * s[j] * g[n - j]).sum();
        }
        let sign = if m_p % 2 == 0 { 1.0 } else { -1.0 };
        let fact_m: f64 = (1..m_p).map(|i| i as f64).product();
        for l in 0..m_p {
            let coeff = sign / fact_m * binomial(m_p - 1, l) * g[m_p - 1 - l];
            out.push((p, l, coeff));
        }
    }
    out
}

/// Evaluate I = (1/2πi)∮ f·Π(E_i−ξ)^{−m_i} dξ exactly by residues.
pub fn contour_integral(state: ThermoState, spec: &PoleSpec) -> Result<ResidueResult> {
    let coeffs = pole_coefficients(spec);
    let mut per_pole = Vec::with_capacity(coeffs.len());
    let mut value = 0.0;
    // cache f-derivatives per pole (one f_log_derivs call per pole)
    let lmax_per_pole: Vec<usize> = spec.poles().iter().map(|&(_, m)| m - 1).collect();
    let derivs: Vec<Vec<f64>> = spec
        .poles()
        .iter()
        .zip(&lmax_per_pole)
        .map(|(&(e, _), &lmax)| f_log_derivs(state, e, lmax))
        .collect::<Result<_>>()?;
    for (p, l, coefficient) in coeffs {
        let v = coefficient * derivs[p][l];
        value += v;
        per_pole.push(Contribution {
            pole: p,
            l,
            coefficient,
            value: v,
        });
    }
    Ok(ResidueResult { value, per_pole })
}

/// Single-linkage clustering of raw (energy, multiplicity) pairs: energies
/// within `eps` of a chain neighbor merge into one pole at the
/// multiplicity-weighted mean with summed multiplicity. This mirrors the
/// eigenvalue-degeneracy threshold so that near-identical band energies never
/// reach 1/(E_i − E_j) denominators downstream.
pub fn merge_poles(raw: &[(f64, usize)], eps: f64) -> PoleSpec {
    assert!(eps >= 0.0);
    let mut sorted: Vec<(f64, usize)> = raw.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut merged: Vec<(f64, usize)> = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j].0 - sorted[j - 1].0 <= eps {
            j += 1;
        }
        let mult: usize = sorted[i..j].iter().map(|&(_, m)| m).sum();
        let mean = sorted[i..j]
            .iter()
            .map(|&(e, m)| e * m as f64)
            .sum::<f64>()
            / mult as f64;
        merged.push((mean, mult));
        i = j;
    }
    PoleSpec::new(merged)
}

/// f(β,μ;ξ) = ln(1 + e^{β(μ−ξ)}) for complex ξ, stable for large |Re ξ|.
/// Analytic on |Im ξ| < π/β; on the oracle contour Im ξ = ±π/(2β) the
/// argument 1 + e^z stays clear of the log branch cut.
pub(crate) fn f_log_complex(state: ThermoState, xi: Complex64) -> Complex64 {
    let z = Complex64::new(state.beta * state.mu, 0.0) - state.beta * xi;
    if z.re > 0.0 {
        // ln(1+e^z) = z + ln(1+e^{−z})
        z + (Complex64::new(1.0, 0.0) + (-z).exp()).ln()
    } else {
        (Complex64::new(1.0, 0.0) + z.exp()).ln()
    }
}

fn rational(spec: &PoleSpec, xi: Complex64) -> Complex64 {
    spec.poles()
        .iter()
        .map(|&(e, m)| (Complex64::new(e, 0.0) - xi).powi(-(m as i32)))
        .product()
}

/// Adaptive Simpson on the segment [a, b] in the complex plane.
fn adaptive_simpson(
    g: &impl Fn(Complex64) -> Complex64,
    a: Complex64,
    b: Complex64,
    fa: Complex64,
    fm: Complex64,
    fb: Complex64,
    whole: Complex64,
    tol: f64,
    depth: usize,
    worst: &mut f64,
) -> Complex64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = g(lm);
    let frm = g(rm);
    let h = b - a;
    let left = h / 12.0 * (fa + 4.0 * flm + fm);
    let right = h / 12.0 * (fm + 4.0 * frm + fb);
    let err = (left + right - whole).norm() / 15.0;
    // Stop on: error below tolerance (with a floor at the roundoff level of
    // the local integrand magnitude), interval exhausted, or depth cap.
    let floor = 1e-15 * h.norm() * fa.norm().max(fm.norm()).max(fb.norm());
    if err <= tol.max(floor) || depth == 0 || h.norm() < 1e-12 {
        if err > tol {
            *worst = worst.max(err);
        }
        return left + right + (left + right - whole) / 15.0;
    }
    adaptive_simpson(g, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1, worst)
        + adaptive_simpson(g, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1, worst)
}

fn integrate_segment(
    g: &impl Fn(Complex64) -> Complex64,
    a: Complex64,
    b: Complex64,
    tol: f64,
    worst: &mut f64,
) -> Complex64 {
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (g(a), g(m), g(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    adaptive_simpson(g, a, b, fa, fm, fb, whole, tol, 48, worst)
}

/// (1/2πi)∮ g dξ counterclockwise around the rectangle Im ξ = ±π/(2β), left
/// edge at min(abscissas) − 1, right edge where the Fermi kernel has decayed
/// below 1e−16. `abscissas` are the real singularity locations of g between
/// the horizontal edges; they set the rectangle extent and the initial edge
/// subdivision so the adaptive pass starts with pole-aligned segments.
pub(crate) fn rectangle_quadrature(
    state: ThermoState,
    abscissas: &[f64],
    g: &impl Fn(Complex64) -> Complex64,
    tol: f64,
) -> Result<Complex64> {
    let e_min = abscissas.iter().copied().fold(f64::INFINITY, f64::min);
    let e_max = abscissas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let h = std::f64::consts::FRAC_PI_2 / state.beta;
    let left = e_min - 1.0;
    // |f| ~ e^{β(μ−Re ξ)} past μ: e^{−40} < 1e−16 relative to the kernel scale
    let right = (e_max + 1.0).max(state.mu + 40.0 / state.beta);

    let corners = [
        Complex64::new(left, -h),
        Complex64::new(right, -h),
        Complex64::new(right, h),
        Complex64::new(left, h),
    ];
    let mut worst = 0.0f64;
    let mut total = Complex64::new(0.0, 0.0);
    for i in 0..4 {
        // split long horizontal edges around each pole for the first pass
        let (a, b) = (corners[i], corners[(i + 1) % 4]);
        if (b - a).im == 0.0 {
            let mut cuts: Vec<f64> = vec![a.re, b.re];
            for &e in abscissas {
                if (e - a.re).abs() > 1e-9 && (e - b.re).abs() > 1e-9 {
                    cuts.push(e);
                }
            }
            cuts.sort_by(f64::total_cmp);
            if a.re > b.re {
                cuts.reverse(); // traverse the edge in its own direction
            }
            for w in cuts.windows(2) {
                total += integrate_segment(
                    g,
                    Complex64::new(w[0], a.im),
                    Complex64::new(w[1], a.im),
                    tol / 8.0,
                    &mut worst,
                );
            }
        } else {
            total += integrate_segment(g, a, b, tol / 8.0, &mut worst);
        }
    }
    // Refinement targets `tol`; roundoff can leave individual segments
    // slightly above that. Fail only when the achieved estimate is two orders
    // worse than the level the caller certifies against.
    if worst > 100.0 * tol {
        return Err(Error::QuadratureNotConverged { achieved: worst });
    }
    Ok(total / Complex64::new(0.0, 2.0 * std::f64::consts::PI))
}

/// Numerical evaluation of the same contour integral along the rectangular
/// contour Im ξ = ±π/(2β), left edge at min(E_i) − 1, right edge where the
/// kernel has decayed below 1e−16 (validation only).
pub fn quadrature_oracle(state: ThermoState, spec: &PoleSpec) -> Result<f64> {
    let g = |xi: Complex64| f_log_complex(state, xi) * rational(spec, xi);
    let abscissas: Vec<f64> = spec.poles().iter().map(|&(e, _)| e).collect();
    let value = rectangle_quadrature(state, &abscissas, &g, 1e-11)?;
    Ok(value.re)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bz::f_log;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn simple_pole_is_minus_f() {
        let st = ThermoState::new(7.0, 0.4);
        let spec = PoleSpec::new(vec![(1.3, 1)]);
        let r = contour_integral(st, &spec).unwrap();
        let expect = -f_log(st, 1.3, 0).unwrap();
        assert!((r.value - expect).abs() <= 1e-14 * expect.abs());
        // sign self-test: with the (i/2π) prefactor the value is +f(E) > 0
        assert!(-r.value > 0.0);
    }

    #[test]
    fn fourth_order_pole_is_third_derivative() {
        let st = ThermoState::new(4.0, -0.2);
        let e = 0.9;
        let spec = PoleSpec::new(vec![(e, 4)]);
        let r = contour_integral(st, &spec).unwrap();
        let expect = f_log(st, e, 3).unwrap() / 6.0;
        assert!(
            (r.value - expect).abs() <= 1e-13 * expect.abs().max(1.0),
            "{} vs {expect}",
            r.value
        );
    }

    #[test]
    fn per_pole_breakdown_sums_to_value() {
        let st = ThermoState::new(9.0, 0.5);
        let spec = PoleSpec::new(vec![(0.1, 2), (0.8, 1), (1.7, 3)]);
        let r = contour_integral(st, &spec).unwrap();
        let sum: f64 = r.per_pole.iter().map(|c| c.value).sum();
        assert!((sum - r.value).abs() <= 1e-14 * r.value.abs().max(1e-300));
        // coefficients are (β, μ)-independent
        let r2 = contour_integral(ThermoState::new(31.0, -1.2), &spec).unwrap();
        for (a, b) in r.per_pole.iter().zip(&r2.per_pole) {
            assert_eq!((a.pole, a.l), (b.pole, b.l));
            assert_eq!(a.coefficient, b.coefficient);
        }
    }

    #[test]
    fn oracle_agrees_on_single_poles() {
        let st = ThermoState::new(5.0, 0.3);
        for spec in [
            PoleSpec::new(vec![(0.7, 1)]),
            PoleSpec::new(vec![(0.7, 4)]),
        ] {
            let exact = contour_integral(st, &spec).unwrap().value;
            let quad = quadrature_oracle(st, &spec).unwrap();
            assert!(
                (exact - quad).abs() <= 1e-10,
                "spec {spec:?}: {exact} vs {quad}"
            );
        }
    }

    #[test]
    fn oracle_agrees_on_mixed_spec() {
        // spec [(E1,2),(E2,1),(E3,1),(E4,1)], β=5, μ=0, energies ≥ 0.3 apart
        let st = ThermoState::new(5.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let mut es: [f64; 4];
            loop {
                es = core::array::from_fn(|_| rng.gen_range(-1.0..3.0));
                es.sort_by(f64::total_cmp);
                if es.windows(2).all(|w| w[1] - w[0] >= 0.3) {
                    break;
                }
            }
            let spec = PoleSpec::new(vec![(es[0], 2), (es[1], 1), (es[2], 1), (es[3], 1)]);
            let exact = contour_integral(st, &spec).unwrap().value;
            let quad = quadrature_oracle(st, &spec).unwrap();
            assert!(
                (exact - quad).abs() <= 1e-10,
                "spec {spec:?}: {exact} vs {quad}"
            );
        }
    }

    #[test]
    fn oracle_agrees_on_random_specs() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..50 {
            let beta = rng.gen_range(1.0..50.0);
            let mu = rng.gen_range(-1.0..1.0);
            let st = ThermoState::new(beta, mu);
            let n_poles = rng.gen_range(1..=3usize);
            let mut energies: Vec<f64>;
            loop {
                energies = (0..n_poles).map(|_| rng.gen_range(-1.0..2.0)).collect();
                energies.sort_by(f64::total_cmp);
                if energies.windows(2).all(|w| w[1] - w[0] >= 0.2) {
                    break;
                }
            }
            // multiplicities summing to ≤ 5
            let mut budget = 5 - n_poles;
            let poles: Vec<(f64, usize)> = energies
                .iter()
                .map(|&e| {
                    let extra = if budget > 0 { rng.gen_range(0..=budget) } else { 0 };
                    budget -= extra;
                    (e, 1 + extra)
                })
                .collect();
            let spec = PoleSpec::new(poles);
            let exact = contour_integral(st, &spec).unwrap().value;
            let quad = quadrature_oracle(st, &spec).unwrap();
            assert!(
                (exact - quad).abs() <= 1e-9,
                "trial {trial} spec {spec:?} beta {beta}: {exact} vs {quad}"
            );
        }
    }

    #[test]
    fn oracle_narrow_contour_beta_100() {
        let st = ThermoState::new(100.0, 0.5);
        let spec = PoleSpec::new(vec![(0.2, 2), (0.9, 1)]);
        let exact = contour_integral(st, &spec).unwrap().value;
        let quad = quadrature_oracle(st, &spec).unwrap();
        assert!((exact - quad).abs() <= 1e-8, "{exact} vs {quad}");
    }

    #[test]
    fn merge_pole_examples() {
        let m = merge_poles(&[(1.0, 1), (1.0 + 1e-12, 1)], 1e-8);
        assert_eq!(m.poles().len(), 1);
        assert_eq!(m.poles()[0].1, 2);
        assert!((m.poles()[0].0 - 1.0).abs() < 1e-12);

        let m = merge_poles(&[(1.0, 1), (2.0, 1)], 1e-8);
        assert_eq!(m.poles(), &[(1.0, 1), (2.0, 1)]);

        let m = merge_poles(&[(1.0, 2), (1.0 + 5e-9, 1), (3.0, 1)], 1e-8);
        assert_eq!(m.poles().len(), 2);
        assert_eq!(m.poles()[0].1, 3);
        assert!((m.poles()[0].0 - 1.0).abs() < 5e-9);
        assert_eq!(m.poles()[1], (3.0, 1));
    }

    #[test]
    fn merged_double_pole_is_continuous_limit() {
        let st = ThermoState::new(10.0, 0.5);
        for sep in [1e-3, 1e-6] {
            let e = 0.4;
            let unmerged = PoleSpec::new(vec![(e, 1), (e + sep, 1)]);
            let merged = merge_poles(&[(e, 1), (e + sep, 1)], 10.0 * sep);
            let a = contour_integral(st, &unmerged).unwrap().value;
            let b = contour_integral(st, &merged).unwrap().value;
            assert!(
                (a - b).abs() <= 1e-6 * b.abs().max(1e-12) + 1e-4 * sep,
                "sep {sep}: {a} vs {b}"
            );
        }
    }
}
