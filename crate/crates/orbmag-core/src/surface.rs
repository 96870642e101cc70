//! Fermi-surface extraction and integrals ∫_{S_F} dσ/|∇E_N|·F by the
//! linear-tetrahedron method.
//!
//! Each grid cube is split into six tetrahedra sharing the main diagonal
//! (Kuhn subdivision), so the tetrahedra tile the Brillouin zone exactly.
//! Inside a tetrahedron the band energy is interpolated linearly from its
//! four corners; the isolevel E_N = E_F then cuts a planar polygon whose
//! area, divided by the interpolated gradient magnitude and weighted by the
//! interpolated integrand F, accumulates into the surface integral.
//!
//! Vertex gradients come from the momentum matrices (∂E_N/∂k_α = π̂_{N,N}(α)),
//! which are exact in the truncated model — no finite differences.

use std::io::Write as _;

use rayon::prelude::*;

use crate::bz::{BZGrid, GridData};
use crate::error::{Error, Result};
use crate::fiber::{self, PlaneWaveBasis};
use crate::potential::FourierPotential;

/// The six tetrahedra of the Kuhn subdivision of the unit cube, as corner
/// offsets (b1,b2,b3) ∈ {0,1}³. Each is {0, e_p, e_p+e_q, (1,1,1)} for one of
/// the six axis orderings; all have volume 1/6 and they tile the cube.
const KUHN_TETS: [[[usize; 3]; 4]; 6] = [
    [[0, 0, 0], [1, 0, 0], [1, 1, 0], [1, 1, 1]],
    [[0, 0, 0], [1, 0, 0], [1, 0, 1], [1, 1, 1]],
    [[0, 0, 0], [0, 1, 0], [1, 1, 0], [1, 1, 1]],
    [[0, 0, 0], [0, 1, 0], [0, 1, 1], [1, 1, 1]],
    [[0, 0, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1]],
    [[0, 0, 0], [0, 0, 1], [0, 1, 1], [1, 1, 1]],
];

/// Per-vertex band data for one band on a Monkhorst-Pack grid, ready for
/// isosurface extraction. Energies and gradients are indexed like the grid
/// (row-major over (i1,i2,i3)); cube corners wrap periodically.
#[derive(Debug, Clone)]
pub struct TetraMesh {
    pub grid: BZGrid,
    /// 1-based band index N.
    pub band: usize,
    /// E_N at every grid point.
    pub energy: Vec<f64>,
    /// ∇E_N at every grid point, from π̂_{N,N}.
    pub gradient: Vec<[f64; 3]>,
}

/// Outcome of a surface integration, with the crossing statistics needed to
/// police the non-degeneracy precondition.
#[derive(Debug, Clone, Copy)]
pub struct SurfaceIntegral {
    pub value: f64,
    /// Tetrahedra cut by the isolevel.
    pub crossing_tets: usize,
    /// Crossing tetrahedra skipped because the interpolated |∇E_N| ≤ 1e−6.
    pub degenerate_tets: usize,
}

/// Distances from a trial Fermi energy to the sampled spectrum of the
/// neighboring bands (Fermi-surface isolation report).
#[derive(Debug, Clone, Copy)]
pub struct IsolationReport {
    /// min |E_j(k) − E_F| over bands j < N (+∞ when N = 1).
    pub dist_below: f64,
    /// min |E_{N+1}(k) − E_F| (+∞ when band N+1 is not sampled).
    pub dist_above: f64,
}

impl TetraMesh {
    /// Solve the fiber problem at every grid point and extract band N
    /// (1-based): energies plus analytic gradients.
    pub fn build(
        pot: &FourierPotential,
        basis: &PlaneWaveBasis,
        grid: BZGrid,
        band: usize,
    ) -> Result<Self> {
        assert!(band >= 1 && band <= basis.dim());
        let data: Vec<(f64, [f64; 3])> = (0..grid.len())
            .into_par_iter()
            .map(|ik| {
                let sol = fiber::solve(pot, basis, grid.point(ik))?;
                Ok((sol.energies[band - 1], sol.velocity(band - 1)))
            })
            .collect::<Result<_>>()?;
        let (energy, gradient) = data.into_iter().unzip();
        Ok(Self {
            grid,
            band,
            energy,
            gradient,
        })
    }

    /// Assemble from precomputed per-vertex values (used by the zero-T metal
    /// path, which computes energies and gradients in its own grid sweep).
    pub fn from_values(
        grid: BZGrid,
        band: usize,
        energy: Vec<f64>,
        gradient: Vec<[f64; 3]>,
    ) -> Self {
        assert_eq!(energy.len(), grid.len());
        assert_eq!(gradient.len(), grid.len());
        Self {
            grid,
            band,
            energy,
            gradient,
        }
    }

    /// Total volume of the tetrahedral decomposition, computed geometrically.
    /// Must equal |Ω*| = (2π)³ to 1e−10 (tiling invariant).
    pub fn tiling_volume(&self) -> f64 {
        let n = self.grid.n_per_axis;
        let h = 2.0 * std::f64::consts::PI / n as f64;
        let mut vol = 0.0;
        for tet in &KUHN_TETS {
            let p: Vec<[f64; 3]> = tet
                .iter()
                .map(|b| [b[0] as f64 * h, b[1] as f64 * h, b[2] as f64 * h])
                .collect();
            vol += tet_volume(&p);
        }
        vol * (n * n * n) as f64
    }
}

fn tet_volume(p: &[[f64; 3]]) -> f64 {
    let d = |a: [f64; 3], b: [f64; 3]| [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let (u, v, w) = (d(p[0], p[1]), d(p[0], p[2]), d(p[0], p[3]));
    let det = u[0] * (v[1] * w[2] - v[2] * w[1]) - u[1] * (v[0] * w[2] - v[2] * w[0])
        + u[2] * (v[0] * w[1] - v[1] * w[0]);
    det.abs() / 6.0
}

/// One isolevel crossing polygon inside a tetrahedron: interpolated vertex
/// positions plus interpolated gradient and F values at those positions.
struct Crossing {
    points: Vec<[f64; 3]>,
    grads: Vec<[f64; 3]>,
    f_vals: Vec<f64>,
}

fn crossing_polygon(
    pos: &[[f64; 3]; 4],
    e: &[f64; 4],
    grad: &[[f64; 3]; 4],
    f: &[f64; 4],
    level: f64,
) -> Option<Crossing> {
    let s: Vec<f64> = e.iter().map(|&v| v - level).collect();
    let neg: Vec<usize> = (0..4).filter(|&i| s[i] < 0.0).collect();
    if neg.is_empty() || neg.len() == 4 {
        return None;
    }
    // Collect sign-change edges, ordered so the polygon is a simple cycle.
    let edges: Vec<(usize, usize)> = match neg.len() {
        1 => {
            let a = neg[0];
            (0..4).filter(|&i| i != a).map(|i| (a, i)).collect()
        }
        3 => {
            let a = (0..4).find(|i| !neg.contains(i)).unwrap();
            (0..4).filter(|&i| i != a).map(|i| (a, i)).collect()
        }
        2 => {
            // quad over edges (n0,p0), (n0,p1), (n1,p1), (n1,p0) — cyclic
            let (n0, n1) = (neg[0], neg[1]);
            let pos_idx: Vec<usize> = (0..4).filter(|i| !neg.contains(i)).collect();
            let (p0, p1) = (pos_idx[0], pos_idx[1]);
            vec![(n0, p0), (n0, p1), (n1, p1), (n1, p0)]
        }
        _ => unreachable!(),
    };
    let mut points = Vec::with_capacity(edges.len());
    let mut grads = Vec::with_capacity(edges.len());
    let mut f_vals = Vec::with_capacity(edges.len());
    for &(i, j) in &edges {
        let t = s[i] / (s[i] - s[j]);
        points.push(std::array::from_fn(|d| {
            pos[i][d] + t * (pos[j][d] - pos[i][d])
        }));
        grads.push(std::array::from_fn(|d| {
            grad[i][d] + t * (grad[j][d] - grad[i][d])
        }));
        f_vals.push(f[i] + t * (f[j] - f[i]));
    }
    Some(Crossing {
        points,
        grads,
        f_vals,
    })
}

fn polygon_area(points: &[[f64; 3]]) -> f64 {
    // planar polygon: fan triangulation from the first vertex
    let mut area = 0.0;
    for i in 1..points.len() - 1 {
        let u: [f64; 3] = std::array::from_fn(|d| points[i][d] - points[0][d]);
        let v: [f64; 3] = std::array::from_fn(|d| points[i + 1][d] - points[0][d]);
        let c = [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ];
        area += 0.5 * (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
    }
    area
}

/// ∫_{S_F} dσ/|∇E_N|·F with full crossing statistics. `f` holds the integrand
/// sampled at the mesh vertices (same indexing as the grid).
pub fn surface_integral_report(mesh: &TetraMesh, e_f: f64, f: &[f64]) -> Result<SurfaceIntegral> {
    assert_eq!(f.len(), mesh.grid.len());
    let n = mesh.grid.n_per_axis;
    let h = 2.0 * std::f64::consts::PI / n as f64;
    let grid = mesh.grid;

    // one parallel task per cube, deterministic reduction over the collected vec
    let per_cube: Vec<(f64, u32, u32)> = (0..grid.len())
        .into_par_iter()
        .map(|cube| {
            let i3 = cube % n;
            let i2 = (cube / n) % n;
            let i1 = cube / (n * n);
            // corner grid indices (periodic) and local positions
            let mut idx = [0usize; 8];
            let mut pos = [[0.0f64; 3]; 8];
            for b in 0..8 {
                let (b1, b2, b3) = (b >> 2 & 1, b >> 1 & 1, b & 1);
                idx[b] = grid.index(i1 + b1, i2 + b2, i3 + b3);
                pos[b] = [b1 as f64 * h, b2 as f64 * h, b3 as f64 * h];
            }
            let corner = |b: &[usize; 3]| (b[0] << 2) | (b[1] << 1) | b[2];
            let mut sum = 0.0;
            let mut crossing = 0u32;
            let mut degenerate = 0u32;
            for tet in &KUHN_TETS {
                let c: [usize; 4] = std::array::from_fn(|v| corner(&tet[v]));
                let p: [[f64; 3]; 4] = std::array::from_fn(|v| pos[c[v]]);
                let e: [f64; 4] = std::array::from_fn(|v| mesh.energy[idx[c[v]]]);
                let g: [[f64; 3]; 4] = std::array::from_fn(|v| mesh.gradient[idx[c[v]]]);
                let fv: [f64; 4] = std::array::from_fn(|v| f[idx[c[v]]]);
                let Some(cross) = crossing_polygon(&p, &e, &g, &fv, e_f) else {
                    continue;
                };
                crossing += 1;
                let m = cross.points.len() as f64;
                let gmean: [f64; 3] = std::array::from_fn(|d| {
                    cross.grads.iter().map(|g| g[d]).sum::<f64>() / m
                });
                let gnorm = (gmean[0] * gmean[0] + gmean[1] * gmean[1] + gmean[2] * gmean[2])
                    .sqrt();
                if gnorm <= 1e-6 {
                    degenerate += 1;
                    continue;
                }
                let fmean = cross.f_vals.iter().sum::<f64>() / m;
                sum += polygon_area(&cross.points) / gnorm * fmean;
            }
            (sum, crossing, degenerate)
        })
        .collect();

    let mut out = SurfaceIntegral {
        value: 0.0,
        crossing_tets: 0,
        degenerate_tets: 0,
    };
    for (s, c, d) in per_cube {
        out.value += s;
        out.crossing_tets += c as usize;
        out.degenerate_tets += d as usize;
    }
    if out.crossing_tets > 0
        && out.degenerate_tets as f64 > 0.01 * out.crossing_tets as f64
    {
        return Err(Error::SurfaceCheck(format!(
            "degenerate gradient on {} of {} crossing tetrahedra (> 1%)",
            out.degenerate_tets, out.crossing_tets
        )));
    }
    Ok(out)
}

/// ∫_{S_F} dσ/|∇E_N|·F (value only).
pub fn surface_integral(mesh: &TetraMesh, e_f: f64, f: &[f64]) -> Result<f64> {
    Ok(surface_integral_report(mesh, e_f, f)?.value)
}

/// Distances from E_F to the sampled spectra of bands N−1 and N+1 (1-based N):
/// the numerical check of the Fermi-surface isolation hypothesis.
pub fn isolation_check(gd: &GridData, band: usize, e_f: f64) -> IsolationReport {
    assert!(band >= 1 && band <= gd.n_bands);
    let mut below = f64::INFINITY;
    let mut above = f64::INFINITY;
    for ik in 0..gd.grid.len() {
        for j in 0..band - 1 {
            below = below.min((gd.energy(ik, j) - e_f).abs());
        }
        if band < gd.n_bands {
            above = above.min((gd.energy(ik, band) - e_f).abs());
        }
    }
    IsolationReport {
        dist_below: below,
        dist_above: above,
    }
}

/// Dump the extracted isosurface as Wavefront OBJ (triangulated crossing
/// polygons, unwrapped cube-local coordinates) for external visualization.
pub fn dump_obj(mesh: &TetraMesh, e_f: f64, path: &std::path::Path) -> Result<()> {
    let n = mesh.grid.n_per_axis;
    let h = 2.0 * std::f64::consts::PI / n as f64;
    let mut verts: Vec<[f64; 3]> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    for cube in 0..mesh.grid.len() {
        let i3 = cube % n;
        let i2 = (cube / n) % n;
        let i1 = cube / (n * n);
        let base = [
            mesh.grid.axis_coord(i1),
            mesh.grid.axis_coord(i2),
            mesh.grid.axis_coord(i3),
        ];
        let mut idx = [0usize; 8];
        let mut pos = [[0.0f64; 3]; 8];
        for b in 0..8 {
            let (b1, b2, b3) = (b >> 2 & 1, b >> 1 & 1, b & 1);
            idx[b] = mesh.grid.index(i1 + b1, i2 + b2, i3 + b3);
            pos[b] = [
                base[0] + b1 as f64 * h,
                base[1] + b2 as f64 * h,
                base[2] + b3 as f64 * h,
            ];
        }
        let corner = |b: &[usize; 3]| (b[0] << 2) | (b[1] << 1) | b[2];
        for tet in &KUHN_TETS {
            let c: [usize; 4] = std::array::from_fn(|v| corner(&tet[v]));
            let p: [[f64; 3]; 4] = std::array::from_fn(|v| pos[c[v]]);
            let e: [f64; 4] = std::array::from_fn(|v| mesh.energy[idx[c[v]]]);
            let g: [[f64; 3]; 4] = std::array::from_fn(|v| mesh.gradient[idx[c[v]]]);
            let fv = [0.0; 4];
            let Some(cross) = crossing_polygon(&p, &e, &g, &fv, e_f) else {
                continue;
            };
            let first = verts.len() + 1; // OBJ is 1-based
            verts.extend_from_slice(&cross.points);
            for i in 1..cross.points.len() - 1 {
                faces.push([first, first + i, first + i + 1]);
            }
        }
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for v in &verts {
        writeln!(out, "v {} {} {}", v[0], v[1], v[2])?;
    }
    for f in &faces {
        writeln!(out, "f {} {} {}", f[0], f[1], f[2])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potential::FourierPotential;

    const TAU: f64 = 2.0 * std::f64::consts::PI;

    fn free_mesh(n: usize) -> TetraMesh {
        // analytic lowest free band on (−π,π]³: E = |k|²/2, ∇E = k
        let grid = BZGrid::new(n, true);
        let mut energy = Vec::with_capacity(grid.len());
        let mut gradient = Vec::with_capacity(grid.len());
        for ik in 0..grid.len() {
            let k = grid.point(ik);
            energy.push(0.5 * (k[0] * k[0] + k[1] * k[1] + k[2] * k[2]));
            gradient.push(k);
        }
        TetraMesh::from_values(grid, 1, energy, gradient)
    }

    #[test]
    fn tetrahedra_tile_the_zone() {
        let mesh = free_mesh(6);
        assert!((mesh.tiling_volume() - TAU.powi(3)).abs() <= 1e-10 * TAU.powi(3));
    }

    #[test]
    fn sphere_area_over_gradient() {
        // E_F = k_F²/2 ⇒ ∫dσ/|∇E| = 4πk_F²/k_F = 4πk_F
        let mesh = free_mesh(24);
        let k_f = 2.0;
        let ones = vec![1.0; mesh.grid.len()];
        let val = surface_integral(&mesh, 0.5 * k_f * k_f, &ones).unwrap();
        let expect = 4.0 * std::f64::consts::PI * k_f;
        assert!(
            (val - expect).abs() <= 0.02 * expect,
            "got {val}, want {expect}"
        );
    }

    #[test]
    fn built_mesh_matches_analytic_for_free_potential() {
        let pot = FourierPotential::free();
        let basis = crate::fiber::PlaneWaveBasis::new(1);
        let grid = BZGrid::new(8, true);
        let mesh = TetraMesh::build(&pot, &basis, grid, 1).unwrap();
        let reference = free_mesh(8);
        for ik in 0..grid.len() {
            assert!((mesh.energy[ik] - reference.energy[ik]).abs() <= 1e-12);
            for d in 0..3 {
                assert!((mesh.gradient[ik][d] - reference.gradient[ik][d]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn refinement_improves_the_sphere() {
        let k_f = 2.0;
        let level = 0.5 * k_f * k_f;
        let expect = 4.0 * std::f64::consts::PI * k_f;
        let errs: Vec<f64> = [16usize, 24, 32]
            .iter()
            .map(|&n| {
                let mesh = free_mesh(n);
                let ones = vec![1.0; mesh.grid.len()];
                (surface_integral(&mesh, level, &ones).unwrap() - expect).abs()
            })
            .collect();
        assert!(errs[0] >= errs[1] && errs[1] >= errs[2], "errors {errs:?}");
    }

    #[test]
    fn linear_in_the_integrand() {
        let mesh = free_mesh(12);
        let level = 1.3;
        let n = mesh.grid.len();
        let f: Vec<f64> = (0..n).map(|i| (i as f64 * 0.1).sin()).collect();
        let g: Vec<f64> = (0..n).map(|i| (i as f64 * 0.07).cos()).collect();
        let (a, b) = (1.7, -0.4);
        let combo: Vec<f64> = (0..n).map(|i| a * f[i] + b * g[i]).collect();
        let lhs = surface_integral(&mesh, level, &combo).unwrap();
        let rhs = a * surface_integral(&mesh, level, &f).unwrap()
            + b * surface_integral(&mesh, level, &g).unwrap();
        assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn empty_isosurface_is_zero() {
        let mesh = free_mesh(8);
        let ones = vec![1.0; mesh.grid.len()];
        assert_eq!(surface_integral(&mesh, -1.0, &ones).unwrap(), 0.0);
        assert_eq!(surface_integral(&mesh, 100.0, &ones).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_gradients_are_rejected() {
        let mut mesh = free_mesh(8);
        for g in &mut mesh.gradient {
            *g = [0.0; 3];
        }
        let ones = vec![1.0; mesh.grid.len()];
        let err = surface_integral(&mesh, 1.0, &ones).unwrap_err();
        assert!(matches!(err, Error::SurfaceCheck(_)));
    }

    #[test]
    fn isolation_report_for_free_bands() {
        let pot = FourierPotential::free();
        let basis = crate::fiber::PlaneWaveBasis::new(1);
        let gd = GridData::compute(&pot, &basis, BZGrid::new(8, true)).unwrap();
        let rep = isolation_check(&gd, 1, 0.5);
        assert!(rep.dist_below.is_infinite());
        assert!(rep.dist_above > 0.0 && rep.dist_above.is_finite());
    }

    #[test]
    fn obj_dump_writes_triangles() {
        let mesh = free_mesh(10);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sphere.obj");
        dump_obj(&mesh, 2.0, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().any(|l| l.starts_with("v ")));
        assert!(text.lines().any(|l| l.starts_with("f ")));
    }
}
