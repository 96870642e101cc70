//! Binary eigendata cache.
//!
//! Diagonalizing the fiber Hamiltonian over a dense k-grid dominates the cost
//! of every thermodynamic command, and the result depends only on (potential,
//! cutoff, grid). This module persists per-k band energies and band-velocity
//! diagonals π̂_{j,j}(α;k) to a versioned little-endian binary file keyed by
//! the potential content hash and the discretization parameters, so repeated
//! CLI invocations skip the eigensolver entirely.
//!
//! The full eigenvectors and off-diagonal π̂ blocks are deliberately not
//! cached: they are only needed by the susceptibility assembly, whose per-k
//! post-processing costs as much as re-deriving them, and they would make the
//! files two orders of magnitude larger.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::bz::{BZGrid, GridData};
use crate::error::{Error, Result};
use crate::fiber::{self, PlaneWaveBasis};
use crate::potential::FourierPotential;

const MAGIC: &[u8; 4] = b"OEC1";
const VERSION: u32 = 1;

/// Eigendata of one (potential, basis, grid) triple: all band energies and
/// the three band-velocity components per (k, band).
#[derive(Debug, Clone, PartialEq)]
pub struct CachedGrid {
    pub n_bands: usize,
    /// Row-major `[ik][band]`.
    pub energies: Vec<f64>,
    /// Row-major `[ik][band][axis]`.
    pub velocities: Vec<f64>,
}

impl CachedGrid {
    pub fn energy(&self, ik: usize, j: usize) -> f64 {
        self.energies[ik * self.n_bands + j]
    }

    /// Band velocity ∂E_j/∂k (0-based band index).
    pub fn velocity(&self, ik: usize, j: usize) -> [f64; 3] {
        let base = (ik * self.n_bands + j) * 3;
        [
            self.velocities[base],
            self.velocities[base + 1],
            self.velocities[base + 2],
        ]
    }

    /// View as grid data (clones the energy table).
    pub fn grid_data(&self, grid: BZGrid) -> GridData {
        GridData::from_energies(grid, self.n_bands, self.energies.clone())
    }
}

/// Deterministic cache key: potential content hash + discretization.
pub fn cache_key(pot: &FourierPotential, basis: &PlaneWaveBasis, grid: BZGrid) -> String {
    let mut h = Sha256::new();
    h.update(MAGIC);
    h.update(VERSION.to_le_bytes());
    h.update(pot.content_hash());
    h.update(basis.cutoff_n().to_le_bytes());
    h.update((grid.n_per_axis as u32).to_le_bytes());
    h.update([grid.shifted as u8]);
    let digest = h.finalize();
    digest.iter().take(12).map(|b| format!("{b:02x}")).collect()
}

/// Path of the cache file for this triple inside `dir`.
pub fn cache_path(
    dir: &Path,
    pot: &FourierPotential,
    basis: &PlaneWaveBasis,
    grid: BZGrid,
) -> PathBuf {
    dir.join(format!("eig-{}.bin", cache_key(pot, basis, grid)))
}

fn header_bytes(pot: &FourierPotential, basis: &PlaneWaveBasis, grid: BZGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 + 32 + 4 + 4 + 1 + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&pot.content_hash());
    out.extend_from_slice(&basis.cutoff_n().to_le_bytes());
    out.extend_from_slice(&(grid.n_per_axis as u32).to_le_bytes());
    out.push(grid.shifted as u8);
    out.extend_from_slice(&(basis.dim() as u32).to_le_bytes());
    out
}

/// Write eigendata atomically (temp file + rename) under `dir`.
pub fn store(
    dir: &Path,
    pot: &FourierPotential,
    basis: &PlaneWaveBasis,
    grid: BZGrid,
    data: &CachedGrid,
) -> Result<PathBuf> {
    if data.n_bands != basis.dim()
        || data.energies.len() != grid.len() * data.n_bands
        || data.velocities.len() != grid.len() * data.n_bands * 3
    {
        return Err(Error::Cache(format!(
            "eigendata shape mismatch: {} bands, {} energies, {} velocity components",
            data.n_bands,
            data.energies.len(),
            data.velocities.len()
        )));
    }
    fs::create_dir_all(dir)?;
    let path = cache_path(dir, pot, basis, grid);
    let tmp = path.with_extension("bin.tmp");
    {
        let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
        f.write_all(&header_bytes(pot, basis, grid))?;
        for v in &data.energies {
            f.write_all(&v.to_le_bytes())?;
        }
        for v in &data.velocities {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()?;
    }
    fs::rename(&tmp, &path)?;
    Ok(path)
}

/// Load eigendata if a file for this triple exists. `Ok(None)` when absent;
/// `Err(Cache)` when present but malformed (wrong magic, version, header
/// fields, or length).
pub fn load(
    dir: &Path,
    pot: &FourierPotential,
    basis: &PlaneWaveBasis,
    grid: BZGrid,
) -> Result<Option<CachedGrid>> {
    let path = cache_path(dir, pot, basis, grid);
    let mut f = match fs::File::open(&path) {
        Ok(f) => std::io::BufReader::new(f),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let expect = header_bytes(pot, basis, grid);
    let mut got = vec![0u8; expect.len()];
    f.read_exact(&mut got)
        .map_err(|_| Error::Cache(format!("{}: truncated header", path.display())))?;
    if got != expect {
        return Err(Error::Cache(format!(
            "{}: header does not match the requested (potential, cutoff, grid)",
            path.display()
        )));
    }
    let n_bands = basis.dim();
    let n_e = grid.len() * n_bands;
    let mut read_f64s = |count: usize| -> Result<Vec<f64>> {
        let mut buf = vec![0u8; count * 8];
        f.read_exact(&mut buf)
            .map_err(|_| Error::Cache(format!("{}: truncated payload", path.display())))?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    let energies = read_f64s(n_e)?;
    let velocities = read_f64s(n_e * 3)?;
    Ok(Some(CachedGrid {
        n_bands,
        energies,
        velocities,
    }))
}

/// Compute eigendata for the whole grid (parallel over k, deterministic
/// ordering), without touching any cache.
pub fn compute(
    pot: &FourierPotential,
    basis: &PlaneWaveBasis,
    grid: BZGrid,
) -> Result<CachedGrid> {
    let m = basis.dim();
    let per_k: Vec<(Vec<f64>, Vec<f64>)> = (0..grid.len())
        .into_par_iter()
        .map(|ik| {
            let sol = fiber::solve(pot, basis, grid.point(ik))?;
            let mut vel = Vec::with_capacity(m * 3);
            for j in 0..m {
                vel.extend_from_slice(&sol.velocity(j));
            }
            Ok((sol.energies, vel))
        })
        .collect::<Result<_>>()?;
    let mut energies = Vec::with_capacity(grid.len() * m);
    let mut velocities = Vec::with_capacity(grid.len() * m * 3);
    for (e, v) in per_k {
        energies.extend_from_slice(&e);
        velocities.extend_from_slice(&v);
    }
    Ok(CachedGrid {
        n_bands: m,
        energies,
        velocities,
    })
}

/// Cache-through computation: load when a valid file exists, otherwise
/// compute and (if `dir` is given) persist. A malformed existing file is an
/// error rather than silently recomputed, so corruption never goes unnoticed.
pub fn compute_cached(
    pot: &FourierPotential,
    basis: &PlaneWaveBasis,
    grid: BZGrid,
    dir: Option<&Path>,
) -> Result<CachedGrid> {
    if let Some(dir) = dir {
        if let Some(hit) = load(dir, pot, basis, grid)? {
            return Ok(hit);
        }
    }
    let data = compute(pot, basis, grid)?;
    if let Some(dir) = dir {
        store(dir, pot, basis, grid, &data)?;
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potential::named_potential;

    #[test]
    fn roundtrip_is_bit_exact() {
        let pot = named_potential("cosine3d", 1.5).unwrap();
        let basis = PlaneWaveBasis::new(1);
        let grid = BZGrid::new(3, true);
        let dir = tempfile::tempdir().unwrap();
        let cold = compute_cached(&pot, &basis, grid, Some(dir.path())).unwrap();
        let warm = compute_cached(&pot, &basis, grid, Some(dir.path())).unwrap();
        assert_eq!(cold, warm);
        // warm path really came from disk
        assert!(cache_path(dir.path(), &pot, &basis, grid).exists());
    }

    #[test]
    fn distinct_parameters_get_distinct_files() {
        let basis = PlaneWaveBasis::new(1);
        let grid = BZGrid::new(3, true);
        let a = cache_key(&named_potential("cosine3d", 1.0).unwrap(), &basis, grid);
        let b = cache_key(&named_potential("cosine3d", 2.0).unwrap(), &basis, grid);
        let c = cache_key(
            &named_potential("cosine3d", 1.0).unwrap(),
            &basis,
            BZGrid::new(4, true),
        );
        let d = cache_key(
            &named_potential("cosine3d", 1.0).unwrap(),
            &PlaneWaveBasis::new(2),
            grid,
        );
        assert!(a != b && a != c && a != d && b != c);
    }

    #[test]
    fn corrupted_file_is_an_error_not_a_silent_recompute() {
        let pot = FourierPotential::free();
        let basis = PlaneWaveBasis::new(1);
        let grid = BZGrid::new(2, true);
        let dir = tempfile::tempdir().unwrap();
        compute_cached(&pot, &basis, grid, Some(dir.path())).unwrap();
        let path = cache_path(dir.path(), &pot, &basis, grid);
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load(dir.path(), &pot, &basis, grid), Err(Error::Cache(_))));
    }

    #[test]
    fn cached_velocities_match_the_fiber_solver() {
        let pot = named_potential("cosine3d", 1.0).unwrap();
        let basis = PlaneWaveBasis::new(1);
        let grid = BZGrid::new(2, false);
        let data = compute(&pot, &basis, grid).unwrap();
        let ik = 3;
        let sol = fiber::solve(&pot, &basis, grid.point(ik)).unwrap();
        for j in 0..basis.dim() {
            let v = data.velocity(ik, j);
            let s = sol.velocity(j);
            for a in 0..3 {
                assert!((v[a] - s[a]).abs() <= 1e-14);
            }
        }
        assert!((data.energy(ik, 0) - sol.energies[0]).abs() <= 1e-14);
        // grid_data view agrees
        let gd = data.grid_data(grid);
        assert_eq!(gd.energy(ik, 0), data.energy(ik, 0));
    }
}
