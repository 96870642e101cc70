//! Command implementations. Each command returns a JSON result value plus an
//! optional CSV table; the binary wraps them in the run record.

use serde_json::{json, Value};

use orbmag_core::bz::{GridData, ThermoState};
use orbmag_core::fermi;
use orbmag_core::{asym, cache, chi, fiber};

use crate::config::{ConfigError, DensitySpec, RunConfig};

/// Result of one command: a JSON value and an optional CSV table.
pub struct CommandOutput {
    pub result: Value,
    pub csv: Option<String>,
}

/// Execution context: the validated config plus the resolved cache directory
/// (`None` disables the eigendata cache).
pub struct Ctx {
    pub cfg: RunConfig,
    pub cache_dir: Option<std::path::PathBuf>,
}

impl Ctx {
    fn grid_data(&self) -> Result<GridData, ConfigError> {
        let pot = self.cfg.build_potential()?;
        let basis = self.cfg.basis();
        let grid = self.cfg.bz_grid();
        let data = cache::compute_cached(&pot, &basis, grid, self.cache_dir.as_deref())?;
        Ok(data.grid_data(grid))
    }
}

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

/// Band energies along the Γ→X→M→R→Γ path (CSV) plus per-band extrema over
/// the configured grid (JSON).
pub fn bands(ctx: &Ctx) -> Result<CommandOutput, ConfigError> {
    use std::f64::consts::PI;
    let pot = ctx.cfg.build_potential()?;
    let basis = ctx.cfg.basis();
    let j = ctx.cfg.j_cutoff_or_default();

    let corners = [
        [0.0, 0.0, 0.0],
        [PI, 0.0, 0.0],
        [PI, PI, 0.0],
        [PI, PI, PI],
        [0.0, 0.0, 0.0],
    ];
    const PER_SEGMENT: usize = 25;
    let mut csv = String::from("s,k1,k2,k3");
    for b in 1..=j {
        csv.push_str(&format!(",E{b}"));
    }
    csv.push('\n');
    let mut s = 0.0;
    let mut prev: Option<[f64; 3]> = None;
    let mut n_points = 0usize;
    for seg in 0..corners.len() - 1 {
        let a = corners[seg];
        let b = corners[seg + 1];
        let last = seg == corners.len() - 2;
        let steps = if last { PER_SEGMENT + 1 } else { PER_SEGMENT };
        for i in 0..steps {
            let t = i as f64 / PER_SEGMENT as f64;
            let k = [
                a[0] + t * (b[0] - a[0]),
                a[1] + t * (b[1] - a[1]),
                a[2] + t * (b[2] - a[2]),
            ];
            if let Some(p) = prev {
                s += ((k[0] - p[0]).powi(2) + (k[1] - p[1]).powi(2) + (k[2] - p[2]).powi(2))
                    .sqrt();
            }
            prev = Some(k);
            let energies = fiber::solve_energies(&pot, &basis, k)?;
            csv.push_str(&format!("{},{},{},{}", fmt(s), fmt(k[0]), fmt(k[1]), fmt(k[2])));
            for e in energies.iter().take(j) {
                csv.push(',');
                csv.push_str(&fmt(*e));
            }
            csv.push('\n');
            n_points += 1;
        }
    }

    let gd = ctx.grid_data()?;
    let extrema: Vec<Value> = gd
        .band_extrema()
        .iter()
        .take(j)
        .map(|&(lo, hi)| json!({ "min": lo, "max": hi }))
        .collect();
    Ok(CommandOutput {
        result: json!({
            "j_cutoff": j,
            "path": "G-X-M-R-G",
            "path_points": n_points,
            "grid_band_extrema": extrema,
        }),
        csv: Some(csv),
    })
}

/// Integrated density of states over an energy ladder (CSV `E,ids`).
pub fn ids(ctx: &Ctx) -> Result<CommandOutput, ConfigError> {
    let gd = ctx.grid_data()?;
    let (lo, hi, count) = match &ctx.cfg.ids_energies {
        Some(l) => (l.min, l.max, l.count),
        None => {
            let sorted = gd.sorted_energies();
            (gd.e0(), *sorted.last().unwrap(), 50)
        }
    };
    let mut csv = String::from("E,ids\n");
    for i in 0..count {
        let e = lo + (hi - lo) * i as f64 / (count - 1) as f64;
        csv.push_str(&format!("{},{}\n", fmt(e), fmt(gd.ids(e))));
    }
    Ok(CommandOutput {
        result: json!({
            "e_min": lo,
            "e_max": hi,
            "count": count,
            "e0": gd.e0(),
        }),
        csv: Some(csv),
    })
}

/// Chemical potential at (β, ρ₀) by monotone bisection of the density.
pub fn mu(ctx: &Ctx) -> Result<CommandOutput, ConfigError> {
    let beta = ctx.cfg.beta_required()?;
    let rho0 = ctx.cfg.rho0_required()?;
    let gd = ctx.grid_data()?;
    let mu = fermi::solve_mu_on(&gd, beta, rho0)?;
    let residual = gd.density(ThermoState::new(beta, mu)) - rho0;
    Ok(CommandOutput {
        result: json!({ "beta": beta, "rho0": rho0, "mu": mu, "density_residual": residual }),
        csv: None,
    })
}

/// Metal / semiconductor classification at fixed density.
pub fn classify(ctx: &Ctx) -> Result<CommandOutput, ConfigError> {
    let rho0 = ctx.cfg.rho0_required()?;
    let gd = ctx.grid_data()?;
    let cls = fermi::classify_on(&gd, rho0)?;
    Ok(CommandOutput {
        result: serde_json::to_value(&cls).expect("classification serializes"),
        csv: None,
    })
}

/// Finite-temperature susceptibility χ(β, ρ₀) or χ(β, μ).
pub fn chi(ctx: &Ctx) -> Result<CommandOutput, ConfigError> {
    let beta = ctx.cfg.beta_required()?;
    let pot = ctx.cfg.build_potential()?;
    let basis = ctx.cfg.basis();
    let j = ctx.cfg.j_cutoff_or_default();
    let engine = chi::ChiEngine::build(&pot, &basis, ctx.cfg.bz_grid(), j)?;
    let result = match ctx.cfg.density_or_mu()? {
        DensitySpec::Rho0(rho0) => {
            let r = engine.chi(beta, rho0)?;
            let mut v = serde_json::to_value(&r).expect("chi result serializes");
            v["rho0"] = json!(rho0);
            v
        }
        DensitySpec::Mu(mu) => {
            let value = engine.chi_at(ThermoState::new(beta, mu));
            json!({
                "value": value,
                "beta": beta,
                "mu": mu,
                "j_cutoff": j,
                "grid_n": ctx.cfg.grid.n_per_axis,
                "cutoff_n": ctx.cfg.cutoff_n,
            })
        }
    };
    Ok(CommandOutput { result, csv: None })
}

/// Zero-temperature susceptibility, auto-dispatched by the Fermi-level
/// classification: χ_SC for a gapped system, χ_M (surface formula) for a
/// metal.
pub fn chi0(ctx: &Ctx) -> Result<CommandOutput, ConfigError> {
    let rho0 = ctx.cfg.rho0_required()?;
    let pot = ctx.cfg.build_potential()?;
    let basis = ctx.cfg.basis();
    let grid = ctx.cfg.bz_grid();
    let j = ctx.cfg.j_cutoff_or_default();
    let gd = ctx.grid_data()?;
    let cls = fermi::classify_on(&gd, rho0)?;
    let (variant, r) = match cls.variant {
        fermi::FermiVariant::Metal { .. } => {
            ("M", chi::chi_zero_t_metal(&pot, &basis, grid, rho0, j)?)
        }
        fermi::FermiVariant::Sc { .. } => ("SC", chi::chi_zero_t_sc(&pot, &basis, grid, rho0, j)?),
    };
    let mut v = serde_json::to_value(&r).expect("chi result serializes");
    v["variant"] = json!(variant);
    v["rho0"] = json!(rho0);
    Ok(CommandOutput { result: v, csv: None })
}

/// Landau-Peierls density sweep: χ_M over a density ladder plus the
/// Richardson-extrapolated χ/k_F slope.
pub fn sweep(ctx: &Ctx) -> Result<CommandOutput, ConfigError> {
    let pot = ctx.cfg.build_potential()?;
    let basis = ctx.cfg.basis();
    let ladder = ctx
        .cfg
        .rho_ladder
        .clone()
        .unwrap_or_else(|| vec![1e-3, 5e-4, 2e-4]);
    if ladder.len() < 2 {
        return Err(ConfigError::Invalid(
            "rho_ladder needs at least two densities".into(),
        ));
    }
    let j = ctx.cfg.j_cutoff_or_default();
    let report = asym::landau_peierls_check(&pot, &basis, ctx.cfg.bz_grid(), &ladder, j)?;
    let csv = report.to_csv();
    Ok(CommandOutput {
        result: serde_json::to_value(&report).expect("sweep report serializes"),
        csv: Some(csv),
    })
}
