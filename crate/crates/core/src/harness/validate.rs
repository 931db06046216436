//! Dry run: spectral quantities and planned step sizes, no optimization.

use std::fmt;

use crate::engine::StepSizePlan;
use crate::graphs::expected_mixing_rate;

use super::config::ExperimentSpec;
use super::run::Experiment;
use super::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CellReport {
    pub p: f64,
    pub local_steps: usize,
    pub lambda_p: f64,
    /// `lambda_p > 0`.
    pub contraction: bool,
    pub plan: Option<StepSizePlan>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub topology: String,
    pub n: usize,
    pub edges: usize,
    pub components: usize,
    /// Largest singular value of `W - J`.
    pub lambda: f64,
    pub lambda_w: f64,
    pub smoothness: Option<f64>,
    pub sigma: f64,
    pub f_tilde: f64,
    pub cells: Vec<CellReport>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    /// Some grid cell has no positive expected mixing rate.
    pub fn has_violations(&self) -> bool {
        self.cells.iter().any(|c| !c.contraction)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "topology: {} n={} edges={} components={}",
            self.topology, self.n, self.edges, self.components
        )?;
        writeln!(f, "lambda (largest singular value of W - J): {:.10}", self.lambda)?;
        writeln!(f, "lambda_w: {:.10}", self.lambda_w)?;
        match self.smoothness {
            Some(l) => writeln!(f, "smoothness L: {l:.6}")?,
            None => writeln!(f, "smoothness L: unknown (set run.smoothness to plan step sizes)")?,
        }
        writeln!(f, "sigma: {:.6e}", self.sigma)?;
        writeln!(f, "f(x0) - f*: {:.6e}", self.f_tilde)?;
        writeln!(
            f,
            "{:>10} {:>5} {:>12} {:>12} {:>12} {:>12} {:>12}",
            "p", "T_o", "lambda_p", "eta_c", "eta_l_max", "eta_l", "K_min"
        )?;
        for c in &self.cells {
            write!(f, "{:>10.6} {:>5} {:>12.6e}", c.p, c.local_steps, c.lambda_p)?;
            match &c.plan {
                Some(pl) => writeln!(
                    f,
                    " {:>12.6e} {:>12.6e} {:>12.6e} {:>12.6e}",
                    pl.eta_c, pl.eta_l_max, pl.eta_l, pl.k_min
                )?,
                None => writeln!(f, " {:>12} {:>12} {:>12} {:>12}", "-", "-", "-", "-")?,
            }
        }
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        Ok(())
    }
}

/// Builds the topology and data, then reports mixing rates and the planned
/// step sizes for every grid cell (using the first seed's data).
pub fn validate(spec: &ExperimentSpec) -> Result<ValidationReport> {
    let exp = Experiment::new(spec.clone())?;
    let seed = spec.grid.seeds[0];
    let wl = exp.workload(seed)?;
    let x0 = wl.oracle.initial_point(seed);
    let mixing = exp.mixing();
    let graph = exp.graph();
    let smoothness = exp.smoothness(&wl);
    let sigma = exp.sigma(&wl, x0.view())?;
    let f_tilde = exp.f_tilde(&wl, x0.view())?;
    let mut warnings = Vec::new();
    if !graph.is_connected() {
        warnings.push(format!("graph has {} components, lambda_w = 0", graph.component_count()));
    }
    let mut cells = Vec::new();
    for (p, t) in spec.cells() {
        let lambda_p = expected_mixing_rate(mixing.lambda_w(), p)?;
        let contraction = lambda_p > 0.0;
        let plan = if !contraction {
            warnings.push(format!(
                "cell p = {p}, T_o = {t}: expected mixing rate lambda_p = 0, mixing assumption violated (disconnected graph without server access)"
            ));
            None
        } else if smoothness.is_some() {
            match exp.plan(&wl, p, t, x0.view()) {
                Ok(plan) => {
                    if plan.eta_c > 1.0 {
                        warnings.push(format!("cell p = {p}, T_o = {t}: eta_c = {:.6} exceeds 1", plan.eta_c));
                    }
                    if plan.sigma > 0.0 && (spec.run.rounds as f64) < plan.k_min {
                        warnings.push(format!(
                            "cell p = {p}, T_o = {t}: rounds = {} is below K_min = {:.3e}",
                            spec.run.rounds, plan.k_min
                        ));
                    }
                    Some(plan)
                }
                Err(HarnessError::Assumption(msg)) => {
                    warnings.push(msg);
                    None
                }
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        cells.push(CellReport { p, local_steps: t, lambda_p, contraction, plan });
    }
    Ok(ValidationReport {
        topology: graph.kind().to_string(),
        n: graph.n(),
        edges: graph.edge_count(),
        components: graph.component_count(),
        lambda: mixing.lambda_second(),
        lambda_w: mixing.lambda_w(),
        smoothness,
        sigma,
        f_tilde,
        cells,
        warnings,
    })
}
