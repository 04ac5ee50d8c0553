//! Trajectory parameterization comparison on simulated windows.

use serde::{Deserialize, Serialize};

use crate::local_mapping::{optimize_window, LocalMappingConfig, LocalMappingError, OptState, Parameterization};
use crate::simulation::{gen_surfel_scene, gen_trajectory_and_imu, SimConfig};
use crate::trajectory::{rms_errors, ControlGrid, CorrectionBasis, UpdateMode};

use super::{median, run_seeds};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Table2Mode {
    /// Linear corrections composed on SO(3) x R3.
    Linear,
    /// Cubic B-spline corrections composed on SE(3).
    Spline,
    Direct11,
    Direct51,
    Direct101,
}

impl Table2Mode {
    pub const ALL: [Table2Mode; 5] = [
        Table2Mode::Linear,
        Table2Mode::Spline,
        Table2Mode::Direct11,
        Table2Mode::Direct51,
        Table2Mode::Direct101,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Table2Mode::Linear => "linear",
            Table2Mode::Spline => "spline",
            Table2Mode::Direct11 => "direct11",
            Table2Mode::Direct51 => "direct51",
            Table2Mode::Direct101 => "direct101",
        }
    }

    pub fn parameterization(&self) -> Parameterization {
        match self {
            Table2Mode::Linear => Parameterization::Composition {
                basis: CorrectionBasis::Linear,
                update: UpdateMode::So3R3,
            },
            Table2Mode::Spline => Parameterization::Composition {
                basis: CorrectionBasis::CubicBSpline,
                update: UpdateMode::Se3,
            },
            Table2Mode::Direct11 => Parameterization::SplineDirect { knots: 11 },
            Table2Mode::Direct51 => Parameterization::SplineDirect { knots: 51 },
            Table2Mode::Direct101 => Parameterization::SplineDirect { knots: 101 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Table2Config {
    pub sim: SimConfig,
    pub local_mapping: LocalMappingConfig,
    pub modes: Vec<Table2Mode>,
}

impl Default for Table2Config {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            local_mapping: LocalMappingConfig::default(),
            modes: Table2Mode::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Table2Row {
    /// Seed number, or `median` for summary rows.
    pub seed: String,
    pub mode: &'static str,
    pub final_t_mm: f64,
    pub final_r_mrad: f64,
    pub iterations: usize,
    pub status: String,
}

#[derive(Clone, Debug)]
pub struct Table2Summary {
    pub rows: Vec<Table2Row>,
    pub medians: Vec<Table2Row>,
    /// Spline composition beats linear composition and the 11-knot direct
    /// spline (those that were run) in both translation and rotation.
    pub ordering_holds: bool,
    /// A mode returned an error for at least one seed.
    pub crashed: bool,
}

impl Table2Summary {
    pub fn median_of(&self, mode: Table2Mode) -> Option<&Table2Row> {
        self.medians.iter().find(|r| r.mode == mode.name())
    }
}

/// Runs every configured mode on one simulated window.
pub fn run_table2_seed(cfg: &Table2Config, seed: u64) -> Vec<Table2Row> {
    let sim = SimConfig { seed, ..cfg.sim.clone() };
    let failed = |mode: Table2Mode, status: String| Table2Row {
        seed: seed.to_string(),
        mode: mode.name(),
        final_t_mm: f64::NAN,
        final_r_mrad: f64::NAN,
        iterations: 0,
        status,
    };
    let setup = gen_trajectory_and_imu(&sim).and_then(|run| gen_surfel_scene(&sim, &run.truth).map(|scene| (run, scene)));
    let (run, scene) = match setup {
        Ok(x) => x,
        Err(e) => return cfg.modes.iter().map(|&m| failed(m, format!("error: {e}"))).collect(),
    };
    cfg.modes
        .iter()
        .map(|&mode| {
            let lm = LocalMappingConfig {
                parameterization: mode.parameterization(),
                ..cfg.local_mapping.clone()
            };
            let grid = match ControlGrid::covering(run.init.start(), run.init.end(), lm.knot_step) {
                Ok(g) => g,
                Err(e) => return failed(mode, format!("error: {e}")),
            };
            let (traj, iterations, status) = match optimize_window(&scene.constraints, &run.imu, &run.init, &OptState::zero(grid), &lm) {
                Ok((_, traj, report)) => (traj, report.steps(), format!("{:?}", report.termination)),
                Err(LocalMappingError::NoProgress { best, .. }) => (best.1, 0, "NoProgress".to_string()),
                Err(e) => return failed(mode, format!("error: {e}")),
            };
            let (et, er) = rms_errors(&traj, &run.truth);
            Table2Row {
                seed: seed.to_string(),
                mode: mode.name(),
                final_t_mm: et * 1e3,
                final_r_mrad: er * 1e3,
                iterations,
                status,
            }
        })
        .collect()
}

pub fn run_table2(cfg: &Table2Config, seeds: &[u64], threads: usize) -> Table2Summary {
    let rows: Vec<Table2Row> = run_seeds(seeds, threads, |s| run_table2_seed(cfg, s)).into_iter().flatten().collect();
    let medians: Vec<Table2Row> = cfg
        .modes
        .iter()
        .map(|m| {
            let of = rows.iter().filter(|r| r.mode == m.name());
            Table2Row {
                seed: "median".into(),
                mode: m.name(),
                final_t_mm: median(of.clone().map(|r| r.final_t_mm)),
                final_r_mrad: median(of.clone().map(|r| r.final_r_mrad)),
                iterations: median(of.map(|r| r.iterations as f64)).round() as usize,
                status: String::new(),
            }
        })
        .collect();
    let crashed = rows.iter().any(|r| r.status.starts_with("error"));
    let find = |m: Table2Mode| medians.iter().find(|r| r.mode == m.name());
    let ordering_holds = find(Table2Mode::Spline).is_some_and(|s| {
        [Table2Mode::Linear, Table2Mode::Direct11]
            .into_iter()
            .filter_map(find)
            .all(|o| s.final_t_mm < o.final_t_mm && s.final_r_mrad < o.final_r_mrad)
    });
    Table2Summary {
        rows,
        medians,
        ordering_holds,
        crashed,
    }
}
