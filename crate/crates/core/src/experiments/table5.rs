//! Localization robustness under random initial misalignments.

use serde::{Deserialize, Serialize};

use crate::lie::Pose;
use crate::localization::{localization_session, pose_errors, Decision, Place, SessionConfig, SessionOutcome};
use crate::simulation::rng::{normal3, substream, Stream};
use crate::simulation::{gen_misalignment, gen_place, MisalignProtocol, PlaceConfig, PlaceScene};

use super::{median, run_seeds, ExperimentError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Table5Config {
    /// Protocol names: `easy`, `medium`, `hard` or `identity`.
    pub protocols: Vec<String>,
    pub place: PlaceConfig,
    pub session: SessionConfig,
    /// Per-axis standard deviation of the true map-to-map rotation (rad)
    /// and translation (m).
    pub truth_rotation_sigma: f64,
    pub truth_translation_sigma: f64,
}

impl Default for Table5Config {
    fn default() -> Self {
        Self {
            protocols: vec!["easy".into(), "medium".into(), "hard".into()],
            place: PlaceConfig::default(),
            session: SessionConfig::default(),
            truth_rotation_sigma: 0.1,
            truth_translation_sigma: 1.0,
        }
    }
}

impl Table5Config {
    pub fn resolve_protocols(&self) -> Result<Vec<MisalignProtocol>, ExperimentError> {
        self.protocols
            .iter()
            .map(|p| MisalignProtocol::by_name(p).ok_or_else(|| ExperimentError::Config(format!("unknown protocol {p:?}"))))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Table5Row {
    pub protocol: &'static str,
    pub session: u64,
    /// `combined` or `sparse-icp`.
    pub method: &'static str,
    pub e_t: f64,
    pub e_r: f64,
    pub places: usize,
    pub success: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Table5Stat {
    pub protocol: &'static str,
    pub method: &'static str,
    pub mean_t: f64,
    pub std_t: f64,
    pub median_t: f64,
    pub mean_r: f64,
    pub std_r: f64,
    pub median_r: f64,
}

/// One row of a localization session log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SessionLogRow {
    pub place: usize,
    pub e_t: f64,
    pub e_r: f64,
    pub inlier: f64,
    pub accepted: bool,
    pub trace_cov: f64,
    pub decision: &'static str,
}

/// Session log rows with errors measured against `truth`.
pub fn session_log(outcome: &SessionOutcome, truth: &Pose) -> Vec<SessionLogRow> {
    outcome
        .rows
        .iter()
        .map(|r| {
            let (e_t, e_r) = r.estimate.map_or((f64::NAN, f64::NAN), |p| pose_errors(&p, truth));
            SessionLogRow {
                place: r.place,
                e_t,
                e_r,
                inlier: r.inlier,
                accepted: r.decision == Decision::Accepted,
                trace_cov: r.trace_cov,
                decision: r.decision.as_str(),
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Table5Summary {
    pub rows: Vec<Table5Row>,
    pub stats: Vec<Table5Stat>,
}

impl Table5Summary {
    pub fn stat(&self, protocol: &str, method: &str) -> Option<&Table5Stat> {
        self.stats.iter().find(|s| s.protocol == protocol && s.method == method)
    }
}

/// True misalignment of session `session`.
pub fn session_truth(cfg: &Table5Config, session: u64) -> Pose {
    let mut rng = substream(session, Stream::Misalignment, u64::MAX);
    let r = normal3(&mut rng, cfg.truth_rotation_sigma);
    let t = normal3(&mut rng, cfg.truth_translation_sigma);
    Pose::from_rotation_vector(r, t)
}

/// Places, initial guess and truth of one session.
pub fn session_setup(cfg: &Table5Config, protocol: &MisalignProtocol, session: u64) -> (Vec<PlaceScene>, Pose, Pose) {
    let truth = session_truth(cfg, session);
    let offset = gen_misalignment(protocol, session, 1)[0].pose;
    let places = (0..cfg.session.max_places).map(|k| gen_place(&cfg.place, session, k, &truth)).collect();
    (places, offset.compose(&truth), truth)
}

/// Runs one session with or without the feature term.
pub fn run_table5_session(cfg: &Table5Config, protocol: &MisalignProtocol, session: u64, use_features: bool) -> (Table5Row, Vec<SessionLogRow>) {
    let (places, init, truth) = session_setup(cfg, protocol, session);
    let refs: Vec<&dyn Place> = places.iter().map(|p| p as &dyn Place).collect();
    let mut scfg = cfg.session;
    scfg.registration.use_features = use_features;
    let outcome = localization_session(&refs, init, &scfg);
    let estimate = outcome.fused.as_ref().map_or(init, |f| f.pose);
    let (e_t, e_r) = pose_errors(&estimate, &truth);
    let row = Table5Row {
        protocol: protocol.name,
        session,
        method: if use_features { "combined" } else { "sparse-icp" },
        e_t,
        e_r,
        places: outcome.rows.len(),
        success: outcome.success,
    };
    (row, session_log(&outcome, &truth))
}

fn stats(protocol: &'static str, method: &'static str, rows: &[Table5Row]) -> Table5Stat {
    let pick: Vec<&Table5Row> = rows.iter().filter(|r| r.protocol == protocol && r.method == method).collect();
    let mean_std = |f: &dyn Fn(&Table5Row) -> f64| {
        let v: Vec<f64> = pick.iter().map(|r| f(r)).collect();
        let n = v.len().max(1) as f64;
        let m = v.iter().sum::<f64>() / n;
        let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
        (m, s, median(v))
    };
    let (mean_t, std_t, median_t) = mean_std(&|r| r.e_t);
    let (mean_r, std_r, median_r) = mean_std(&|r| r.e_r);
    Table5Stat {
        protocol,
        method,
        mean_t,
        std_t,
        median_t,
        mean_r,
        std_r,
        median_r,
    }
}

/// Runs sessions `sessions` for every protocol with both methods.
pub fn run_table5(cfg: &Table5Config, sessions: &[u64], threads: usize, methods: &[bool]) -> Result<Table5Summary, ExperimentError> {
    let protocols = cfg.resolve_protocols()?;
    let mut rows = Vec::new();
    for p in &protocols {
        for &use_features in methods {
            rows.extend(run_seeds(sessions, threads, |s| run_table5_session(cfg, p, s, use_features).0));
        }
    }
    let mut out = Vec::new();
    for p in &protocols {
        for &use_features in methods {
            out.push(stats(p.name, if use_features { "combined" } else { "sparse-icp" }, &rows));
        }
    }
    Ok(Table5Summary { rows, stats: out })
}
