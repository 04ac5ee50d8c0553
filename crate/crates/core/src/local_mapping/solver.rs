//! Damped Gauss-Newton over the window state.

use nalgebra::{DMatrix, DVector, SVector};

use crate::lie::{hat, so3};
use crate::trajectory::Trajectory;
use crate::{Mat3, Vec3, Vec6};

use super::model::{Model, PoseJacobian};
use super::{
    imu_residual_from_poses, Constraints, ImuSample, JacobianMethod, LocalMappingConfig,
    LocalMappingError, OptState, Parameterization,
};

const LAG_DIFF_STEP: f64 = 1e-6;
const PARAM_DIFF_STEP: f64 = 1e-6;
const INITIAL_DAMPING: f64 = 1e-4;
/// Relative decrease predicted by the quadratic model below which a failed
/// step search counts as convergence rather than a stall.
const STALL_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub cost: f64,
    pub rms_surfel: f64,
    pub rms_prior: f64,
    pub rms_accel: f64,
    pub rms_gyro: f64,
    pub step_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    StepTolerance,
    CostTolerance,
    MaxIterations,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizationReport {
    /// Row 0 describes the initial state, later rows each accepted step.
    pub iterations: Vec<IterationRecord>,
    pub termination: Termination,
}

impl OptimizationReport {
    pub fn final_record(&self) -> &IterationRecord {
        self.iterations.last().expect("report has the initial row")
    }

    /// Number of accepted steps.
    pub fn steps(&self) -> usize {
        self.iterations.len() - 1
    }
}

#[derive(Clone, Copy, Debug)]
struct Layout {
    knots: usize,
    accel_bias: Option<usize>,
    gyro_bias: Option<usize>,
    lag: Option<usize>,
    size: usize,
}

impl Layout {
    fn new(knots: usize, cfg: &LocalMappingConfig) -> Self {
        let mut size = 6 * knots;
        let (accel_bias, gyro_bias) = if cfg.estimate_biases {
            size += 6;
            (Some(6 * knots), Some(6 * knots + 3))
        } else {
            (None, None)
        };
        let lag = if cfg.estimate_time_lag {
            size += 1;
            Some(size - 1)
        } else {
            None
        };
        Layout {
            knots,
            accel_bias,
            gyro_bias,
            lag,
            size,
        }
    }
}

struct Problem<'a> {
    constraints: &'a Constraints,
    imu: Vec<ImuSample>,
    cfg: &'a LocalMappingConfig,
}

#[derive(Clone, Copy, Debug, Default)]
struct Evaluation {
    cost: f64,
    sq_surfel: f64,
    n_surfel: usize,
    sq_prior: f64,
    n_prior: usize,
    sq_accel: f64,
    sq_gyro: f64,
    n_imu: usize,
}

impl Evaluation {
    fn record(&self, iter: usize, step_norm: f64) -> IterationRecord {
        let rms = |s: f64, n: usize| if n == 0 { 0.0 } else { (s / n as f64).sqrt() };
        IterationRecord {
            iter,
            cost: self.cost,
            rms_surfel: rms(self.sq_surfel, self.n_surfel),
            rms_prior: rms(self.sq_prior, self.n_prior),
            rms_accel: rms(self.sq_accel, 3 * self.n_imu),
            rms_gyro: rms(self.sq_gyro, 3 * self.n_imu),
            step_norm,
        }
    }
}

fn cauchy(s: f64, c: f64) -> (f64, f64) {
    let c2 = c * c;
    (c2 * (s / c2).ln_1p(), 1.0 / (1.0 + s / c2))
}

impl Problem<'_> {
    fn point_residuals(&self, model: &Model) -> Result<(Vec<f64>, Vec<f64>), LocalMappingError> {
        let mut pairs = Vec::with_capacity(self.constraints.pairs.len());
        for c in &self.constraints.pairs {
            let pa = model.pose(c.tau_a)?;
            let pb = model.pose(c.tau_b)?;
            pairs.push(c.normal.dot(&(pa.transform_point(&c.u_a) - pb.transform_point(&c.u_b))));
        }
        let mut priors = Vec::with_capacity(self.constraints.priors.len());
        for c in &self.constraints.priors {
            let p = model.pose(c.tau_c)?;
            priors.push(c.normal.dot(&(c.u_m - p.transform_point(&c.u_c))));
        }
        Ok((pairs, priors))
    }

    fn imu_residual(&self, model: &Model, state: &OptState, s: &ImuSample, lag: f64) -> Result<(Vec3, Vec3), LocalMappingError> {
        let h = model.period();
        let tau = s.tau + lag;
        let pm = model.pose(tau - h)?;
        let p0 = model.pose(tau)?;
        let pp = model.pose(tau + h)?;
        imu_residual_from_poses(s, &pm, &p0, &pp, h, &state.accel_bias, &state.gyro_bias)
            .map_err(|e| LocalMappingError::Trajectory(e.into()))
    }

    fn evaluate(&self, model: &Model, state: &OptState) -> Result<Evaluation, LocalMappingError> {
        let w = &self.cfg.whitening;
        let mut ev = Evaluation::default();
        let (pairs, priors) = self.point_residuals(model)?;
        for r in &pairs {
            ev.sq_surfel += r * r;
            ev.cost += 0.5 * cauchy((r / w.surfel).powi(2), w.cauchy_sigmas).0;
        }
        for r in &priors {
            ev.sq_prior += r * r;
            ev.cost += 0.5 * cauchy((r / w.prior).powi(2), w.cauchy_sigmas).0;
        }
        ev.n_surfel = pairs.len();
        ev.n_prior = priors.len();
        for s in &self.imu {
            let (ea, eg) = self.imu_residual(model, state, s, state.time_lag)?;
            ev.sq_accel += ea.norm_squared();
            ev.sq_gyro += eg.norm_squared();
            ev.cost += 0.5 * ((ea / w.accel).norm_squared() + (eg / w.gyro).norm_squared());
        }
        ev.n_imu = self.imu.len();
        Ok(ev)
    }

    /// Whitened residual vector and robust weights, in a fixed order.
    fn whitened(&self, model: &Model, state: &OptState) -> Result<(DVector<f64>, Vec<f64>), LocalMappingError> {
        let w = &self.cfg.whitening;
        let (pairs, priors) = self.point_residuals(model)?;
        let mut r = Vec::with_capacity(pairs.len() + priors.len() + 6 * self.imu.len());
        let mut weights = Vec::with_capacity(r.capacity());
        for (vals, sigma) in [(&pairs, w.surfel), (&priors, w.prior)] {
            for v in vals.iter() {
                let x = v / sigma;
                r.push(x);
                weights.push(cauchy(x * x, w.cauchy_sigmas).1);
            }
        }
        for s in &self.imu {
            let (ea, eg) = self.imu_residual(model, state, s, state.time_lag)?;
            r.extend((ea / w.accel).iter());
            r.extend((eg / w.gyro).iter());
            weights.extend([1.0; 6]);
        }
        Ok((DVector::from_vec(r), weights))
    }

    fn analytic_rows(&self, model: &Model, state: &OptState, layout: &Layout, sink: &mut dyn FnMut(&[(usize, f64)], f64, f64)) -> Result<(), LocalMappingError> {
        let w = &self.cfg.whitening;
        let mut cols: Vec<(usize, f64)> = Vec::with_capacity(128);
        let push_pose = |cols: &mut Vec<(usize, f64)>, jac: &PoseJacobian, c: &SVector<f64, 6>| {
            for (knot, m) in jac {
                let row = c.transpose() * m;
                for (i, v) in row.iter().enumerate() {
                    cols.push((6 * knot + i, *v));
                }
            }
        };
        for c in &self.constraints.pairs {
            let (pa, ja) = model.pose_jacobian(c.tau_a)?;
            let (pb, jb) = model.pose_jacobian(c.tau_b)?;
            let r = c.normal.dot(&(pa.transform_point(&c.u_a) - pb.transform_point(&c.u_b))) / w.surfel;
            let ca = point_row(&c.normal, &pa.rotate(&c.u_a)) / w.surfel;
            let cb = -point_row(&c.normal, &pb.rotate(&c.u_b)) / w.surfel;
            cols.clear();
            push_pose(&mut cols, &ja, &ca);
            push_pose(&mut cols, &jb, &cb);
            sink(&cols, r, cauchy(r * r, w.cauchy_sigmas).1);
        }
        for c in &self.constraints.priors {
            let (p, j) = model.pose_jacobian(c.tau_c)?;
            let r = c.normal.dot(&(c.u_m - p.transform_point(&c.u_c))) / w.prior;
            let cp = -point_row(&c.normal, &p.rotate(&c.u_c)) / w.prior;
            cols.clear();
            push_pose(&mut cols, &j, &cp);
            sink(&cols, r, cauchy(r * r, w.cauchy_sigmas).1);
        }
        let h = model.period();
        for s in &self.imu {
            let tau = s.tau + state.time_lag;
            let (pm, jm) = model.pose_jacobian(tau - h)?;
            let (p0, j0) = model.pose_jacobian(tau)?;
            let (pp, jp) = model.pose_jacobian(tau + h)?;
            let (ea, eg) = imu_residual_from_poses(s, &pm, &p0, &pp, h, &state.accel_bias, &state.gyro_bias)
                .map_err(|e| LocalMappingError::Trajectory(e.into()))?;
            let lag_d = match layout.lag {
                Some(_) => {
                    let (a1, g1) = self.imu_residual(model, state, s, state.time_lag + LAG_DIFF_STEP)?;
                    let (a0, g0) = self.imu_residual(model, state, s, state.time_lag - LAG_DIFF_STEP)?;
                    Some(((a1 - a0) / (2.0 * LAG_DIFF_STEP), (g1 - g0) / (2.0 * LAG_DIFF_STEP)))
                }
                None => None,
            };
            let rt = p0.rotation().transpose();
            let acc = (pp.translation() - p0.translation() * 2.0 + pm.translation()) / (h * h);
            let v = acc - crate::gravity_vector();
            let theta = so3::log(&(rt * pp.rotation())).map_err(|e| LocalMappingError::Trajectory(e.into()))?;
            let gj = so3::left_jacobian_inv(&theta) * rt / h;
            let a_rot0: Mat3 = -rt * hat(&v);
            let a_t0: Mat3 = rt * (2.0 / (h * h));
            let a_tpm: Mat3 = -rt / (h * h);
            for axis in 0..3 {
                // Accelerometer component.
                cols.clear();
                let row_rot0 = a_rot0.row(axis).transpose();
                let c0 = stack(&row_rot0, &a_t0.row(axis).transpose()) / w.accel;
                let cpm = stack(&Vec3::zeros(), &a_tpm.row(axis).transpose()) / w.accel;
                push_pose(&mut cols, &j0, &c0);
                push_pose(&mut cols, &jm, &cpm);
                push_pose(&mut cols, &jp, &cpm);
                if let Some(b) = layout.accel_bias {
                    cols.push((b + axis, 1.0 / w.accel));
                }
                if let (Some(l), Some((da, _))) = (layout.lag, lag_d) {
                    cols.push((l, da[axis] / w.accel));
                }
                sink(&cols, ea[axis] / w.accel, 1.0);
            }
            for axis in 0..3 {
                cols.clear();
                let g_row = gj.row(axis).transpose();
                push_pose(&mut cols, &j0, &(stack(&g_row, &Vec3::zeros()) / w.gyro));
                push_pose(&mut cols, &jp, &(stack(&(-g_row), &Vec3::zeros()) / w.gyro));
                if let Some(b) = layout.gyro_bias {
                    cols.push((b + axis, 1.0 / w.gyro));
                }
                if let (Some(l), Some((_, dg))) = (layout.lag, lag_d) {
                    cols.push((l, dg[axis] / w.gyro));
                }
                sink(&cols, eg[axis] / w.gyro, 1.0);
            }
        }
        Ok(())
    }

    /// Dense Jacobian of the whitened residuals by central differences.
    fn numeric_jacobian(&self, model: &Model, state: &OptState, layout: &Layout) -> Result<DMatrix<f64>, LocalMappingError> {
        let (r0, _) = self.whitened(model, state)?;
        let mut jac = DMatrix::zeros(r0.len(), layout.size);
        let eps = PARAM_DIFF_STEP;
        for col in 0..layout.size {
            let (plus, minus) = if col < 6 * layout.knots {
                let mut d = vec![Vec6::zeros(); layout.knots];
                d[col / 6][col % 6] = eps;
                let mp = model.apply_step(&d)?;
                d[col / 6][col % 6] = -eps;
                let mm = model.apply_step(&d)?;
                (self.whitened(&mp, state)?.0, self.whitened(&mm, state)?.0)
            } else {
                let shift = |sign: f64| {
                    let mut s = state.clone();
                    if Some(col) == layout.lag {
                        s.time_lag += sign * eps;
                    } else if let Some(b) = layout.accel_bias.filter(|b| (*b..*b + 3).contains(&col)) {
                        s.accel_bias[col - b] += sign * eps;
                    } else if let Some(b) = layout.gyro_bias {
                        s.gyro_bias[col - b] += sign * eps;
                    }
                    s
                };
                (self.whitened(model, &shift(1.0))?.0, self.whitened(model, &shift(-1.0))?.0)
            };
            jac.set_column(col, &((plus - minus) / (2.0 * eps)));
        }
        Ok(jac)
    }

    fn normal_equations(&self, model: &Model, state: &OptState, layout: &Layout) -> Result<(DMatrix<f64>, DVector<f64>), LocalMappingError> {
        let mut h = DMatrix::zeros(layout.size, layout.size);
        let mut g = DVector::zeros(layout.size);
        match self.cfg.jacobian {
            JacobianMethod::Analytic => {
                self.analytic_rows(model, state, layout, &mut |cols, r, w| {
                    for &(i, vi) in cols {
                        g[i] += w * vi * r;
                        let wv = w * vi;
                        for &(j, vj) in cols {
                            h[(i, j)] += wv * vj;
                        }
                    }
                })?;
            }
            JacobianMethod::CentralDifference => {
                let jac = self.numeric_jacobian(model, state, layout)?;
                let (r, weights) = self.whitened(model, state)?;
                let wv = DVector::from_vec(weights);
                let wj = DMatrix::from_fn(jac.nrows(), jac.ncols(), |i, j| jac[(i, j)] * wv[i]);
                h = jac.transpose() * &wj;
                g = wj.transpose() * r;
            }
        }
        Ok((h, g))
    }
}

fn stack(a: &Vec3, b: &Vec3) -> SVector<f64, 6> {
    SVector::<f64, 6>::new(a.x, a.y, a.z, b.x, b.y, b.z)
}

/// Sensitivity of `n^T (R u + t)` to `(phi, dt)` given `Ru`.
fn point_row(n: &Vec3, ru: &Vec3) -> SVector<f64, 6> {
    stack(&ru.cross(n), n)
}

fn select_imu(imu: &[ImuSample], model: &Model, cfg: &LocalMappingConfig) -> Vec<ImuSample> {
    let (lo, hi) = model.support();
    let margin = model.period() + if cfg.estimate_time_lag { cfg.max_time_lag } else { 0.0 } + 1e-9;
    imu.iter()
        .filter(|s| s.tau - margin >= lo && s.tau + margin <= hi)
        .copied()
        .collect()
}

fn null_space_dim(h: &DMatrix<f64>) -> usize {
    let n = h.nrows();
    let d: Vec<f64> = (0..n).map(|i| h[(i, i)].max(0.0).sqrt()).collect();
    if d.iter().any(|&x| x == 0.0) {
        return d.iter().filter(|&&x| x == 0.0).count().max(1);
    }
    let scaled = DMatrix::from_fn(n, n, |i, j| h[(i, j)] / (d[i] * d[j]));
    if let Some(ch) = scaled.clone().cholesky() {
        let l = ch.l();
        let min_pivot = (0..n).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
        if min_pivot > 1e-12 {
            return 0;
        }
    }
    let eig = scaled.symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    eig.eigenvalues.iter().filter(|&&v| v <= 1e-12 * max).count()
}

/// Refines the window trajectory.
///
/// The returned state holds the zero grid for composition modes and the
/// fitted absolute knots for the direct spline mode.
pub fn optimize_window(
    constraints: &Constraints,
    imu: &[ImuSample],
    traj: &Trajectory,
    init: &OptState,
    cfg: &LocalMappingConfig,
) -> Result<(OptState, Trajectory, OptimizationReport), LocalMappingError> {
    let length = traj.end() - traj.start();
    if length > cfg.max_window + 1e-9 {
        return Err(LocalMappingError::WindowTooLong {
            length,
            max: cfg.max_window,
        });
    }
    let model = match cfg.parameterization {
        Parameterization::Composition { .. } => Model::composition(
            traj.clone(),
            init.grid.step(),
            cfg.parameterization,
            cfg.interpolation,
        )?,
        Parameterization::SplineDirect { knots } => Model::spline_direct(traj, knots)?,
    };
    let problem = Problem {
        constraints,
        imu: select_imu(imu, &model, cfg),
        cfg,
    };
    let layout = Layout::new(model.knot_count(), cfg);
    let scalars = constraints.len() + 6 * problem.imu.len();
    if scalars < 6 * model.knot_count() {
        return Err(LocalMappingError::Unobservable {
            residuals: scalars,
            knots: model.knot_count(),
            required: 6 * model.knot_count(),
        });
    }

    let mut state = init.clone();
    state.grid = model.grid().clone();
    let mut model = model;
    let mut current = problem.evaluate(&model, &state)?;
    let mut records = vec![current.record(0, 0.0)];
    let mut lambda = INITIAL_DAMPING;
    let mut termination = Termination::MaxIterations;

    for iter in 1..=cfg.max_iterations {
        let (mut h, mut g) = problem.normal_equations(&model, &state, &layout)?;
        // Knots outside every residual's support (the unused pads of the
        // linear basis) carry no information; pin them.
        for i in 0..layout.size {
            if h[(i, i)] == 0.0 {
                h[(i, i)] = 1.0;
                g[i] = 0.0;
            }
        }
        if iter == 1 {
            let null_dim = null_space_dim(&h);
            if null_dim > 0 {
                return Err(LocalMappingError::DegenerateGeometry { null_dim });
            }
        }
        let mut accepted = None;
        let mut predicted_first = None;
        for _ in 0..=cfg.max_damping_retries {
            let Some(step) = bounded_step(&h, &g, lambda, &state, &layout, cfg) else {
                lambda *= 10.0;
                continue;
            };
            let predicted = -(g.dot(&step) + 0.5 * step.dot(&(&h * &step)));
            predicted_first.get_or_insert(predicted);
            let (cand_model, cand_state) = take_step(&model, &state, &step, &layout, cfg)?;
            let cand = problem.evaluate(&cand_model, &cand_state)?;
            if cand.cost < current.cost {
                accepted = Some((cand_model, cand_state, cand, step.norm()));
                lambda = (lambda / 3.0).max(1e-9);
                break;
            }
            lambda *= 10.0;
        }
        let Some((m, s, ev, step_norm)) = accepted else {
            let predicted = predicted_first.unwrap_or(0.0);
            if predicted <= STALL_TOLERANCE.max(cfg.cost_tolerance) * current.cost.max(f64::MIN_POSITIVE) || current.cost < 1e-20 {
                termination = Termination::CostTolerance;
                break;
            }
            let best = (state.clone(), model.trajectory()?);
            return Err(LocalMappingError::NoProgress {
                retries: cfg.max_damping_retries,
                best: Box::new(best),
            });
        };
        let decrease = (current.cost - ev.cost) / current.cost.max(f64::MIN_POSITIVE);
        model = m;
        state = s;
        current = ev;
        records.push(current.record(iter, step_norm));
        log::debug!("iteration {iter}: cost {:.6e} step {:.3e}", current.cost, step_norm);
        if step_norm < cfg.step_tolerance {
            termination = Termination::StepTolerance;
            break;
        }
        if decrease < cfg.cost_tolerance {
            termination = Termination::CostTolerance;
            break;
        }
    }
    let out = model.trajectory()?;
    state.grid = model.grid().clone();
    Ok((
        state,
        out,
        OptimizationReport {
            iterations: records,
            termination,
        },
    ))
}

/// Damped step that keeps bounded parameters inside their box: any
/// parameter the free step would push past its bound is held fixed and the
/// system re-solved.
fn bounded_step(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    lambda: f64,
    state: &OptState,
    layout: &Layout,
    cfg: &LocalMappingConfig,
) -> Option<DVector<f64>> {
    let mut pinned: Vec<usize> = Vec::new();
    for _ in 0..3 {
        let mut damped = h.clone();
        let mut rhs = g.clone();
        for i in 0..layout.size {
            damped[(i, i)] += lambda * (h[(i, i)] + 1e-12);
        }
        for &p in &pinned {
            damped.row_mut(p).fill(0.0);
            damped.column_mut(p).fill(0.0);
            damped[(p, p)] = 1.0;
            rhs[p] = 0.0;
        }
        let step = -damped.cholesky()?.solve(&rhs);
        let mut violated = Vec::new();
        let mut check = |col: Option<usize>, values: &[f64], bound: f64| {
            if let Some(c) = col {
                for (i, v) in values.iter().enumerate() {
                    if (v + step[c + i]).abs() > bound && !pinned.contains(&(c + i)) {
                        violated.push(c + i);
                    }
                }
            }
        };
        check(layout.accel_bias, state.accel_bias.as_slice(), cfg.bias_bound);
        check(layout.gyro_bias, state.gyro_bias.as_slice(), cfg.bias_bound);
        check(layout.lag, &[state.time_lag], cfg.max_time_lag);
        if violated.is_empty() {
            return Some(step);
        }
        pinned.extend(violated);
    }
    None
}

fn take_step(
    model: &Model,
    state: &OptState,
    step: &DVector<f64>,
    layout: &Layout,
    cfg: &LocalMappingConfig,
) -> Result<(Model, OptState), LocalMappingError> {
    let delta: Vec<Vec6> = (0..layout.knots)
        .map(|k| Vec6::from_iterator(step.rows(6 * k, 6).iter().copied()))
        .collect();
    let m = model.apply_step(&delta)?;
    let mut s = state.clone();
    let bound = cfg.bias_bound;
    if let Some(b) = layout.accel_bias {
        s.accel_bias = (s.accel_bias + Vec3::from_iterator(step.rows(b, 3).iter().copied()))
            .map(|v| v.clamp(-bound, bound));
    }
    if let Some(b) = layout.gyro_bias {
        s.gyro_bias = (s.gyro_bias + Vec3::from_iterator(step.rows(b, 3).iter().copied()))
            .map(|v| v.clamp(-bound, bound));
    }
    if let Some(l) = layout.lag {
        s.time_lag = (s.time_lag + step[l]).clamp(-cfg.max_time_lag, cfg.max_time_lag);
    }
    s.grid = m.grid().clone();
    Ok((m, s))
}

/// Whitened residual Jacobian at the given state, built with `method`.
/// Columns are ordered knots `(c_r, c_t)`, accelerometer bias, gyroscope
/// bias, time lag; rows surfel pairs, map priors, then six rows per IMU
/// sample.
pub fn window_jacobian(
    constraints: &Constraints,
    imu: &[ImuSample],
    model: &Model,
    state: &OptState,
    cfg: &LocalMappingConfig,
    method: JacobianMethod,
) -> Result<DMatrix<f64>, LocalMappingError> {
    let problem = Problem {
        constraints,
        imu: select_imu(imu, model, cfg),
        cfg,
    };
    let layout = Layout::new(model.knot_count(), cfg);
    match method {
        JacobianMethod::CentralDifference => problem.numeric_jacobian(model, state, &layout),
        JacobianMethod::Analytic => {
            let rows = constraints.len() + 6 * problem.imu.len();
            let mut jac = DMatrix::zeros(rows, layout.size);
            let mut row = 0;
            problem.analytic_rows(model, state, &layout, &mut |cols, _, _| {
                for &(c, v) in cols {
                    jac[(row, c)] += v;
                }
                row += 1;
            })?;
            Ok(jac)
        }
    }
}
