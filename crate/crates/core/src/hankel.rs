//! Block-Hankel trajectory machinery: persistency-of-excitation tests,
//! past/future splitting, the simplified storage-only past stack, SVD rank
//! truncation, and the null-space substitution that removes the disturbance
//! equality constraints from the data-driven OCP.
//!
//! Signal sequences are stored one time step per row, so a length-T signal
//! with n channels is a T×n matrix. A depth-N block Hankel matrix of it has
//! N·n rows and T−N+1 columns.

use crate::plant::TrajectoryLog;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HankelError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("forecast outside the range of W_F (residual {residual:.3e} > {tolerance:.3e})")]
    InfeasibleForecast { residual: f64, tolerance: f64 },
}

/// How to police the fundamental lemma's minimum-data requirement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PePolicy {
    /// Enforce the lower bound and the Hankel rank test; abort on failure.
    Strict,
    /// Accept shorter or rank-deficient data and rely on SVD truncation.
    #[default]
    Truncated,
}

/// Relative singular-value tolerance used by all rank decisions here.
pub const RANK_TOL: f64 = 1e-10;

/// Depth-N block Hankel matrix of a (T×n) signal.
pub fn hankel_matrix(seq: &DMatrix<f64>, depth: usize) -> Result<DMatrix<f64>, HankelError> {
    let t = seq.nrows();
    let n = seq.ncols();
    if depth == 0 {
        return Err(HankelError::InvalidParameter("depth must be >= 1".into()));
    }
    if t < depth {
        return Err(HankelError::InsufficientData(format!(
            "sequence length {t} < depth {depth}"
        )));
    }
    let cols = t - depth + 1;
    let mut h = DMatrix::zeros(depth * n, cols);
    for j in 0..cols {
        for block in 0..depth {
            for ch in 0..n {
                h[(block * n + ch, j)] = seq[(j + block, ch)];
            }
        }
    }
    Ok(h)
}

fn numeric_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let svals = m.clone().svd(false, false).singular_values;
    let largest = svals.max();
    if largest == 0.0 {
        return 0;
    }
    svals.iter().filter(|s| **s > rel_tol * largest).count()
}

/// Persistency of excitation of the given order: full row rank of the
/// depth-`order` Hankel matrix. Returns the flag and the numeric rank.
pub fn is_persistently_exciting(
    seq: &DMatrix<f64>,
    order: usize,
) -> Result<(bool, usize), HankelError> {
    let h = hankel_matrix(seq, order)?;
    let rank = numeric_rank(&h, RANK_TOL);
    Ok((rank == seq.ncols() * order, rank))
}

/// Past/future split of the depth-(T_ini+L) Hankel matrices over the
/// s-trimmed data, per signal.
#[derive(Debug, Clone)]
pub struct PastFuture {
    pub u_p: DMatrix<f64>,
    pub w_p: DMatrix<f64>,
    pub y_p: DMatrix<f64>,
    pub u_f: DMatrix<f64>,
    pub w_f: DMatrix<f64>,
    pub y_f: DMatrix<f64>,
}

pub fn split_past_future(
    data: &TrajectoryLog,
    t_ini: usize,
    horizon: usize,
    s_index: usize,
) -> Result<PastFuture, HankelError> {
    let t = data.len();
    let depth = t_ini + horizon;
    if s_index == 0 {
        return Err(HankelError::InvalidParameter("s must be >= 1".into()));
    }
    if t + 1 < s_index || t - s_index + 1 < depth {
        return Err(HankelError::InsufficientData(format!(
            "need T - s + 1 >= T_ini + L, got T = {t}, s = {s_index}, T_ini + L = {depth}"
        )));
    }
    let trimmed = t - s_index + 1;
    let split = |m: &DMatrix<f64>| -> Result<(DMatrix<f64>, DMatrix<f64>), HankelError> {
        let h = hankel_matrix(&m.rows(0, trimmed).clone_owned(), depth)?;
        let n = m.ncols();
        let past = h.rows(0, t_ini * n).clone_owned();
        let future = h.rows(t_ini * n, horizon * n).clone_owned();
        Ok((past, future))
    };
    let (u_p, u_f) = split(&data.u)?;
    let (w_p, w_f) = split(&data.w)?;
    let (y_p, y_f) = split(&data.y)?;
    Ok(PastFuture { u_p, w_p, y_p, u_f, w_f, y_f })
}

#[derive(Debug, Clone)]
pub struct TruncationRecord {
    pub original_rank: usize,
    pub original_cols: usize,
    pub target_rank: usize,
    pub discarded_singular_values: Vec<f64>,
}

/// The simplified stacked representation: storage power and charge past
/// blocks over T_ini steps, full input/disturbance/output future blocks over
/// L steps. The static network makes all other past signals irrelevant to
/// the future, so they are dropped.
#[derive(Debug, Clone)]
pub struct HankelStack {
    pub s_p: DMatrix<f64>,
    pub e_p: DMatrix<f64>,
    pub u_f: DMatrix<f64>,
    pub w_f: DMatrix<f64>,
    pub y_f: DMatrix<f64>,
    pub t_ini: usize,
    pub horizon: usize,
    pub n_storage: usize,
    pub truncation: Option<TruncationRecord>,
}

impl HankelStack {
    pub fn cols(&self) -> usize {
        self.u_f.ncols()
    }

    pub fn total_rows(&self) -> usize {
        self.s_p.nrows() + self.e_p.nrows() + self.u_f.nrows() + self.w_f.nrows()
            + self.y_f.nrows()
    }

    /// All five blocks stacked vertically.
    pub fn stacked(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.total_rows(), self.cols());
        let mut row = 0;
        for block in [&self.s_p, &self.e_p, &self.u_f, &self.w_f, &self.y_f] {
            m.view_mut((row, 0), (block.nrows(), block.ncols())).copy_from(block);
            row += block.nrows();
        }
        m
    }

    /// Default truncation target: the dimension of the input-disturbance-
    /// output behavior over the stack depth, (T_ini + L)(n_u + n_w) + q.
    /// For the depth-2 segment stacks this is 2·T_ini·(n_u + n_w) + q.
    pub fn default_truncation_target(&self) -> usize {
        let n_u = self.u_f.nrows() / self.horizon.max(1);
        let n_w = self.w_f.nrows() / self.horizon.max(1);
        (self.t_ini + self.horizon) * (n_u + n_w) + self.n_storage
    }
}

/// Build the simplified stack of one recorded trajectory. `storage_selector`
/// is the q×n_u matrix picking storage powers out of u (index-1 plant, s=1).
pub fn build_simplified_stack(
    data: &TrajectoryLog,
    storage_selector: &DMatrix<f64>,
    t_ini: usize,
    horizon: usize,
) -> Result<HankelStack, HankelError> {
    if storage_selector.ncols() != data.u.ncols() {
        return Err(HankelError::InvalidParameter(format!(
            "storage selector expects n_u = {}, data has {}",
            storage_selector.ncols(),
            data.u.ncols()
        )));
    }
    let q = storage_selector.nrows();
    let pf = split_past_future(data, t_ini, horizon, 1)?;
    // storage powers: selector applied per block row of U_P
    let n_u = data.u.ncols();
    let cols = pf.u_p.ncols();
    let mut s_p = DMatrix::zeros(t_ini * q, cols);
    for block in 0..t_ini {
        let u_block = pf.u_p.rows(block * n_u, n_u);
        s_p.view_mut((block * q, 0), (q, cols))
            .copy_from(&(storage_selector * u_block));
    }
    // charges: the leading q rows of each Y_P block row
    let n_y = data.y.ncols();
    let mut e_p = DMatrix::zeros(t_ini * q, cols);
    for block in 0..t_ini {
        e_p.view_mut((block * q, 0), (q, cols))
            .copy_from(&pf.y_p.rows(block * n_y, q));
    }
    Ok(HankelStack {
        s_p,
        e_p,
        u_f: pf.u_f,
        w_f: pf.w_f,
        y_f: pf.y_f,
        t_ini,
        horizon,
        n_storage: q,
        truncation: None,
    })
}

/// Low-rank compression: replace the stack columns by U_r Σ_r of the rank-r
/// SVD of the stacked matrix. This shrinks the coefficient space (the OCP's
/// decision dimension) while keeping the span of the leading directions;
/// discarded singular values are recorded.
pub fn truncate_rank(stack: &HankelStack, target_rank: usize) -> Result<HankelStack, HankelError> {
    if target_rank == 0 {
        return Err(HankelError::InvalidParameter("target rank must be >= 1".into()));
    }
    let m = stack.stacked();
    if target_rank >= m.ncols() {
        log::warn!(
            "truncation target {} >= column count {}; stack left unchanged",
            target_rank,
            m.ncols()
        );
        return Ok(stack.clone());
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.as_ref().expect("svd with u");
    let original_rank = {
        let largest = svd.singular_values.max();
        svd.singular_values
            .iter()
            .filter(|s| **s > RANK_TOL * largest)
            .count()
    };
    let r = target_rank.min(svd.singular_values.len());
    let mut compressed = DMatrix::zeros(m.nrows(), r);
    for j in 0..r {
        compressed
            .column_mut(j)
            .copy_from(&(u.column(j) * svd.singular_values[j]));
    }
    let discarded = svd.singular_values.iter().skip(r).copied().collect();

    let mut row = 0;
    let mut take = |rows: usize| {
        let block = compressed.rows(row, rows).clone_owned();
        row += rows;
        block
    };
    Ok(HankelStack {
        s_p: take(stack.s_p.nrows()),
        e_p: take(stack.e_p.nrows()),
        u_f: take(stack.u_f.nrows()),
        w_f: take(stack.w_f.nrows()),
        y_f: take(stack.y_f.nrows()),
        t_ini: stack.t_ini,
        horizon: stack.horizon,
        n_storage: stack.n_storage,
        truncation: Some(TruncationRecord {
            original_rank,
            original_cols: m.ncols(),
            target_rank: r,
            discarded_singular_values: discarded,
        }),
    })
}

/// Pseudoinverse and orthonormal null-space basis of W_F, used to substitute
/// α = W_F† w + null(W_F) β so the disturbance equalities vanish from the OCP.
#[derive(Debug, Clone)]
pub struct NullspaceSubstitution {
    pub pinv: DMatrix<f64>,
    /// Columns form an orthonormal basis of null(W_F); may have 0 columns.
    pub null_basis: DMatrix<f64>,
    last_forecast: Option<(DVector<f64>, DVector<f64>)>,
}

pub fn nullspace_substitution(w_f: &DMatrix<f64>) -> Result<NullspaceSubstitution, HankelError> {
    if w_f.ncols() == 0 {
        return Err(HankelError::InvalidParameter("W_F has no columns".into()));
    }
    let svd = w_f.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd with u");
    let v_t = svd.v_t.as_ref().expect("svd with v_t");
    let largest = svd.singular_values.max();
    let rank = if largest == 0.0 {
        0
    } else {
        svd.singular_values
            .iter()
            .filter(|s| **s > RANK_TOL * largest)
            .count()
    };

    // pinv = V Σ⁺ Uᵀ restricted to the numeric rank
    let m = w_f.ncols();
    let mut pinv = DMatrix::zeros(m, w_f.nrows());
    for k in 0..rank {
        let vk = v_t.row(k).transpose();
        let uk = u.column(k);
        pinv += vk * uk.transpose() / svd.singular_values[k];
    }

    // null basis: trailing right singular vectors. The thin SVD only carries
    // min(rows, cols) of them, so complete the basis by QR when the null
    // space extends beyond that.
    let kept = v_t.nrows();
    let mut null_basis = DMatrix::zeros(m, m - rank);
    for (idx, k) in (rank..kept).enumerate() {
        null_basis.column_mut(idx).copy_from(&v_t.row(k).transpose());
    }
    if m > kept {
        // project the identity onto the complement of all kept directions,
        // then orthonormalize what survives
        let mut complement = DMatrix::<f64>::identity(m, m);
        for k in 0..kept {
            let vk = v_t.row(k).transpose();
            complement -= &vk * vk.transpose();
        }
        let qr = complement.qr();
        let qm = qr.q();
        let rm = qr.r();
        let mut idx = kept - rank;
        for k in 0..m {
            if idx >= m - rank {
                break;
            }
            if rm[(k, k)].abs() > 1e-8 {
                null_basis.column_mut(idx).copy_from(&qm.column(k));
                idx += 1;
            }
        }
        debug_assert_eq!(idx, m - rank, "null basis completion short");
    }

    Ok(NullspaceSubstitution {
        pinv,
        null_basis,
        last_forecast: None,
    })
}

impl NullspaceSubstitution {
    pub fn null_dim(&self) -> usize {
        self.null_basis.ncols()
    }

    /// Particular solution α₀ = W_F† w, verifying that the forecast actually
    /// lies in the range of W_F.
    pub fn particular(
        &mut self,
        w_f: &DMatrix<f64>,
        forecast: &DVector<f64>,
    ) -> Result<DVector<f64>, HankelError> {
        if let Some((w, alpha)) = &self.last_forecast {
            if w == forecast {
                return Ok(alpha.clone());
            }
        }
        let alpha0 = &self.pinv * forecast;
        let residual = (w_f * &alpha0 - forecast).norm();
        let tolerance = 1e-6 * forecast.norm().max(1.0);
        if residual > tolerance {
            return Err(HankelError::InfeasibleForecast { residual, tolerance });
        }
        self.last_forecast = Some((forecast.clone(), alpha0.clone()));
        Ok(alpha0)
    }
}

/// Strict-mode minimum offline data length
/// T ≥ (n_u + n_w + 1)(L + 2(q + s − 1)) − 1.
pub fn minimum_data_length(n_u: usize, n_w: usize, q: usize, s: usize, horizon: usize) -> usize {
    (n_u + n_w + 1) * (horizon + 2 * (q + s - 1)) - 1
}

#[derive(Debug, Clone)]
pub struct PeReport {
    pub policy: PePolicy,
    pub required_length: usize,
    pub actual_length: usize,
    pub pe_order: usize,
    pub exciting: bool,
    pub rank: usize,
}

/// Check the recorded data against the configured policy. In strict mode a
/// failure is an error; in truncated mode the outcome is only reported.
pub fn check_data_requirements(
    data: &TrajectoryLog,
    q: usize,
    s: usize,
    t_ini: usize,
    horizon: usize,
    policy: PePolicy,
) -> Result<PeReport, HankelError> {
    let n_u = data.u.ncols();
    let n_w = data.w.ncols();
    let required = minimum_data_length(n_u, n_w, q, s, horizon);
    let pe_order = t_ini + horizon + q + s - 1;
    let joint = {
        let mut m = DMatrix::zeros(data.len(), n_u + n_w);
        m.view_mut((0, 0), (data.len(), n_u)).copy_from(&data.u);
        m.view_mut((0, n_u), (data.len(), n_w)).copy_from(&data.w);
        m
    };
    let (exciting, rank) = match is_persistently_exciting(&joint, pe_order) {
        Ok(res) => res,
        Err(HankelError::InsufficientData(msg)) if policy == PePolicy::Strict => {
            return Err(HankelError::InsufficientData(msg))
        }
        Err(_) => (false, 0),
    };
    let report = PeReport {
        policy,
        required_length: required,
        actual_length: data.len(),
        pe_order,
        exciting,
        rank,
    };
    if policy == PePolicy::Strict {
        if data.len() < required {
            return Err(HankelError::InsufficientData(format!(
                "strict mode requires T >= {required}, got {}",
                data.len()
            )));
        }
        if !exciting {
            return Err(HankelError::InsufficientData(format!(
                "joint input not persistently exciting of order {pe_order} (rank {rank} < {})",
                (n_u + n_w) * pe_order
            )));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::netmodel::{reduce, Storage};
    use crate::plant::{assemble_descriptor, simulate};
    use nalgebra::dvector;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hankel_scalar_examples() {
        let seq = DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]);
        let h = hankel_matrix(&seq, 2).unwrap();
        assert_eq!(h, DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 3.0, 4.0]));

        let single = hankel_matrix(&seq, 4).unwrap();
        assert_eq!(single.ncols(), 1);
        assert_eq!(single.column(0).clone_owned().as_slice(), &[1.0, 2.0, 3.0, 4.0]);

        let two_dim = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let raw = hankel_matrix(&two_dim, 1).unwrap();
        assert_eq!(raw, two_dim.transpose());

        assert!(matches!(
            hankel_matrix(&seq, 5),
            Err(HankelError::InsufficientData(_))
        ));
    }

    #[test]
    fn persistency_of_excitation() {
        let geometric = DMatrix::from_column_slice(5, 1, &[1.0, 2.0, 4.0, 8.0, 16.0]);
        let (pe, rank) = is_persistently_exciting(&geometric, 2).unwrap();
        assert!(!pe);
        assert_eq!(rank, 1);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let random = DMatrix::from_fn(5, 1, |_, _| rng.random_range(-1.0..1.0));
        let (pe, _) = is_persistently_exciting(&random, 2).unwrap();
        assert!(pe);

        // order too deep for full row rank: n_v * N > T - N + 1
        let (pe, _) = is_persistently_exciting(&random, 4).unwrap();
        assert!(!pe);
    }

    #[test]
    fn split_matches_direct_hankel() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = 9;
        let data = TrajectoryLog {
            u: DMatrix::from_fn(t, 2, |_, _| rng.random_range(-1.0..1.0)),
            w: DMatrix::from_fn(t, 1, |_, _| rng.random_range(-1.0..1.0)),
            y: DMatrix::from_fn(t, 3, |_, _| rng.random_range(-1.0..1.0)),
        };
        let t_ini = 2;
        let l = 3;
        let pf = split_past_future(&data, t_ini, l, 1).unwrap();
        assert_eq!(pf.u_p.ncols(), t - l - t_ini - 1 + 2);
        let full = hankel_matrix(&data.u, t_ini + l).unwrap();
        let mut stacked = DMatrix::zeros(full.nrows(), full.ncols());
        stacked
            .view_mut((0, 0), (pf.u_p.nrows(), pf.u_p.ncols()))
            .copy_from(&pf.u_p);
        stacked
            .view_mut((pf.u_p.nrows(), 0), (pf.u_f.nrows(), pf.u_f.ncols()))
            .copy_from(&pf.u_f);
        assert_eq!(stacked, full);

        // scalar [a, b, c] example with T_ini = L = s = 1
        let tiny = TrajectoryLog {
            u: DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]),
            w: DMatrix::from_column_slice(3, 1, &[4.0, 5.0, 6.0]),
            y: DMatrix::from_column_slice(3, 1, &[7.0, 8.0, 9.0]),
        };
        let pf = split_past_future(&tiny, 1, 1, 1).unwrap();
        assert_eq!(pf.u_p, DMatrix::from_row_slice(1, 2, &[1.0, 2.0]));
        assert_eq!(pf.u_f, DMatrix::from_row_slice(1, 2, &[2.0, 3.0]));
    }

    fn storage_case() -> crate::netmodel::GridCase {
        let mut case = fixtures::three_bus_triangle();
        case.storages.push(Storage {
            bus: 3,
            e_min: 0.0,
            e_max: 100.0,
            s_min: -20.0,
            s_max: 20.0,
            e0: 50.0,
            cost_quad_power: 0.01,
            cost_quad_energy: 1e-5,
        });
        case
    }

    #[test]
    fn simplified_stack_block_sizes() {
        let case = storage_case();
        let model = reduce(&case).unwrap();
        let sys = assemble_descriptor(&model, 0.25).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = 30;
        let u = DMatrix::from_fn(t, case.n_u(), |_, _| rng.random_range(-10.0..10.0));
        let w = DMatrix::from_fn(t, case.n_w(), |_, _| rng.random_range(0.0..20.0));
        let log = simulate(&sys, &dvector![50.0], &u, &w).unwrap();
        let stack = build_simplified_stack(&log, &model.storage_selector, 1, 2).unwrap();
        assert_eq!(stack.s_p.nrows(), 1);
        assert_eq!(stack.e_p.nrows(), 1);
        assert_eq!(stack.u_f.nrows(), 2 * case.n_u());
        assert_eq!(stack.w_f.nrows(), 2 * case.n_w());
        assert_eq!(stack.y_f.nrows(), 2 * case.n_y());
    }

    #[test]
    fn stack_row_count_matches_published_dimensions() {
        // dimensions of the 118-bus experiment: per-segment stack has
        // |G|+|E|+|D|+3|S| rows, and the behavior dimension
        // 2(|G|+|D|-1)+|S| is the default truncation target
        let (n_u, n_w, n_y, q) = (57, 99, 191, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = 400;
        let log = TrajectoryLog {
            u: DMatrix::from_fn(t, n_u, |_, _| rng.random_range(-1.0..1.0)),
            w: DMatrix::from_fn(t, n_w, |_, _| rng.random_range(-1.0..1.0)),
            y: DMatrix::from_fn(t, n_y, |_, _| rng.random_range(-1.0..1.0)),
        };
        let mut selector = DMatrix::zeros(q, n_u);
        for s in 0..q {
            selector[(s, n_u - q + s)] = 1.0;
        }
        let stack = build_simplified_stack(&log, &selector, 1, 1).unwrap();
        assert_eq!(stack.total_rows(), 58 + 186 + 99 + 3 * 4);
        assert_eq!(stack.default_truncation_target(), 2 * (58 + 99 - 1) + 4);
    }

    #[test]
    fn plant_trajectories_lie_in_stack_span() {
        let case = storage_case();
        let model = reduce(&case).unwrap();
        let sys = assemble_descriptor(&model, 0.25).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = 60;
        let u = DMatrix::from_fn(t, case.n_u(), |_, _| rng.random_range(-10.0..10.0));
        let w = DMatrix::from_fn(t, case.n_w(), |_, _| rng.random_range(0.0..20.0));
        let log = simulate(&sys, &dvector![50.0], &u, &w).unwrap();
        let stack = build_simplified_stack(&log, &model.storage_selector, 1, 3).unwrap();

        // a fresh trajectory of matching depth
        let u2 = DMatrix::from_fn(4, case.n_u(), |_, _| rng.random_range(-10.0..10.0));
        let w2 = DMatrix::from_fn(4, case.n_w(), |_, _| rng.random_range(0.0..20.0));
        let fresh = simulate(&sys, &dvector![32.0], &u2, &w2).unwrap();

        // target: [s(0); e(0); u(1..4); w(1..4); y(1..4)]
        let sel = &model.storage_selector;
        let u0 = DVector::from_iterator(case.n_u(), fresh.u.row(0).iter().copied());
        let mut target = Vec::new();
        target.extend((sel * u0).iter().copied());
        target.push(fresh.y[(0, 0)]);
        for k in 1..4 {
            target.extend(fresh.u.row(k).iter().copied());
        }
        for k in 1..4 {
            target.extend(fresh.w.row(k).iter().copied());
        }
        for k in 1..4 {
            target.extend(fresh.y.row(k).iter().copied());
        }
        let target = DVector::from_vec(target);
        let stacked = stack.stacked();
        let alpha = stacked.clone().svd(true, true).solve(&target, 1e-12).unwrap();
        let residual = (&stacked * alpha - &target).norm();
        assert!(residual < 1e-8, "residual {residual}");
    }

    #[test]
    fn truncation_preserves_exact_rank_span() {
        let case = storage_case();
        let model = reduce(&case).unwrap();
        let sys = assemble_descriptor(&model, 0.25).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = 50;
        let u = DMatrix::from_fn(t, case.n_u(), |_, _| rng.random_range(-10.0..10.0));
        let w = DMatrix::from_fn(t, case.n_w(), |_, _| rng.random_range(0.0..20.0));
        let log = simulate(&sys, &dvector![50.0], &u, &w).unwrap();
        let stack = build_simplified_stack(&log, &model.storage_selector, 1, 1).unwrap();

        // Noise-free simplified-stack rank: (s, e) past blocks contribute
        // 2 q T_ini free coordinates, the future inputs L (n_u + n_w), and
        // the future outputs are determined. Here 2·1 + 1·(2+1) = 5.
        let rank = {
            let m = stack.stacked();
            let sv = m.svd(false, false).singular_values;
            let largest = sv.max();
            sv.iter().filter(|s| **s > 1e-10 * largest).count()
        };
        assert_eq!(rank, 2 * 1 + (case.n_u() + case.n_w()));

        let truncated = truncate_rank(&stack, rank).unwrap();
        assert_eq!(truncated.cols(), rank);
        let rec = truncated.truncation.as_ref().unwrap();
        assert_eq!(rec.original_rank, rank);

        // principal angles between the column spaces are ~0: singular values
        // of Q1ᵀQ2 for orthonormal bases of both spans must all be 1
        let basis = |m: &DMatrix<f64>| {
            let svd = m.clone().svd(true, false);
            let u = svd.u.unwrap();
            let largest = svd.singular_values.max();
            let rank = svd
                .singular_values
                .iter()
                .filter(|s| **s > 1e-10 * largest)
                .count();
            u.columns(0, rank).clone_owned()
        };
        let q1 = basis(&stack.stacked());
        let q2 = basis(&truncated.stacked());
        assert_eq!(q1.ncols(), q2.ncols());
        let overlap = q1.transpose() * q2;
        let angles = overlap.svd(false, false).singular_values;
        assert!(angles.iter().all(|c| (c - 1.0).abs() < 1e-8));

        // target >= columns: unchanged
        let unchanged = truncate_rank(&stack, stack.cols() + 5).unwrap();
        assert_eq!(unchanged.cols(), stack.cols());
    }

    #[test]
    fn nullspace_substitution_examples() {
        let eye = DMatrix::<f64>::identity(2, 2);
        let sub = nullspace_substitution(&eye).unwrap();
        assert_eq!(sub.null_dim(), 0);
        assert!((sub.pinv.clone() - eye).abs().max() < 1e-12);

        let row = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let sub = nullspace_substitution(&row).unwrap();
        assert_eq!(sub.null_dim(), 1);
        let b = sub.null_basis.column(0);
        let expected = 1.0 / 2.0_f64.sqrt();
        assert!((b[0].abs() - expected).abs() < 1e-12);
        assert!((b[0] + b[1]).abs() < 1e-12);
        assert!((b.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nullspace_invariants_on_wide_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // wide W_F: null space larger than min(rows, cols); exercises the
        // basis completion path
        let w_f = DMatrix::from_fn(3, 10, |_, _| rng.random_range(-1.0..1.0));
        let mut sub = nullspace_substitution(&w_f).unwrap();
        assert_eq!(sub.null_dim(), 7);
        assert!((&w_f * &sub.null_basis).abs().max() < 1e-10);
        let gram = sub.null_basis.transpose() * &sub.null_basis;
        assert!((gram - DMatrix::identity(7, 7)).abs().max() < 1e-10);

        let forecast = &w_f * DVector::from_fn(10, |_, _| rng.random_range(-1.0..1.0));
        let alpha0 = sub.particular(&w_f, &forecast).unwrap();
        assert!((w_f * alpha0 - forecast).norm() < 1e-9);
    }

    #[test]
    fn infeasible_forecast_is_detected() {
        // rank-1 W_F with a forecast outside its range
        let w_f = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let mut sub = nullspace_substitution(&w_f).unwrap();
        let err = sub.particular(&w_f, &dvector![1.0, -1.0]).unwrap_err();
        assert!(matches!(err, HankelError::InfeasibleForecast { .. }));
    }

    #[test]
    fn strict_policy_enforces_bound() {
        let case = storage_case();
        let model = reduce(&case).unwrap();
        let sys = assemble_descriptor(&model, 0.25).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = 15; // below the strict bound (n_u+n_w+1)(L+2q) - 1 = 19 for L = 3
        let u = DMatrix::from_fn(t, case.n_u(), |_, _| rng.random_range(-10.0..10.0));
        let w = DMatrix::from_fn(t, case.n_w(), |_, _| rng.random_range(0.0..20.0));
        let log = simulate(&sys, &dvector![50.0], &u, &w).unwrap();

        let err = check_data_requirements(&log, 1, 1, 1, 3, PePolicy::Strict).unwrap_err();
        assert!(matches!(err, HankelError::InsufficientData(_)));
        let report = check_data_requirements(&log, 1, 1, 1, 3, PePolicy::Truncated).unwrap();
        assert_eq!(report.required_length, minimum_data_length(2, 1, 1, 1, 3));
        assert!(report.actual_length < report.required_length);
    }
}
