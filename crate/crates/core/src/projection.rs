//! Representation matrices, energy-threshold rank selection and projection
//! of gradients onto the orthogonal complement of the batch input span.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{ForwardTrace, ModelGraph, ParamGroup};
use crate::params::{ParamId, Slot};
use crate::svd::thin_svd;
use crate::tensor::Tensor;

/// Singular values below this fraction of the largest are numerical zeros.
pub const SIGMA_CLAMP: f64 = 1e-12;

/// Which side of the weight the captured input multiplies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// `W · x`: dense layers, projected as `g − g·B·Bᵀ`.
    Right,
    /// `X · W`: conv and attention, projected as `g − B·Bᵀ·g`.
    Left,
}

impl Side {
    pub fn of(id: &ParamId) -> Side {
        match id.slot {
            Slot::DenseW | Slot::Embed => Side::Right,
            _ => Side::Left,
        }
    }
}

/// Captured feature vectors stacked as columns, `feature_dim x columns`.
#[derive(Clone, Debug)]
pub struct RepresentationMatrix {
    pub owner: ParamId,
    pub mat: Tensor,
}

#[derive(Clone, Debug)]
pub struct CoreBasis {
    pub owner: ParamId,
    /// `feature_dim x k`, orthonormal columns.
    pub b: Tensor,
    pub side: Side,
    pub rank: usize,
    pub captured_energy_fraction: f64,
    /// Singular values of the representation matrix after clamping.
    pub singular_values: Vec<f64>,
}

impl CoreBasis {
    pub fn feature_dim(&self) -> usize {
        self.b.rows()
    }

    /// Cumulative energy fraction `Σ_{i≤j} σᵢ² / Σ σᵢ²` for each `j`.
    pub fn energy_curve(&self) -> Vec<f64> {
        cumulative_energy(&self.singular_values)
    }
}

pub fn cumulative_energy(sigma: &[f64]) -> Vec<f64> {
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    let mut acc = 0.0;
    sigma
        .iter()
        .map(|s| {
            acc += s * s;
            if total > 0.0 {
                acc / total
            } else {
                1.0
            }
        })
        .collect()
}

pub fn capture_representation(trace: &ForwardTrace, owner: &ParamId) -> Result<RepresentationMatrix> {
    let rows = trace
        .captured_rows(owner)
        .ok_or_else(|| Error::MissingCapture(owner.to_string()))?;
    if rows.rows() == 0 {
        return Err(Error::Empty { op: "capture_representation" });
    }
    Ok(RepresentationMatrix {
        owner: *owner,
        mat: rows.transpose()?,
    })
}

fn clamp(sigma: &[f64]) -> Vec<f64> {
    let max = sigma.first().copied().unwrap_or(0.0);
    sigma
        .iter()
        .map(|&s| if s < SIGMA_CLAMP * max { 0.0 } else { s })
        .collect()
}

/// Smallest `k` whose leading singular values carry a `tau` fraction of the
/// total energy. At `tau = 1` this is the count of non-clamped values.
pub fn select_rank(singular_values: &[f64], tau: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("tau {tau} outside [0, 1]")));
    }
    if singular_values.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::InvalidArgument("singular values must be finite and non-negative".into()));
    }
    if singular_values.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::InvalidArgument("singular values must be non-increasing".into()));
    }
    let sigma = clamp(singular_values);
    let nonzero = sigma.iter().take_while(|&&s| s > 0.0).count();
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return Ok(0);
    }
    if tau >= 1.0 {
        return Ok(nonzero);
    }
    let target = tau * total;
    let mut acc = 0.0;
    for (i, s) in sigma[..nonzero].iter().enumerate() {
        if acc >= target {
            return Ok(i);
        }
        acc += s * s;
    }
    Ok(nonzero)
}

pub fn core_basis(r: &RepresentationMatrix, tau: f64) -> Result<CoreBasis> {
    let f = thin_svd(&r.mat)?;
    let sigma = clamp(&f.s);
    let k = select_rank(&f.s, tau)?;
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    let kept: f64 = sigma[..k].iter().map(|s| s * s).sum();
    Ok(CoreBasis {
        owner: r.owner,
        b: f.u.columns(0, k)?,
        side: Side::of(&r.owner),
        rank: k,
        captured_energy_fraction: if total > 0.0 { kept / total } else { 1.0 },
        singular_values: sigma,
    })
}

/// Removes the component of `grad` lying in the span of the basis.
pub fn project(grad: &Tensor, basis: &CoreBasis) -> Result<Tensor> {
    if grad.ndim() != 2 {
        return Err(shape_err("project", "2-D", grad.shape()));
    }
    let fd = basis.feature_dim();
    match basis.side {
        Side::Right if grad.cols() != fd => return Err(shape_err("project", ["_", &fd.to_string()], grad.shape())),
        Side::Left if grad.rows() != fd => return Err(shape_err("project", [&fd.to_string(), "_"], grad.shape())),
        _ => {}
    }
    if basis.rank == 0 {
        return Ok(grad.clone());
    }
    let b = &basis.b;
    let inside = match basis.side {
        Side::Right => grad.matmul(b)?.matmul_t(b)?,
        Side::Left => b.matmul(&b.t_matmul(grad)?)?,
    };
    grad.sub(&inside)
}

/// One basis per parameter group, shared by all of the group's members.
#[derive(Clone, Debug, Default)]
pub struct BasisMap {
    bases: Vec<CoreBasis>,
    index: BTreeMap<ParamId, usize>,
}

impl BasisMap {
    pub fn get(&self, id: &ParamId) -> Option<&CoreBasis> {
        self.index.get(id).map(|&i| &self.bases[i])
    }

    pub fn bases(&self) -> &[CoreBasis] {
        &self.bases
    }

    /// Number of SVDs performed to build the map.
    pub fn svd_calls(&self) -> usize {
        self.bases.len()
    }

    pub fn covers(&self, id: &ParamId) -> bool {
        self.index.contains_key(id)
    }

    /// Selected rank per group key.
    pub fn ranks(&self) -> Vec<(ParamId, usize)> {
        self.bases.iter().map(|b| (b.owner, b.rank)).collect()
    }
}

pub fn build_group_basis(trace: &ForwardTrace, group: &ParamGroup, tau: f64) -> Result<CoreBasis> {
    let r = capture_representation(trace, &group.key)?;
    let mut basis = core_basis(&r, tau)?;
    basis.side = group.side;
    Ok(basis)
}

/// Builds every group's basis from one trace. Groups are independent and
/// computed in parallel; results do not depend on the thread count.
pub fn build_all_bases(model: &ModelGraph, trace: &ForwardTrace, tau: f64) -> Result<BasisMap> {
    if trace.version != model.version() {
        return Err(Error::StaleTrace {
            trace: trace.version,
            model: model.version(),
        });
    }
    let groups = model.param_groups();
    let bases = groups
        .par_iter()
        .map(|g| build_group_basis(trace, g, tau))
        .collect::<Result<Vec<_>>>()?;
    let mut index = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        for m in &g.members {
            index.insert(*m, i);
        }
    }
    Ok(BasisMap { bases, index })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn basis_from(mat: Tensor, side: Side, tau: f64) -> CoreBasis {
        let owner = match side {
            Side::Right => ParamId::dense(0),
            Side::Left => ParamId::new(0, Slot::ConvW),
        };
        core_basis(&RepresentationMatrix { owner, mat }, tau).unwrap()
    }

    #[test]
    fn select_rank_examples() {
        assert_eq!(select_rank(&[2.0, 1.0, 1.0], 1.0).unwrap(), 3);
        assert_eq!(select_rank(&[2.0, 1.0, 1.0], 0.8).unwrap(), 2);
        assert_eq!(select_rank(&[5.0, 5e-15], 1.0).unwrap(), 1);
        assert_eq!(select_rank(&[0.0, 0.0], 1.0).unwrap(), 0);
        assert_eq!(select_rank(&[2.0, 1.0], 0.0).unwrap(), 0);
    }

    #[test]
    fn select_rank_rejects_bad_input() {
        assert!(select_rank(&[1.0, 2.0], 0.5).is_err());
        assert!(select_rank(&[1.0], 1.5).is_err());
        assert!(select_rank(&[1.0], -0.1).is_err());
    }

    #[test]
    fn orthogonal_columns_span() {
        let r = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 0.0]]);
        let b = basis_from(r, Side::Left, 1.0);
        assert_eq!(b.rank, 2);
        let e3 = Tensor::from_rows(&[&[0.0], &[0.0], &[1.0]]);
        assert_eq!(b.b.t_matmul(&e3).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn parallel_columns_give_rank_one() {
        let r = Tensor::from_rows(&[&[1.0, 2.0, -3.0], &[2.0, 4.0, -6.0]]);
        for tau in [0.1, 0.5, 1.0] {
            assert_eq!(basis_from(r.clone(), Side::Left, tau).rank, 1);
        }
    }

    #[test]
    fn energy_bisection() {
        let r = SeededRng::new(4).normal(&[8, 20]);
        let b = basis_from(r, Side::Left, 0.9);
        assert!(b.captured_energy_fraction >= 0.9);
        let curve = b.energy_curve();
        assert!(b.rank >= 1 && curve[b.rank - 2] < 0.9);
    }

    #[test]
    fn projection_edge_cases() {
        let g = SeededRng::new(5).normal(&[3, 4]);
        let empty = basis_from(Tensor::zeros(&[4, 2]), Side::Right, 1.0);
        assert_eq!(empty.rank, 0);
        assert_eq!(project(&g, &empty).unwrap(), g);
        let full = basis_from(SeededRng::new(6).normal(&[4, 6]), Side::Right, 1.0);
        assert_eq!(full.rank, 4);
        assert!(project(&g, &full).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn orthogonal_rank_one_gradient_is_untouched() {
        let r = Tensor::from_rows(&[&[1.0], &[0.0], &[0.0]]);
        let b = basis_from(r, Side::Right, 1.0);
        let g = Tensor::from_rows(&[&[0.0, 2.0, 3.0], &[0.0, -1.0, 0.5]]);
        assert!(project(&g, &b).unwrap().sub(&g).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let b = basis_from(SeededRng::new(7).normal(&[3, 2]), Side::Left, 1.0);
        assert!(project(&Tensor::zeros(&[4, 2]), &b).is_err());
    }
}
