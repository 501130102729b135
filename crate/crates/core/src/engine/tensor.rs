//! Dense tables over products of per-site grids.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::par;

/// Values over the product grid of the sites in `scope` (ascending site indices,
/// last site fastest). Each site contributes `nodes` grid points.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub nodes: usize,
    pub scope: Vec<usize>,
    pub data: Arc<Vec<f64>>,
    /// Two-site table with `t[a, b] = t[b, a]`; lets contractions pick the contiguous orientation.
    pub symmetric: bool,
}

impl Tensor {
    pub fn scalar(nodes: usize, v: f64) -> Self {
        Self {
            nodes,
            scope: Vec::new(),
            data: Arc::new(vec![v]),
            symmetric: false,
        }
    }

    pub fn new(nodes: usize, scope: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if scope.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter(format!(
                "tensor scope {scope:?} must be strictly increasing"
            )));
        }
        let expected = checked_len(nodes, scope.len())
            .ok_or_else(|| Error::InvalidParameter("tensor size overflows".into()))?;
        if data.len() != expected {
            return Err(Error::InvalidParameter(format!(
                "tensor over {} sites needs {expected} entries, got {}",
                scope.len(),
                data.len()
            )));
        }
        Ok(Self {
            nodes,
            scope,
            data: Arc::new(data),
            symmetric: false,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.scope.is_empty()
    }

    pub fn scalar_value(&self) -> Option<f64> {
        self.is_scalar().then(|| self.data[0])
    }

    pub fn contains(&self, site: usize) -> bool {
        self.scope.binary_search(&site).is_ok()
    }

    fn stride_of(&self, pos: usize) -> usize {
        self.nodes.pow((self.scope.len() - 1 - pos) as u32)
    }

    /// Value at a full-window assignment of grid indices.
    pub fn value_at(&self, config: &[usize]) -> f64 {
        let mut k = 0;
        for &s in &self.scope {
            k = k * self.nodes + config[s];
        }
        self.data[k]
    }

    /// Per-site grid indices of flat index `k`.
    pub fn digits(&self, mut k: usize) -> Vec<usize> {
        let mut d = vec![0; self.scope.len()];
        for a in (0..self.scope.len()).rev() {
            d[a] = k % self.nodes;
            k /= self.nodes;
        }
        d
    }

    pub fn max_min(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::NEG_INFINITY, f64::INFINITY), |(hi, lo), v| {
                (hi.max(*v), lo.min(*v))
            })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Sync + Send) -> Tensor {
        let data = par::map_collect(self.len(), |k| f(self.data[k]));
        Tensor {
            data: Arc::new(data),
            symmetric: self.symmetric,
            ..self.clone()
        }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| c * v)
    }

    /// Re-tabulates over a superset scope (values constant along the new sites).
    pub fn broadcast(&self, scope: &[usize], limit: usize) -> Result<Tensor> {
        contract(self.nodes, &[self], None, scope, limit)
    }

    /// Largest spread of the table along one site's grid, over all other coordinates.
    pub fn spread_along(&self, site: usize) -> f64 {
        let Ok(pos) = self.scope.binary_search(&site) else {
            return 0.0;
        };
        let stride = self.stride_of(pos);
        let n = self.nodes;
        let outer = self.len() / (stride * n);
        let mut worst: f64 = 0.0;
        for o in 0..outer {
            for i in 0..stride {
                let base = o * stride * n + i;
                let (mut hi, mut lo) = (f64::NEG_INFINITY, f64::INFINITY);
                for g in 0..n {
                    let v = self.data[base + g * stride];
                    hi = hi.max(v);
                    lo = lo.min(v);
                }
                worst = worst.max(hi - lo);
            }
        }
        worst
    }
}

pub(crate) fn checked_len(nodes: usize, sites: usize) -> Option<usize> {
    let mut n: usize = 1;
    for _ in 0..sites {
        n = n.checked_mul(nodes)?;
    }
    Some(n)
}

pub(crate) fn union_scope<'a>(scopes: impl IntoIterator<Item = &'a [usize]>) -> Vec<usize> {
    let mut out: Vec<usize> = scopes.into_iter().flatten().copied().collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// `out[y] = Σ_g Π_f f[y, g]` over the grid of `sum_over` (or the plain product when `None`).
///
/// Every factor's scope must lie in `out_scope ∪ {sum_over}`.
pub fn contract(
    nodes: usize,
    factors: &[&Tensor],
    sum_over: Option<usize>,
    out_scope: &[usize],
    limit: usize,
) -> Result<Tensor> {
    let out_len = checked_len(nodes, out_scope.len()).unwrap_or(usize::MAX);
    if out_len > limit {
        return Err(Error::TooLarge {
            sites: out_scope.len(),
            entries: out_len,
            limit,
        });
    }
    let nf = factors.len();
    // per factor: stride for each output position, and stride along the summed site
    let mut out_strides = vec![vec![0usize; out_scope.len()]; nf];
    let mut sum_strides = vec![0usize; nf];
    for (fi, f) in factors.iter().enumerate() {
        let mut strides: Vec<usize> = (0..f.scope.len()).map(|p| f.stride_of(p)).collect();
        if f.symmetric && f.scope.len() == 2 && sum_over == Some(f.scope[0]) {
            // read t[b, a] instead of t[a, b] so the summed index is contiguous
            strides.swap(0, 1);
        }
        for (p, s) in f.scope.iter().enumerate() {
            if Some(*s) == sum_over {
                sum_strides[fi] = strides[p];
            } else {
                let pos = out_scope.binary_search(s).map_err(|_| {
                    Error::InvalidParameter(format!(
                        "factor site {s} missing from contraction scope {out_scope:?}"
                    ))
                })?;
                out_strides[fi][pos] = strides[p];
            }
        }
    }
    let datas: Vec<&[f64]> = factors.iter().map(|f| f.data.as_slice()).collect();
    let inner = if sum_over.is_some() { nodes } else { 1 };
    let d = out_scope.len();
    let mut out = vec![0.0; out_len];
    let block = 256usize.max(out_len / 4096).min(65_536);
    par::fill_blocks(&mut out, block, |start, blk| {
        // decode the first index, then advance like an odometer
        let mut digits = vec![0usize; d];
        let mut k = start;
        for a in (0..d).rev() {
            digits[a] = k % nodes;
            k /= nodes;
        }
        let mut bases: Vec<usize> = (0..nf)
            .map(|fi| (0..d).map(|a| digits[a] * out_strides[fi][a]).sum())
            .collect();
        for slot in blk.iter_mut() {
            let mut acc = 0.0;
            match nf {
                1 => {
                    let (d0, b0, s0) = (datas[0], bases[0], sum_strides[0]);
                    for g in 0..inner {
                        acc += d0[b0 + g * s0];
                    }
                }
                2 => {
                    let (d0, b0, s0) = (datas[0], bases[0], sum_strides[0]);
                    let (d1, b1, s1) = (datas[1], bases[1], sum_strides[1]);
                    for g in 0..inner {
                        acc += d0[b0 + g * s0] * d1[b1 + g * s1];
                    }
                }
                3 => {
                    let (d0, b0, s0) = (datas[0], bases[0], sum_strides[0]);
                    let (d1, b1, s1) = (datas[1], bases[1], sum_strides[1]);
                    let (d2, b2, s2) = (datas[2], bases[2], sum_strides[2]);
                    for g in 0..inner {
                        acc += d0[b0 + g * s0] * d1[b1 + g * s1] * d2[b2 + g * s2];
                    }
                }
                _ => {
                    for g in 0..inner {
                        let mut p = 1.0;
                        for fi in 0..nf {
                            p *= datas[fi][bases[fi] + g * sum_strides[fi]];
                        }
                        acc += p;
                    }
                }
            }
            *slot = acc;
            // advance the odometer
            let mut a = d;
            while a > 0 {
                a -= 1;
                digits[a] += 1;
                for fi in 0..nf {
                    bases[fi] += out_strides[fi][a];
                }
                if digits[a] < nodes {
                    break;
                }
                for fi in 0..nf {
                    bases[fi] -= nodes * out_strides[fi][a];
                }
                digits[a] = 0;
            }
        }
    });
    Ok(Tensor {
        nodes,
        scope: out_scope.to_vec(),
        data: Arc::new(out),
        symmetric: false,
    })
}

/// Sums out `eliminate` from the product of `factors` by greedy variable elimination,
/// returning the product of everything that remains.
pub fn eliminate(
    nodes: usize,
    mut factors: Vec<Tensor>,
    eliminate: &[usize],
    limit: usize,
) -> Result<Tensor> {
    let mut todo: Vec<usize> = eliminate.to_vec();
    while !todo.is_empty() {
        // pick the site whose elimination leaves the smallest table
        let mut best: Option<(usize, usize, Vec<usize>)> = None;
        for (ti, &v) in todo.iter().enumerate() {
            let scope: Vec<usize> = union_scope(
                factors
                    .iter()
                    .filter(|f| f.contains(v))
                    .map(|f| f.scope.as_slice()),
            )
            .into_iter()
            .filter(|s| *s != v)
            .collect();
            if best.as_ref().is_none_or(|b| scope.len() < b.2.len()) {
                best = Some((ti, v, scope));
            }
        }
        let (ti, v, scope) = best.expect("nonempty");
        todo.swap_remove(ti);
        let (with, without): (Vec<Tensor>, Vec<Tensor>) =
            factors.into_iter().partition(|f| f.contains(v));
        factors = without;
        if with.is_empty() {
            // a free site integrates each grid point with unit weight
            factors.push(Tensor::scalar(nodes, nodes as f64));
            continue;
        }
        let refs: Vec<&Tensor> = with.iter().collect();
        factors.push(contract(nodes, &refs, Some(v), &scope, limit)?);
    }
    multiply_all(nodes, factors, limit)
}

/// Product of tables over the union of their scopes; scalars are folded first.
pub fn multiply_all(nodes: usize, factors: Vec<Tensor>, limit: usize) -> Result<Tensor> {
    let mut scalar = 1.0;
    let mut rest = Vec::new();
    for f in factors {
        match f.scalar_value() {
            Some(v) => scalar *= v,
            None => rest.push(f),
        }
    }
    if rest.is_empty() {
        return Ok(Tensor::scalar(nodes, scalar));
    }
    let scope = union_scope(rest.iter().map(|f| f.scope.as_slice()));
    let t = if rest.len() == 1 && rest[0].scope == scope {
        rest.pop().expect("one factor")
    } else {
        let refs: Vec<&Tensor> = rest.iter().collect();
        contract(nodes, &refs, None, &scope, limit)?
    };
    Ok(if scalar == 1.0 { t } else { t.scale(scalar) })
}

/// A function on the window's product grid, stored as a sum of tables over small scopes.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    pub nodes: usize,
    pub terms: Vec<Tensor>,
}

impl GridFunction {
    pub fn constant(nodes: usize, c: f64) -> Self {
        Self {
            nodes,
            terms: vec![Tensor::scalar(nodes, c)],
        }
    }

    pub fn from_tensor(t: Tensor) -> Self {
        Self {
            nodes: t.nodes,
            terms: vec![t],
        }
    }

    /// `Σ_s values_s(x_s)` with one table per listed site.
    pub fn site_sum(nodes: usize, per_site: Vec<(usize, Vec<f64>)>) -> Result<Self> {
        let terms = per_site
            .into_iter()
            .map(|(s, v)| Tensor::new(nodes, vec![s], v))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { nodes, terms })
    }

    pub fn add(&self, other: &GridFunction) -> GridFunction {
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        GridFunction {
            nodes: self.nodes,
            terms,
        }
    }

    pub fn scale(&self, c: f64) -> GridFunction {
        GridFunction {
            nodes: self.nodes,
            terms: self.terms.iter().map(|t| t.scale(c)).collect(),
        }
    }

    pub fn scope(&self) -> Vec<usize> {
        union_scope(self.terms.iter().map(|t| t.scope.as_slice()))
    }

    pub fn depends_on(&self, site: usize) -> bool {
        self.terms.iter().any(|t| t.contains(site))
    }

    pub fn value_at(&self, config: &[usize]) -> f64 {
        self.terms.iter().map(|t| t.value_at(config)).sum()
    }

    pub fn scalar_value(&self) -> Option<f64> {
        if self.terms.iter().all(|t| t.is_scalar()) {
            Some(self.terms.iter().map(|t| t.data[0]).sum())
        } else {
            None
        }
    }

    /// Folds terms into as few tables as possible without enlarging any scope.
    pub fn merged(&self) -> GridFunction {
        let mut sorted: Vec<Tensor> = self.terms.clone();
        sorted.sort_by(|a, b| {
            b.scope
                .len()
                .cmp(&a.scope.len())
                .then(a.scope.cmp(&b.scope))
        });
        let mut kept: Vec<Tensor> = Vec::new();
        for t in sorted {
            match kept
                .iter_mut()
                .find(|k| t.scope.iter().all(|s| k.contains(*s)))
            {
                Some(k) => add_into(k, &t),
                None => kept.push(t),
            }
        }
        if kept.is_empty() {
            kept.push(Tensor::scalar(self.nodes, 0.0));
        }
        GridFunction {
            nodes: self.nodes,
            terms: kept,
        }
    }

    /// One table over the whole scope.
    pub fn dense(&self, limit: usize) -> Result<Tensor> {
        let scope = self.scope();
        let len = checked_len(self.nodes, scope.len()).unwrap_or(usize::MAX);
        if len > limit {
            return Err(Error::TooLarge {
                sites: scope.len(),
                entries: len,
                limit,
            });
        }
        let mut acc = Tensor {
            nodes: self.nodes,
            scope: scope.clone(),
            data: Arc::new(vec![0.0; len]),
            symmetric: false,
        };
        for t in &self.terms {
            add_into(&mut acc, t);
        }
        Ok(acc)
    }

    /// `max − min` over the product grid of the remaining coordinates.
    pub fn spread(&self, limit: usize) -> Result<f64> {
        if self.scalar_value().is_some() {
            return Ok(0.0);
        }
        let (hi, lo) = self.dense(limit)?.max_min();
        Ok(hi - lo)
    }
}

/// `acc += t` where `t.scope ⊆ acc.scope`.
fn add_into(acc: &mut Tensor, t: &Tensor) {
    let n = acc.nodes;
    let d = acc.scope.len();
    let strides: Vec<usize> = acc
        .scope
        .iter()
        .map(|s| match t.scope.binary_search(s) {
            Ok(p) => t.stride_of(p),
            Err(_) => 0,
        })
        .collect();
    acc.symmetric = false;
    let data = Arc::make_mut(&mut acc.data);
    let mut digits = vec![0usize; d];
    let mut base = 0usize;
    for slot in data.iter_mut() {
        *slot += t.data[base];
        let mut a = d;
        while a > 0 {
            a -= 1;
            digits[a] += 1;
            base += strides[a];
            if digits[a] < n {
                break;
            }
            base -= n * strides[a];
            digits[a] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(scope: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(2, scope, data).unwrap()
    }

    #[test]
    fn contraction_matches_naive_sum() {
        // a[x0,x1], b[x1,x2]; sum over x1
        let a = t(vec![0, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let b = t(vec![1, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let c = contract(2, &[&a, &b], Some(1), &[0, 2], usize::MAX).unwrap();
        let mut expect = vec![0.0; 4];
        for x0 in 0..2 {
            for x2 in 0..2 {
                for x1 in 0..2 {
                    expect[x0 * 2 + x2] += a.data[x0 * 2 + x1] * b.data[x1 * 2 + x2];
                }
            }
        }
        assert_eq!(*c.data, expect);
    }

    #[test]
    fn symmetric_orientation_is_equivalent() {
        let k = vec![1.0, 2.0, 2.0, 5.0];
        let plain = t(vec![0, 1], k.clone());
        let mut sym = plain.clone();
        sym.symmetric = true;
        let f = t(vec![0], vec![0.5, 1.5]);
        let a = contract(2, &[&plain, &f], Some(0), &[1], usize::MAX).unwrap();
        let b = contract(2, &[&sym, &f], Some(0), &[1], usize::MAX).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn elimination_total_equals_brute_force() {
        let n = 3;
        let a = Tensor::new(n, vec![0, 1], (0..9).map(|v| 1.0 + v as f64).collect()).unwrap();
        let b = Tensor::new(
            n,
            vec![1, 2],
            (0..9).map(|v| 0.5 + (v as f64).sin()).collect(),
        )
        .unwrap();
        let c = Tensor::new(n, vec![2], vec![1.0, 0.2, 0.7]).unwrap();
        let r = eliminate(
            n,
            vec![a.clone(), b.clone(), c.clone()],
            &[0, 1, 2],
            usize::MAX,
        )
        .unwrap();
        let mut brute = 0.0;
        for x0 in 0..n {
            for x1 in 0..n {
                for x2 in 0..n {
                    brute += a.data[x0 * n + x1] * b.data[x1 * n + x2] * c.data[x2];
                }
            }
        }
        assert!((r.scalar_value().unwrap() - brute).abs() < 1e-12);
    }

    #[test]
    fn size_guard() {
        let a = Tensor::new(10, vec![0, 1], vec![1.0; 100]).unwrap();
        let e = contract(10, &[&a], None, &[0, 1], 50).unwrap_err();
        assert!(matches!(e, Error::TooLarge { .. }));
    }

    #[test]
    fn merge_folds_subsets() {
        let f = GridFunction {
            nodes: 2,
            terms: vec![
                t(vec![0], vec![1.0, 2.0]),
                t(vec![0, 1], vec![0.0, 1.0, 2.0, 3.0]),
                Tensor::scalar(2, 10.0),
            ],
        };
        let m = f.merged();
        assert_eq!(m.terms.len(), 1);
        for x0 in 0..2 {
            for x1 in 0..2 {
                assert_eq!(m.value_at(&[x0, x1]), f.value_at(&[x0, x1]));
            }
        }
        assert_eq!(f.spread(100).unwrap(), 4.0);
    }
}
