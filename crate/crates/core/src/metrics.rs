//! Objectives and evaluation metrics: Chamfer distances, the reconstruction
//! loss, MST-based tree and expansion losses, F-score, fidelity and MMD.
//!
//! Nearest-neighbour ties resolve to the lowest index everywhere, and
//! gradients flow to that single pair.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{CustomOp, Var};
use crate::error::{Error, Result};
use crate::points::{sqdist, PointCloud};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Norm {
    /// Euclidean distance.
    L1,
    /// Squared Euclidean distance.
    L2,
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Norm::L1 => "l1",
            Norm::L2 => "l2",
        })
    }
}

impl FromStr for Norm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(Norm::L1),
            "l2" => Ok(Norm::L2),
            o => Err(Error::Config(format!("unknown norm '{o}'"))),
        }
    }
}

/// For each row of `a`, the index of and squared distance to its nearest row
/// of `b`.
pub fn nearest(a: &Tensor, b: &Tensor) -> Vec<(usize, f64)> {
    let bd = b.data();
    (0..a.rows())
        .map(|i| {
            let p = a.row(i);
            let mut best = (0, f64::INFINITY);
            for (j, q) in bd.chunks_exact(3).enumerate() {
                let d = sqdist(p, q);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .collect()
}

fn directed(nn: &[(usize, f64)], norm: Norm) -> f64 {
    let s: f64 = nn
        .iter()
        .map(|&(_, d)| match norm {
            Norm::L1 => d.sqrt(),
            Norm::L2 => d,
        })
        .sum();
    s / nn.len() as f64
}

fn check_cloud(t: &Tensor, what: &'static str) -> Result<()> {
    if t.cols() != 3 || t.shape().len() != 2 {
        return Err(Error::dim(what, t.shape(), &[0, 3]));
    }
    if t.rows() == 0 {
        return Err(Error::Empty(what));
    }
    Ok(())
}

/// Symmetric Chamfer distance: mean nearest distance from `a` to `b` plus
/// from `b` to `a`.
pub fn chamfer(a: &PointCloud, b: &PointCloud, norm: Norm) -> f64 {
    chamfer_tensors(a.tensor(), b.tensor(), norm).expect("point clouds are nonempty [n,3]")
}

pub fn chamfer_tensors(a: &Tensor, b: &Tensor, norm: Norm) -> Result<f64> {
    check_cloud(a, "chamfer")?;
    check_cloud(b, "chamfer")?;
    Ok(directed(&nearest(a, b), norm) + directed(&nearest(b, a), norm))
}

struct ChamferOp {
    norm: Norm,
    ab: Vec<(usize, f64)>,
    ba: Vec<(usize, f64)>,
}

/// d/dp of the per-pair distance, scaled by `w`.
fn pair_grad(p: &[f64], q: &[f64], d2: f64, norm: Norm, w: f64) -> [f64; 3] {
    let f = match norm {
        Norm::L2 => 2.0 * w,
        Norm::L1 => {
            if d2 > 0.0 {
                w / d2.sqrt()
            } else {
                0.0
            }
        }
    };
    [f * (p[0] - q[0]), f * (p[1] - q[1]), f * (p[2] - q[2])]
}

impl CustomOp for ChamferOp {
    fn name(&self) -> &'static str {
        "chamfer"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (a, b) = (inputs[0], inputs[1]);
        let g = grad.item();
        let mut ga = Tensor::zeros(a.shape());
        let mut gb = Tensor::zeros(b.shape());
        let wa = g / a.rows() as f64;
        for (i, &(j, d2)) in self.ab.iter().enumerate() {
            let v = pair_grad(a.row(i), b.row(j), d2, self.norm, wa);
            for k in 0..3 {
                ga.row_mut(i)[k] += v[k];
                gb.row_mut(j)[k] -= v[k];
            }
        }
        let wb = g / b.rows() as f64;
        for (j, &(i, d2)) in self.ba.iter().enumerate() {
            let v = pair_grad(b.row(j), a.row(i), d2, self.norm, wb);
            for k in 0..3 {
                gb.row_mut(j)[k] += v[k];
                ga.row_mut(i)[k] -= v[k];
            }
        }
        vec![Some(ga), Some(gb)]
    }
}

/// Differentiable Chamfer distance between two recorded `[n, 3]` sets.
pub fn chamfer_var<'g>(a: Var<'g>, b: Var<'g>, norm: Norm) -> Result<Var<'g>> {
    let (av, bv) = (a.value(), b.value());
    check_cloud(&av, "chamfer")?;
    check_cloud(&bv, "chamfer")?;
    let ab = nearest(&av, &bv);
    let ba = nearest(&bv, &av);
    let value = directed(&ab, norm) + directed(&ba, norm);
    Ok(a.graph().custom(&[a, b], Tensor::scalar(value), Box::new(ChamferOp { norm, ab, ba })))
}

/// `CD_l1(s, g) + CD_l1(p, g)` with `s` the new hyperpoints, `p` the
/// completed cloud and `g` the ground truth.
pub fn reconstruction_loss(s: &PointCloud, p: &PointCloud, g: &PointCloud) -> f64 {
    chamfer(s, g, Norm::L1) + chamfer(p, g, Norm::L1)
}

pub fn reconstruction_loss_var<'g>(s: Var<'g>, p: Var<'g>, g: Var<'g>) -> Result<Var<'g>> {
    chamfer_var(s, g, Norm::L1)?.add(&chamfer_var(p, g, Norm::L1)?)
}

/// Euclidean minimum spanning tree.
#[derive(Clone, Debug, PartialEq)]
pub struct MstEdges {
    /// `(parent, child, length)` in the order Prim attached them.
    pub edges: Vec<(usize, usize, f64)>,
    /// Mean edge length.
    pub eta: f64,
}

impl MstEdges {
    pub fn total(&self) -> f64 {
        self.edges.iter().map(|e| e.2).sum()
    }
}

/// Dense Prim from vertex 0; ties go to the lowest vertex index and, for a
/// fixed vertex, to its earliest-attached parent.
pub fn mst(points: &Tensor) -> Result<MstEdges> {
    check_cloud(points, "mst")?;
    let n = points.rows();
    if n < 2 {
        return Err(Error::Input(format!("mst needs at least 2 points, got {n}")));
    }
    let mut in_tree = vec![false; n];
    let mut key = vec![f64::INFINITY; n];
    let mut parent = vec![0usize; n];
    let mut edges = Vec::with_capacity(n - 1);
    let mut cur = 0;
    in_tree[0] = true;
    for _ in 1..n {
        let c = points.row(cur);
        let mut best = usize::MAX;
        let mut best_key = f64::INFINITY;
        for v in 0..n {
            if in_tree[v] {
                continue;
            }
            let d = sqdist(points.row(v), c);
            if d < key[v] {
                key[v] = d;
                parent[v] = cur;
            }
            if best == usize::MAX || key[v] < best_key {
                best_key = key[v];
                best = v;
            }
        }
        in_tree[best] = true;
        edges.push((parent[best], best, best_key.sqrt()));
        cur = best;
    }
    let eta = edges.iter().map(|e| e.2).sum::<f64>() / edges.len() as f64;
    Ok(MstEdges { edges, eta })
}

fn qualifying(tree: &MstEdges, zeta: f64) -> impl Iterator<Item = &(usize, usize, f64)> {
    let cut = zeta * tree.eta;
    tree.edges.iter().filter(move |e| e.2 >= cut)
}

/// Sum of MST edge lengths that reach `zeta` times the mean edge length.
pub fn tree_loss(points: &Tensor, zeta: f64) -> Result<f64> {
    if !(zeta > 0.0) {
        return Err(Error::Contract(format!("zeta must be positive, got {zeta}")));
    }
    let t = mst(points)?;
    Ok(qualifying(&t, zeta).map(|e| e.2).sum())
}

/// Counters from one expansion-loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ExpansionStats {
    pub mst_evaluations: usize,
    pub skipped_patches: usize,
}

/// `(u, v)` pairs whose lengths make up the expansion loss. Rows index the
/// stacked `[completed; centers]` array.
fn expansion_pairs(centers: &Tensor, completed: &Tensor, zeta: f64, k: usize) -> Result<(Vec<(usize, usize)>, ExpansionStats)> {
    if !(zeta > 0.0) {
        return Err(Error::Contract(format!("zeta must be positive, got {zeta}")));
    }
    check_cloud(centers, "expansion_loss centers")?;
    check_cloud(completed, "expansion_loss points")?;
    if k == 0 || completed.rows() != centers.rows() * k {
        return Err(Error::Input(format!(
            "expansion_loss: {} points do not split into {} patches of {k}",
            completed.rows(),
            centers.rows()
        )));
    }
    let offset = completed.rows();
    let mut stats = ExpansionStats::default();
    let mut pairs = Vec::new();
    let mut local = Vec::with_capacity((k + 1) * 3);
    for j in 0..centers.rows() {
        // vertex 0 is the center, 1..=k the patch
        let global = |v: usize| if v == 0 { offset + j } else { j * k + v - 1 };
        local.clear();
        local.extend_from_slice(centers.row(j));
        for r in 0..k {
            local.extend_from_slice(completed.row(j * k + r));
        }
        let tree = mst(&Tensor::from_parts(vec![k + 1, 3], local.clone()))?;
        stats.mst_evaluations += 1;
        pairs.extend(qualifying(&tree, zeta).map(|e| (global(e.0), global(e.1))));
    }
    Ok((pairs, stats))
}

/// Per-patch tree loss summed over all new hyperpoints. Patch `j` is
/// `completed[j·k .. (j+1)·k]` together with `centers[j]`.
pub fn expansion_loss(centers: &Tensor, completed: &Tensor, zeta: f64, k: usize) -> Result<(f64, ExpansionStats)> {
    let (pairs, stats) = expansion_pairs(centers, completed, zeta, k)?;
    let row = |i: usize| {
        if i < completed.rows() {
            completed.row(i)
        } else {
            centers.row(i - completed.rows())
        }
    };
    let v = pairs.iter().map(|&(u, w)| sqdist(row(u), row(w)).sqrt()).sum();
    Ok((v, stats))
}

struct PairDistSum {
    pairs: Vec<(usize, usize)>,
}

impl CustomOp for PairDistSum {
    fn name(&self) -> &'static str {
        "pair_dist_sum"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let mut gx = Tensor::zeros(x.shape());
        for &(u, v) in &self.pairs {
            let d2 = sqdist(x.row(u), x.row(v));
            let g = pair_grad(x.row(u), x.row(v), d2, Norm::L1, grad.item());
            for k in 0..3 {
                gx.row_mut(u)[k] += g[k];
                gx.row_mut(v)[k] -= g[k];
            }
        }
        vec![Some(gx)]
    }
}

/// Differentiable expansion loss. The tree topology and the indicator are
/// fixed at the current geometry; gradients flow through the lengths of the
/// qualifying edges.
pub fn expansion_loss_var<'g>(centers: Var<'g>, completed: Var<'g>, zeta: f64, k: usize) -> Result<(Var<'g>, ExpansionStats)> {
    let (pairs, stats) = expansion_pairs(&centers.value(), &completed.value(), zeta, k)?;
    let stacked = Var::concat_rows(&[completed, centers])?;
    let sv = stacked.value();
    let total = pairs.iter().map(|&(u, v)| sqdist(sv.row(u), sv.row(v)).sqrt()).sum();
    let out = stacked
        .graph()
        .custom(&[stacked], Tensor::scalar(total), Box::new(PairDistSum { pairs }));
    Ok((out, stats))
}

/// How the summed expansion loss enters the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Reduction {
    /// Plain sum over every patch.
    #[default]
    Sum,
    /// Sum divided by the number of completed points, which keeps the term
    /// on the scale of the mean-based Chamfer distances.
    Mean,
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reduction::Sum => "sum",
            Reduction::Mean => "mean",
        })
    }
}

impl FromStr for Reduction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Reduction::Sum),
            "mean" => Ok(Reduction::Mean),
            o => Err(Error::Config(format!("unknown reduction '{o}'"))),
        }
    }
}

/// Weights of the training objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParams {
    pub tau: f64,
    pub zeta: f64,
    /// Patch size K.
    pub grid_points: usize,
    pub reduction: Reduction,
}

impl LossParams {
    fn check(&self) -> Result<()> {
        if !(self.tau >= 0.0) {
            return Err(Error::Contract(format!("tau must be nonnegative, got {}", self.tau)));
        }
        Ok(())
    }

    fn divisor(&self, completed: usize) -> f64 {
        match self.reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => completed as f64,
        }
    }
}

/// Scalar parts of one total-loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub reconstruction: f64,
    /// Expansion term after reduction, before the τ weight.
    pub expansion: f64,
    pub stats: ExpansionStats,
}

/// `L = L_rec + τ·L_expan`. With `τ = 0` the expansion term (and its MSTs)
/// is skipped entirely.
pub fn total_loss_var<'g>(centers: Var<'g>, completed: Var<'g>, truth: Var<'g>, lp: &LossParams) -> Result<(Var<'g>, LossBreakdown)> {
    lp.check()?;
    let rec = reconstruction_loss_var(centers, completed, truth)?;
    let mut b = LossBreakdown {
        reconstruction: rec.value().item(),
        ..Default::default()
    };
    let total = if lp.tau > 0.0 {
        let (ex, stats) = expansion_loss_var(centers, completed, lp.zeta, lp.grid_points)?;
        let ex = ex.scale(1.0 / lp.divisor(completed.rows()));
        b.expansion = ex.value().item();
        b.stats = stats;
        rec.add(&ex.scale(lp.tau))?
    } else {
        rec
    };
    b.total = total.value().item();
    Ok((total, b))
}

/// Non-recording counterpart of [`total_loss_var`].
pub fn total_loss(centers: &PointCloud, completed: &PointCloud, truth: &PointCloud, lp: &LossParams) -> Result<LossBreakdown> {
    lp.check()?;
    let reconstruction = reconstruction_loss(centers, completed, truth);
    let (expansion, stats) = if lp.tau > 0.0 {
        let (v, st) = expansion_loss(centers.tensor(), completed.tensor(), lp.zeta, lp.grid_points)?;
        (v / lp.divisor(completed.len()), st)
    } else {
        (0.0, ExpansionStats::default())
    };
    Ok(LossBreakdown {
        total: reconstruction + lp.tau * expansion,
        reconstruction,
        expansion,
        stats,
    })
}

/// Harmonic mean of precision (share of `pred` within `phi` of `gt`) and
/// recall (share of `gt` within `phi` of `pred`); 0 when both vanish.
pub fn f_score(pred: &PointCloud, gt: &PointCloud, phi: f64) -> Result<f64> {
    if !(phi > 0.0) {
        return Err(Error::Contract(format!("F-score threshold must be positive, got {phi}")));
    }
    let t2 = phi * phi;
    let share = |nn: Vec<(usize, f64)>| nn.iter().filter(|e| e.1 <= t2).count() as f64 / nn.len() as f64;
    let precision = share(nearest(pred.tensor(), gt.tensor()));
    let recall = share(nearest(gt.tensor(), pred.tensor()));
    if precision + recall == 0.0 {
        Ok(0.0)
    } else {
        Ok(2.0 * precision * recall / (precision + recall))
    }
}

/// Mean distance from each input point to its nearest output point.
pub fn fidelity(input: &PointCloud, output: &PointCloud) -> f64 {
    directed(&nearest(input.tensor(), output.tensor()), Norm::L1)
}

/// Mean over `outputs` of the smallest Chamfer distance to any reference.
pub fn mmd(outputs: &[PointCloud], references: &[PointCloud], norm: Norm) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::Empty("mmd reference set"));
    }
    if outputs.is_empty() {
        return Err(Error::Empty("mmd outputs"));
    }
    let total: f64 = outputs
        .iter()
        .map(|o| {
            references
                .iter()
                .map(|r| chamfer(o, r, norm))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    Ok(total / outputs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::gradcheck::check_inputs;
    use crate::Rng;

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::from_points(pts).unwrap()
    }

    fn line(xs: &[f64]) -> Tensor {
        let rows: Vec<[f64; 3]> = xs.iter().map(|&x| [x, 0.0, 0.0]).collect();
        Tensor::from_rows(&rows).unwrap()
    }

    fn random_cloud(rng: &mut Rng, n: usize) -> PointCloud {
        PointCloud::new(Tensor::new(vec![n, 3], rng.uniform_vec(3 * n, -1.0, 1.0)).unwrap()).unwrap()
    }

    #[test]
    fn chamfer_examples() {
        let o = cloud(&[[0.0, 0.0, 0.0]]);
        let x = cloud(&[[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer(&o, &o, Norm::L1), 0.0);
        assert_eq!(chamfer(&o, &x, Norm::L1), 2.0);
        assert_eq!(chamfer(&o, &x, Norm::L2), 2.0);
        let two = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert_eq!(chamfer(&two, &o, Norm::L1), 0.5);
        assert!(chamfer_tensors(&Tensor::zeros(&[0, 3]), o.tensor(), Norm::L1).is_err());
    }

    #[test]
    fn chamfer_gradient_matches_finite_differences() {
        let mut rng = Rng::new(12);
        for norm in [Norm::L1, Norm::L2] {
            let a = random_cloud(&mut rng, 9).into_tensor();
            let b = random_cloud(&mut rng, 13).into_tensor();
            let r = check_inputs(&[a, b], 1e-5, |v| chamfer_var(v[0], v[1], norm).unwrap());
            assert!(r.max_rel_err < 1e-4, "{norm}: {r:?}");
        }
    }

    #[test]
    fn reconstruction_examples() {
        let g = cloud(&[[0.0, 0.0, 0.0]]);
        assert_eq!(reconstruction_loss(&g, &g, &g), 0.0);
        let p = g.translated([1.0, 0.0, 0.0]);
        assert_eq!(reconstruction_loss(&g, &p, &g), 2.0);
    }

    #[test]
    fn mst_examples() {
        let t = mst(&line(&[0.0, 1.0, 3.0])).unwrap();
        assert_eq!(t.edges, vec![(0, 1, 1.0), (1, 2, 2.0)]);
        assert_eq!(t.eta, 1.5);

        let t = mst(&line(&[0.0, 2.5])).unwrap();
        assert_eq!(t.edges.len(), 1);
        assert_eq!(t.eta, 2.5);

        let h = 3f64.sqrt() / 2.0;
        let tri = Tensor::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, h, 0.0]]).unwrap();
        let t = mst(&tri).unwrap();
        assert!((t.total() - 2.0).abs() < 1e-12 && (t.eta - 1.0).abs() < 1e-12);

        // exact tie from vertex 0: the lower index attaches first
        let corner = Tensor::from_rows(&[[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        let t = mst(&corner).unwrap();
        assert_eq!((t.edges[0].0, t.edges[0].1), (0, 1));

        assert!(mst(&line(&[0.0])).is_err());
    }

    #[test]
    fn tree_loss_examples() {
        assert_eq!(tree_loss(&line(&[0.0, 1.0, 3.0]), 1.0).unwrap(), 2.0);
        assert_eq!(tree_loss(&line(&[0.0, 1.0, 3.0]), 10.0).unwrap(), 0.0);
        let mut grid = Vec::new();
        for i in 0..3 {
            for j in 0..3 {
                grid.push([i as f64, j as f64, 0.0]);
            }
        }
        let grid = Tensor::from_rows(&grid).unwrap();
        let total = mst(&grid).unwrap().total();
        assert_eq!(tree_loss(&grid, 1.0).unwrap(), total);
        assert_eq!(total, 8.0);
        assert!(tree_loss(&grid, 0.0).is_err());
    }

    #[test]
    fn expansion_examples() {
        let centers = Tensor::from_rows(&[[0.5, 0.5, 0.5], [-1.0, 0.0, 0.0]]).unwrap();
        let collapsed = Tensor::from_rows(&[[0.5, 0.5, 0.5]; 2].iter().chain(&[[-1.0, 0.0, 0.0]; 2]).copied().collect::<Vec<_>>()).unwrap();
        let (v, stats) = expansion_loss(&centers, &collapsed, 1.2, 2).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(stats.mst_evaluations, 2);

        // center 0 plus patch {1, 3} on a line reproduces the collinear tree
        let c = line(&[0.0]);
        let patch = line(&[1.0, 3.0]);
        let (v, _) = expansion_loss(&c, &patch, 1.0, 2).unwrap();
        assert_eq!(v, tree_loss(&line(&[0.0, 1.0, 3.0]), 1.0).unwrap());
        assert_eq!(v, 2.0);

        assert!(expansion_loss(&c, &patch, 1.0, 3).is_err());
    }

    #[test]
    fn expansion_gradient_matches_finite_differences() {
        let mut rng = Rng::new(77);
        let centers = random_cloud(&mut rng, 3).into_tensor();
        let pts = random_cloud(&mut rng, 12).into_tensor();
        let r = check_inputs(&[centers, pts], 1e-6, |v| expansion_loss_var(v[0], v[1], 1.0, 4).unwrap().0);
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn total_loss_tau_behaviour() {
        let mut rng = Rng::new(3);
        let s = random_cloud(&mut rng, 4);
        let p = random_cloud(&mut rng, 16);
        let g = random_cloud(&mut rng, 20);
        let lp = |tau| LossParams {
            tau,
            zeta: 1.2,
            grid_points: 4,
            reduction: Reduction::Sum,
        };
        let zero = total_loss(&s, &p, &g, &lp(0.0)).unwrap();
        assert_eq!(zero.total, reconstruction_loss(&s, &p, &g));
        assert_eq!(zero.stats.mst_evaluations, 0);
        let mut last = zero.total;
        for tau in [0.01, 0.05, 0.5, 2.0] {
            let l = total_loss(&s, &p, &g, &lp(tau)).unwrap();
            assert!(l.total >= last);
            last = l.total;
        }
        assert!(total_loss(&s, &p, &g, &lp(-0.1)).is_err());
        let sum = total_loss(&s, &p, &g, &lp(0.05)).unwrap();
        let mean = total_loss(&s, &p, &g, &LossParams { reduction: Reduction::Mean, ..lp(0.05) }).unwrap();
        assert!((mean.expansion * 16.0 - sum.expansion).abs() < 1e-12);

        let graph = Graph::new();
        let (v, b) = total_loss_var(
            graph.variable(s.tensor().clone()),
            graph.variable(p.tensor().clone()),
            graph.constant(g.tensor().clone()),
            &lp(0.05),
        )
        .unwrap();
        let want = total_loss(&s, &p, &g, &lp(0.05)).unwrap();
        assert!((v.value().item() - want.total).abs() < 1e-12);
        assert_eq!(b.stats.mst_evaluations, 4);
    }

    #[test]
    fn f_score_examples() {
        let a = cloud(&[[0.0, 0.0, 0.0], [0.5, 0.0, 0.0]]);
        assert_eq!(f_score(&a, &a, 0.01).unwrap(), 1.0);
        let far = a.translated([5.0, 0.0, 0.0]);
        assert_eq!(f_score(&a, &far, 1.0).unwrap(), 0.0);
        let pred = cloud(&[[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]]);
        let gt = cloud(&[[0.0, 0.0, 0.0]]);
        assert!((f_score(&pred, &gt, 1.0).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(f_score(&pred, &gt, 0.0).is_err());
    }

    #[test]
    fn fidelity_examples() {
        let a = cloud(&[[0.0, 0.0, 0.0]]);
        let b = cloud(&[[3.0, 4.0, 0.0]]);
        assert_eq!(fidelity(&a, &b), 5.0);
        let ab = a.concat(&b);
        assert_eq!(fidelity(&a, &ab), 0.0);
        let c = cloud(&[[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]]);
        assert_ne!(fidelity(&a, &c), fidelity(&c, &a));
    }

    #[test]
    fn mmd_examples() {
        let o1 = cloud(&[[0.0, 0.0, 0.0]]);
        let o2 = cloud(&[[1.0, 0.0, 0.0]]);
        let r1 = cloud(&[[0.0, 0.5, 0.0]]);
        let r2 = cloud(&[[3.0, 0.0, 0.0]]);
        assert_eq!(mmd(&[o1.clone(), o2.clone()], &[o1.clone(), o2.clone()], Norm::L2).unwrap(), 0.0);
        assert_eq!(mmd(&[o1.clone()], &[r2.clone()], Norm::L2).unwrap(), chamfer(&o1, &r2, Norm::L2));
        // chamfer-l2 matrix: [[0.5, 18], [2.5, 8]] → row minima 0.5 and 2.5
        let v = mmd(&[o1.clone(), o2], &[r1, r2], Norm::L2).unwrap();
        assert!((v - 1.5).abs() < 1e-15);
        assert!(mmd(&[o1], &[], Norm::L2).is_err());
    }
}
