//! Geometric primitives on raw point sets.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Activation, Init, Mlp, ParamBuilder};
use crate::tensor::Tensor;

/// Ordered 3-D points, stored as an `[n, 3]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Tensor,
}

impl PointCloud {
    pub fn new(points: Tensor) -> Result<Self> {
        if points.shape().len() != 2 || points.cols() != 3 {
            return Err(Error::dim("point cloud", points.shape(), &[0, 3]));
        }
        if points.rows() == 0 {
            return Err(Error::Empty("point cloud"));
        }
        if !points.all_finite() {
            return Err(Error::Input("point cloud has non-finite coordinates".into()));
        }
        Ok(Self { points })
    }

    pub fn from_points(pts: &[[f64; 3]]) -> Result<Self> {
        let data = pts.iter().flatten().copied().collect();
        Self::new(Tensor::new(vec![pts.len(), 3], data)?)
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        let r = self.points.row(i);
        [r[0], r[1], r[2]]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.points
    }

    pub fn into_tensor(self) -> Tensor {
        self.points
    }

    pub fn translated(&self, d: [f64; 3]) -> Self {
        let mut t = self.points.clone();
        for r in 0..t.rows() {
            for (v, dv) in t.row_mut(r).iter_mut().zip(d) {
                *v += dv;
            }
        }
        Self { points: t }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            points: self.points.map(|v| v * s),
        }
    }

    /// Concatenates two clouds (self first).
    pub fn concat(&self, other: &PointCloud) -> Self {
        let mut data = self.points.data().to_vec();
        data.extend_from_slice(other.points.data());
        Self {
            points: Tensor::from_parts(vec![self.len() + other.len(), 3], data),
        }
    }
}

#[inline]
pub fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Subset of a parent cloud chosen by index.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledSet {
    pub indices: Vec<usize>,
    pub coords: Tensor,
}

/// Greedy farthest point sampling starting from `start`. Each pick maximizes
/// the distance to the already-selected set; ties go to the lower index.
pub fn fps(cloud: &PointCloud, n_s: usize, start: usize) -> Result<SampledSet> {
    let n = cloud.len();
    if n_s == 0 || n_s > n {
        return Err(Error::Input(format!("fps: cannot sample {n_s} of {n} points")));
    }
    if start >= n {
        return Err(Error::Input(format!("fps: start index {start} out of {n} points")));
    }
    let pts = cloud.tensor();
    let mut taken = vec![false; n];
    let mut mind = vec![f64::INFINITY; n];
    let mut indices = Vec::with_capacity(n_s);
    let mut cur = start;
    loop {
        indices.push(cur);
        taken[cur] = true;
        if indices.len() == n_s {
            break;
        }
        let c = pts.row(cur);
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let d = sqdist(pts.row(i), c);
            if d < mind[i] {
                mind[i] = d;
            }
            if mind[i] > best_d {
                best_d = mind[i];
                best = i;
            }
        }
        cur = best;
    }
    let coords = pts.gather_rows(&indices);
    Ok(SampledSet { indices, coords })
}

/// Indices of the `k` nearest targets for each query row, ascending by
/// distance with ties to the lower index. Returned flat, `[q * k]`.
pub fn knn(targets: &PointCloud, queries: &Tensor, k: usize) -> Result<Vec<usize>> {
    let n = targets.len();
    if k == 0 || k > n {
        return Err(Error::Input(format!("knn: k = {k} with {n} targets")));
    }
    if queries.cols() != 3 {
        return Err(Error::dim("knn queries", queries.shape(), &[0, 3]));
    }
    let t = targets.tensor();
    let mut out = Vec::with_capacity(queries.rows() * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    for q in 0..queries.rows() {
        let qr = queries.row(q);
        cand.clear();
        cand.extend((0..n).map(|i| (sqdist(t.row(i), qr), i)));
        if k < n {
            cand.select_nth_unstable_by(k - 1, order);
        }
        let head = &mut cand[..k];
        head.sort_unstable_by(order);
        out.extend(head.iter().map(|c| c.1));
    }
    Ok(out)
}

/// Squared Euclidean distances `[p, q]` between rows of `a` and `b`.
pub fn pairwise_sqdist(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != 3 || b.cols() != 3 {
        return Err(Error::dim("pairwise_sqdist", a.shape(), b.shape()));
    }
    let (p, q) = (a.rows(), b.rows());
    let mut d = Vec::with_capacity(p * q);
    for i in 0..p {
        for j in 0..q {
            d.push(sqdist(a.row(i), b.row(j)));
        }
    }
    Ok(Tensor::from_parts(vec![p, q], d))
}

/// Edge features `[x_j - x_i ; x_i]` for every (center, neighbor) pair,
/// `neighbors` flat with `k` entries per center.
pub fn edge_features(cloud: &PointCloud, centers: &Tensor, neighbors: &[usize], k: usize) -> Tensor {
    let pts = cloud.tensor();
    let mut data = Vec::with_capacity(neighbors.len() * 6);
    for (e, &j) in neighbors.iter().enumerate() {
        let xi = centers.row(e / k);
        let xj = pts.row(j);
        data.extend((0..3).map(|d| xj[d] - xi[d]));
        data.extend_from_slice(xi);
    }
    Tensor::from_parts(vec![neighbors.len(), 6], data)
}

/// Static EdgeConv: a shared MLP over edge features, max-aggregated over
/// each sample's `k` nearest neighbors (the sample itself included).
#[derive(Clone, Debug)]
pub struct EdgeConv {
    pub mlp: Mlp,
    pub k: usize,
}

impl EdgeConv {
    pub fn new(pb: &mut ParamBuilder<'_>, k: usize, hidden: usize, out: usize, act: Activation) -> Self {
        Self {
            mlp: Mlp::new(&mut pb.sub("mlp"), &[6, hidden, out], act, Init::FanIn),
            k,
        }
    }

    pub fn forward<'g>(&self, x: Var<'g>, cloud: &PointCloud, samples: &SampledSet) -> Result<Var<'g>> {
        let nbrs = knn(cloud, &samples.coords, self.k)?;
        self.forward_with_neighbors(x, cloud, &samples.coords, &nbrs)
    }

    /// `x` is any var on the target graph; it only supplies the graph handle.
    pub fn forward_with_neighbors<'g>(
        &self,
        x: Var<'g>,
        cloud: &PointCloud,
        centers: &Tensor,
        neighbors: &[usize],
    ) -> Result<Var<'g>> {
        let edges = x.graph().constant(edge_features(cloud, centers, neighbors, self.k));
        self.mlp.forward(edges)?.group_max(self.k)
    }
}

/// Ordering of points along a 3-D Hilbert curve over their bounding box.
pub fn hilbert_order(coords: &Tensor) -> Vec<usize> {
    const BITS: u32 = 10;
    let n = coords.rows();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for i in 0..n {
        for (d, v) in coords.row(i).iter().enumerate() {
            lo[d] = lo[d].min(*v);
            hi[d] = hi[d].max(*v);
        }
    }
    let cells = (1u32 << BITS) - 1;
    let mut keyed: Vec<(u64, usize)> = (0..n)
        .map(|i| {
            let r = coords.row(i);
            let mut q = [0u32; 3];
            for d in 0..3 {
                let span = hi[d] - lo[d];
                let t = if span > 0.0 { (r[d] - lo[d]) / span } else { 0.0 };
                q[d] = (t * cells as f64).round() as u32;
            }
            (hilbert_index(q, BITS), i)
        })
        .collect();
    keyed.sort();
    keyed.into_iter().map(|(_, i)| i).collect()
}

/// Skilling's transpose-based Hilbert index for 3 axes.
fn hilbert_index(mut x: [u32; 3], bits: u32) -> u64 {
    let m = 1u32 << (bits - 1);
    let mut q = m;
    while q > 1 {
        let p = q - 1;
        for i in 0..3 {
            if x[i] & q != 0 {
                x[0] ^= p;
            } else {
                let t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q >>= 1;
    }
    for i in 1..3 {
        x[i] ^= x[i - 1];
    }
    let mut t = 0;
    q = m;
    while q > 1 {
        if x[2] & q != 0 {
            t ^= q - 1;
        }
        q >>= 1;
    }
    for v in x.iter_mut() {
        *v ^= t;
    }
    let mut h = 0u64;
    for b in (0..bits).rev() {
        for v in x {
            h = (h << 1) | ((v >> b) & 1) as u64;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::nn::ParamStore;
    use crate::Rng;

    fn line(xs: &[f64]) -> PointCloud {
        let pts: Vec<[f64; 3]> = xs.iter().map(|&x| [x, 0.0, 0.0]).collect();
        PointCloud::from_points(&pts).unwrap()
    }

    #[test]
    fn fps_examples() {
        let c = PointCloud::from_points(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.1, 0.0, 0.0]]).unwrap();
        assert_eq!(fps(&c, 2, 0).unwrap().indices, vec![0, 1]);
        assert_eq!(fps(&c, 1, 2).unwrap().indices, vec![2]);
        assert_eq!(fps(&line(&[0.0, 1.0, 2.0, 3.0]), 3, 0).unwrap().indices, vec![0, 3, 1]);
        assert!(fps(&c, 4, 0).is_err());
        let all = fps(&c, 3, 0).unwrap();
        assert_eq!(all.indices, vec![0, 1, 2]);
        assert_eq!(all.coords.row(1), c.tensor().row(1));
    }

    #[test]
    fn fps_handles_duplicates() {
        let c = PointCloud::from_points(&[[0.0; 3]; 4]).unwrap();
        let s = fps(&c, 4, 2).unwrap();
        let mut idx = s.indices.clone();
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2, 3]);
    }

    #[test]
    fn knn_examples() {
        let t = line(&[0.0, 1.0, 3.0]);
        let q = Tensor::from_rows(&[[0.9, 0.0, 0.0]]).unwrap();
        assert_eq!(knn(&t, &q, 2).unwrap(), vec![1, 0]);
        let q = Tensor::from_rows(&[[3.0, 0.0, 0.0]]).unwrap();
        assert_eq!(knn(&t, &q, 1).unwrap(), vec![2]);
        let mut all = knn(&t, &q, 3).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2]);
        assert!(knn(&t, &q, 4).is_err());
    }

    #[test]
    fn pairwise_examples() {
        let a = Tensor::from_rows(&[[0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(pairwise_sqdist(&a, &a).unwrap().data(), &[0.0]);
        let b = Tensor::from_rows(&[[3.0, 4.0, 0.0]]).unwrap();
        assert_eq!(pairwise_sqdist(&a, &b).unwrap().data(), &[25.0]);
        let ab = Tensor::from_rows(&[[0.0, 0.0, 0.0], [3.0, 4.0, 0.0]]).unwrap();
        let d = pairwise_sqdist(&ab, &ab).unwrap();
        assert_eq!(d.data(), &[0.0, 25.0, 25.0, 0.0]);
    }

    fn edge_conv_fixture(k: usize, hidden: usize, out: usize) -> (ParamStore, EdgeConv) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(5);
        let ec = EdgeConv::new(&mut ParamBuilder::new(&mut store, &mut rng), k, hidden, out, Activation::Silu);
        (store, ec)
    }

    #[test]
    fn edge_conv_degenerate_neighborhood() {
        let (store, ec) = edge_conv_fixture(3, 8, 4);
        let p = [0.2, -0.1, 0.4];
        let cloud = PointCloud::from_points(&[p; 5]).unwrap();
        let s = fps(&cloud, 2, 0).unwrap();
        let g = Graph::with_params(&store);
        let anchor = g.constant(Tensor::scalar(0.0));
        let f = ec.forward(anchor, &cloud, &s).unwrap();
        let direct = ec
            .mlp
            .forward(g.constant(Tensor::from_rows(&[[0.0, 0.0, 0.0, p[0], p[1], p[2]]]).unwrap()))
            .unwrap();
        for r in 0..2 {
            for (a, b) in f.value().row(r).iter().zip(direct.value().row(0)) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn edge_conv_single_edge_by_hand() {
        // one linear layer 6→2 with weights picking (dx, x_i.x) and zero bias
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let mlp = Mlp::new(&mut pb.sub("mlp"), &[6, 2], Activation::Silu, Init::Zeros);
        let w = mlp.layers[0].weight;
        store
            .set(w, Tensor::from_rows(&[[1.0, 0.0, 0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0, 0.0, 0.0]]).unwrap())
            .unwrap();
        let ec = EdgeConv { mlp, k: 2 };
        let cloud = PointCloud::from_points(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        let s = fps(&cloud, 2, 0).unwrap();
        let g = Graph::with_params(&store);
        let f = ec.forward(g.constant(Tensor::scalar(0.0)), &cloud, &s).unwrap();
        // sample 0 at x=0: edges dx ∈ {0, 2}, x_i = 0 → [2, 0]
        // sample 1 at x=2: edges dx ∈ {0, -2}, x_i = 2 → [0, 2]
        assert_eq!(f.value().data(), &[2.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn edge_conv_self_is_nearest_with_k1() {
        let (store, ec) = edge_conv_fixture(1, 4, 3);
        let mut rng = Rng::new(9);
        let cloud = PointCloud::new(Tensor::new(vec![10, 3], rng.uniform_vec(30, -1.0, 1.0)).unwrap()).unwrap();
        let s = fps(&cloud, 4, 0).unwrap();
        let nbrs = knn(&cloud, &s.coords, 1).unwrap();
        assert_eq!(nbrs, s.indices);
        let g = Graph::with_params(&store);
        let f = ec.forward(g.constant(Tensor::scalar(0.0)), &cloud, &s).unwrap();
        assert_eq!(f.shape(), vec![4, 3]);
    }

    #[test]
    fn hilbert_order_is_permutation_and_local() {
        let mut rng = Rng::new(4);
        let t = Tensor::new(vec![64, 3], rng.uniform_vec(192, -1.0, 1.0)).unwrap();
        let mut o = hilbert_order(&t);
        o.sort();
        assert_eq!(o, (0..64).collect::<Vec<_>>());

        // consecutive lattice cells along the curve are face neighbours
        let mut pts = Vec::new();
        for x in 0..4 {
            for y in 0..4 {
                for z in 0..4 {
                    pts.push([x as f64, y as f64, z as f64]);
                }
            }
        }
        let t = Tensor::from_rows(&pts).unwrap();
        let o = hilbert_order(&t);
        for w in o.windows(2) {
            assert!((sqdist(t.row(w[0]), t.row(w[1])) - 1.0).abs() < 1e-12);
        }
    }
}
