//! Invariant checks shared by the `selftest` command and the acceptance
//! suite. Every oracle here is independent of the code under test: a naive
//! per-step scan, spanning-tree enumeration, finite differences and
//! closed-form metric values.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use crate::autograd::{Unary, Var};
use crate::gradcheck::{check_inputs, check_params, GradCheckReport};
use crate::metrics::{self, Norm};
use crate::model::{pipeline_gradcheck, Model, ModelConfig};
use crate::nn::{ParamBuilder, ParamStore};
use crate::points::{sqdist, PointCloud};
use crate::ssm::{discretize_zoh, scan_chunked, scan_sequential, scan_var, Discretization, MambaBlock, ScanInputs, SsmConfig};
use crate::{Rng, Tensor};

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub tolerance: f64,
    pub observed: f64,
    pub pass: bool,
    pub elapsed: Duration,
    pub note: String,
}

impl Check {
    /// Passes when `observed <= tolerance` (and is not NaN).
    fn within(name: &str, tolerance: f64, observed: f64, start: Instant, note: String) -> Self {
        Self {
            name: name.to_string(),
            tolerance,
            observed,
            pass: observed <= tolerance,
            elapsed: start.elapsed(),
            note,
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Options {
    /// Negative control: swap in a scan kernel with a planted error.
    pub corrupt_scan: bool,
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()))
}

/// Reference recurrence: discretizes every (t, d, s) entry on its own.
fn naive_scan(x: &ScanInputs<'_>) -> Vec<f64> {
    let (d, s) = (x.d, x.s);
    let mut h = vec![0.0; d * s];
    let mut y = vec![0.0; x.len * d];
    for t in 0..x.len {
        for ch in 0..d {
            let mut acc = 0.0;
            for j in 0..s {
                let (a_bar, b_bar) = discretize_zoh(x.delta[t * d + ch], x.a[ch * s + j], x.b[t * s + j], x.mode)
                    .expect("operands are in range");
                let st = &mut h[ch * s + j];
                *st = a_bar * *st + b_bar * x.u[t * d + ch];
                acc += x.c[t * s + j] * *st;
            }
            y[t * d + ch] = acc;
        }
    }
    y
}

fn planted_bug(x: &ScanInputs<'_>) -> Vec<f64> {
    let mut y = scan_chunked(x, 64);
    for v in y.iter_mut().step_by(97) {
        *v *= 1.0 + 1e-7;
    }
    y
}

/// Both production scan kernels against the naive recurrence on `count`
/// random sequences of length up to `max_len`.
pub fn scan_equivalence(opts: Options, count: usize, max_len: usize, seed: u64) -> Check {
    let start = Instant::now();
    let (d, s) = (32, 16);
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for i in 0..count {
        let len = 1 + rng.below(max_len);
        let u = rng.uniform_vec(len * d, -1.0, 1.0);
        let delta = rng.uniform_vec(len * d, 1e-3, 0.5);
        let a = rng.uniform_vec(d * s, -4.0, -0.05);
        let b = rng.uniform_vec(len * s, -1.0, 1.0);
        let c = rng.uniform_vec(len * s, -1.0, 1.0);
        let mode = if i % 2 == 0 { Discretization::Simplified } else { Discretization::Exact };
        let x = ScanInputs { u: &u, delta: &delta, a: &a, b: &b, c: &c, len, d, s, mode };
        let want = naive_scan(&x);
        let chunked = if opts.corrupt_scan { planted_bug(&x) } else { scan_chunked(&x, 64) };
        worst = worst.max(max_diff(&want, &scan_sequential(&x))).max(max_diff(&want, &chunked));
    }
    let note = format!("{count} sequences, len <= {max_len}, C {d}, S {s}");
    Check::within("scan equivalence", 1e-10, worst, start, note)
}

pub fn discretization_limits() -> Vec<Check> {
    let start = Instant::now();
    // 1 - exp(dt·A) ≈ dt·|A|, so the bound holds for |A| < 10.
    let mut small = 0.0f64;
    for a in [-0.1, -1.0, -5.0] {
        for mode in [Discretization::Simplified, Discretization::Exact] {
            let (a_bar, b_bar) = discretize_zoh(1e-9, a, 1.0, mode).expect("valid");
            small = small.max((a_bar - 1.0).abs()).max(b_bar.abs());
        }
    }
    let first = Check::within("discretization: dt -> 0", 1e-8, small, start, "dt = 1e-9, |A| <= 5".into());
    let start = Instant::now();
    let (half, _) = discretize_zoh(1.0, -std::f64::consts::LN_2, 1.0, Discretization::Simplified).expect("valid");
    let second = Check::within("discretization: A = -ln 2", 1e-12, (half - 0.5).abs(), start, "dt = 1".into());
    vec![first, second]
}

fn rnd(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), rng.uniform_vec(n, -1.0, 1.0))
}

fn weighted<'g>(y: Var<'g>, seed: u64) -> Var<'g> {
    let mut rng = Rng::new(seed);
    let w = y.graph().constant(rnd(&mut rng, &y.shape()));
    y.mul(&w).expect("same shape").sum()
}

type OpFn = Box<dyn for<'g> Fn(&[Var<'g>]) -> Var<'g>>;

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    fn ok<'g>(r: crate::Result<Var<'g>>) -> Var<'g> {
        r.expect("fixed shapes")
    }
    fn positive(v: Var<'_>) -> Var<'_> {
        v.scale(2.0).softplus().add_scalar(1e-3)
    }
    fn negative(v: Var<'_>) -> Var<'_> {
        v.exp().scale(-1.0)
    }
    vec![
        ("add", vec![vec![3, 4], vec![3, 4]], Box::new(|v| ok(v[0].add(&v[1])))),
        ("sub", vec![vec![3, 4], vec![3, 4]], Box::new(|v| ok(v[0].sub(&v[1])))),
        ("mul", vec![vec![3, 4], vec![3, 4]], Box::new(|v| ok(v[0].mul(&v[1])))),
        ("add_row", vec![vec![3, 4], vec![4]], Box::new(|v| ok(v[0].add_row(&v[1])))),
        ("sub_from_row", vec![vec![3, 4], vec![4]], Box::new(|v| ok(v[0].sub_from_row(&v[1])))),
        ("mul_row", vec![vec![3, 4], vec![4]], Box::new(|v| ok(v[0].mul_row(&v[1])))),
        ("scale", vec![vec![3, 4]], Box::new(|v| v[0].scale(-2.5).add_scalar(1.0))),
        ("silu", vec![vec![3, 4]], Box::new(|v| v[0].scale(3.0).silu())),
        ("sigmoid", vec![vec![3, 4]], Box::new(|v| v[0].scale(3.0).sigmoid())),
        ("softplus", vec![vec![3, 4]], Box::new(|v| v[0].scale(3.0).softplus())),
        ("exp", vec![vec![3, 4]], Box::new(|v| v[0].exp())),
        ("tanh", vec![vec![3, 4]], Box::new(|v| v[0].unary(Unary::Tanh))),
        ("square", vec![vec![3, 4]], Box::new(|v| v[0].square())),
        ("matmul", vec![vec![3, 4], vec![4, 5]], Box::new(|v| ok(v[0].matmul(&v[1])))),
        ("matmul_nt", vec![vec![3, 4], vec![5, 4]], Box::new(|v| ok(v[0].matmul_nt(&v[1])))),
        ("linear", vec![vec![3, 4], vec![5, 4], vec![5]], Box::new(|v| ok(v[0].linear(&v[1], Some(&v[2]))))),
        ("layer_norm", vec![vec![3, 6], vec![6], vec![6]], Box::new(|v| ok(v[0].layer_norm(&v[1], &v[2], 1e-5)))),
        ("depthwise_conv1d", vec![vec![6, 3], vec![3, 4]], Box::new(|v| ok(v[0].depthwise_conv1d(&v[1])))),
        ("group_max", vec![vec![6, 3]], Box::new(|v| ok(v[0].group_max(3)))),
        ("max_pool_rows", vec![vec![5, 3]], Box::new(|v| ok(v[0].max_pool_rows()))),
        ("softmax_rows", vec![vec![3, 5]], Box::new(|v| v[0].scale(2.0).softmax_rows())),
        ("concat_cols", vec![vec![3, 2], vec![3, 4]], Box::new(|v| ok(Var::concat_cols(&[v[0], v[1]])))),
        ("concat_rows", vec![vec![3, 2], vec![4, 2]], Box::new(|v| ok(Var::concat_rows(&[v[0], v[1]])))),
        ("slice_cols", vec![vec![3, 5]], Box::new(|v| ok(v[0].slice_cols(1, 3)))),
        ("slice_rows", vec![vec![5, 3]], Box::new(|v| ok(v[0].slice_rows(1, 3)))),
        ("gather_rows", vec![vec![4, 3]], Box::new(|v| ok(v[0].gather_rows(&[2, 0, 2, 3])))),
        ("repeat_rows", vec![vec![3, 2]], Box::new(|v| v[0].repeat_rows(3))),
        ("reshape", vec![vec![3, 4]], Box::new(|v| ok(v[0].reshape(&[2, 6])))),
        ("mean", vec![vec![3, 4]], Box::new(|v| v[0].mean())),
        ("group_standardize", vec![vec![8, 3]], Box::new(|v| ok(v[0].group_standardize(4, 1e-5)))),
        (
            "selective_scan",
            vec![vec![6, 3], vec![6, 3], vec![3, 4], vec![6, 4], vec![6, 4]],
            Box::new(|v| ok(scan_var(v[0], positive(v[1]), negative(v[2]), v[3], v[4], Discretization::Simplified))),
        ),
        (
            "selective_scan (exact zoh)",
            vec![vec![6, 3], vec![6, 3], vec![3, 4], vec![6, 4], vec![6, 4]],
            Box::new(|v| ok(scan_var(v[0], positive(v[1]), negative(v[2]), v[3], v[4], Discretization::Exact))),
        ),
        ("chamfer l1", vec![vec![9, 3], vec![13, 3]], Box::new(|v| ok(metrics::chamfer_var(v[0], v[1], Norm::L1)))),
        ("chamfer l2", vec![vec![9, 3], vec![13, 3]], Box::new(|v| ok(metrics::chamfer_var(v[0], v[1], Norm::L2)))),
    ]
}

/// Finite-difference check of every differentiable primitive, the loss
/// operators and one Mamba block's parameters. Returns the worst report.
pub fn op_gradients(seed: u64) -> (GradCheckReport, usize) {
    let mut rng = Rng::new(seed);
    let mut worst = GradCheckReport::default();
    let mut take = |name: &str, r: GradCheckReport| {
        if r.max_rel_err >= worst.max_rel_err || worst.worst.is_empty() {
            worst = GradCheckReport { worst: format!("{name} ({})", r.worst), ..r };
        }
    };
    let cases = op_cases();
    let n = cases.len() + 2;
    for (i, (name, shapes, f)) in cases.into_iter().enumerate() {
        let inputs: Vec<Tensor> = shapes.iter().map(|s| rnd(&mut rng, s)).collect();
        let wseed = seed.wrapping_add(1000 + i as u64);
        take(name, check_inputs(&inputs, 1e-5, |v| weighted(f(v), wseed)));
    }
    // The expansion indicator is piecewise constant; a smaller step keeps
    // the probe away from its jumps.
    let inputs = vec![rnd(&mut rng, &[3, 3]), rnd(&mut rng, &[12, 3])];
    take(
        "expansion",
        check_inputs(&inputs, 1e-6, |v| metrics::expansion_loss_var(v[0], v[1], 1.0, 4).expect("fixed shapes").0),
    );

    let mut store = ParamStore::new();
    let mut cfg = SsmConfig::new(4);
    cfg.state = 4;
    let block = MambaBlock::new(&mut ParamBuilder::new(&mut store, &mut rng), &cfg);
    let z = rnd(&mut rng, &[5, 4]);
    let r = check_params(&store, 1e-5, 12, seed, |g| Ok(weighted(block.forward(g.constant(z.clone()))?, seed)))
        .expect("fixed shapes");
    take("mamba block", r);
    (worst, n)
}

fn probe_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = Rng::new(seed);
    let rows: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            let v = [rng.normal(), rng.normal(), rng.normal()];
            let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-9);
            [0.4 * v[0] / r, 0.4 * v[1] / r, 0.4 * v[2] / r]
        })
        .collect();
    PointCloud::from_points(&rows).expect("nonempty")
}

/// Full tiny pipeline (N = M = 8, L = 4, K = 4, C = 8) with randomly
/// initialised heads, over `seeds` model seeds.
pub fn pipeline_gradients(seeds: u64) -> GradCheckReport {
    let mut worst = GradCheckReport::default();
    for seed in 0..seeds {
        let mut cfg = ModelConfig::tiny();
        cfg.zero_init_heads = false;
        cfg.seed = seed;
        let model = Model::new(cfg).expect("tiny preset is valid");
        let r = pipeline_gradcheck(&model, &probe_cloud(24, 7 + seed), 1e-4, 4, seed).expect("forward succeeds");
        if r.max_rel_err >= worst.max_rel_err || worst.worst.is_empty() {
            worst = GradCheckReport { entries_checked: worst.entries_checked + r.entries_checked, ..r };
        } else {
            worst.entries_checked += r.entries_checked;
        }
    }
    worst
}

pub fn gradient_suite(seed: u64) -> Vec<Check> {
    let start = Instant::now();
    let (ops, n) = op_gradients(seed);
    let a = Check::within(
        "gradients: per-op",
        1e-4,
        ops.max_rel_err,
        start,
        format!("{n} operators, worst {}", ops.worst),
    );
    let start = Instant::now();
    let p = pipeline_gradients(4);
    let b = Check::within(
        "gradients: tiny pipeline",
        1e-3,
        p.max_rel_err,
        start,
        format!("{} entries, worst {}", p.entries_checked, p.worst),
    );
    vec![a, b]
}

/// Decodes a Prüfer sequence over `n` labelled vertices into tree edges.
fn prufer_edges(seq: &[usize], n: usize) -> Vec<(usize, usize)> {
    let mut degree = vec![1usize; n];
    for &v in seq {
        degree[v] += 1;
    }
    let mut edges = Vec::with_capacity(n - 1);
    for &v in seq {
        let leaf = (0..n).find(|&u| degree[u] == 1).expect("a leaf always exists");
        edges.push((leaf, v));
        degree[leaf] -= 1;
        degree[v] -= 1;
    }
    let rest: Vec<usize> = (0..n).filter(|&u| degree[u] == 1).collect();
    edges.push((rest[0], rest[1]));
    edges
}

fn sorted_sum(mut lens: Vec<f64>) -> f64 {
    lens.sort_by(f64::total_cmp);
    lens.iter().sum()
}

/// Lightest spanning tree by enumerating all `n^(n-2)` labelled trees.
pub fn brute_force_mst_weight(points: &Tensor) -> f64 {
    let n = points.rows();
    let dist = |i: usize, j: usize| sqdist(points.row(i), points.row(j)).sqrt();
    if n == 2 {
        return dist(0, 1);
    }
    let mut seq = vec![0usize; n - 2];
    let mut best = f64::INFINITY;
    loop {
        let w = sorted_sum(prufer_edges(&seq, n).into_iter().map(|(i, j)| dist(i, j)).collect());
        best = best.min(w);
        let mut pos = 0;
        while pos < seq.len() && seq[pos] == n - 1 {
            seq[pos] = 0;
            pos += 1;
        }
        if pos == seq.len() {
            return best;
        }
        seq[pos] += 1;
    }
}

/// Prim's tree weight against exhaustive enumeration. Edge lengths are
/// summed in sorted order on both sides so equal trees compare bit-exact.
pub fn mst_oracle(count: usize, seed: u64) -> Check {
    let start = Instant::now();
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let n = 4 + rng.below(4);
        let pts = Tensor::from_parts(vec![n, 3], rng.uniform_vec(3 * n, -1.0, 1.0));
        let prim = metrics::mst(&pts).expect("at least 4 points");
        let got = sorted_sum(prim.edges.iter().map(|e| e.2).collect());
        worst = worst.max((got - brute_force_mst_weight(&pts)).abs());
    }
    Check::within("MST vs enumeration", 0.0, worst, start, format!("{count} clouds of 4-7 points"))
}

fn random_cloud(rng: &mut Rng, n: usize) -> PointCloud {
    PointCloud::new(Tensor::from_parts(vec![n, 3], rng.uniform_vec(3 * n, -1.0, 1.0))).expect("nonempty")
}

fn single(p: [f64; 3]) -> PointCloud {
    PointCloud::from_points(&[p]).expect("nonempty")
}

/// Worst deviation over the metric identities and hand-computed values.
pub fn metric_identities(seed: u64) -> Check {
    let start = Instant::now();
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    let mut dev = |x: f64| worst = worst.max(if x.is_nan() { f64::INFINITY } else { x.abs() });
    for _ in 0..20 {
        let na = 1 + rng.below(40);
        let nb = 1 + rng.below(40);
        let a = random_cloud(&mut rng, na);
        let b = random_cloud(&mut rng, nb);
        let s = rng.uniform(0.1, 5.0);
        for norm in [Norm::L1, Norm::L2] {
            let ab = metrics::chamfer(&a, &b, norm);
            dev(ab - metrics::chamfer(&b, &a, norm));
            dev(metrics::chamfer(&a, &a, norm));
            let p = if norm == Norm::L1 { s } else { s * s };
            dev((metrics::chamfer(&a.scaled(s), &b.scaled(s), norm) - p * ab) / ab.max(1e-300));
        }
        dev(metrics::f_score(&a, &a, 0.01).expect("phi > 0") - 1.0);
        let mut last = 0.0;
        for phi in [0.01, 0.05, 0.1, 0.3, 1.0, 3.0] {
            let f = metrics::f_score(&a, &b, phi).expect("phi > 0");
            dev((last - f).max(0.0));
            last = f;
        }
        let keep: Vec<[f64; 3]> = (0..na).filter(|i| i % 2 == 0).map(|i| a.point(i)).collect();
        dev(metrics::fidelity(&PointCloud::from_points(&keep).expect("nonempty"), &a));
    }
    let o = single([0.0; 3]);
    let x = single([1.0, 0.0, 0.0]);
    let two = o.concat(&x);
    dev(metrics::chamfer(&two, &o, Norm::L1) - 0.5);
    dev(metrics::chamfer(&o, &x, Norm::L1) - 2.0);
    dev(metrics::chamfer(&o, &x, Norm::L2) - 2.0);
    let far = single([10.0, 0.0, 0.0]);
    dev(metrics::f_score(&o.concat(&far), &o, 1.0).expect("phi > 0") - 2.0 / 3.0);
    dev(metrics::fidelity(&o, &single([3.0, 4.0, 0.0])) - 5.0);
    Check::within("metric identities", 1e-12, worst, start, "symmetry, zero, scale, F-score, fidelity, hand values".into())
}

/// Collinear tree value and the collapsed-patch zero.
pub fn expansion_behaviour() -> Check {
    let start = Instant::now();
    let line = |xs: &[f64]| Tensor::from_parts(vec![xs.len(), 3], xs.iter().flat_map(|&x| [x, 0.0, 0.0]).collect());
    let collinear = metrics::tree_loss(&line(&[0.0, 1.0, 3.0]), 1.0).expect("valid");
    let centers = Tensor::from_rows(&[[0.5, 0.5, 0.5], [-1.0, 0.0, 0.0]]).expect("rows");
    let collapsed = Tensor::from_rows(&[[0.5, 0.5, 0.5], [0.5, 0.5, 0.5], [-1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]).expect("rows");
    let (zero, _) = metrics::expansion_loss(&centers, &collapsed, 1.2, 2).expect("valid");
    let worst = (collinear - 2.0).abs().max(zero.abs());
    Check::within(
        "expansion loss",
        1e-12,
        worst,
        start,
        format!("collinear {collinear}, collapsed {zero}"),
    )
}

pub fn run_all(opts: Options) -> Vec<Check> {
    let mut out = vec![scan_equivalence(opts, 100, 512, 1)];
    out.extend(discretization_limits());
    out.extend(gradient_suite(2));
    out.push(mst_oracle(200, 3));
    out.push(metric_identities(4));
    out.push(expansion_behaviour());
    out
}

pub fn format_table(checks: &[Check]) -> String {
    let w = checks.iter().map(|c| c.name.len()).max().unwrap_or(5).max(5);
    let mut s = String::new();
    let _ = writeln!(s, "{:<w$}  {:>9}  {:>9}  {:>7}  result  note", "check", "tolerance", "observed", "time");
    for c in checks {
        let _ = writeln!(
            s,
            "{:<w$}  {:>9.1e}  {:>9.2e}  {:>6.2}s  {:<6}  {}",
            c.name,
            c.tolerance,
            c.observed,
            c.elapsed.as_secs_f64(),
            if c.pass { "pass" } else { "FAIL" },
            c.note
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prufer_enumeration_counts_and_small_cases() {
        // four points on a unit square: the lightest tree uses three sides
        let sq = Tensor::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(brute_force_mst_weight(&sq), 3.0);
        let edges = prufer_edges(&[3, 3], 4);
        assert_eq!(edges, vec![(0, 3), (1, 3), (2, 3)]);
    }

    #[test]
    fn planted_scan_bug_is_caught() {
        let bad = scan_equivalence(Options { corrupt_scan: true }, 4, 64, 9);
        assert!(!bad.pass, "{bad:?}");
        let good = scan_equivalence(Options::default(), 4, 64, 9);
        assert!(good.pass, "{good:?}");
    }

    #[test]
    fn table_lists_name_tolerance_and_observed() {
        let t = format_table(&[expansion_behaviour()]);
        assert!(t.starts_with("check"));
        assert!(t.contains("expansion loss") && t.contains("1.0e-12") && t.contains("pass"));
    }
}
