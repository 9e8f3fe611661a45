//! The completion network: hyperpoint generation, spread and point
//! deformation, composed into one forward pass.

mod config;

pub use config::{ModelConfig, SequenceOrder};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Init, Linear, Mlp, ParamBuilder, ParamStore};
use crate::points::{fps, hilbert_order, EdgeConv, PointCloud, SampledSet};
use crate::rng::Rng;
use crate::ssm::{MambaLayer, MambaStack};
use crate::tensor::Tensor;

/// Hyperpoints with the tensors they were derived from.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperPointSet {
    /// P_s, `[M, 3]`.
    pub hyper_coords: Tensor,
    /// F_s, `[M, C]`.
    pub hyper_feats: Tensor,
    /// P_p, `[N, 3]`.
    pub sampled_coords: Tensor,
    /// Final encoder features, `[N, C]`.
    pub enhanced_feats: Tensor,
}

/// Recorded counterpart of [`HyperPointSet`].
#[derive(Clone, Copy, Debug)]
pub struct HyperPoints<'g> {
    pub hyper_coords: Var<'g>,
    pub hyper_feats: Var<'g>,
    pub sampled_coords: Var<'g>,
    pub enhanced_feats: Var<'g>,
}

impl HyperPoints<'_> {
    pub fn to_set(&self) -> HyperPointSet {
        HyperPointSet {
            hyper_coords: (*self.hyper_coords.value()).clone(),
            hyper_feats: (*self.hyper_feats.value()).clone(),
            sampled_coords: (*self.sampled_coords.value()).clone(),
            enhanced_feats: (*self.enhanced_feats.value()).clone(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput<'g> {
    pub anchor_coords: Var<'g>,
    pub anchor_feats: Var<'g>,
    pub refined: Var<'g>,
}

fn attend<'g>(q: Var<'g>, k: Var<'g>) -> Result<Var<'g>> {
    let d = q.cols() as f64;
    Ok(q.matmul_nt(&k)?.scale(1.0 / d.sqrt()).softmax_rows())
}

/// Predicts `L` anchors from the encoded sampled points and refines the
/// encoder features against them.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub feat_mlp: Mlp,
    /// `[L, N]` logits of the map that mixes per-point features into anchors.
    pub mix: crate::nn::ParamId,
    pub query: Linear,
    pub key: Linear,
    pub coord_head: Linear,
    pub refine_q: Linear,
    pub refine_k: Linear,
    pub refine_v: Linear,
    pub refine_o: Linear,
    pub heads: usize,
    pub anchors: usize,
}

impl CrossAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Self {
        let c = cfg.width;
        let head_init = if cfg.zero_init_heads { Init::Zeros } else { Init::FanIn };
        Self {
            feat_mlp: Mlp::new(&mut pb.sub("feat_mlp"), &[c, c, c], cfg.activation, Init::FanIn),
            mix: pb.uniform("mix", &[cfg.anchors, cfg.sampled], 1.0),
            query: Linear::new(&mut pb.sub("query"), c, c, false, Init::FanIn),
            key: Linear::new(&mut pb.sub("key"), c, c, false, Init::FanIn),
            coord_head: Linear::new(&mut pb.sub("coord_head"), 3 + c, 3, true, head_init),
            refine_q: Linear::new(&mut pb.sub("refine_q"), c, c, false, Init::FanIn),
            refine_k: Linear::new(&mut pb.sub("refine_k"), c, c, false, Init::FanIn),
            refine_v: Linear::new(&mut pb.sub("refine_v"), c, c, false, Init::FanIn),
            refine_o: Linear::new(&mut pb.sub("refine_o"), c, c, true, Init::FanIn),
            heads: cfg.heads,
            anchors: cfg.anchors,
        }
    }

    /// Per-head anchor-to-point attention weights, each `[L, N]`.
    pub fn weights<'g>(&self, anchor_feats: Var<'g>, enhanced: Var<'g>) -> Result<Vec<Var<'g>>> {
        let q = self.query.forward(anchor_feats)?;
        let k = self.key.forward(enhanced)?;
        let d = q.cols() / self.heads;
        (0..self.heads)
            .map(|h| attend(q.slice_cols(h * d, d)?, k.slice_cols(h * d, d)?))
            .collect()
    }

    pub fn forward<'g>(&self, sampled: Var<'g>, enhanced: Var<'g>) -> Result<AttentionOutput<'g>> {
        let g = sampled.graph();
        let n = sampled.rows();
        if n == 0 {
            return Err(Error::Empty("cross attention"));
        }
        let mix = g.param(self.mix);
        if mix.cols() != n {
            return Err(Error::Config(format!(
                "cross attention was built for {} sampled points, got {n}",
                mix.cols()
            )));
        }
        let pooled = enhanced.max_pool_rows()?;
        let local = self.feat_mlp.forward(enhanced.sub_from_row(&pooled)?)?;
        let anchor_feats = mix.softmax_rows().matmul(&local)?;

        let per_head = self
            .weights(anchor_feats, enhanced)?
            .into_iter()
            .map(|w| w.matmul(&sampled))
            .collect::<Result<Vec<_>>>()?;
        // anchor-major rows so that each anchor's heads form one group
        let l = self.anchors;
        let order: Vec<usize> = (0..l).flat_map(|a| (0..self.heads).map(move |h| h * l + a)).collect();
        let coords = Var::concat_rows(&per_head)?.gather_rows(&order)?.group_max(self.heads)?;
        let global = pooled.reshape(&[1, pooled.cols()])?.repeat_rows(l);
        let joined = Var::concat_cols(&[coords, global])?;
        let anchor_coords = coords.add(&self.coord_head.forward(joined)?)?;

        let w = attend(self.refine_q.forward(enhanced)?, self.refine_k.forward(anchor_feats)?)?;
        let update = self.refine_o.forward(w.matmul(&self.refine_v.forward(anchor_feats)?)?)?;
        let refined = enhanced.add(&update)?;
        Ok(AttentionOutput {
            anchor_coords,
            anchor_feats,
            refined,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub layer: MambaLayer,
    pub attention: CrossAttention,
}

/// One affine-modulated grid transform.
#[derive(Clone, Debug)]
pub struct DeformBlock {
    pub alpha: Linear,
    pub lambda: Linear,
    pub grid: Linear,
}

/// `repeat(λ, k) + standardize(g_in) ⊙ α`, with group statistics over each
/// run of `k` rows and the deviation clamped below at `floor`.
pub fn affine_modulate<'g>(g_in: Var<'g>, lambda: Var<'g>, alpha: Var<'g>, k: usize, floor: f64) -> Result<Var<'g>> {
    let normed = g_in.group_standardize(k, floor)?.mul_row(&alpha)?;
    lambda.repeat_rows(k).add(&normed)
}

impl DeformBlock {
    pub fn new(pb: &mut ParamBuilder<'_>, width: usize, grid_width: usize) -> Self {
        Self {
            alpha: Linear::new(&mut pb.sub("alpha"), width, grid_width, true, Init::FanIn),
            lambda: Linear::new(&mut pb.sub("lambda"), width, grid_width, true, Init::FanIn),
            grid: Linear::new(&mut pb.sub("grid"), grid_width, grid_width, true, Init::FanIn),
        }
    }

    /// `grid_feats` is `[(N+M)·K, C_m]`, `decoder_feats` `[N+M, C]`.
    pub fn forward<'g>(
        &self,
        grid_feats: Var<'g>,
        decoder_feats: Var<'g>,
        k: usize,
        floor: f64,
        act: Activation,
    ) -> Result<Var<'g>> {
        if grid_feats.rows() != decoder_feats.rows() * k {
            return Err(Error::dim("deform block", &grid_feats.shape(), &decoder_feats.shape()));
        }
        let alpha = self.alpha.forward(decoder_feats.max_pool_rows()?)?.add_scalar(1.0);
        let lambda = self.lambda.forward(decoder_feats)?;
        let mixed = affine_modulate(grid_feats, lambda, alpha, k, floor)?;
        Ok(act.apply(self.grid.forward(mixed)?))
    }
}

/// Row-major `side × side` lattice over `[-span, span]²`.
pub fn folding_grid(side: usize, span: f64) -> Tensor {
    let step = |i: usize| {
        if side == 1 {
            0.0
        } else {
            -span + 2.0 * span * i as f64 / (side - 1) as f64
        }
    };
    let mut data = Vec::with_capacity(side * side * 2);
    for i in 0..side {
        for j in 0..side {
            data.push(step(i));
            data.push(step(j));
        }
    }
    Tensor::from_parts(vec![side * side, 2], data)
}

/// Every tensor the model records in one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput<'g> {
    /// `[(N+M)·K, 3]`.
    pub completed: Var<'g>,
    /// New hyperpoints S, `[N+M, 3]`.
    pub centers: Var<'g>,
    /// Spread offsets ΔH, `[M, 3]`.
    pub offsets: Var<'g>,
    pub hyper: HyperPoints<'g>,
}

/// Concrete result of running the model outside training.
#[derive(Clone, Debug)]
pub struct Completion {
    pub completed: PointCloud,
    pub centers: Tensor,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    edge: EdgeConv,
    embed: Linear,
    encoder: MambaStack,
    stages: Vec<Stage>,
    spread_mlp: Mlp,
    decoder_in: Linear,
    decoder: MambaStack,
    grid_lift: Linear,
    deform: Vec<DeformBlock>,
    head: Linear,
}

const DEFORM_BLOCKS: usize = 3;

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let cfg = &config;
        let c = cfg.width;
        let ssm = cfg.ssm();
        let head_init = if cfg.zero_init_heads { Init::Zeros } else { Init::FanIn };
        let mut params = ParamStore::new();
        let mut rng = Rng::new(cfg.seed);
        let mut pb = ParamBuilder::new(&mut params, &mut rng);

        let edge = EdgeConv::new(&mut pb.sub("edge"), cfg.knn, 64, c, cfg.activation);
        let embed = Linear::new(&mut pb.sub("embed"), c + 3, c, true, Init::FanIn);
        let encoder = MambaStack::new(&mut pb.sub("encoder"), &ssm, cfg.encoder_depth);
        let stages = (0..cfg.stages())
            .map(|i| {
                let mut sp = pb.sub(format!("stage{i}"));
                Stage {
                    layer: MambaLayer::new(&mut sp.sub("layer"), &ssm),
                    attention: CrossAttention::new(&mut sp.sub("attention"), cfg),
                }
            })
            .collect();
        let spread_mlp = Mlp::new(&mut pb.sub("spread"), &[c, c, 3 * cfg.hyperpoints], cfg.activation, head_init);
        let decoder_in = Linear::new(&mut pb.sub("decoder_in"), c + 3, c, true, Init::FanIn);
        let decoder = MambaStack::new(&mut pb.sub("decoder"), &ssm, cfg.decoder_depth);
        let grid_lift = Linear::new(&mut pb.sub("grid_lift"), 2, cfg.grid_width, true, Init::FanIn);
        let deform = (0..DEFORM_BLOCKS)
            .map(|j| DeformBlock::new(&mut pb.sub(format!("deform{j}")), c, cfg.grid_width))
            .collect();
        let head = Linear::new(&mut pb.sub("head"), cfg.grid_width, 3, true, head_init);
        Ok(Self {
            config,
            params,
            edge,
            embed,
            encoder,
            stages,
            spread_mlp,
            decoder_in,
            decoder,
            grid_lift,
            deform,
            head,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Scalar counts keyed by the leading component of each parameter name,
    /// with generation stages folded together.
    pub fn param_groups(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for id in self.params.ids() {
            let name = self.params.name(id);
            let mut parts = name.split('.');
            let head = parts.next().unwrap_or_default();
            let key = if head.starts_with("stage") {
                format!("stage.{}", parts.next().unwrap_or_default())
            } else {
                head.to_string()
            };
            let n = self.params.value(id).len();
            match out.iter_mut().find(|e| e.0 == key) {
                Some(e) => e.1 += n,
                None => out.push((key, n)),
            }
        }
        out
    }

    /// Replaces every parameter value; names and shapes must match.
    pub fn load_params(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                self.params.len(),
                named.len()
            )));
        }
        for (id, (name, t)) in self.params.ids().collect::<Vec<_>>().into_iter().zip(named) {
            if self.params.name(id) != name {
                return Err(Error::Checkpoint(format!(
                    "parameter {} is named '{name}', expected '{}'",
                    id.index(),
                    self.params.name(id)
                )));
            }
            self.params
                .set(id, t)
                .map_err(|e| Error::Checkpoint(format!("parameter '{name}': {e}")))?;
        }
        Ok(())
    }

    /// FPS subset in the configured sequence order.
    pub fn sample(&self, cloud: &PointCloud) -> Result<SampledSet> {
        let n = self.config.sampled;
        if cloud.len() < n {
            return Err(Error::Input(format!(
                "input has {} points but the model samples {n}",
                cloud.len()
            )));
        }
        let s = fps(cloud, n, 0)?;
        Ok(match self.config.order {
            SequenceOrder::Fps => s,
            SequenceOrder::Hilbert => {
                let ord = hilbert_order(&s.coords);
                SampledSet {
                    indices: ord.iter().map(|&i| s.indices[i]).collect(),
                    coords: s.coords.gather_rows(&ord),
                }
            }
        })
    }

    pub fn generate<'g>(&self, g: &'g Graph<'g>, cloud: &PointCloud) -> Result<HyperPoints<'g>> {
        let samples = self.sample(cloud)?;
        let sampled = g.constant(samples.coords.clone());
        let edge = EdgeConv {
            k: self.edge.k.min(cloud.len()),
            ..self.edge.clone()
        };
        let local = edge.forward(sampled, cloud, &samples)?;
        let mut feats = self
            .encoder
            .forward(self.embed.forward(Var::concat_cols(&[sampled, local])?)?)?;
        let mut coords = Vec::with_capacity(self.stages.len());
        let mut anchor_feats = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let enc = stage.layer.forward(feats)?;
            let out = stage.attention.forward(sampled, enc)?;
            coords.push(out.anchor_coords);
            anchor_feats.push(out.anchor_feats);
            feats = out.refined;
        }
        Ok(HyperPoints {
            hyper_coords: Var::concat_rows(&coords)?,
            hyper_feats: Var::concat_rows(&anchor_feats)?,
            sampled_coords: sampled,
            enhanced_feats: feats,
        })
    }

    /// Returns `(H', ΔH)`.
    pub fn spread<'g>(&self, hp: &HyperPoints<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let f = Var::concat_rows(&[hp.enhanced_feats, hp.hyper_feats])?;
        let offsets = self
            .spread_mlp
            .forward(f.max_pool_rows()?)?
            .reshape(&[self.config.hyperpoints, 3])?;
        Ok((hp.hyper_coords.add(&offsets)?, offsets))
    }

    /// Decodes new hyperpoints and their features into `(N+M)·K` points.
    pub fn point_deformation<'g>(&self, centers: Var<'g>, feats: Var<'g>) -> Result<Var<'g>> {
        let cfg = &self.config;
        let k = cfg.grid_points;
        let side = cfg.grid_side();
        if side * side != k {
            return Err(Error::Config(format!("grid_points ({k}) must be a perfect square")));
        }
        let g = centers.graph();
        let n = centers.rows();
        let decoded = self
            .decoder
            .forward(self.decoder_in.forward(Var::concat_cols(&[feats, centers])?)?)?;
        let grid = folding_grid(side, cfg.grid_span);
        let mut tiled = Vec::with_capacity(n * grid.len());
        for _ in 0..n {
            tiled.extend_from_slice(grid.data());
        }
        let tiled = g.constant(Tensor::from_parts(vec![n * k, 2], tiled));
        let mut x = self.grid_lift.forward(tiled)?;
        for block in &self.deform {
            x = block.forward(x, decoded, k, cfg.sigma_floor, cfg.activation)?;
        }
        centers.repeat_rows(k).add(&self.head.forward(x)?)
    }

    pub fn forward<'g>(&self, g: &'g Graph<'g>, cloud: &PointCloud) -> Result<ForwardOutput<'g>> {
        let hyper = self.generate(g, cloud)?;
        let (spread, offsets) = self.spread(&hyper)?;
        let centers = Var::concat_rows(&[hyper.sampled_coords, spread])?;
        let feats = Var::concat_rows(&[hyper.enhanced_feats, hyper.hyper_feats])?;
        let completed = self.point_deformation(centers, feats)?;
        Ok(ForwardOutput {
            completed,
            centers,
            offsets,
            hyper,
        })
    }

    pub fn complete(&self, cloud: &PointCloud) -> Result<Completion> {
        let g = Graph::with_params(&self.params);
        let out = self.forward(&g, cloud)?;
        let completed = (*out.completed.value()).clone();
        if !completed.all_finite() {
            return Err(Error::Numeric("completed cloud has non-finite coordinates".into()));
        }
        Ok(Completion {
            completed: PointCloud::new(completed)?,
            centers: (*out.centers.value()).clone(),
        })
    }
}

/// Finite-difference check of every parameter gradient through the full
/// forward pass, probed with fixed random weights on both outputs. The
/// training loss is left out on purpose: its edge indicator is
/// discontinuous.
pub fn pipeline_gradcheck(model: &Model, cloud: &PointCloud, step: f64, per_tensor: usize, seed: u64) -> Result<crate::gradcheck::GradCheckReport> {
    let cfg = &model.config;
    let mut rng = Rng::new(seed ^ 0x9e37_79b9);
    let wp = Tensor::from_parts(vec![cfg.output_points(), 3], rng.uniform_vec(cfg.output_points() * 3, -1.0, 1.0));
    let wc = Tensor::from_parts(vec![cfg.centers(), 3], rng.uniform_vec(cfg.centers() * 3, -1.0, 1.0));
    crate::gradcheck::check_params(&model.params, step, per_tensor, seed, |g| {
        let out = model.forward(g, cloud)?;
        let a = out.completed.mul(&g.constant(wp.clone()))?.sum();
        let b = out.centers.mul(&g.constant(wc.clone()))?.sum();
        a.add(&b)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics;

    fn sphere(n: usize, seed: u64) -> PointCloud {
        let mut rng = Rng::new(seed);
        let rows: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                let v = [rng.normal(), rng.normal(), rng.normal()];
                let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                [0.4 * v[0] / r, 0.4 * v[1] / r, 0.4 * v[2] / r]
            })
            .collect();
        PointCloud::from_points(&rows).unwrap()
    }

    fn random_heads(mut cfg: ModelConfig) -> ModelConfig {
        cfg.zero_init_heads = false;
        cfg
    }

    #[test]
    fn grid_layout() {
        let g = folding_grid(3, 0.05);
        assert_eq!(g.shape(), &[9, 2]);
        assert_eq!(g.row(0), &[-0.05, -0.05]);
        assert_eq!(g.row(4), &[0.0, 0.0]);
        assert_eq!(g.row(8), &[0.05, 0.05]);
    }

    #[test]
    fn tiny_shapes_and_collapse_baseline() {
        let model = Model::new(ModelConfig::tiny()).unwrap();
        let cloud = sphere(40, 1);
        let g = Graph::with_params(&model.params);
        let out = model.forward(&g, &cloud).unwrap();
        assert_eq!(out.completed.shape(), vec![16 * 4, 3]);
        assert_eq!(out.centers.shape(), vec![16, 3]);
        assert_eq!(out.offsets.value().max_abs(), 0.0);
        // every patch sits on its center
        let c = out.centers.value();
        let p = out.completed.value();
        for i in 0..p.rows() {
            assert_eq!(p.row(i), c.row(i / 4));
        }
        // H' == H with the zero offset head
        let hs = out.hyper.to_set();
        assert_eq!(c.row(8), hs.hyper_coords.row(0));
    }

    #[test]
    fn too_few_points_is_an_input_error() {
        let model = Model::new(ModelConfig::tiny()).unwrap();
        let g = Graph::with_params(&model.params);
        assert!(matches!(model.forward(&g, &sphere(5, 0)), Err(Error::Input(_))));
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let model = Model::new(ModelConfig::tiny()).unwrap();
        let g = Graph::with_params(&model.params);
        let mut rng = Rng::new(4);
        let f = g.constant(Tensor::new(vec![8, 8], rng.uniform_vec(64, -1.0, 1.0)).unwrap());
        let a = g.constant(Tensor::new(vec![4, 8], rng.uniform_vec(32, -1.0, 1.0)).unwrap());
        for w in model.stages[0].attention.weights(a, f).unwrap() {
            let w = w.value();
            assert_eq!(w.shape(), &[4, 8]);
            for r in 0..w.rows() {
                assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(w.row(r).iter().all(|v| *v >= 0.0));
            }
        }
    }

    #[test]
    fn identical_features_give_identical_anchor_features() {
        let model = Model::new(ModelConfig::tiny()).unwrap();
        let g = Graph::with_params(&model.params);
        let p = g.constant(sphere(8, 2).into_tensor());
        let f = g.constant(Tensor::full(&[8, 8], 0.3));
        let out = model.stages[0].attention.forward(p, f).unwrap();
        let af = out.anchor_feats.value();
        for r in 1..af.rows() {
            assert!(af.row(r).iter().zip(af.row(0)).all(|(a, b)| (a - b).abs() < 1e-12));
        }
        assert_eq!(out.anchor_coords.shape(), vec![4, 3]);
    }

    #[test]
    fn sampled_coords_translate_with_input() {
        let model = Model::new(ModelConfig::tiny()).unwrap();
        let cloud = sphere(30, 3);
        let shift = [0.5, -1.0, 2.0];
        let a = model.sample(&cloud).unwrap();
        let b = model.sample(&cloud.translated(shift)).unwrap();
        assert_eq!(a.indices, b.indices);
        for i in 0..a.coords.rows() {
            for d in 0..3 {
                assert!((a.coords.row(i)[d] + shift[d] - b.coords.row(i)[d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_seed_same_hyperpoints() {
        let cloud = sphere(32, 5);
        let run = || {
            let model = Model::new(ModelConfig::tiny()).unwrap();
            let g = Graph::with_params(&model.params);
            model.generate(&g, &cloud).unwrap().to_set()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn deform_block_examples() {
        let g = Graph::new();
        // already standardized groups of two rows
        let g_in = g.constant(Tensor::from_rows(&[[1.0, -1.0], [-1.0, 1.0], [-1.0, 1.0], [1.0, -1.0]]).unwrap());
        let zero = g.constant(Tensor::zeros(&[2, 2]));
        let one = g.constant(Tensor::full(&[2], 1.0));
        let out = affine_modulate(g_in, zero, one, 2, 1e-5).unwrap();
        assert!(out.value().max_abs_diff(&g_in.value()) < 1e-12);

        let flat = g.constant(Tensor::full(&[4, 2], 3.0));
        let lam = g.constant(Tensor::from_rows(&[[0.5, -0.5], [2.0, 1.0]]).unwrap());
        let out = affine_modulate(flat, lam, one, 2, 1e-5).unwrap();
        let want = Tensor::from_rows(&[[0.5, -0.5], [0.5, -0.5], [2.0, 1.0], [2.0, 1.0]]).unwrap();
        assert_eq!(out.value().max_abs_diff(&want), 0.0);

        let alpha = g.constant(Tensor::vector(vec![2.5, -0.7]));
        let out = affine_modulate(g_in, lam, alpha, 2, 1e-5).unwrap().value();
        for j in 0..2 {
            for ch in 0..2 {
                let mean = (out.row(2 * j)[ch] + out.row(2 * j + 1)[ch]) / 2.0;
                assert!((mean - lam.value().row(j)[ch]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spread_gradient_reaches_offset_head() {
        let model = Model::new(random_heads(ModelConfig::tiny())).unwrap();
        let cloud = sphere(24, 6);
        let g = Graph::with_params(&model.params);
        let hp = model.generate(&g, &cloud).unwrap();
        let (h, _) = model.spread(&hp).unwrap();
        let grads = g.backward(h.square().sum()).unwrap();
        for l in &model.spread_mlp.layers {
            assert!(grads.param(l.weight).unwrap().max_abs() > 0.0);
        }
    }

    #[test]
    fn pipeline_gradient_matches_finite_differences() {
        for seed in 0..4 {
            let mut cfg = random_heads(ModelConfig::tiny());
            cfg.seed = seed;
            let model = Model::new(cfg).unwrap();
            let report = pipeline_gradcheck(&model, &sphere(24, 7 + seed), 1e-4, 3, seed).unwrap();
            assert!(report.max_rel_err < 1e-3, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn every_parameter_group_gets_gradient() {
        let model = Model::new(random_heads(ModelConfig::tiny())).unwrap();
        let cloud = sphere(24, 9);
        let truth = sphere(40, 10);
        let g = Graph::with_params(&model.params);
        let out = model.forward(&g, &cloud).unwrap();
        let (loss, _) = metrics::total_loss_var(out.centers, out.completed, g.constant(truth.into_tensor()), &model.config.loss_params()).unwrap();
        let grads = g.backward(loss).unwrap().into_param_grads(&model.params);
        let mut groups: Vec<(String, f64)> = Vec::new();
        for (id, gr) in model.params.ids().zip(&grads) {
            let key = model.params.name(id).split('.').next().unwrap().to_string();
            match groups.iter_mut().find(|e| e.0 == key) {
                Some(e) => e.1 = e.1.max(gr.max_abs()),
                None => groups.push((key, gr.max_abs())),
            }
        }
        for (name, m) in groups {
            assert!(m > 0.0, "{name} has no gradient");
        }
    }

    #[test]
    fn checkpoint_params_reload() {
        let a = Model::new(ModelConfig::tiny()).unwrap();
        let mut cfg = ModelConfig::tiny();
        cfg.seed = 9;
        let mut b = Model::new(cfg).unwrap();
        let named = a.params.ids().map(|id| (a.params.name(id).to_string(), a.params.value(id).clone())).collect();
        b.load_params(named).unwrap();
        let cloud = sphere(20, 1);
        assert_eq!(
            a.complete(&cloud).unwrap().completed.tensor(),
            b.complete(&cloud).unwrap().completed.tensor()
        );
        assert!(b.load_params(vec![]).is_err());
    }
}
