//! Selective state-space machinery: discretization, the input-dependent
//! scan, and the gated Mamba block.
//!
//! The state matrix is diagonal per channel, `A = -exp(a_log)` with shape
//! `[D, S]`. For a sequence `u ∈ R^{L×D}` with step sizes `Δ ∈ R^{L×D}` and
//! input-dependent `B, C ∈ R^{L×S}`:
//!
//! ```text
//! h_t[d,s] = exp(Δ_t[d]·A[d,s]) · h_{t-1}[d,s] + B̄_t[d,s] · u_t[d]
//! y_t[d]   = Σ_s C_t[s] · h_t[d,s],          h_0 = 0
//! ```
//!
//! with `B̄ = Δ·B` ([`Discretization::Simplified`]) or the exact
//! zero-order-hold `B̄ = (exp(ΔA) - 1)/A · B` ([`Discretization::Exact`]).

use std::fmt;
use std::str::FromStr;

use crate::autograd::{CustomOp, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Init, LayerNorm, Linear, Mlp, ParamBuilder, ParamId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Discretization {
    /// `B̄ = Δ·B`
    #[default]
    Simplified,
    /// `B̄ = (ΔA)⁻¹(exp(ΔA) - 1)·ΔB`
    Exact,
}

impl fmt::Display for Discretization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Discretization::Simplified => "simplified",
            Discretization::Exact => "exact",
        })
    }
}

impl FromStr for Discretization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simplified" => Ok(Self::Simplified),
            "exact" => Ok(Self::Exact),
            o => Err(Error::Config(format!("unknown discretization '{o}'"))),
        }
    }
}

#[inline]
fn input_coef(mode: Discretization, delta: f64, a: f64, a_bar: f64) -> f64 {
    match mode {
        Discretization::Simplified => delta,
        Discretization::Exact => (a_bar - 1.0) / a,
    }
}

/// Zero-order-hold discretization of one diagonal entry:
/// returns `(Ā, B̄)` for step `delta`, state coefficient `a` and input
/// coefficient `b`.
pub fn discretize_zoh(delta: f64, a: f64, b: f64, mode: Discretization) -> Result<(f64, f64)> {
    if !(delta > 0.0) {
        return Err(Error::Contract(format!("step size must be positive, got {delta}")));
    }
    if !(a < 0.0) {
        return Err(Error::Contract(format!("state coefficient must be negative, got {a}")));
    }
    let a_bar = (delta * a).exp();
    Ok((a_bar, input_coef(mode, delta, a, a_bar) * b))
}

/// Discretizes a whole `[D, S]` state matrix for per-channel steps `delta`
/// and a shared input vector `b ∈ R^S`.
pub fn discretize(delta: &[f64], a: &Tensor, b: &[f64], mode: Discretization) -> Result<(Tensor, Tensor)> {
    let (d, s) = (a.rows(), a.cols());
    if delta.len() != d || b.len() != s {
        return Err(Error::dim("discretize", a.shape(), &[delta.len(), b.len()]));
    }
    let mut a_bar = Tensor::zeros(&[d, s]);
    let mut b_bar = Tensor::zeros(&[d, s]);
    for ch in 0..d {
        for j in 0..s {
            let (ab, bb) = discretize_zoh(delta[ch], a.row(ch)[j], b[j], mode)?;
            a_bar.row_mut(ch)[j] = ab;
            b_bar.row_mut(ch)[j] = bb;
        }
    }
    Ok((a_bar, b_bar))
}

/// Borrowed operands of a selective scan, all row-major.
#[derive(Clone, Copy, Debug)]
pub struct ScanInputs<'a> {
    /// `[len, d]`
    pub u: &'a [f64],
    /// `[len, d]`, strictly positive
    pub delta: &'a [f64],
    /// `[d, s]`, strictly negative
    pub a: &'a [f64],
    /// `[len, s]`
    pub b: &'a [f64],
    /// `[len, s]`
    pub c: &'a [f64],
    pub len: usize,
    pub d: usize,
    pub s: usize,
    pub mode: Discretization,
}

impl ScanInputs<'_> {
    fn check(&self) -> Result<()> {
        let (l, d, s) = (self.len, self.d, self.s);
        if l == 0 {
            return Err(Error::Empty("selective_scan"));
        }
        let ok = self.u.len() == l * d
            && self.delta.len() == l * d
            && self.a.len() == d * s
            && self.b.len() == l * s
            && self.c.len() == l * s;
        if !ok {
            return Err(Error::dim("selective_scan", &[l, d, s], &[self.u.len(), self.a.len(), self.b.len()]));
        }
        Ok(())
    }
}

/// Step-by-step recurrence; returns `y` `[len, d]`.
pub fn scan_sequential(x: &ScanInputs<'_>) -> Vec<f64> {
    let (d, s) = (x.d, x.s);
    let mut h = vec![0.0; d * s];
    let mut y = vec![0.0; x.len * d];
    for t in 0..x.len {
        let bt = &x.b[t * s..(t + 1) * s];
        let ct = &x.c[t * s..(t + 1) * s];
        for ch in 0..d {
            let dt = x.delta[t * d + ch];
            let ut = x.u[t * d + ch];
            let hs = &mut h[ch * s..(ch + 1) * s];
            let ar = &x.a[ch * s..(ch + 1) * s];
            let mut acc = 0.0;
            for j in 0..s {
                let ab = (dt * ar[j]).exp();
                hs[j] = ab * hs[j] + input_coef(x.mode, dt, ar[j], ab) * bt[j] * ut;
                acc += ct[j] * hs[j];
            }
            y[t * d + ch] = acc;
        }
    }
    y
}

/// Blocked evaluation: inside each chunk the state is expanded in closed
/// form from cumulative log-decays, and only chunk boundaries carry state.
pub fn scan_chunked(x: &ScanInputs<'_>, chunk: usize) -> Vec<f64> {
    let chunk = chunk.max(1);
    let (d, s) = (x.d, x.s);
    let mut h = vec![0.0; d * s];
    let mut y = vec![0.0; x.len * d];
    let mut cum = vec![0.0; chunk];
    let mut drive = vec![0.0; chunk];
    let mut start = 0;
    while start < x.len {
        let end = (start + chunk).min(x.len);
        let n = end - start;
        for ch in 0..d {
            for j in 0..s {
                let a = x.a[ch * s + j];
                let mut acc = 0.0;
                for i in 0..n {
                    let t = start + i;
                    let dt = x.delta[t * d + ch];
                    acc += dt * a;
                    cum[i] = acc;
                    let ab = (dt * a).exp();
                    drive[i] = input_coef(x.mode, dt, a, ab) * x.b[t * s + j] * x.u[t * d + ch];
                }
                let h0 = h[ch * s + j];
                let mut last = 0.0;
                for i in 0..n {
                    let mut v = cum[i].exp() * h0;
                    for k in 0..=i {
                        v += (cum[i] - cum[k]).exp() * drive[k];
                    }
                    y[(start + i) * d + ch] += x.c[(start + i) * s + j] * v;
                    last = v;
                }
                h[ch * s + j] = last;
            }
        }
        start = end;
    }
    y
}

/// Gradients of a scan with respect to each operand.
#[derive(Clone, Debug)]
pub struct ScanGrads {
    pub u: Vec<f64>,
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

/// Reverse-time adjoint recurrence. The hidden states are recomputed here
/// rather than kept from the forward pass.
pub fn scan_backward(x: &ScanInputs<'_>, gy: &[f64]) -> ScanGrads {
    let (l, d, s) = (x.len, x.d, x.s);
    let ds = d * s;
    let mut hs = vec![0.0; l * ds];
    for t in 0..l {
        for ch in 0..d {
            let dt = x.delta[t * d + ch];
            let ut = x.u[t * d + ch];
            for j in 0..s {
                let a = x.a[ch * s + j];
                let ab = (dt * a).exp();
                let prev = if t > 0 { hs[(t - 1) * ds + ch * s + j] } else { 0.0 };
                hs[t * ds + ch * s + j] = ab * prev + input_coef(x.mode, dt, a, ab) * x.b[t * s + j] * ut;
            }
        }
    }
    let mut g = ScanGrads {
        u: vec![0.0; l * d],
        delta: vec![0.0; l * d],
        a: vec![0.0; ds],
        b: vec![0.0; l * s],
        c: vec![0.0; l * s],
    };
    let mut gh = vec![0.0; ds];
    for t in (0..l).rev() {
        for ch in 0..d {
            let gyt = gy[t * d + ch];
            let dt = x.delta[t * d + ch];
            let ut = x.u[t * d + ch];
            let mut gdt = 0.0;
            let mut gut = 0.0;
            for j in 0..s {
                let idx = ch * s + j;
                let a = x.a[idx];
                let bt = x.b[t * s + j];
                let h_t = hs[t * ds + idx];
                let h_prev = if t > 0 { hs[(t - 1) * ds + idx] } else { 0.0 };
                let ght = gh[idx] + gyt * x.c[t * s + j];
                g.c[t * s + j] += gyt * h_t;
                let ab = (dt * a).exp();
                let ga = ght * h_prev;
                gdt += ga * ab * a;
                g.a[idx] += ga * ab * dt;
                match x.mode {
                    Discretization::Simplified => {
                        gdt += ght * bt * ut;
                        g.b[t * s + j] += ght * dt * ut;
                        gut += ght * dt * bt;
                    }
                    Discretization::Exact => {
                        let coef = (ab - 1.0) / a;
                        gdt += ght * ab * bt * ut;
                        g.a[idx] += ght * bt * ut * (dt * ab * a - (ab - 1.0)) / (a * a);
                        g.b[t * s + j] += ght * coef * ut;
                        gut += ght * coef * bt;
                    }
                }
                gh[idx] = ght * ab;
            }
            g.delta[t * d + ch] += gdt;
            g.u[t * d + ch] += gut;
        }
    }
    g
}

struct ScanOp {
    mode: Discretization,
}

impl CustomOp for ScanOp {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (u, delta, a, b, c) = (inputs[0], inputs[1], inputs[2], inputs[3], inputs[4]);
        let x = ScanInputs {
            u: u.data(),
            delta: delta.data(),
            a: a.data(),
            b: b.data(),
            c: c.data(),
            len: u.rows(),
            d: u.cols(),
            s: a.cols(),
            mode: self.mode,
        };
        let g = scan_backward(&x, grad.data());
        let wrap = |t: &Tensor, v: Vec<f64>| Some(Tensor::from_parts(t.shape().to_vec(), v));
        vec![
            wrap(u, g.u),
            wrap(delta, g.delta),
            wrap(a, g.a),
            wrap(b, g.b),
            wrap(c, g.c),
        ]
    }
}

/// Differentiable scan over recorded operands (shapes as in [`ScanInputs`]).
pub fn scan_var<'g>(
    u: Var<'g>,
    delta: Var<'g>,
    a: Var<'g>,
    b: Var<'g>,
    c: Var<'g>,
    mode: Discretization,
) -> Result<Var<'g>> {
    let (uv, dv, av, bv, cv) = (u.value(), delta.value(), a.value(), b.value(), c.value());
    let x = ScanInputs {
        u: uv.data(),
        delta: dv.data(),
        a: av.data(),
        b: bv.data(),
        c: cv.data(),
        len: uv.rows(),
        d: uv.cols(),
        s: av.cols(),
        mode,
    };
    x.check()?;
    if dv.shape() != uv.shape() || av.rows() != x.d || bv.rows() != x.len || cv.rows() != x.len {
        return Err(Error::dim("selective_scan", uv.shape(), av.shape()));
    }
    let y = Tensor::from_parts(uv.shape().to_vec(), scan_sequential(&x));
    Ok(u.graph().custom(&[u, delta, a, b, c], y, Box::new(ScanOp { mode })))
}

/// Hyperparameters shared by every block of a stack.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmConfig {
    /// Model width C.
    pub width: usize,
    /// Inner width D = expand · C.
    pub expand: usize,
    /// State size S.
    pub state: usize,
    pub conv_kernel: usize,
    /// Rank of the Δ projection; 0 selects ceil(C / 16).
    pub dt_rank: usize,
    pub dt_min: f64,
    pub dt_max: f64,
    /// Hidden width multiplier of the MLP that follows each block.
    pub mlp_ratio: usize,
    pub activation: Activation,
    pub discretization: Discretization,
}

impl SsmConfig {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            expand: 2,
            state: 16,
            conv_kernel: 4,
            dt_rank: 0,
            dt_min: 0.001,
            dt_max: 0.1,
            mlp_ratio: 2,
            activation: Activation::Silu,
            discretization: Discretization::Simplified,
        }
    }

    pub fn inner(&self) -> usize {
        self.width * self.expand
    }

    pub fn rank(&self) -> usize {
        if self.dt_rank == 0 {
            self.width.div_ceil(16)
        } else {
            self.dt_rank
        }
    }
}

/// Per-block selective SSM parameters.
#[derive(Clone, Debug)]
pub struct SsmParams {
    /// `[D, S]`; `A = -exp(a_log)`.
    pub a_log: ParamId,
    pub delta_down: Linear,
    pub delta_up: Linear,
    pub b_proj: Linear,
    pub c_proj: Linear,
    pub mode: Discretization,
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl SsmParams {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &SsmConfig) -> Self {
        let (d, s, r) = (cfg.inner(), cfg.state, cfg.rank());
        let a_log = {
            let data = (0..d).flat_map(|_| (1..=s).map(|v| (v as f64).ln())).collect();
            pb.add("a_log", Tensor::from_parts(vec![d, s], data))
        };
        let delta_down = Linear::new(&mut pb.sub("delta_down"), d, r, false, Init::FanIn);
        let delta_up = Linear::new(&mut pb.sub("delta_up"), r, d, true, Init::FanIn);
        // bias so that softplus(bias) is log-uniform in [dt_min, dt_max]
        let bias: Vec<f64> = (0..d)
            .map(|_| {
                let t = pb.rng().uniform(0.0, 1.0);
                let dt = (cfg.dt_min.ln() + t * (cfg.dt_max.ln() - cfg.dt_min.ln())).exp();
                inverse_softplus(dt)
            })
            .collect();
        if let Some(b) = delta_up.bias {
            pb.overwrite(b, Tensor::from_parts(vec![d], bias));
        }
        let b_proj = Linear::new(&mut pb.sub("b_proj"), d, s, false, Init::FanIn);
        let c_proj = Linear::new(&mut pb.sub("c_proj"), d, s, false, Init::FanIn);
        Self {
            a_log,
            delta_down,
            delta_up,
            b_proj,
            c_proj,
            mode: cfg.discretization,
        }
    }

    /// `Δ_t = softplus(W_up W_down x_t + b)`.
    pub fn delta<'g>(&self, x: Var<'g>) -> Result<Var<'g>> {
        Ok(self.delta_up.forward(self.delta_down.forward(x)?)?.softplus())
    }

    /// Runs the selective scan over `x` `[len, D]`.
    pub fn selective_scan<'g>(&self, x: Var<'g>) -> Result<Var<'g>> {
        if x.rows() == 0 {
            return Err(Error::Empty("selective_scan"));
        }
        let g = x.graph();
        let a = g.param(self.a_log).exp().scale(-1.0);
        let delta = self.delta(x)?;
        let b = self.b_proj.forward(x)?;
        let c = self.c_proj.forward(x)?;
        scan_var(x, delta, a, b, c, self.mode)
    }
}

/// Gated block:
///
/// ```text
/// z'  = DW(Linear(LN(z)))
/// z'' = Linear(LN(SSM(σ(z'))))
/// out = z'' ⊙ σ(LN(z)) + z
/// ```
#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub ln_in: LayerNorm,
    pub in_proj: Linear,
    /// `[D, k]` causal depthwise kernels.
    pub conv: ParamId,
    pub ssm: SsmParams,
    pub ln_ssm: LayerNorm,
    pub out_proj: Linear,
    pub ln_gate: LayerNorm,
    pub activation: Activation,
    pub width: usize,
}

impl MambaBlock {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &SsmConfig) -> Self {
        let (c, d, k) = (cfg.width, cfg.inner(), cfg.conv_kernel);
        Self {
            ln_in: LayerNorm::new(&mut pb.sub("ln_in"), c),
            in_proj: Linear::new(&mut pb.sub("in_proj"), c, d, true, Init::FanIn),
            conv: pb.uniform("conv", &[d, k], 1.0 / (k as f64).sqrt()),
            ssm: SsmParams::new(&mut pb.sub("ssm"), cfg),
            ln_ssm: LayerNorm::new(&mut pb.sub("ln_ssm"), d),
            out_proj: Linear::new(&mut pb.sub("out_proj"), d, c, true, Init::FanIn),
            ln_gate: LayerNorm::new(&mut pb.sub("ln_gate"), c),
            activation: cfg.activation,
            width: c,
        }
    }

    pub fn forward<'g>(&self, z: Var<'g>) -> Result<Var<'g>> {
        if z.cols() != self.width {
            return Err(Error::dim("mamba_block", &z.shape(), &[z.rows(), self.width]));
        }
        if z.rows() == 0 {
            return Err(Error::Empty("mamba_block"));
        }
        let g = z.graph();
        let conv = self.in_proj.forward(self.ln_in.forward(z)?)?.depthwise_conv1d(&g.param(self.conv))?;
        let y = self.ssm.selective_scan(self.activation.apply(conv))?;
        let branch = self.out_proj.forward(self.ln_ssm.forward(y)?)?;
        let gate = self.activation.apply(self.ln_gate.forward(z)?);
        branch.mul(&gate)?.add(&z)
    }
}

/// One stack layer: a block followed by a residual MLP.
#[derive(Clone, Debug)]
pub struct MambaLayer {
    pub block: MambaBlock,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

impl MambaLayer {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &SsmConfig) -> Self {
        let c = cfg.width;
        Self {
            block: MambaBlock::new(&mut pb.sub("block"), cfg),
            ln_mlp: LayerNorm::new(&mut pb.sub("ln_mlp"), c),
            mlp: Mlp::new(&mut pb.sub("mlp"), &[c, c * cfg.mlp_ratio, c], cfg.activation, Init::FanIn),
        }
    }

    pub fn forward<'g>(&self, z: Var<'g>) -> Result<Var<'g>> {
        let z = self.block.forward(z)?;
        self.mlp.forward(self.ln_mlp.forward(z)?)?.add(&z)
    }
}

#[derive(Clone, Debug)]
pub struct MambaStack {
    pub layers: Vec<MambaLayer>,
}

impl MambaStack {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &SsmConfig, depth: usize) -> Self {
        Self {
            layers: (0..depth).map(|i| MambaLayer::new(&mut pb.sub(i), cfg)).collect(),
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn forward<'g>(&self, mut z: Var<'g>) -> Result<Var<'g>> {
        for l in &self.layers {
            z = l.forward(z)?;
        }
        Ok(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::gradcheck::{check_inputs, check_params};
    use crate::nn::ParamStore;
    use crate::Rng;

    #[test]
    fn discretization_examples() {
        let (a_bar, b_bar) = discretize_zoh(1e-12, -1.0, 1.0, Discretization::Simplified).unwrap();
        assert!((a_bar - 1.0).abs() < 1e-11 && b_bar.abs() < 1e-11);
        let (a_bar, _) = discretize_zoh(1.0, -std::f64::consts::LN_2, 1.0, Discretization::Simplified).unwrap();
        assert!((a_bar - 0.5).abs() < 1e-15);
        let (a_bar, _) = discretize_zoh(1.0, -1e6, 1.0, Discretization::Simplified).unwrap();
        assert!(a_bar < 1e-300);
        assert!(discretize_zoh(0.0, -1.0, 1.0, Discretization::Simplified).is_err());
        assert!(discretize_zoh(-1.0, -1.0, 1.0, Discretization::Simplified).is_err());
        assert!(discretize_zoh(1.0, 0.5, 1.0, Discretization::Simplified).is_err());
    }

    #[test]
    fn exact_zoh_approaches_simplified_for_small_steps() {
        let (_, exact) = discretize_zoh(1e-6, -2.0, 3.0, Discretization::Exact).unwrap();
        let (_, simple) = discretize_zoh(1e-6, -2.0, 3.0, Discretization::Simplified).unwrap();
        assert!((exact - simple).abs() < 1e-11);
        // exact form: (e^{-2}-1)/(-2) · 3
        let (_, exact) = discretize_zoh(1.0, -2.0, 3.0, Discretization::Exact).unwrap();
        assert!((exact - (1.0 - (-2.0f64).exp()) / 2.0 * 3.0).abs() < 1e-15);
    }

    #[test]
    fn discretize_matrix_shape_and_bounds() {
        let a = Tensor::from_rows(&[[-1.0, -2.0], [-0.5, -3.0]]).unwrap();
        let (ab, bb) = discretize(&[0.1, 0.2], &a, &[1.0, 2.0], Discretization::Simplified).unwrap();
        assert!(ab.data().iter().all(|v| *v > 0.0 && *v < 1.0));
        assert_eq!(bb.data(), &[0.1, 0.2, 0.2, 0.4]);
    }

    #[test]
    fn frozen_scalar_scan_by_hand() {
        // Ā = 0.5 via Δ = 1, A = -ln 2; B̄ = Δ·B = 1; C = 1
        let a = [-std::f64::consts::LN_2];
        let x = ScanInputs {
            u: &[1.0, 0.0, 0.0],
            delta: &[1.0, 1.0, 1.0],
            a: &a,
            b: &[1.0, 1.0, 1.0],
            c: &[1.0, 1.0, 1.0],
            len: 3,
            d: 1,
            s: 1,
            mode: Discretization::Simplified,
        };
        let y = scan_sequential(&x);
        for (got, want) in y.iter().zip([1.0, 0.5, 0.25]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!(scan_chunked(&x, 2).iter().zip(&y).all(|(p, q)| (p - q).abs() < 1e-15));
    }

    fn random_inputs(rng: &mut Rng, len: usize, d: usize, s: usize) -> [Vec<f64>; 5] {
        [
            rng.uniform_vec(len * d, -1.0, 1.0),
            rng.uniform_vec(len * d, 0.001, 0.5),
            rng.uniform_vec(d * s, -3.0, -0.05),
            rng.uniform_vec(len * s, -1.0, 1.0),
            rng.uniform_vec(len * s, -1.0, 1.0),
        ]
    }

    #[test]
    fn chunked_matches_sequential() {
        let mut rng = Rng::new(11);
        for mode in [Discretization::Simplified, Discretization::Exact] {
            for &(len, chunk) in &[(1, 4), (17, 4), (64, 16), (50, 64)] {
                let [u, delta, a, b, c] = random_inputs(&mut rng, len, 5, 4);
                let x = ScanInputs {
                    u: &u,
                    delta: &delta,
                    a: &a,
                    b: &b,
                    c: &c,
                    len,
                    d: 5,
                    s: 4,
                    mode,
                };
                let seq = scan_sequential(&x);
                let blk = scan_chunked(&x, chunk);
                let err = seq.iter().zip(&blk).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
                assert!(err < 1e-10, "len {len} chunk {chunk}: {err}");
            }
        }
    }

    #[test]
    fn scan_gradients_match_finite_differences() {
        for mode in [Discretization::Simplified, Discretization::Exact] {
            let mut rng = Rng::new(21);
            let (len, d, s) = (6, 3, 4);
            let [u, delta, a, b, c] = random_inputs(&mut rng, len, d, s);
            let inputs = vec![
                Tensor::new(vec![len, d], u).unwrap(),
                Tensor::new(vec![len, d], delta).unwrap(),
                Tensor::new(vec![d, s], a).unwrap(),
                Tensor::new(vec![len, s], b).unwrap(),
                Tensor::new(vec![len, s], c).unwrap(),
            ];
            let w = Tensor::new(vec![len, d], rng.uniform_vec(len * d, -1.0, 1.0)).unwrap();
            let report = check_inputs(&inputs, 1e-5, |v| {
                let y = scan_var(v[0], v[1], v[2], v[3], v[4], mode).unwrap();
                y.mul(&y.graph().constant(w.clone())).unwrap().sum()
            });
            assert!(report.max_rel_err < 1e-4, "{mode}: {report:?}");
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        let cfg = SsmConfig::new(4);
        let p = SsmParams::new(&mut ParamBuilder::new(&mut store, &mut rng), &cfg);
        let g = Graph::with_params(&store);
        let y = p.selective_scan(g.constant(Tensor::zeros(&[5, 8]))).unwrap();
        assert!(y.value().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn initial_steps_in_configured_range() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        let cfg = SsmConfig::new(32);
        let p = SsmParams::new(&mut ParamBuilder::new(&mut store, &mut rng), &cfg);
        let bias = store.value(p.delta_up.bias.unwrap());
        for &b in bias.data() {
            let dt = crate::autograd::softplus(b);
            assert!((0.001 - 1e-12..=0.1 + 1e-12).contains(&dt), "{dt}");
        }
    }

    fn block_fixture(width: usize, seed: u64) -> (ParamStore, MambaBlock) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let mut cfg = SsmConfig::new(width);
        cfg.state = 4;
        let b = MambaBlock::new(&mut ParamBuilder::new(&mut store, &mut rng), &cfg);
        (store, b)
    }

    #[test]
    fn block_residual_passthrough_with_zero_output_projection() {
        let (mut store, b) = block_fixture(6, 2);
        store.value_mut(b.out_proj.weight).data_mut().fill(0.0);
        store.value_mut(b.out_proj.bias.unwrap()).data_mut().fill(0.0);
        let g = Graph::with_params(&store);
        let zero = g.constant(Tensor::zeros(&[7, 6]));
        assert!(b.forward(zero).unwrap().value().data().iter().all(|v| *v == 0.0));
        let mut rng = Rng::new(3);
        let z = Tensor::new(vec![7, 6], rng.uniform_vec(42, -1.0, 1.0)).unwrap();
        let out = b.forward(g.constant(z.clone())).unwrap();
        assert_eq!(*out.value(), z);
    }

    #[test]
    fn block_shape_and_channel_check() {
        let (store, b) = block_fixture(6, 2);
        let g = Graph::with_params(&store);
        let mut rng = Rng::new(3);
        let z = g.constant(Tensor::new(vec![9, 6], rng.uniform_vec(54, -1.0, 1.0)).unwrap());
        assert_eq!(b.forward(z).unwrap().shape(), vec![9, 6]);
        let bad = g.constant(Tensor::zeros(&[9, 5]));
        assert!(matches!(b.forward(bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn block_parameter_gradients() {
        let (store, b) = block_fixture(4, 8);
        let mut rng = Rng::new(4);
        let z = Tensor::new(vec![5, 4], rng.uniform_vec(20, -1.0, 1.0)).unwrap();
        let report = check_params(&store, 1e-5, 12, 1, |g| {
            let y = b.forward(g.constant(z.clone()))?;
            Ok(y.sum())
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn stack_depth_one_is_single_layer() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(6);
        let mut cfg = SsmConfig::new(4);
        cfg.state = 4;
        let stack = MambaStack::new(&mut ParamBuilder::new(&mut store, &mut rng), &cfg, 1);
        let g = Graph::with_params(&store);
        let z = g.constant(Tensor::full(&[3, 4], 0.3));
        let a = stack.forward(z).unwrap().value();
        let b = stack.layers[0].forward(z).unwrap().value();
        assert_eq!(*a, *b);
    }
}
