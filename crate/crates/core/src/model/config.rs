use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::metrics::{LossParams, Reduction};
use crate::nn::Activation;
use crate::ssm::{Discretization, SsmConfig};

/// Order in which the sampled points are fed to the sequence encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SequenceOrder {
    /// Farthest-point-sampling selection order.
    #[default]
    Fps,
    Hilbert,
}

impl fmt::Display for SequenceOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SequenceOrder::Fps => "fps",
            SequenceOrder::Hilbert => "hilbert",
        })
    }
}

impl FromStr for SequenceOrder {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fps" => Ok(SequenceOrder::Fps),
            "hilbert" => Ok(SequenceOrder::Hilbert),
            o => Err(Error::Config(format!("unknown sequence order '{o}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// N, points kept by farthest point sampling.
    pub sampled: usize,
    /// M, total hyperpoints.
    pub hyperpoints: usize,
    /// L, anchors emitted per generation stage.
    pub anchors: usize,
    /// C, feature width.
    pub width: usize,
    /// K, grid points per new hyperpoint; a perfect square.
    pub grid_points: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    /// MST edge ratio ζ.
    pub zeta: f64,
    /// Expansion loss weight τ.
    pub tau: f64,
    /// How the expansion loss is scaled before the τ weight.
    pub expansion_reduction: Reduction,
    /// F-score threshold φ.
    pub phi: f64,
    pub seed: u64,
    /// Neighbors per sampled point in the edge convolution.
    pub knn: usize,
    pub heads: usize,
    /// C_m, width of the grid features.
    pub grid_width: usize,
    /// Half side length of the folding grid.
    pub grid_span: f64,
    pub sigma_floor: f64,
    pub expand: usize,
    pub state: usize,
    pub discretization: Discretization,
    pub activation: Activation,
    pub order: SequenceOrder,
    /// Zero the offset and deformation output layers so an untrained model
    /// returns the collapse baseline.
    pub zero_init_heads: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            sampled: 128,
            hyperpoints: 128,
            anchors: 16,
            width: 384,
            grid_points: 64,
            encoder_depth: 6,
            decoder_depth: 6,
            zeta: 1.2,
            tau: 0.05,
            expansion_reduction: Reduction::Sum,
            phi: 0.01,
            seed: 0,
            knn: 16,
            heads: 4,
            grid_width: 64,
            grid_span: 0.05,
            sigma_floor: 1e-5,
            expand: 2,
            state: 16,
            discretization: Discretization::Simplified,
            activation: Activation::Silu,
            order: SequenceOrder::Fps,
            zero_init_heads: true,
        }
    }
}

const KEYS: &[&str] = &[
    "sampled",
    "hyperpoints",
    "anchors",
    "width",
    "grid_points",
    "encoder_depth",
    "decoder_depth",
    "zeta",
    "tau",
    "expansion_reduction",
    "phi",
    "seed",
    "knn",
    "heads",
    "grid_width",
    "grid_span",
    "sigma_floor",
    "expand",
    "state",
    "discretization",
    "activation",
    "order",
    "zero_init_heads",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
}

impl ModelConfig {
    /// PCN layout: 16384 output points.
    pub fn pcn() -> Self {
        Self::default()
    }

    /// ShapeNet-55 layout: 6400 output points.
    pub fn shapenet55() -> Self {
        Self {
            grid_points: 25,
            ..Self::default()
        }
    }

    /// KITTI layout: 12544 output points.
    pub fn kitti() -> Self {
        Self {
            grid_points: 49,
            ..Self::default()
        }
    }

    /// Reduced configuration that trains in about a minute on one core.
    /// The summed expansion term would outweigh the mean Chamfer terms by
    /// orders of magnitude here and fold every patch onto its center, so it
    /// is averaged over the completed points instead.
    pub fn toy() -> Self {
        Self {
            sampled: 32,
            hyperpoints: 32,
            width: 64,
            grid_points: 16,
            grid_width: 32,
            expansion_reduction: Reduction::Mean,
            ..Self::default()
        }
    }

    /// Smallest configuration that exercises every stage.
    pub fn tiny() -> Self {
        Self {
            sampled: 8,
            hyperpoints: 8,
            anchors: 4,
            width: 8,
            grid_points: 4,
            encoder_depth: 1,
            decoder_depth: 1,
            knn: 4,
            heads: 2,
            grid_width: 4,
            state: 4,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "pcn" | "default" => Ok(Self::pcn()),
            "shapenet55" => Ok(Self::shapenet55()),
            "kitti" => Ok(Self::kitti()),
            "toy" => Ok(Self::toy()),
            "tiny" => Ok(Self::tiny()),
            o => Err(Error::Config(format!("unknown preset '{o}'"))),
        }
    }

    pub fn stages(&self) -> usize {
        self.hyperpoints / self.anchors
    }

    pub fn grid_side(&self) -> usize {
        (self.grid_points as f64).sqrt().round() as usize
    }

    /// Number of new hyperpoints, N + M.
    pub fn centers(&self) -> usize {
        self.sampled + self.hyperpoints
    }

    pub fn output_points(&self) -> usize {
        self.centers() * self.grid_points
    }

    pub fn loss_params(&self) -> LossParams {
        LossParams {
            tau: self.tau,
            zeta: self.zeta,
            grid_points: self.grid_points,
            reduction: self.expansion_reduction,
        }
    }

    pub fn ssm(&self) -> SsmConfig {
        SsmConfig {
            expand: self.expand,
            state: self.state,
            activation: self.activation,
            discretization: self.discretization,
            ..SsmConfig::new(self.width)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("sampled", self.sampled),
            ("hyperpoints", self.hyperpoints),
            ("anchors", self.anchors),
            ("width", self.width),
            ("grid_points", self.grid_points),
            ("knn", self.knn),
            ("heads", self.heads),
            ("grid_width", self.grid_width),
            ("expand", self.expand),
            ("state", self.state),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.hyperpoints % self.anchors != 0 {
            return bad(format!(
                "hyperpoints ({}) must be a multiple of anchors ({})",
                self.hyperpoints, self.anchors
            ));
        }
        let side = self.grid_side();
        if side * side != self.grid_points {
            return bad(format!("grid_points ({}) must be a perfect square", self.grid_points));
        }
        if self.width % self.heads != 0 {
            return bad(format!("width ({}) must be divisible by heads ({})", self.width, self.heads));
        }
        for (name, v) in [("zeta", self.zeta), ("phi", self.phi), ("grid_span", self.grid_span), ("sigma_floor", self.sigma_floor)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be nonnegative and finite, got {}", self.tau));
        }
        Ok(())
    }

    pub fn is_key(key: &str) -> bool {
        KEYS.contains(&key)
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "sampled" => self.sampled = parse(key, value)?,
            "hyperpoints" => self.hyperpoints = parse(key, value)?,
            "anchors" => self.anchors = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "grid_points" => self.grid_points = parse(key, value)?,
            "encoder_depth" => self.encoder_depth = parse(key, value)?,
            "decoder_depth" => self.decoder_depth = parse(key, value)?,
            "zeta" => self.zeta = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "expansion_reduction" => self.expansion_reduction = value.parse()?,
            "phi" => self.phi = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "knn" => self.knn = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "grid_width" => self.grid_width = parse(key, value)?,
            "grid_span" => self.grid_span = parse(key, value)?,
            "sigma_floor" => self.sigma_floor = parse(key, value)?,
            "expand" => self.expand = parse(key, value)?,
            "state" => self.state = parse(key, value)?,
            "discretization" => self.discretization = value.parse()?,
            "activation" => self.activation = value.parse()?,
            "order" => self.order = value.parse()?,
            "zero_init_heads" => self.zero_init_heads = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// `(key, value)` pairs in a fixed order; [`ModelConfig::set`] inverts it.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        KEYS.iter()
            .map(|&k| {
                let v = match k {
                    "sampled" => self.sampled.to_string(),
                    "hyperpoints" => self.hyperpoints.to_string(),
                    "anchors" => self.anchors.to_string(),
                    "width" => self.width.to_string(),
                    "grid_points" => self.grid_points.to_string(),
                    "encoder_depth" => self.encoder_depth.to_string(),
                    "decoder_depth" => self.decoder_depth.to_string(),
                    "zeta" => self.zeta.to_string(),
                    "tau" => self.tau.to_string(),
                    "expansion_reduction" => self.expansion_reduction.to_string(),
                    "phi" => self.phi.to_string(),
                    "seed" => self.seed.to_string(),
                    "knn" => self.knn.to_string(),
                    "heads" => self.heads.to_string(),
                    "grid_width" => self.grid_width.to_string(),
                    "grid_span" => self.grid_span.to_string(),
                    "sigma_floor" => self.sigma_floor.to_string(),
                    "expand" => self.expand.to_string(),
                    "state" => self.state.to_string(),
                    "discretization" => self.discretization.to_string(),
                    "activation" => self.activation.to_string(),
                    "order" => self.order.to_string(),
                    "zero_init_heads" => self.zero_init_heads.to_string(),
                    _ => unreachable!(),
                };
                (k, v)
            })
            .collect()
    }

    /// Whether two configs build parameter stores of identical layout.
    pub fn same_architecture(&self, other: &Self) -> bool {
        let strip = |c: &Self| Self {
            zeta: 0.0,
            tau: 0.0,
            expansion_reduction: Reduction::Sum,
            phi: 0.0,
            seed: 0,
            zero_init_heads: false,
            sigma_floor: 0.0,
            grid_span: 0.0,
            knn: 0,
            order: SequenceOrder::Fps,
            discretization: Discretization::Simplified,
            activation: Activation::Silu,
            ..c.clone()
        };
        strip(self) == strip(other)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_point_counts() {
        assert_eq!(ModelConfig::pcn().output_points(), 16384);
        assert_eq!(ModelConfig::shapenet55().output_points(), 6400);
        assert_eq!(ModelConfig::kitti().output_points(), 12544);
        let d = ModelConfig::default();
        assert_eq!((d.sampled, d.hyperpoints, d.anchors, d.encoder_depth, d.stages()), (128, 128, 16, 6, 8));
        for p in ["pcn", "shapenet55", "kitti", "toy", "tiny"] {
            ModelConfig::preset(p).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn validation_errors() {
        let mut c = ModelConfig::default();
        c.grid_points = 60;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::default();
        c.anchors = 15;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.tau = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn pairs_round_trip() {
        let mut c = ModelConfig::toy();
        c.zeta = 1.0 / 3.0;
        c.order = SequenceOrder::Hilbert;
        c.discretization = Discretization::Exact;
        let mut back = ModelConfig::default();
        for (k, v) in c.pairs() {
            back.set(k, &v).unwrap();
        }
        assert_eq!(back, c);
        let err = back.set("widht", "3").unwrap_err().to_string();
        assert!(err.contains("widht"));
    }
}
