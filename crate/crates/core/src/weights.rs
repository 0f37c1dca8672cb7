//! Learnable parameters of the whole encoder stack.

use std::convert::Infallible;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::ive::init_from_2d;
use crate::numerics::{Gradients, Tape, Tensor, Var};

macro_rules! map_fields {
    ($self:ident, $prefix:expr, $f:ident, $ty:ident { $($field:ident),* $(,)? }) => {
        $ty {
            $($field: $f(&format!("{}{}", $prefix, stringify!($field)), &$self.$field)?,)*
        }
    };
}

/// One pre-LayerNorm transformer layer. Linear weights are `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub ln1_gamma: T,
    pub ln1_beta: T,
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
    pub ln2_gamma: T,
    pub ln2_beta: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

impl<T> BlockParams<T> {
    fn try_map<'a, U, E>(
        &'a self,
        prefix: &str,
        f: &mut impl FnMut(&str, &'a T) -> Result<U, E>,
    ) -> Result<BlockParams<U>, E> {
        Ok(map_fields!(
            self,
            prefix,
            f,
            BlockParams {
                ln1_gamma,
                ln1_beta,
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln2_gamma,
                ln2_beta,
                w1,
                b1,
                w2,
                b2,
            }
        ))
    }
}

/// Two-layer MLP from `d_V` to `d_LLM`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectorParams<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

impl<T> ProjectorParams<T> {
    fn try_map<'a, U, E>(
        &'a self,
        prefix: &str,
        f: &mut impl FnMut(&str, &'a T) -> Result<U, E>,
    ) -> Result<ProjectorParams<U>, E> {
        Ok(map_fields!(
            self,
            prefix,
            f,
            ProjectorParams { w1, b1, w2, b2 }
        ))
    }
}

/// Parameter tree, generic over the leaf type so the same layout carries
/// tensors, tape variables, gradients or shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    /// `[d_V, F, P, P, 3]`.
    pub conv_kernel: T,
    pub conv_bias: T,
    /// Absolute position table `[P_v, P_v, d_V]`, indexed `[x][y]`.
    pub ape: T,
    pub vit: Vec<BlockParams<T>>,
    pub ifa: Vec<BlockParams<T>>,
    pub proj: ProjectorParams<T>,
}

impl<T> Params<T> {
    /// Maps every leaf in a fixed order, passing its dotted name.
    pub fn try_map<'a, U, E>(
        &'a self,
        f: &mut impl FnMut(&str, &'a T) -> Result<U, E>,
    ) -> Result<Params<U>, E> {
        Ok(Params {
            conv_kernel: f("conv_kernel", &self.conv_kernel)?,
            conv_bias: f("conv_bias", &self.conv_bias)?,
            ape: f("ape", &self.ape)?,
            vit: self
                .vit
                .iter()
                .enumerate()
                .map(|(i, b)| b.try_map(&format!("vit.{i}."), f))
                .collect::<Result<_, E>>()?,
            ifa: self
                .ifa
                .iter()
                .enumerate()
                .map(|(i, b)| b.try_map(&format!("ifa.{i}."), f))
                .collect::<Result<_, E>>()?,
            proj: self.proj.try_map("proj.", f)?,
        })
    }

    pub fn map<'a, U>(&'a self, mut f: impl FnMut(&str, &'a T) -> U) -> Params<U> {
        match self.try_map(&mut |name, t| Ok::<_, Infallible>(f(name, t))) {
            Ok(p) => p,
            Err(never) => match never {},
        }
    }

    /// Leaves in traversal order with their names.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.map(|name, t| out.push((name.to_string(), t)));
        out
    }

    /// Rebuilds a tree with this layout from leaves in traversal order.
    pub fn with_leaves<U>(&self, leaves: Vec<U>) -> Result<Params<U>> {
        let expected = self.named().len();
        if leaves.len() != expected {
            return Err(Error::Shape(format!(
                "parameter tree has {expected} leaves, got {}",
                leaves.len()
            )));
        }
        let mut it = leaves.into_iter();
        Ok(self.map(|_, _| it.next().expect("leaf count checked")))
    }
}

impl Params<Vec<usize>> {
    /// Expected shape of every parameter for `cfg`.
    pub fn shapes(cfg: &ModelConfig) -> Self {
        let d = cfg.vision_dim;
        let hidden = d * cfg.mlp_ratio;
        let block = || BlockParams {
            ln1_gamma: vec![d],
            ln1_beta: vec![d],
            wq: vec![d, d],
            bq: vec![d],
            wk: vec![d, d],
            bk: vec![d],
            wv: vec![d, d],
            bv: vec![d],
            wo: vec![d, d],
            bo: vec![d],
            ln2_gamma: vec![d],
            ln2_beta: vec![d],
            w1: vec![d, hidden],
            b1: vec![hidden],
            w2: vec![hidden, d],
            b2: vec![d],
        };
        let p = cfg.patch_size;
        Params {
            conv_kernel: vec![d, cfg.frames_per_chunk, p, p, 3],
            conv_bias: vec![d],
            ape: vec![cfg.pos_grid(), cfg.pos_grid(), d],
            vit: (0..cfg.vit_layers).map(|_| block()).collect(),
            ifa: (0..cfg.inter_layers).map(|_| block()).collect(),
            proj: ProjectorParams {
                w1: vec![d, cfg.llm_dim],
                b1: vec![cfg.llm_dim],
                w2: vec![cfg.llm_dim, cfg.llm_dim],
                b2: vec![cfg.llm_dim],
            },
        }
    }
}

/// Configuration plus every learnable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights {
    pub config: ModelConfig,
    pub params: Params<Tensor>,
}

impl EncoderWeights {
    /// Seeded random initialization, rounded to `f32` so that a file
    /// round trip is exact.
    ///
    /// The 3D patch kernel is a 2D kernel replicated across the chunk, so a
    /// chunk of identical frames embeds exactly like the single frame.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = Params::shapes(&config);
        let p = config.patch_size;
        let params = shapes.try_map(&mut |name, shape| -> Result<Tensor> {
            let field = name.rsplit('.').next().unwrap_or(name);
            let t = match field {
                "conv_kernel" => {
                    let k2 = Tensor::randn(
                        [shape[0], p, p, 3],
                        (1.0 / (p * p * 3) as f64).sqrt(),
                        &mut rng,
                    );
                    init_from_2d(&k2, config.frames_per_chunk)?
                }
                "ape" => Tensor::randn(shape.clone(), 0.1, &mut rng),
                f if f.ends_with("_gamma") => Tensor::ones(shape.clone()),
                f if f.ends_with("_beta") => Tensor::zeros(shape.clone()),
                f if f.starts_with('w') => {
                    Tensor::randn(shape.clone(), (1.0 / shape[0] as f64).sqrt(), &mut rng)
                }
                _ => Tensor::randn(shape.clone(), 0.02, &mut rng),
            };
            Ok(t.round_to_f32())
        })?;
        Ok(Self { config, params })
    }

    /// Checks that every tensor has the shape implied by the config and is finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let shapes = Params::shapes(&self.config);
        if shapes.vit.len() != self.params.vit.len() || shapes.ifa.len() != self.params.ifa.len() {
            return Err(Error::Shape("layer counts disagree with config".into()));
        }
        for ((name, expected), (_, actual)) in shapes.named().into_iter().zip(self.params.named()) {
            if expected.as_slice() != actual.shape() {
                return Err(Error::Shape(format!(
                    "{name}: expected {expected:?}, found {:?}",
                    actual.shape()
                )));
            }
            if !actual.is_finite() {
                return Err(Error::NonFinite(format!("parameter {name}")));
            }
        }
        Ok(())
    }

    /// Registers every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> Params<Var> {
        self.params.map(|_, t| tape.leaf(t.clone()))
    }

    /// Collects the gradient of every bound parameter.
    pub fn gradients(vars: &Params<Var>, grads: &Gradients) -> Params<Tensor> {
        vars.map(|_, &v| grads.get(v))
    }

    pub fn parameter_count(&self) -> usize {
        self.params.named().iter().map(|(_, t)| t.len()).sum()
    }
}
