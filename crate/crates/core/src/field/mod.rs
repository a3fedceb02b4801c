//! The motion field network.
//!
//! Two sine-activated streams (`X` and `(X, t)`) produce 32-long feature
//! vectors that are concatenated and passed through a 64-unit sine
//! aggregation layer. A linear 7-output head block on top yields the
//! intensity logit (sigmoid) and the forward/backward displacement
//! logits (tanh).
//!
//! All weights live in one flat buffer so that optimizer state, gradient
//! accumulators and checkpoints share a single layout.

mod forward;

use std::sync::LazyLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::real::Real;

pub use forward::{coord_jacobians, eval_field, eval_points, Activations, FieldSample};

pub const HIDDEN: usize = 64;
pub const FEATURES: usize = 32;
pub const STREAM_DEPTH: usize = 4;
pub const STATIC_IN: usize = 3;
pub const DYNAMIC_IN: usize = 4;
pub const AGGREGATE: usize = 64;
/// Head rows: intensity, forward motion (3), backward motion (3).
pub const HEAD_OUT: usize = 7;
pub const DEFAULT_OMEGA0: f64 = 30.0;

/// Layer index of the first static-stream layer.
pub const STATIC_LAYERS: std::ops::Range<usize> = 0..STREAM_DEPTH;
pub const DYNAMIC_LAYERS: std::ops::Range<usize> = STREAM_DEPTH..2 * STREAM_DEPTH;
pub const AGGREGATE_LAYER: usize = 2 * STREAM_DEPTH;
pub const HEAD_LAYER: usize = 2 * STREAM_DEPTH + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±1/fan_in`.
    SirenFirst,
    /// Uniform in `±sqrt(6/fan_in)/omega0`.
    SirenDeep,
    Zero,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerSpec {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
    pub init: Init,
}

impl LayerSpec {
    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.weight_offset..self.weight_offset + self.fan_in * self.fan_out
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        self.bias_offset..self.bias_offset + self.fan_out
    }
}

#[derive(Debug, Clone)]
pub struct Architecture {
    pub layers: Vec<LayerSpec>,
    pub n_params: usize,
}

fn build_architecture() -> Architecture {
    let mut shapes = Vec::new();
    for input in [STATIC_IN, DYNAMIC_IN] {
        shapes.push((input, HIDDEN, Init::SirenFirst));
        shapes.push((HIDDEN, HIDDEN, Init::SirenDeep));
        shapes.push((HIDDEN, HIDDEN, Init::SirenDeep));
        shapes.push((HIDDEN, FEATURES, Init::SirenDeep));
    }
    shapes.push((2 * FEATURES, AGGREGATE, Init::SirenDeep));
    shapes.push((AGGREGATE, HEAD_OUT, Init::Zero));

    let mut offset = 0;
    let layers = shapes
        .into_iter()
        .map(|(fan_in, fan_out, init)| {
            let weight_offset = offset;
            let bias_offset = offset + fan_in * fan_out;
            offset = bias_offset + fan_out;
            LayerSpec {
                fan_in,
                fan_out,
                weight_offset,
                bias_offset,
                init,
            }
        })
        .collect();
    Architecture {
        layers,
        n_params: offset,
    }
}

pub static ARCH: LazyLock<Architecture> = LazyLock::new(build_architecture);

/// Trainable weights of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams<F> {
    pub omega0: f64,
    pub seed: u64,
    pub values: Vec<F>,
}

/// Partial derivatives of a scalar objective, congruent with [`FieldParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle<F> {
    pub values: Vec<F>,
}

impl<F: Real> GradientBundle<F> {
    pub fn zeros() -> Self {
        GradientBundle {
            values: vec![F::zero(); ARCH.n_params],
        }
    }

    pub fn add_assign(&mut self, other: &GradientBundle<F>) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += *b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|v| v.f64() * v.f64())
            .sum::<f64>()
            .sqrt()
    }
}

/// Uniform bound used by the initializer for a layer.
pub fn init_bound(init: Init, fan_in: usize, omega0: f64) -> f64 {
    match init {
        Init::SirenFirst => 1.0 / fan_in as f64,
        Init::SirenDeep => (6.0 / fan_in as f64).sqrt() / omega0,
        Init::Zero => 0.0,
    }
}

impl<F: Real> FieldParams<F> {
    /// SIREN initialization with zeroed output heads.
    pub fn init(seed: u64) -> Self {
        Self::init_with_omega(seed, DEFAULT_OMEGA0)
    }

    pub fn init_with_omega(seed: u64, omega0: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![F::zero(); ARCH.n_params];
        for layer in &ARCH.layers {
            let bound = init_bound(layer.init, layer.fan_in, omega0);
            if layer.init == Init::Zero {
                continue;
            }
            for w in &mut values[layer.weight_range()] {
                *w = F::of(rng.random_range(-bound..=bound));
            }
            let bias_bound = 1.0 / (layer.fan_in as f64).sqrt();
            for b in &mut values[layer.bias_range()] {
                *b = F::of(rng.random_range(-bias_bound..=bias_bound));
            }
        }
        FieldParams {
            omega0,
            seed,
            values,
        }
    }

    pub fn n_params(&self) -> usize {
        self.values.len()
    }

    pub fn cast<G: Real>(&self) -> FieldParams<G> {
        FieldParams {
            omega0: self.omega0,
            seed: self.seed,
            values: self.values.iter().map(|v| G::of(v.f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Overwrite the head block with random values, mostly useful in tests
    /// where zeroed heads would hide every downstream gradient.
    pub fn randomize_heads(&mut self, rng: &mut impl Rng, scale: f64) {
        let head = &ARCH.layers[HEAD_LAYER];
        for i in head.weight_offset..head.bias_offset + head.fan_out {
            self.values[i] = F::of(rng.random_range(-scale..=scale));
        }
    }

    pub(crate) fn weight(&self, layer: usize) -> ndarray::ArrayView2<'_, F> {
        let spec = &ARCH.layers[layer];
        ndarray::ArrayView2::from_shape(
            (spec.fan_out, spec.fan_in),
            &self.values[spec.weight_range()],
        )
        .expect("layer layout")
    }

    pub(crate) fn bias(&self, layer: usize) -> ndarray::ArrayView1<'_, F> {
        ndarray::ArrayView1::from(&self.values[ARCH.layers[layer].bias_range()])
    }
}

/// Closed-form parameter count of the architecture, with biases.
pub fn expected_param_count() -> usize {
    let dense = |i: usize, o: usize| i * o + o;
    let stream = |input: usize| {
        dense(input, HIDDEN) + 2 * dense(HIDDEN, HIDDEN) + dense(HIDDEN, FEATURES)
    };
    stream(STATIC_IN)
        + stream(DYNAMIC_IN)
        + dense(2 * FEATURES, AGGREGATE)
        + dense(AGGREGATE, 1)
        + dense(AGGREGATE, 3)
        + dense(AGGREGATE, 3)
}
