//! Batched forward and reverse passes.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};

use super::{
    FieldParams, GradientBundle, AGGREGATE_LAYER, ARCH, DYNAMIC_LAYERS, FEATURES, HEAD_LAYER,
    STATIC_LAYERS,
};
use crate::parallel::{map_ranges, Exec};
use crate::real::Real;

/// Output of one field query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    pub intensity: f64,
    pub forward: [f64; 3],
    pub backward: [f64; 3],
}

struct SineLayer<F> {
    /// `sin(omega0 * z)`
    out: Array2<F>,
    /// `omega0 * cos(omega0 * z)`, kept only when a reverse pass follows.
    slope: Option<Array2<F>>,
}

/// Intermediate values of a batched forward pass.
pub struct Activations<F> {
    static_in: Array2<F>,
    dynamic_in: Array2<F>,
    static_layers: Vec<SineLayer<F>>,
    dynamic_layers: Vec<SineLayer<F>>,
    concat: Array2<F>,
    aggregate: SineLayer<F>,
    pub intensity: Array1<F>,
    pub forward: Array2<F>,
    pub backward: Array2<F>,
}

impl<F: Real> Activations<F> {
    pub fn len(&self) -> usize {
        self.intensity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intensity.is_empty()
    }

    pub fn sample(&self, row: usize) -> FieldSample {
        FieldSample {
            intensity: self.intensity[row].f64(),
            forward: [0, 1, 2].map(|c| self.forward[[row, c]].f64()),
            backward: [0, 1, 2].map(|c| self.backward[[row, c]].f64()),
        }
    }
}

fn dense<F: Real>(input: &ArrayView2<'_, F>, params: &FieldParams<F>, layer: usize) -> Array2<F> {
    let w = params.weight(layer);
    let b = params.bias(layer);
    let mut z = Array2::from_shape_fn((input.nrows(), b.len()), |(_, j)| b[j]);
    general_mat_mul(F::one(), input, &w.t(), F::one(), &mut z);
    z
}

fn sine<F: Real>(mut z: Array2<F>, omega: F, keep_slope: bool) -> SineLayer<F> {
    if keep_slope {
        let mut slope = Array2::zeros(z.raw_dim());
        Zip::from(&mut z).and(&mut slope).for_each(|zv, sv| {
            let (s, c) = (omega * *zv).sin_cos_act();
            *zv = s;
            *sv = omega * c;
        });
        SineLayer {
            out: z,
            slope: Some(slope),
        }
    } else {
        z.mapv_inplace(|v| (omega * v).sin_cos_act().0);
        SineLayer { out: z, slope: None }
    }
}

fn run_stream<F: Real>(
    input: &Array2<F>,
    params: &FieldParams<F>,
    layers: std::ops::Range<usize>,
    omega: F,
    keep: bool,
) -> Vec<SineLayer<F>> {
    let mut out: Vec<SineLayer<F>> = Vec::with_capacity(layers.len());
    for layer in layers {
        let z = match out.last() {
            None => dense(&input.view(), params, layer),
            Some(prev) => dense(&prev.out.view(), params, layer),
        };
        out.push(sine(z, omega, keep));
    }
    out
}

impl<F: Real> FieldParams<F> {
    /// Evaluate the field on `n` points. `positions` is `n x 3`, `times`
    /// holds normalized phases. With `keep` the slopes needed by
    /// [`FieldParams::backward`] are retained.
    pub fn forward(
        &self,
        positions: ArrayView2<'_, F>,
        times: ArrayView1<'_, F>,
        keep: bool,
    ) -> Activations<F> {
        let n = positions.nrows();
        assert_eq!(positions.ncols(), 3);
        assert_eq!(times.len(), n);
        let omega = F::of(self.omega0);

        let static_in = positions.to_owned();
        let mut dynamic_in = Array2::zeros((n, 4));
        dynamic_in.slice_mut(s![.., 0..3]).assign(&positions);
        dynamic_in.column_mut(3).assign(&times);

        let static_layers = run_stream(&static_in, self, STATIC_LAYERS, omega, keep);
        let dynamic_layers = run_stream(&dynamic_in, self, DYNAMIC_LAYERS, omega, keep);

        let mut concat = Array2::zeros((n, 2 * FEATURES));
        concat
            .slice_mut(s![.., 0..FEATURES])
            .assign(&static_layers.last().unwrap().out);
        concat
            .slice_mut(s![.., FEATURES..])
            .assign(&dynamic_layers.last().unwrap().out);

        let aggregate = sine(dense(&concat.view(), self, AGGREGATE_LAYER), omega, keep);
        let heads = dense(&aggregate.out.view(), self, HEAD_LAYER);

        let intensity = heads.column(0).mapv(|v| F::one() / (F::one() + (-v).exp()));
        let forward = heads.slice(s![.., 1..4]).mapv(|v| v.tanh());
        let backward = heads.slice(s![.., 4..7]).mapv(|v| v.tanh());

        Activations {
            static_in,
            dynamic_in,
            static_layers,
            dynamic_layers,
            concat,
            aggregate,
            intensity,
            forward,
            backward,
        }
    }

    /// Reverse pass. Given the derivative of a scalar objective with respect
    /// to the three outputs, accumulate parameter partials into `grads` (when
    /// given) and return the derivative with respect to the input positions.
    pub fn backward(
        &self,
        acts: &Activations<F>,
        d_intensity: ArrayView1<'_, F>,
        d_forward: ArrayView2<'_, F>,
        d_backward: ArrayView2<'_, F>,
        mut grads: Option<&mut GradientBundle<F>>,
    ) -> Array2<F> {
        let n = acts.len();
        let one = F::one();

        // Through the output nonlinearities.
        let mut dz = Array2::zeros((n, 7));
        Zip::from(dz.column_mut(0))
            .and(&d_intensity)
            .and(&acts.intensity)
            .for_each(|d, &g, &o| *d = g * o * (one - o));
        Zip::from(dz.slice_mut(s![.., 1..4]))
            .and(&d_forward)
            .and(&acts.forward)
            .for_each(|d, &g, &m| *d = g * (one - m * m));
        Zip::from(dz.slice_mut(s![.., 4..7]))
            .and(&d_backward)
            .and(&acts.backward)
            .for_each(|d, &g, &m| *d = g * (one - m * m));

        let d_hidden = linear_backward(self, HEAD_LAYER, &dz, &acts.aggregate.out, grads.as_deref_mut());
        let dz_agg = d_hidden * acts.aggregate.slope.as_ref().expect("forward without keep");
        let d_concat = linear_backward(self, AGGREGATE_LAYER, &dz_agg, &acts.concat, grads.as_deref_mut());

        let d_static = stream_backward(
            self,
            STATIC_LAYERS,
            &acts.static_layers,
            &acts.static_in,
            d_concat.slice(s![.., 0..FEATURES]).to_owned(),
            grads.as_deref_mut(),
        );
        let d_dynamic = stream_backward(
            self,
            DYNAMIC_LAYERS,
            &acts.dynamic_layers,
            &acts.dynamic_in,
            d_concat.slice(s![.., FEATURES..]).to_owned(),
            grads,
        );
        d_static + &d_dynamic.slice(s![.., 0..3])
    }
}

/// Accumulate `dW += dz^T x`, `db += sum(dz)` and return `dz W`.
fn linear_backward<F: Real>(
    params: &FieldParams<F>,
    layer: usize,
    dz: &Array2<F>,
    input: &Array2<F>,
    grads: Option<&mut GradientBundle<F>>,
) -> Array2<F> {
    let spec = &ARCH.layers[layer];
    if let Some(g) = grads {
        let (w_part, b_part) = g.values[spec.weight_offset..spec.bias_offset + spec.fan_out]
            .split_at_mut(spec.fan_in * spec.fan_out);
        let mut gw = ArrayViewMut2::from_shape((spec.fan_out, spec.fan_in), w_part).unwrap();
        general_mat_mul(F::one(), &dz.t(), input, F::one(), &mut gw);
        let mut gb = ArrayViewMut1::from(b_part);
        gb += &dz.sum_axis(Axis(0));
    }
    dz.dot(&params.weight(layer))
}

fn stream_backward<F: Real>(
    params: &FieldParams<F>,
    layers: std::ops::Range<usize>,
    cache: &[SineLayer<F>],
    input: &Array2<F>,
    d_out: Array2<F>,
    mut grads: Option<&mut GradientBundle<F>>,
) -> Array2<F> {
    let mut d = d_out;
    for (k, layer) in layers.enumerate().rev() {
        let dz = d * cache[k].slope.as_ref().expect("forward without keep");
        let layer_input = if k == 0 { input } else { &cache[k - 1].out };
        d = linear_backward(params, layer, &dz, layer_input, grads.as_deref_mut());
    }
    d
}

const INFERENCE_CHUNK: usize = 1024;

/// Evaluate the field at one space-time query.
pub fn eval_field<F: Real>(params: &FieldParams<F>, x: [f64; 3], t_norm: f64) -> FieldSample {
    let pos = Array2::from_shape_fn((1, 3), |(_, c)| F::of(x[c]));
    let t = Array1::from_elem(1, F::of(t_norm));
    params.forward(pos.view(), t.view(), false).sample(0)
}

/// Evaluate many queries, chunked over the batch.
pub fn eval_points<F: Real>(
    params: &FieldParams<F>,
    points: &[[f64; 3]],
    t_norm: &[f64],
    exec: Exec,
) -> Vec<FieldSample> {
    assert_eq!(points.len(), t_norm.len());
    map_ranges(exec, points.len(), INFERENCE_CHUNK, |r| {
        let pos = Array2::from_shape_fn((r.len(), 3), |(i, c)| F::of(points[r.start + i][c]));
        let t = Array1::from_shape_fn(r.len(), |i| F::of(t_norm[r.start + i]));
        let acts = params.forward(pos.view(), t.view(), false);
        (0..r.len()).map(|i| acts.sample(i)).collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect()
}

/// Spatial Jacobian of the forward-motion head, `J[i][j] = d m_i / d x_j`,
/// at each query.
pub fn coord_jacobians<F: Real>(
    params: &FieldParams<F>,
    points: &[[f64; 3]],
    t_norm: &[f64],
    exec: Exec,
) -> Vec<[[f64; 3]; 3]> {
    assert_eq!(points.len(), t_norm.len());
    map_ranges(exec, points.len(), INFERENCE_CHUNK, |r| {
        let n = r.len();
        let pos = Array2::from_shape_fn((n, 3), |(i, c)| F::of(points[r.start + i][c]));
        let t = Array1::from_shape_fn(n, |i| F::of(t_norm[r.start + i]));
        let acts = params.forward(pos.view(), t.view(), true);
        let zero1 = Array1::zeros(n);
        let zero3 = Array2::zeros((n, 3));
        let mut jac = vec![[[0.0; 3]; 3]; n];
        for comp in 0..3 {
            let mut seed = Array2::zeros((n, 3));
            seed.column_mut(comp).fill(F::one());
            let dx = params.backward(&acts, zero1.view(), seed.view(), zero3.view(), None);
            for (i, row) in jac.iter_mut().enumerate() {
                for j in 0..3 {
                    row[comp][j] = dx[[i, j]].f64();
                }
            }
        }
        jac
    })
    .into_iter()
    .flatten()
    .collect()
}
