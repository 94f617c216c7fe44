//! Central-difference gradient verification.
//!
//! The checker compares tape gradients against
//! `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element and reports the
//! largest relative error `|a - n| / max(|a|, |n|, 1e-8)`. Run it with
//! `T = f64` to keep the finite-difference noise well below the tolerances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::tensor::{ParameterStore, Scalar, Tensor};

/// Floor of the relative-error denominator.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Default finite-difference step for `f64` checks.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Step for whole-network checks, where summation noise dominates.
pub const NETWORK_EPS: f64 = 1e-5;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Outcome of one check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// Tensor name (empty for a plain input) and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradReport {
    fn empty() -> Self {
        GradReport {
            max_rel_err: 0.0,
            worst: None,
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
        }
    }

    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        let e = rel_err(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = e;
            self.worst = Some((name.to_string(), index));
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }

    /// Merges another report, keeping the worst element.
    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        if other.max_rel_err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
            self.analytic = other.analytic;
            self.numeric = other.numeric;
        }
    }
}

fn scalar_of<T: Scalar>(v: Var<'_, T>) -> Result<f64> {
    v.item().map(Scalar::as_f64).map_err(|_| {
        Error::Contract(format!("gradient check needs a scalar function, got {:?}", v.shape()))
    })
}

fn nondeterministic() -> Error {
    Error::Contract("function under gradient check is not deterministic".into())
}

/// Checks `d f(x) / d x` for a scalar-valued tape function of one input.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<GradReport>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>>,
{
    let eval = |input: Tensor<T>| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(input);
        scalar_of(f(&tape, v)?)
    };

    let tape = Tape::new();
    let leaf = tape.leaf(x.clone().with_requires_grad(true));
    let loss = f(&tape, leaf)?;
    let base = scalar_of(loss)?;
    let grads = tape.backward(loss)?;
    let zeros = vec![T::zero(); x.numel()];
    let analytic = grads.wrt(leaf).unwrap_or(&zeros).to_vec();

    let again = eval(x.clone())?;
    if again.to_bits() != base.to_bits() || eval(x.clone())?.to_bits() != base.to_bits() {
        return Err(nondeterministic());
    }

    let mut report = GradReport::empty();
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        let plus = orig + T::of(eps);
        let minus = orig - T::of(eps);
        probe.data_mut()[i] = plus;
        let fp = eval(probe.clone())?;
        probe.data_mut()[i] = minus;
        let fm = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (plus.as_f64() - minus.as_f64());
        report.record("", i, analytic[i].as_f64(), numeric);
    }
    Ok(report)
}

/// Checks the gradient of a scalar loss with respect to every element of
/// every parameter in `store` (or the first `max_per_tensor` elements of
/// each, when given).
pub fn grad_check_params<T, F>(
    f: F,
    store: &ParameterStore<T>,
    eps: f64,
    max_per_tensor: Option<usize>,
) -> Result<GradReport>
where
    T: Scalar,
    F: for<'t> Fn(&Ctx<'t, T>) -> Result<Var<'t, T>>,
{
    grad_check_selected(f, store, eps, max_per_tensor, |_| true)
}

/// [`grad_check_params`] restricted to the tensors `select` accepts.
pub fn grad_check_selected<T, F>(
    f: F,
    store: &ParameterStore<T>,
    eps: f64,
    max_per_tensor: Option<usize>,
    select: impl Fn(&str) -> bool,
) -> Result<GradReport>
where
    T: Scalar,
    F: for<'t> Fn(&Ctx<'t, T>) -> Result<Var<'t, T>>,
{
    let eval = |params: &ParameterStore<T>| -> Result<f64> {
        let tape = Tape::new();
        scalar_of(f(&Ctx::new(&tape, params))?)
    };

    let tape = Tape::new();
    let loss = f(&Ctx::new(&tape, store))?;
    let base = scalar_of(loss)?;
    let grads = tape.backward(loss)?;
    if eval(store)?.to_bits() != base.to_bits() {
        return Err(nondeterministic());
    }

    let mut report = GradReport::empty();
    let mut probe = store.clone();
    let names: Vec<String> = store.names().filter(|n| select(n)).map(str::to_string).collect();
    for name in &names {
        let n = store.get(name)?.numel();
        let limit = max_per_tensor.map_or(n, |m| m.min(n));
        for i in 0..limit {
            let orig = store.get(name)?.data()[i];
            let plus = orig + T::of(eps);
            let minus = orig - T::of(eps);
            probe.get_mut(name)?.data_mut()[i] = plus;
            let fp = eval(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = minus;
            let fm = eval(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig;
            let numeric = (fp - fm) / (plus.as_f64() - minus.as_f64());
            let analytic = grads.param(name).map_or(0.0, |g| g[i].as_f64());
            report.record(name, i, analytic, numeric);
        }
    }
    Ok(report)
}

/// An `f64` copy of `store` with every value redrawn at variance-preserving
/// scale: weights uniform with variance `1 / fan_in`, layer-norm scales
/// near one, biases and shifts near zero.
///
/// Small freshly initialised networks carry activations of order `1e-6`
/// through their decoders, so finite differences straddle ReLU kinks. This
/// gives a point where every layer is well inside its smooth regime.
pub fn well_conditioned(store: &ParameterStore<f32>, seed: u64) -> ParameterStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = store.cast::<f64>();
    for (name, t) in out.iter_mut() {
        let fan_in = match t.shape() {
            [fan_in, _] => *fan_in,
            [_, c, kh, kw] => c * kh * kw,
            _ => 0,
        };
        let is_scale = fan_in == 0 && name.ends_with(".weight");
        for v in t.data_mut() {
            *v = if fan_in > 0 {
                rng.random_range(-1.0..1.0) * (3.0 / fan_in as f64).sqrt()
            } else if is_scale {
                1.0 + rng.random_range(-0.2..0.2)
            } else {
                rng.random_range(-0.2..0.2)
            };
        }
    }
    out
}

fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `sum(y * R)` for a fixed random `R`.
fn project<'t>(y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let r = y.tape().constant(uniform(&y.shape(), -1.0, 1.0, seed));
    y.mul(r)?.sum()
}

fn inputs(list: &[(&str, Tensor<f64>)]) -> ParameterStore<f64> {
    let mut store = ParameterStore::new();
    for (name, t) in list {
        store.insert(*name, t.clone()).expect("distinct input names");
    }
    store
}

/// Values bounded away from zero, for kinked ops.
fn off_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut t = uniform(shape, -1.0, 1.0, seed);
    t.data_mut().iter_mut().for_each(|v| *v = v.signum() * (0.2 + v.abs()));
    t
}

/// Finite-difference check of the op named `name` (one of
/// [`crate::autodiff::OP_NAMES`]) with respect to every input.
pub fn check_op(name: &str) -> Result<GradReport> {
    use crate::autodiff::{concat, Conv2dOpts, GATHER_ZERO};
    use std::rc::Rc;

    let x34 = || uniform(&[3, 4], -1.0, 1.0, 1);
    let y34 = || uniform(&[3, 4], -1.0, 1.0, 2);
    let run = |store: ParameterStore<f64>, f: &dyn for<'t> Fn(&Ctx<'t, f64>) -> Result<Var<'t, f64>>| {
        grad_check_params(f, &store, DEFAULT_EPS, None)
    };
    match name {
        "add" => run(inputs(&[("x", x34()), ("y", y34())]), &|c| project(c.param("x")?.add(c.param("y")?)?, 3)),
        "sub" => run(inputs(&[("x", x34()), ("y", y34())]), &|c| project(c.param("x")?.sub(c.param("y")?)?, 3)),
        "mul" => run(inputs(&[("x", x34()), ("y", y34())]), &|c| project(c.param("x")?.mul(c.param("y")?)?, 3)),
        "div" => run(inputs(&[("x", x34()), ("y", uniform(&[3, 4], 0.5, 1.5, 2))]), &|c| {
            project(c.param("x")?.div(c.param("y")?)?, 3)
        }),
        "scale" => run(inputs(&[("x", x34())]), &|c| project(c.param("x")?.scale(-1.7)?, 3)),
        "add_scalar" => run(inputs(&[("x", x34())]), &|c| project(c.param("x")?.add_scalar(0.3)?, 3)),
        "relu" => run(inputs(&[("x", off_zero(&[3, 4], 1))]), &|c| project(c.param("x")?.relu()?, 3)),
        "gelu" => run(inputs(&[("x", uniform(&[3, 4], -3.0, 3.0, 1))]), &|c| project(c.param("x")?.gelu()?, 3)),
        "sigmoid" => run(inputs(&[("x", uniform(&[3, 4], -3.0, 3.0, 1))]), &|c| project(c.param("x")?.sigmoid()?, 3)),
        "sum" => run(inputs(&[("x", x34())]), &|c| c.param("x")?.sum()),
        "mean" => run(inputs(&[("x", x34())]), &|c| c.param("x")?.mean()),
        "matmul" => run(
            inputs(&[
                ("a", uniform(&[2, 3, 4], -1.0, 1.0, 1)),
                ("b", uniform(&[2, 4, 5], -1.0, 1.0, 2)),
                ("w", uniform(&[4, 2], -1.0, 1.0, 4)),
            ]),
            &|c| {
                let a = c.param("a")?;
                project(a.matmul(c.param("b")?)?, 3)?.add(project(a.matmul(c.param("w")?)?, 5)?)
            },
        ),
        "bias_add" => run(inputs(&[("x", uniform(&[2, 3, 5], -1.0, 1.0, 1)), ("b", uniform(&[5], -1.0, 1.0, 2))]), &|c| {
            project(c.param("x")?.bias_add(c.param("b")?)?, 3)
        }),
        "expand" => run(inputs(&[("x", uniform(&[1, 3, 1], -1.0, 1.0, 1))]), &|c| {
            project(c.param("x")?.expand(&[4, 3, 2])?, 3)
        }),
        "reshape" => run(inputs(&[("x", uniform(&[2, 3, 4], -1.0, 1.0, 1))]), &|c| {
            project(c.param("x")?.reshape(&[6, 4])?, 3)
        }),
        "permute" => run(inputs(&[("x", uniform(&[2, 3, 4], -1.0, 1.0, 1))]), &|c| {
            project(c.param("x")?.permute(&[2, 0, 1])?, 3)
        }),
        "concat" => run(
            inputs(&[("x", uniform(&[2, 3, 2], -1.0, 1.0, 1)), ("y", uniform(&[2, 1, 2], -1.0, 1.0, 2))]),
            &|c| project(concat(&[c.param("x")?, c.param("y")?, c.param("x")?], 1)?, 3),
        ),
        "slice" => run(inputs(&[("x", uniform(&[2, 5, 3], -1.0, 1.0, 1))]), &|c| {
            project(c.param("x")?.slice(1, 1, 3)?, 3)
        }),
        "gather" => {
            let index = Rc::new(vec![0, 5, 5, GATHER_ZERO, 2, 1, 3, GATHER_ZERO, 0, 4]);
            run(inputs(&[("x", uniform(&[6], -1.0, 1.0, 1))]), &move |c| {
                project(c.param("x")?.gather(&[2, 5], index.clone())?, 3)
            })
        }
        "conv2d" => run(
            inputs(&[
                ("x", uniform(&[2, 4, 5, 7], -1.0, 1.0, 1)),
                ("w", uniform(&[3, 4, 3, 3], -1.0, 1.0, 2)),
                ("b", uniform(&[3], -1.0, 1.0, 4)),
                ("dw", uniform(&[4, 1, 3, 3], -1.0, 1.0, 5)),
            ]),
            &|c| {
                let x = c.param("x")?;
                let dense = Conv2dOpts { stride: 2, pad: 1, groups: 1 };
                let depthwise = Conv2dOpts { stride: 1, pad: 1, groups: 4 };
                project(x.conv2d(c.param("w")?, Some(c.param("b")?), dense)?, 3)?
                    .add(project(x.conv2d(c.param("dw")?, None, depthwise)?, 6)?)
            },
        ),
        "layer_norm" => run(
            inputs(&[
                ("x", uniform(&[4, 6], -1.0, 1.0, 1)),
                ("g", uniform(&[6], 0.5, 1.5, 2)),
                ("b", uniform(&[6], -0.5, 0.5, 4)),
            ]),
            &|c| project(c.param("x")?.layer_norm(c.param("g")?, c.param("b")?, 1e-6)?, 3),
        ),
        "softmax" => run(inputs(&[("x", uniform(&[2, 3, 4], -2.0, 2.0, 1))]), &|c| {
            let x = c.param("x")?;
            project(x.softmax(1)?, 3)?.add(project(x.softmax(2)?, 5)?)
        }),
        "resize_bilinear" => run(inputs(&[("x", uniform(&[1, 2, 3, 4], -1.0, 1.0, 1))]), &|c| {
            let x = c.param("x")?;
            project(x.resize_bilinear(7, 5)?, 3)?.add(project(x.resize_bilinear(2, 2)?, 5)?)
        }),
        "bce_with_logits" => {
            let target = Tensor::from_fn(&[3, 4], |i| (i % 3 == 0) as u8 as f64);
            run(inputs(&[("x", uniform(&[3, 4], -3.0, 3.0, 1))]), &move |c| c.param("x")?.bce_with_logits(&target))
        }
        other => Err(Error::Contract(format!("no gradient check for op `{other}`"))),
    }
}

/// Finite-difference check of a whole model with BCE on a `1 x C x 16 x 16`
/// input, at [`well_conditioned`] parameters drawn from `seed`.
pub fn end_to_end_check(
    model: &crate::model::ModelConfig,
    seed: u64,
    max_per_tensor: Option<usize>,
) -> Result<GradReport> {
    let params = well_conditioned(&model.init(seed)?, seed + 1);
    let c = model.encoder.in_channels;
    let image = uniform(&[1, c, 16, 16], 0.0, 1.0, seed + 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
    let target = Tensor::from_fn(&[1, 1, 16, 16], |_| rng.random_bool(0.4) as u8 as f64);
    grad_check_params(
        |ctx| {
            let x = ctx.tape.constant(image.clone());
            crate::model::forward(ctx, model, x)?.logits.bce_with_logits(&target)
        },
        &params,
        NETWORK_EPS,
        max_per_tensor,
    )
}
