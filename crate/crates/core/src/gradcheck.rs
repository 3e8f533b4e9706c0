//! Central finite differences, the reference every backward rule is checked
//! against.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
/// Denominator floor used by the graph checkers below.
pub const ABS_FLOOR: f64 = 1e-4;

/// `(f(x+εeᵢ) − f(x−εeᵢ)) / 2ε` for every element of `param`.
pub fn finite_difference_grad(
    mut f: impl FnMut(&Tensor) -> f64,
    param: &Tensor,
    eps: f64,
) -> Tensor {
    assert!(eps > 0.0, "eps must be positive");
    let mut probe = param.clone();
    let mut grad = Tensor::zeros(param.shape());
    for i in 0..param.len() {
        let x = param.data()[i];
        probe.data_mut()[i] = x + eps;
        let hi = f(&probe);
        probe.data_mut()[i] = x - eps;
        let lo = f(&probe);
        probe.data_mut()[i] = x;
        grad.data_mut()[i] = (hi - lo) / (2.0 * eps);
    }
    grad
}

/// Relative error with an absolute floor on the denominator:
/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest element-wise [`rel_err`] between two same-shaped tensors.
pub fn max_rel_err(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| rel_err(x, y, floor))
        .fold(0.0, f64::max)
}

/// Tensor with entries uniform in (−1, 1).
pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("shape matches length")
}

/// Checks `∂ sum(r ⊙ build(inputs)) / ∂ inputs` against central differences,
/// with `r` a random weighting drawn from `rng`. Returns the worst relative
/// error over all input elements.
pub fn check_graph(
    rng: &mut impl Rng,
    inputs: &[Tensor],
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let weighted =
        |vals: &[Tensor], r: Option<&Tensor>| -> Result<(Graph, Vec<Var>, Var, Tensor)> {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
            let out = build(&mut g, &vars)?;
            let r = r.cloned().unwrap_or_else(|| Tensor::zeros(g.shape(out)));
            let rv = g.constant(r.clone());
            let prod = g.mul(out, rv)?;
            let loss = g.sum(prod)?;
            Ok((g, vars, loss, r))
        };
    let shape = weighted(inputs, None)?.3.shape().to_vec();
    let r = random_tensor(rng, &shape);
    let (mut g, vars, loss, _) = weighted(inputs, Some(&r))?;
    g.backward(loss)?;
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = g
            .grad(*v)
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let numeric = finite_difference_grad(
            |t| {
                let mut vals = inputs.to_vec();
                vals[i] = t.clone();
                let (g, _, loss, _) = weighted(&vals, Some(&r)).expect("graph built once already");
                g.value(loss).data()[0]
            },
            &inputs[i],
            DEFAULT_EPS,
        );
        worst = worst.max(max_rel_err(&analytic, &numeric, ABS_FLOOR));
    }
    Ok(worst)
}

/// Like [`check_graph`] for losses over whole parameter stores: `build`
/// receives the stores bound into the graph and returns a scalar. Every
/// tensor of every store is checked.
pub fn check_stores(
    stores: &[ParamStore],
    build: impl Fn(&mut Graph, &[Bound]) -> Result<Var>,
) -> Result<f64> {
    let eval = |stores: &[ParamStore]| -> Result<f64> {
        let mut g = Graph::new();
        let bound: Vec<Bound> = stores.iter().map(|s| s.bind_const(&mut g)).collect();
        let loss = build(&mut g, &bound)?;
        g.value(loss).item()
    };
    let mut g = Graph::new();
    let trainable: Vec<ParamStore> = stores.iter().map(|s| s.clone().unfrozen()).collect();
    let bound: Vec<Bound> = trainable.iter().map(|s| s.bind(&mut g)).collect();
    let loss = build(&mut g, &bound)?;
    g.backward(loss)?;
    let mut worst = 0.0f64;
    for (k, store) in stores.iter().enumerate() {
        let grads = bound[k].gradients(&g);
        for (name, t) in store.iter() {
            let numeric = finite_difference_grad(
                |v| {
                    let mut probe = stores.to_vec();
                    probe[k] = probe[k].clone().unfrozen();
                    *probe[k].get_mut(name).expect("present") = v.clone();
                    eval(&probe).expect("graph built once already")
                },
                t,
                DEFAULT_EPS,
            );
            let analytic = grads
                .get(name)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()));
            worst = worst.max(max_rel_err(&analytic, &numeric, ABS_FLOOR));
        }
    }
    Ok(worst)
}
