#![allow(dead_code)]

pub mod checks;
pub mod reference;

use menglan::layers::Mode;
use menglan::model::{ForwardCtx, Regressor};
use menglan::numcore::{Graph, Rng, Tensor};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

/// `|a − n| / max(1, |a|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

pub fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.uniform_vec(n, -1.0, 1.0)).unwrap()
}

fn model_loss(model: &dyn Regressor, x: &Tensor, y: &[f64]) -> f64 {
    let mut g = Graph::new();
    let xv = g.constant_ref(x);
    let mut ctx = ForwardCtx::new(Mode::Train, Rng::new(0));
    let p = model.forward(&mut g, xv, &mut ctx).unwrap();
    let l = g.mse(p, y).unwrap();
    g.value(l).item().unwrap()
}

/// Worst relative error between backprop and central differences over every
/// parameter element of `model` (training mode, dropout expected to be 0).
pub fn model_gradcheck(model: &mut dyn Regressor, x: &Tensor, y: &[f64]) -> (f64, String) {
    let analytic: Vec<Option<Tensor>> = {
        let mut g = Graph::new();
        let xv = g.constant_ref(x);
        let mut ctx = ForwardCtx::new(Mode::Train, Rng::new(0));
        let p = model.forward(&mut g, xv, &mut ctx).unwrap();
        let l = g.mse(p, y).unwrap();
        let grads = g.backward(l).unwrap();
        model
            .named_params()
            .iter()
            .map(|(_, t)| g.param_var(t).and_then(|v| grads.get(v)).cloned())
            .collect()
    };
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let mut worst = (0.0, String::new());
    for (pi, name) in names.iter().enumerate() {
        let len = model.named_params()[pi].1.len();
        for j in 0..len {
            let orig = model.params_mut()[pi].data()[j];
            model.params_mut()[pi].data_mut()[j] = orig + H;
            let lp = model_loss(model, x, y);
            model.params_mut()[pi].data_mut()[j] = orig - H;
            let lm = model_loss(model, x, y);
            model.params_mut()[pi].data_mut()[j] = orig;
            let num = (lp - lm) / (2.0 * H);
            let a = analytic[pi].as_ref().map_or(0.0, |g| g.data()[j]);
            let e = rel_err(a, num);
            if e > worst.0 {
                worst = (e, format!("{name}[{j}] analytic {a} numeric {num}"));
            }
        }
    }
    worst
}

/// `sum(f(inputs) ⊙ R)` for a fixed random `R` shaped like the output.
fn weighted_output<F>(inputs: &[Tensor], f: &F, seed: u64) -> (f64, Graph<'static>, Vec<menglan::numcore::Var>, menglan::numcore::Var)
where
    F: Fn(&mut Graph<'static>, &[menglan::numcore::Var]) -> menglan::numcore::Var,
{
    let mut g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars);
    let shape = g.shape(out).to_vec();
    let r = random_tensor(&mut Rng::new(seed), &shape);
    let rv = g.constant(r);
    let prod = g.mul(out, rv).unwrap();
    let loss = g.sum(prod);
    let value = g.value(loss).item().unwrap();
    (value, g, vars, loss)
}

/// Worst relative error of backprop against central differences for every
/// element of every input of `f`.
pub fn op_gradcheck<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph<'static>, &[menglan::numcore::Var]) -> menglan::numcore::Var,
{
    let (_, g, vars, loss) = weighted_output(inputs, &f, 12345);
    let grads = g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let num = (weighted_output(&plus, &f, 12345).0 - weighted_output(&minus, &f, 12345).0) / (2.0 * H);
            worst = worst.max(rel_err(analytic.data()[j], num));
        }
    }
    worst
}
