//! Central finite-difference gradient checking.

use super::array::DiffArray;
use super::graph::{Graph, Var};
use crate::error::{Error, Result};

/// Finite-difference step used throughout the verification suites.
pub const FD_STEP: f64 = 1e-4;
/// Guard on the relative-error denominator.
pub const REL_GUARD: f64 = 1e-8;

/// Relative error between an analytic and a numeric derivative.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_GUARD)
}

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// `(input, element)` where the maximum occurred.
    pub worst: (usize, usize),
    pub analytic: Vec<Vec<f64>>,
}

/// Evaluates `f` once with recording to obtain analytic gradients for every
/// input, then perturbs each element by `±step` and compares.
///
/// `fault`, when set, is added to every analytic derivative before the
/// comparison; it exists so negative controls can exercise the failure path.
pub fn check<F>(inputs: &[DiffArray], step: f64, fault: Option<f64>, f: F) -> Result<GradReport>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let eval = |arrays: &[DiffArray]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = arrays.iter().map(|a| g.input(a)).collect();
        let out = f(&g, &vars)?;
        if out.rank() != 0 {
            return Err(Error::rank("gradcheck", 0, &out.shape()));
        }
        Ok(out.item())
    };

    let tracked: Vec<DiffArray> = inputs.iter().cloned().map(DiffArray::with_grad).collect();
    let analytic: Vec<Vec<f64>> = {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = tracked.iter().map(|a| g.input(a)).collect();
        let loss = f(&g, &vars)?;
        let grads = g.backward(loss)?;
        vars.iter()
            .zip(&tracked)
            .map(|(v, a)| {
                let mut d = grads.wrt(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; a.len()]);
                if let Some(delta) = fault {
                    d.iter_mut().for_each(|x| *x += delta);
                }
                d
            })
            .collect()
    };

    let mut work: Vec<DiffArray> = inputs.to_vec();
    let mut max_rel_error = 0.0_f64;
    let mut worst = (0, 0);
    for i in 0..work.len() {
        for j in 0..work[i].len() {
            let orig = work[i].values()[j];
            work[i].values_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].values_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].values_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let e = rel_error(analytic[i][j], numeric);
            if e > max_rel_error || e.is_nan() {
                max_rel_error = if e.is_nan() { f64::INFINITY } else { e };
                worst = (i, j);
            }
        }
    }
    Ok(GradReport {
        max_rel_error,
        worst,
        analytic,
    })
}

/// Finite-difference check of every differentiable op on small random
/// inputs. Each entry is `(op, max relative error)`; every op is reduced to
/// a scalar through a fixed random weighting so no gradient is trivially one.
pub fn op_suite(seed: u64, fault: Option<f64>) -> Result<Vec<(String, f64)>> {
    use rand::{Rng, SeedableRng};
    use std::rc::Rc;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut rand = |shape: &[usize], lo: f64, hi: f64| {
        let n: usize = shape.iter().product();
        DiffArray::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
    };
    let mut out = Vec::new();
    let mut run = |name: &str, inputs: Vec<DiffArray>, f: &dyn for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>| -> Result<()> {
        let r = check(&inputs, FD_STEP, fault, |g, v| f(g, v))?;
        out.push((name.to_string(), r.max_rel_error));
        Ok(())
    };
    // weighted sum: `<x, w>` with the last input as weights
    fn dot<'g>(x: Var<'g>, w: Var<'g>) -> Result<Var<'g>> {
        Ok(x.mul(w)?.sum_all())
    }

    let (a, b, w) = (rand(&[3, 4], -1.0, 1.0), rand(&[4, 2], -1.0, 1.0), rand(&[3, 2], -1.0, 1.0));
    run("matmul", vec![a, b, w], &|_, v| dot(v[0].matmul(v[1])?, v[2]))?;
    let (a, b, w) = (rand(&[2, 3, 4], -1.0, 1.0), rand(&[2, 4, 3], -1.0, 1.0), rand(&[2, 3, 3], -1.0, 1.0));
    run("bmm", vec![a, b, w], &|_, v| dot(v[0].bmm(v[1])?, v[2]))?;
    let (a, c, w) = (rand(&[2, 3], -1.0, 1.0), rand(&[2, 3], -1.0, 1.0), rand(&[2, 3], -1.0, 1.0));
    run("add_sub_mul_scale", vec![a, c, w], &|_, v| dot(v[0].add(v[1])?.mul(v[0].sub(v[1])?)?.scale(1.7), v[2]))?;
    let (a, bias, w) = (rand(&[3, 4], -1.0, 1.0), rand(&[4], -1.0, 1.0), rand(&[3, 4], -1.0, 1.0));
    run("add_bias", vec![a, bias, w], &|_, v| dot(v[0].add_bias(v[1])?, v[2]))?;
    // keep ReLU inputs away from the kink
    let mut r = rand(&[12], 0.05, 1.0);
    r.values_mut().iter_mut().enumerate().for_each(|(i, x)| if i % 2 == 0 { *x = -*x });
    let w = rand(&[12], -1.0, 1.0);
    run("relu", vec![r, w], &|_, v| dot(v[0].relu(), v[1]))?;
    let (a, w) = (rand(&[8], -3.0, 3.0), rand(&[8], -1.0, 1.0));
    run("sigmoid", vec![a, w], &|_, v| dot(v[0].sigmoid(), v[1]))?;
    let (a, w) = (rand(&[3, 5], -2.0, 2.0), rand(&[3, 5], -1.0, 1.0));
    run("softmax", vec![a, w], &|_, v| dot(v[0].softmax_last()?, v[1]))?;
    let (a, gm, bt, w) = (rand(&[3, 6], -2.0, 2.0), rand(&[6], 0.5, 1.5), rand(&[6], -0.5, 0.5), rand(&[3, 6], -1.0, 1.0));
    run("layer_norm", vec![a, gm, bt, w], &|_, v| dot(v[0].layer_norm(v[1], v[2], 1e-5)?, v[3]))?;
    let (a, w) = (rand(&[2, 3, 4], -1.0, 1.0), rand(&[4, 2, 3], -1.0, 1.0));
    run("permute", vec![a, w], &|_, v| dot(v[0].permute(&[2, 0, 1])?, v[1]))?;
    let (a, w) = (rand(&[2, 3, 4], -1.0, 1.0), rand(&[2, 4], -1.0, 1.0));
    run("mean_axis", vec![a, w], &|_, v| dot(v[0].mean_axis(1)?, v[1]))?;
    let (a, c, w) = (rand(&[2, 3], -1.0, 1.0), rand(&[2, 2], -1.0, 1.0), rand(&[2, 5], -1.0, 1.0));
    run("concat", vec![a, c, w], &|_, v| dot(Var::concat_last(&[v[0], v[1]])?, v[2]))?;
    let a = rand(&[3, 3], -1.0, 1.0);
    run("sq_frobenius", vec![a], &|_, v| Ok(v[0].sq_frobenius()))?;
    let (x, k, kb, w) = (rand(&[1, 2, 6, 6], -1.0, 1.0), rand(&[3, 2, 3, 3], -0.5, 0.5), rand(&[3], -0.5, 0.5), rand(&[1, 3, 3, 3], -1.0, 1.0));
    run("conv2d", vec![x, k, kb, w], &|_, v| dot(v[0].conv2d(v[1], Some(v[2]), 2, 1)?, v[3]))?;
    let (x, w) = (rand(&[1, 2, 5, 7], -1.0, 1.0), rand(&[1, 2, 2, 3], -1.0, 1.0));
    run("adaptive_avg_pool", vec![x, w], &|_, v| dot(v[0].adaptive_avg_pool(2, 3)?, v[1]))?;
    let (x, w) = (rand(&[4, 3], -1.0, 1.0), rand(&[5, 3], -1.0, 1.0));
    run("gather_rows", vec![x, w], &|_, v| {
        let idx: Rc<[usize]> = Rc::from(vec![2, 0, 3, 2, 1]);
        dot(v[0].gather_rows(idx)?, v[1])
    })?;
    let p = rand(&[6], -2.0, 2.0);
    run("bce", vec![p], &|_, v| v[0].sigmoid().bce(&[0.0, 1.0, 1.0, 0.0, 1.0, 0.0]))?;
    Ok(out)
}
