//! Central finite differences, used as the independent oracle for backprop.

use std::collections::BTreeMap;

use super::params::Params;
use super::tensor::Tensor;

/// Numerical gradient of `loss` with respect to every element of every
/// parameter accepted by `select`.
pub fn finite_difference(
    params: &Params<f64>,
    h: f64,
    select: impl Fn(&str) -> bool,
    loss: impl Fn(&Params<f64>) -> f64,
) -> BTreeMap<String, Tensor<f64>> {
    let mut out = BTreeMap::new();
    let mut work = params.clone();
    let names: Vec<String> = params.names().filter(|n| select(n)).cloned().collect();
    for name in names {
        let len = params.get(&name).unwrap().len();
        let mut g = Vec::with_capacity(len);
        for i in 0..len {
            let orig = params.get(&name).unwrap().data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = orig + h;
            let up = loss(&work);
            work.get_mut(&name).unwrap().data_mut()[i] = orig - h;
            let down = loss(&work);
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            g.push((up - down) / (2.0 * h));
        }
        out.insert(
            name.clone(),
            Tensor::new(params.get(&name).unwrap().shape().to_vec(), g),
        );
    }
    out
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`; zero when both vanish.
pub fn relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.data().iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

/// Worst per-parameter relative error; names missing from `analytic` count as zero gradients.
pub fn worst_relative_error(
    analytic: &BTreeMap<String, Tensor<f64>>,
    numeric: &BTreeMap<String, Tensor<f64>>,
) -> (String, f64) {
    let mut worst = (String::new(), 0.0);
    for (name, n) in numeric {
        let zero = Tensor::zeros(n.shape());
        let a = analytic.get(name).unwrap_or(&zero);
        let e = relative_error(a, n);
        if e >= worst.1 {
            worst = (name.clone(), e);
        }
    }
    worst
}
