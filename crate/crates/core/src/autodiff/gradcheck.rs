//! Central-difference verification of analytic gradients.

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamStore, ParamVars};

/// Outcome of [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    /// Number of scalar elements compared.
    pub checked: usize,
}

fn evaluate<F>(f: &F, params: &ParamStore<f64>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamVars) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let out = f(&mut g, &vars)?;
    let value = g.value(out);
    if value.numel() != 1 {
        return Err(Error::shape("grad_check", format!("objective shape {:?}", value.shape())));
    }
    let v = value.data()[0];
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of the scalar objective `f` against
/// central differences with step `step` for every parameter element.
///
/// The error per element is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &ParamStore<f64>, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamVars) -> Result<Var>,
{
    if !(1e-7..=1e-5).contains(&step) {
        return Err(Error::InvalidArgument(format!("finite-difference step {step} outside [1e-7, 1e-5]")));
    }
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let out = f(&mut g, &vars)?;
    if !g.value(out).is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    let grads = g.backward(out)?;

    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0 };
    for name in names {
        let var = vars.get(&name)?;
        let n = params.get(&name)?.numel();
        let analytic: Vec<f64> = grads.get(var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = probe.get(&name)?.data()[i];
            probe.get_mut(&name)?.data_mut()[i] = orig + step;
            let plus = evaluate(&f, &probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig - step;
            let minus = evaluate(&f, &probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_gradient_is_exact() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let f = |g: &mut Graph<f64>, v: &ParamVars| {
            let x = v.get("x")?;
            let sq = g.mul(x, x)?;
            g.sum(sq)
        };
        let mut g = Graph::new();
        let vars = p.bind(&mut g);
        let out = f(&mut g, &vars).unwrap();
        let grads = g.backward(out).unwrap();
        assert_eq!(grads.get(vars.get("x").unwrap()).unwrap(), &[2.0, 4.0, 6.0]);

        let report = grad_check(f, &p, 1e-6).unwrap();
        assert!(report.max_rel_error <= 1e-8, "{report:?}");
        assert_eq!(report.checked, 3);
    }

    #[test]
    fn rejects_out_of_range_step() {
        let p = ParamStore::<f64>::new();
        let f = |g: &mut Graph<f64>, _: &ParamVars| Ok(g.constant(Tensor::scalar(1.0)));
        assert!(grad_check(f, &p, 1e-3).is_err());
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::new(&[1], vec![0.0]).unwrap());
        let f = |g: &mut Graph<f64>, v: &ParamVars| {
            let x = v.get("x")?;
            g.ln(x, -1.0)
        };
        assert!(grad_check(f, &p, 1e-6).is_err());
    }
}
