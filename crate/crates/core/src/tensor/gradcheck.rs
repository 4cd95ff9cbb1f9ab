use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct ParamError {
    pub id: ParamId,
    pub name: String,
    /// max over entries of |analytic - numeric| / max(1, |numeric|)
    pub max_rel_err: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamError>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err <= self.tol)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamError> {
        self.params.iter().filter(|p| p.max_rel_err > self.tol)
    }
}

fn eval_loss<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let v = tape.value(loss);
    if !v.is_scalar() {
        return Err(Error::Contract("gradient check closure must return a scalar".into()));
    }
    Ok(v.item())
}

/// Gradients of the closure's loss w.r.t. `params`, via the tape.
pub fn analytic_gradients<F>(f: &F, store: &ParamStore, params: &[ParamId]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut scratch = store.clone();
    scratch.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, &scratch)?;
    tape.backward(loss, &mut scratch)?;
    Ok(params.iter().map(|&id| scratch.grad(id).clone()).collect())
}

/// Central differences `(L(p + h) - L(p - h)) / 2h`, one entry at a time.
pub fn numeric_gradients<F>(f: &F, store: &ParamStore, params: &[ParamId], h: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut scratch = store.clone();
    let mut out = Vec::with_capacity(params.len());
    for &id in params {
        let n = scratch.value(id).len();
        let mut g = vec![0.0; n];
        for (k, gk) in g.iter_mut().enumerate() {
            let orig = scratch.value(id).data()[k];
            scratch.value_mut(id).data_mut()[k] = orig + h;
            let plus = eval_loss(f, &scratch)?;
            scratch.value_mut(id).data_mut()[k] = orig - h;
            let minus = eval_loss(f, &scratch)?;
            scratch.value_mut(id).data_mut()[k] = orig;
            *gk = (plus - minus) / (2.0 * h);
        }
        out.push(Tensor::from_parts(scratch.value(id).shape().to_vec(), g));
    }
    Ok(out)
}

pub fn compare_gradients(
    store: &ParamStore,
    params: &[ParamId],
    analytic: &[Tensor],
    numeric: &[Tensor],
    tol: f64,
) -> GradCheckReport {
    let params = params
        .iter()
        .zip(analytic.iter().zip(numeric))
        .map(|(&id, (a, n))| {
            let (worst_index, max_rel_err) = a
                .data()
                .iter()
                .zip(n.data())
                .map(|(av, nv)| (av - nv).abs() / nv.abs().max(1.0))
                .enumerate()
                .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
            ParamError {
                id,
                name: store.get(id).name.clone(),
                max_rel_err,
                worst_index,
            }
        })
        .collect();
    GradCheckReport { tol, params }
}

/// Compares tape gradients against central differences for each parameter.
/// The closure is run twice up front; differing losses mean the oracle
/// cannot be trusted.
pub fn check_gradients<F>(f: F, store: &ParamStore, params: &[ParamId], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let first = eval_loss(&f, store)?;
    let second = eval_loss(&f, store)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::OracleInvalid(format!(
            "closure is non-deterministic: {first} vs {second}"
        )));
    }
    let analytic = analytic_gradients(&f, store, params)?;
    let numeric = numeric_gradients(&f, store, params, h)?;
    Ok(compare_gradients(store, params, &analytic, &numeric, tol))
}
