use super::graph::{Graph, Var};
use super::param::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub id: ParamId,
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Relative error of every element, in storage order.
    pub errors: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

fn scalar_loss(g: &Graph, loss: Var) -> Result<f64> {
    g.value(loss)
        .item()
        .map_err(|_| Error::Contract(format!("loss must be scalar, got shape {}", g.value(loss).shape())))
}

/// Compare recorded adjoints against central differences
/// `(f(θ+h) - f(θ-h)) / 2h` for every element of `params`.
///
/// `loss_fn` must be deterministic; gradients in `store` are overwritten.
pub fn check_gradients<F>(mut loss_fn: F, store: &mut ParamStore, params: &[ParamId], h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(Graph, Var)>,
{
    store.zero_grads();
    let (g, loss) = loss_fn(store)?;
    scalar_loss(&g, loss)?;
    let grads = g.backward(loss)?;
    g.accumulate_grads(&grads, store);
    drop(g);

    let mut report = GradCheckReport::default();
    for &id in params {
        let analytic = store.grad(id).to_vec();
        let original = store.value(id).clone();
        let mut perturbed = original.to_vec();
        let mut entry = ParamCheck {
            id,
            name: store.get(id).name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            errors: Vec::with_capacity(perturbed.len()),
        };
        for i in 0..perturbed.len() {
            let x0 = perturbed[i];
            perturbed[i] = x0 + h;
            store.set_value(id, Tensor::new(original.dims().to_vec(), perturbed.clone())?)?;
            let (g, l) = loss_fn(store)?;
            let plus = scalar_loss(&g, l)?;
            perturbed[i] = x0 - h;
            store.set_value(id, Tensor::new(original.dims().to_vec(), perturbed.clone())?)?;
            let (g, l) = loss_fn(store)?;
            let minus = scalar_loss(&g, l)?;
            perturbed[i] = x0;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[i], numeric);
            entry.errors.push(err);
            if err > entry.max_rel_err || i == 0 {
                entry.max_rel_err = err;
                entry.worst_index = i;
                entry.analytic = analytic[i];
                entry.numeric = numeric;
            }
        }
        store.set_value(id, original)?;
        report.entries.push(entry);
    }
    Ok(report)
}
