use super::tape::{ParamId, ParamStore, Tape, Var};
use super::tensor::Tensor;
use super::DiffError;

/// Damped relative error used by every finite-difference comparison here.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + 1e-8)
}

/// Compare the tape gradient of a scalar function against central finite
/// differences at every component of `x`. Returns the maximum of
/// `|analytic - central| / (|analytic| + 1e-8)`.
pub fn gradient_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64, DiffError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, DiffError>,
{
    let eval = |t: &Tensor| -> Result<f64, DiffError> {
        let mut tape = Tape::new();
        let v = tape.leaf(t);
        let out = f(&mut tape, v)?;
        let val = tape.value(out);
        if val.len() != 1 {
            return Err(DiffError::NonScalarLoss {
                shape: val.shape().to_vec(),
            });
        }
        Ok(val.item())
    };

    let mut tape = Tape::new();
    let xv = tape.watched(x);
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .wrt(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let fp = eval(&plus)?;
        let fm = eval(&minus)?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(DiffError::NonFinite {
                context: "finite-difference evaluation",
            });
        }
        let numeric = (fp - fm) / (2.0 * h);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Which parameter entries a pipeline check should probe.
pub struct ParamProbe {
    pub id: ParamId,
    pub elements: Vec<usize>,
}

/// Finite-difference check of a scalar pipeline against the tape gradients of
/// selected parameter entries. `f` must rebuild the full forward pass from the
/// store it is given.
pub fn param_gradient_check<F>(
    store: &ParamStore,
    f: F,
    probes: &[ParamProbe],
    h: f64,
) -> Result<f64, DiffError>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var, DiffError>,
{
    let eval = |s: &ParamStore| -> Result<f64, DiffError> {
        let mut tape = Tape::new();
        let out = f(s, &mut tape)?;
        let val = tape.value(out);
        if val.len() != 1 {
            return Err(DiffError::NonScalarLoss {
                shape: val.shape().to_vec(),
            });
        }
        let v = val.item();
        if !v.is_finite() {
            return Err(DiffError::NonFinite {
                context: "finite-difference evaluation",
            });
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let out = f(store, &mut tape)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    for probe in probes {
        let analytic = grads.param(probe.id);
        for &el in &probe.elements {
            let a = analytic.map(|t| t.data()[el]).unwrap_or(0.0);
            let mut plus = store.clone();
            plus.value_mut(probe.id).data_mut()[el] += h;
            let mut minus = store.clone();
            minus.value_mut(probe.id).data_mut()[el] -= h;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    Ok(worst)
}

/// Pick probe elements for a parameter, preferring entries whose analytic
/// gradient magnitude is largest. Central differences on entries with
/// near-zero gradients measure truncation noise, not backward correctness.
pub fn probe_largest(grad: &Tensor, count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..grad.len()).collect();
    order.sort_by(|&a, &b| {
        grad.data()[b]
            .abs()
            .partial_cmp(&grad.data()[a].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order.truncate(count);
    order
}
