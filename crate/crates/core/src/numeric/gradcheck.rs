use crate::error::Result;
use crate::numeric::param::ParamSet;
use crate::numeric::tape::{Tape, Var};

/// Worst relative error found for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamError {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub params: Vec<ParamError>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_err))
    }

    pub fn worst(&self) -> Option<&ParamError> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Compares tape gradients against central differences for every entry of
/// every parameter. The error per entry is
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn gradcheck<F>(params: &mut ParamSet, step: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    assert!(step > 0.0, "gradcheck step must be positive");
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    tape.backward(loss, params)?;
    let analytic: Vec<_> = params.iter().map(|p| p.grad.clone()).collect();

    let eval = |params: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, params)?;
        Ok(tape.value(loss).item())
    };

    let mut report = Vec::with_capacity(params.len());
    for (idx, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let n = params.get(id).value.len();
        let mut worst = 0.0f64;
        for k in 0..n {
            let original = params.get(id).value.as_slice()[k];
            params.get_mut(id).value.as_mut_slice()[k] = original + step;
            let plus = eval(params)?;
            params.get_mut(id).value.as_mut_slice()[k] = original - step;
            let minus = eval(params)?;
            params.get_mut(id).value.as_mut_slice()[k] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[idx].as_slice()[k];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
        report.push(ParamError {
            name: params.get(id).name.clone(),
            entries: n,
            max_rel_err: worst,
        });
    }
    Ok(GradReport { params: report })
}
