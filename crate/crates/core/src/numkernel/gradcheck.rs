use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numkernel::layers::ParamSource;
use crate::numkernel::params::ParameterStore;
use crate::numkernel::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Largest relative error per parameter tensor.
    pub by_param: BTreeMap<String, f64>,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares analytic gradients of the scalar produced by `forward` against
/// central differences with step `h`, over up to `per_param` sampled
/// coordinates of every parameter. Runs in 64-bit on an evaluation tape.
pub fn grad_check<F>(params: &ParameterStore<f64>, forward: F, h: f64, per_param: usize, seed: u64) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Tape<'a, f64>, ParamSource<'a, f64>) -> Result<Var>,
{
    let eval = |store: &ParameterStore<f64>| -> Result<f64> {
        let mut tape = Tape::eval();
        let loss = forward(&mut tape, ParamSource::frozen(store))?;
        Ok(tape.value(loss).item())
    };
    let analytic = {
        let mut tape = Tape::eval();
        let loss = forward(&mut tape, ParamSource::trainable(params))?;
        tape.backward(loss)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, by_param: BTreeMap::new(), worst: None, checked: 0 };
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let n = params.get(&name)?.len();
        let mut coords: Vec<usize> = (0..n).collect();
        coords.shuffle(&mut rng);
        coords.truncate(per_param);
        for i in coords {
            let base = params.get(&name)?.data()[i];
            probe.get_mut(&name)?.data_mut()[i] = base + h;
            let up = eval(&probe)?;
            probe.get_mut(&name)?.data_mut()[i] = base - h;
            let down = eval(&probe)?;
            probe.get_mut(&name)?.data_mut()[i] = base;
            let numeric = (up - down) / (2.0 * h);
            let exact = analytic.get(&name).map(|g| g.data()[i]).unwrap_or(0.0);
            if !numeric.is_finite() || !exact.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}[{i}]")));
            }
            let denom = exact.abs().max(numeric.abs()).max(1e-4);
            let rel = (exact - numeric).abs() / denom;
            report.checked += 1;
            let slot = report.by_param.entry(name.clone()).or_insert(0.0);
            *slot = slot.max(rel);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
