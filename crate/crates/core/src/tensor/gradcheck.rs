use super::{Tape, Tensor, TensorError, Var};

/// Denominator floor for relative errors, so entries whose true gradient
/// is essentially zero are judged on absolute error instead.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub param: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }
}

fn eval_loss<E, F>(f: &F, params: &[Tensor]) -> Result<f64, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let loss = f(&mut tape, &vars)?;
    Ok(tape.value(loss)[0])
}

/// Compares tape gradients of `f` against central differences with the
/// given `step`, reporting `|a − n| / max(|a|, |n|, 1e-6)` per parameter.
///
/// `f` receives the tape and one bound var per entry of `params` and must
/// return a single-element loss.
pub fn grad_check<E, F>(f: F, params: &[Tensor], step: f64, tolerance: f64) -> Result<GradCheckReport, E>
where
    E: From<TensorError>,
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss).map_err(E::from)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut entries = Vec::with_capacity(params.len());
    for (pi, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.wrt(*var) {
            Some(g) => g.to_vec(),
            None => vec![0.0; params[pi].numel()],
        };
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for k in 0..params[pi].numel() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + step;
            let up = eval_loss(&f, &work)?;
            work[pi].data_mut()[k] = orig - step;
            let down = eval_loss(&f, &work)?;
            work[pi].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let abs = (analytic[k] - numeric).abs();
            let rel = abs / analytic[k].abs().max(numeric.abs()).max(REL_FLOOR);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
        }
        entries.push(GradCheckEntry {
            param: pi,
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            passed: max_rel <= tolerance,
        });
    }
    Ok(GradCheckReport { entries, tolerance })
}
