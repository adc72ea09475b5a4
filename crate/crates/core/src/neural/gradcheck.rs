use super::params::ParamSet;
use super::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    /// `|analytic - numeric| / max(|analytic|, |numeric|, floor)` in the
    /// Frobenius norm.
    pub rel_error: f64,
    pub analytic_norm: f64,
}

/// Norm below which a gradient counts as zero when forming relative errors.
pub const NORM_FLOOR: f64 = 1e-7;

/// Compares tape gradients against central differences with step `h` for
/// every entry of every parameter.
pub fn check_gradients(params: &ParamSet, h: f64, build: impl Fn(&mut Tape, &ParamSet) -> Var) -> Vec<TensorCheck> {
    let mut tape = Tape::new();
    let loss = build(&mut tape, params);
    let grads = tape.backward(loss, params.len());
    let eval = |p: &ParamSet| {
        let mut t = Tape::new();
        let l = build(&mut t, p);
        t.scalar(l)
    };
    let mut work = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let n = params.values[i].len();
        let mut diff2 = 0.0;
        let mut ana2 = 0.0;
        let mut num2 = 0.0;
        for k in 0..n {
            let orig = params.values[i].as_slice().unwrap()[k];
            work.values[i].as_slice_mut().unwrap()[k] = orig + h;
            let fp = eval(&work);
            work.values[i].as_slice_mut().unwrap()[k] = orig - h;
            let fm = eval(&work);
            work.values[i].as_slice_mut().unwrap()[k] = orig;
            let num = (fp - fm) / (2.0 * h);
            let ana = grads.0[i].as_ref().map_or(0.0, |g| g.as_slice().unwrap()[k]);
            diff2 += (ana - num) * (ana - num);
            ana2 += ana * ana;
            num2 += num * num;
        }
        let denom = ana2.sqrt().max(num2.sqrt()).max(NORM_FLOOR);
        out.push(TensorCheck {
            name: params.names[i].clone(),
            rel_error: diff2.sqrt() / denom,
            analytic_norm: ana2.sqrt(),
        });
    }
    out
}
