use crate::autodiff::ParamSet;
use crate::error::Result;

/// Adam moments for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(like: &ParamSet, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            m: like.zeros_like(),
            v: like.zeros_like(),
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One bias-corrected Adam step that *descends* `grads`:
/// `p -= α m̂ / (√v̂ + ε)`. Ascent on a log-probability is expressed by
/// passing its negated gradient.
pub fn adam_update(
    params: &mut ParamSet,
    grads: &ParamSet,
    state: &mut AdamState,
    learning_rate: f64,
) -> Result<()> {
    // layout checks
    params.zeros_like().add_scaled(grads, 0.0)?;
    state.m.zeros_like().add_scaled(grads, 0.0)?;
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let iter = params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut());
    for ((((_, p), (_, g)), (_, m)), (_, v)) in iter {
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= learning_rate * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn one(values: Vec<f64>) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(values)).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = one(vec![1.0, -2.0]);
        let mut s = AdamState::new(&p, 0.9, 0.999, 1e-8);
        adam_update(&mut p, &one(vec![0.0, 0.0]), &mut s, 1e-3).unwrap();
        assert_eq!(p.flatten(), vec![1.0, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradient_decays_moments() {
        let mut p = one(vec![0.0]);
        let mut s = AdamState::new(&p, 0.9, 0.999, 1e-8);
        adam_update(&mut p, &one(vec![2.0]), &mut s, 1e-3).unwrap();
        let (m1, v1) = (s.m.flatten()[0], s.v.flatten()[0]);
        adam_update(&mut p, &one(vec![0.0]), &mut s, 1e-3).unwrap();
        assert_eq!(s.m.flatten()[0], 0.9 * m1);
        assert_eq!(s.v.flatten()[0], 0.999 * v1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = one(vec![0.0, 0.0, 0.0]);
        let mut s = AdamState::new(&p, 0.9, 0.999, 1e-8);
        adam_update(&mut p, &one(vec![3.0, -0.01, 250.0]), &mut s, 1e-3).unwrap();
        for (v, sign) in p.flatten().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((v - sign * 1e-3).abs() < 1e-8, "{v}");
        }
    }
}
