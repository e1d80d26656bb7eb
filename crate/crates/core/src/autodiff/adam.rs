//! Bias-corrected Adam.

use alloc::vec::Vec;

use super::{AutodiffError, Result, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    /// Fresh state with `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
    pub fn new(lr: f64, params: &[Tensor]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            first_moment: params.iter().map(|p| alloc::vec![0.0; p.len()]).collect(),
            second_moment: params.iter().map(|p| alloc::vec![0.0; p.len()]).collect(),
        }
    }
}

/// One update of every parameter from its accumulated `grad` (a missing
/// gradient counts as zero). Parameters are visited in slice order.
pub fn adam_step(params: &mut [Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != state.first_moment.len() || params.len() != state.second_moment.len() {
        return Err(AutodiffError::ShapeMismatch {
            op: "adam_step",
            detail: "parameter count differs from optimizer state",
        });
    }
    for (i, p) in params.iter().enumerate() {
        let n = p.len();
        if state.first_moment[i].len() != n
            || state.second_moment[i].len() != n
            || p.grad.as_ref().is_some_and(|g| g.len() != n)
        {
            return Err(AutodiffError::ShapeMismatch {
                op: "adam_step",
                detail: "moment or gradient length differs from parameter",
            });
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let c1 = 1.0 - libm::pow(state.beta1, t as f64);
    let c2 = 1.0 - libm::pow(state.beta2, t as f64);
    for (i, p) in params.iter_mut().enumerate() {
        let Some(g) = p.grad.as_ref() else {
            // Zero gradient: decay the moments, leave the parameter.
            state.first_moment[i].iter_mut().for_each(|m| *m *= state.beta1);
            state.second_moment[i].iter_mut().for_each(|v| *v *= state.beta2);
            apply(&mut p.data, &state.first_moment[i], &state.second_moment[i], state.lr, c1, c2, state.eps);
            continue;
        };
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for j in 0..g.len() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
        }
        apply(&mut p.data, m, v, state.lr, c1, c2, state.eps);
    }
    for p in params.iter() {
        if p.data.iter().any(|x| !x.is_finite()) {
            return Err(AutodiffError::NonFinite { op: "adam_step" });
        }
    }
    Ok(())
}

fn apply(w: &mut [f64], m: &[f64], v: &[f64], lr: f64, c1: f64, c2: f64, eps: f64) {
    for j in 0..w.len() {
        let mh = m[j] / c1;
        let vh = v[j] / c2;
        w[j] -= lr * mh / (libm::sqrt(vh) + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut ps = vec![Tensor::param(&[3], vec![1.0, -2.0, 0.5]).unwrap()];
        ps[0].grad = Some(vec![0.0; 3]);
        let mut st = AdamState::new(1e-3, &ps);
        adam_step(&mut ps, &mut st).unwrap();
        assert_eq!(ps[0].data, vec![1.0, -2.0, 0.5]);
        assert_eq!(st.step_count, 1);
        ps[0].grad = None;
        adam_step(&mut ps, &mut st).unwrap();
        assert_eq!(ps[0].data, vec![1.0, -2.0, 0.5]);
        assert_eq!(st.step_count, 2);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut ps = vec![Tensor::param(&[1], vec![0.0]).unwrap()];
        ps[0].grad = Some(vec![0.5]);
        let mut st = AdamState::new(1e-3, &ps);
        adam_step(&mut ps, &mut st).unwrap();
        // m1 = 0.05, v1 = 0.00025; corrected 0.5 and 0.25.
        let expect = -0.001 * 0.5 / (0.25f64.sqrt() + 1e-8);
        assert!((ps[0].data[0] - expect).abs() < 1e-15);
        assert!((ps[0].data[0] + 0.001).abs() < 1e-6);
    }

    #[test]
    fn quadratic_descends() {
        let mut ps = vec![Tensor::param(&[1], vec![1.0]).unwrap()];
        let mut st = AdamState::new(1e-3, &ps);
        // Reference recurrence evaluated independently.
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut losses = vec![];
        for t in 1..=200 {
            let g = 2.0 * ps[0].data[0];
            losses.push(ps[0].data[0] * ps[0].data[0]);
            ps[0].grad = Some(vec![g]);
            adam_step(&mut ps, &mut st).unwrap();
            let gr = 2.0 * w;
            m = 0.9 * m + 0.1 * gr;
            v = 0.999 * v + 0.001 * gr * gr;
            w -= 1e-3 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        }
        assert!(ps[0].data[0].abs() < 0.9);
        assert!((ps[0].data[0] - w).abs() < 1e-12);
        assert!(losses.windows(2).all(|p| p[1] < p[0]));
    }

    #[test]
    fn shape_errors() {
        let mut ps = vec![Tensor::param(&[2], vec![0.0, 0.0]).unwrap()];
        let mut st = AdamState::new(1e-3, &ps);
        ps[0].grad = Some(vec![1.0]);
        assert!(matches!(adam_step(&mut ps, &mut st), Err(AutodiffError::ShapeMismatch { .. })));
        let mut more = vec![ps[0].clone(), ps[0].clone()];
        assert!(adam_step(&mut more, &mut st).is_err());
    }
}
