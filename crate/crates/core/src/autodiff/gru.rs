//! Gated recurrent layers built from graph primitives.
//!
//! Gate columns are ordered `[z | r | h]`. With zero initial state:
//!
//! ```text
//! z  = sigmoid(x W_z + h U_z + b_z)
//! r  = sigmoid(x W_r + h U_r + b_r)
//! h~ = act(x W_h + (r * h) U_h + b_h)
//! h' = z * h + (1 - z) * h~
//! ```

use alloc::vec::Vec;

use super::{AutodiffError, Graph, Result, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Linear,
}

/// Graph handles for one direction of a recurrent layer:
/// `w: [F, 3U]`, `u: [U, 3U]`, `b: [3U]`.
#[derive(Debug, Clone, Copy)]
pub struct GruWeights {
    pub w: Var,
    pub u: Var,
    pub b: Var,
}

impl Graph {
    /// Run a recurrent layer over `x: [T, F]`, returning `[T, U]`. With
    /// `reverse`, the sequence is read back to front but row `t` of the
    /// output still belongs to input step `t`.
    pub fn gru(&mut self, x: Var, p: GruWeights, act: Activation, reverse: bool) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let us = self.shape(p.u).to_vec();
        if xs.len() != 2 || xs[0] == 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "gru",
                detail: "input must be [T,F] with T >= 1",
            });
        }
        if us.len() != 2 || us[1] != 3 * us[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "gru",
                detail: "recurrent kernel must be [U,3U]",
            });
        }
        let (t_len, u) = (xs[0], us[0]);
        let proj = self.matmul(x, p.w)?;
        let proj = self.add_bias(proj, p.b)?;
        let u_zr = self.slice(p.u, 0, u, 0, 2 * u)?;
        let u_h = self.slice(p.u, 0, u, 2 * u, 3 * u)?;
        let mut h = self.constant(&[1, u], alloc::vec![0.0; u])?;
        let mut outs: Vec<Option<Var>> = alloc::vec![None; t_len];
        for step in 0..t_len {
            let t = if reverse { t_len - 1 - step } else { step };
            let xz = self.slice(proj, t, t + 1, 0, u)?;
            let xr = self.slice(proj, t, t + 1, u, 2 * u)?;
            let xh = self.slice(proj, t, t + 1, 2 * u, 3 * u)?;
            let hzr = self.matmul(h, u_zr)?;
            let hz = self.slice(hzr, 0, 1, 0, u)?;
            let hr = self.slice(hzr, 0, 1, u, 2 * u)?;
            let z = self.add(xz, hz)?;
            let z = self.sigmoid(z)?;
            let r = self.add(xr, hr)?;
            let r = self.sigmoid(r)?;
            let rh = self.mul(r, h)?;
            let cand = self.matmul(rh, u_h)?;
            let cand = self.add(xh, cand)?;
            let cand = match act {
                Activation::Tanh => self.tanh(cand)?,
                Activation::Linear => cand,
            };
            let keep = self.mul(z, h)?;
            let zc = self.one_minus(z)?;
            let new = self.mul(zc, cand)?;
            h = self.add(keep, new)?;
            outs[t] = Some(h);
        }
        let outs: Vec<Var> = outs.into_iter().map(|o| o.unwrap()).collect();
        self.concat_rows(&outs)
    }

    /// Forward and backward layers concatenated per step: `[T, 2U]`.
    pub fn bigru(&mut self, x: Var, fwd: GruWeights, bwd: GruWeights, act: Activation) -> Result<Var> {
        let f = self.gru(x, fwd, act, false)?;
        let b = self.gru(x, bwd, act, true)?;
        self.concat_cols(&[f, b])
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::max_rel_error;
    use super::super::Tensor;
    use super::*;
    use alloc::vec;
    use rand::Rng;

    fn rand_param(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = crate::seed::rng(seed);
        let n = shape.iter().product();
        Tensor::param(shape, (0..n).map(|_| rng.gen_range(-0.8..0.8)).collect()).unwrap()
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn zero_input_zero_bias_stays_zero() {
        let mut g = Graph::new();
        let x = g.constant(&[5, 3], vec![0.0; 15]).unwrap();
        let w = g.leaf(&rand_param(&[3, 6], 1)).unwrap();
        let u = g.leaf(&rand_param(&[2, 6], 2)).unwrap();
        let b = g.constant(&[6], vec![0.0; 6]).unwrap();
        let y = g.gru(x, GruWeights { w, u, b }, Activation::Tanh, false).unwrap();
        assert!(g.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_matches_hand_evaluation() {
        // One unit, one feature: W = [wz, wr, wh], U = [uz, ur, uh].
        let (x, wz, wr, wh, uz, ur, uh, bz, br, bh) = (0.7, 0.3, -0.4, 0.9, 0.5, -0.2, 0.8, 0.1, 0.05, -0.3);
        let mut g = Graph::new();
        let xv = g.constant(&[1, 1], vec![x]).unwrap();
        let w = g.constant(&[1, 3], vec![wz, wr, wh]).unwrap();
        let u = g.constant(&[1, 3], vec![uz, ur, uh]).unwrap();
        let b = g.constant(&[3], vec![bz, br, bh]).unwrap();
        let p = GruWeights { w, u, b };
        let tanh_out = g.gru(xv, p, Activation::Tanh, false).unwrap();
        let lin_out = g.gru(xv, p, Activation::Linear, false).unwrap();
        // h0 = 0, so the recurrent terms vanish on the first step.
        let z = sig(x * wz + bz);
        let cand = x * wh + bh;
        assert!((g.value(tanh_out)[0] - (1.0 - z) * cand.tanh()).abs() < 1e-12);
        assert!((g.value(lin_out)[0] - (1.0 - z) * cand).abs() < 1e-12);

        // Second step exercises the reset gate and recurrent kernel.
        let x2 = -0.6;
        let xs = g.constant(&[2, 1], vec![x, x2]).unwrap();
        let two = g.gru(xs, p, Activation::Tanh, false).unwrap();
        let h1 = (1.0 - z) * cand.tanh();
        let z2 = sig(x2 * wz + h1 * uz + bz);
        let r2 = sig(x2 * wr + h1 * ur + br);
        let c2 = (x2 * wh + (r2 * h1) * uh + bh).tanh();
        let h2 = z2 * h1 + (1.0 - z2) * c2;
        assert!((g.value(two)[0] - h1).abs() < 1e-12);
        assert!((g.value(two)[1] - h2).abs() < 1e-12);
    }

    #[test]
    fn bidirectional_shape_and_alignment() {
        let mut g = Graph::new();
        let x = g.leaf(&rand_param(&[30, 8], 3)).unwrap();
        let mk = |g: &mut Graph, s: u64| GruWeights {
            w: g.leaf(&rand_param(&[8, 96], s)).unwrap(),
            u: g.leaf(&rand_param(&[32, 96], s + 1)).unwrap(),
            b: g.leaf(&rand_param(&[96], s + 2)).unwrap(),
        };
        let f = mk(&mut g, 10);
        let b = mk(&mut g, 20);
        let y = g.bigru(x, f, b, Activation::Tanh).unwrap();
        assert_eq!(g.shape(y), &[30, 64]);

        // The backward half equals a forward pass over the reversed input,
        // reversed back.
        let xr = g.reverse_rows(x).unwrap();
        let rf = g.gru(xr, b, Activation::Tanh, false).unwrap();
        let rf = g.reverse_rows(rf).unwrap();
        for t in 0..30 {
            for k in 0..32 {
                assert_eq!(g.value(y)[t * 64 + 32 + k], g.value(rf)[t * 32 + k]);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let inputs = [
            rand_param(&[4, 3], 30),
            rand_param(&[3, 6], 31),
            rand_param(&[2, 6], 32),
            rand_param(&[6], 33),
            rand_param(&[2, 3], 34),
            rand_param(&[1, 3], 35),
            rand_param(&[3], 36),
        ];
        for act in [Activation::Tanh, Activation::Linear] {
            let err = max_rel_error(&inputs, &|g, v| {
                let h = g.gru(v[0], GruWeights { w: v[1], u: v[2], b: v[3] }, Activation::Tanh, true)?;
                let y = g.gru(h, GruWeights { w: v[4], u: v[5], b: v[6] }, act, false)?;
                let t = g.constant(&[4, 1], vec![0.3, -0.2, 0.5, 0.1])?;
                g.mse(y, t)
            });
            assert!(err < 1e-4, "{err}");
        }
    }
}
