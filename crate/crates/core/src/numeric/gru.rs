use super::{Float, Tape, Tensor, Var};
use crate::error::{Result, SeldError};

/// Weights of one GRU direction. Gate blocks are laid out `[r, z, n]` along
/// the `3H` axis; `w_ih` is `[D, 3H]`, `w_hh` is `[H, 3H]`.
#[derive(Clone, Copy, Debug)]
pub struct GruWeights {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b_ih: Var,
    pub b_hh: Var,
}

impl<T: Float> Tape<T> {
    /// Single-direction GRU over `[B, T, D]`, returning `[B, T, H]`.
    pub fn gru(&mut self, x: Var, w: &GruWeights, reverse: bool) -> Result<Var> {
        let [b, steps, _] = match *self.shape(x) {
            [b, t, d] => [b, t, d],
            ref s => return Err(SeldError::dim("gru", s, &[0, 0, 0])),
        };
        let hidden = self.shape(w.w_hh)[0];
        if self.shape(w.w_hh) != [hidden, 3 * hidden] {
            return Err(SeldError::dim("gru w_hh", self.shape(w.w_hh), &[hidden, 3 * hidden]));
        }
        let xi = self.linear(x, w.w_ih, w.b_ih)?;
        let mut h = self.constant(Tensor::zeros(vec![b, hidden]));
        let mut outs = vec![None; steps];
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for t in order {
            let xt = self.slice(xi, 1, t, 1)?;
            let xt = self.reshape(xt, &[b, 3 * hidden])?;
            let hh = self.linear(h, w.w_hh, w.b_hh)?;
            let gate = |tape: &mut Self, v: Var, k: usize| tape.slice(v, 1, k * hidden, hidden);
            let (xr, xz, xn) = (gate(self, xt, 0)?, gate(self, xt, 1)?, gate(self, xt, 2)?);
            let (hr, hz, hn) = (gate(self, hh, 0)?, gate(self, hh, 1)?, gate(self, hh, 2)?);
            let r = self.add(xr, hr)?;
            let r = self.sigmoid(r);
            let z = self.add(xz, hz)?;
            let z = self.sigmoid(z);
            let rn = self.mul(r, hn)?;
            let n = self.add(xn, rn)?;
            let n = self.tanh(n);
            // h' = (1 - z)·n + z·h = n + z·(h - n)
            let d = self.sub(h, n)?;
            let zd = self.mul(z, d)?;
            h = self.add(n, zd)?;
            outs[t] = Some(self.reshape(h, &[b, 1, hidden])?);
        }
        let outs: Vec<Var> = outs.into_iter().map(|o| o.expect("every step visited")).collect();
        self.concat(&outs, 1)
    }

    /// Bidirectional GRU; forward and backward outputs are concatenated
    /// along the feature axis, giving `[B, T, 2H]`.
    pub fn gru_bidirectional(
        &mut self,
        x: Var,
        forward: &GruWeights,
        backward: &GruWeights,
    ) -> Result<Var> {
        let f = self.gru(x, forward, false)?;
        let r = self.gru(x, backward, true)?;
        self.concat(&[f, r], 2)
    }
}
