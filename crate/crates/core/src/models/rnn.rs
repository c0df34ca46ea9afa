//! Gated recurrent cells and the bidirectional encoder built from them.

use rand::Rng;

use super::{Batch, Cell};
use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Recurrent state; `c` is the LSTM memory cell.
#[derive(Clone, Copy, Debug)]
pub struct State {
    pub h: Var,
    pub c: Option<Var>,
}

/// One GRU or LSTM cell. Gate pre-activations are `x·Wx + b + h·Wh`.
#[derive(Clone, Debug)]
pub struct RnnCell {
    kind: Cell,
    hidden: usize,
    wx: ParamId,
    wh: ParamId,
    b: ParamId,
}

impl RnnCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        kind: Cell,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let gates = kind.gates() * hidden;
        RnnCell {
            kind,
            hidden,
            wx: store.add_weight(format!("{prefix}.wx"), input, gates, rng),
            wh: store.add_weight(format!("{prefix}.wh"), hidden, gates, rng),
            b: store.add_zeros(format!("{prefix}.b"), vec![gates]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Input projection `x·Wx + b` for `x: [rows, input]`.
    pub fn project(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.wx), tape.param(self.b));
        tape.linear(x, w, Some(b))
    }

    pub fn zero_state(&self, tape: &mut Tape, batch: usize) -> Result<State> {
        let h = tape.constant(Tensor::zeros(vec![batch, self.hidden]))?;
        let c = match self.kind {
            Cell::Gru => None,
            Cell::Lstm => Some(tape.constant(Tensor::zeros(vec![batch, self.hidden]))?),
        };
        Ok(State { h, c })
    }

    /// Starts from hidden state `h` (zero memory cell for LSTM).
    pub fn state_from(&self, tape: &mut Tape, h: Var) -> Result<State> {
        let c = match self.kind {
            Cell::Gru => None,
            Cell::Lstm => {
                let rows = tape.shape(h)[0];
                Some(tape.constant(Tensor::zeros(vec![rows, self.hidden]))?)
            }
        };
        Ok(State { h, c })
    }

    /// One step from a projected input `xp: [B, gates·H]`.
    pub fn step(&self, tape: &mut Tape, xp: Var, state: State) -> Result<State> {
        let h = self.hidden;
        let wh = tape.param(self.wh);
        let hp = tape.matmul(state.h, wh)?;
        match self.kind {
            Cell::Gru => {
                let xrz = tape.slice_last(xp, 0, 2 * h)?;
                let hrz = tape.slice_last(hp, 0, 2 * h)?;
                let pre = tape.add(xrz, hrz)?;
                let rz = tape.sigmoid(pre)?;
                let r = tape.slice_last(rz, 0, h)?;
                let z = tape.slice_last(rz, h, 2 * h)?;
                let xn = tape.slice_last(xp, 2 * h, 3 * h)?;
                let hn = tape.slice_last(hp, 2 * h, 3 * h)?;
                let gated = tape.mul(r, hn)?;
                let pre_n = tape.add(xn, gated)?;
                let n = tape.tanh(pre_n)?;
                // h' = (1 - z)·n + z·h = n + z·(h - n)
                let diff = tape.sub(state.h, n)?;
                let kept = tape.mul(z, diff)?;
                let next = tape.add(n, kept)?;
                Ok(State { h: next, c: None })
            }
            Cell::Lstm => {
                let pre = tape.add(xp, hp)?;
                let ifo_pre = tape.slice_last(pre, 0, 3 * h)?;
                let ifo = tape.sigmoid(ifo_pre)?;
                let g_pre = tape.slice_last(pre, 3 * h, 4 * h)?;
                let g = tape.tanh(g_pre)?;
                let i = tape.slice_last(ifo, 0, h)?;
                let f = tape.slice_last(ifo, h, 2 * h)?;
                let o = tape.slice_last(ifo, 2 * h, 3 * h)?;
                let c_prev = state.c.expect("LSTM state carries a memory cell");
                let keep = tape.mul(f, c_prev)?;
                let write = tape.mul(i, g)?;
                let c = tape.add(keep, write)?;
                let tc = tape.tanh(c)?;
                let next = tape.mul(o, tc)?;
                Ok(State { h: next, c: Some(c) })
            }
        }
    }

    /// Keeps `old` on rows where `take_new` is false.
    fn select(&self, tape: &mut Tape, take_new: &[bool], new: State, old: State) -> Result<State> {
        if take_new.iter().all(|&t| t) {
            return Ok(new);
        }
        let h = tape.where_rows(take_new, new.h, old.h)?;
        let c = match (new.c, old.c) {
            (Some(a), Some(b)) => Some(tape.where_rows(take_new, a, b)?),
            _ => None,
        };
        Ok(State { h, c })
    }
}

/// Per-position states of a bidirectional encoder.
pub struct Encoded {
    /// `[B, n, 2H]`, forward state then backward state at each position.
    pub states: Var,
    /// Forward state after the last real token, `[B, H]`.
    pub fwd_last: Var,
    /// Backward state at position 0, `[B, H]`.
    pub bwd_first: Var,
}

#[derive(Clone, Debug)]
pub struct BiRnn {
    fwd: RnnCell,
    bwd: RnnCell,
}

impl BiRnn {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        kind: Cell,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        BiRnn {
            fwd: RnnCell::new(store, &format!("{prefix}.fwd"), kind, input, hidden, rng),
            bwd: RnnCell::new(store, &format!("{prefix}.bwd"), kind, input, hidden, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.fwd.hidden
    }

    /// Runs both directions over `x: [B·n, input]`. Padding positions leave
    /// the state unchanged, so the backward pass effectively starts at each
    /// sequence's last real token.
    pub fn encode(&self, tape: &mut Tape, x: Var, batch: &Batch) -> Result<Encoded> {
        let (b, n) = (batch.size, batch.width);
        let h = self.hidden();
        let xf = self.fwd.project(tape, x)?;
        let xb = self.bwd.project(tape, x)?;
        let gf = self.fwd.kind.gates() * h;
        let step_rows = |t: usize| -> Vec<usize> {
            (0..b)
                .flat_map(|bi| {
                    let base = (bi * n + t) * gf;
                    base..base + gf
                })
                .collect()
        };

        let mut fwd_states = Vec::with_capacity(n);
        let mut s = self.fwd.zero_state(tape, b)?;
        for t in 0..n {
            let xt = tape.gather(xf, step_rows(t), vec![b, gf])?;
            let next = self.fwd.step(tape, xt, s)?;
            s = self.fwd.select(tape, &batch.column(t), next, s)?;
            fwd_states.push(s.h);
        }
        let fwd_last = s.h;

        let mut bwd_states = vec![fwd_last; n];
        let mut s = self.bwd.zero_state(tape, b)?;
        for t in (0..n).rev() {
            let xt = tape.gather(xb, step_rows(t), vec![b, gf])?;
            let next = self.bwd.step(tape, xt, s)?;
            s = self.bwd.select(tape, &batch.column(t), next, s)?;
            bwd_states[t] = s.h;
        }
        let bwd_first = s.h;

        let parts: Vec<Var> = fwd_states
            .iter()
            .zip(&bwd_states)
            .flat_map(|(&f, &bk)| [f, bk])
            .collect();
        let flat = tape.concat(&parts)?;
        let states = tape.reshape(flat, vec![b, n, 2 * h])?;
        Ok(Encoded {
            states,
            fwd_last,
            bwd_first,
        })
    }
}
