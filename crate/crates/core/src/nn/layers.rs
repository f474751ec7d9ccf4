use super::params::{BoundParams, Init, ParamId, ParamSpecs};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// `y = x·W + b` with `W: [d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(specs: &mut ParamSpecs, name: &str, d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: specs.declare(format!("{name}.weight"), &[d_in, d_out], Init::FanIn(d_in)),
            bias: specs.declare(format!("{name}.bias"), &[d_out], Init::Zeros),
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        let xw = g.matmul(x, p.var(self.weight))?;
        g.add(xw, p.var(self.bias))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<(Linear, Activation)>,
}

impl Mlp {
    /// Layers `dims[0] → dims[1] → …`, `hidden` activation between layers and
    /// `last` after the final one.
    pub fn new(
        specs: &mut ParamSpecs,
        name: &str,
        dims: &[usize],
        hidden: Activation,
        last: Activation,
    ) -> Self {
        let n = dims.len().saturating_sub(1);
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { last } else { hidden };
                (Linear::new(specs, &format!("{name}.{i}"), dims[i], dims[i + 1]), act)
            })
            .collect();
        Mlp { layers }
    }

    pub fn d_in(&self) -> usize {
        self.layers.first().map_or(0, |(l, _)| l.d_in)
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().map_or(0, |(l, _)| l.d_out)
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        let mut h = x;
        for (lin, act) in &self.layers {
            let z = lin.forward(g, p, h)?;
            h = act.apply(g, z)?;
        }
        Ok(h)
    }
}

/// Standard LSTM cell; gate blocks are ordered input, forget, candidate, output.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_h: usize,
}

impl LstmCell {
    pub fn new(specs: &mut ParamSpecs, name: &str, d_in: usize, d_h: usize) -> Self {
        LstmCell {
            w_ih: specs.declare(format!("{name}.w_ih"), &[d_in, 4 * d_h], Init::FanIn(d_in)),
            w_hh: specs.declare(format!("{name}.w_hh"), &[d_h, 4 * d_h], Init::FanIn(d_h)),
            bias: specs.declare(format!("{name}.bias"), &[4 * d_h], Init::Zeros),
            d_in,
            d_h,
        }
    }

    /// One step on a batch: `x: [N, d_in]`, `h, c: [N, d_h]` → `(h', c')`.
    pub fn step(&self, g: &mut Graph, p: &BoundParams, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let xi = self.project_input(g, p, x)?;
        self.step_projected(g, p, xi, h, c)
    }

    /// `x·W_ih + bias`, reusable across steps when the input is constant in time.
    pub fn project_input(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        let xs = g.shape(x);
        if xs.len() != 2 || xs[1] != self.d_in {
            return Err(Error::Shape {
                op: "lstm_cell",
                lhs: xs.to_vec(),
                rhs: vec![self.d_in],
            });
        }
        let xw = g.matmul(x, p.var(self.w_ih))?;
        g.add(xw, p.var(self.bias))
    }

    /// [`LstmCell::step`] with the input projection already applied.
    pub fn step_projected(&self, g: &mut Graph, p: &BoundParams, xi: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let hh = g.matmul(h, p.var(self.w_hh))?;
        let gates = g.add(xi, hh)?;
        let state = g.lstm_gates(gates, c)?;
        let h_next = g.slice(state, 0, self.d_h)?;
        let c_next = g.slice(state, self.d_h, self.d_h)?;
        Ok((h_next, c_next))
    }
}
